//! Rectified flow: `x_t = (1-t)·x₀ + t·ε`, velocity target `v* = ε - x₀`.
//!
//! Sampling integrates `dx/dt = v` with Euler steps from `t = 1` down to
//! the end of a decreasing grid. Training uses *views* of a clip: a random
//! clean prefix of whole blocks, a shared flow time on the rest, and with
//! some probability a fully clean audio track. The same views train the
//! teacher, the Stage I student and the fake score network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{BlockLayout, Visibility};
use crate::model::{clip_segment, forward, predict, segment_masks, Joint, Mode, ModelConfig};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::{accumulate_grads, Adam, AdamConfig, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::synthworld::Clip;

pub const STREAM_VIEW: u64 = 0x5649_4557;
pub const STREAM_SAMPLE: u64 = 0x5341_4d50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimeSampler {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
}

impl TimeSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            TimeSampler::Uniform => rng.uniform(),
            TimeSampler::LogitNormal { mu, sigma } => 1.0 / (1.0 + (-(mu + sigma * rng.normal())).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub teacher_steps: usize,
    /// Per-block student ladder, strictly decreasing, first entry 1.
    pub student_grid: Vec<f64>,
    pub sampler: TimeSampler,
    /// Probability that a training view has a clean audio track.
    pub audio_clean_prob: f64,
    /// Probability that a training view has a clean prefix of whole blocks.
    pub clean_prefix_prob: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            teacher_steps: 32,
            student_grid: vec![1.0, 0.75, 0.5, 0.25],
            sampler: TimeSampler::LogitNormal { mu: 0.0, sigma: 1.0 },
            audio_clean_prob: 0.5,
            clean_prefix_prob: 0.5,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.student_grid;
        let ok = !g.is_empty() && g[0] == 1.0 && g.windows(2).all(|w| w[1] < w[0]) && g.last().is_some_and(|&t| t > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "student grid {g:?} must start at 1 and decrease to a positive time"
            )));
        }
        if self.teacher_steps == 0 {
            return Err(Error::InvalidArgument("teacher steps must be positive".into()));
        }
        for p in [self.audio_clean_prob, self.clean_prefix_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1-t)·x₀ + t·ε`.
pub fn noise(x0: &Tensor<f64>, eps: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
    check_time(t)?;
    x0.zip_map(eps, "noise", |a, e| (1.0 - t) * a + t * e)
}

/// Row-wise noising with one time per row.
pub fn noise_rows(x0: &Tensor<f64>, eps: &Tensor<f64>, times: &[f64]) -> Result<Tensor<f64>> {
    for &t in times {
        check_time(t)?;
    }
    let c = x0.cols();
    let mixed = x0.zip_map(eps, "noise", |a, _| a)?;
    Ok(Tensor::from_fn(mixed.shape().to_vec(), |i| {
        let t = times[i / c];
        (1.0 - t) * x0.data()[i] + t * eps.data()[i]
    }))
}

pub fn velocity_target(x0: &Tensor<f64>, eps: &Tensor<f64>) -> Result<Tensor<f64>> {
    eps.zip_map(x0, "velocity_target", |e, a| e - a)
}

/// Clean estimate `x_t - t·v`.
pub fn denoise(xt: &Tensor<f64>, v: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
    xt.zip_map(v, "denoise", |x, v| x - t * v)
}

/// Row-wise clean estimate `x_t - t_row·v`.
pub fn denoise_rows(xt: &Tensor<f64>, v: &Tensor<f64>, times: &[f64]) -> Result<Tensor<f64>> {
    let c = xt.cols();
    let out = xt.zip_map(v, "denoise", |x, _| x)?;
    Ok(Tensor::from_fn(out.shape().to_vec(), |i| xt.data()[i] - times[i / c] * v.data()[i]))
}

/// Clean estimates of both streams of `x` under `vis`.
pub fn predict_clean(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    x: &Joint<f64>,
    condition: usize,
    vis: &Visibility,
) -> Result<Joint<f64>> {
    let (vv, va) = predict(cfg, params, x, condition, vis)?;
    Ok(Joint::at_time(
        denoise_rows(&x.video, &vv, &x.video_times)?,
        denoise_rows(&x.audio, &va, &x.audio_times)?,
        0.0,
    ))
}

/// `[1, 1-1/N, …, 1/N, 0]`.
pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Euler integration of `velocity` along a decreasing `grid`. With
/// `clamp_audio`, the audio stream is held at that clean value with time 0
/// and only video is integrated.
pub fn euler_sample(
    x1: Joint<f64>,
    grid: &[f64],
    clamp_audio: Option<&Tensor<f64>>,
    mut velocity: impl FnMut(&Joint<f64>) -> Result<(Tensor<f64>, Tensor<f64>)>,
) -> Result<Joint<f64>> {
    let mut x = x1;
    if let Some(a) = clamp_audio {
        x.audio = a.clone();
        x.audio_times.iter_mut().for_each(|t| *t = 0.0);
    }
    for (step, w) in grid.windows(2).enumerate() {
        let (t, next) = (w[0], w[1]);
        x.video_times.iter_mut().for_each(|v| *v = t);
        if clamp_audio.is_none() {
            x.audio_times.iter_mut().for_each(|v| *v = t);
        }
        let (vv, va) = velocity(&x).map_err(|e| match e {
            Error::NonFinite { .. } => Error::SamplingDiverged { step },
            other => other,
        })?;
        let dt = t - next;
        x.video = x.video.zip_map(&vv, "euler", |a, b| a - dt * b)?;
        if clamp_audio.is_none() {
            x.audio = x.audio.zip_map(&va, "euler", |a, b| a - dt * b)?;
        }
        if !x.video.is_finite() || !x.audio.is_finite() {
            return Err(Error::SamplingDiverged { step });
        }
    }
    let end = *grid.last().unwrap_or(&0.0);
    x.video_times.iter_mut().for_each(|v| *v = end);
    if clamp_audio.is_none() {
        x.audio_times.iter_mut().for_each(|v| *v = end);
    }
    Ok(x)
}

/// Euler integration from `t = 0` up to `t = 1` (data to noise).
pub fn euler_invert(
    x0: Joint<f64>,
    steps: usize,
    mut velocity: impl FnMut(&Joint<f64>) -> Result<(Tensor<f64>, Tensor<f64>)>,
) -> Result<Joint<f64>> {
    let mut x = x0;
    for i in 0..steps {
        let t = i as f64 / steps as f64;
        let dt = 1.0 / steps as f64;
        x.video_times.iter_mut().for_each(|v| *v = t);
        x.audio_times.iter_mut().for_each(|v| *v = t);
        let (vv, va) = velocity(&x).map_err(|_| Error::SamplingDiverged { step: i })?;
        x.video = x.video.zip_map(&vv, "invert", |a, b| a + dt * b)?;
        x.audio = x.audio.zip_map(&va, "invert", |a, b| a + dt * b)?;
    }
    Ok(x)
}

/// Standard-normal starting point for a clip of `frames` frames.
pub fn initial_noise(cfg: &ModelConfig, frames: usize, seed: u64, stream: u64) -> Joint<f64> {
    let mut rng = Rng::keyed(seed, &[STREAM_SAMPLE, stream]);
    let video = rng.normal_tensor(vec![frames, cfg.d_v], 1.0);
    let audio = rng.normal_tensor(vec![frames * cfg.tokens_per_frame, cfg.d_a], 1.0);
    Joint::at_time(video, audio, 1.0)
}

/// Whole-clip Euler sample of `model` under `vis` with `steps` uniform steps.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    vis: &Visibility,
    steps: usize,
    condition: usize,
    seed: u64,
    clamp_audio: Option<&Tensor<f64>>,
) -> Result<Joint<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one sampling step is required".into()));
    }
    let x1 = initial_noise(cfg, vis.layout.num_video_frames, seed, 0);
    euler_sample(x1, &uniform_grid(steps), clamp_audio, |x| predict(cfg, params, x, condition, vis))
}

/// One noised training view of a clip.
#[derive(Clone, Debug)]
pub struct View {
    pub xt: Joint<f64>,
    pub x0: Joint<f64>,
    pub eps: Joint<f64>,
    /// Whole blocks kept clean at the front.
    pub clean_blocks: usize,
    pub tau: f64,
    pub audio_clean: bool,
}

impl View {
    /// Visibility a causal student should use on this view.
    pub fn student_visibility(&self, layout: BlockLayout) -> Visibility {
        Visibility::streaming(layout, self.clean_blocks)
    }
}

/// Draws a view. `x0` is the clean clip; fresh noise comes from `rng`.
pub fn make_view(clip: &Clip, layout: &BlockLayout, flow: &FlowConfig, rng: &mut Rng) -> Result<View> {
    let nb = layout.num_blocks();
    let clean_blocks = if nb > 1 && rng.bernoulli(flow.clean_prefix_prob) {
        rng.below(nb)
    } else {
        0
    };
    let audio_clean = rng.bernoulli(flow.audio_clean_prob);
    let tau = flow.sampler.sample(rng).clamp(1e-4, 1.0);
    let (f, r) = (layout.frames_per_block, layout.tokens_per_frame);
    let video_times: Vec<f64> = (0..clip.video.rows())
        .map(|t| if t / f < clean_blocks { 0.0 } else { tau })
        .collect();
    let audio_times: Vec<f64> = (0..clip.audio.rows())
        .map(|s| if audio_clean || s / (r * f) < clean_blocks { 0.0 } else { tau })
        .collect();
    let ev = rng.normal_tensor(clip.video.shape().to_vec(), 1.0);
    let ea = rng.normal_tensor(clip.audio.shape().to_vec(), 1.0);
    let xt = Joint {
        video: noise_rows(&clip.video, &ev, &video_times)?,
        audio: noise_rows(&clip.audio, &ea, &audio_times)?,
        video_times: video_times.clone(),
        audio_times: audio_times.clone(),
    };
    Ok(View {
        xt,
        x0: Joint {
            video: clip.video.clone(),
            audio: clip.audio.clone(),
            video_times: vec![0.0; video_times.len()],
            audio_times: vec![0.0; audio_times.len()],
        },
        eps: Joint {
            video: ev,
            audio: ea,
            video_times,
            audio_times,
        },
        clean_blocks,
        tau,
        audio_clean,
    })
}

/// Mean squared error between `pred` and `target` over rows with positive
/// time, as a graph scalar. `None` when no row is noisy.
pub fn masked_mse(g: &mut Graph<f64>, pred: Var, target: &Tensor<f64>, times: &[f64]) -> Result<Option<Var>> {
    let c = target.cols();
    let noisy = times.iter().filter(|&&t| t > 0.0).count();
    if noisy == 0 {
        return Ok(None);
    }
    let w = Tensor::from_fn(target.shape().to_vec(), |i| if times[i / c] > 0.0 { 1.0 } else { 0.0 });
    let tgt = g.constant(target.clone())?;
    let wv = g.constant(w)?;
    let diff = g.sub(pred, tgt)?;
    let diff = g.mul(diff, wv)?;
    let s = g.sum_sq(diff)?;
    Ok(Some(g.scale(s, 1.0 / (noisy * c) as f64)?))
}

/// `λ_v·mse_v + λ_a·mse_a` of a model's velocity on a view against explicit
/// targets. Returns the loss node and its two components.
#[allow(clippy::too_many_arguments)]
pub fn velocity_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    params: &crate::numerics::optim::Bound,
    view: &View,
    vis: &Visibility,
    condition: usize,
    target: (&Tensor<f64>, &Tensor<f64>),
    weights: (f64, f64),
) -> Result<(Var, f64, f64)> {
    let seg = clip_segment(g, &view.xt, condition, false)?;
    let masks = segment_masks::<f64>(vis, &seg, None);
    let out = forward(g, cfg, params, &seg, &masks, None)?;
    let lv = masked_mse(g, out.video, target.0, &view.xt.video_times)?;
    let la = masked_mse(g, out.audio, target.1, &view.xt.audio_times)?;
    let comp = |g: &Graph<f64>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
    let (cv, ca) = (comp(g, lv), comp(g, la));
    let mut terms = Vec::new();
    if let Some(v) = lv {
        terms.push(g.scale(v, weights.0)?);
    }
    if let Some(a) = la {
        terms.push(g.scale(a, weights.1)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    Ok((loss, cv, ca))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay ends at `adam.lr · final_lr_frac`.
    pub final_lr_frac: f64,
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.adam.lr;
        if step < self.warmup {
            return base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let p = ((step - self.warmup) as f64 / span).min(1.0);
        let lo = base * self.final_lr_frac;
        lo + 0.5 * (base - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 8,
            adam: AdamConfig {
                lr: 2e-3,
                ..Default::default()
            },
            warmup: 100,
            final_lr_frac: 0.05,
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub loss_video: f64,
    pub loss_audio: f64,
}

pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ParamStore<f64>,
    pub log: Vec<StepLog>,
    pub diverged_at: Option<usize>,
}

/// Mean loss and parameter gradients over a batch of views.
pub struct BatchLoss {
    pub grads: BTreeMap<String, Tensor<f64>>,
    pub loss: f64,
    pub loss_video: f64,
    pub loss_audio: f64,
}

/// Visibility a model of `cfg.mode` uses on `view`.
pub fn view_visibility(cfg: &ModelConfig, layout: &BlockLayout, view: &View) -> Visibility {
    match cfg.mode {
        Mode::Bidirectional => Visibility::bidirectional(*layout),
        Mode::CausalStudent => view.student_visibility(*layout),
    }
}

/// Gradients of the weighted velocity regression, averaged over `batch`.
/// Each entry is a view, its condition and its `(video, audio)` target.
pub fn batch_gradients(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    layout: &BlockLayout,
    batch: &[(View, usize, (Tensor<f64>, Tensor<f64>))],
    weights: (f64, f64),
    trainable: impl Fn(&str) -> bool,
) -> Result<BatchLoss> {
    let mut out = BatchLoss {
        grads: BTreeMap::new(),
        loss: 0.0,
        loss_video: 0.0,
        loss_audio: 0.0,
    };
    let scale = 1.0 / batch.len().max(1) as f64;
    for (view, condition, target) in batch {
        let vis = view_visibility(cfg, layout, view);
        let mut g = Graph::new();
        let b = params.bind(&mut g, &trainable)?;
        let (loss, cv, ca) = velocity_loss(&mut g, cfg, &b, view, &vis, *condition, (&target.0, &target.1), weights)?;
        let gr = g.backward(loss)?;
        let pg = b.grads(&g, &gr);
        accumulate_grads(&mut out.grads, pg.into_iter().map(|(k, v)| (k, v.map(|x| x * scale))).collect());
        out.loss += g.value(loss).data()[0] * scale;
        out.loss_video += cv * scale;
        out.loss_audio += ca * scale;
    }
    Ok(out)
}

/// Regression of a model's velocity onto `target(view, condition)` over
/// views of `clips`. Masks follow `cfg.mode`: bidirectional models see
/// everything, students see streaming masks matching the view's clean
/// prefix. Stops at the first non-finite loss or update and returns the
/// last finite parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_regression(
    cfg: &ModelConfig,
    init: ParamStore<f64>,
    clips: &[Clip],
    layout: &BlockLayout,
    flow: &FlowConfig,
    train: &TrainConfig,
    seed: u64,
    weights: (f64, f64),
    trainable: impl Fn(&str) -> bool,
    mut target: impl FnMut(&View, usize) -> Result<(Tensor<f64>, Tensor<f64>)>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    flow.validate()?;
    if clips.is_empty() {
        return Err(Error::InvalidArgument("no training clips".into()));
    }
    let mut params = init;
    let mut opt = Adam::new(train.adam.clone());
    let mut log = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        opt.config.lr = train.lr_at(step);
        let mut rng = Rng::keyed(seed, &[STREAM_VIEW, step as u64]);
        let mut batch = Vec::with_capacity(train.batch);
        for _ in 0..train.batch {
            let clip = &clips[rng.below(clips.len())];
            let view = make_view(clip, layout, flow, &mut rng)?;
            let t = target(&view, clip.condition_id)?;
            batch.push((view, clip.condition_id, t));
        }
        let diverged = |params| TrainOutcome {
            params,
            log: log.clone(),
            diverged_at: Some(step),
        };
        let bl = match batch_gradients(cfg, &params, layout, &batch, weights, &trainable) {
            Ok(bl) if bl.loss.is_finite() => bl,
            Ok(_) | Err(Error::NonFinite { .. }) => return Ok(diverged(params)),
            Err(e) => return Err(e),
        };
        let before = params.clone();
        if opt.step(&mut params, &bl.grads).is_err() || params.iter().any(|(_, t)| !t.is_finite()) {
            return Ok(diverged(before));
        }
        let entry = StepLog {
            step,
            loss: bl.loss,
            loss_video: bl.loss_video,
            loss_audio: bl.loss_audio,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        diverged_at: None,
    })
}

/// Flow-matching training: regression onto `ε - x₀`.
#[allow(clippy::too_many_arguments)]
pub fn train_flow(
    cfg: &ModelConfig,
    init: ParamStore<f64>,
    clips: &[Clip],
    layout: &BlockLayout,
    flow: &FlowConfig,
    train: &TrainConfig,
    seed: u64,
    trainable: impl Fn(&str) -> bool,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    train_regression(
        cfg,
        init,
        clips,
        layout,
        flow,
        train,
        seed,
        (1.0, 1.0),
        trainable,
        |view, _| {
            Ok((
                velocity_target(&view.x0.video, &view.eps.video)?,
                velocity_target(&view.x0.audio, &view.eps.audio)?,
            ))
        },
        on_step,
    )
}
