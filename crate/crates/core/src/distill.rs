//! Distilling the bidirectional teacher into a few-step streaming student.
//!
//! Stage I regresses the causal student's velocity onto the teacher's on
//! identical noised views. Stage II rolls the student out block by block
//! (its own history in the cache), renoises the rollout to a random `τ`, and
//! pushes each stream along the distribution-matching direction
//!
//! ```text
//! g_m = (x̂₀_fake - x̂₀_real) / N_m,   N_m = mean |x̂_m - x̂₀_real,m|
//! ```
//!
//! where `x̂₀_real` is the frozen teacher's clean estimate and `x̂₀_fake` that
//! of a score network trained to follow the student's own samples. The
//! per-stream losses are weighted per sample by reward weights `r_v`, `r_a`.
//!
//! Gradients reach the student only through the final denoising step of
//! each block; committed history enters later blocks through the cache as a
//! constant.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    batch_gradients, make_view, noise, predict_clean, train_regression, velocity_loss, velocity_target, FlowConfig, StepLog, TrainConfig,
    TrainOutcome, View,
};
use crate::masks::{BlockLayout, Visibility};
use crate::model::{is_audio_param, predict, Joint, ModelConfig};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::{accumulate_grads, Adam, AdamConfig, Bound, ParamStore};
use crate::numerics::rng::{stream_key, Rng};
use crate::numerics::tensor::Tensor;
use crate::rewards::{weights_for, RewardConfig, RewardRegistry, AUDIO, SYNC, VISUAL};
use crate::streaming::{run_stream, StreamConfig, StreamState, Traced};
use crate::synthworld::Clip;

const STREAM_STAGE2: u64 = 0x5354_4732;
const STREAM_FAKE: u64 = 0x4641_4b45;
const STREAM_DMD: u64 = 0x444d_4430;
const STREAM_WARMUP: u64 = 0x5741_524d;

/// Metrics behind the video and audio reward weights.
pub const VIDEO_METRICS: [&str; 2] = [VISUAL, SYNC];
pub const AUDIO_METRICS: [&str; 2] = [AUDIO, SYNC];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `N_m` = per-sample mean absolute deviation from the real estimate.
    MeanAbs,
    /// `N_m = 1`.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub gamma_v: f64,
    pub gamma_a: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Fake-score updates per generator update.
    pub fake_ratio: usize,
    /// Recent detached rollouts kept for fake-score updates.
    pub replay: usize,
    /// Clips per fake-score update, drawn from the replay buffer.
    pub fake_batch: usize,
    /// Fake-only rounds before the first generator update.
    pub fake_warmup: usize,
    pub normalization: Normalization,
    pub stage1: TrainConfig,
    /// Joint Stage II steps.
    pub stage2_steps: usize,
    /// Further Stage II steps with the video stream frozen.
    pub stage2_audio_steps: usize,
    pub batch: usize,
    pub generator: AdamConfig,
    pub fake: AdamConfig,
    /// Probability that a rollout is conditioned on a clean audio track
    /// from the data; such rollouts train the video stream only.
    pub audio_conditioned_prob: f64,
    /// Multiplies both stream losses by a weight over all three metrics.
    pub global_weight: bool,
    /// Apply the video loss to rollouts whose audio the student generated.
    /// Off by default: those videos were conditioned on a provisional
    /// look-ahead that is later regenerated.
    pub free_rollout_video_loss: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_a: 1.0,
            gamma_v: 1.0,
            gamma_a: 1.0,
            tau_min: 0.1,
            tau_max: 0.9,
            fake_ratio: 5,
            replay: 64,
            fake_batch: 4,
            fake_warmup: 50,
            normalization: Normalization::MeanAbs,
            stage1: TrainConfig {
                steps: 300,
                ..Default::default()
            },
            stage2_steps: 200,
            stage2_audio_steps: 200,
            batch: 4,
            generator: AdamConfig {
                lr: 2e-5,
                ..Default::default()
            },
            fake: AdamConfig {
                lr: 2e-4,
                ..Default::default()
            },
            audio_conditioned_prob: 1.0,
            global_weight: false,
            free_rollout_video_loss: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_v, self.lambda_a, self.gamma_v, self.gamma_a];
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.fake_ratio < 1 {
            return Err(Error::InvalidArgument("fake-score ratio must be at least 1".into()));
        }
        if !(0.0 < self.tau_min && self.tau_min <= self.tau_max && self.tau_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "renoise range [{}, {}] must lie inside (0, 1)",
                self.tau_min, self.tau_max
            )));
        }
        if self.batch == 0 || self.fake_batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.audio_conditioned_prob) {
            return Err(Error::InvalidArgument("audio_conditioned_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Teacher velocity on a view, with all-open masks.
pub fn teacher_velocity(
    teacher_cfg: &ModelConfig,
    teacher: &ParamStore<f64>,
    layout: &BlockLayout,
    view: &View,
    condition: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    predict(teacher_cfg, teacher, &view.xt, condition, &Visibility::bidirectional(*layout))
}

/// `λ_v·mse_v + λ_a·mse_a` between the student (under `vis`) and the
/// teacher on the same noised view. Returns the loss node and the two
/// unweighted components.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    g: &mut Graph<f64>,
    student_cfg: &ModelConfig,
    student: &Bound,
    teacher_cfg: &ModelConfig,
    teacher: &ParamStore<f64>,
    view: &View,
    vis: &Visibility,
    condition: usize,
    cfg: &DistillConfig,
) -> Result<(Var, f64, f64)> {
    let target = teacher_velocity(teacher_cfg, teacher, &vis.layout, view, condition)?;
    velocity_loss(
        g,
        student_cfg,
        student,
        view,
        vis,
        condition,
        (&target.0, &target.1),
        (cfg.lambda_v, cfg.lambda_a),
    )
}

/// Stage I training of `init` towards the teacher.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    student_cfg: &ModelConfig,
    init: ParamStore<f64>,
    teacher_cfg: &ModelConfig,
    teacher: &ParamStore<f64>,
    clips: &[Clip],
    layout: &BlockLayout,
    flow: &FlowConfig,
    cfg: &DistillConfig,
    seed: u64,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_regression(
        student_cfg,
        init,
        clips,
        layout,
        flow,
        &cfg.stage1,
        seed,
        (cfg.lambda_v, cfg.lambda_a),
        |_| true,
        |view, c| teacher_velocity(teacher_cfg, teacher, layout, view, c),
        on_step,
    )
}

/// A student rollout with the retained final-step graph of every block.
pub struct Rollout {
    pub video: Tensor<f64>,
    pub audio: Tensor<f64>,
    pub condition: usize,
    pub audio_clamped: bool,
    pub blocks: Vec<Traced<f64>>,
}

impl Rollout {
    pub fn clip(&self) -> Clip {
        Clip {
            audio: self.audio.clone(),
            video: self.video.clone(),
            condition_id: self.condition,
        }
    }

    /// Backpropagates surrogate losses with per-element gradients `g_v`,
    /// `g_a` (full-clip shaped) and scales, block by block. Returns
    /// parameter gradients and the summed surrogate value.
    pub fn backward(
        &mut self,
        layout: &BlockLayout,
        video: Option<(&Tensor<f64>, f64)>,
        audio: Option<(&Tensor<f64>, f64)>,
    ) -> Result<(BTreeMap<String, Tensor<f64>>, f64)> {
        let (f, r) = (layout.frames_per_block, layout.tokens_per_frame);
        let mut grads = BTreeMap::new();
        let mut total = 0.0;
        for tr in &mut self.blocks {
            let b = tr.block;
            let g = &mut tr.graph;
            let mut terms = Vec::new();
            if let Some((gv, scale)) = video {
                let gv = gv.slice_rows(b * f, (b + 1) * f);
                terms.push(dmd_surrogate(g, tr.video_hat, &gv, scale)?);
            }
            if let (Some((ga, scale)), Some(ah)) = (audio, tr.audio_hat) {
                let ga = ga.slice_rows(b * f * r, (b + 1) * f * r);
                terms.push(dmd_surrogate(g, ah, &ga, scale)?);
            }
            let Some(mut loss) = terms.pop() else { continue };
            for t in terms {
                loss = g.add(loss, t)?;
            }
            total += g.value(loss).data()[0];
            let gr = g.backward(loss)?;
            accumulate_grads(&mut grads, tr.bound.grads(g, &gr));
        }
        Ok((grads, total))
    }
}

/// Streams `layout.num_blocks()` blocks with the student, keeping graphs.
/// With `audio`, the audio track is clamped and only video is generated.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    layout: BlockLayout,
    grid: &[f64],
    condition: usize,
    seed: u64,
    audio: Option<&Tensor<f64>>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Rollout> {
    let mut state = StreamState::new(cfg, layout, grid, None, condition, seed)?;
    if let Some(a) = audio {
        state = state.with_audio(a.clone())?;
    }
    let mut blocks = Vec::with_capacity(layout.num_blocks());
    while !state.is_done() {
        let (_, tr) = state.step_traced(cfg, params, trainable)?;
        blocks.push(tr);
    }
    Ok(Rollout {
        video: state.committed_video(),
        audio: state.committed_audio(),
        condition,
        audio_clamped: audio.is_some(),
        blocks,
    })
}

/// `(scale/2)·‖x̂ - sg(x̂ - g)‖²`; its gradient with respect to `x̂` is
/// `scale·g`.
///
/// Built as `scale·⟨x̂, g⟩` plus a constant offset, which has the same value
/// and makes the backward pass produce `scale·g` without rounding through
/// `x̂ - (x̂ - g)`.
pub fn dmd_surrogate(g: &mut Graph<f64>, x_hat: Var, grad: &Tensor<f64>, scale: f64) -> Result<Var> {
    let x = g.value(x_hat);
    if x.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "dmd_surrogate",
            left: x.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    let dot: f64 = x.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
    let sq: f64 = grad.data().iter().map(|b| b * b).sum();
    let dir = g.constant(grad.clone())?;
    let prod = g.mul(x_hat, dir)?;
    let lin = g.sum(prod)?;
    let lin = g.scale(lin, scale)?;
    g.add_scalar(lin, 0.5 * scale * sq - scale * dot)
}

/// `(fake - real) / N` with `N` the mean absolute deviation of `sample`
/// from `real` (or 1). `N` is clamped below at `1e-8`.
pub fn dmd_direction(fake: &Tensor<f64>, real: &Tensor<f64>, sample: &Tensor<f64>, mode: Normalization) -> Result<(Tensor<f64>, f64)> {
    let norm = match mode {
        Normalization::None => 1.0,
        Normalization::MeanAbs => {
            let d = sample.zip_map(real, "dmd_norm", |a, b| (a - b).abs())?;
            let n = d.mean();
            if n < 1e-8 {
                log::debug!("DMD normalizer {n:e} clamped to 1e-8");
            }
            n.max(1e-8)
        }
    };
    let g = fake.zip_map(real, "dmd_direction", |f, r| (f - r) / norm)?;
    Ok((g, norm))
}

/// Distribution-matching directions of one sample.
#[derive(Clone, Debug)]
pub struct DmdGrad {
    pub g_v: Tensor<f64>,
    /// `None` when the audio was clamped to data.
    pub g_a: Option<Tensor<f64>>,
    pub norm_v: f64,
    pub norm_a: f64,
    /// Mean squared gap between fake and real clean estimates.
    pub gap_v: f64,
    pub gap_a: f64,
}

/// Real and fake clean estimates of `noised`, and the directions.
#[allow(clippy::too_many_arguments)]
pub fn dmd_gradients(
    score_cfg: &ModelConfig,
    real: &ParamStore<f64>,
    fake: &ParamStore<f64>,
    layout: &BlockLayout,
    sample: &Joint<f64>,
    noised: &Joint<f64>,
    condition: usize,
    audio_clamped: bool,
    mode: Normalization,
) -> Result<DmdGrad> {
    let vis = Visibility::bidirectional(*layout);
    let real_hat = predict_clean(score_cfg, real, noised, condition, &vis)?;
    let fake_hat = predict_clean(score_cfg, fake, noised, condition, &vis)?;
    let (g_v, norm_v) = dmd_direction(&fake_hat.video, &real_hat.video, &sample.video, mode)?;
    let gap_v = fake_hat.video.mse(&real_hat.video);
    let gap_a = fake_hat.audio.mse(&real_hat.audio);
    let (g_a, norm_a) = if audio_clamped {
        (None, 0.0)
    } else {
        let (g, n) = dmd_direction(&fake_hat.audio, &real_hat.audio, &sample.audio, mode)?;
        (Some(g), n)
    };
    Ok(DmdGrad {
        g_v,
        g_a,
        norm_v,
        norm_a,
        gap_v,
        gap_a,
    })
}

/// Per-step Stage II record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub step: usize,
    pub audio_only: bool,
    #[serde(rename = "L_dmd_v")]
    pub l_dmd_v: f64,
    #[serde(rename = "L_dmd_a")]
    pub l_dmd_a: f64,
    pub r_v_mean: f64,
    pub r_a_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub w_clip_rate: f64,
    pub fake_loss: f64,
    /// Mean squared fake/real gap of the clean estimates per stream.
    pub gap_v: f64,
    pub gap_a: f64,
    pub sync_mean: f64,
    /// Batch mean of the audio reward.
    pub audio_mean: f64,
    pub skipped: usize,
}

/// Everything fixed during Stage II.
pub struct Stage2Context<'a> {
    pub student_cfg: &'a ModelConfig,
    /// Configuration of the real and fake score networks.
    pub score_cfg: &'a ModelConfig,
    pub real: &'a ParamStore<f64>,
    pub layout: BlockLayout,
    pub flow: &'a FlowConfig,
    pub distill: &'a DistillConfig,
    pub rewards: &'a RewardConfig,
    pub registry: &'a RewardRegistry,
    /// Source of conditions and of clean audio for conditioned rollouts.
    pub clips: &'a [Clip],
}

/// Mutable Stage II state.
pub struct Stage2State {
    pub student: ParamStore<f64>,
    pub fake: ParamStore<f64>,
    pub generator_opt: Adam,
    pub fake_opt: Adam,
    pub step: usize,
    pub replay: VecDeque<Clip>,
}

impl Stage2State {
    /// Fake score network starts as a copy of the real one.
    pub fn new(student: ParamStore<f64>, real: &ParamStore<f64>, cfg: &DistillConfig) -> Self {
        Self {
            student,
            fake: real.clone(),
            generator_opt: Adam::new(cfg.generator.clone()),
            fake_opt: Adam::new(cfg.fake.clone()),
            step: 0,
            replay: VecDeque::new(),
        }
    }
}

fn median_free_stats(w: &[f64]) -> (f64, f64) {
    w.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// `fake_ratio` flow-matching updates of the fake score on clips drawn
/// from the replay buffer after `samples` join it. Returns the mean loss.
fn fake_updates(ctx: &Stage2Context, state: &mut Stage2State, samples: Vec<Clip>, seed: u64, tag: u64) -> Result<f64> {
    let d = ctx.distill;
    let s = state.step as u64;
    let pool: Vec<Clip> = if d.replay == 0 {
        samples
    } else {
        state.replay.extend(samples);
        while state.replay.len() > d.replay {
            state.replay.pop_front();
        }
        state.replay.iter().cloned().collect()
    };
    let mut loss = 0.0;
    for j in 0..d.fake_ratio {
        let mut rng = Rng::keyed(seed, &[tag, s, j as u64]);
        let picks: Vec<&Clip> = if d.replay == 0 {
            pool.iter().collect()
        } else {
            (0..d.fake_batch).map(|_| &pool[rng.below(pool.len())]).collect()
        };
        let mut batch = Vec::with_capacity(picks.len());
        for clip in picks {
            let view = make_view(clip, &ctx.layout, ctx.flow, &mut rng)?;
            let target = (
                velocity_target(&view.x0.video, &view.eps.video)?,
                velocity_target(&view.x0.audio, &view.eps.audio)?,
            );
            batch.push((view, clip.condition_id, target));
        }
        let bl = batch_gradients(ctx.score_cfg, &state.fake, &ctx.layout, &batch, (1.0, 1.0), |_| true)?;
        state.fake_opt.step(&mut state.fake, &bl.grads)?;
        loss += bl.loss / d.fake_ratio as f64;
    }
    Ok(loss)
}

/// One fake-only round: detached student rollouts feed the replay buffer
/// and the fake score is updated. The step counter is not advanced.
pub fn fake_warmup_round(ctx: &Stage2Context, state: &mut Stage2State, seed: u64, round: usize) -> Result<f64> {
    let d = ctx.distill;
    let stream = StreamConfig {
        grid: ctx.flow.student_grid.clone(),
        capacity_frames: None,
    };
    let mut rng = Rng::keyed(seed, &[STREAM_WARMUP, round as u64]);
    let mut samples = Vec::with_capacity(d.batch);
    for i in 0..d.batch {
        let src = &ctx.clips[rng.below(ctx.clips.len())];
        let audio = rng.bernoulli(d.audio_conditioned_prob).then_some(&src.audio);
        let key = stream_key(&[seed, STREAM_WARMUP, round as u64, i as u64]);
        let out = run_stream(ctx.student_cfg, &state.student, ctx.layout, &stream, src.condition_id, key, audio)?;
        samples.push(Clip {
            audio: out.audio,
            video: out.video,
            condition_id: src.condition_id,
        });
    }
    fake_updates(ctx, state, samples, seed, STREAM_WARMUP ^ (round as u64) << 32)
}

/// One generator update, preceded by `fake_ratio` fake-score updates on
/// the detached rollouts. With `audio_only`, video parameters are held
/// fixed.
pub fn stage2_step(ctx: &Stage2Context, state: &mut Stage2State, seed: u64, audio_only: bool) -> Result<Stage2Log> {
    let d = ctx.distill;
    d.validate()?;
    let s = state.step;
    let layout = ctx.layout;
    let grid = &ctx.flow.student_grid;
    let trainable: &dyn Fn(&str) -> bool = if audio_only { &is_audio_param } else { &|_| true };
    let mut rng = Rng::keyed(seed, &[STREAM_STAGE2, s as u64]);

    let mut rollouts = Vec::with_capacity(d.batch);
    for i in 0..d.batch {
        let src = &ctx.clips[rng.below(ctx.clips.len())];
        let clamp = !audio_only && rng.bernoulli(d.audio_conditioned_prob);
        let roll_seed = stream_key(&[seed, STREAM_STAGE2, s as u64, i as u64]);
        let audio = clamp.then_some(&src.audio);
        rollouts.push(rollout(
            ctx.student_cfg,
            &state.student,
            layout,
            grid,
            src.condition_id,
            roll_seed,
            audio,
            trainable,
        )?);
    }

    // Rewards on the clean rollouts; samples an oracle cannot score are dropped.
    let metrics = [VISUAL, AUDIO, SYNC];
    let mut scores = Vec::new();
    let mut kept = Vec::new();
    for (i, ro) in rollouts.iter().enumerate() {
        let clip = ro.clip();
        let row: Result<Vec<f64>> = metrics.iter().map(|m| ctx.registry.try_score(m, &clip)).collect();
        match row {
            Ok(row) => {
                scores.push(row);
                kept.push(i);
            }
            Err(e) => log::warn!("stage2 step {s}: sample {i} skipped: {e}"),
        }
    }
    let skipped = rollouts.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "stage2 step {s}: every sample failed its reward oracles"
        )));
    }
    let col = |names: &[&str]| -> Vec<Vec<f64>> {
        scores
            .iter()
            .map(|row| {
                names
                    .iter()
                    .map(|n| row[metrics.iter().position(|m| m == n).unwrap_or(0)])
                    .collect()
            })
            .collect()
    };
    let r_v = weights_for(&col(&VIDEO_METRICS), &VIDEO_METRICS, ctx.rewards)?;
    let r_a = weights_for(&col(&AUDIO_METRICS), &AUDIO_METRICS, ctx.rewards)?;
    let global = if d.global_weight {
        Some(weights_for(&scores, &metrics, ctx.rewards)?)
    } else {
        None
    };

    // Fake score follows the student's current samples.
    let samples: Vec<Clip> = kept.iter().map(|&i| rollouts[i].clip()).collect();
    let fake_loss = fake_updates(ctx, state, samples, seed, STREAM_FAKE)?;

    // Generator update.
    let n = kept.len() as f64;
    let mut grads = BTreeMap::new();
    let (mut lv, mut la, mut gap_v, mut gap_a) = (0.0, 0.0, 0.0, 0.0);
    let (mut n_video, mut n_audio) = (0usize, 0usize);
    for (slot, &i) in kept.iter().enumerate() {
        let ro = &mut rollouts[i];
        let mut drng = Rng::keyed(seed, &[STREAM_DMD, s as u64, i as u64]);
        let tau = drng.uniform_range(d.tau_min, d.tau_max);
        let ev: Tensor<f64> = drng.normal_tensor(ro.video.shape().to_vec(), 1.0);
        let ea: Tensor<f64> = drng.normal_tensor(ro.audio.shape().to_vec(), 1.0);
        let sample = Joint::at_time(ro.video.clone(), ro.audio.clone(), 0.0);
        let mut noised = Joint::at_time(noise(&ro.video, &ev, tau)?, noise(&ro.audio, &ea, tau)?, tau);
        if ro.audio_clamped {
            noised.audio = ro.audio.clone();
            noised.audio_times.iter_mut().for_each(|t| *t = 0.0);
        }
        let dg = dmd_gradients(
            ctx.score_cfg,
            ctx.real,
            &state.fake,
            &layout,
            &sample,
            &noised,
            ro.condition,
            ro.audio_clamped,
            d.normalization,
        )?;
        let gw = global.as_ref().map_or(1.0, |w| w.w[slot]);
        let (nv, na) = (ro.video.numel() as f64, ro.audio.numel() as f64);
        let video_term = !audio_only && (ro.audio_clamped || d.free_rollout_video_loss);
        let video = video_term.then(|| (&dg.g_v, d.gamma_v * r_v.w[slot] * gw / (n * nv)));
        let audio = dg.g_a.as_ref().map(|ga| (ga, d.gamma_a * r_a.w[slot] * gw / (n * na)));
        let (pg, _) = ro.backward(&layout, video, audio)?;
        accumulate_grads(&mut grads, pg);
        if video_term {
            lv += 0.5 * dg.g_v.data().iter().map(|x| x * x).sum::<f64>() / nv;
            gap_v += dg.gap_v;
            n_video += 1;
        }
        if let Some(ga) = &dg.g_a {
            la += 0.5 * ga.data().iter().map(|x| x * x).sum::<f64>() / na;
            gap_a += dg.gap_a;
            n_audio += 1;
        }
    }
    if n_video > 0 {
        lv /= n_video as f64;
        gap_v /= n_video as f64;
    }
    if n_audio > 0 {
        la /= n_audio as f64;
        gap_a /= n_audio as f64;
    }
    state.generator_opt.step(&mut state.student, &grads)?;
    state.step += 1;

    let all_w: Vec<f64> = r_v.w.iter().chain(&r_a.w).copied().collect();
    let (w_min, w_max) = median_free_stats(&all_w);
    let sync_col = metrics.iter().position(|m| *m == SYNC).unwrap_or(0);
    let audio_col = metrics.iter().position(|m| *m == AUDIO).unwrap_or(0);
    Ok(Stage2Log {
        step: s,
        audio_only,
        l_dmd_v: lv,
        l_dmd_a: la,
        r_v_mean: r_v.mean(),
        r_a_mean: r_a.mean(),
        w_min,
        w_max,
        w_clip_rate: (r_v.clipped + r_a.clipped) as f64 / all_w.len() as f64,
        fake_loss,
        gap_v,
        gap_a,
        sync_mean: scores.iter().map(|r| r[sync_col]).sum::<f64>() / n,
        audio_mean: scores.iter().map(|r| r[audio_col]).sum::<f64>() / n,
        skipped,
    })
}

/// Outcome of a full Stage II run.
pub struct Stage2Outcome {
    pub student: ParamStore<f64>,
    pub fake: ParamStore<f64>,
    pub log: Vec<Stage2Log>,
    /// Hash of the video parameters when the audio-only phase began and
    /// when it ended.
    pub video_hash_frozen: Option<(String, String)>,
}

/// Joint Stage II steps followed by the audio-only phase.
pub fn train_stage2(
    ctx: &Stage2Context,
    student: ParamStore<f64>,
    seed: u64,
    mut on_step: impl FnMut(&Stage2Log),
) -> Result<Stage2Outcome> {
    let d = ctx.distill;
    let mut state = Stage2State::new(student, ctx.real, d);
    let mut log = Vec::new();
    let mut hashes = None;
    for round in 0..d.fake_warmup {
        let loss = fake_warmup_round(ctx, &mut state, seed, round)?;
        log::debug!("fake warm-up {round}: loss {loss:.5}");
    }
    for k in 0..d.stage2_steps + d.stage2_audio_steps {
        let audio_only = k >= d.stage2_steps;
        if audio_only && hashes.is_none() {
            hashes = Some((state.student.hash_prefix("video."), String::new()));
        }
        let entry = stage2_step(ctx, &mut state, seed, audio_only)?;
        on_step(&entry);
        log.push(entry);
    }
    let video_hash_frozen = hashes.map(|(before, _)| (before, state.student.hash_prefix("video.")));
    Ok(Stage2Outcome {
        student: state.student,
        fake: state.fake,
        log,
        video_hash_frozen,
    })
}

/// Held-out video error of audio-clamped student streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampedMse {
    /// MSE of the mean of the sampled streams against the true video.
    pub sample_mean: f64,
    /// `sample_mean` minus the unbiased across-sample variance over the
    /// sample count: an unbiased estimate of the MSE of the student's
    /// conditional mean, the quantity the Bayes floor bounds.
    pub conditional_mean: f64,
}

/// Errors of the mean of `draws` against `truth`, see [`ClampedMse`].
pub fn mean_estimate_mse(draws: &[Tensor<f64>], truth: &Tensor<f64>) -> Result<ClampedMse> {
    let k = draws.len();
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let mut mean = Tensor::zeros(truth.shape().to_vec());
    for d in draws {
        mean = mean.zip_map(d, "mean", |a, b| a + b / k as f64)?;
    }
    let raw = mean.mse(truth);
    if k == 1 {
        return Ok(ClampedMse {
            sample_mean: raw,
            conditional_mean: raw,
        });
    }
    let spread = draws.iter().map(|d| d.mse(&mean)).sum::<f64>() / (k - 1) as f64;
    Ok(ClampedMse {
        sample_mean: raw,
        conditional_mean: raw - spread / k as f64,
    })
}

/// Video error of the student on held-out clips when the clean audio is
/// given, from `samples` streams per clip, averaged over clips.
pub fn clamped_video_mse(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    layout: BlockLayout,
    grid: &[f64],
    held_out: &[Clip],
    samples: usize,
    seed: u64,
) -> Result<ClampedMse> {
    if held_out.is_empty() || samples == 0 {
        return Err(Error::InvalidArgument("need held-out clips and at least one sample".into()));
    }
    let stream = StreamConfig {
        grid: grid.to_vec(),
        capacity_frames: None,
    };
    let (mut raw, mut cond) = (0.0, 0.0);
    for (i, clip) in held_out.iter().enumerate() {
        let draws = (0..samples)
            .map(|k| {
                let sseed = stream_key(&[seed, i as u64, k as u64]);
                Ok(run_stream(cfg, params, layout, &stream, clip.condition_id, sseed, Some(&clip.audio))?.video)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = mean_estimate_mse(&draws, &clip.video)?;
        raw += e.sample_mean;
        cond += e.conditional_mean;
    }
    let n = held_out.len() as f64;
    Ok(ClampedMse {
        sample_mean: raw / n,
        conditional_mean: cond / n,
    })
}

/// Mean reward of student streams, one per held-out clip with its
/// condition. With `clamp_audio`, each stream is given the clip's audio.
#[allow(clippy::too_many_arguments)]
pub fn mean_stream_reward(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    layout: BlockLayout,
    grid: &[f64],
    registry: &RewardRegistry,
    metric: &str,
    held_out: &[Clip],
    clamp_audio: bool,
    seed: u64,
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::InvalidArgument("need held-out clips".into()));
    }
    let stream = StreamConfig {
        grid: grid.to_vec(),
        capacity_frames: None,
    };
    let mut total = 0.0;
    for (i, src) in held_out.iter().enumerate() {
        let audio = clamp_audio.then_some(&src.audio);
        let out = run_stream(cfg, params, layout, &stream, src.condition_id, stream_key(&[seed, i as u64]), audio)?;
        let clip = Clip {
            audio: out.audio,
            video: out.video,
            condition_id: src.condition_id,
        };
        total += registry.score(metric, &clip)?;
    }
    Ok(total / held_out.len() as f64)
}
