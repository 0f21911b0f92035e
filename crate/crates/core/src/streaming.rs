//! Block-wise streaming generation.
//!
//! Step `b` denoises one block of video noise together with the audio noise
//! of the same block plus a look-ahead span of `W` frames. The clean estimate
//! of the look-ahead span is the *provisional* block: it is returned for
//! inspection but never committed, never cached and never fed back. After
//! denoising, a commit pass runs the committed block at `t = 0` against the
//! cache and appends its keys and values.
//!
//! Initial noise is addressed by absolute frame, so the look-ahead span at
//! step `b` and the current span at step `b + 1` start from the same noise;
//! the committed pass still restarts from that noise rather than from the
//! provisional latent.
//!
//! [`sample_full_recompute`] produces the same samples without a cache by
//! re-running the whole prefix at every denoising step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{BlockLayout, Visibility};
use crate::model::{forward, segment_masks, KvCache, ModelConfig, Segment};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::optim::{Bound, ParamStore};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Scalar, Tensor};

pub const STREAM_VIDEO_INIT: u64 = 0x5649_4e49;
pub const STREAM_AUDIO_INIT: u64 = 0x4155_494e;
pub const STREAM_RENOISE: u64 = 0x5245_4e4f;

/// Default cache capacity in blocks.
pub const DEFAULT_CAPACITY_BLOCKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_index: usize,
    pub wall_ms: f64,
    /// Frames held in the cache once the block is committed.
    pub cache_frames: usize,
    /// Attention multiply-adds spent on the block, commit pass included.
    pub flops: u64,
}

/// Starting noise of frames `frames`, one stream per frame.
pub fn video_noise<T: Scalar>(seed: u64, frames: std::ops::Range<usize>, d_v: usize) -> Tensor<T> {
    let rows: Vec<Tensor<T>> = frames
        .map(|f| Rng::keyed(seed, &[STREAM_VIDEO_INIT, f as u64]).normal_tensor(vec![1, d_v], 1.0))
        .collect();
    concat_or_empty(&rows, d_v)
}

/// Starting noise of the audio tokens aligned with `frames`.
pub fn audio_noise<T: Scalar>(seed: u64, frames: std::ops::Range<usize>, r: usize, d_a: usize) -> Tensor<T> {
    let rows: Vec<Tensor<T>> = frames
        .map(|f| Rng::keyed(seed, &[STREAM_AUDIO_INIT, f as u64]).normal_tensor(vec![r, d_a], 1.0))
        .collect();
    concat_or_empty(&rows, d_a)
}

fn concat_or_empty<T: Scalar>(parts: &[Tensor<T>], cols: usize) -> Tensor<T> {
    if parts.is_empty() {
        return Tensor::zeros(vec![0, cols]);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_rows(&refs).expect("rows share a width")
}

/// Fresh noise injected after step `step` of block `block`.
pub fn renoise<T: Scalar>(
    seed: u64,
    block: usize,
    step: usize,
    video_rows: usize,
    d_v: usize,
    audio_rows: usize,
    d_a: usize,
) -> (Tensor<T>, Tensor<T>) {
    let mut rng = Rng::keyed(seed, &[STREAM_RENOISE, block as u64, step as u64]);
    let v = rng.normal_tensor(vec![video_rows, d_v], 1.0);
    let a = rng.normal_tensor(vec![audio_rows, d_a], 1.0);
    (v, a)
}

/// Runs the few-step ladder on one block.
///
/// `eval(video, audio, t, last)` returns velocities for the noisy rows. Each
/// step forms the clean estimate `x - t·v`; interior steps renoise it to the
/// next grid time with fresh noise, and the last estimate is returned. With
/// `audio_fixed` the audio rows are clean inputs and pass through untouched.
#[allow(clippy::too_many_arguments)]
pub fn denoise_block<T: Scalar>(
    grid: &[f64],
    seed: u64,
    block: usize,
    video: Tensor<T>,
    audio: Tensor<T>,
    audio_fixed: bool,
    mut eval: impl FnMut(&Tensor<T>, &Tensor<T>, f64, bool) -> Result<(Tensor<T>, Tensor<T>)>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (mut xv, mut xa) = (video, audio);
    let (dv, da) = (xv.cols(), xa.cols());
    for (i, &t) in grid.iter().enumerate() {
        let last = i + 1 == grid.len();
        let (vv, va) = eval(&xv, &xa, t, last).map_err(|e| match e {
            Error::NonFinite { .. } => Error::SamplingDiverged { step: i },
            other => other,
        })?;
        let tt = T::from_f64(t);
        let hv = xv.zip_map(&vv, "denoise", |x, v| x - tt * v)?;
        let ha = if audio_fixed {
            xa.clone()
        } else {
            xa.zip_map(&va, "denoise", |x, v| x - tt * v)?
        };
        if !hv.is_finite() || !ha.is_finite() {
            return Err(Error::SamplingDiverged { step: i });
        }
        if last {
            return Ok((hv, ha));
        }
        let next = T::from_f64(grid[i + 1]);
        let keep = T::one() - next;
        let (ev, ea) = renoise::<T>(seed, block, i, hv.rows(), dv, if audio_fixed { 0 } else { ha.rows() }, da);
        xv = hv.zip_map(&ev, "renoise", |x, e| keep * x + next * e)?;
        xa = if audio_fixed {
            ha
        } else {
            ha.zip_map(&ea, "renoise", |x, e| keep * x + next * e)?
        };
    }
    Err(Error::InvalidArgument("empty denoising grid".into()))
}

/// Frames of block `b` and of its look-ahead span, clipped at the end.
pub fn block_spans(layout: &BlockLayout, b: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let f = layout.frames_per_block;
    let cur = b * f..(b + 1) * f;
    let ahead_end = ((b + 1) * f + layout.lookahead).min(layout.num_video_frames);
    (cur, (b + 1) * f..ahead_end)
}

fn check_layout(layout: &BlockLayout) -> Result<()> {
    layout.validate()?;
    if layout.lookahead % layout.frames_per_block != 0 {
        return Err(Error::Layout(format!(
            "streaming needs the look-ahead W={} to be a whole number of blocks of F={}",
            layout.lookahead, layout.frames_per_block
        )));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] >= w[0]) || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument(format!(
            "grid {grid:?} must be non-empty and strictly decreasing in [0, 1]"
        )));
    }
    Ok(())
}

/// Output of one [`StreamState::step`].
#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar> {
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    /// Clean estimate of the look-ahead audio; `None` on the final block or
    /// when `W = 0`.
    pub provisional: Option<Tensor<T>>,
    pub record: BlockRecord,
}

/// Retained graph of the final denoising step of one block.
pub struct Traced<T: Scalar = f64> {
    pub graph: Graph<T>,
    pub bound: Bound,
    /// Clean estimate of the committed video block.
    pub video_hat: Var,
    /// Clean estimate of the committed audio block; `None` with clamped audio.
    pub audio_hat: Option<Var>,
    pub block: usize,
}

/// Committed history, provisional look-ahead block and rolling cache.
#[derive(Clone, Debug)]
pub struct StreamState<T: Scalar = f64> {
    layout: BlockLayout,
    grid: Vec<f64>,
    condition: usize,
    seed: u64,
    next_block: usize,
    video: Vec<Tensor<T>>,
    audio: Vec<Tensor<T>>,
    provisional: Option<Tensor<T>>,
    cache: KvCache<T>,
    audio_source: Option<Tensor<T>>,
}

impl<T: Scalar> StreamState<T> {
    /// `layout.num_video_frames` is the total stream length.
    pub fn new(
        cfg: &ModelConfig,
        layout: BlockLayout,
        grid: &[f64],
        capacity_frames: Option<usize>,
        condition: usize,
        seed: u64,
    ) -> Result<Self> {
        check_layout(&layout)?;
        check_grid(grid)?;
        if layout.tokens_per_frame != cfg.tokens_per_frame {
            return Err(Error::Layout("layout and model disagree on tokens per frame".into()));
        }
        Ok(Self {
            layout,
            grid: grid.to_vec(),
            condition,
            seed,
            next_block: 0,
            video: Vec::new(),
            audio: Vec::new(),
            provisional: None,
            cache: KvCache::new(cfg.depth, cfg.dim, layout.tokens_per_frame, capacity_frames),
            audio_source: None,
        })
    }

    /// Clamps the audio track to `audio` (clean, `t = 0`); only video is
    /// generated.
    pub fn with_audio(mut self, audio: Tensor<T>) -> Result<Self> {
        if audio.rows() != self.layout.num_audio_tokens() {
            return Err(Error::ShapeMismatch {
                op: "with_audio",
                left: audio.shape().to_vec(),
                right: vec![self.layout.num_audio_tokens()],
            });
        }
        self.audio_source = Some(audio);
        Ok(self)
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn next_block(&self) -> usize {
        self.next_block
    }

    pub fn is_done(&self) -> bool {
        self.next_block >= self.layout.num_blocks()
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn provisional(&self) -> Option<&Tensor<T>> {
        self.provisional.as_ref()
    }

    /// Drops the provisional block. Later steps never read it, so this does
    /// not change any committed output.
    pub fn discard_provisional(&mut self) {
        self.provisional = None;
    }

    pub fn evict(&mut self, keep_last_frames: usize) {
        self.cache.evict(keep_last_frames);
    }

    pub fn committed_video(&self) -> Tensor<T> {
        concat_or_empty(&self.video, self.video.first().map_or(0, |t| t.cols()))
    }

    pub fn committed_audio(&self) -> Tensor<T> {
        concat_or_empty(&self.audio, self.audio.first().map_or(0, |t| t.cols()))
    }

    /// Denoises and commits the next block.
    pub fn step(&mut self, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<StepOutput<T>> {
        self.step_impl(cfg, params, None).map(|(out, _)| out)
    }

    /// Like [`step`](Self::step), but the final denoising step of the block
    /// is evaluated in a retained graph with `trainable` parameters, so a
    /// loss on the committed block can be differentiated. Earlier steps and
    /// the cache enter that graph as constants.
    pub fn step_traced(
        &mut self,
        cfg: &ModelConfig,
        params: &ParamStore<T>,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(StepOutput<T>, Traced<T>)> {
        let (out, traced) = self.step_impl(cfg, params, Some(trainable))?;
        let traced = traced.ok_or_else(|| Error::InvalidArgument("final step was not traced".into()))?;
        Ok((out, traced))
    }

    fn step_impl(
        &mut self,
        cfg: &ModelConfig,
        params: &ParamStore<T>,
        trace: Option<&dyn Fn(&str) -> bool>,
    ) -> Result<(StepOutput<T>, Option<Traced<T>>)> {
        if self.is_done() {
            return Err(Error::InvalidArgument(format!(
                "stream already produced all {} blocks",
                self.layout.num_blocks()
            )));
        }
        self.cache.validate()?;
        let b = self.next_block;
        let start = Instant::now();
        let r = self.layout.tokens_per_frame;
        let (cur, ahead) = block_spans(&self.layout, b);
        let n_cur = r * cur.len();
        let zv = video_noise::<T>(self.seed, cur.clone(), cfg.d_v);
        let za = match &self.audio_source {
            Some(a) => a.slice_rows(r * cur.start, r * ahead.end),
            None => audio_noise::<T>(self.seed, cur.start..ahead.end, r, cfg.d_a),
        };
        let fixed = self.audio_source.is_some();
        let vis = Visibility::streaming(self.layout, b);
        let mut flops = 0u64;
        let mut traced = None;
        let cache = &self.cache;
        let condition = self.condition;
        let (hv, ha) = denoise_block(&self.grid, self.seed, b, zv, za, fixed, |xv, xa, t, last| {
            let mut g = Graph::new();
            let tracing = trace.filter(|_| last);
            let p = match tracing {
                Some(f) => params.bind(&mut g, f)?,
                None => params.bind(&mut g, |_| false)?,
            };
            let seg = Segment {
                video: g.constant(xv.clone())?,
                video_frames: cur.clone().collect(),
                video_times: vec![t; xv.rows()],
                audio: g.constant(xa.clone())?,
                audio_tokens: (r * cur.start..r * ahead.end).collect(),
                audio_times: vec![if fixed { 0.0 } else { t }; xa.rows()],
                condition,
            };
            let masks = segment_masks(&vis, &seg, Some(cache));
            let out = forward(&mut g, cfg, &p, &seg, &masks, Some(cache))?;
            flops += g.attention_flops();
            let vel = (g.value(out.video).clone(), g.value(out.audio).clone());
            if tracing.is_some() {
                let neg_t = T::from_f64(-t);
                let sv = g.scale(out.video, neg_t)?;
                let video_hat = g.add(seg.video, sv)?;
                let audio_hat = if fixed {
                    None
                } else {
                    let sa = g.scale(out.audio, neg_t)?;
                    let full = g.add(seg.audio, sa)?;
                    Some(g.slice_rows(full, 0, n_cur)?)
                };
                traced = Some(Traced {
                    graph: g,
                    bound: p,
                    video_hat,
                    audio_hat,
                    block: b,
                });
            }
            Ok(vel)
        })?;
        let committed_audio = ha.slice_rows(0, n_cur);
        let provisional = (ha.rows() > n_cur).then(|| ha.slice_rows(n_cur, ha.rows()));
        flops += self.commit(cfg, params, b, &hv, &committed_audio)?;
        self.video.push(hv.clone());
        self.audio.push(committed_audio.clone());
        self.provisional = provisional.clone();
        self.next_block += 1;
        let out = StepOutput {
            video: hv,
            audio: committed_audio,
            provisional,
            record: BlockRecord {
                block_index: b,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                cache_frames: self.cache.len_frames(),
                flops,
            },
        };
        Ok((out, traced))
    }

    /// Runs the committed block at `t = 0` and appends its keys and values.
    fn commit(&mut self, cfg: &ModelConfig, params: &ParamStore<T>, b: usize, video: &Tensor<T>, audio: &Tensor<T>) -> Result<u64> {
        let r = self.layout.tokens_per_frame;
        let (cur, _) = block_spans(&self.layout, b);
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false)?;
        let seg = Segment {
            video: g.constant(video.clone())?,
            video_frames: cur.clone().collect(),
            video_times: vec![0.0; video.rows()],
            audio: g.constant(audio.clone())?,
            audio_tokens: (r * cur.start..r * cur.end).collect(),
            audio_times: vec![0.0; audio.rows()],
            condition: self.condition,
        };
        let vis = Visibility::streaming(self.layout, b + 1);
        let masks = segment_masks(&vis, &seg, Some(&self.cache));
        let out = forward(&mut g, cfg, &p, &seg, &masks, Some(&self.cache))?;
        self.cache.append(cur.start, cur.len(), out.kv)?;
        Ok(g.attention_flops())
    }
}

/// Committed streams, per-block records and the provisional block emitted
/// at each step.
#[derive(Clone, Debug)]
pub struct StreamOutput<T: Scalar = f64> {
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    pub records: Vec<BlockRecord>,
    pub provisional: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> StreamOutput<T> {
    /// Wall time of the first block.
    pub fn latency_ms(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.wall_ms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub grid: Vec<f64>,
    /// Retained frames; `None` keeps everything.
    pub capacity_frames: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            grid: vec![1.0, 0.75, 0.5, 0.25],
            capacity_frames: None,
        }
    }
}

/// Streams every block of `layout`.
pub fn run_stream<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    layout: BlockLayout,
    stream: &StreamConfig,
    condition: usize,
    seed: u64,
    audio: Option<&Tensor<T>>,
) -> Result<StreamOutput<T>> {
    let mut state = StreamState::new(cfg, layout, &stream.grid, stream.capacity_frames, condition, seed)?;
    if let Some(a) = audio {
        state = state.with_audio(a.clone())?;
    }
    let mut records = Vec::new();
    let mut provisional = Vec::new();
    while !state.is_done() {
        let out = state.step(cfg, params)?;
        records.push(out.record);
        provisional.push(out.provisional);
    }
    Ok(StreamOutput {
        video: state.committed_video(),
        audio: state.committed_audio(),
        records,
        provisional,
    })
}

/// Cache-free reference: every denoising step of block `b` evaluates the
/// committed prefix at `t = 0` together with the noisy block and its
/// look-ahead span under the streaming masks.
pub fn sample_full_recompute<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    layout: BlockLayout,
    grid: &[f64],
    condition: usize,
    seed: u64,
    audio: Option<&Tensor<T>>,
) -> Result<StreamOutput<T>> {
    check_layout(&layout)?;
    check_grid(grid)?;
    let r = layout.tokens_per_frame;
    let mut hist_v = Tensor::zeros(vec![0, cfg.d_v]);
    let mut hist_a = Tensor::zeros(vec![0, cfg.d_a]);
    let mut records = Vec::new();
    let mut provisional = Vec::new();
    for b in 0..layout.num_blocks() {
        let start = Instant::now();
        let (cur, ahead) = block_spans(&layout, b);
        let zv = video_noise::<T>(seed, cur.clone(), cfg.d_v);
        let za = match audio {
            Some(a) => a.slice_rows(r * cur.start, r * ahead.end),
            None => audio_noise::<T>(seed, cur.start..ahead.end, r, cfg.d_a),
        };
        let fixed = audio.is_some();
        let vis = Visibility::streaming(layout, b);
        let mut flops = 0u64;
        let (hv, ha) = denoise_block(grid, seed, b, zv, za, fixed, |xv, xa, t, _| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, |_| false)?;
            let video = Tensor::concat_rows(&[&hist_v, xv])?;
            let aud = Tensor::concat_rows(&[&hist_a, xa])?;
            let mut video_times = vec![0.0; hist_v.rows()];
            video_times.extend(std::iter::repeat_n(t, xv.rows()));
            let mut audio_times = vec![0.0; hist_a.rows()];
            audio_times.extend(std::iter::repeat_n(if fixed { 0.0 } else { t }, xa.rows()));
            let seg = Segment {
                video: g.constant(video)?,
                video_frames: (0..cur.end).collect(),
                video_times,
                audio: g.constant(aud)?,
                audio_tokens: (0..r * ahead.end).collect(),
                audio_times,
                condition,
            };
            let masks = segment_masks::<T>(&vis, &seg, None);
            let out = forward(&mut g, cfg, &p, &seg, &masks, None)?;
            flops += g.attention_flops();
            let (ov, oa) = (g.value(out.video), g.value(out.audio));
            Ok((ov.slice_rows(cur.start, cur.end), oa.slice_rows(r * cur.start, oa.rows())))
        })?;
        let n_cur = r * cur.len();
        hist_v = Tensor::concat_rows(&[&hist_v, &hv])?;
        hist_a = Tensor::concat_rows(&[&hist_a, &ha.slice_rows(0, n_cur)])?;
        provisional.push((ha.rows() > n_cur).then(|| ha.slice_rows(n_cur, ha.rows())));
        records.push(BlockRecord {
            block_index: b,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            cache_frames: 0,
            flops,
        });
    }
    Ok(StreamOutput {
        video: hist_v,
        audio: hist_a,
        records,
        provisional,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Init};

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            d_a: 3,
            d_v: 4,
            tokens_per_frame: 2,
            cond_vocab: 2,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_bookkeeping() {
        let cfg = tiny();
        let p = init_params(&cfg, 1, Init::Dense).unwrap();
        let layout = BlockLayout::new(2, 2, 6, 2).unwrap();
        let mut s = StreamState::new(&cfg, layout, &[1.0, 0.5], None, 0, 3).unwrap();
        let out = s.step(&cfg, &p).unwrap();
        assert_eq!(out.video.shape(), &[2, 4]);
        assert_eq!(out.audio.shape(), &[4, 3]);
        assert_eq!(out.provisional.as_ref().unwrap().shape(), &[4, 3]);
        assert_eq!(s.cache().len_frames(), 2);
        assert_eq!(s.cache().audio_positions().len(), 4);
        s.step(&cfg, &p).unwrap();
        let last = s.step(&cfg, &p).unwrap();
        assert!(last.provisional.is_none());
        assert!(s.is_done());
        assert!(s.step(&cfg, &p).is_err());
    }

    #[test]
    fn partial_block_lookahead_rejected() {
        let cfg = tiny();
        let layout = BlockLayout::new(2, 2, 6, 1).unwrap();
        assert!(StreamState::<f64>::new(&cfg, layout, &[1.0], None, 0, 0).is_err());
    }

    #[test]
    fn single_step_grid_is_one_euler_step() {
        let zv = Tensor::filled(vec![1, 2], 1.0);
        let za = Tensor::filled(vec![2, 2], 2.0);
        let (v, a) = denoise_block(&[1.0], 0, 0, zv, za, false, |xv, xa, _, last| {
            assert!(last);
            Ok((xv.map(|x| 0.5 * x), xa.map(|_| 1.0)))
        })
        .unwrap();
        assert_eq!(v.data(), &[0.5, 0.5]);
        assert_eq!(a.data(), &[1.0; 4]);
    }
}
