//! A linear-Gaussian audio/video latent world with a known audio lead.
//!
//! Audio tokens follow a stationary AR(1) process per dimension:
//! `a_s = ρ·a_{s-1} + sqrt(1-ρ²)·η_s`, so every token has unit variance.
//! Video frame `t` is a condition-specific linear map of the mean of the
//! audio tokens aligned with frames `t ..= min(t+δ, T_v-1)`, plus
//! observation noise:
//!
//! ```text
//! v[t] = G_c · pool_t(a) + σ_obs · ξ_t
//! ```
//!
//! The pool is clipped at the clip end. Each `G_c` is scaled so that the
//! average per-element variance of the signal term is 1 for a full window.
//! Because everything is jointly Gaussian, the best predictor of `v[t]` from
//! the audio visible under a look-ahead window has a closed-form error:
//! [`World::bayes_floor`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

const MIXING_STREAM: u64 = 0x4d49_5849;
const CLIP_STREAM: u64 = 0x434c_4950;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d_a: usize,
    pub d_v: usize,
    pub tokens_per_frame: usize,
    pub num_frames: usize,
    pub lead_delta: usize,
    pub ar_coeff: f64,
    pub obs_noise: f64,
    pub num_conditions: usize,
    pub mixing_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_a: 8,
            d_v: 8,
            tokens_per_frame: 5,
            num_frames: 16,
            lead_delta: 1,
            ar_coeff: 0.9,
            obs_noise: 0.05,
            num_conditions: 4,
            mixing_seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_a == 0 || self.d_v == 0 || self.tokens_per_frame == 0 || self.num_frames == 0 {
            return bad("world extents must be positive".into());
        }
        if self.num_conditions == 0 {
            return bad("at least one condition is required".into());
        }
        if self.lead_delta + 1 > self.num_frames {
            return bad(format!("lead δ={} must be at most T_v-1={}", self.lead_delta, self.num_frames - 1));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return bad(format!("AR coefficient {} outside [0, 1)", self.ar_coeff));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return bad(format!("observation noise {} must be non-negative", self.obs_noise));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_frame * self.num_frames
    }
}

/// One paired sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `T_a × d_a`.
    pub audio: Tensor<f64>,
    /// `T_v × d_v`.
    pub video: Tensor<f64>,
    pub condition_id: usize,
}

/// Result of [`World::sync_lag`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyncEstimate {
    pub lag: i64,
    pub score: f64,
    /// `(k, correlation)` for every lag with enough support.
    pub correlations: Vec<(i64, f64)>,
}

/// Lags probed by [`World::sync_lag`].
pub const SYNC_LAGS: std::ops::RangeInclusive<i64> = -3..=3;

/// A world instance: a config plus its mixing matrices.
#[derive(Clone, Debug)]
pub struct World {
    config: WorldConfig,
    /// `G_c`, each `d_v × d_a`.
    mixing: Vec<Tensor<f64>>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let p_full = pool_variance(config.ar_coeff, config.tokens_per_frame * (config.lead_delta + 1));
        let mixing = (0..config.num_conditions)
            .map(|c| {
                let mut rng = Rng::keyed(config.mixing_seed, &[MIXING_STREAM, c as u64]);
                let g: Tensor<f64> = rng.normal_tensor(vec![config.d_v, config.d_a], 1.0);
                let fro2: f64 = g.data().iter().map(|x| x * x).sum();
                let s = (config.d_v as f64 / (p_full * fro2)).sqrt();
                g.map(|x| x * s)
            })
            .collect();
        Ok(Self { config, mixing })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn mixing(&self, condition: usize) -> &Tensor<f64> {
        &self.mixing[condition]
    }

    fn check_condition(&self, condition: usize) -> Result<()> {
        if condition >= self.config.num_conditions {
            return Err(Error::InvalidArgument(format!(
                "condition {condition} outside 0..{}",
                self.config.num_conditions
            )));
        }
        Ok(())
    }

    /// AR(1) audio track of `num_tokens` tokens.
    pub fn sample_audio(&self, rng: &mut Rng, num_tokens: usize) -> Tensor<f64> {
        let (d, rho) = (self.config.d_a, self.config.ar_coeff);
        let innov = (1.0 - rho * rho).sqrt();
        let mut data = vec![0.0; num_tokens * d];
        for s in 0..num_tokens {
            for k in 0..d {
                let eta = rng.normal();
                data[s * d + k] = if s == 0 { eta } else { rho * data[(s - 1) * d + k] + innov * eta };
            }
        }
        Tensor::from_fn(vec![num_tokens, d], |i| data[i])
    }

    /// Frames whose audio enters the pool of frame `t`, for a clip of `frames` frames.
    fn pool_frames(&self, t: usize, frames: usize) -> std::ops::RangeInclusive<usize> {
        t..=(t + self.config.lead_delta).min(frames - 1)
    }

    /// Mean of the audio tokens aligned with frames `first ..= last`.
    pub fn pool_range(&self, audio: &Tensor<f64>, first: usize, last: usize) -> Vec<f64> {
        let (r, d) = (self.config.tokens_per_frame, self.config.d_a);
        let mut acc = vec![0.0; d];
        let tokens = r * first..r * (last + 1);
        let n = tokens.len() as f64;
        for s in tokens {
            for (a, &x) in acc.iter_mut().zip(audio.row(s)) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Noise-free video implied by an audio track.
    pub fn video_signal(&self, audio: &Tensor<f64>, condition: usize) -> Result<Tensor<f64>> {
        self.check_condition(condition)?;
        let r = self.config.tokens_per_frame;
        if audio.rows() % r != 0 || audio.cols() != self.config.d_a {
            return Err(Error::ShapeMismatch {
                op: "video_signal",
                left: audio.shape().to_vec(),
                right: vec![audio.rows().next_multiple_of(r), self.config.d_a],
            });
        }
        let frames = audio.rows() / r;
        let g = &self.mixing[condition];
        let dv = self.config.d_v;
        let mut out = vec![0.0; frames * dv];
        for t in 0..frames {
            let w = self.pool_frames(t, frames);
            let pool = self.pool_range(audio, *w.start(), *w.end());
            project(g, &pool, &mut out[t * dv..(t + 1) * dv]);
        }
        Ok(Tensor::from_fn(vec![frames, dv], |i| out[i]))
    }

    /// One clip drawn from `rng`.
    pub fn sample_clip(&self, rng: &mut Rng, condition: usize) -> Result<Clip> {
        let audio = self.sample_audio(rng, self.config.num_tokens());
        let sigma = self.config.obs_noise;
        let noise: Tensor<f64> = rng.normal_tensor(vec![self.config.num_frames, self.config.d_v], 1.0);
        let video = self
            .video_signal(&audio, condition)?
            .zip_map(&noise, "video", |s, n| s + sigma * n)?;
        Ok(Clip {
            audio,
            video,
            condition_id: condition,
        })
    }

    /// `n_clips` clips, deterministic in `seed`. Clip `i` uses its own stream.
    pub fn generate(&self, seed: u64, n_clips: usize) -> Result<Vec<Clip>> {
        (0..n_clips)
            .map(|i| {
                let mut rng = Rng::keyed(seed, &[CLIP_STREAM, i as u64]);
                let c = rng.below(self.config.num_conditions);
                self.sample_clip(&mut rng, c)
            })
            .collect()
    }

    /// Hidden-audio variance of the pool of frame `t` when audio frames up
    /// to `t + window` are visible, per audio dimension.
    fn hidden_pool_variance(&self, t: usize, window: usize) -> f64 {
        let cfg = &self.config;
        let r = cfg.tokens_per_frame;
        let frames = self.pool_frames(t, cfg.num_frames);
        let n = (frames.end() - frames.start() + 1) * r;
        let last_visible_frame = t + window;
        if last_visible_frame >= *frames.end() {
            return 0.0;
        }
        let hidden = (frames.end() - last_visible_frame) * r;
        let rho = cfg.ar_coeff;
        let mut q = 0.0;
        for j in 1..=hidden {
            for k in 1..=hidden {
                q += rho.powi((j as i32 - k as i32).abs()) - rho.powi((j + k) as i32);
            }
        }
        q / (n * n) as f64
    }

    fn mean_gain(&self) -> f64 {
        let dv = self.config.d_v as f64;
        self.mixing
            .iter()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>() / dv)
            .sum::<f64>()
            / self.mixing.len() as f64
    }

    /// Minimum per-element MSE of predicting video from the audio visible
    /// under look-ahead `window`, averaged over frames and conditions.
    ///
    /// Non-increasing in `window` and equal to `σ_obs²` once `window ≥ δ`.
    pub fn bayes_floor(&self, window: usize) -> f64 {
        let tv = self.config.num_frames;
        let q: f64 = (0..tv).map(|t| self.hidden_pool_variance(t, window)).sum::<f64>() / tv as f64;
        self.config.obs_noise.powi(2) + q * self.mean_gain()
    }

    /// Posterior-mean video given the audio visible under `window`.
    pub fn optimal_video_estimate(&self, audio: &Tensor<f64>, condition: usize, window: usize) -> Result<Tensor<f64>> {
        self.check_condition(condition)?;
        let cfg = &self.config;
        let (r, tv, dv) = (cfg.tokens_per_frame, cfg.num_frames, cfg.d_v);
        let mut out = vec![0.0; tv * dv];
        for t in 0..tv {
            let frames = self.pool_frames(t, tv);
            let last_visible = (t + window).min(*frames.end());
            let n = ((frames.end() - frames.start() + 1) * r) as f64;
            let visible = self.pool_range(audio, *frames.start(), last_visible);
            let nv = ((last_visible - frames.start() + 1) * r) as f64;
            let anchor = audio.row(r * (last_visible + 1) - 1);
            let hidden = (frames.end() - last_visible) * r;
            let decay: f64 = (1..=hidden).map(|j| cfg.ar_coeff.powi(j as i32)).sum();
            let pool: Vec<f64> = visible.iter().zip(anchor).map(|(&v, &a)| (v * nv + decay * a) / n).collect();
            project(&self.mixing[condition], &pool, &mut out[t * dv..(t + 1) * dv]);
        }
        Ok(Tensor::from_fn(vec![tv, dv], |i| out[i]))
    }

    /// Expected per-element video variance and lag-1 frame autocorrelation
    /// of clips under `condition`, averaged over frames.
    pub fn video_moments(&self, condition: usize) -> (f64, f64) {
        let cfg = &self.config;
        let (r, tv) = (cfg.tokens_per_frame, cfg.num_frames);
        let gain = self.mixing[condition].data().iter().map(|x| x * x).sum::<f64>() / cfg.d_v as f64;
        let cov = |t: usize, u: usize| -> f64 {
            let (a, b) = (self.pool_frames(t, tv), self.pool_frames(u, tv));
            let ta: Vec<usize> = (r * a.start()..r * (a.end() + 1)).collect();
            let tb: Vec<usize> = (r * b.start()..r * (b.end() + 1)).collect();
            let mut s = 0.0;
            for &i in &ta {
                for &j in &tb {
                    s += cfg.ar_coeff.powi((i as i64 - j as i64).unsigned_abs() as i32);
                }
            }
            gain * s / (ta.len() * tb.len()) as f64
        };
        let noise = cfg.obs_noise.powi(2);
        let var = (0..tv).map(|t| cov(t, t) + noise).sum::<f64>() / tv as f64;
        let lag1 = if tv > 1 {
            (0..tv - 1).map(|t| cov(t, t + 1)).sum::<f64>() / (tv - 1) as f64
        } else {
            0.0
        };
        (var, lag1 / var)
    }

    /// Estimates the audio-to-video lag through the known projection.
    ///
    /// For each `k` in [`SYNC_LAGS`], correlates `v[t]` with `G·pool` of the
    /// `(δ+1)`-frame audio window ending at frame `t+k`, over every `t` for
    /// which the window lies inside the clip. The lag is the arg-max; the
    /// score is the correlation at `k = δ` minus the mean of the others.
    pub fn sync_lag(&self, video: &Tensor<f64>, audio: &Tensor<f64>, condition: usize) -> Result<SyncEstimate> {
        self.check_condition(condition)?;
        let cfg = &self.config;
        let (r, dv) = (cfg.tokens_per_frame, cfg.d_v);
        let frames = video.rows();
        if audio.rows() != frames * r || video.cols() != dv || audio.cols() != cfg.d_a {
            return Err(Error::ShapeMismatch {
                op: "sync_lag",
                left: video.shape().to_vec(),
                right: audio.shape().to_vec(),
            });
        }
        if variance(video.data()) < 1e-24 || variance(audio.data()) < 1e-24 {
            return Err(Error::Degenerate("zero-variance clip".into()));
        }
        let delta = cfg.lead_delta as i64;
        let g = &self.mixing[condition];
        let mut correlations = Vec::new();
        for k in SYNC_LAGS {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut pred = vec![0.0; dv];
            for t in 0..frames as i64 {
                let (last, first) = (t + k, t + k - delta);
                if first < 0 || last >= frames as i64 {
                    continue;
                }
                let pool = self.pool_range(audio, first as usize, last as usize);
                project(g, &pool, &mut pred);
                xs.extend_from_slice(video.row(t as usize));
                ys.extend_from_slice(&pred);
            }
            if xs.len() < 2 * dv {
                continue;
            }
            correlations.push((k, pearson(&xs, &ys)));
        }
        let at_delta = correlations
            .iter()
            .find(|(k, _)| *k == delta)
            .map(|&(_, c)| c)
            .ok_or_else(|| Error::Degenerate("clip too short to evaluate the true lag".into()))?;
        let off: Vec<f64> = correlations.iter().filter(|(k, _)| *k != delta).map(|&(_, c)| c).collect();
        let off_mean = if off.is_empty() {
            0.0
        } else {
            off.iter().sum::<f64>() / off.len() as f64
        };
        let lag = correlations
            .iter()
            .fold((delta, f64::NEG_INFINITY), |best, &(k, c)| if c > best.1 { (k, c) } else { best })
            .0;
        Ok(SyncEstimate {
            lag,
            score: at_delta - off_mean,
            correlations,
        })
    }
}

fn project(g: &Tensor<f64>, x: &[f64], out: &mut [f64]) {
    let d = g.cols();
    for (i, o) in out.iter_mut().enumerate() {
        *o = g.data()[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Variance of the mean of `n` consecutive unit-variance AR(1) tokens.
pub fn pool_variance(rho: f64, n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += rho.powi((i as i64 - j as i64).unsigned_abs() as i32);
        }
    }
    s / (n * n) as f64
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

/// Pearson correlation; zero if either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// One line of a dataset index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipIndex {
    pub clip: usize,
    pub seed: u64,
    pub condition_id: usize,
    /// Byte offsets of the audio and video entries in the payload file.
    pub audio_offset: u64,
    pub video_offset: u64,
}

pub const INDEX_FILE: &str = "index.jsonl";
pub const PAYLOAD_FILE: &str = "clips.dsrt";
pub const WORLD_FILE: &str = "world.json";

fn entry_names(i: usize) -> (String, String) {
    (format!("clip{i:06}.audio"), format!("clip{i:06}.video"))
}

/// Writes `world.json`, `index.jsonl` and `clips.dsrt` into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, config: &WorldConfig, seed: u64, clips: &[Clip]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        let (a, v) = entry_names(i);
        entries.insert(a, c.audio.clone());
        entries.insert(v, c.video.clone());
    }
    let (bytes, offsets) = checkpoint::encode_with_offsets(&entries);
    fs::write(dir.join(PAYLOAD_FILE), bytes)?;
    let mut index = File::create(dir.join(INDEX_FILE))?;
    for (i, c) in clips.iter().enumerate() {
        let (a, v) = entry_names(i);
        let line = ClipIndex {
            clip: i,
            seed,
            condition_id: c.condition_id,
            audio_offset: offsets[&a],
            video_offset: offsets[&v],
        };
        writeln!(index, "{}", serde_json::to_string(&line)?)?;
    }
    fs::write(dir.join(WORLD_FILE), serde_json::to_string_pretty(config)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(WorldConfig, Vec<Clip>)> {
    let dir = dir.as_ref();
    let config: WorldConfig = serde_json::from_str(&fs::read_to_string(dir.join(WORLD_FILE))?)?;
    let mut entries = checkpoint::load::<f64>(dir.join(PAYLOAD_FILE))?;
    let mut clips = Vec::new();
    for line in BufReader::new(File::open(dir.join(INDEX_FILE))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let idx: ClipIndex = serde_json::from_str(&line)?;
        let (a, v) = entry_names(idx.clip);
        let missing = |n: &str| Error::InvalidArgument(format!("payload has no entry {n}"));
        let audio = entries.remove(&a).ok_or_else(|| missing(&a))?;
        let video = entries.remove(&v).ok_or_else(|| missing(&v))?;
        clips.push(Clip {
            audio,
            video,
            condition_id: idx.condition_id,
        });
    }
    Ok((config, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(delta: usize, sigma: f64) -> World {
        World::new(WorldConfig {
            lead_delta: delta,
            obs_noise: sigma,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn noiseless_delta0_is_exact_in_frame_audio() {
        let w = world(0, 0.0);
        let clip = &w.generate(3, 1).unwrap()[0];
        for t in 0..16 {
            let pool = w.pool_range(&clip.audio, t, t);
            let mut pred = vec![0.0; 8];
            project(w.mixing(clip.condition_id), &pool, &mut pred);
            for (a, b) in pred.iter().zip(clip.video.row(t)) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn floor_flat_beyond_delta() {
        let w = world(1, 0.05);
        assert!(w.bayes_floor(0) > w.bayes_floor(1));
        assert_eq!(w.bayes_floor(1), w.bayes_floor(2));
        assert!((w.bayes_floor(1) - 0.0025).abs() < 1e-15);
        let w0 = world(1, 0.0);
        assert_eq!(w0.bayes_floor(1), 0.0);
    }

    #[test]
    fn rejects_long_lead() {
        assert!(World::new(WorldConfig {
            lead_delta: 16,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn true_clip_lag_is_delta_and_shift_moves_it() {
        let w = world(1, 0.0);
        let clip = &w.generate(5, 1).unwrap()[0];
        let est = w.sync_lag(&clip.video, &clip.audio, clip.condition_id).unwrap();
        assert_eq!(est.lag, 1);
        assert!(est.score > 0.2);
        let shifted = Tensor::from_fn(vec![15, 8], |i| clip.video.data()[i + 8]);
        let audio = clip.audio.slice_rows(0, 75);
        let est = w.sync_lag(&shifted, &audio, clip.condition_id).unwrap();
        assert_eq!(est.lag, 2);
    }

    #[test]
    fn constant_video_is_degenerate() {
        let w = world(1, 0.05);
        let clip = &w.generate(5, 1).unwrap()[0];
        let flat = Tensor::zeros(vec![16, 8]);
        assert!(matches!(w.sync_lag(&flat, &clip.audio, 0), Err(Error::Degenerate(_))));
    }
}
