//! Reward weighting for distillation.
//!
//! Each sample `i` gets scores `R[i][k]` from a set of named oracles. The
//! scores are standardized per metric within the batch with the population
//! standard deviation, combined as `w_i = exp(Σ_k β_k z[i][k])`, and clipped
//! to `[e^-c, e^c]`.
//!
//! Three oracles stand in for learned reward models: `sync` (alignment of
//! video with the audio it should lead), `visual` (video variance and
//! frame-to-frame smoothness against the world's moments) and `audio`
//! (spectral shape of the audio against the AR(1) prior).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Clip, World};

pub const SYNC: &str = "sync";
pub const VISUAL: &str = "visual";
pub const AUDIO: &str = "audio";

/// Score assigned to clips an oracle cannot evaluate.
pub const WORST_REWARD: f64 = -10.0;

/// Number of spectral bands used by the audio oracle.
pub const AUDIO_BANDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// `β_k` per metric name.
    pub betas: BTreeMap<String, f64>,
    pub eps: f64,
    /// Weights are clipped to `[e^-clip_log, e^clip_log]`.
    pub clip_log: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            betas: [(SYNC, 2.0), (VISUAL, 2.0), (AUDIO, 2.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            eps: 1e-8,
            clip_log: 4.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some((k, b)) = self.betas.iter().find(|(_, b)| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("β for {k} is {b}; must be non-negative")));
        }
        if !(self.eps > 0.0) || !(self.clip_log > 0.0) {
            return Err(Error::InvalidArgument("eps and clip_log must be positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self, metric: &str) -> f64 {
        self.betas.get(metric).copied().unwrap_or(0.0)
    }

    /// Parses `sync=2,visual=0,audio=0` on top of the current values.
    pub fn set_betas(&mut self, list: &str) -> Result<()> {
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected metric=value, got {part:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("β for {k} is not a number: {v:?}")))?;
            self.betas.insert(k.trim().to_string(), v);
        }
        self.validate()
    }
}

/// `z[i][k] = (R[i][k] - μ_k) / (σ_k + eps)`, population `σ`.
pub fn standardize(rewards: &[Vec<f64>], eps: f64) -> Result<Vec<Vec<f64>>> {
    let b = rewards.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty reward batch".into()));
    }
    let k = rewards[0].len();
    if rewards.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("ragged reward batch".into()));
    }
    if rewards.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "standardize" });
    }
    let mut z = vec![vec![0.0; k]; b];
    for m in 0..k {
        // Mean taken as an offset from the first sample, so a constant
        // column standardizes to exact zeros.
        let base = rewards[0][m];
        let mu = base + rewards.iter().map(|r| r[m] - base).sum::<f64>() / b as f64;
        let var = rewards.iter().map(|r| (r[m] - mu).powi(2)).sum::<f64>() / b as f64;
        let sd = var.sqrt();
        for (zi, ri) in z.iter_mut().zip(rewards) {
            zi[m] = (ri[m] - mu) / (sd + eps);
        }
    }
    Ok(z)
}

/// Sample weights and how many of them hit a clip bound.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub w: Vec<f64>,
    pub clipped: usize,
}

impl Weights {
    pub fn clip_rate(&self) -> f64 {
        if self.w.is_empty() {
            0.0
        } else {
            self.clipped as f64 / self.w.len() as f64
        }
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len().max(1) as f64
    }
}

/// `w_i = clip(exp(Σ_k β_k z[i][k]))`.
pub fn weights(z: &[Vec<f64>], betas: &[f64], clip_log: f64) -> Result<Weights> {
    let (lo, hi) = ((-clip_log).exp(), clip_log.exp());
    let mut clipped = 0;
    let mut w = Vec::with_capacity(z.len());
    for row in z {
        if row.len() != betas.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores but {} coefficients",
                row.len(),
                betas.len()
            )));
        }
        let raw = row.iter().zip(betas).map(|(z, b)| b * z).sum::<f64>().exp();
        let c = raw.clamp(lo, hi);
        if c != raw {
            clipped += 1;
        }
        w.push(c);
    }
    if clipped > 0 {
        log::debug!("{clipped} of {} reward weights clipped", w.len());
    }
    Ok(Weights { w, clipped })
}

/// Mean of `w_i · L_i`.
pub fn final_loss(w: &[f64], losses: &[f64]) -> Result<f64> {
    if w.len() != losses.len() || w.is_empty() {
        return Err(Error::InvalidArgument(format!("{} weights for {} losses", w.len(), losses.len())));
    }
    Ok(w.iter().zip(losses).map(|(w, l)| w * l).sum::<f64>() / w.len() as f64)
}

/// Standardizes `rewards` (columns named by `metrics`) and weights them with
/// the configured coefficients of those metrics.
pub fn weights_for(rewards: &[Vec<f64>], metrics: &[&str], cfg: &RewardConfig) -> Result<Weights> {
    let z = standardize(rewards, cfg.eps)?;
    let betas: Vec<f64> = metrics.iter().map(|m| cfg.beta(m)).collect();
    weights(&z, &betas, cfg.clip_log)
}

/// Sync reward: the world's sync score of the pair.
pub fn sync_reward(world: &World, clip: &Clip) -> Result<f64> {
    Ok(world.sync_lag(&clip.video, &clip.audio, clip.condition_id)?.score)
}

fn video_stats(video: &crate::numerics::Tensor<f64>) -> Result<(f64, f64)> {
    let n = video.numel() as f64;
    let var = video.data().iter().map(|x| x * x).sum::<f64>() / n;
    if !(var > 1e-24) || video.rows() < 2 {
        return Err(Error::Degenerate("video has no variance".into()));
    }
    let lag: f64 = (0..video.rows() - 1)
        .map(|t| video.row(t).iter().zip(video.row(t + 1)).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let lag_norm = lag / ((video.rows() - 1) * video.cols()) as f64;
    Ok((var, lag_norm / var))
}

/// Visual reward: `-((var/var* - 1)² + (ρ₁ - ρ₁*)²)` from second moments.
pub fn visual_reward(world: &World, clip: &Clip) -> Result<f64> {
    let (var, ac) = video_stats(&clip.video)?;
    let (want_var, want_ac) = world.video_moments(clip.condition_id);
    Ok(-((var / want_var - 1.0).powi(2) + (ac - want_ac).powi(2)))
}

/// Band-summed periodogram of each audio dimension, excluding DC.
fn band_powers(audio: &crate::numerics::Tensor<f64>) -> Vec<f64> {
    let n = audio.rows();
    let half = n / 2;
    let mut bands = vec![0.0; AUDIO_BANDS];
    for d in 0..audio.cols() {
        for j in 1..=half {
            let w = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for s in 0..n {
                let x = audio.at(s, d);
                re += x * (w * s as f64).cos();
                im -= x * (w * s as f64).sin();
            }
            bands[band_of(j, half)] += (re * re + im * im) / n as f64;
        }
    }
    bands
}

fn band_of(j: usize, half: usize) -> usize {
    ((j - 1) * AUDIO_BANDS / half).min(AUDIO_BANDS - 1)
}

/// AR(1) spectral mass per band at the same frequencies.
fn prior_bands(rho: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut bands = vec![0.0; AUDIO_BANDS];
    for j in 1..=half {
        let w = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
        bands[band_of(j, half)] += (1.0 - rho * rho) / (1.0 - 2.0 * rho * w.cos() + rho * rho);
    }
    bands
}

/// Audio reward: `-KL(p || q)` between normalized band powers of the clip
/// and of the AR(1) prior.
pub fn audio_reward(world: &World, clip: &Clip) -> Result<f64> {
    let n = clip.audio.rows();
    if n < 2 * AUDIO_BANDS {
        return Err(Error::Degenerate(format!("{n} audio tokens are too few for {AUDIO_BANDS} bands")));
    }
    let p = band_powers(&clip.audio);
    let q = prior_bands(world.config().ar_coeff, n);
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    if !(sp > 1e-24) {
        return Err(Error::Degenerate("audio has no variance".into()));
    }
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let (a, b) = (a / sp, b / sq);
            if a > 0.0 {
                a * (a / b).ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok(-kl)
}

/// An oracle maps a clean clip to a scalar score.
pub type Oracle = Box<dyn Fn(&Clip) -> Result<f64> + Send + Sync>;

/// Oracles addressable by name.
pub struct RewardRegistry {
    oracles: BTreeMap<String, Oracle>,
}

impl fmt::Debug for RewardRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.oracles.keys()).finish()
    }
}

impl RewardRegistry {
    pub fn empty() -> Self {
        Self { oracles: BTreeMap::new() }
    }

    /// `sync`, `visual` and `audio` bound to `world`.
    pub fn with_defaults(world: &World) -> Self {
        let mut reg = Self::empty();
        let w = world.clone();
        reg.register(SYNC, move |c| sync_reward(&w, c));
        let w = world.clone();
        reg.register(VISUAL, move |c| visual_reward(&w, c));
        let w = world.clone();
        reg.register(AUDIO, move |c| audio_reward(&w, c));
        reg
    }

    pub fn register(&mut self, name: &str, oracle: impl Fn(&Clip) -> Result<f64> + Send + Sync + 'static) {
        self.oracles.insert(name.to_string(), Box::new(oracle));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.oracles.keys().map(String::as_str)
    }

    /// The oracle's score, or an error when it fails or returns a
    /// non-finite value.
    pub fn try_score(&self, name: &str, clip: &Clip) -> Result<f64> {
        let oracle = self
            .oracles
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no reward oracle named {name:?}")))?;
        let v = oracle(clip)?;
        if !v.is_finite() {
            return Err(Error::Degenerate(format!("{name} oracle returned {v}")));
        }
        Ok(v.max(WORST_REWARD))
    }

    /// Like [`Self::try_score`], but a failing oracle yields the worst score.
    pub fn score(&self, name: &str, clip: &Clip) -> Result<f64> {
        if !self.oracles.contains_key(name) {
            return Err(Error::InvalidArgument(format!("no reward oracle named {name:?}")));
        }
        Ok(self.try_score(name, clip).unwrap_or_else(|e| {
            log::warn!("{e}; using the worst score");
            WORST_REWARD
        }))
    }

    /// `R[i][k]` for clips `i` and metrics `k`.
    pub fn score_batch(&self, metrics: &[&str], clips: &[Clip]) -> Result<Vec<Vec<f64>>> {
        clips.iter().map(|c| metrics.iter().map(|m| self.score(m, c)).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_standardization() {
        let z = standardize(&[vec![1.0], vec![2.0], vec![3.0]], 1e-8).unwrap();
        assert!((z[0][0] + 1.224_744_871).abs() < 1e-6);
        assert_eq!(z[1][0], 0.0);
        let w = weights(&[vec![z[0][0], 0.0, 0.0]], &[2.0, 0.0, 0.0], 4.0).unwrap();
        assert!((w.w[0] - (-2.449_489_742_783_178_f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn constant_column_and_zero_betas_are_neutral() {
        let z = standardize(&[vec![5.0, 1.0], vec![5.0, 9.0], vec![5.0, -3.0]], 1e-8).unwrap();
        assert!(z.iter().all(|r| r[0] == 0.0));
        let w = weights(&z, &[0.0, 0.0], 4.0).unwrap();
        assert!(w.w.iter().all(|&x| x == 1.0));
        assert_eq!(final_loss(&w.w, &[1.0, 2.0, 6.0]).unwrap(), 3.0);
    }

    #[test]
    fn clipping_is_counted() {
        let w = weights(&[vec![3.0], vec![-3.0], vec![0.1]], &[8.0], 4.0).unwrap();
        assert_eq!(w.clipped, 2);
        assert_eq!(w.w[0], 4f64.exp());
    }

    #[test]
    fn betas_parse() {
        let mut c = RewardConfig::default();
        c.set_betas("sync=2, visual=0,audio=0.5").unwrap();
        assert_eq!(c.beta(VISUAL), 0.0);
        assert_eq!(c.beta(AUDIO), 0.5);
        assert!(c.set_betas("sync=-1").is_err());
        assert!(c.set_betas("sync").is_err());
    }
}
