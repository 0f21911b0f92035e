use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    Rotary,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Bidirectional,
    CausalStudent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub tokens_per_frame: usize,
    pub cond_vocab: usize,
    /// Condition tokens per condition id seen by condition cross-attention.
    pub cond_tokens: usize,
    pub positional: Positional,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            d_a: 8,
            d_v: 8,
            tokens_per_frame: 5,
            cond_vocab: 4,
            cond_tokens: 2,
            positional: Positional::Rotary,
            rope_base: 100.0,
            mlp_ratio: 4,
            mode: Mode::CausalStudent,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("model dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.positional == Positional::Rotary && (self.dim / self.heads) % 2 != 0 {
            return bad(format!("rotary needs an even head width, got {}", self.dim / self.heads));
        }
        if self.d_a == 0 || self.d_v == 0 || self.tokens_per_frame == 0 {
            return bad("latent extents must be positive".into());
        }
        if self.cond_vocab == 0 || self.cond_tokens == 0 || self.mlp_ratio == 0 {
            return bad("condition vocabulary, condition tokens and MLP ratio must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rotary base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    /// Short content hash of the architecture, stored next to checkpoints.
    /// The mode is excluded: a teacher checkpoint initializes a student.
    pub fn arch_hash(&self) -> String {
        let mut c = self.clone();
        c.mode = Mode::CausalStudent;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Rotary/sinusoidal phase of a video frame.
    pub fn video_phase(&self, frame: usize) -> f64 {
        frame as f64
    }

    /// Phase of an audio token, centred inside its frame so that the `r`
    /// tokens of frame `t` straddle phase `t`.
    pub fn audio_phase(&self, token: usize) -> f64 {
        (token as f64 + 0.5) / self.tokens_per_frame as f64 - 0.5
    }
}
