use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::checkpoint;
use crate::numerics::optim::ParamStore;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{Scalar, Tensor};

pub const STREAMS: [&str; 2] = ["video", "audio"];

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Modulation, condition/cross output projections and the output layer
    /// start at zero, so a fresh model predicts zero velocity.
    Standard,
    /// Every tensor random; exercises all pathways in tests.
    Dense,
}

fn stream_of(name: &str) -> &str {
    name.split('.').next().unwrap_or("")
}

/// True for parameters owned by the video stream.
pub fn is_video_param(name: &str) -> bool {
    stream_of(name) == "video"
}

pub fn is_audio_param(name: &str) -> bool {
    stream_of(name) == "audio"
}

/// `(name, shape, zero under Init::Standard)` for every parameter.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.dim;
    let hidden = d * cfg.mlp_ratio;
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, zero: bool| specs.push((name, shape, zero));
    for s in STREAMS {
        let d_in = if s == "video" { cfg.d_v } else { cfg.d_a };
        add(format!("{s}.in.w"), vec![d_in, d], false);
        add(format!("{s}.in.b"), vec![1, d], true);
        add(format!("{s}.time.w1"), vec![d, d], false);
        add(format!("{s}.time.b1"), vec![1, d], true);
        add(format!("{s}.time.w2"), vec![d, d], false);
        add(format!("{s}.time.b2"), vec![1, d], true);
        add(format!("{s}.cond.emb"), vec![cfg.cond_vocab, d], false);
        add(format!("{s}.cond.tokens"), vec![cfg.cond_vocab * cfg.cond_tokens, d], false);
        for l in 0..cfg.depth {
            let p = format!("{s}.l{l}");
            add(format!("{p}.mod.w"), vec![d, 6 * d], true);
            add(format!("{p}.mod.b"), vec![1, 6 * d], true);
            for part in ["self", "cond", "cross"] {
                for w in ["wq", "wk", "wv"] {
                    add(format!("{p}.{part}.{w}"), vec![d, d], false);
                }
                add(format!("{p}.{part}.wo"), vec![d, d], part != "self");
            }
            add(format!("{p}.mlp.w1"), vec![d, hidden], false);
            add(format!("{p}.mlp.b1"), vec![1, hidden], true);
            add(format!("{p}.mlp.w2"), vec![hidden, d], false);
            add(format!("{p}.mlp.b2"), vec![1, d], true);
        }
        add(format!("{s}.head.mod.w"), vec![d, 2 * d], true);
        add(format!("{s}.head.mod.b"), vec![1, 2 * d], true);
        add(format!("{s}.out.w"), vec![d, d_in], true);
        add(format!("{s}.out.b"), vec![1, d_in], true);
    }
    specs
}

pub fn init_params(cfg: &ModelConfig, seed: u64, init: Init) -> Result<ParamStore<f64>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (i, (name, shape, zero)) in param_specs(cfg).into_iter().enumerate() {
        let mut rng = Rng::keyed(seed, &[0x1417, i as u64]);
        let fan_in = shape[0] as f64;
        let t = match init {
            Init::Standard if zero => Tensor::zeros(shape),
            Init::Standard if name.ends_with(".emb") || name.ends_with(".tokens") => rng.normal_tensor(shape, 1.0),
            Init::Standard => rng.normal_tensor(shape, 1.0 / fan_in.sqrt()),
            Init::Dense if shape[0] == 1 || name.contains("mod.") => rng.normal_tensor(shape, 0.2),
            Init::Dense => rng.normal_tensor(shape, 1.0 / fan_in.sqrt()),
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Sidecar written next to every model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: ModelConfig,
    pub arch_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    checkpoint::save(path, params.as_map())?;
    let side = ModelSidecar {
        config: cfg.clone(),
        arch_hash: cfg.arch_hash(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

/// Loads a checkpoint. With `expected`, refuses a checkpoint whose
/// architecture hash differs.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(ModelConfig, ParamStore<T>)> {
    let path = path.as_ref();
    let side: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if side.arch_hash != side.config.arch_hash() {
        return Err(Error::ConfigMismatch(format!(
            "sidecar hash {} does not match its config",
            side.arch_hash
        )));
    }
    if let Some(want) = expected {
        if want.arch_hash() != side.arch_hash {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint architecture {} differs from requested {}",
                side.arch_hash,
                want.arch_hash()
            )));
        }
    }
    let params = ParamStore::from_map(checkpoint::load(path)?);
    for (name, shape, _) in param_specs(&side.config) {
        match params.get(&name) {
            Ok(t) if t.shape() == shape.as_slice() => {}
            _ => return Err(Error::ConfigMismatch(format!("checkpoint lacks {name} with shape {shape:?}"))),
        }
    }
    Ok((side.config, params))
}
