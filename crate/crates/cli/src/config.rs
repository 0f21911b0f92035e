//! The run configuration: one JSON document holding every sub-config.

use std::path::Path;

use dsrt::distill::DistillConfig;
use dsrt::flow::{FlowConfig, TrainConfig};
use dsrt::masks::BlockLayout;
use dsrt::model::{Mode, ModelConfig};
use dsrt::rewards::{RewardConfig, AUDIO, SYNC, VISUAL};
use dsrt::synthworld::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_clips: usize,
    pub held_out_clips: usize,
    pub train_seed: u64,
    pub held_out_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 512,
            held_out_clips: 32,
            train_seed: 1,
            held_out_seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub frames_per_block: usize,
    /// Audio look-ahead `W` in video frames.
    pub lookahead: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            frames_per_block: 1,
            lookahead: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    /// Streams generated by `dsrt stream`.
    pub clips: usize,
    /// Retained cache frames; `null` keeps everything.
    pub capacity_frames: Option<usize>,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            clips: 4,
            capacity_frames: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Streams per held-out clip averaged into the video estimate.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 8, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub windows: Vec<usize>,
    pub betas: Vec<f64>,
    /// Metric whose `β` is swept; the others are set to zero.
    pub beta_metric: String,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            windows: vec![0, 1, 2, 3],
            betas: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            beta_metric: SYNC.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Stream lengths in blocks.
    pub ks: Vec<usize>,
    pub reps: usize,
    /// Cache bound of the streaming runs, in frames.
    pub capacity_frames: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![2, 4, 8, 16, 32],
            reps: 20,
            capacity_frames: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// Seeds of the ablation drivers.
    pub seeds: Vec<u64>,
    pub world: WorldConfig,
    pub data: DataConfig,
    /// Student architecture; the teacher shares it with bidirectional masks.
    pub model: ModelConfig,
    pub layout: LayoutConfig,
    pub flow: FlowConfig,
    pub teacher: TrainConfig,
    pub distill: DistillConfig,
    pub rewards: RewardConfig,
    pub stream: StreamSection,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seed: 1,
            seeds: vec![1, 2, 3],
            world: WorldConfig {
                num_frames: 8,
                obs_noise: 0.3,
                num_conditions: 2,
                ..Default::default()
            },
            data: DataConfig::default(),
            model: ModelConfig {
                depth: 2,
                dim: 32,
                heads: 4,
                cond_vocab: 2,
                ..Default::default()
            },
            layout: LayoutConfig::default(),
            flow: FlowConfig::default(),
            teacher: TrainConfig {
                steps: 4000,
                ..Default::default()
            },
            distill: DistillConfig::default(),
            rewards: RewardConfig::default(),
            stream: StreamSection::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn escape(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", escape(key))),
            Segment::Enum { variant } => out.push_str(&format!("/{}", escape(variant))),
            Segment::Unknown => {}
        }
    }
    out
}

/// Overlays `src` on `dst`: objects merge key by key, anything else
/// replaces. Tagged enums (objects with a `kind`) replace as a whole.
pub fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) if !s.contains_key("kind") => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// Sets `key` (dot-separated, array indices as numbers) to `raw`, parsed as
/// JSON when possible and as a string otherwise.
pub fn apply_set(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config("", format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config("", format!("empty path segment in {key:?}")));
    }
    let mut cur = doc;
    let mut pointer = String::new();
    for (i, part) in parts.iter().enumerate() {
        pointer.push('/');
        pointer.push_str(&escape(part));
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| CliError::config(&pointer, "array index expected"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(&pointer, format!("index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::config(&pointer, "cannot descend into a scalar")),
        };
    }
    unreachable!("loop returns on the last segment")
}

impl RunConfig {
    /// Overlays the document at `path` on the defaults, applies `sets` in
    /// order, and validates the result. A file may therefore list only the
    /// entries it changes.
    pub fn load(path: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config("", format!("cannot read {}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| CliError::config("", format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(CliError::config("", "the config must be a JSON object"));
            }
            merge(&mut doc, file);
        }
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> CliResult<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let pointer = pointer_of(e.path());
            CliError::config(pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        fn at(p: &'static str) -> impl Fn(dsrt::Error) -> CliError {
            move |e| CliError::config(p, e.to_string())
        }
        self.world.validate().map_err(at("/world"))?;
        self.model.validate().map_err(at("/model"))?;
        self.flow.validate().map_err(at("/flow"))?;
        self.distill.validate().map_err(at("/distill"))?;
        self.rewards.validate().map_err(at("/rewards"))?;
        let (w, m) = (&self.world, &self.model);
        for (name, a, b) in [
            ("d_a", m.d_a, w.d_a),
            ("d_v", m.d_v, w.d_v),
            ("tokens_per_frame", m.tokens_per_frame, w.tokens_per_frame),
        ] {
            if a != b {
                return Err(CliError::config(
                    format!("/model/{name}"),
                    format!("{a} differs from the world's {b}"),
                ));
            }
        }
        if m.cond_vocab < w.num_conditions {
            return Err(CliError::config(
                "/model/cond_vocab",
                format!("{} condition embeddings for {} world conditions", m.cond_vocab, w.num_conditions),
            ));
        }
        if m.mode != Mode::CausalStudent {
            return Err(CliError::config("/model/mode", "the student architecture must use causal_student"));
        }
        self.block_layout(self.layout.lookahead).map_err(at("/layout"))?;
        if self.layout.lookahead % self.layout.frames_per_block != 0 {
            return Err(CliError::config("/layout/lookahead", "must be a multiple of frames_per_block"));
        }
        if self.teacher.steps == 0 || self.teacher.batch == 0 {
            return Err(CliError::config("/teacher", "steps and batch must be positive"));
        }
        if self.distill.stage1.batch == 0 || self.distill.batch == 0 {
            return Err(CliError::config("/distill", "batch sizes must be positive"));
        }
        if self.data.train_clips == 0 || self.data.held_out_clips == 0 {
            return Err(CliError::config("/data", "clip counts must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::config("/seeds", "at least one seed is required"));
        }
        if self.eval.samples == 0 {
            return Err(CliError::config("/eval/samples", "must be positive"));
        }
        if self.stream.clips == 0 {
            return Err(CliError::config("/stream/clips", "must be positive"));
        }
        if self.stream.capacity_frames == Some(0) {
            return Err(CliError::config("/stream/capacity_frames", "must be positive or null"));
        }
        if let Some((i, &wv)) = self
            .ablate
            .windows
            .iter()
            .enumerate()
            .find(|(_, &wv)| wv >= w.num_frames || wv % self.layout.frames_per_block != 0)
        {
            return Err(CliError::config(
                format!("/ablate/windows/{i}"),
                format!("window {wv} must be a multiple of frames_per_block below num_frames"),
            ));
        }
        if self.ablate.windows.is_empty() || self.ablate.betas.is_empty() {
            return Err(CliError::config("/ablate", "window and β lists must be non-empty"));
        }
        if let Some((i, b)) = self.ablate.betas.iter().enumerate().find(|(_, b)| !(**b >= 0.0 && b.is_finite())) {
            return Err(CliError::config(
                format!("/ablate/betas/{i}"),
                format!("β {b} must be non-negative"),
            ));
        }
        if ![SYNC, VISUAL, AUDIO].contains(&self.ablate.beta_metric.as_str()) {
            return Err(CliError::config(
                "/ablate/beta_metric",
                format!("unknown metric {:?}", self.ablate.beta_metric),
            ));
        }
        if self.bench.ks.is_empty() || self.bench.ks.contains(&0) || self.bench.reps == 0 || self.bench.capacity_frames == 0 {
            return Err(CliError::config("/bench", "K list, repetitions and capacity must be positive"));
        }
        Ok(())
    }

    pub fn block_layout(&self, lookahead: usize) -> dsrt::Result<BlockLayout> {
        BlockLayout::new(
            self.layout.frames_per_block,
            self.world.tokens_per_frame,
            self.world.num_frames,
            lookahead,
        )
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig {
            mode: Mode::Bidirectional,
            ..self.model.clone()
        }
    }

    /// Short hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes())[..8])
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Working precision of inference commands, from `DSRT_PRECISION`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_env() -> CliResult<Self> {
        match std::env::var("DSRT_PRECISION") {
            Err(_) => Ok(Precision::F64),
            Ok(v) => match v.as_str() {
                "f64" | "" => Ok(Precision::F64),
                "f32" => Ok(Precision::F32),
                _ => Err(CliError::config("", format!("DSRT_PRECISION must be f32 or f64, got {v:?}"))),
            },
        }
    }
}
