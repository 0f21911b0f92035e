//! Shared stage drivers used by the subcommands and the ablations.

use std::path::{Path, PathBuf};

use dsrt::distill::{clamped_video_mse, mean_stream_reward, train_stage1, train_stage2, Stage2Context, Stage2Log, Stage2Outcome};
use dsrt::flow::{train_flow, StepLog, TrainOutcome};
use dsrt::masks::BlockLayout;
use dsrt::model::{init_params, load_model, Init, ModelConfig};
use dsrt::numerics::ParamStore;
use dsrt::rewards::{RewardConfig, RewardRegistry, AUDIO, SYNC, VISUAL};
use dsrt::synthworld::{load_dataset, Clip, World};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rundir::require;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

pub struct Data {
    pub world: World,
    pub train: Vec<Clip>,
    pub held_out: Vec<Clip>,
}

fn stale(path: &Path, what: &str) -> CliError {
    CliError::Prerequisite {
        path: path.to_path_buf(),
        message: format!(
            "{} was produced with a different {what}; rerun the producing command",
            path.display()
        ),
    }
}

/// The datasets written by `dsrt synth`, checked against `cfg`.
pub fn load_data(out: &Path, cfg: &RunConfig) -> CliResult<Data> {
    let mut sets = Vec::new();
    for (name, n) in [("train", cfg.data.train_clips), ("held_out", cfg.data.held_out_clips)] {
        let dir = require(out.join("synth").join("data").join(name), "synth")?;
        let (world_cfg, clips) = load_dataset(&dir).map_err(|e| CliError::Prerequisite {
            path: dir.clone(),
            message: format!("cannot read dataset {}: {e}", dir.display()),
        })?;
        if world_cfg != cfg.world {
            return Err(stale(&dir, "world config"));
        }
        if clips.len() != n {
            return Err(stale(&dir, "clip count"));
        }
        sets.push(clips);
    }
    let held_out = sets.pop().expect("two sets");
    let train = sets.pop().expect("two sets");
    Ok(Data {
        world: World::new(cfg.world.clone())?,
        train,
        held_out,
    })
}

pub fn load_checkpoint(path: PathBuf, producer: &str, arch: &ModelConfig) -> CliResult<ParamStore<f64>> {
    let path = require(path, producer)?;
    match load_model::<f64>(&path, Some(arch)) {
        Ok((_, p)) => Ok(p),
        Err(dsrt::Error::ConfigMismatch(m)) => Err(CliError::Prerequisite {
            message: format!("{}: {m}", path.display()),
            path,
        }),
        Err(e) => Err(CliError::Prerequisite {
            message: format!("cannot read {}: {e}", path.display()),
            path,
        }),
    }
}

pub fn teacher_path(out: &Path) -> PathBuf {
    out.join("teacher").join(TEACHER_CKPT)
}

pub fn load_teacher(out: &Path, cfg: &RunConfig) -> CliResult<ParamStore<f64>> {
    load_checkpoint(teacher_path(out), "train-teacher", &cfg.teacher_model())
}

/// The teacher does not depend on the look-ahead; it is always trained on
/// the `W = 0` layout so one checkpoint serves every window.
pub fn teacher_layout(cfg: &RunConfig) -> CliResult<BlockLayout> {
    Ok(cfg.block_layout(0)?)
}

pub fn diverged(outcome: &TrainOutcome, stage: &str) -> CliResult<()> {
    match outcome.diverged_at {
        Some(step) => Err(CliError::Numeric(format!("{stage} diverged at step {step}"))),
        None => Ok(()),
    }
}

pub fn train_teacher(cfg: &RunConfig, data: &Data, on_step: impl FnMut(&StepLog)) -> CliResult<TrainOutcome> {
    let tcfg = cfg.teacher_model();
    let init = init_params(&tcfg, cfg.seed, Init::Standard)?;
    let layout = teacher_layout(cfg)?;
    Ok(train_flow(
        &tcfg,
        init,
        &data.train,
        &layout,
        &cfg.flow,
        &cfg.teacher,
        cfg.seed,
        |_| true,
        on_step,
    )?)
}

/// Stage I from the teacher's weights.
pub fn stage1(
    cfg: &RunConfig,
    layout: &BlockLayout,
    teacher: &ParamStore<f64>,
    data: &Data,
    seed: u64,
    on_step: impl FnMut(&StepLog),
) -> CliResult<TrainOutcome> {
    let out = train_stage1(
        &cfg.model,
        teacher.clone(),
        &cfg.teacher_model(),
        teacher,
        &data.train,
        layout,
        &cfg.flow,
        &cfg.distill,
        seed,
        on_step,
    )?;
    diverged(&out, "stage 1")?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn stage2(
    cfg: &RunConfig,
    layout: BlockLayout,
    teacher: &ParamStore<f64>,
    student: ParamStore<f64>,
    data: &Data,
    rewards: &RewardConfig,
    seed: u64,
    on_step: impl FnMut(&Stage2Log),
) -> CliResult<Stage2Outcome> {
    let registry = RewardRegistry::with_defaults(&data.world);
    let score_cfg = cfg.teacher_model();
    let ctx = Stage2Context {
        student_cfg: &cfg.model,
        score_cfg: &score_cfg,
        real: teacher,
        layout,
        flow: &cfg.flow,
        distill: &cfg.distill,
        rewards,
        registry: &registry,
        clips: &data.train,
    };
    Ok(train_stage2(&ctx, student, seed, on_step)?)
}

/// Held-out metrics of a student under `layout`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Eval {
    pub lookahead: usize,
    /// Estimated MSE of the student's conditional mean video given the true
    /// audio, comparable with `bayes_floor`.
    pub video_mse: f64,
    /// MSE of the plain mean of the sampled streams.
    pub video_mse_samples: f64,
    pub bayes_floor: f64,
    pub bayes_floor_w0: f64,
    /// Sync of video streamed against the true audio.
    pub sync_clamped: f64,
    /// Rewards of freely generated audio/video pairs.
    pub sync: f64,
    pub visual: f64,
    pub audio: f64,
}

pub fn evaluate(cfg: &RunConfig, layout: BlockLayout, params: &ParamStore<f64>, data: &Data) -> CliResult<Eval> {
    let grid = &cfg.flow.student_grid;
    let reg = RewardRegistry::with_defaults(&data.world);
    let seed = cfg.eval.seed;
    let reward =
        |metric: &str, clamp: bool| mean_stream_reward(&cfg.model, params, layout, grid, &reg, metric, &data.held_out, clamp, seed);
    let mse = clamped_video_mse(&cfg.model, params, layout, grid, &data.held_out, cfg.eval.samples, seed)?;
    Ok(Eval {
        lookahead: layout.lookahead,
        video_mse: mse.conditional_mean,
        video_mse_samples: mse.sample_mean,
        bayes_floor: data.world.bayes_floor(layout.lookahead),
        bayes_floor_w0: data.world.bayes_floor(0),
        sync_clamped: reward(SYNC, true)?,
        sync: reward(SYNC, false)?,
        visual: reward(VISUAL, false)?,
        audio: reward(AUDIO, false)?,
    })
}

/// Aggregates of a Stage II log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage2Summary {
    pub joint_steps: usize,
    pub audio_steps: usize,
    pub skipped_samples: usize,
    pub w_clip_rate: f64,
    pub w_max: f64,
    pub l_dmd_v_mean: f64,
    /// `None` without an audio-only phase.
    pub video_params_frozen: Option<bool>,
    /// Window of the audio-phase moving averages.
    pub audio_window: usize,
    /// Batch audio reward averaged over consecutive non-overlapping
    /// windows of the audio-only phase.
    pub audio_reward_ma: Vec<f64>,
    pub l_dmd_a_ma: Vec<f64>,
}

pub const AUDIO_WINDOW: usize = 100;

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize_stage2(out: &Stage2Outcome) -> Stage2Summary {
    let log = &out.log;
    let joint: Vec<&Stage2Log> = log.iter().filter(|l| !l.audio_only).collect();
    let audio: Vec<&Stage2Log> = log.iter().filter(|l| l.audio_only).collect();
    let window = AUDIO_WINDOW.min(audio.len() / 2).max(1);
    let chunks = |f: fn(&Stage2Log) -> f64| -> Vec<f64> { audio.chunks_exact(window).map(|c| mean(c.iter().map(|l| f(l)))).collect() };
    Stage2Summary {
        joint_steps: joint.len(),
        audio_steps: audio.len(),
        skipped_samples: log.iter().map(|l| l.skipped).sum(),
        w_clip_rate: mean(log.iter().map(|l| l.w_clip_rate)),
        w_max: log.iter().map(|l| l.w_max).fold(0.0, f64::max),
        l_dmd_v_mean: mean(joint.iter().map(|l| l.l_dmd_v)),
        video_params_frozen: out.video_hash_frozen.as_ref().map(|(a, b)| a == b),
        audio_window: window,
        audio_reward_ma: chunks(|l| l.audio_mean),
        l_dmd_a_ma: chunks(|l| l.l_dmd_a),
    }
}

/// Median of a non-empty sample; the mean of the middle pair for even
/// lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
