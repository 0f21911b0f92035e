//! One function per subcommand. Each writes `<out>/<stage>/`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dsrt::flow::{sample, StepLog};
use dsrt::masks::Visibility;
use dsrt::model::{init_params, save_model, Init};
use dsrt::numerics::rng::stream_key;
use dsrt::numerics::{checkpoint, ParamStore, Scalar, Tensor};
use dsrt::rewards::{RewardConfig, RewardRegistry, AUDIO, SYNC, VISUAL};
use dsrt::streaming::{run_stream, sample_full_recompute, StreamConfig, StreamOutput};
use dsrt::synthworld::{save_dataset, Clip, World};
use serde::Serialize;
use serde_json::json;

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, median, Eval, Stage2Summary, STUDENT_CKPT, TEACHER_CKPT};
use crate::rundir::{file_sha256, RunDir};

/// A metrics line tagged with its phase and, in ablations, its run.
#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    phase: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(flatten)]
    record: &'a T,
}

fn tag<'a, T: Serialize>(phase: &'a str, record: &'a T) -> Tagged<'a, T> {
    Tagged {
        phase,
        window: None,
        beta: None,
        seed: None,
        record,
    }
}

/// Logs lines through a closure that cannot return errors; the first
/// failure is kept and reported afterwards.
struct Logger<'a> {
    dir: &'a mut RunDir,
    failed: Option<CliError>,
}

impl<'a> Logger<'a> {
    fn new(dir: &'a mut RunDir) -> Self {
        Self { dir, failed: None }
    }

    fn log(&mut self, record: &impl Serialize) {
        if self.failed.is_none() {
            if let Err(e) = self.dir.log(record) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(self) -> CliResult<()> {
        self.failed.map_or(Ok(()), Err)
    }
}

fn tail_mean(log: &[StepLog], f: impl Fn(&StepLog) -> f64) -> f64 {
    let n = log.len().min(50);
    if n == 0 {
        return f64::NAN;
    }
    log[log.len() - n..].iter().map(f).sum::<f64>() / n as f64
}

fn train_summary(log: &[StepLog]) -> serde_json::Value {
    json!({
        "steps": log.len(),
        "final_loss": tail_mean(log, |l| l.loss),
        "final_loss_video": tail_mean(log, |l| l.loss_video),
        "final_loss_audio": tail_mean(log, |l| l.loss_audio),
    })
}

fn mean_reward(reg: &RewardRegistry, metric: &str, clips: &[Clip]) -> CliResult<f64> {
    let mut total = 0.0;
    for c in clips {
        total += reg.score(metric, c)?;
    }
    Ok(total / clips.len() as f64)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "synth", cfg)?;
    let world = World::new(cfg.world.clone())?;
    let d = &cfg.data;
    let train = world.generate(d.train_seed, d.train_clips)?;
    let held_out = world.generate(d.held_out_seed, d.held_out_clips)?;
    save_dataset(dir.file("data/train"), &cfg.world, d.train_seed, &train)?;
    save_dataset(dir.file("data/held_out"), &cfg.world, d.held_out_seed, &held_out)?;
    let reg = RewardRegistry::with_defaults(&world);
    let floors: Vec<f64> = (0..cfg.world.num_frames).map(|w| world.bayes_floor(w)).collect();
    for (w, f) in floors.iter().enumerate() {
        dir.log(&json!({"phase": "bayes_floor", "window": w, "bayes_floor": f}))?;
    }
    dir.summary(json!({
        "train_clips": train.len(),
        "held_out_clips": held_out.len(),
        "bayes_floor": floors,
        "held_out_rewards": {
            SYNC: mean_reward(&reg, SYNC, &held_out)?,
            VISUAL: mean_reward(&reg, VISUAL, &held_out)?,
            AUDIO: mean_reward(&reg, AUDIO, &held_out)?,
        },
    }))?;
    dir.timing(json!({"seconds": t0.elapsed().as_secs_f64()}))
}

pub fn train_teacher(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = pipeline::load_data(out, cfg)?;
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "teacher", cfg)?;
    let mut logger = Logger::new(&mut dir);
    let outcome = pipeline::train_teacher(cfg, &data, |l| logger.log(&tag("teacher", l)))?;
    logger.finish()?;
    let ckpt = dir.file(TEACHER_CKPT);
    let tcfg = cfg.teacher_model();
    save_model(&ckpt, &tcfg, &outcome.params)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    // Whole-clip teacher samples, scored by the sync oracle.
    let reg = RewardRegistry::with_defaults(&data.world);
    let vis = Visibility::bidirectional(pipeline::teacher_layout(cfg)?);
    let mut samples = Vec::new();
    for (i, src) in data.held_out.iter().enumerate() {
        let x = sample(
            &tcfg,
            &outcome.params,
            &vis,
            cfg.flow.teacher_steps,
            src.condition_id,
            stream_key(&[cfg.eval.seed, i as u64]),
            None,
        )?;
        samples.push(Clip {
            video: x.video,
            audio: x.audio,
            condition_id: src.condition_id,
        });
    }
    let lags: Vec<i64> = samples
        .iter()
        .map(|c| data.world.sync_lag(&c.video, &c.audio, c.condition_id).map(|s| s.lag))
        .collect::<dsrt::Result<_>>()?;
    let at_true_lag = lags.iter().filter(|&&l| l == cfg.world.lead_delta as i64).count() as f64 / lags.len() as f64;
    let mut summary = train_summary(&outcome.log);
    summary["checkpoint_sha256"] = json!(file_sha256(&ckpt)?);
    summary["sample_sync"] = json!(mean_reward(&reg, SYNC, &samples)?);
    summary["sample_at_true_lag"] = json!(at_true_lag);
    summary["data_sync"] = json!(mean_reward(&reg, SYNC, &data.held_out)?);
    dir.summary(summary)?;
    pipeline::diverged(&outcome, "teacher training")?;
    dir.timing(json!({"train_seconds": train_seconds, "seconds": t0.elapsed().as_secs_f64()}))
}

pub fn stage1(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = pipeline::load_data(out, cfg)?;
    let teacher = pipeline::load_teacher(out, cfg)?;
    let teacher_sha = file_sha256(&pipeline::teacher_path(out))?;
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "stage1", cfg)?;
    let layout = cfg.block_layout(cfg.layout.lookahead)?;
    let mut logger = Logger::new(&mut dir);
    let outcome = pipeline::stage1(cfg, &layout, &teacher, &data, cfg.seed, |l| logger.log(&tag("stage1", l)))?;
    logger.finish()?;
    let ckpt = dir.file(STUDENT_CKPT);
    save_model(&ckpt, &cfg.model, &outcome.params)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let eval = pipeline::evaluate(cfg, layout, &outcome.params, &data)?;
    let mut summary = train_summary(&outcome.log);
    summary["eval"] = json!(eval);
    summary["checkpoint_sha256"] = json!(file_sha256(&ckpt)?);
    summary["inputs"] = json!({"teacher_sha256": teacher_sha});
    dir.summary(summary)?;
    dir.timing(json!({"train_seconds": train_seconds, "seconds": t0.elapsed().as_secs_f64()}))
}

fn stage1_path(out: &Path) -> std::path::PathBuf {
    out.join("stage1").join(STUDENT_CKPT)
}

pub fn stage2(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let student_path = stage1_path(out);
    let student = pipeline::load_checkpoint(student_path.clone(), "stage1", &cfg.model)?;
    let data = pipeline::load_data(out, cfg)?;
    let teacher = pipeline::load_teacher(out, cfg)?;
    let inputs = json!({
        "teacher_sha256": file_sha256(&pipeline::teacher_path(out))?,
        "stage1_sha256": file_sha256(&student_path)?,
    });
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "stage2", cfg)?;
    let layout = cfg.block_layout(cfg.layout.lookahead)?;
    let mut logger = Logger::new(&mut dir);
    let outcome = pipeline::stage2(cfg, layout, &teacher, student, &data, &cfg.rewards, cfg.seed, |l| {
        logger.log(&tag("stage2", l))
    })?;
    logger.finish()?;
    let ckpt = dir.file(STUDENT_CKPT);
    save_model(&ckpt, &cfg.model, &outcome.student)?;
    save_model(dir.file("fake.ckpt"), &cfg.teacher_model(), &outcome.fake)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let eval = pipeline::evaluate(cfg, layout, &outcome.student, &data)?;
    dir.summary(json!({
        "eval": eval,
        "training": pipeline::summarize_stage2(&outcome),
        "checkpoint_sha256": file_sha256(&ckpt)?,
        "inputs": inputs,
    }))?;
    dir.timing(json!({"train_seconds": train_seconds, "seconds": t0.elapsed().as_secs_f64()}))
}

/// The most distilled student available under `out`.
fn latest_student(out: &Path, cfg: &RunConfig) -> CliResult<(String, ParamStore<f64>)> {
    let s2 = out.join("stage2").join(STUDENT_CKPT);
    if s2.exists() {
        return Ok(("stage2".into(), pipeline::load_checkpoint(s2, "stage2", &cfg.model)?));
    }
    Ok(("stage1".into(), pipeline::load_checkpoint(stage1_path(out), "stage1", &cfg.model)?))
}

#[derive(Serialize)]
struct StreamedClip {
    index: usize,
    condition: usize,
    seed: u64,
    flops: u64,
    sync: f64,
    visual: f64,
    audio: f64,
}

fn stream_clips<T: Scalar>(
    cfg: &RunConfig,
    params: &ParamStore<f64>,
    world: &World,
    dir: &mut RunDir,
) -> CliResult<(Vec<StreamedClip>, Vec<f64>)> {
    let layout = cfg.block_layout(cfg.layout.lookahead)?;
    let stream = StreamConfig {
        grid: cfg.flow.student_grid.clone(),
        capacity_frames: cfg.stream.capacity_frames,
    };
    let params_t: ParamStore<T> = params.cast();
    let reg = RewardRegistry::with_defaults(world);
    let mut rows = Vec::new();
    let mut latency = Vec::new();
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for i in 0..cfg.stream.clips {
        let condition = i % cfg.world.num_conditions;
        let seed = stream_key(&[cfg.seed, i as u64]);
        let out: StreamOutput<T> = run_stream(&cfg.model, &params_t, layout, &stream, condition, seed, None)?;
        for rec in &out.records {
            dir.log(&json!({"phase": "stream", "clip": i, "block": rec.block_index, "cache_frames": rec.cache_frames, "flops": rec.flops, "wall_ms": rec.wall_ms}))?;
        }
        latency.push(out.latency_ms());
        let clip = Clip {
            video: out.video.cast(),
            audio: out.audio.cast(),
            condition_id: condition,
        };
        rows.push(StreamedClip {
            index: i,
            condition,
            seed,
            flops: out.records.iter().map(|r| r.flops).sum(),
            sync: reg.score(SYNC, &clip)?,
            visual: reg.score(VISUAL, &clip)?,
            audio: reg.score(AUDIO, &clip)?,
        });
        tensors.insert(format!("clip{i}.video"), out.video);
        tensors.insert(format!("clip{i}.audio"), out.audio);
    }
    checkpoint::save(dir.file("samples.ckpt"), &tensors)?;
    Ok((rows, latency))
}

pub fn stream(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let precision = Precision::from_env()?;
    let (source, params) = latest_student(out, cfg)?;
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "stream", cfg)?;
    let world = World::new(cfg.world.clone())?;
    let (rows, latency) = match precision {
        Precision::F64 => stream_clips::<f64>(cfg, &params, &world, &mut dir)?,
        Precision::F32 => stream_clips::<f32>(cfg, &params, &world, &mut dir)?,
    };
    dir.write_csv("streams.csv", &rows)?;
    dir.summary(json!({"student": source, "precision": precision, "clips": rows}))?;
    dir.timing(json!({"precision": precision, "first_block_ms": latency, "seconds": t0.elapsed().as_secs_f64()}))
}

/// One distilled student of an ablation.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub window: usize,
    pub beta: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub eval: Eval,
    #[serde(flatten)]
    pub training: Stage2Summary,
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowRow {
    pub window: usize,
    pub sync_score: f64,
    pub sync_free: f64,
    pub video_mse: f64,
    pub video_mse_min: f64,
    pub video_mse_max: f64,
    pub video_mse_samples: f64,
    pub bayes_floor: f64,
    pub seeds: usize,
}

/// Flat per-run record for CSV output.
#[derive(Serialize)]
struct RunCsv {
    window: usize,
    beta: Option<f64>,
    seed: u64,
    video_mse: f64,
    video_mse_samples: f64,
    bayes_floor: f64,
    sync_clamped: f64,
    sync: f64,
    visual: f64,
    audio: f64,
    w_clip_rate: f64,
    w_max: f64,
    video_params_frozen: Option<bool>,
    audio_reward_first: Option<f64>,
    audio_reward_last: Option<f64>,
}

impl From<&AblationRun> for RunCsv {
    fn from(r: &AblationRun) -> Self {
        Self {
            window: r.window,
            beta: r.beta,
            seed: r.seed,
            video_mse: r.eval.video_mse,
            video_mse_samples: r.eval.video_mse_samples,
            bayes_floor: r.eval.bayes_floor,
            sync_clamped: r.eval.sync_clamped,
            sync: r.eval.sync,
            visual: r.eval.visual,
            audio: r.eval.audio,
            w_clip_rate: r.training.w_clip_rate,
            w_max: r.training.w_max,
            video_params_frozen: r.training.video_params_frozen,
            audio_reward_first: r.training.audio_reward_ma.first().copied(),
            audio_reward_last: r.training.audio_reward_ma.last().copied(),
        }
    }
}

fn tagged_logger<'a, T: Serialize>(logger: &mut Logger, phase: &'a str, window: usize, beta: Option<f64>, seed: u64, rec: &'a T) {
    logger.log(&Tagged {
        phase,
        window: Some(window),
        beta,
        seed: Some(seed),
        record: rec,
    });
}

pub fn ablate_window(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = pipeline::load_data(out, cfg)?;
    let teacher = pipeline::load_teacher(out, cfg)?;
    let teacher_sha = file_sha256(&pipeline::teacher_path(out))?;
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "ablate-window", cfg)?;
    std::fs::create_dir_all(dir.file("students"))?;
    let mut runs = Vec::new();
    let mut seconds = Vec::new();
    for &w in &cfg.ablate.windows {
        let layout = cfg.block_layout(w)?;
        for &seed in &cfg.seeds {
            let start = Instant::now();
            log::info!("window {w}, seed {seed}");
            let mut logger = Logger::new(&mut dir);
            let s1 = pipeline::stage1(cfg, &layout, &teacher, &data, seed, |l| {
                tagged_logger(&mut logger, "stage1", w, None, seed, l)
            })?;
            let s2 = pipeline::stage2(cfg, layout, &teacher, s1.params, &data, &cfg.rewards, seed, |l| {
                tagged_logger(&mut logger, "stage2", w, None, seed, l)
            })?;
            logger.finish()?;
            save_model(dir.file(&format!("students/w{w}_s{seed}.ckpt")), &cfg.model, &s2.student)?;
            let eval = pipeline::evaluate(cfg, layout, &s2.student, &data)?;
            let run = AblationRun {
                window: w,
                beta: None,
                seed,
                eval,
                training: pipeline::summarize_stage2(&s2),
            };
            log::info!(
                "window {w}, seed {seed}: video MSE {:.5} (floor {:.5})",
                run.eval.video_mse,
                run.eval.bayes_floor
            );
            runs.push(run);
            seconds.push(json!({"window": w, "seed": seed, "seconds": start.elapsed().as_secs_f64()}));
        }
    }
    let rows: Vec<WindowRow> = cfg
        .ablate
        .windows
        .iter()
        .map(|&w| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.window == w).collect();
            let mses: Vec<f64> = mine.iter().map(|r| r.eval.video_mse).collect();
            WindowRow {
                window: w,
                sync_score: median(&mine.iter().map(|r| r.eval.sync_clamped).collect::<Vec<_>>()),
                sync_free: median(&mine.iter().map(|r| r.eval.sync).collect::<Vec<_>>()),
                video_mse: median(&mses),
                video_mse_min: mses.iter().copied().fold(f64::INFINITY, f64::min),
                video_mse_max: mses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                video_mse_samples: median(&mine.iter().map(|r| r.eval.video_mse_samples).collect::<Vec<_>>()),
                bayes_floor: data.world.bayes_floor(w),
                seeds: mine.len(),
            }
        })
        .collect();
    dir.write_csv("table.csv", &rows)?;
    dir.write_csv("runs.csv", &runs.iter().map(RunCsv::from).collect::<Vec<_>>())?;
    let body = json!({"rows": rows, "runs": runs, "inputs": {"teacher_sha256": teacher_sha}});
    dir.write_json("table.json", &body)?;
    dir.summary(body)?;
    dir.timing(json!({"runs": seconds, "seconds": t0.elapsed().as_secs_f64()}))
}

#[derive(Clone, Debug, Serialize)]
pub struct BetaRow {
    pub beta: f64,
    pub metric: String,
    pub targeted_reward: f64,
    pub sync_clamped: f64,
    pub sync: f64,
    pub visual: f64,
    pub audio: f64,
    pub video_mse: f64,
    pub w_clip_rate: f64,
    pub seeds: usize,
}

/// Reward of the swept metric: sync is measured on video streamed against
/// the true audio, the others on free streams.
pub fn targeted(metric: &str, e: &Eval) -> f64 {
    match metric {
        SYNC => e.sync_clamped,
        VISUAL => e.visual,
        _ => e.audio,
    }
}

pub fn ablate_beta(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let student_path = stage1_path(out);
    let student = pipeline::load_checkpoint(student_path.clone(), "stage1", &cfg.model)?;
    let data = pipeline::load_data(out, cfg)?;
    let teacher = pipeline::load_teacher(out, cfg)?;
    let inputs = json!({
        "teacher_sha256": file_sha256(&pipeline::teacher_path(out))?,
        "stage1_sha256": file_sha256(&student_path)?,
    });
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "ablate-beta", cfg)?;
    let layout = cfg.block_layout(cfg.layout.lookahead)?;
    let metric = cfg.ablate.beta_metric.as_str();
    let w = cfg.layout.lookahead;
    let mut runs = Vec::new();
    let mut seconds = Vec::new();
    for &beta in &cfg.ablate.betas {
        let mut rewards = RewardConfig {
            betas: [SYNC, VISUAL, AUDIO].iter().map(|m| (m.to_string(), 0.0)).collect(),
            ..cfg.rewards.clone()
        };
        rewards.betas.insert(metric.to_string(), beta);
        for &seed in &cfg.seeds {
            let start = Instant::now();
            log::info!("β {beta}, seed {seed}");
            let mut logger = Logger::new(&mut dir);
            let s2 = pipeline::stage2(cfg, layout, &teacher, student.clone(), &data, &rewards, seed, |l| {
                tagged_logger(&mut logger, "stage2", w, Some(beta), seed, l)
            })?;
            logger.finish()?;
            let eval = pipeline::evaluate(cfg, layout, &s2.student, &data)?;
            let run = AblationRun {
                window: w,
                beta: Some(beta),
                seed,
                eval,
                training: pipeline::summarize_stage2(&s2),
            };
            log::info!(
                "β {beta}, seed {seed}: {metric} {:.5}, video MSE {:.5}",
                targeted(metric, &run.eval),
                run.eval.video_mse
            );
            runs.push(run);
            seconds.push(json!({"beta": beta, "seed": seed, "seconds": start.elapsed().as_secs_f64()}));
        }
    }
    let rows: Vec<BetaRow> = cfg
        .ablate
        .betas
        .iter()
        .map(|&beta| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.beta == Some(beta)).collect();
            let med = |f: &dyn Fn(&AblationRun) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            BetaRow {
                beta,
                metric: metric.to_string(),
                targeted_reward: med(&|r| targeted(metric, &r.eval)),
                sync_clamped: med(&|r| r.eval.sync_clamped),
                sync: med(&|r| r.eval.sync),
                visual: med(&|r| r.eval.visual),
                audio: med(&|r| r.eval.audio),
                video_mse: med(&|r| r.eval.video_mse),
                w_clip_rate: med(&|r| r.training.w_clip_rate),
                seeds: mine.len(),
            }
        })
        .collect();
    dir.write_csv("table.csv", &rows)?;
    dir.write_csv("runs.csv", &runs.iter().map(RunCsv::from).collect::<Vec<_>>())?;
    let body = json!({"rows": rows, "runs": runs, "inputs": inputs});
    dir.write_json("table.json", &body)?;
    dir.summary(body)?;
    dir.timing(json!({"runs": seconds, "seconds": t0.elapsed().as_secs_f64()}))
}

/// Per-K benchmark record.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub stream_first_block_ms: f64,
    /// Mean wall time of the blocks that carry a full look-ahead span (all
    /// but the last `W/F`), median over repetitions.
    pub stream_steady_ms: f64,
    pub stream_total_ms: f64,
    pub stream_blocks_per_s: f64,
    pub full_steady_ms: f64,
    pub full_total_ms: f64,
    /// Per-block attention FLOPs of the last block before the tail, where
    /// the look-ahead is still complete.
    pub stream_block_flops: u64,
    pub full_block_flops: u64,
}

/// Exact per-block FLOP counts for one K.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchFlops {
    pub k: usize,
    /// Streaming with the configured cache bound.
    pub stream: Vec<u64>,
    /// Streaming with an unbounded cache.
    pub stream_unbounded: Vec<u64>,
    pub full_recompute: Vec<u64>,
}

struct Timed {
    first_ms: f64,
    steady_ms: f64,
    total_ms: f64,
}

/// `tail` trailing blocks have a shortened look-ahead and are left out of
/// the steady-state mean.
fn timed<T: Scalar>(out: &StreamOutput<T>, tail: usize) -> Timed {
    let walls: Vec<f64> = out.records.iter().map(|r| r.wall_ms).collect();
    let full = &walls[..walls.len().saturating_sub(tail).max(1)];
    Timed {
        first_ms: walls[0],
        steady_ms: full.iter().sum::<f64>() / full.len() as f64,
        total_ms: walls.iter().sum(),
    }
}

fn bench_with<T: Scalar>(cfg: &RunConfig, params: &ParamStore<f64>, dir: &mut RunDir) -> CliResult<(Vec<BenchRow>, Vec<BenchFlops>)> {
    let p: ParamStore<T> = params.cast();
    let f = cfg.layout.frames_per_block;
    let grid = &cfg.flow.student_grid;
    let bounded = StreamConfig {
        grid: grid.clone(),
        capacity_frames: Some(cfg.bench.capacity_frames),
    };
    let unbounded = StreamConfig {
        grid: grid.clone(),
        capacity_frames: None,
    };
    let mut rows = Vec::new();
    let mut flops = Vec::new();
    for &k in &cfg.bench.ks {
        let layout = dsrt::masks::BlockLayout::new(f, cfg.world.tokens_per_frame, k * f, cfg.layout.lookahead)?;
        let tail = cfg.layout.lookahead / f;
        let run_s = || run_stream(&cfg.model, &p, layout, &bounded, 0, cfg.seed, None);
        let run_f = || sample_full_recompute(&cfg.model, &p, layout, grid, 0, cfg.seed, None);
        let s0 = run_s()?;
        let f0 = run_f()?;
        let u0 = run_stream(&cfg.model, &p, layout, &unbounded, 0, cfg.seed, None)?;
        let per_block = |o: &StreamOutput<T>| o.records.iter().map(|r| r.flops).collect::<Vec<u64>>();
        let record = BenchFlops {
            k,
            stream: per_block(&s0),
            stream_unbounded: per_block(&u0),
            full_recompute: per_block(&f0),
        };
        let (mut st, mut ft) = (Vec::new(), Vec::new());
        for rep in 0..cfg.bench.reps {
            let s = timed(&run_s()?, tail);
            let fr = timed(&run_f()?, tail);
            dir.log(&json!({"phase": "bench", "k": k, "rep": rep, "stream_steady_ms": s.steady_ms, "stream_first_block_ms": s.first_ms, "full_steady_ms": fr.steady_ms}))?;
            st.push(s);
            ft.push(fr);
        }
        let med = |xs: &[Timed], f: fn(&Timed) -> f64| median(&xs.iter().map(f).collect::<Vec<_>>());
        let tail = k.saturating_sub(2);
        let stream_total = med(&st, |t| t.total_ms);
        rows.push(BenchRow {
            k,
            stream_first_block_ms: med(&st, |t| t.first_ms),
            stream_steady_ms: med(&st, |t| t.steady_ms),
            stream_total_ms: stream_total,
            stream_blocks_per_s: k as f64 / (stream_total / 1000.0),
            full_steady_ms: med(&ft, |t| t.steady_ms),
            full_total_ms: med(&ft, |t| t.total_ms),
            stream_block_flops: record.stream[tail],
            full_block_flops: record.full_recompute[tail],
        });
        flops.push(record);
    }
    Ok((rows, flops))
}

pub fn bench(cfg: &RunConfig, out: &Path, random_init: bool) -> CliResult<()> {
    let precision = Precision::from_env()?;
    let (source, params) = if random_init {
        ("random".to_string(), init_params(&cfg.model, cfg.seed, Init::Standard)?)
    } else {
        latest_student(out, cfg)?
    };
    let t0 = Instant::now();
    let mut dir = RunDir::create(out, "bench", cfg)?;
    let (rows, flops) = match precision {
        Precision::F64 => bench_with::<f64>(cfg, &params, &mut dir)?,
        Precision::F32 => bench_with::<f32>(cfg, &params, &mut dir)?,
    };
    dir.write_csv("table.csv", &rows)?;
    dir.write_json("table.json", &json!({"precision": precision, "rows": rows, "flops": flops}))?;
    dir.summary(json!({"student": source, "flops": flops}))?;
    dir.timing(json!({"precision": precision, "reps": cfg.bench.reps, "rows": rows, "seconds": t0.elapsed().as_secs_f64()}))
}
