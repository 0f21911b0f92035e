use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsrt_cli::{commands, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "dsrt", version, about = "Streaming dual-stream diffusion on a synthetic audio/video world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `distill.stage1.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Experiment directory; each command writes `<out>/<stage>/`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out datasets.
    Synth(Common),
    /// Train the bidirectional flow-matching teacher.
    TrainTeacher(Common),
    /// Regress the causal student onto the teacher.
    Stage1(Common),
    /// Self-rollout distribution-matching distillation.
    Stage2 {
        #[command(flatten)]
        common: Common,
        /// Reward coefficients, e.g. `sync=2,visual=0,audio=0`.
        #[arg(long)]
        betas: Option<String>,
        /// Joint steps before the video stream is frozen.
        #[arg(long)]
        freeze_video_after: Option<usize>,
    },
    /// Stream clips with the latest student.
    Stream(Common),
    /// Distill one student per look-ahead window and seed.
    AblateWindow(Common),
    /// Stage II for each reward coefficient and seed.
    AblateBeta(Common),
    /// Latency, throughput and attention FLOPs against stream length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
    },
}

fn load(common: &Common, extra: &[String]) -> CliResult<RunConfig> {
    let mut sets = common.sets.clone();
    sets.extend_from_slice(extra);
    RunConfig::load(common.config.as_deref(), &sets)
}

fn run(cli: Cli) -> CliResult<()> {
    type Cmd = fn(&RunConfig, &Path) -> CliResult<()>;
    let simple = |common: &Common, f: Cmd| -> CliResult<()> { f(&load(common, &[])?, &common.out) };
    match cli.command {
        Command::Synth(c) => simple(&c, commands::synth),
        Command::TrainTeacher(c) => simple(&c, commands::train_teacher),
        Command::Stage1(c) => simple(&c, commands::stage1),
        Command::Stage2 {
            common,
            betas,
            freeze_video_after,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = freeze_video_after {
                extra.push(format!("distill.stage2_steps={n}"));
            }
            let mut cfg = load(&common, &extra)?;
            if let Some(b) = betas {
                cfg.rewards
                    .set_betas(&b)
                    .map_err(|e| CliError::config("/rewards/betas", e.to_string()))?;
            }
            commands::stage2(&cfg, &common.out)
        }
        Command::Stream(c) => simple(&c, commands::stream),
        Command::AblateWindow(c) => simple(&c, commands::ablate_window),
        Command::AblateBeta(c) => simple(&c, commands::ablate_beta),
        Command::Bench { common, random_init } => commands::bench(&load(&common, &[])?, &common.out, random_init),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
