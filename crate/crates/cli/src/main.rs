use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latentkv::Result;
use latentkv_cli::commands::{self, DataTask, EvalTask};
use latentkv_cli::{exit_code, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "latentkv",
    version,
    about = "Train and analyse cache-augmenting latent reasoners"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for gen-data)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// liu, hyp1, hyp2 or soft
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    n_latents: Option<usize>,
    #[arg(long)]
    operands: Option<usize>,
    /// Variance threshold for the capture analysis
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GenTask {
    Countdown,
    GraphQa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Countdown,
    Cot,
    Corpus,
}

impl From<DataKind> for EvalTask {
    fn from(k: DataKind) -> Self {
        match k {
            DataKind::Countdown => EvalTask::Countdown,
            DataKind::Cot => EvalTask::Cot,
            DataKind::Corpus => EvalTask::Corpus,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Latent-augmented pretraining on a text corpus
    Pretrain(Common),
    /// Countdown or chain-of-thought finetuning
    Finetune(Common),
    /// Write a task dataset as JSONL
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: GenTask,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        width: usize,
        /// Keep unsolvable Countdown draws instead of generating from a solution
        #[arg(long)]
        unfiltered: bool,
    },
    /// Accuracy or perplexity of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "countdown")]
        task: DataKind,
    },
    /// Subspace capture and silhouette report of Coprocessor latents
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "countdown")]
        task: DataKind,
        /// Rows kept per latent
        #[arg(long)]
        cap: Option<usize>,
        /// Do not center the captured latent's rows
        #[arg(long)]
        uncentered: bool,
    },
    /// Full-pass counts of sequential rollout versus the three-pass schedule
    Passcount(Common),
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| latentkv::Error::config("--config", "this command needs a run configuration"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        mode: c.mode.clone(),
        n_latents: c.n_latents,
        operands: c.operands,
        out: c.out.clone(),
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout();
    match cli.command {
        Command::Pretrain(c) => {
            let cfg = run_config(&c)?;
            commands::cmd_pretrain(&cfg, c.resume.as_deref(), &mut stdout).map(|_| ())
        }
        Command::Finetune(c) => {
            let cfg = run_config(&c)?;
            commands::cmd_finetune(&cfg, c.resume.as_deref(), &mut stdout).map(|_| ())
        }
        Command::GenData {
            common,
            task,
            count,
            depth,
            width,
            unfiltered,
        } => {
            let path = common.out.clone().unwrap_or_else(|| PathBuf::from("data.jsonl"));
            let task = match task {
                GenTask::Countdown if unfiltered => DataTask::CountdownUnfiltered,
                GenTask::Countdown => DataTask::Countdown,
                GenTask::GraphQa => DataTask::GraphQa,
            };
            commands::cmd_gen_data(
                task,
                count,
                common.operands.unwrap_or(3),
                depth,
                width,
                common.seed.unwrap_or(0),
                &path,
                &mut stdout,
            )
        }
        Command::Eval {
            checkpoint, data, task, ..
        } => commands::cmd_eval(&checkpoint, &data, task.into(), &mut stdout),
        Command::Interp {
            common,
            checkpoint,
            data,
            task,
            cap,
            uncentered,
        } => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("interp"));
            commands::cmd_interp(
                &checkpoint,
                &data,
                task.into(),
                common.tau.unwrap_or(0.97),
                cap,
                !uncentered,
                &out,
                &mut stdout,
            )
            .map(|_| ())
        }
        Command::Passcount(c) => {
            commands::cmd_passcount(c.n_latents.unwrap_or(16), c.seed.unwrap_or(0), &mut stdout).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
