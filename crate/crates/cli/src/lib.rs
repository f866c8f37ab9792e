//! `scafusion <gen|train|eval|infer|gradcheck|ablate> --config <path> [--seed N] [--out DIR]`

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scafusion::harness;

#[derive(Debug, Parser)]
#[command(
    name = "scafusion",
    version,
    about = "Camera-LiDAR BEV fusion detector on synthetic lunar scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scene and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint directory; defaults to `<out>/checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset (into --out, else the config's dataset root).
    Gen(Common),
    /// Train, then write history, checkpoint, report and summary.
    Train(Common),
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Detect boxes in one sample and draw a BEV picture.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Index into the eval split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
    /// Train the toggle matrix and report it.
    Ablate(Common),
}

fn out_dir(c: &Common, default: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn checkpoint_dir(out: &Path, ckpt: &CheckpointArgs) -> PathBuf {
    ckpt.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint"))
}

fn run(cmd: Command) -> scafusion::Result<i32> {
    match cmd {
        Command::Gen(c) => {
            let cfg = harness::load_config(c.config.as_deref(), c.seed)?;
            let root = c.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            harness::gen_run(&cfg, &root)?;
        }
        Command::Train(c) => {
            let cfg = harness::load_config(c.config.as_deref(), c.seed)?;
            harness::train_run(&cfg, &out_dir(&c, "runs/train"))?;
        }
        Command::Eval { common, ckpt } => {
            let out = out_dir(&common, "runs/train");
            let dir = checkpoint_dir(&out, &ckpt);
            let cfg = harness::config_for_checkpoint(common.config.as_deref(), common.seed, &dir)?;
            harness::eval_run(&cfg, &dir, &out)?;
        }
        Command::Infer { common, ckpt, sample } => {
            let out = out_dir(&common, "runs/train");
            let dir = checkpoint_dir(&out, &ckpt);
            let cfg = harness::config_for_checkpoint(common.config.as_deref(), common.seed, &dir)?;
            harness::infer_run(&cfg, &dir, sample, &out)?;
        }
        Command::Gradcheck(c) => {
            if let Some(p) = &c.config {
                harness::load_config(Some(p), c.seed)?;
            }
            let (ok, _) = harness::gradcheck_run(&out_dir(&c, "."))?;
            if !ok {
                return Ok(1);
            }
        }
        Command::Ablate(c) => {
            let cfg = harness::load_config(c.config.as_deref(), c.seed)?;
            harness::ablate_run(&cfg, &out_dir(&c, "runs/ablate"))?;
        }
    }
    Ok(0)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status: 0 on success, 1 on failure, 2 on usage errors.
pub fn run_command<S: AsRef<str>>(argv: &[S]) -> i32 {
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
