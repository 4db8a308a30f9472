use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowcritic_cli::commands::{self, ReportKind, SampleMode};
use flowcritic_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "flowcritic", version, about = "Train and evaluate Real-NVP flows with likelihood and critic objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
    /// mle, wgan, wgan_fast or combined.
    #[arg(long)]
    objective: Option<String>,
    /// Generator steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long = "n-critic")]
    n_critic: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("levels", self.levels.map(|v| v.to_string())),
            ("objective", self.objective.clone()),
            ("total_steps", self.steps.map(|v| v.to_string())),
            ("n_critic", self.n_critic.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("precision", self.precision.clone()),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing metrics.csv and checkpoints to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from latest.rnvp in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute evaluation reports for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to final.rnvp, then latest.rnvp, in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated subset of wdist,bpd,latents,nllhist,jrank,klgap.
        #[arg(long, default_value = "wdist,bpd,latents,nllhist,jrank,klgap")]
        kinds: String,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// fresh, partial_first or partial_second.
        #[arg(long, default_value = "fresh")]
        mode: String,
        /// FC2D batch to resample in the partial modes.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("FLOWCRITIC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("FLOWCRITIC_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { common, resume } => commands::train(&common.resolve()?, resume),
        Command::Eval { common, checkpoint, kinds } => {
            let kinds = ReportKind::parse_list(&kinds)?;
            for p in commands::eval(&common.resolve()?, checkpoint.as_deref(), &kinds)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Sample {
            common,
            checkpoint,
            n,
            mode,
            input,
        } => {
            let mode = SampleMode::parse(&mode).ok_or_else(|| CliError::Usage(format!("unknown sample mode {mode:?}")))?;
            for p in commands::sample(&common.resolve()?, checkpoint.as_deref(), n, mode, input.as_deref())? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
