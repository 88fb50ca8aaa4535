mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "dxnet",
    version,
    about = "Train, evaluate and probe dense networks with xUnit activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every verb.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// `key = value` settings file (`net.*`, `train.*`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable, the last occurrence wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (an image path for `denoise` and `sr-infer`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// CIFAR-10 binary directory or file, or a directory of PGM/PPM images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Explicit validation or evaluation set, same formats as `--data`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Generate this many synthetic samples instead of reading files.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side of synthetic images.
    #[arg(long)]
    pub side: Option<usize>,
    /// Cut random square patches of this size from restoration images.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of patches to cut.
    #[arg(long, default_value_t = 256)]
    pub patches: usize,
    /// Keep at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum CountModeArg {
    #[default]
    Compact,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.dxnt`, `history.csv` and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report top-1 error or PSNR of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the parameter budget per stage.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = CountModeArg::Compact)]
        mode: CountModeArg,
    },
    /// Estimate the Hessian trace by perturbing conv filters.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "quadratic")]
        checkpoint: Option<PathBuf>,
        /// Probe the bundled quadratic loss with Hessian diag(1, 2, 3).
        #[arg(long)]
        quadratic: bool,
        /// `auto` or comma-separated perturbation scales starting at 0.
        #[arg(long, default_value = "auto")]
        sigmas: String,
        /// Realizations per scale.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Half-width of the sampled quadratic profile.
        #[arg(long, default_value_t = 1.0)]
        t_max: f64,
    },
    /// Class activation map of one image.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Denoise a PGM/PPM image with a residual denoiser.
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Clean reference for a PSNR report.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Upscale a PGM/PPM image with a super-resolution model.
    SrInfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Divergence(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 3,
            Failure::Data(_) => 4,
            Failure::Divergence(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Divergence(m) | Failure::Other(m) => m,
        }
    }
}

impl From<dxnet::Error> for Failure {
    fn from(e: dxnet::Error) -> Self {
        use dxnet::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => Failure::Config(msg),
            E::Data(_) | E::Format(_) | E::Checkpoint(_) | E::CheckpointEntry { .. } | E::Io(_) => {
                Failure::Data(msg)
            }
            E::Divergence { .. } => Failure::Divergence(msg),
            E::Shape(_) | E::InvalidArgument(_) | E::NonFinite(_) => Failure::Other(msg),
        }
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

fn set_threads(threads: Option<usize>) -> Outcome {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(command: Command, argv: &[String]) -> Outcome {
    match command {
        Command::Train {
            common,
            data,
            resume,
        } => {
            set_threads(common.threads)?;
            commands::train(&common, &data, resume.as_deref(), argv)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            set_threads(common.threads)?;
            commands::eval(&common, &data, &checkpoint, argv)
        }
        Command::Count { common, mode } => {
            set_threads(common.threads)?;
            commands::count(&common, mode, argv)
        }
        Command::Probe {
            common,
            data,
            checkpoint,
            quadratic,
            sigmas,
            n,
            t_max,
        } => {
            set_threads(common.threads)?;
            let opts = commands::ProbeOpts {
                checkpoint,
                quadratic,
                sigmas,
                n,
                t_max,
            };
            commands::probe(&common, &data, &opts, argv)
        }
        Command::Cam {
            common,
            checkpoint,
            input,
            class,
        } => {
            set_threads(common.threads)?;
            commands::cam(&common, &checkpoint, &input, class, argv)
        }
        Command::Denoise {
            common,
            checkpoint,
            input,
            reference,
        } => {
            set_threads(common.threads)?;
            commands::restore(
                &common,
                &checkpoint,
                &input,
                reference.as_deref(),
                false,
                argv,
            )
        }
        Command::SrInfer {
            common,
            checkpoint,
            input,
            reference,
        } => {
            set_threads(common.threads)?;
            commands::restore(
                &common,
                &checkpoint,
                &input,
                reference.as_deref(),
                true,
                argv,
            )
        }
        Command::Replay {
            manifest,
            out,
            threads,
        } => {
            let argv = setup::replay_argv(&manifest, out.as_deref(), threads)?;
            let cli = Cli::try_parse_from(&argv)
                .map_err(|e| Failure::Config(format!("manifest: {e}")))?;
            dispatch(cli.command, &argv[1..])
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
