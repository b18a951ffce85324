use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ldp_cli::commands::{self, CrossInputs};
use ldp_cli::{exit_code, Context, PipelineConfig, EXIT_CONFIG};
use ldp_core::LdpError;

#[derive(Parser)]
#[command(name = "ldp", version, about = "Latent diffusion adversarial patches on a toy detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; related files are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Only warnings and errors.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder on the image corpus.
    TrainAe(Common),
    /// Train the latent denoiser on encoded corpus images.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Train the grid detector on synthetic scenes.
    TrainDetector(Common),
    /// Write the image corpus and labelled synthetic scenes to a directory.
    GenData(Common),
    /// Optimize a patch against one detector.
    OptimizePatch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Measure clean and patched mAP, ASR and confidences.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        /// Replace the patch by a flat gray square of the same size.
        #[arg(long)]
        gray_control: bool,
        /// Directory of evaluation images instead of held-out synthetic scenes.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Transfer matrix: one patch per detector, evaluated on every detector.
    CrossEval {
        #[command(flatten)]
        common: Common,
        /// Detector artifacts; repeat the flag.
        #[arg(long = "detector", required = true)]
        detectors: Vec<PathBuf>,
        /// Patch for each detector in order; optimized on the fly when absent.
        #[arg(long = "patch")]
        patches: Vec<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainAe(c) | Command::TrainDetector(c) | Command::GenData(c) => c,
            Command::TrainDiffusion { common, .. }
            | Command::OptimizePatch { common, .. }
            | Command::Evaluate { common, .. }
            | Command::CrossEval { common, .. } => common,
        }
    }
}

fn thread_cap() -> Result<Option<usize>, LdpError> {
    match std::env::var("LDP_NUM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(LdpError::Config(format!("LDP_NUM_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn context(common: &Common) -> Result<Context, LdpError> {
    let mut config = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(Context { config, quiet: common.quiet })
}

fn run(cmd: &Command, ctx: &Context) -> Result<(), LdpError> {
    let out: &Path = &cmd.common().out;
    match cmd {
        Command::TrainAe(_) => commands::train_ae(ctx, out),
        Command::TrainDiffusion { ae, .. } => commands::train_diffusion_cmd(ctx, ae, out),
        Command::TrainDetector(_) => commands::train_detector_cmd(ctx, out),
        Command::GenData(_) => commands::gen_data(ctx, out),
        Command::OptimizePatch { ae, diffusion, detector, .. } => {
            commands::optimize_patch_cmd(ctx, ae, diffusion, detector, out)
        }
        Command::Evaluate { detector, patch, gray_control, images, .. } => {
            commands::evaluate(ctx, detector, patch, *gray_control, images.as_deref(), out)
        }
        Command::CrossEval { detectors, patches, ae, diffusion, images, .. } => {
            let inputs = CrossInputs {
                detectors,
                patches,
                ae: ae.as_deref(),
                diffusion: diffusion.as_deref(),
                images: images.as_deref(),
            };
            commands::cross_eval(ctx, &inputs, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let level = if common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = match thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            log::debug!("thread cap {n}; all stages run on one thread");
        }
        context(common)
    }) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(&cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
