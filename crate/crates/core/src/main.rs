use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lesionforge::config::{Preset, RunConfig};
use lesionforge::par::resolve_workers;
use lesionforge::pipeline::Run;
use lesionforge::Result;

#[derive(Parser)]
#[command(
    name = "lesionforge",
    version,
    about = "Phantom lesion synthesis and evaluation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; omitted keys take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; every stage reads and writes below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-image stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the phantom dataset.
    Generate,
    /// Grow lesion masks from the box annotations.
    Segment,
    /// Train (or continue training) the conditional denoiser.
    TrainDiffusion,
    /// Inpaint synthetic lesions into every lesion image.
    Synth,
    /// Image quality metrics of the synthetic set.
    Metrics,
    /// Cross-validated classification with and without synthetic data.
    EvalCls,
    /// Detection with and without synthetic data.
    EvalDet,
    /// All stages in order.
    Pipeline,
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    let config = config.resolve()?;
    let workers = resolve_workers(config.workers);
    let run = Run::new(config, &cli.out, workers);
    run.write_echo()?;
    match cli.command {
        Command::Generate => run.generate(),
        Command::Segment => run.segment().map(drop),
        Command::TrainDiffusion => run.train_diffusion().map(drop),
        Command::Synth => run.synth().map(drop),
        Command::Metrics => run.metrics().map(drop),
        Command::EvalCls => run.eval_cls().map(drop),
        Command::EvalDet => run.eval_det().map(drop),
        Command::Pipeline => run.pipeline(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LESIONFORGE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
