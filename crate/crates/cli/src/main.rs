//! `hdrvid` — train, run, and score the alternating-exposure HDR video
//! reconstruction stack.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdrvid_core::config::RunConfig;
use hdrvid_core::runner;

#[derive(Parser)]
#[command(
    name = "hdrvid",
    version,
    about = "HDR video reconstruction from alternating-exposure LDR sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reconstruction model, resuming when the output directory
    /// already holds a checkpoint.
    Train(TrainArgs),
    /// Reconstruct HDR frames for every sequence in a manifest.
    Infer(InferArgs),
    /// Score predicted HDR frames against ground truth.
    Eval(EvalArgs),
    /// Render the temporal flicker profile of one scanline as an image.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set train.lr=3e-4
    /// (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> hdrvid_core::Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.set),
            None => RunConfig::parse_with_overrides("", &self.set),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to reconstruct with.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest of input sequences (ground-truth entries are ignored).
    #[arg(long)]
    seq: PathBuf,
    /// Output directory; frames land in {out}/{sequence id}/.
    #[arg(long)]
    out: PathBuf,
    /// Square tile size for bounded-memory reconstruction (multiple of 4);
    /// tile overlaps are blended linearly.
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted HDR frames (.exr/.hdr, paired with the
    /// ground-truth directory in sorted order).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth HDR frames.
    #[arg(long)]
    gt: PathBuf,
    /// Also write the JSON metric report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Compression strength for tonemapped metrics.
    #[arg(long, default_value_t = 5000.0)]
    mu: f64,
}

#[derive(Args)]
struct ProfileArgs {
    /// Directory holding the HDR frames of one video, ordered by file name.
    #[arg(long)]
    frames: PathBuf,
    /// Scanline to trace through time.
    #[arg(long)]
    row: usize,
    /// Output PNG: one row per frame, frame width across.
    #[arg(long)]
    out: PathBuf,
    /// Compression strength for the tonemapped profile.
    #[arg(long, default_value_t = 5000.0)]
    mu: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_category() as u8)
        }
    }
}

fn run(cli: Cli) -> hdrvid_core::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.config.load()?;
            let out = runner::train(&cfg)?;
            match out.final_loss {
                Some(loss) => log::info!(
                    "reached step {} (last batch loss {loss:.6})",
                    out.steps_run
                ),
                None => log::info!("no steps to run; wrote the initial checkpoint"),
            }
            println!("{}", out.latest_checkpoint.display());
        }
        Command::Infer(a) => {
            let cfg = a.config.load()?;
            let written = runner::infer(&cfg, &a.ckpt, &a.seq, &a.out, a.tile)?;
            log::info!("wrote {} frames under {}", written.len(), a.out.display());
            for p in &written {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            let report = runner::eval(&a.pred, &a.gt, a.mu, a.out.as_deref())?;
            let text = serde_json::to_string_pretty(&report).expect("report serialises");
            println!("{text}");
        }
        Command::Profile(a) => {
            runner::profile(&a.frames, a.row, a.mu, &a.out)?;
            println!("{}", a.out.display());
        }
    }
    Ok(())
}
