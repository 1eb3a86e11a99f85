//! Command-line driver: runs the whole localization pipeline or a single
//! stage against an output directory, with config-file and flag-level
//! overrides.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use wsol::config::Config;
use wsol::error::Result;
use wsol::pipeline::{read_report, run_stage, Stage};

#[derive(Parser)]
#[command(
    name = "wsol",
    about = "Weakly supervised object localization on synthetic shape data",
    arg_required_else_help = true
)]
struct Cli {
    /// Print every configuration default and exit.
    #[arg(long, exclusive = true)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run all stages in order: gen-data, train-cam, make-pseudo,
    /// train-seg, train-cls, infer, eval.
    Pipeline(RunArgs),
    /// Run one stage; its prerequisites must already exist in the output
    /// directory.
    Stage {
        /// One of: gen-data, train-cam, make-pseudo, train-seg,
        /// train-cls, infer, eval.
        name: String,
        #[command(flatten)]
        args: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of "key = value" lines; flags below override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for data, init, and batching.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Fusion strategy: mul, add, or concat.
    #[arg(long, value_name = "KIND")]
    fusion: Option<String>,

    /// How many of the last backbone stages to fuse (1..=4).
    #[arg(long, value_name = "K")]
    fuse_k: Option<usize>,

    /// Disable the channel attention module.
    #[arg(long)]
    no_mca: bool,

    /// Drop the auxiliary classification loss.
    #[arg(long)]
    no_aux: bool,

    /// Skip Gaussian enhancement of activation maps.
    #[arg(long)]
    no_gauss: bool,

    /// Skip the segmentation stage; boxes come from enhanced activation
    /// maps instead.
    #[arg(long)]
    no_seg: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(fusion) = &self.fusion {
            cfg.set("fusion", fusion)?;
        }
        if let Some(k) = self.fuse_k {
            cfg.set("fuse_k", &k.to_string())?;
        }
        if self.no_mca {
            cfg.set("mca", "false")?;
        }
        if self.no_aux {
            cfg.set("aux", "false")?;
        }
        if self.no_gauss {
            cfg.set("gauss", "false")?;
        }
        if self.no_seg {
            cfg.set("seg", "false")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn timed_stage(stage: Stage, cfg: &Config, out: &PathBuf) -> Result<()> {
    let start = Instant::now();
    run_stage(stage, cfg, out)?;
    println!("[{stage}] done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", Config::default().to_text());
        return Ok(());
    }
    match cli.command.expect("clap requires a subcommand") {
        Command::Pipeline(args) => {
            let cfg = args.resolve()?;
            for stage in Stage::ALL {
                timed_stage(stage, &cfg, &args.out)?;
            }
            let metrics = read_report(&args.out)?;
            println!(
                "top1_loc={:.4} top5_loc={:.4} gt_known_loc={:.4} n_images={}",
                metrics.top1_loc, metrics.top5_loc, metrics.gt_known_loc, metrics.n_images
            );
        }
        Command::Stage { name, args } => {
            let stage: Stage = name.parse()?;
            let cfg = args.resolve()?;
            timed_stage(stage, &cfg, &args.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
