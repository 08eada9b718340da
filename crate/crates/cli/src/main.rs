use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tamba_core::harness::{self, CHECKPOINT_FILE};
use tamba_core::train::RunConfig;
use tamba_core::{Error, Result};

/// Trajectory forecasting with selective state-space blocks.
#[derive(Parser, Debug)]
#[command(name = "tamba", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic train/val scenes to files.
    Generate,
    /// Train and save the best-validation checkpoint.
    Train,
    /// Score a checkpoint on the validation split.
    Evaluate {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score every block kind with and without joint encoding.
    Ablate,
    /// Time SSM against attention blocks over sequence lengths.
    Benchmark,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Generate => {
            harness::export_splits(&cfg, out)?;
            println!("wrote scenes to {}", out.display());
        }
        Command::Train => {
            let r = harness::run_train(&cfg, out)?;
            if let Some(last) = r.epochs.last() {
                println!(
                    "epoch {}: train loss {:.4}, val minADE {:.4}, lr {:e}",
                    last.epoch, last.train_loss, last.val_min_ade, last.lr
                );
            }
        }
        Command::Evaluate { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let report = harness::run_evaluate(&cfg, &ckpt, out)?;
            print!("{}", report.to_json_string());
        }
        Command::Ablate => {
            let (tr, val) = cfg.load_data()?;
            let rows = harness::ablate(&cfg, &tr, &val)?;
            mkdir(out)?;
            let csv = harness::ablation_csv(&rows);
            write(&out.join("ablation.csv"), csv.clone())?;
            print!("{csv}");
        }
        Command::Benchmark => {
            let r = harness::benchmark_scaling(&cfg)?;
            mkdir(out)?;
            write(&out.join("scaling.csv"), r.to_csv())?;
            let summary = serde_json::json!({
                "ssm_slope": r.ssm_slope,
                "attention_slope": r.attention_slope,
            });
            write(&out.join("scaling.json"), format!("{summary:#}\n"))?;
            print!("{}", r.to_csv());
            println!("slopes: ssm {:.3}, attention {:.3}", r.ssm_slope, r.attention_slope);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
