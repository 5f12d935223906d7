use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graftnet::checks;
use graftnet::config::TrainConfig;
use graftnet::data::{self, Dataset, Difficulty};
use graftnet::train;

#[derive(Parser)]
#[command(name = "graftnet", about = "Train and probe a grafted saliency network", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs plus a checkpoint under --out.
    Train {
        /// Training config (key = value lines).
        #[arg(long)]
        config: PathBuf,
        /// Manifest of tab-separated id, image path, mask path lines.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for train.csv, val.csv, and checkpoint/.
        #[arg(long)]
        out: PathBuf,
        /// Validation manifest; without one, every tenth sample is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Let lr_other differ from 10 x lr_backbone_attn.
        #[arg(long)]
        unlink_lr: bool,
    },
    /// Evaluate a checkpoint over a manifest and write per-sample metrics.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV: one row per sample plus an aggregate row.
        #[arg(long)]
        csv: PathBuf,
    },
    /// Run one image through a checkpoint and write the saliency map as PGM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (binary PPM or PGM).
        #[arg(long)]
        image: PathBuf,
        /// Output map, 8-bit PGM at the input's resolution.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reverse-mode gradients against central differences.
    Gradcheck {
        /// Run one named check instead of the whole suite.
        #[arg(long)]
        op: Option<String>,
    },
    /// Generate a synthetic dataset of simple shapes on noisy backgrounds.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square image side in pixels.
        #[arg(long)]
        hw: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory for images/, masks/, and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Foreground mix: blob, thin, or mixed.
        #[arg(long, default_value = "mixed")]
        difficulty: String,
    },
    /// Per-sample edge statistics plus a log10 histogram CSV alongside.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; the histogram lands next to it with a _hist suffix.
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> graftnet::Result<ExitCode> {
    match command {
        Command::Train { config, data, out, val, unlink_lr } => {
            let cfg = TrainConfig::load_with(&config, unlink_lr)?;
            let report = train::train(&cfg, &data, val.as_deref(), &out)?;
            println!("trained {} steps", report.steps);
            if let Some((epoch, mae)) = report.val_maes.last() {
                println!("epoch {epoch} val MAE {mae:.6}");
            }
            println!("checkpoint at {}", report.ckpt_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ckpt, data, csv } => {
            let summary = train::evaluate(&ckpt, &data, &csv)?;
            println!(
                "{} samples: MAE {:.6}, F-max {:.6}, S {:.6}, E {:.6}, BDE {:.6}",
                summary.rows.len(),
                summary.mean_mae,
                summary.dataset_f_max,
                summary.mean_s,
                summary.mean_e,
                summary.mean_bde
            );
            println!("wrote {}", csv.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer { ckpt, image, out } => {
            train::infer(&ckpt, &image, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { op } => {
            let reports = match op {
                Some(name) => vec![checks::run_check(&name)?],
                None => checks::run_all()?,
            };
            let mut all_ok = true;
            for r in &reports {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<16} max rel err {:>12.3e}  (tol {:.0e})  {verdict}",
                    r.name, r.max_rel_err, r.tolerance
                );
                all_ok &= r.passed();
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Synth { n, hw, seed, out, difficulty } => {
            let difficulty = Difficulty::from_tag(&difficulty)?;
            let manifest = data::synth_generate(n, hw, seed, difficulty, &out)?;
            println!("wrote {}", manifest.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Stats { data: manifest, csv } => {
            let ds = Dataset::load(&manifest)?;
            let rows = data::dataset_stats(&ds)?;
            data::write_stats_csv(&rows, &csv)?;
            let hist = hist_path(&csv);
            data::write_histogram_csv(&rows, &hist)?;
            println!("wrote {} and {}", csv.display(), hist.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// stats.csv -> stats_hist.csv (keeping the directory and extension).
fn hist_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("stats");
    let ext = csv.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    csv.with_file_name(format!("{stem}_hist.{ext}"))
}
