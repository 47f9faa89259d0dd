use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cor_cli::{cmd_ablate, cmd_complexity, cmd_eval, cmd_run, cmd_synth, cmd_train_dd, RunConfig};
use cor_core::chain::DiscriminatorSource;
use cor_core::restorers::RestorerMode;
use cor_core::DegradationLabel;

#[derive(Parser)]
#[command(name = "cor", version, about = "Chain-of-restoration experiments on synthetic composite degradations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset manifest with synthesis records (needed by oracle components).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated category list, e.g. "h+n1,r".
    #[arg(long, global = true)]
    categories: Option<String>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    dd: Option<DdSource>,
    /// Trained discriminator model.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Oracle,
    Classical,
}

#[derive(Clone, Copy, ValueEnum)]
enum DdSource {
    Trained,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Train the degradation discriminator.
    TrainDd,
    /// Restore a PNG or a directory of PNGs.
    Run {
        input: PathBuf,
        /// Also write every intermediate image.
        #[arg(long)]
        dump_steps: bool,
    },
    /// Score input, best single pass and the loop per category.
    Eval {
        /// Dataset root; defaults to the configured dataset path.
        dataset: Option<PathBuf>,
    },
    /// Discriminator-margin and basis-set ablations.
    Ablate,
    /// Exact training and inference cost ratios.
    Complexity {
        #[arg(long, default_value_t = 20)]
        n: u32,
    },
}

fn effective_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &common.manifest {
        cfg.dataset.manifest = Some(m.clone());
    }
    if let Some(list) = &common.categories {
        let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if names.is_empty() {
            bail!("--categories is empty");
        }
        cfg.eval.categories = names.clone();
        cfg.dataset.categories = names
            .iter()
            .filter(|n| n.as_str() != "clean")
            .map(|n| n.parse::<DegradationLabel>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(mode) = common.mode {
        cfg.registry.mode = match mode {
            Mode::Oracle => RestorerMode::Oracle,
            Mode::Classical => RestorerMode::Classical,
        };
    }
    if let Some(dd) = common.dd {
        cfg.cor.discriminator = match dd {
            DdSource::Trained => DiscriminatorSource::Trained,
            DdSource::Oracle => DiscriminatorSource::Oracle,
        };
    }
    if let Some(m) = &common.model {
        cfg.discriminator.model = Some(m.clone());
    }
    Ok(cfg)
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        v.to_string()
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = effective_config(&cli.common)?;
    let out: &Path = &cli.common.out;
    match cli.command {
        Command::Synth => {
            let manifest = cmd_synth(&cfg, out)?;
            println!("wrote {} degraded images to {}", manifest.entries.len(), out.display());
        }
        Command::TrainDd => {
            let s = cmd_train_dd(&cfg, out)?;
            println!("classes: {}", s.classes.join(", "));
            println!("train accuracy {:.4} on {} patches", s.train_accuracy, s.train_samples);
            println!("held-out accuracy {:.4} on {} patches", s.holdout_accuracy, s.holdout_samples);
            println!("model: {}", s.model.display());
        }
        Command::Run { input, dump_steps } => {
            for r in cmd_run(&cfg, &input, out, dump_steps)? {
                let psnr = r.psnr.map(|p| format!("  psnr {}", fmt_db(p))).unwrap_or_default();
                println!(
                    "{} -> {}  steps {} [{}] {:?}{psnr}",
                    r.input.display(),
                    r.output.display(),
                    r.restorations,
                    r.choices.join(" > "),
                    r.termination,
                );
            }
        }
        Command::Eval { dataset } => {
            let dataset = dataset.unwrap_or_else(|| cfg.dataset.path.clone());
            println!("{:<10} {:>8} {:>7} {:>8} {:>8} {:>7} {:>6}", "category", "psnr_in", "ssim_in", "single", "cor", "ssim", "steps");
            for r in cmd_eval(&cfg, &dataset, out)? {
                println!(
                    "{:<10} {:>8} {:>7.4} {:>8} {:>8} {:>7.4} {:>6.2}",
                    r.category,
                    fmt_db(r.psnr_input),
                    r.ssim_input,
                    fmt_db(r.psnr_single_pass),
                    fmt_db(r.psnr_cor),
                    r.ssim_cor,
                    r.mean_steps
                );
            }
        }
        Command::Ablate => {
            for r in cmd_ablate(&cfg, out)? {
                println!(
                    "{:<8} {} {:<16} {:>7} dB  ssim {:.4}  steps {:.2}  [{}]",
                    r.table,
                    r.setting,
                    r.description,
                    fmt_db(r.psnr),
                    r.ssim,
                    r.mean_steps,
                    r.bases
                );
            }
        }
        Command::Complexity { n } => {
            let rows = cmd_complexity(n, out)?;
            println!("wrote {} rows to {}", rows.len(), out.join("curves.csv").display());
        }
    }
    Ok(())
}
