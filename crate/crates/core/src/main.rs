use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use gat_mamba::config::ConfigFile;
use gat_mamba::graph_build::DEFAULT_K;
use gat_mamba::model::Ablation;
use gat_mamba::pipeline;
use gat_mamba::synthetic::SyntheticConfig;
use gat_mamba::Result;

#[derive(Parser)]
#[command(
    name = "gat-mamba",
    version,
    about = "Graph attention + selective state-space survival models on tile graphs"
)]
struct Cli {
    /// Config file with `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SamplingArgs {
    /// full, random_pct, aggressive_only or least_aggressive_only
    #[arg(long)]
    sampling: Option<String>,
    /// Percentage kept by random_pct.
    #[arg(long)]
    pct: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known risk.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Build a tile graph from a nodes CSV.
    BuildGraph {
        #[arg(long)]
        nodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Cross-validated training; writes a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
        #[arg(long)]
        folds: Option<usize>,
        /// full, gat, mamba, no-edge or no-pe
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Also fit the linear Cox baseline.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Re-evaluate the checkpoints of a run directory.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a copy of a dataset with a tile sampling strategy applied.
    SampleTiles {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Median-risk stratification with KM curves and a log-rank test.
    Stratify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ConfigFile> {
    let mut cfg = match path {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(s) = seed {
        cfg.set("seed", s);
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut ConfigFile, s: &SamplingArgs) {
    if let Some(v) = &s.sampling {
        cfg.set("sampling", v);
    }
    if let Some(p) = s.pct {
        cfg.set("pct", p);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::GenSynthetic { out, patients } => {
            if let Some(n) = patients {
                cfg.set("n_patients", n);
            }
            let mut syn = SyntheticConfig::default();
            cfg.apply_synthetic(&mut syn)?;
            pipeline::gen_synthetic(&out, &syn)?;
        }
        Command::BuildGraph { nodes, out, k } => {
            let g = pipeline::build_graph(&nodes, &out, k)?;
            info!(
                "graph with {} nodes and {} edges written to {}",
                g.n_nodes(),
                g.n_edges(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            sampling,
            folds,
            ablation,
            baseline,
            lr,
            max_epochs,
        } => {
            apply_sampling(&mut cfg, &sampling);
            if let Some(f) = folds {
                cfg.set("folds", f);
            }
            if let Some(a) = ablation {
                cfg.set("ablation", a);
            }
            if baseline {
                cfg.set("baseline", true);
            }
            if let Some(lr) = lr {
                cfg.set("lr", lr);
            }
            if let Some(m) = max_epochs {
                cfg.set("max_epochs", m);
            }
            let summary = pipeline::train(&data, &out, &cfg)?;
            for m in &summary.metrics {
                println!(
                    "fold {} c_index {:.4} auc_mean {:.4}",
                    m.fold, m.c_index, m.auc_mean
                );
            }
            println!("mean c_index {:.4}", summary.mean_c_index());
            if let Some(b) = summary.mean_baseline_c_index() {
                println!("baseline mean c_index {b:.4}");
            }
        }
        Command::Evaluate { data, run, out } => {
            for m in pipeline::evaluate(&data, &run, &out)? {
                println!(
                    "fold {} c_index {:.4} auc_mean {:.4}",
                    m.fold, m.c_index, m.auc_mean
                );
            }
        }
        Command::SampleTiles {
            data,
            out,
            sampling,
        } => {
            apply_sampling(&mut cfg, &sampling);
            let n = pipeline::sample_tiles_dataset(&data, &out, &cfg)?;
            info!("wrote {n} patients to {}", out.display());
        }
        Command::Stratify { data, run, out } => {
            let s = pipeline::stratify(&data, &run, &out)?;
            println!("low {} high {}", s.n_low, s.n_high);
            if let Some(lr) = s.logrank {
                println!(
                    "log-rank statistic {:.4} p {:.4e}",
                    lr.statistic, lr.p_value
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
