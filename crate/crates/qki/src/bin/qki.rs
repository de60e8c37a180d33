//! Command-line entry point: dataset generation, training, descriptor
//! extraction, evaluation, and the two-mode comparison.
//!
//! Every command is deterministic given the config file and its seeds,
//! including output file bytes. Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numeric error.

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use qki::config::ExperimentConfig;
use qki::encoder::EncoderRole;
use qki::pipeline::{
    cmd_compare, cmd_embed, cmd_evaluate, cmd_gen_data, cmd_train, TrainMode, TrainReport,
};
use qki::{QkiError, Result};

#[derive(Parser)]
#[command(name = "qki", version, about = "Deterministic alternating-phase descriptor training")]
struct Cli {
    /// Cap the worker-thread fan-out. Results never depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replace every configured seed with values derived from this one.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed_override {
            cfg.override_seeds(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate training keys, the held-out split, and manifests.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train encoders; resumes a partial alternation run automatically.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory for logs, stores, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// "qk" (alternating phases) or "simclr" (in-batch baseline).
        #[arg(long, default_value = "qk")]
        mode: String,
        /// Dataset directory (default: the config's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Embed a dataset file with a checkpointed encoder.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// "query" or "key"; must match the checkpoint's role.
        #[arg(long)]
        role: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank two descriptor files and report retrieval metrics.
    Evaluate {
        /// Query descriptor file (QKDV).
        #[arg(long)]
        queries: PathBuf,
        /// Key descriptor file (QKDV).
        #[arg(long)]
        keys: PathBuf,
        /// CSV of positive pairs with a "query_id,key_id" header.
        #[arg(long)]
        ground_truth: PathBuf,
        /// Optional metrics JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both modes from identical seeds and emit a side-by-side table.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_role(s: &str) -> Result<EncoderRole> {
    match s {
        "query" => Ok(EncoderRole::Query),
        "key" => Ok(EncoderRole::Key),
        other => Err(QkiError::Config(format!(
            "role must be \"query\" or \"key\", got \"{other}\""
        ))),
    }
}

fn print_report(report: &TrainReport) {
    println!(
        "baseline            muAP {:.4}  macro-AP {:.4}",
        report.baseline.mu_ap, report.baseline.macro_ap
    );
    for p in &report.phases {
        let note = if p.stopped_early { " (saturated)" } else { "" };
        println!(
            "{:<4} {:>6} steps   muAP {:.4}  macro-AP {:.4}{note}",
            p.label, p.steps, p.metrics.mu_ap, p.metrics.macro_ap
        );
    }
    println!(
        "final ({:>6} steps) muAP {:.4}  macro-AP {:.4}",
        report.total_steps, report.final_metrics.mu_ap, report.final_metrics.macro_ap
    );
}

fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(QkiError::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| QkiError::Config(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let out_dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let manifest = cmd_gen_data(&cfg, &out_dir)?;
            println!(
                "wrote {} keys and {} eval queries (+{} distractors) to {}",
                manifest.n_keys,
                manifest.n_eval_queries,
                manifest.n_distractors,
                out_dir.display()
            );
        }
        Command::Train { cfg, out, mode, data } => {
            let cfg = cfg.load()?;
            let mode = TrainMode::parse(&mode)?;
            let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let report = cmd_train(&cfg, &data_dir, &out, mode)?;
            println!("mode: {}", report.mode);
            print_report(&report);
        }
        Command::Embed {
            checkpoint,
            dataset,
            role,
            out,
        } => {
            let role = parse_role(&role)?;
            let (rows, dim) = cmd_embed(&checkpoint, &dataset, role, &out)?;
            println!("embedded {rows} rows ({dim}-dim) into {}", out.display());
        }
        Command::Evaluate {
            queries,
            keys,
            ground_truth,
            out,
        } => {
            let metrics = cmd_evaluate(&queries, &keys, &ground_truth, out.as_deref())?;
            println!(
                "muAP {:.6}  macro-AP {:.6}  ({} pairs, {} positives)",
                metrics.mu_ap, metrics.macro_ap, metrics.n_pairs, metrics.n_positives
            );
        }
        Command::Compare { cfg, out, data } => {
            let cfg = cfg.load()?;
            let data_dir = data.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let report = cmd_compare(&cfg, &data_dir, &out)?;
            println!("mode     steps   final muAP   final macro-AP");
            for (name, r) in [("qk", &report.qk), ("simclr", &report.simclr)] {
                println!(
                    "{name:<8} {:<7} {:<12.4} {:.4}",
                    r.total_steps, r.final_metrics.mu_ap, r.final_metrics.macro_ap
                );
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code());
    }
}
