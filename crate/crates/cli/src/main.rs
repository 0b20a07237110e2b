use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use cfl::experiment::{
    cmd_ablate_pearson, cmd_bench_loss, cmd_covdev, cmd_experiment, cmd_gradcheck, ExperimentConfig,
};
use cfl::Error;

#[derive(Parser)]
#[command(name = "cfl", version, about = "Contrastive federated learning over vertically partitioned silos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: prepare silos, pretrain, probe, write reports.
    Experiment(Common),
    /// Same experiment with and without Pearson column reordering.
    AblatePearson(Common),
    /// Time the contrastive loss with dot-product and cosine similarity.
    BenchLoss(Common),
    /// Finite-difference check of every loss gradient.
    Gradcheck(Common),
    /// Zero-fill covariance deviation against the number of silos.
    Covdev(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), (Error, Option<ExperimentConfig>)> {
    let common = match &cli.command {
        Command::Experiment(c)
        | Command::AblatePearson(c)
        | Command::BenchLoss(c)
        | Command::Gradcheck(c)
        | Command::Covdev(c) => c,
    };
    let cfg = load_config(common).map_err(|e| (e, None))?;
    let with_cfg = |e: Error| (e, Some(cfg.clone()));
    match &cli.command {
        Command::Experiment(c) => {
            let s = cmd_experiment(&cfg, &c.out).map_err(with_cfg)?;
            println!(
                "{} {}: mean F1 Base1 {:.4}  CFL {:.4}  Base2 {:.4}  (privacy audit {})",
                s.dataset,
                s.setting.as_str(),
                s.base1_f1,
                s.mean_f1_cfl,
                s.mean_f1_base2,
                if s.privacy_audit_passed { "pass" } else { "FAIL" }
            );
            println!("outputs in {}", c.out.display());
        }
        Command::AblatePearson(c) => {
            let ab = cmd_ablate_pearson(&cfg, &c.out).map_err(with_cfg)?;
            println!("variant,mean_precision,mean_recall,mean_f1");
            for r in &ab.rows {
                println!("{},{:.4},{:.4},{:.4}", r.variant, r.mean_precision, r.mean_recall, r.mean_f1);
            }
        }
        Command::BenchLoss(c) => {
            let rows = cmd_bench_loss(&cfg, &c.out).map_err(with_cfg)?;
            println!("dataset,embed_dim,K,t_dot_s,t_cos_s,ratio");
            for r in rows {
                println!("{},{},{},{:.6},{:.6},{:.3}", r.dataset, r.embed_dim, r.k, r.t_dot_s, r.t_cos_s, r.ratio);
            }
        }
        Command::Gradcheck(_) => {
            let report = cmd_gradcheck(&cfg).map_err(with_cfg)?;
            for t in &report.terms {
                println!("{:<20} max rel err {:.3e}", t.term, t.max_rel_error);
            }
            println!(
                "{}: max relative error {:.3e} (tolerance {:.0e})",
                if report.passed { "PASS" } else { "FAIL" },
                report.max_rel_error,
                report.tolerance
            );
            if !report.passed {
                return Err((Error::Divergence("gradient check failed".into()), None));
            }
        }
        Command::Covdev(c) => {
            let rows = cmd_covdev(&cfg, &c.out).map_err(with_cfg)?;
            println!("silos,mean_deviation,mean_bound,violations");
            for &m in &cfg.covdev.silos {
                let sel: Vec<_> = rows.iter().filter(|r| r.silos == m).collect();
                let n = sel.len().max(1) as f64;
                let dev = sel.iter().map(|r| r.deviation).sum::<f64>() / n;
                let bound = sel.iter().map(|r| r.bound).sum::<f64>() / n;
                let viol = sel.iter().filter(|r| r.deviation > r.bound + 1e-9).count();
                println!("{m},{dev:.6},{bound:.6},{viol}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, cfg)) => {
            error!("{e}");
            if let Some(cfg) = cfg {
                eprintln!("config:\n{}", cfg.to_json());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
