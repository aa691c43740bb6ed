use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use starbeam_core::harness::{
    compare, evaluate, load_checkpoint, run_scheme, sweep_elements, write_eval_csv,
    ExperimentConfig, RunRecord, Scheme,
};

#[derive(Parser)]
#[command(
    name = "starbeam",
    version,
    about = "Train and evaluate joint panel deployment + beamforming policies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured scheme, one run per seed.
    Train(TrainArgs),
    /// Train all four schemes over the same seeds (paired comparison).
    Compare(CommonArgs),
    /// One full training per panel size per seed; reports the size trend.
    Sweep(SweepArgs),
    /// Roll out a checkpoint with mean actions; writes per-user rate traces.
    Evaluate(EvalArgs),
    /// Write the default experiment config to a file for editing.
    InitConfig {
        #[arg(long, default_value = "experiment.toml")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (TOML); defaults to the built-in reduced profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// deployment | fixed-position | fixed-pose | no-ris
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Train this single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Panel sizes, e.g. --elements 9,16,25 (perfect squares).
    #[arg(long, value_delimiter = ',')]
    elements: Vec<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the rate traces.
    #[arg(long, default_value = "eval_rates.csv")]
    out: PathBuf,
}

fn load_config(common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::reduced_profile(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_runs(records: &[RunRecord]) {
    for r in records {
        println!(
            "{} seed {}: final mean episode sum-rate {:.4e} bits/s  ({})",
            r.scheme,
            r.seed,
            r.final_mean_reward,
            r.run_dir.display()
        );
    }
}

fn print_scheme_means(records: &[RunRecord]) {
    let mut by_scheme: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_scheme
            .entry(r.scheme.slug())
            .or_default()
            .push(r.final_mean_reward);
    }
    println!("\nseed-mean final episode sum-rate:");
    for scheme in Scheme::ALL {
        if let Some(vals) = by_scheme.get(scheme.slug()) {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            println!("  {:<12} {:.4e} bits/s over {} seeds", scheme, mean, vals.len());
        }
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(args) => {
            let mut cfg = load_config(&args.common)?;
            if let Some(scheme) = args.scheme {
                cfg.scheme = scheme;
            }
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            let start = Instant::now();
            let records = run_scheme(&cfg)?;
            print_runs(&records);
            eprintln!("trained {} run(s) in {:.1}s", records.len(), start.elapsed().as_secs_f64());
        }
        Cmd::Compare(common) => {
            let cfg = load_config(&common)?;
            let start = Instant::now();
            let records = compare(&cfg)?;
            print_runs(&records);
            print_scheme_means(&records);
            eprintln!(
                "trained {} run(s) in {:.1}s",
                records.len(),
                start.elapsed().as_secs_f64()
            );
        }
        Cmd::Sweep(args) => {
            let cfg = load_config(&args.common)?;
            let ns = if args.elements.is_empty() {
                cfg.element_sweep.clone()
            } else {
                args.elements
            };
            let start = Instant::now();
            let rows = sweep_elements(&cfg, &ns)?;
            let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for row in &rows {
                by_n.entry(row.n_elements).or_default().push(row.final_mean_reward);
                println!(
                    "N={} seed {}: final mean episode sum-rate {:.4e} bits/s",
                    row.n_elements, row.seed, row.final_mean_reward
                );
            }
            println!("\nseed-mean final episode sum-rate by panel size:");
            for (n, vals) in &by_n {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                println!("  N={:<3} {:.4e} bits/s over {} seeds", n, mean, vals.len());
            }
            eprintln!("trained {} run(s) in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
        }
        Cmd::Evaluate(args) => {
            let ckpt = load_checkpoint(&args.checkpoint)
                .with_context(|| format!("loading {}", args.checkpoint.display()))?;
            let steps = evaluate(&ckpt, args.episodes, args.seed)?;
            write_eval_csv(&args.out, &steps)?;
            let mean: f64 = steps.iter().map(|s| s.reward).sum::<f64>() / steps.len() as f64;
            println!(
                "{} episodes of {} ({} seed {}): mean slot sum-rate {:.4e} bits/s -> {}",
                args.episodes,
                ckpt.env.t,
                ckpt.scheme,
                ckpt.seed,
                mean,
                args.out.display()
            );
        }
        Cmd::InitConfig { out } => {
            let cfg = ExperimentConfig::reduced_profile();
            cfg.save(&out)?;
            println!("wrote default experiment config to {}", out.display());
        }
    }
    Ok(())
}
