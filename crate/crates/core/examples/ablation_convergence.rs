//! Ablation on the multi-exit benchmark: epochs to a training-accuracy
//! threshold for each fusion variant against joint SGD, plus the conflict,
//! pruning and similarity measurements of the same runs.
//!
//! Usage: cargo run --release --example ablation_convergence [threshold] [seeds]

use anyhow::Result;
use drmgf::bench::config::RunConfig;
use drmgf::bench::record::RunRecord;
use drmgf::bench::runner::execute;
use drmgf::metagf::Method;

const METHODS: [Method; 4] = [
    Method::DrMgf,
    Method::MetaGfOnly,
    Method::DrAvgf,
    Method::SgdJoint,
];

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let threshold: f64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0.7);
    let seeds: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(3);
    let base = RunConfig::from_toml_str(include_str!("../configs/benchmark.toml"))?;

    let mut runs: Vec<Vec<RunRecord>> = Vec::new();
    for m in METHODS {
        let mut per_seed = Vec::new();
        for seed in 0..seeds {
            let cfg = RunConfig {
                method: m,
                seed,
                ..base.clone()
            };
            let (rec, _) = execute(&cfg, |_, _| Ok(()))?;
            per_seed.push(rec);
        }
        let hits: Vec<usize> = per_seed
            .iter()
            .map(|r| {
                r.metrics
                    .epochs_to_threshold(threshold)
                    .unwrap_or(base.train.epochs + 1)
            })
            .collect();
        let mean = hits.iter().sum::<usize>() as f64 / hits.len() as f64;
        println!(
            "{:>13}  epochs to {threshold}: {hits:?}  mean {mean:.2}",
            m.name()
        );
        runs.push(per_seed);
    }

    let epochs = base.train.epochs;
    let avg_conflict = |rs: &[RunRecord], e: usize| {
        rs.iter()
            .map(|r| r.metrics.epochs[e].conflict.unwrap_or(f64::NAN))
            .sum::<f64>()
            / rs.len() as f64
    };
    println!("\nepoch  conflict dr-mgf  conflict sgd-joint   (seed means)");
    for e in epochs / 2..epochs {
        println!(
            "{:>5}  {:>15.5}  {:>18.5}",
            e + 1,
            avg_conflict(&runs[0], e),
            avg_conflict(&runs[3], e)
        );
    }

    println!("\ndr-mgf pruning and similarity per seed:");
    for r in &runs[0] {
        let m = &r.metrics;
        let sim = m
            .similarity
            .as_ref()
            .expect("fusion runs carry similarities");
        let k = m.tasks;
        let adjacent = (0..k - 1).map(|a| sim[a][a + 1]).sum::<f64>() / (k - 1) as f64;
        println!(
            "  seed {}: diagonal rows {}/{k}, adjacent similarity {adjacent:.5} vs first-last {:.5}",
            r.config.seed,
            m.degradation.diagonal_rows(),
            sim[0][k - 1]
        );
    }
    Ok(())
}
