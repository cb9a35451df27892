//! Samples gradient conflict and measured convergence gain at every step of
//! joint SGD on the multi-exit benchmark, then correlates the two.
//!
//! Usage: cargo run --release --example conflict_correlation [epochs]

use anyhow::Result;
use drmgf::bench::config::RunConfig;
use drmgf::bench::runner::execute;
use drmgf::diagnostics::pearson;
use drmgf::metagf::Method;

fn main() -> Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(10);
    let mut cfg = RunConfig::from_toml_str(include_str!("../configs/benchmark.toml"))?;
    cfg.method = Method::SgdJoint;
    cfg.train.epochs = epochs;
    cfg.diagnostics.gain_every = 1;
    cfg.diagnostics.conflict = false;

    let (rec, _) = execute(&cfg, |_, m| {
        println!(
            "epoch {:>2}  mean train accuracy {:.3}",
            m.epoch,
            m.mean_train_accuracy()
        );
        Ok(())
    })?;
    let samples = &rec.metrics.gain_samples;
    let c: Vec<f64> = samples.iter().map(|s| s.conflict).collect();
    let g: Vec<f64> = samples.iter().map(|s| s.gain).collect();
    println!(
        "{} samples ({} dropped), pearson(conflict, gain) = {:.4}",
        samples.len(),
        rec.metrics.gain_dropped,
        pearson(&c, &g)?
    );
    Ok(())
}
