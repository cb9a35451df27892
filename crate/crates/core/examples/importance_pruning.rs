//! Trains DR-MGF on a multi-task benchmark, then prunes each task's dominant
//! shared filters and reports how every task's accuracy drops, alongside
//! the cosine similarity of the learned importances.
//!
//! Usage: cargo run --release --example importance_pruning [epochs]

use anyhow::Result;
use drmgf::bench::config::RunConfig;
use drmgf::bench::runner::{execute, load_data};
use drmgf::diagnostics::{dominant_filters, learned_profile, prune_and_measure, similarity_matrix};
use drmgf::metagf::Method;
use drmgf::LabelMode;

fn row(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:>8.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(10);
    let mut cfg = RunConfig::from_toml_str(include_str!("../configs/benchmark.toml"))?;
    cfg.method = Method::DrMgf;
    cfg.train.epochs = epochs;
    cfg.dataset.mode = LabelMode::MultiTask;
    cfg.dataset.tasks = 3;
    cfg.dataset.noise = 1.0;
    cfg.diagnostics.conflict = false;

    let (_, trainer) = execute(&cfg, |_, m| {
        println!(
            "epoch {:>2}  test accuracy {}",
            m.epoch,
            row(&m.test_accuracy)
        );
        Ok(())
    })?;
    let (_, test) = load_data(&cfg)?;
    let profile = learned_profile(&trainer.model, &trainer.importances);
    let deg = prune_and_measure(
        &trainer.model,
        Some((&trainer.importances, cfg.importance.eps)),
        &profile,
        &test,
    )?;
    println!("\nrelative accuracy drop (row: pruned task, column: measured task)");
    for (p, r) in deg.rows.iter().enumerate() {
        println!(
            "  task {p} ({:>3} filters) {}",
            dominant_filters(&profile, p).len(),
            row(r)
        );
    }
    println!("diagonal rows: {}/{}", deg.diagonal_rows(), deg.rows.len());
    println!("\nimportance similarity");
    for r in similarity_matrix(&trainer.model, &trainer.importances)? {
        println!("  {}", row(&r));
    }
    Ok(())
}
