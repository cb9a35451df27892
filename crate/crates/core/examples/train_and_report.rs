//! Persists a short run of every method under one output root, reloads the
//! records from disk and writes the summary tables.
//!
//! Usage: DRMGF_OUTPUT_ROOT=/tmp/runs cargo run --release --example train_and_report

use anyhow::Result;
use drmgf::bench::config::RunConfig;
use drmgf::bench::record::RunRecord;
use drmgf::bench::report::emit_report;
use drmgf::bench::runner::{output_root, run_experiment};
use drmgf::metagf::Method;

fn main() -> Result<()> {
    let mut base = RunConfig::smoke();
    base.train.epochs = 3;
    let mut records = Vec::new();
    for method in Method::ALL {
        let cfg = RunConfig {
            method,
            ..base.clone()
        };
        let (dir, _) = run_experiment(&cfg)?;
        println!("{:>13}  {}", method.name(), dir.display());
        records.push(RunRecord::load(&dir.join("record.json"))?);
    }
    let out = output_root(&base).join("report");
    std::fs::create_dir_all(&out)?;
    for table in emit_report(&records)? {
        table.write(&out)?;
        println!("{:>14}.csv  {} rows", table.name, table.rows.len());
    }
    let dm = std::fs::read_to_string(out.join("delta_m.csv"))?;
    print!("\n{dm}");
    Ok(())
}
