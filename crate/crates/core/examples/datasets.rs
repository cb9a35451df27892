//! Generates a synthetic multi-task dataset, writes it as CSV, reads it
//! back and splits it into train and held-out parts.
//!
//! Usage: cargo run --example datasets [out.csv]

use anyhow::Result;
use drmgf::bench::datasets::{gen_synthetic, load_csv, DatasetSpec};
use drmgf::LabelMode;
use numcore::Rng;

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("drmgf-clusters.csv"));
    let spec = DatasetSpec {
        size: 600,
        dim: 6,
        classes: 4,
        tasks: 2,
        mode: LabelMode::MultiTask,
        ..DatasetSpec::default()
    };
    let data = gen_synthetic(&spec, 7)?;
    drmgf::bench::datasets::save_csv(&path, &data)?;
    let back = load_csv(&path, &spec)?;
    println!(
        "wrote and reloaded {} rows x {} features: {}",
        back.rows(),
        back.dim(),
        path.display()
    );
    println!("bit-identical round trip: {}", back == data);
    for (t, col) in back.labels.iter().enumerate() {
        let mut counts = vec![0; back.classes[t]];
        col.iter().for_each(|&y| counts[y] += 1);
        println!("task {t} class counts {counts:?}");
    }
    let parts = back.split(&[0.8, 0.2], &mut Rng::new(0))?;
    println!(
        "split sizes {:?}",
        parts.iter().map(|d| d.rows()).collect::<Vec<_>>()
    );
    Ok(())
}
