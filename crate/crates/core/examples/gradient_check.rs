//! Compares autodiff against central differences on the route loss of every
//! exit of a small randomly initialised network.
//!
//! Usage: cargo run --release --example gradient_check [seed]

use anyhow::Result;
use drmgf::bench::datasets::{gen_synthetic, DatasetKind, DatasetSpec};
use drmgf::diagnostics::route_gradient_check;
use drmgf::model::{NetSpec, DEFAULT_EPS};
use drmgf::{ImportanceInit, ImportanceSet, MultiOutputModel, Topology};
use numcore::Rng;

fn main() -> Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or(0);
    let spec = DatasetSpec {
        kind: DatasetKind::SyntheticClusters,
        size: 12,
        dim: 8,
        classes: 3,
        splits: vec![1.0],
        ..DatasetSpec::default()
    };
    let batch = gen_synthetic(&spec, seed)?.full_batch()?;
    let mut rng = Rng::new(seed);
    let topo = Topology::Network(NetSpec::multi_exit(8, 8, 3, 3, 2));
    let model = MultiOutputModel::init(topo, &mut rng)?;
    let imps = ImportanceSet::init(&model, ImportanceInit::KaimingAbs, DEFAULT_EPS, &mut rng)?;
    for k in 0..model.num_tasks() {
        let err = route_gradient_check(&model, &imps, k, &batch, DEFAULT_EPS, 1e-6)?;
        println!("exit {k}: max relative gradient error {err:.3e}");
    }
    Ok(())
}
