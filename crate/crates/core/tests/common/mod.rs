#![allow(dead_code)]

use drmgf::bench::datasets::{gen_synthetic, DatasetKind, DatasetSpec};
use drmgf::model::NetSpec;
use drmgf::{Batch, Dataset, LabelMode, MultiOutputModel, Topology};
use numcore::Rng;

/// Small synthetic multi-exit data with `dim` features and `classes` classes.
pub fn clusters(size: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec {
        kind: DatasetKind::SyntheticClusters,
        size,
        dim,
        classes,
        mode: LabelMode::MultiExit,
        splits: vec![1.0],
        ..DatasetSpec::default()
    };
    gen_synthetic(&spec, seed).unwrap()
}

pub fn batch(size: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    clusters(size, dim, classes, seed).full_batch().unwrap()
}

/// Multi-exit network on `dim` inputs with `exits` exits of width `width`.
pub fn net(
    dim: usize,
    width: usize,
    exits: usize,
    classes: usize,
    s: usize,
    seed: u64,
) -> MultiOutputModel {
    let topo = Topology::Network(NetSpec::multi_exit(dim, width, exits, classes, s));
    MultiOutputModel::init(topo, &mut Rng::new(seed)).unwrap()
}
