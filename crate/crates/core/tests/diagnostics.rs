mod common;

use drmgf::diagnostics::{
    conflict_value, convergence_gain, default_pairs, dominant_filters, mean_conflict,
    prune_and_measure, ImportanceProfile, Provenance,
};
use drmgf::model::{DenseLayer, Inference, NetSpec};
use drmgf::{Dataset, LabelMode, MultiOutputModel, Topology};
use numcore::{Rng, Tensor};
use proptest::prelude::*;

/// Two tasks reading the signs of `x0` and `x1` through four rectifiers:
/// units 0/1 see `±x0`, units 2/3 see `±x1`; each head compares its pair.
fn sign_readers() -> (MultiOutputModel, Dataset) {
    let topo = Topology::Network(NetSpec::multi_task(2, 4, 1, &[2, 2], 1));
    let mut m = MultiOutputModel::init(topo, &mut Rng::new(0)).unwrap();
    m.trunk[0] = DenseLayer {
        weight: Tensor::new(
            vec![4, 2, 1, 1],
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
        )
        .unwrap(),
        bias: Some(Tensor::zeros(&[4])),
    };
    let head = |a: usize| DenseLayer {
        weight: Tensor::new(
            vec![2, 4, 1, 1],
            (0..8)
                .map(|i| if i == a + 1 || i == 4 + a { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap(),
        bias: Some(Tensor::zeros(&[2])),
    };
    m.heads[0][0] = head(0);
    m.heads[1][0] = head(2);
    let mut rng = Rng::new(9);
    let n = 400;
    let x: Vec<f64> = (0..2 * n).map(|_| rng.normal()).collect();
    let labels = (0..2)
        .map(|c| (0..n).map(|i| usize::from(x[2 * i + c] > 0.0)).collect())
        .collect();
    let data = Dataset::new(
        Tensor::new(vec![n, 2], x).unwrap(),
        labels,
        vec![2, 2],
        LabelMode::MultiTask,
    )
    .unwrap();
    (m, data)
}

#[test]
fn pruning_a_task_exclusive_filters_collapses_only_that_task() {
    let (m, data) = sign_readers();
    // Filters are (unit, input) pairs: task 0 owns 0 and 2, task 1 owns 5 and 7.
    let mut rows = vec![vec![0.0; 8]; 2];
    rows[0][0] = 1.0;
    rows[0][2] = 1.0;
    rows[1][5] = 1.0;
    rows[1][7] = 1.0;
    let profile = ImportanceProfile {
        provenance: Provenance::AccumulatedGradient,
        rows,
    };
    assert_eq!(dominant_filters(&profile, 0), vec![0, 2]);
    let deg = prune_and_measure(&m, None, &profile, &data).unwrap();
    assert_eq!(deg.baseline_accuracy, vec![1.0, 1.0]);
    assert_eq!(deg.pruned, vec![2, 2]);
    for p in 0..2 {
        // With both logits at zero the head always answers class 0.
        let zeros = data.labels[p].iter().filter(|&&y| y == 0).count() as f64 / data.rows() as f64;
        assert!((deg.rows[p][p] - (1.0 - zeros)).abs() < 1e-12);
        assert!(
            (0.35..0.65).contains(&deg.rows[p][p]),
            "chance level after pruning"
        );
        assert_eq!(deg.rows[p][1 - p], 0.0);
    }
    assert_eq!(deg.diagonal_rows(), 2);
}

#[test]
fn conflict_gain_on_a_linear_loss() {
    let w = vec![Tensor::new(vec![1, 1, 2], vec![0.3, -0.2]).unwrap()];
    let c = Tensor::new(vec![1, 1, 2], vec![1.5, -0.5]).unwrap();
    let loss = |p: &[Tensor]| -> drmgf::Result<f64> { Ok(p[0].dot(&c)?) };
    let g = vec![c.clone()];
    // Doubling the step doubles the decrease of a linear loss.
    let gain = convergence_gain(loss, &w, &g, &g, 1e-3).unwrap().unwrap();
    assert!((gain - 1.0).abs() < 1e-9);
    let neg = vec![c.scale(-1.0)];
    let gain = convergence_gain(loss, &w, &g, &neg, 1e-3).unwrap().unwrap();
    assert!((gain + 1.0).abs() < 1e-9);
    assert_eq!(conflict_value(&g, &neg).unwrap(), 1.0);
    let zero = vec![Tensor::zeros(&[1, 1, 2])];
    assert!(convergence_gain(loss, &w, &zero, &g, 1e-3)
        .unwrap()
        .is_none());
}

#[test]
fn mean_conflict_pairs_with_the_deepest_exit() {
    let m = common::net(8, 8, 3, 3, 2, 0);
    assert_eq!(default_pairs(&m), vec![(0, 2), (1, 2)]);
    let data = common::clusters(64, 8, 3, 0);
    let batches = data.batches(32, &mut Rng::new(0)).unwrap();
    let c = mean_conflict(&m, Inference::Plain, &batches, &default_pairs(&m)).unwrap();
    assert!(c.is_finite() && c >= 0.0);
}

fn grads(n: usize) -> impl Strategy<Value = Vec<Tensor>> {
    proptest::collection::vec(-3.0f64..3.0, n * 4)
        .prop_map(move |d| vec![Tensor::new(vec![n, 1, 2, 2], d).unwrap()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn conflict_scaling(g1 in grads(3), g2 in grads(3), c in 1e-2f64..1e2) {
        prop_assume!(g1[0].norm() > 1e-3);
        let base = conflict_value(&g1, &g2).unwrap();
        prop_assert!(base >= 0.0);
        let both = conflict_value(&[g1[0].scale(c)], &[g2[0].scale(c)]).unwrap();
        prop_assert!((both - base).abs() <= 1e-12 * base.max(1.0));
        let second = conflict_value(&g1, &[g2[0].scale(c)]).unwrap();
        prop_assert!((second - c * base).abs() <= 1e-12 * (c * base).max(1.0));
        prop_assert_eq!(conflict_value(&g1, &g1).unwrap(), 0.0);
    }
}
