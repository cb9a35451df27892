use drmgf::metagf::{
    apply_fusion, fuse_gradients, fusion_weights, meta_loss, meta_step, FusionKind, MetaForward,
};
use drmgf::model::{QuadraticLandscape, DEFAULT_EPS};
use drmgf::trainers::{average_fuse, TaskGradient};
use drmgf::{Batch, ImportanceInit, ImportanceSet, LabelMode, MultiOutputModel, Topology};
use numcore::{Rng, Tensor};
use proptest::prelude::*;

fn placeholder() -> Batch {
    Batch {
        x: Tensor::zeros(&[1, 1]),
        labels: vec![vec![0]],
        mode: LabelMode::MultiExit,
    }
}

/// Two tasks on one shared scalar whose minimizers sit at 2 and -1.
fn opposed() -> MultiOutputModel {
    let q = QuadraticLandscape {
        design: vec![vec![vec![1.0]], vec![vec![1.0]]],
        head_coef: vec![vec![0.0], vec![0.0]],
        targets: vec![vec![2.0], vec![-1.0]],
        init_shared: vec![0.3],
        init_heads: vec![0.0, 0.0],
    };
    MultiOutputModel::init(Topology::Quadratic(q), &mut Rng::new(0)).unwrap()
}

fn scalar_grad(task: usize, g: f64) -> TaskGradient {
    let t = |v: f64| Tensor::full(&[1, 1, 1, 1], v);
    TaskGradient {
        task,
        trunk: vec![Some(t(g))],
        trunk_bias: vec![None],
        head: vec![(t(0.0), None)],
        nu_star: vec![None],
        w_star: vec![t(0.0)],
        steps: 1,
        mean_loss: 0.0,
    }
}

fn field(v: f64) -> Tensor {
    Tensor::full(&[1, 1], v)
}

#[test]
fn meta_step_descends_to_grid_optimum() {
    let w0 = opposed();
    // Task 0 pulls towards its optimum, task 1 overshoots the other way.
    let grads = [scalar_grad(0, 1.5), scalar_grad(1, -2.0)];
    let batch = placeholder();
    let mut imps = ImportanceSet::init(
        &w0,
        ImportanceInit::Constant(1.0),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();

    let loss_at = |p: f64| {
        let e = 0.3 + p * 1.5 + (1.0 - p) * -2.0;
        0.5 * (e - 2.0).powi(2) + 0.5 * (e + 1.0).powi(2)
    };
    let (p_star, f_star) = (0..=10_000)
        .map(|i| i as f64 / 10_000.0)
        .map(|p| (p, loss_at(p)))
        .fold((0.0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });

    let mut last = meta_loss(&w0, &imps, &grads, &batch, MetaForward::Plain).unwrap();
    assert!((last - loss_at(0.5)).abs() < 1e-12);
    for _ in 0..400 {
        let out = meta_step(&w0, &mut imps, &grads, &batch, MetaForward::Plain, 0.2, 1).unwrap();
        assert!(
            out.loss_after <= last + 1e-15,
            "meta loss rose: {last} -> {}",
            out.loss_after
        );
        assert!(out.loss_before <= last + 1e-15);
        last = out.loss_after;
    }
    let a = imps.get(0, 0).unwrap().item().unwrap();
    let b = imps.get(1, 0).unwrap().item().unwrap();
    let p = a / (a + b);
    assert!((p - p_star).abs() < 1e-3, "share {p} vs grid {p_star}");
    assert!(last - f_star < 1e-6);

    let mut m = w0.clone();
    apply_fusion(&mut m, &imps, &grads, FusionKind::Meta).unwrap();
    let e = m.trunk[0].weight.item().unwrap();
    assert!(
        (e - 0.5).abs() < 1e-2,
        "fused weight {e} should sit between the optima at 0.5"
    );
}

#[test]
fn zero_meta_steps_leave_importances() {
    let w0 = opposed();
    let grads = [scalar_grad(0, 1.0), scalar_grad(1, -1.0)];
    let mut imps = ImportanceSet::init(
        &w0,
        ImportanceInit::Constant(0.7),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let before = imps.clone();
    meta_step(
        &w0,
        &mut imps,
        &grads,
        &placeholder(),
        MetaForward::Plain,
        0.1,
        0,
    )
    .unwrap();
    assert_eq!(imps, before);
}

#[test]
fn non_finite_meta_loss_restores_importances() {
    let w0 = opposed();
    let grads = [scalar_grad(0, f64::NAN), scalar_grad(1, 1.0)];
    let mut imps = ImportanceSet::init(
        &w0,
        ImportanceInit::Constant(0.7),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let before = imps.clone();
    let err = meta_step(
        &w0,
        &mut imps,
        &grads,
        &placeholder(),
        MetaForward::Plain,
        0.1,
        3,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert_eq!(imps, before);
}

#[test]
fn equal_importances_fuse_to_the_mean() {
    let w0 = opposed();
    let grads = [scalar_grad(0, 1.0), scalar_grad(1, -3.0)];
    let imps = ImportanceSet::init(
        &w0,
        ImportanceInit::Constant(0.4),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let (mut a, mut b) = (w0.clone(), w0.clone());
    apply_fusion(&mut a, &imps, &grads, FusionKind::Meta).unwrap();
    apply_fusion(&mut b, &imps, &grads, FusionKind::Average).unwrap();
    assert_eq!(a, b);
}

#[test]
fn all_zero_filter_falls_back_to_mean() {
    let z = field(0.0);
    let (g1, g2) = (
        Tensor::full(&[1, 1, 1, 1], 2.0),
        Tensor::full(&[1, 1, 1, 1], 4.0),
    );
    let (f, fallback) = fuse_gradients(&[&z, &z], &[&g1, &g2]).unwrap();
    assert_eq!((f.data(), fallback), (&[3.0][..], 1));
    assert_eq!(average_fuse(&[g1, g2]).unwrap().data(), &[3.0]);
}

fn bank(filters: usize, s: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-5.0f64..5.0, filters * s * s)
        .prop_map(move |d| Tensor::new(vec![filters, 1, s, s], d).unwrap())
}

fn weights(filters: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(0.01f64..3.0, filters)
        .prop_map(move |d| Tensor::new(vec![filters, 1], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Weights are normalized per filter across tasks, so a positive factor
    /// shared by every task at a filter cancels.
    #[test]
    fn fusion_ignores_common_filter_scale(
        w in proptest::collection::vec(weights(4), 3),
        g in proptest::collection::vec(bank(4, 2), 3),
        c in proptest::collection::vec(1e-3f64..1e3, 4),
    ) {
        let wr: Vec<&Tensor> = w.iter().collect();
        let gr: Vec<&Tensor> = g.iter().collect();
        let (base, _) = fuse_gradients(&wr, &gr).unwrap();
        let c = Tensor::new(vec![4, 1], c).unwrap();
        let scaled: Vec<Tensor> = w.iter().map(|t| t.zip_map(&c, |a, b| a * b).unwrap()).collect();
        let (other, _) = fuse_gradients(&scaled.iter().collect::<Vec<_>>(), &gr).unwrap();
        let gap = base.sub(&other).unwrap().max_abs();
        prop_assert!(gap <= 1e-12 * base.max_abs().max(1.0));
    }

    #[test]
    fn fusion_stays_in_convex_hull(
        w in proptest::collection::vec(weights(5), 3),
        g in proptest::collection::vec(bank(5, 1), 3),
    ) {
        let (f, _) = fuse_gradients(&w.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>()).unwrap();
        for i in 0..5 {
            let vals: Vec<f64> = g.iter().map(|t| t.data()[i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.data()[i] >= lo - 1e-12 && f.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn one_hot_weight_selects_that_gradient(g in proptest::collection::vec(bank(3, 2), 3), j in 0usize..3) {
        let w: Vec<Tensor> = (0..3).map(|k| Tensor::full(&[3, 1], if k == j { 1.7 } else { 0.0 })).collect();
        let (f, fallback) = fuse_gradients(&w.iter().collect::<Vec<_>>(), &g.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(fallback, 0);
        prop_assert!(f.sub(&g[j]).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn fusion_weights_sum_to_one(w in proptest::collection::vec(weights(6), 4)) {
        let nw = fusion_weights(&w.iter().collect::<Vec<_>>()).unwrap();
        for i in 0..6 {
            let s: f64 = nw.iter().map(|t| t.data()[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
