mod common;

use drmgf::model::{
    bake_route, forward_task, identity_reconstruction, plain_forward, read_checkpoint,
    rescale_filters, write_checkpoint, DEFAULT_EPS,
};
use drmgf::{ImportanceInit, ImportanceSet};
use numcore::{Rng, Tensor};
use proptest::prelude::*;

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
}

#[test]
fn identity_reconstruction_matches_plain_forward() {
    let m = common::net(8, 8, 3, 4, 2, 1);
    let b = common::batch(10, 8, 4, 1);
    let imps = ImportanceSet::init(
        &m,
        ImportanceInit::Reconstruct,
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    for k in 0..3 {
        let routed = forward_task(&m, &imps, k, &b, DEFAULT_EPS).unwrap();
        let plain = plain_forward(&m, k, &b).unwrap();
        assert!(rel(&routed, &plain) < 1e-12, "task {k}");
    }
}

#[test]
fn zero_importance_row_silences_its_channel() {
    let m = common::net(4, 3, 2, 2, 1, 2);
    let b = common::batch(5, 4, 2, 2);
    let mut imps = ImportanceSet::init(
        &m,
        ImportanceInit::Constant(1.0),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    // With row 0 of exit 1's layer-0 field at zero, the raw weights of
    // output channel 0 no longer matter.
    imps.get_mut(1, 0).unwrap().data_mut()[..4].fill(0.0);
    let before = forward_task(&m, &imps, 1, &b, DEFAULT_EPS).unwrap();
    let mut cut = m.clone();
    cut.trunk[0].weight.data_mut()[..4].fill(1.0);
    let after = forward_task(&cut, &imps, 1, &b, DEFAULT_EPS).unwrap();
    assert_eq!(before, after, "a zero row hides the filter entirely");
}

#[test]
fn baked_route_equals_routed_forward() {
    let m = common::net(8, 4, 3, 3, 2, 3);
    let b = common::batch(6, 8, 3, 3);
    let imps = ImportanceSet::init(
        &m,
        ImportanceInit::KaimingAbs,
        DEFAULT_EPS,
        &mut Rng::new(5),
    )
    .unwrap();
    for k in 0..3 {
        let baked = bake_route(&m, &imps, k, DEFAULT_EPS).unwrap();
        let a = plain_forward(&baked, k, &b).unwrap();
        let r = forward_task(&m, &imps, k, &b, DEFAULT_EPS).unwrap();
        assert!(rel(&a, &r) < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = common::net(8, 4, 3, 3, 2, 4);
    let imps = ImportanceSet::init(
        &m,
        ImportanceInit::KaimingAbs,
        DEFAULT_EPS,
        &mut Rng::new(1),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &m, Some(&imps)).unwrap();
    let (m2, i2) = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(m2, m);
    assert_eq!(i2, Some(imps));

    let mut plain = Vec::new();
    write_checkpoint(&mut plain, &m, None).unwrap();
    assert_eq!(read_checkpoint(&mut plain.as_slice()).unwrap().1, None);
    assert!(read_checkpoint(&mut &plain[..plain.len() / 2]).is_err());
    assert!(read_checkpoint(&mut &b"not a checkpoint"[..]).is_err());
}

#[test]
fn reconstruction_is_nonnegative() {
    let w = Tensor::new(vec![2, 2, 1, 1], vec![-3.0, 4.0, 0.0, 0.0]).unwrap();
    let nu = identity_reconstruction(&w, DEFAULT_EPS).unwrap();
    assert!(nu.data().iter().all(|&v| v >= 0.0));
    assert_eq!(&nu.data()[2..], &[0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn routed_forward_ignores_filter_scale(seed in 0u64..1000, factors in proptest::collection::vec(0.01f64..100.0, 8 * 2)) {
        let m = common::net(8, 8, 2, 3, 2, seed);
        let b = common::batch(6, 8, 3, seed);
        let imps = ImportanceSet::init(&m, ImportanceInit::KaimingAbs, DEFAULT_EPS, &mut Rng::new(seed)).unwrap();
        let mut scaled = m.clone();
        // Layer 0 is shared by both exits: 8 filters over 2 input channels.
        let f = Tensor::new(vec![8, 2], factors).unwrap();
        scaled.trunk[0].weight = rescale_filters(&m.trunk[0].weight, &f).unwrap();
        for k in 0..2 {
            let a = forward_task(&m, &imps, k, &b, DEFAULT_EPS).unwrap();
            let c = forward_task(&scaled, &imps, k, &b, DEFAULT_EPS).unwrap();
            prop_assert!(rel(&c, &a) <= 1e-12);
        }
    }

    #[test]
    fn lateral_normalize_keeps_row_order(row in proptest::collection::vec(0.0f64..5.0, 6)) {
        let nu = Tensor::new(vec![1, 6], row.clone()).unwrap();
        let hat = drmgf::model::lateral_normalize(&nu, DEFAULT_EPS).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if row[i] > row[j] {
                    prop_assert!(hat.data()[i] > hat.data()[j]);
                }
            }
            prop_assert_eq!(row[i] == 0.0, hat.data()[i] == 0.0);
        }
    }
}
