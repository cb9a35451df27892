mod common;

use drmgf::bench::config::RunConfig;
use drmgf::bench::runner::{init_model, load_data};
use drmgf::metagf::{Method, Trainer, TrainerConfig};
use drmgf::model::{lateral_normalize, QuadraticLandscape, DEFAULT_EPS};
use drmgf::trainers::{
    disentangle_epoch, task_gradients, DisentangleConfig, RouteMode, SgdConfig, SgdState,
};
use drmgf::{
    Batch, ImportanceInit, ImportanceSet, LabelMode, MultiOutputModel, ParamRef, Topology,
};
use numcore::{Rng, Tensor};

fn placeholder() -> Batch {
    Batch {
        x: Tensor::zeros(&[1, 1]),
        labels: vec![vec![0]],
        mode: LabelMode::MultiExit,
    }
}

/// One shared scalar weight `e`, two tasks with scalar heads.
fn neuron() -> QuadraticLandscape {
    QuadraticLandscape {
        design: vec![vec![vec![1.0], vec![0.5]], vec![vec![-0.8], vec![1.5]]],
        head_coef: vec![vec![0.3, 1.0], vec![1.0, -0.4]],
        targets: vec![vec![1.0, -2.0], vec![0.5, 0.7]],
        init_shared: vec![0.7],
        init_heads: vec![0.2, -0.3],
    }
}

/// Straight-line replay of the disentanglement update for task 0 on the
/// scalar landscape: route weight `r = ν̂ sign(e)`, loss
/// `α ½‖A0 r + b0 θ0 − c0‖² + β ½‖A1 r + b1 θ1 − c1‖² + λ ν²`, heavy-ball
/// SGD with coupled decay, `ν` clamped at zero.
#[allow(clippy::too_many_arguments)]
fn replay(
    q: &QuadraticLandscape,
    nu0: f64,
    steps: usize,
    lr: f64,
    nu_lr: f64,
    mu: f64,
    wd: f64,
    nu_wd: f64,
    beta: f64,
    lambda: f64,
    eps: f64,
) -> (f64, f64, f64, f64) {
    let (mut e, mut th0, mut th1, mut nu) =
        (q.init_shared[0], q.init_heads[0], q.init_heads[1], nu0);
    let (mut ve, mut v0, mut v1, mut vn) = (0.0, 0.0, 0.0, 0.0);
    let hat = |nu: f64| nu / (eps + 0.1 * nu).sqrt();
    let dhat = |nu: f64| (eps + 0.1 * nu).powf(-0.5) - 0.05 * nu * (eps + 0.1 * nu).powf(-1.5);
    let res = |k: usize, r: f64, th: f64| -> Vec<f64> {
        (0..q.targets[k].len())
            .map(|i| q.design[k][i][0] * r + q.head_coef[k][i] * th - q.targets[k][i])
            .collect()
    };
    for _ in 0..steps {
        let u = e.signum();
        let r = hat(nu) * u;
        let r0 = res(0, r, th0);
        let r1 = res(1, r, th1);
        let dr: f64 = (0..r0.len())
            .map(|i| q.design[0][i][0] * r0[i])
            .sum::<f64>()
            + beta
                * (0..r1.len())
                    .map(|i| q.design[1][i][0] * r1[i])
                    .sum::<f64>();
        let g0: f64 = (0..r0.len()).map(|i| q.head_coef[0][i] * r0[i]).sum();
        let g1: f64 = beta
            * (0..r1.len())
                .map(|i| q.head_coef[1][i] * r1[i])
                .sum::<f64>();
        // d(e/|e|)/de vanishes for a one-element filter.
        let ge = 0.0;
        let gn = dr * u * dhat(nu) + 2.0 * lambda * nu;
        ve = mu * ve + ge + wd * e;
        v0 = mu * v0 + g0 + wd * th0;
        v1 = mu * v1 + g1 + wd * th1;
        vn = mu * vn + gn + nu_wd * nu;
        e -= lr * ve;
        th0 -= lr * v0;
        th1 -= lr * v1;
        nu = (nu - nu_lr * vn).max(0.0);
    }
    let g = hat(nu) * e.signum() - q.init_shared[0];
    (g, th0 - q.init_heads[0], nu, e)
}

#[test]
fn disentangle_matches_scripted_replay() {
    let q = neuron();
    let model = MultiOutputModel::init(Topology::Quadratic(q.clone()), &mut Rng::new(0)).unwrap();
    let imps = ImportanceSet::init(
        &model,
        ImportanceInit::Constant(0.9),
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let cfg = DisentangleConfig::default();
    let (lr, nu_lr) = (0.05, 0.08);
    for steps in [0, 1, 3] {
        let batches = vec![placeholder(); steps];
        let tg = disentangle_epoch(&model, &imps, 0, &batches, &cfg, lr, nu_lr).unwrap();
        let (g, dth, nu, e) = replay(
            &q,
            0.9,
            steps,
            lr,
            nu_lr,
            cfg.weights.momentum,
            cfg.weights.weight_decay,
            cfg.importances.weight_decay,
            cfg.aux.beta,
            cfg.lambda,
            cfg.eps,
        );
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        let got_g = tg.trunk[0].as_ref().unwrap().item().unwrap();
        assert!(close(got_g, g), "steps {steps}: g {got_g} vs {g}");
        assert!(close(tg.head[0].0.item().unwrap(), dth));
        assert!(close(tg.nu_star[0].as_ref().unwrap().item().unwrap(), nu));
        assert!(close(tg.w_star[0].item().unwrap(), e));
        assert_eq!(tg.steps, steps);
    }
}

#[test]
fn zero_steps_from_reconstruction_give_zero_gradient() {
    let model = common::net(8, 8, 3, 3, 2, 0);
    let imps = ImportanceSet::init(
        &model,
        ImportanceInit::Reconstruct,
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let tg = disentangle_epoch(
        &model,
        &imps,
        2,
        &[],
        &DisentangleConfig::default(),
        0.1,
        0.1,
    )
    .unwrap();
    for t in tg.trunk.iter().flatten() {
        assert!(t.max_abs() < 1e-12);
    }
}

#[test]
fn task_gradient_recomputes_from_snapshot() {
    let model = common::net(8, 8, 3, 3, 2, 1);
    let data = common::clusters(64, 8, 3, 1);
    let batches = data.batches(16, &mut Rng::new(1)).unwrap();
    let imps = ImportanceSet::init(
        &model,
        ImportanceInit::KaimingAbs,
        DEFAULT_EPS,
        &mut Rng::new(2),
    )
    .unwrap();
    let tg = disentangle_epoch(
        &model,
        &imps,
        1,
        &batches,
        &DisentangleConfig::default(),
        0.05,
        0.05,
    )
    .unwrap();
    for j in 0..2 {
        let nu = tg.nu_star[j].as_ref().unwrap();
        let hat = lateral_normalize(nu, DEFAULT_EPS).unwrap();
        let unit = numcore::filter_normalize(&tg.w_star[j]).unwrap().weights;
        let route = numcore::filters::scale_filters(&hat, &unit).unwrap();
        let expect = route.sub(&model.trunk[j].weight).unwrap();
        assert!(
            tg.trunk[j]
                .as_ref()
                .unwrap()
                .sub(&expect)
                .unwrap()
                .max_abs()
                < 1e-12
        );
    }
    assert!(tg.trunk[2].is_none(), "exit 1 does not read layer 2");
}

/// Tied routes with no auxiliary term are plain single-task SGD.
#[test]
fn tied_disentangle_is_single_task_sgd() {
    let model = common::net(8, 8, 2, 3, 2, 3);
    let data = common::clusters(96, 8, 3, 3);
    let batches = data.batches(16, &mut Rng::new(3)).unwrap();
    let mut cfg = DisentangleConfig {
        route: RouteMode::Tied,
        lambda: 0.0,
        ..DisentangleConfig::default()
    };
    cfg.aux.beta = 0.0;
    let imps = ImportanceSet::init(
        &model,
        ImportanceInit::Reconstruct,
        DEFAULT_EPS,
        &mut Rng::new(0),
    )
    .unwrap();
    let k = 1;
    let tg = disentangle_epoch(&model, &imps, k, &batches, &cfg, 0.05, 0.05).unwrap();

    let mut m = model.clone();
    let mut opt = SgdState::new(cfg.weights);
    for b in &batches {
        let (_, grads) = task_gradients(&m, b).unwrap();
        for r in m.param_refs() {
            let g = grads[k]
                .get(&r)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(m.get(r).unwrap().shape()));
            opt.step(r, m.get_mut(r).unwrap(), &g, 0.05).unwrap();
        }
    }
    for j in 0..2 {
        let expect = m.trunk[j].weight.sub(&model.trunk[j].weight).unwrap();
        assert!(
            tg.trunk[j]
                .as_ref()
                .unwrap()
                .sub(&expect)
                .unwrap()
                .max_abs()
                <= 1e-9
        );
    }
    let dh = m.heads[k][0].weight.sub(&model.heads[k][0].weight).unwrap();
    assert!(tg.head[0].0.sub(&dh).unwrap().max_abs() <= 1e-9);
}

/// With one task there is nothing to fuse: each DR-MGF epoch lands on the
/// weights a fresh-momentum SGD epoch reaches.
#[test]
fn single_task_drmgf_is_sgd() {
    let topo = Topology::Network(drmgf::model::NetSpec::multi_task(8, 8, 2, &[3], 2));
    let model = MultiOutputModel::init(topo, &mut Rng::new(4)).unwrap();
    let mut data = common::clusters(96, 8, 3, 4);
    data.mode = LabelMode::MultiTask;
    let sgd = SgdConfig {
        momentum: 0.0,
        ..SgdConfig::weights()
    };
    let cfg = |method| TrainerConfig {
        method,
        max_epochs: 3,
        batch_size: 16,
        disentangle: DisentangleConfig {
            weights: sgd,
            ..DisentangleConfig::default()
        },
        importance_init: ImportanceInit::Reconstruct,
        parallel: false,
        ..TrainerConfig::default()
    };
    let mut a = Trainer::new(cfg(Method::DrMgf), model.clone()).unwrap();
    let mut b = Trainer::new(cfg(Method::SgdJoint), model).unwrap();
    while !a.done() {
        a.step_epoch(&data).unwrap();
        b.step_epoch(&data).unwrap();
        for r in a.model.param_refs() {
            let d = a
                .model
                .get(r)
                .unwrap()
                .sub(b.model.get(r).unwrap())
                .unwrap()
                .max_abs();
            assert!(d <= 1e-9, "epoch {} {r:?}: {d}", a.epoch);
        }
    }
}

#[test]
fn average_and_meta_variants_share_disentanglement() {
    let mut cfg = RunConfig::smoke();
    cfg.model.exits = 3;
    let (train, _) = load_data(&cfg).unwrap();
    let trainer = |method| {
        let c = RunConfig {
            method,
            ..cfg.clone()
        };
        Trainer::new(c.trainer_config(), init_model(&c, &train).unwrap()).unwrap()
    };
    let a = trainer(Method::DrMgf);
    let b = trainer(Method::DrAvgf);
    assert_eq!(a.model, b.model);
    assert_eq!(a.importances, b.importances);
    assert_eq!(a.config.disentangle, b.config.disentangle);
    let batches = a.epoch_batches(&train, 0).unwrap();
    assert_eq!(batches.len(), b.epoch_batches(&train, 0).unwrap().len());
    let (lr, nu_lr) = a.lrs();
    for k in 0..3 {
        let ga = disentangle_epoch(
            &a.model,
            &a.importances,
            k,
            &batches,
            &a.config.disentangle,
            lr,
            nu_lr,
        )
        .unwrap();
        let gb = disentangle_epoch(
            &b.model,
            &b.importances,
            k,
            &batches,
            &b.config.disentangle,
            lr,
            nu_lr,
        )
        .unwrap();
        assert_eq!(ga, gb);
    }
}

#[test]
fn joint_sgd_with_one_task_is_plain_sgd() {
    let model = common::net(4, 4, 1, 2, 1, 5);
    let b = common::batch(8, 4, 2, 5);
    let (_, g) = task_gradients(&model, &b).unwrap();
    let mut m = model.clone();
    let mut opt = SgdState::new(SgdConfig::plain(0.1));
    drmgf::trainers::joint_sgd_step(&mut m, &b, &mut opt, 0.1).unwrap();
    let moved = m.trunk[0].weight.sub(&model.trunk[0].weight).unwrap();
    let expect = g[0][&ParamRef::TrunkWeight(0)].scale(-0.1);
    assert!(moved.sub(&expect).unwrap().max_abs() < 1e-15);
}
