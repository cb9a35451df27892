//! Two tasks sharing two scalar weights, each with its own scalar head, on
//! convex quadratic losses whose shared-space minimizers differ.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, LabelMode};
use crate::error::{Error, Result};
use crate::metagf::{Method, Trainer, TrainerConfig};
use crate::model::{
    effective_weights, evaluate, ImportanceInit, Inference, MultiOutputModel, QuadraticLandscape,
    Topology,
};
use crate::trainers::{joint_sgd_step, DisentangleConfig, SgdConfig, SgdState};

/// Loss above which a method counts as diverged.
pub const DIVERGED: f64 = 1e6;

/// Landscape with minimizers `(2, 0.5)` and `(0.5, 2)` in the shared plane,
/// both head optima at 1 and zero optimal loss.
pub fn default_landscape() -> QuadraticLandscape {
    let design = vec![
        vec![vec![1.0, 0.3], vec![0.2, 1.0], vec![0.0, 0.0]],
        vec![vec![1.0, -0.2], vec![0.3, 1.2], vec![0.0, 0.0]],
    ];
    let head_coef = vec![vec![0.1, 0.0, 1.0], vec![0.0, 0.1, 1.0]];
    let minimizers = [[2.0, 0.5, 1.0], [0.5, 2.0, 1.0]];
    let targets = (0..2)
        .map(|k| {
            (0..3)
                .map(|r| {
                    design[k][r][0] * minimizers[k][0]
                        + design[k][r][1] * minimizers[k][1]
                        + head_coef[k][r] * minimizers[k][2]
                })
                .collect()
        })
        .collect();
    QuadraticLandscape {
        design,
        head_coef,
        targets,
        init_shared: vec![0.2, 0.2],
        init_heads: vec![0.0, 0.0],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub epochs: usize,
    pub methods: Vec<Method>,
    pub landscape: QuadraticLandscape,
    pub seed: u64,
    pub lr: f64,
    /// Learning rate of the importance variables.
    pub nu_lr: f64,
    pub momentum: f64,
    pub meta_steps: usize,
    /// Auxiliary weight on the other task during disentanglement.
    pub beta: f64,
    pub lambda: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            methods: vec![Method::DrMgf, Method::SgdJoint, Method::Pcgrad],
            landscape: default_landscape(),
            seed: 0,
            lr: 0.1,
            nu_lr: 0.01,
            momentum: 0.9,
            meta_steps: 1,
            beta: 0.0,
            lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub method: Method,
    /// Shared weights after each epoch (the starting point first).
    pub shared: Vec<Vec<f64>>,
    /// Per epoch, per task: the shared weights the task actually sees
    /// (its route for route methods).
    pub task_points: Vec<Vec<Vec<f64>>>,
    /// Per epoch, per task loss.
    pub losses: Vec<Vec<f64>>,
    pub final_losses: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOutcome {
    /// Loss of each task trained on its own.
    pub optima: Vec<f64>,
    /// Shared weights each task reaches on its own.
    pub optimum_points: Vec<Vec<f64>>,
    pub trajectories: Vec<ToyTrajectory>,
}

impl ToyOutcome {
    pub fn trajectory(&self, m: Method) -> Option<&ToyTrajectory> {
        self.trajectories.iter().find(|t| t.method == m)
    }

    /// Final loss minus independent optimum, per task.
    pub fn gaps(&self, m: Method) -> Option<Vec<f64>> {
        self.trajectory(m).map(|t| {
            t.final_losses
                .iter()
                .zip(&self.optima)
                .map(|(l, o)| l - o)
                .collect()
        })
    }
}

/// The landscape ignores inputs, so every step uses this placeholder batch.
fn placeholder_batch() -> Batch {
    Batch {
        x: Tensor::zeros(&[1, 1]),
        labels: vec![vec![0]],
        mode: LabelMode::MultiExit,
    }
}

fn single_task(q: &QuadraticLandscape, k: usize) -> QuadraticLandscape {
    QuadraticLandscape {
        design: vec![q.design[k].clone()],
        head_coef: vec![q.head_coef[k].clone()],
        targets: vec![q.targets[k].clone()],
        init_shared: q.init_shared.clone(),
        init_heads: vec![q.init_heads[k]],
    }
}

fn trainer_config(cfg: &ToyConfig, method: Method) -> TrainerConfig {
    let sgd = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: 0.0,
    };
    let mut d = DisentangleConfig {
        weights: sgd,
        importances: SgdConfig {
            lr: cfg.nu_lr,
            ..sgd
        },
        lambda: cfg.lambda,
        ..DisentangleConfig::default()
    };
    d.aux.beta = cfg.beta;
    TrainerConfig {
        method,
        seed: cfg.seed,
        max_epochs: cfg.epochs,
        batch_size: 1,
        disentangle: d,
        meta_steps: cfg.meta_steps,
        importance_init: ImportanceInit::Reconstruct,
        parallel: false,
        ..TrainerConfig::default()
    }
}

fn task_points(t: &Trainer) -> Result<Vec<Vec<f64>>> {
    let raw = t.model.trunk[0].weight.data().to_vec();
    (0..t.model.num_tasks())
        .map(|k| {
            if !t.config.method.uses_routes() {
                return Ok(raw.clone());
            }
            let eff = effective_weights(&t.model, &t.importances, k, t.config.disentangle.eps)?;
            Ok(eff[0].as_ref().map_or(raw.clone(), |w| w.data().to_vec()))
        })
        .collect()
}

fn losses(t: &Trainer, batch: &Batch) -> Result<Vec<f64>> {
    Ok(evaluate(&t.model, t.inference(), batch)?
        .iter()
        .map(|e| e.loss)
        .collect())
}

/// Runs every configured method from the same start, plus each task alone.
pub fn toy_problem(cfg: &ToyConfig) -> Result<ToyOutcome> {
    if cfg.methods.is_empty() {
        return Err(Error::Config(
            "toy problem needs at least one method".into(),
        ));
    }
    let topo = Topology::Quadratic(cfg.landscape.clone());
    topo.validate()?;
    let batch = placeholder_batch();

    let mut optima = Vec::new();
    let mut optimum_points = Vec::new();
    for k in 0..topo.num_tasks() {
        let single = Topology::Quadratic(single_task(&cfg.landscape, k));
        let mut model = MultiOutputModel::init(single, &mut numcore::Rng::new(cfg.seed))?;
        let tc = trainer_config(cfg, Method::SgdJoint);
        let mut opt = SgdState::new(tc.disentangle.weights);
        for e in 0..cfg.epochs {
            let lr = tc.schedule.lr(cfg.lr, e, cfg.epochs);
            joint_sgd_step(&mut model, &batch, &mut opt, lr)?;
        }
        optima.push(evaluate(&model, Inference::Plain, &batch)?[0].loss);
        optimum_points.push(model.trunk[0].weight.data().to_vec());
    }

    let mut trajectories = Vec::new();
    for &method in &cfg.methods {
        let model = MultiOutputModel::init(topo.clone(), &mut numcore::Rng::new(cfg.seed))?;
        let mut t = Trainer::new(trainer_config(cfg, method), model)?;
        let mut traj = ToyTrajectory {
            method,
            shared: vec![t.model.trunk[0].weight.data().to_vec()],
            task_points: vec![task_points(&t)?],
            losses: vec![losses(&t, &batch)?],
            final_losses: Vec::new(),
            diverged: false,
        };
        while !t.done() {
            match t.step_epoch_on(std::slice::from_ref(&batch)) {
                Ok(_) => {}
                Err(Error::Numeric { .. }) => {
                    traj.diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            let l = losses(&t, &batch)?;
            traj.diverged = l.iter().any(|v| !v.is_finite() || *v > DIVERGED);
            traj.shared.push(t.model.trunk[0].weight.data().to_vec());
            traj.task_points.push(task_points(&t)?);
            traj.losses.push(l);
            if traj.diverged {
                break;
            }
        }
        traj.final_losses = traj.losses.last().cloned().unwrap_or_default();
        trajectories.push(traj);
    }
    Ok(ToyOutcome {
        optima,
        optimum_points,
        trajectories,
    })
}
