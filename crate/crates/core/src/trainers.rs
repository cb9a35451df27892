//! Per-task disentanglement epochs and the joint-training baselines.

use std::collections::BTreeMap;

use numcore::{Graph, NodeId, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{contract, Error, Result};
use crate::model::{
    bind, bind_importances, lateral_normalize, route_weights, task_loss, task_outputs,
    ImportanceSet, MultiOutputModel, ParamRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    /// Defaults for network weights.
    pub fn weights() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    /// Defaults for importance variables.
    pub fn importances() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }

    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `v ← μ v + (g + λ p)`, `p ← p − η v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: BTreeMap<ParamRef, Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, r: ParamRef) -> Option<&Tensor> {
        self.velocity.get(&r)
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, r: ParamRef, p: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        let mut d = grad.clone();
        if weight_decay != 0.0 {
            d.axpy(weight_decay, p)?;
        }
        if momentum != 0.0 {
            let v = self
                .velocity
                .entry(r)
                .or_insert_with(|| Tensor::zeros(p.shape()));
            *v = v.scale(momentum);
            v.axpy(1.0, &d)?;
            d = v.clone();
        }
        p.axpy(-lr, &d)?;
        Ok(())
    }
}

/// Multi-step learning-rate schedule: divide by `factor` once each milestone
/// fraction of the run has elapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            milestones: vec![0.5, 0.75],
            factor: 10.0,
        }
    }
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize, max_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * max_epochs as f64)
            .count();
        base / self.factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.factor > 0.0
            && self.milestones.iter().all(|&m| m > 0.0 && m < 1.0)
            && self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Config(format!(
                "milestones {:?} must increase strictly inside (0, 1) with a positive factor",
                self.milestones
            )));
        }
        Ok(())
    }
}

/// Loss weights of the disentanglement objective: `α` on the selected task,
/// `β` on every other task evaluated along the selected task's route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.4,
        }
    }
}

impl AuxWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha != 1.0 || !(0.0..=0.5).contains(&self.beta) {
            return Err(Error::Config(format!(
                "need alpha = 1 and beta in [0, 0.5], got {} / {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// How a disentanglement epoch routes the shared layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteMode {
    /// Route weights `ν̂ ⊙ w/‖w‖` with `ν` trained alongside `w`.
    Learned,
    /// Route weights with `ν` held fixed.
    Frozen,
    /// Raw weights; `ν` is not used. Equivalent to an importance that
    /// tracks the filter norms of `w` exactly.
    Tied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub weights: SgdConfig,
    pub importances: SgdConfig,
    pub aux: AuxWeights,
    pub lambda: f64,
    pub eps: f64,
    pub route: RouteMode,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self {
            weights: SgdConfig::weights(),
            importances: SgdConfig::importances(),
            aux: AuxWeights::default(),
            lambda: 1e-4,
            eps: crate::model::DEFAULT_EPS,
            route: RouteMode::Learned,
        }
    }
}

/// One task's expected update from a disentanglement epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub task: usize,
    /// Per trunk layer on the task's path: route weights after the epoch
    /// minus `w0` (raw weight change on unshared or tied layers).
    pub trunk: Vec<Option<Tensor>>,
    /// Per trunk layer on the task's path: raw bias change.
    pub trunk_bias: Vec<Option<Tensor>>,
    /// Raw change of every layer of the task's own head, `(weight, bias)`.
    pub head: Vec<(Tensor, Option<Tensor>)>,
    /// Importance fields at the end of the epoch.
    pub nu_star: Vec<Option<Tensor>>,
    /// Trunk weights at the end of the epoch.
    pub w_star: Vec<Tensor>,
    pub steps: usize,
    /// Mean selected-task loss over the epoch's batches.
    pub mean_loss: f64,
}

impl TaskGradient {
    /// Norm over all trunk entries.
    pub fn trunk_norm(&self) -> f64 {
        self.trunk
            .iter()
            .flatten()
            .map(Tensor::norm_sq)
            .sum::<f64>()
            .sqrt()
    }
}

/// Registered parameter lookup across a model and an importance set.
fn slot<'a>(
    model: &'a mut MultiOutputModel,
    imps: &'a mut ImportanceSet,
    r: ParamRef,
) -> &'a mut Tensor {
    match r {
        ParamRef::Importance(k, j) => imps.get_mut(k, j).expect("bound importance exists"),
        _ => model.get_mut(r).expect("bound parameter exists"),
    }
}

/// The disentanglement objective of task `k` on one batch. Returns the
/// graph, the total loss node, the selected-task loss node and the
/// registered parameters.
fn disentangle_objective(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    batch: &Batch,
    cfg: &DisentangleConfig,
) -> Result<(Graph, NodeId, NodeId, Vec<(numcore::ParamId, ParamRef)>)> {
    let topo = &model.topology;
    let mut g = Graph::new();
    let mut bound = bind(&mut g, model, &|_| true);
    let mut decay = Vec::new();
    let w = match cfg.route {
        RouteMode::Tied => bound.trunk_w.clone(),
        RouteMode::Learned | RouteMode::Frozen => {
            let learned = cfg.route == RouteMode::Learned;
            let fields = bind_importances(&mut g, imps, k, learned, &mut bound.params);
            if learned && cfg.lambda != 0.0 {
                for &nu in fields.iter().flatten() {
                    let sq = g.square(nu);
                    decay.push(g.sum(sq));
                }
            }
            route_weights(&mut g, &bound, &fields, cfg.eps)?
        }
    };
    let mut tasks = vec![k];
    if cfg.aux.beta != 0.0 {
        tasks.extend((0..topo.num_tasks()).filter(|&i| i != k));
    }
    finish(g, topo, &bound, &w, &tasks, batch, cfg, decay)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    mut g: Graph,
    topo: &crate::model::Topology,
    bound: &crate::model::BoundModel,
    w: &[NodeId],
    tasks: &[usize],
    batch: &Batch,
    cfg: &DisentangleConfig,
    decay: Vec<NodeId>,
) -> Result<(Graph, NodeId, NodeId, Vec<(numcore::ParamId, ParamRef)>)> {
    let outs = task_outputs(&mut g, topo, bound, w, tasks, batch)?;
    let mut terms = Vec::with_capacity(tasks.len() + 1);
    let mut main = None;
    for (&t, &o) in tasks.iter().zip(&outs) {
        let l = task_loss(&mut g, topo, o, batch, t)?;
        if main.is_none() {
            main = Some(l);
            terms.push(g.scale(l, cfg.aux.alpha));
        } else {
            terms.push(g.scale(l, cfg.aux.beta));
        }
    }
    if !decay.is_empty() {
        let s = g.add_all(&decay)?;
        terms.push(g.scale(s, cfg.lambda));
    }
    let total = g.add_all(&terms)?;
    Ok((
        g,
        total,
        main.expect("selected task present"),
        bound.params.clone(),
    ))
}

fn non_finite(stage: &'static str, batch: usize, what: impl Into<String>) -> Error {
    Error::Numeric {
        stage,
        batch,
        detail: what.into(),
    }
}

/// Trains a private copy of `w0` (all weights plus `ν_k`) for one pass over
/// `batches` and returns task `k`'s expected gradient. `w0` is untouched and
/// optimizer state starts fresh.
pub fn disentangle_epoch(
    w0: &MultiOutputModel,
    importances: &ImportanceSet,
    k: usize,
    batches: &[Batch],
    cfg: &DisentangleConfig,
    lr: f64,
    nu_lr: f64,
) -> Result<TaskGradient> {
    let topo = &w0.topology;
    if k >= topo.num_tasks() {
        return contract(format!("task {k} out of range"));
    }
    let mut model = w0.clone();
    let mut imps = importances.clone();
    let mut w_opt = SgdState::new(cfg.weights);
    let mut nu_opt = SgdState::new(cfg.importances);
    let mut loss_sum = 0.0;

    for (b, batch) in batches.iter().enumerate() {
        let (g, total, main, params) = disentangle_objective(&model, &imps, k, batch, cfg)?;
        let value = g.value(total).item()?;
        if !value.is_finite() {
            return Err(non_finite(
                "disentangle",
                b,
                format!("task {k} loss {value}"),
            ));
        }
        loss_sum += g.value(main).item()?;
        let grads = g
            .backward(total)
            .map_err(|e| non_finite("disentangle", b, e.to_string()))?;
        for (pid, r) in params {
            let (opt, rate) = if r.is_importance() {
                (&mut nu_opt, nu_lr)
            } else {
                (&mut w_opt, lr)
            };
            opt.step(r, slot(&mut model, &mut imps, r), grads.get(pid), rate)?;
        }
        imps.clamp_nonnegative();
        if !model.is_finite() || !imps.is_finite() {
            return Err(non_finite("disentangle", b, format!("task {k} parameters")));
        }
    }

    expected_gradient(w0, &model, &imps, k, cfg, batches.len(), loss_sum)
}

fn expected_gradient(
    w0: &MultiOutputModel,
    trained: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    cfg: &DisentangleConfig,
    steps: usize,
    loss_sum: f64,
) -> Result<TaskGradient> {
    let topo = &w0.topology;
    let depth = topo.trunk_depth();
    let mut trunk = vec![None; depth];
    let mut trunk_bias = vec![None; depth];
    for j in 0..topo.task_depth(k) {
        let start = &w0.trunk[j];
        let end = &trained.trunk[j];
        let reached = match (cfg.route, imps.get(k, j)) {
            (RouteMode::Learned | RouteMode::Frozen, Some(nu)) => {
                let hat = lateral_normalize(nu, cfg.eps)?;
                let unit = numcore::filter_normalize(&end.weight)?.weights;
                numcore::filters::scale_filters(&hat, &unit)?
            }
            _ => end.weight.clone(),
        };
        trunk[j] = Some(reached.sub(&start.weight)?);
        trunk_bias[j] = match (&start.bias, &end.bias) {
            (Some(a), Some(b)) => Some(b.sub(a)?),
            _ => None,
        };
    }
    let head = w0.heads[k]
        .iter()
        .zip(&trained.heads[k])
        .map(|(a, b)| {
            let dw = b.weight.sub(&a.weight)?;
            let db = match (&a.bias, &b.bias) {
                (Some(x), Some(y)) => Some(y.sub(x)?),
                _ => None,
            };
            Ok((dw, db))
        })
        .collect::<Result<_>>()?;
    Ok(TaskGradient {
        task: k,
        trunk,
        trunk_bias,
        head,
        nu_star: imps.fields[k].clone(),
        w_star: trained.trunk.iter().map(|l| l.weight.clone()).collect(),
        steps,
        mean_loss: if steps == 0 {
            0.0
        } else {
            loss_sum / steps as f64
        },
    })
}

/// Gradients of each task's loss (plain forward) with respect to every model
/// parameter, plus the task losses.
pub fn task_gradients(
    model: &MultiOutputModel,
    batch: &Batch,
) -> Result<(Vec<f64>, Vec<BTreeMap<ParamRef, Tensor>>)> {
    let topo = &model.topology;
    let tasks: Vec<usize> = (0..topo.num_tasks()).collect();
    let mut g = Graph::new();
    let bound = bind(&mut g, model, &|_| true);
    let w = bound.trunk_w.clone();
    let outs = task_outputs(&mut g, topo, &bound, &w, &tasks, batch)?;
    let losses = tasks
        .iter()
        .map(|&k| task_loss(&mut g, topo, outs[k], batch, k))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(losses.len());
    let mut grads = Vec::with_capacity(losses.len());
    for &l in &losses {
        values.push(g.value(l).item()?);
        let gr = g.backward(l)?;
        grads.push(
            bound
                .params
                .iter()
                .map(|&(pid, r)| (r, gr.get(pid).clone()))
                .collect(),
        );
    }
    Ok((values, grads))
}

fn check_losses(stage: &'static str, losses: &[f64]) -> Result<()> {
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(non_finite(stage, 0, format!("loss {l}")));
    }
    Ok(())
}

fn apply(
    model: &mut MultiOutputModel,
    opt: &mut SgdState,
    grads: &BTreeMap<ParamRef, Tensor>,
    lr: f64,
) -> Result<()> {
    for (&r, gr) in grads {
        opt.step(r, model.get_mut(r).expect("model parameter"), gr, lr)?;
    }
    if !model.is_finite() {
        return Err(non_finite("update", 0, "non-finite parameters"));
    }
    Ok(())
}

fn sum_maps(maps: &[BTreeMap<ParamRef, Tensor>]) -> Result<BTreeMap<ParamRef, Tensor>> {
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        for (r, t) in m {
            out.get_mut(r).expect("same parameter set").axpy(1.0, t)?;
        }
    }
    Ok(out)
}

/// One SGD step on the sum of all task losses. Returns the per-task losses
/// before the step.
pub fn joint_sgd_step(
    model: &mut MultiOutputModel,
    batch: &Batch,
    opt: &mut SgdState,
    lr: f64,
) -> Result<Vec<f64>> {
    let (losses, grads) = task_gradients(model, batch)?;
    check_losses("joint-sgd", &losses)?;
    apply(model, opt, &sum_maps(&grads)?, lr)?;
    Ok(losses)
}

/// Projects each gradient away from the others it conflicts with, visiting
/// the others in a random order; projections use the original gradients.
pub fn pcgrad_surgery(grads: &[Tensor], rng: &mut Rng) -> Result<Vec<Tensor>> {
    if grads.len() < 2 {
        return contract("pcgrad needs at least two gradients");
    }
    let mut out = Vec::with_capacity(grads.len());
    for (i, gi) in grads.iter().enumerate() {
        let mut others: Vec<usize> = (0..grads.len()).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        let mut pc = gi.clone();
        for j in others {
            let gj = &grads[j];
            let d = pc.dot(gj)?;
            let nn = gj.norm_sq();
            if d < 0.0 && nn > 0.0 {
                pc.axpy(-d / nn, gj)?;
            }
        }
        out.push(pc);
    }
    Ok(out)
}

/// Mean of the surgered gradients.
pub fn pcgrad_fuse(grads: &[Tensor], rng: &mut Rng) -> Result<Tensor> {
    let surgered = pcgrad_surgery(grads, rng)?;
    average_fuse(&surgered)
}

/// Elementwise mean.
pub fn average_fuse(grads: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::Contract("average of no gradients".into()))?;
    let mut acc = first.clone();
    for g in rest {
        acc.axpy(1.0, g)?;
    }
    Ok(acc.scale(1.0 / grads.len() as f64))
}

/// One PCGrad step: the flattened gradient of the parameters shared by
/// several tasks is surgered and averaged; each task's own parameters take
/// its plain gradient.
pub fn pcgrad_step(
    model: &mut MultiOutputModel,
    batch: &Batch,
    opt: &mut SgdState,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let (losses, grads) = task_gradients(model, batch)?;
    check_losses("pcgrad", &losses)?;
    let topo = &model.topology;
    let shared: Vec<ParamRef> = grads[0]
        .keys()
        .copied()
        .filter(|r| match *r {
            ParamRef::TrunkWeight(j) | ParamRef::TrunkBias(j) => topo.is_shared(j),
            _ => false,
        })
        .collect();
    let mut fused = sum_maps(&grads)?;
    if !shared.is_empty() {
        let users: Vec<usize> = (0..topo.num_tasks())
            .filter(|&k| shared.iter().any(|r| matches!(*r, ParamRef::TrunkWeight(j) | ParamRef::TrunkBias(j) if topo.uses_layer(k, j))))
            .collect();
        let flat: Vec<Tensor> = users
            .iter()
            .map(|&k| {
                Tensor::vector(
                    &shared
                        .iter()
                        .flat_map(|r| grads[k][r].data().to_vec())
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let merged = pcgrad_fuse(&flat, rng)?;
        let mut offset = 0;
        for r in &shared {
            let t = fused.get_mut(r).expect("shared parameter");
            let n = t.len();
            t.data_mut()
                .copy_from_slice(&merged.data()[offset..offset + n]);
            offset += n;
        }
    }
    apply(model, opt, &fused, lr)?;
    Ok(losses)
}
