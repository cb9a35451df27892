//! Fusion of per-task expected gradients, the meta step on the importance
//! variables, and the epoch driver for every training method.

use std::time::Instant;

use numcore::filters::FilterDims;
use numcore::{Graph, NodeId, ParamId, Rng, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{contract, Error, Result};
use crate::model::{
    bind, route_weights, task_loss, task_outputs, ImportanceInit, ImportanceSet, Inference,
    MultiOutputModel, ParamRef,
};
use crate::trainers::{
    average_fuse, disentangle_epoch, joint_sgd_step, pcgrad_step, DisentangleConfig, RouteMode,
    Schedule, SgdState, TaskGradient,
};

/// Per-filter convex combination of filter banks. Returns the fused bank and
/// the number of filters whose weights were all zero (those get the plain
/// mean).
pub fn fuse_gradients(weights: &[&Tensor], grads: &[&Tensor]) -> Result<(Tensor, usize)> {
    if weights.is_empty() || weights.len() != grads.len() {
        return contract("one importance field per gradient is required");
    }
    let dims = FilterDims::of(grads[0].shape())?;
    for (w, g) in weights.iter().zip(grads) {
        if g.shape() != grads[0].shape() || w.shape() != dims.field_shape() {
            return contract("fusion operands disagree in shape");
        }
        if w.data().iter().any(|&v| v < 0.0) {
            return contract("fusion weights must be nonnegative");
        }
    }
    let f = dims.filter_len;
    let k = grads.len() as f64;
    let mut out = vec![0.0; grads[0].len()];
    let mut fallbacks = 0;
    for i in 0..dims.filters() {
        let total: f64 = weights.iter().map(|w| w.data()[i]).sum();
        let dst = &mut out[i * f..(i + 1) * f];
        if total > 0.0 {
            for (w, g) in weights.iter().zip(grads) {
                let c = w.data()[i] / total;
                dst.iter_mut()
                    .zip(&g.data()[i * f..(i + 1) * f])
                    .for_each(|(d, s)| *d += c * s);
            }
        } else {
            fallbacks += 1;
            for g in grads {
                dst.iter_mut()
                    .zip(&g.data()[i * f..(i + 1) * f])
                    .for_each(|(d, s)| *d += s / k);
            }
        }
    }
    Ok((Tensor::new(grads[0].shape().to_vec(), out)?, fallbacks))
}

/// Per-filter weights `ν_k / Σ_k ν_k` of the given fields; all-zero filters
/// get uniform weights.
pub fn fusion_weights(fields: &[&Tensor]) -> Result<Vec<Tensor>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Contract("no importance fields".into()))?;
    let n = first.len();
    let mut totals = vec![0.0; n];
    for f in fields {
        if f.shape() != first.shape() {
            return contract("importance fields disagree in shape");
        }
        totals.iter_mut().zip(f.data()).for_each(|(t, v)| *t += v);
    }
    let k = fields.len() as f64;
    fields
        .iter()
        .map(|f| {
            let data = f
                .data()
                .iter()
                .zip(&totals)
                .map(|(&v, &t)| if t > 0.0 { v / t } else { 1.0 / k })
                .collect();
            Ok(Tensor::new(first.shape().to_vec(), data)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    /// Importance-weighted per filter.
    Meta,
    Average,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    pub fused_norm: f64,
    pub fallback_filters: usize,
}

fn check_tasks(model: &MultiOutputModel, grads: &[TaskGradient]) -> Result<()> {
    if grads.len() != model.num_tasks() || grads.iter().enumerate().any(|(k, g)| g.task != k) {
        return contract("need one task gradient per task, in task order");
    }
    Ok(())
}

fn mean_of(items: Vec<&Tensor>) -> Result<Tensor> {
    let owned: Vec<Tensor> = items.into_iter().cloned().collect();
    average_fuse(&owned)
}

/// `w0 ← w0 + g`: shared layers take the fused expected gradient of their
/// users, shared biases the mean bias change, and task-owned parameters
/// (heads and single-reader trunk layers) their owner's change.
pub fn apply_fusion(
    model: &mut MultiOutputModel,
    imps: &ImportanceSet,
    grads: &[TaskGradient],
    kind: FusionKind,
) -> Result<FusionStats> {
    check_tasks(model, grads)?;
    let topo = model.topology.clone();
    let mut stats = FusionStats::default();
    let mut sq = 0.0;
    for j in 0..topo.trunk_depth() {
        let users = topo.layer_users(j);
        let deltas: Vec<&Tensor> = users
            .iter()
            .map(|&k| {
                grads[k].trunk[j]
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("task {k} lacks layer {j}")))
            })
            .collect::<Result<_>>()?;
        let delta = if users.len() == 1 {
            deltas[0].clone()
        } else {
            match kind {
                FusionKind::Average => mean_of(deltas)?,
                FusionKind::Meta => {
                    let fields: Vec<&Tensor> = users
                        .iter()
                        .map(|&k| {
                            imps.get(k, j).ok_or_else(|| {
                                Error::Contract(format!("task {k} has no field on layer {j}"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let (fused, fb) = fuse_gradients(&fields, &deltas)?;
                    stats.fallback_filters += fb;
                    fused
                }
            }
        };
        sq += delta.norm_sq();
        model.trunk[j].weight.axpy(1.0, &delta)?;
        if model.trunk[j].bias.is_some() {
            let bias: Vec<&Tensor> = users
                .iter()
                .filter_map(|&k| grads[k].trunk_bias[j].as_ref())
                .collect();
            let db = mean_of(bias)?;
            model.trunk[j]
                .bias
                .as_mut()
                .expect("checked")
                .axpy(1.0, &db)?;
        }
    }
    for (k, g) in grads.iter().enumerate() {
        for (layer, (dw, db)) in model.heads[k].iter_mut().zip(&g.head) {
            layer.weight.axpy(1.0, dw)?;
            if let (Some(b), Some(db)) = (layer.bias.as_mut(), db) {
                b.axpy(1.0, db)?;
            }
        }
    }
    stats.fused_norm = sq.sqrt();
    if !model.is_finite() {
        return Err(Error::Numeric {
            stage: "fusion",
            batch: 0,
            detail: "non-finite fused weights".into(),
        });
    }
    Ok(stats)
}

/// How the meta objective runs each task at the fused weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "eps", rename_all = "kebab-case")]
pub enum MetaForward {
    /// Raw fused weights.
    Plain,
    /// Each task along its importance route over the fused weights.
    Routes(f64),
}

/// Joint loss of all tasks at `w0 + g(ν)`, with the fused shared-layer
/// deltas differentiable in the importance fields.
fn meta_objective(
    w0: &MultiOutputModel,
    imps: &ImportanceSet,
    grads: &[TaskGradient],
    batch: &Batch,
    forward: MetaForward,
) -> Result<(Graph, NodeId, Vec<(ParamId, ParamRef)>)> {
    let topo = &w0.topology;
    let mut g = Graph::new();
    let mut bound = bind(&mut g, w0, &|_| false);
    let mut params = Vec::new();
    let mut fields = vec![vec![None; topo.trunk_depth()]; topo.num_tasks()];
    let mut trunk = Vec::with_capacity(topo.trunk_depth());
    for j in 0..topo.trunk_depth() {
        let users = topo.layer_users(j);
        let delta = if let [k] = users[..] {
            g.constant(grads[k].trunk[j].clone().expect("checked by caller"))
        } else {
            let mut weights = Vec::new();
            let mut values = Vec::new();
            for &k in &users {
                let nu = imps.get(k, j).expect("shared layer field");
                let (id, pid) = g.parameter(nu.clone());
                params.push((pid, ParamRef::Importance(k, j)));
                fields[k][j] = Some(id);
                weights.push(id);
                values.push(g.constant(grads[k].trunk[j].clone().expect("checked by caller")));
            }
            g.convex_combine(&weights, &values)?
        };
        trunk.push(g.add(bound.trunk_w[j], delta)?);
        if let Some(b) = bound.trunk_b[j] {
            let bias: Vec<&Tensor> = users
                .iter()
                .filter_map(|&k| grads[k].trunk_bias[j].as_ref())
                .collect();
            let db = g.constant(mean_of(bias)?);
            bound.trunk_b[j] = Some(g.add(b, db)?);
        }
    }
    for (k, gk) in grads.iter().enumerate() {
        for (l, (dw, db)) in gk.head.iter().enumerate() {
            let (w, b) = bound.heads[k][l];
            let dwn = g.constant(dw.clone());
            let w = g.add(w, dwn)?;
            let b = match (b, db) {
                (Some(b), Some(db)) => {
                    let dbn = g.constant(db.clone());
                    Some(g.add(b, dbn)?)
                }
                _ => b,
            };
            bound.heads[k][l] = (w, b);
        }
    }
    let tasks: Vec<usize> = (0..topo.num_tasks()).collect();
    let losses = match forward {
        MetaForward::Plain => {
            let outs = task_outputs(&mut g, topo, &bound, &trunk, &tasks, batch)?;
            tasks
                .iter()
                .map(|&k| task_loss(&mut g, topo, outs[k], batch, k))
                .collect::<Result<Vec<_>>>()?
        }
        MetaForward::Routes(eps) => {
            bound.trunk_w = trunk;
            tasks
                .iter()
                .map(|&k| {
                    let w = route_weights(&mut g, &bound, &fields[k], eps)?;
                    let out = task_outputs(&mut g, topo, &bound, &w, &[k], batch)?[0];
                    task_loss(&mut g, topo, out, batch, k)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let total = g.add_all(&losses)?;
    Ok((g, total, params))
}

/// Result of [`meta_step`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
    pub steps: usize,
}

/// Joint loss at `w0 + g(ν)` for the current importances.
pub fn meta_loss(
    w0: &MultiOutputModel,
    imps: &ImportanceSet,
    grads: &[TaskGradient],
    batch: &Batch,
    forward: MetaForward,
) -> Result<f64> {
    check_tasks(w0, grads)?;
    let (g, total, _) = meta_objective(w0, imps, grads, batch, forward)?;
    Ok(g.value(total).item()?)
}

/// `steps` plain gradient steps on the importance fields of shared layers,
/// minimising the joint loss at the fused update; fields are clamped to be
/// nonnegative after each step. On a non-finite loss the fields are restored
/// and a numeric error is returned.
pub fn meta_step(
    w0: &MultiOutputModel,
    imps: &mut ImportanceSet,
    grads: &[TaskGradient],
    batch: &Batch,
    forward: MetaForward,
    lr: f64,
    steps: usize,
) -> Result<MetaOutcome> {
    check_tasks(w0, grads)?;
    let saved = imps.clone();
    let mut loss_before = f64::NAN;
    let mut loss_after = f64::NAN;
    for s in 0..=steps {
        let (g, total, params) = meta_objective(w0, imps, grads, batch, forward)?;
        let value = g.value(total).item()?;
        if !value.is_finite() {
            *imps = saved;
            return Err(Error::Numeric {
                stage: "meta",
                batch: s,
                detail: format!("meta loss {value}"),
            });
        }
        if s == 0 {
            loss_before = value;
        }
        loss_after = value;
        if s == steps {
            break;
        }
        let grad = match g.backward(total) {
            Ok(grad) => grad,
            Err(e) => {
                *imps = saved;
                return Err(Error::Numeric {
                    stage: "meta",
                    batch: s,
                    detail: e.to_string(),
                });
            }
        };
        for (pid, r) in params {
            if let ParamRef::Importance(k, j) = r {
                imps.get_mut(k, j)
                    .expect("bound field")
                    .axpy(-lr, grad.get(pid))?;
            }
        }
        imps.clamp_nonnegative();
    }
    Ok(MetaOutcome {
        loss_before,
        loss_after,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DrMgf,
    MetaGfOnly,
    DrAvgf,
    SgdJoint,
    Pcgrad,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DrMgf,
        Method::MetaGfOnly,
        Method::DrAvgf,
        Method::SgdJoint,
        Method::Pcgrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DrMgf => "dr-mgf",
            Method::MetaGfOnly => "meta-gf-only",
            Method::DrAvgf => "dr-avgf",
            Method::SgdJoint => "sgd-joint",
            Method::Pcgrad => "pcgrad",
        }
    }

    /// Disentangle-then-fuse methods, as opposed to per-step joint training.
    pub fn is_fusion(self) -> bool {
        matches!(self, Method::DrMgf | Method::MetaGfOnly | Method::DrAvgf)
    }

    /// Whether inference runs each task along its importance route.
    pub fn uses_routes(self) -> bool {
        matches!(self, Method::DrMgf | Method::DrAvgf)
    }

    pub fn fusion(self) -> Option<FusionKind> {
        match self {
            Method::DrMgf | Method::MetaGfOnly => Some(FusionKind::Meta),
            Method::DrAvgf => Some(FusionKind::Average),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything an epoch driver needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    pub seed: u64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub disentangle: DisentangleConfig,
    pub schedule: Schedule,
    pub meta_steps: usize,
    pub importance_init: ImportanceInit,
    /// When false, the K disentanglement epochs run one after another.
    pub parallel: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            method: Method::DrMgf,
            seed: 0,
            max_epochs: 20,
            batch_size: 64,
            disentangle: DisentangleConfig::default(),
            schedule: Schedule::default(),
            meta_steps: 1,
            importance_init: ImportanceInit::KaimingAbs,
            parallel: true,
        }
    }
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub method: Method,
    pub lr: f64,
    /// Mean per-task training loss seen during the epoch.
    pub task_losses: Vec<f64>,
    /// Expected-gradient norms over the trunk (fusion methods only).
    pub expected_norms: Vec<f64>,
    pub fused_norm: f64,
    /// Joint loss on the meta batch after fusion.
    pub joint_loss: f64,
    pub meta: Option<MetaOutcome>,
    pub fallback_filters: usize,
    pub steps: usize,
    #[serde(default)]
    pub wall_seconds: f64,
}

/// Rng stream ids, so that every consumer of randomness is independent of
/// the others.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const IMPORTANCE: u64 = 1;
    pub const PCGRAD: u64 = 2;
    /// Epoch `e` shuffles with stream `BATCHES + e`.
    pub const BATCHES: u64 = 1 << 32;
}

/// Trains one model with one method, an epoch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub model: MultiOutputModel,
    pub importances: ImportanceSet,
    pub epoch: usize,
    sgd: SgdState,
    pcgrad_rng: Rng,
}

impl Trainer {
    pub fn new(config: TrainerConfig, model: MultiOutputModel) -> Result<Self> {
        config.schedule.validate()?;
        config.disentangle.aux.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut rng = Rng::with_stream(config.seed, streams::IMPORTANCE);
        let importances = ImportanceSet::init(
            &model,
            config.importance_init,
            config.disentangle.eps,
            &mut rng,
        )?;
        Ok(Self {
            sgd: SgdState::new(config.disentangle.weights),
            pcgrad_rng: Rng::with_stream(config.seed, streams::PCGRAD),
            config,
            model,
            importances,
            epoch: 0,
        })
    }

    /// Which weights each task uses at inference.
    pub fn inference(&self) -> Inference<'_> {
        if self.config.method.uses_routes() {
            Inference::Routes {
                importances: &self.importances,
                eps: self.config.disentangle.eps,
            }
        } else {
            Inference::Plain
        }
    }

    /// The meta objective follows the method's inference forward.
    pub fn meta_forward(&self) -> MetaForward {
        if self.config.method.uses_routes() {
            MetaForward::Routes(self.config.disentangle.eps)
        } else {
            MetaForward::Plain
        }
    }

    /// Mini-batches of `epoch`, shared by every task and method.
    pub fn epoch_batches(&self, data: &Dataset, epoch: usize) -> Result<Vec<Batch>> {
        let mut rng = Rng::with_stream(self.config.seed, streams::BATCHES + epoch as u64);
        data.batches(self.config.batch_size, &mut rng)
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.max_epochs
    }

    pub fn lrs(&self) -> (f64, f64) {
        let c = &self.config;
        (
            c.schedule
                .lr(c.disentangle.weights.lr, self.epoch, c.max_epochs),
            c.schedule
                .lr(c.disentangle.importances.lr, self.epoch, c.max_epochs),
        )
    }

    /// Runs one epoch over `data`.
    pub fn step_epoch(&mut self, data: &Dataset) -> Result<EpochReport> {
        let batches = self.epoch_batches(data, self.epoch)?;
        self.step_epoch_on(&batches)
    }

    /// Runs one epoch over the given batch sequence.
    pub fn step_epoch_on(&mut self, batches: &[Batch]) -> Result<EpochReport> {
        self.step_epoch_probed(batches, &mut |_, _, _| Ok(()))
    }

    /// As [`Trainer::step_epoch_on`], calling `probe(model, step, batch)`
    /// before every joint-training step. Fusion methods take no joint
    /// steps, so the probe never runs for them.
    pub fn step_epoch_probed(
        &mut self,
        batches: &[Batch],
        probe: &mut dyn FnMut(&MultiOutputModel, usize, &Batch) -> Result<()>,
    ) -> Result<EpochReport> {
        if batches.is_empty() {
            return contract("an epoch needs at least one batch");
        }
        let started = Instant::now();
        let method = self.config.method;
        let (lr, nu_lr) = self.lrs();
        let k = self.model.num_tasks();
        let mut report = EpochReport {
            epoch: self.epoch,
            method,
            lr,
            task_losses: vec![0.0; k],
            expected_norms: Vec::new(),
            fused_norm: 0.0,
            joint_loss: 0.0,
            meta: None,
            fallback_filters: 0,
            steps: batches.len(),
            wall_seconds: 0.0,
        };
        if method.is_fusion() {
            let mut cfg = self.config.disentangle.clone();
            cfg.route = match method {
                Method::MetaGfOnly => RouteMode::Tied,
                _ => cfg.route,
            };
            let run = |t: usize| {
                disentangle_epoch(&self.model, &self.importances, t, batches, &cfg, lr, nu_lr)
            };
            let grads: Vec<TaskGradient> = if self.config.parallel {
                (0..k).into_par_iter().map(run).collect::<Result<_>>()?
            } else {
                (0..k).map(run).collect::<Result<_>>()?
            };
            for g in &grads {
                report.task_losses[g.task] = g.mean_loss;
                report.expected_norms.push(g.trunk_norm());
                if cfg.route == RouteMode::Learned {
                    self.importances.fields[g.task] = g.nu_star.clone();
                }
            }
            let meta_batch = &batches[0];
            if method.fusion() == Some(FusionKind::Meta) && self.config.meta_steps > 0 {
                let forward = self.meta_forward();
                report.meta = Some(meta_step(
                    &self.model,
                    &mut self.importances,
                    &grads,
                    meta_batch,
                    forward,
                    nu_lr,
                    self.config.meta_steps,
                )?);
            }
            let stats = apply_fusion(
                &mut self.model,
                &self.importances,
                &grads,
                method.fusion().expect("fusion method"),
            )?;
            report.fused_norm = stats.fused_norm;
            report.fallback_filters = stats.fallback_filters;
            report.joint_loss = joint_loss(&self.model, self.inference(), meta_batch)?;
        } else {
            for (i, batch) in batches.iter().enumerate() {
                probe(&self.model, i, batch)?;
                let losses = match method {
                    Method::SgdJoint => joint_sgd_step(&mut self.model, batch, &mut self.sgd, lr)?,
                    _ => pcgrad_step(
                        &mut self.model,
                        batch,
                        &mut self.sgd,
                        lr,
                        &mut self.pcgrad_rng,
                    )?,
                };
                report
                    .task_losses
                    .iter_mut()
                    .zip(&losses)
                    .for_each(|(a, l)| *a += l / batches.len() as f64);
            }
            report.joint_loss = joint_loss(&self.model, Inference::Plain, &batches[0])?;
        }
        self.epoch += 1;
        report.wall_seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Sum of per-task losses on `batch`.
pub fn joint_loss(
    model: &MultiOutputModel,
    inference: Inference<'_>,
    batch: &Batch,
) -> Result<f64> {
    Ok(crate::model::evaluate(model, inference, batch)?
        .iter()
        .map(|e| e.loss)
        .sum())
}

/// Runs a method to completion, returning the trained trainer state and one
/// report per epoch. `on_epoch` sees each report as it is produced.
pub fn run_method(
    config: TrainerConfig,
    model: MultiOutputModel,
    data: &Dataset,
    mut on_epoch: impl FnMut(&Trainer, &EpochReport) -> Result<()>,
) -> Result<(Trainer, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(config, model)?;
    let mut reports = Vec::with_capacity(trainer.config.max_epochs);
    while !trainer.done() {
        let r = trainer.step_epoch(data)?;
        on_epoch(&trainer, &r)?;
        reports.push(r);
    }
    Ok((trainer, reports))
}

/// Disentangle-and-fuse training with meta-weighted fusion.
pub fn run_drmgf(
    mut config: TrainerConfig,
    data: &Dataset,
    model: MultiOutputModel,
) -> Result<(MultiOutputModel, ImportanceSet, Vec<EpochReport>)> {
    config.method = Method::DrMgf;
    let (t, reports) = run_method(config, model, data, |_, _| Ok(()))?;
    Ok((t.model, t.importances, reports))
}
