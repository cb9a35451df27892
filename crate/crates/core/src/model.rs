//! Multi-output networks: a shared trunk, one head per task, per-task
//! importance fields on the shared filters, and the importance-augmented
//! ("route") forward pass.
//!
//! A trunk layer is *shared* when at least two heads read through it. Only
//! shared layers carry importance fields; a trunk layer with a single reader
//! is owned by that task and treated like part of its head.

use std::io::{Read, Write};

use numcore::filters::{filter_norms, FilterDims};
use numcore::{Graph, NodeId, ParamId, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{contract, Error, Result};

/// Default `eps` of the lateral normalization.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Number of trunk layers the head reads through (1-based depth).
    pub attach_depth: usize,
    /// Hidden widths inside the head, before the output layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub outputs: usize,
}

/// Dense multi-output network. Trunk layer weights are filter banks
/// `[out, in_features / s², s, s]`; `s = filter_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub trunk_widths: Vec<usize>,
    pub filter_size: usize,
    pub heads: Vec<HeadSpec>,
}

impl NetSpec {
    /// `tasks` exits, the k-th attached after trunk layer k (1-based).
    pub fn multi_exit(
        input_dim: usize,
        width: usize,
        tasks: usize,
        classes: usize,
        filter_size: usize,
    ) -> Self {
        Self {
            input_dim,
            trunk_widths: vec![width; tasks],
            filter_size,
            heads: (1..=tasks)
                .map(|d| HeadSpec {
                    attach_depth: d,
                    hidden: Vec::new(),
                    outputs: classes,
                })
                .collect(),
        }
    }

    /// `classes.len()` heads on top of a trunk of `depth` layers.
    pub fn multi_task(
        input_dim: usize,
        width: usize,
        depth: usize,
        classes: &[usize],
        filter_size: usize,
    ) -> Self {
        Self {
            input_dim,
            trunk_widths: vec![width; depth],
            filter_size,
            heads: classes
                .iter()
                .map(|&c| HeadSpec {
                    attach_depth: depth,
                    hidden: Vec::new(),
                    outputs: c,
                })
                .collect(),
        }
    }
}

/// Convex quadratic two-parameter-style landscape: task `k` has loss
/// `½‖A_k e + b_k θ_k − c_k‖²` over the shared weights `e` (one scalar filter
/// per shared parameter) and a scalar head `θ_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticLandscape {
    /// `A_k`, row-major, `rows x shared` each.
    pub design: Vec<Vec<Vec<f64>>>,
    pub head_coef: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub init_shared: Vec<f64>,
    pub init_heads: Vec<f64>,
}

impl QuadraticLandscape {
    pub fn shared_params(&self) -> usize {
        self.init_shared.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Topology {
    Network(NetSpec),
    Quadratic(QuadraticLandscape),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub weight: Vec<usize>,
    pub bias: Option<usize>,
}

impl Topology {
    pub fn num_tasks(&self) -> usize {
        match self {
            Topology::Network(n) => n.heads.len(),
            Topology::Quadratic(q) => q.design.len(),
        }
    }

    pub fn trunk_depth(&self) -> usize {
        match self {
            Topology::Network(n) => n.trunk_widths.len(),
            Topology::Quadratic(_) => 1,
        }
    }

    /// Trunk layers on task `k`'s path.
    pub fn task_depth(&self, k: usize) -> usize {
        match self {
            Topology::Network(n) => n.heads[k].attach_depth,
            Topology::Quadratic(_) => 1,
        }
    }

    pub fn uses_layer(&self, k: usize, layer: usize) -> bool {
        layer < self.task_depth(k)
    }

    /// Tasks whose path runs through trunk layer `layer`.
    pub fn layer_users(&self, layer: usize) -> Vec<usize> {
        (0..self.num_tasks())
            .filter(|&k| self.uses_layer(k, layer))
            .collect()
    }

    pub fn is_shared(&self, layer: usize) -> bool {
        self.layer_users(layer).len() >= 2
    }

    pub fn shared_layers(&self) -> Vec<usize> {
        (0..self.trunk_depth())
            .filter(|&j| self.is_shared(j))
            .collect()
    }

    /// The single task reading an unshared trunk layer.
    pub fn exclusive_owner(&self, layer: usize) -> Option<usize> {
        match self.layer_users(layer).as_slice() {
            &[k] => Some(k),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks() == 0 {
            return contract("topology has no tasks");
        }
        match self {
            Topology::Network(n) => {
                let s2 = n.filter_size * n.filter_size;
                if n.filter_size == 0 || n.trunk_widths.is_empty() {
                    return contract("network needs a trunk and a positive filter size");
                }
                let mut fan_in = n.input_dim;
                for (j, &w) in n.trunk_widths.iter().enumerate() {
                    if w == 0 || fan_in % s2 != 0 {
                        return contract(format!(
                            "trunk layer {j}: {fan_in} inputs not divisible into {s2}-element filters"
                        ));
                    }
                    fan_in = w;
                }
                for (k, h) in n.heads.iter().enumerate() {
                    if h.attach_depth == 0
                        || h.attach_depth > n.trunk_widths.len()
                        || h.outputs == 0
                    {
                        return contract(format!(
                            "head {k} attaches at invalid depth {}",
                            h.attach_depth
                        ));
                    }
                }
                if (0..n.trunk_widths.len()).any(|j| self.layer_users(j).is_empty()) {
                    return contract("some trunk layer feeds no head");
                }
            }
            Topology::Quadratic(q) => {
                let p = q.shared_params();
                let k = q.design.len();
                if p == 0
                    || q.head_coef.len() != k
                    || q.targets.len() != k
                    || q.init_heads.len() != k
                {
                    return contract("quadratic landscape arrays disagree on task count");
                }
                for t in 0..k {
                    let rows = q.design[t].len();
                    if rows == 0
                        || q.design[t].iter().any(|r| r.len() != p)
                        || q.head_coef[t].len() != rows
                        || q.targets[t].len() != rows
                    {
                        return contract(format!("quadratic task {t} has inconsistent shapes"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn trunk_shapes(&self) -> Vec<LayerShape> {
        match self {
            Topology::Network(n) => {
                let s = n.filter_size;
                let mut fan_in = n.input_dim;
                n.trunk_widths
                    .iter()
                    .map(|&w| {
                        let shape = LayerShape {
                            weight: vec![w, fan_in / (s * s), s, s],
                            bias: Some(w),
                        };
                        fan_in = w;
                        shape
                    })
                    .collect()
            }
            Topology::Quadratic(q) => vec![LayerShape {
                weight: vec![q.shared_params(), 1, 1, 1],
                bias: None,
            }],
        }
    }

    pub fn head_shapes(&self, k: usize) -> Vec<LayerShape> {
        match self {
            Topology::Network(n) => {
                let h = &n.heads[k];
                let mut fan_in = n.trunk_widths[h.attach_depth - 1];
                h.hidden
                    .iter()
                    .chain(std::iter::once(&h.outputs))
                    .map(|&w| {
                        let shape = LayerShape {
                            weight: vec![w, fan_in, 1, 1],
                            bias: Some(w),
                        };
                        fan_in = w;
                        shape
                    })
                    .collect()
            }
            Topology::Quadratic(_) => vec![LayerShape {
                weight: vec![1, 1, 1, 1],
                bias: None,
            }],
        }
    }

    /// Shape of task `k`'s importance field on trunk layer `layer`, if any.
    pub fn importance_shape(&self, k: usize, layer: usize) -> Option<[usize; 2]> {
        if !self.is_shared(layer) || !self.uses_layer(k, layer) {
            return None;
        }
        let w = &self.trunk_shapes()[layer].weight;
        Some([w[0], w[1]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Names one trainable tensor of a model or importance set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRef {
    TrunkWeight(usize),
    TrunkBias(usize),
    HeadWeight(usize, usize),
    HeadBias(usize, usize),
    Importance(usize, usize),
}

impl ParamRef {
    pub fn is_importance(self) -> bool {
        matches!(self, ParamRef::Importance(..))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiOutputModel {
    pub topology: Topology,
    pub trunk: Vec<DenseLayer>,
    pub heads: Vec<Vec<DenseLayer>>,
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect())
        .expect("shape/data agree")
}

impl MultiOutputModel {
    /// Kaiming-normal weights, zero biases. Quadratic landscapes start from
    /// their declared initial point.
    pub fn init(topology: Topology, rng: &mut Rng) -> Result<Self> {
        topology.validate()?;
        let layer = |s: &LayerShape, rng: &mut Rng| {
            let fan_in: usize = s.weight[1..].iter().product();
            DenseLayer {
                weight: kaiming(&s.weight, fan_in, rng),
                bias: s.bias.map(|b| Tensor::zeros(&[b])),
            }
        };
        let (trunk, heads) = match &topology {
            Topology::Network(_) => {
                let trunk = topology
                    .trunk_shapes()
                    .iter()
                    .map(|s| layer(s, rng))
                    .collect();
                let heads = (0..topology.num_tasks())
                    .map(|k| {
                        topology
                            .head_shapes(k)
                            .iter()
                            .map(|s| layer(s, rng))
                            .collect()
                    })
                    .collect();
                (trunk, heads)
            }
            Topology::Quadratic(q) => {
                let p = q.shared_params();
                let trunk = vec![DenseLayer {
                    weight: Tensor::new(vec![p, 1, 1, 1], q.init_shared.clone())?,
                    bias: None,
                }];
                let heads = q
                    .init_heads
                    .iter()
                    .map(|&h| {
                        vec![DenseLayer {
                            weight: Tensor::full(&[1, 1, 1, 1], h),
                            bias: None,
                        }]
                    })
                    .collect();
                (trunk, heads)
            }
        };
        Ok(Self {
            topology,
            trunk,
            heads,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.topology.num_tasks()
    }

    /// Every model tensor, in a fixed order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (j, l) in self.trunk.iter().enumerate() {
            out.push(ParamRef::TrunkWeight(j));
            if l.bias.is_some() {
                out.push(ParamRef::TrunkBias(j));
            }
        }
        for (k, head) in self.heads.iter().enumerate() {
            for (l, layer) in head.iter().enumerate() {
                out.push(ParamRef::HeadWeight(k, l));
                if layer.bias.is_some() {
                    out.push(ParamRef::HeadBias(k, l));
                }
            }
        }
        out
    }

    pub fn get(&self, r: ParamRef) -> Option<&Tensor> {
        match r {
            ParamRef::TrunkWeight(j) => self.trunk.get(j).map(|l| &l.weight),
            ParamRef::TrunkBias(j) => self.trunk.get(j).and_then(|l| l.bias.as_ref()),
            ParamRef::HeadWeight(k, l) => self.heads.get(k)?.get(l).map(|l| &l.weight),
            ParamRef::HeadBias(k, l) => self.heads.get(k)?.get(l)?.bias.as_ref(),
            ParamRef::Importance(..) => None,
        }
    }

    pub fn get_mut(&mut self, r: ParamRef) -> Option<&mut Tensor> {
        match r {
            ParamRef::TrunkWeight(j) => self.trunk.get_mut(j).map(|l| &mut l.weight),
            ParamRef::TrunkBias(j) => self.trunk.get_mut(j).and_then(|l| l.bias.as_mut()),
            ParamRef::HeadWeight(k, l) => self.heads.get_mut(k)?.get_mut(l).map(|l| &mut l.weight),
            ParamRef::HeadBias(k, l) => self.heads.get_mut(k)?.get_mut(l)?.bias.as_mut(),
            ParamRef::Importance(..) => None,
        }
    }

    /// Parameters that belong to task `k` alone: its head plus any trunk
    /// layer it reads exclusively.
    pub fn owned_by(&self, k: usize) -> Vec<ParamRef> {
        self.param_refs()
            .into_iter()
            .filter(|r| match *r {
                ParamRef::HeadWeight(t, _) | ParamRef::HeadBias(t, _) => t == k,
                ParamRef::TrunkWeight(j) | ParamRef::TrunkBias(j) => {
                    self.topology.exclusive_owner(j) == Some(k)
                }
                ParamRef::Importance(..) => false,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_refs()
            .into_iter()
            .all(|r| self.get(r).is_some_and(Tensor::is_finite))
    }
}

/// How importance fields are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ImportanceInit {
    /// `|N(0, 2/n)|` with `n` input channels.
    KaimingAbs,
    Constant(f64),
    /// Chosen so the route weights reproduce the current trunk weights.
    Reconstruct,
}

/// Per-task importance fields `ν_k`, one `[m, n]` tensor per shared layer on
/// the task's path (`None` elsewhere).
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSet {
    pub fields: Vec<Vec<Option<Tensor>>>,
}

impl ImportanceSet {
    pub fn init(
        model: &MultiOutputModel,
        how: ImportanceInit,
        eps: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let topo = &model.topology;
        let mut fields = Vec::with_capacity(topo.num_tasks());
        for k in 0..topo.num_tasks() {
            let mut per_layer = Vec::with_capacity(topo.trunk_depth());
            for j in 0..topo.trunk_depth() {
                let field = match topo.importance_shape(k, j) {
                    None => None,
                    Some(shape) => Some(match how {
                        ImportanceInit::KaimingAbs => {
                            let std = (2.0 / shape[1] as f64).sqrt();
                            Tensor::new(
                                shape.to_vec(),
                                (0..shape[0] * shape[1])
                                    .map(|_| (std * rng.normal()).abs())
                                    .collect(),
                            )?
                        }
                        ImportanceInit::Constant(c) => {
                            if c < 0.0 {
                                return contract("importance must be nonnegative");
                            }
                            Tensor::full(&shape, c)
                        }
                        ImportanceInit::Reconstruct => {
                            identity_reconstruction(&model.trunk[j].weight, eps)?
                        }
                    }),
                };
                per_layer.push(field);
            }
            fields.push(per_layer);
        }
        Ok(Self { fields })
    }

    pub fn num_tasks(&self) -> usize {
        self.fields.len()
    }

    pub fn get(&self, k: usize, layer: usize) -> Option<&Tensor> {
        self.fields.get(k)?.get(layer)?.as_ref()
    }

    pub fn get_mut(&mut self, k: usize, layer: usize) -> Option<&mut Tensor> {
        self.fields.get_mut(k)?.get_mut(layer)?.as_mut()
    }

    /// Refs of task `k`'s fields.
    pub fn refs(&self, k: usize) -> Vec<ParamRef> {
        self.fields[k]
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some())
            .map(|(j, _)| ParamRef::Importance(k, j))
            .collect()
    }

    pub fn clamp_nonnegative(&mut self) {
        for f in self.fields.iter_mut().flatten().flatten() {
            f.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    /// `l_k = Σ ν²` over all of task `k`'s fields.
    pub fn decay_loss(&self, k: usize) -> f64 {
        self.fields[k].iter().flatten().map(Tensor::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.fields
            .iter()
            .flatten()
            .flatten()
            .all(Tensor::is_finite)
    }
}

/// `ν_ij / sqrt(eps + 0.1 Σ_j ν_ij)` row by row.
pub fn lateral_normalize(nu: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, n) = nu.dims2()?;
    if nu.data().iter().any(|&v| v < 0.0) {
        return contract("importance entries must be nonnegative");
    }
    if !(eps > 0.0)
        && nu
            .data()
            .chunks_exact(n)
            .any(|r| r.iter().all(|&v| v == 0.0))
    {
        return contract("eps must be positive when a row is all zero");
    }
    let mut out = nu.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let r = (eps + 0.1 * row.iter().sum::<f64>()).sqrt();
        row.iter_mut().for_each(|v| *v /= r);
    }
    Ok(out)
}

/// `l_k` for a single field list.
pub fn importance_decay_loss(fields: &[&Tensor]) -> f64 {
    fields.iter().map(|f| f.norm_sq()).sum()
}

/// Importance whose lateral normalization equals the per-filter norms of
/// `w`, so the route weights reproduce `w` exactly.
pub fn identity_reconstruction(w: &Tensor, eps: f64) -> Result<Tensor> {
    let target = filter_norms(w)?;
    let (_, n) = target.dims2()?;
    let mut out = target.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        // Row sum S solves S = T sqrt(eps + 0.1 S).
        let t: f64 = row.iter().sum();
        let s = 0.5 * (0.1 * t * t + (0.01 * t.powi(4) + 4.0 * eps * t * t).sqrt());
        let r = (eps + 0.1 * s).sqrt();
        row.iter_mut().for_each(|v| *v *= r);
    }
    Ok(out)
}

/// Per-layer effective weights `ν̂_k ⊙ w/‖w‖` of task `k` (`None` for layers
/// without a field).
pub fn effective_weights(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    eps: f64,
) -> Result<Vec<Option<Tensor>>> {
    model
        .trunk
        .iter()
        .enumerate()
        .map(|(j, layer)| match imps.get(k, j) {
            None => Ok(None),
            Some(nu) => {
                let hat = lateral_normalize(nu, eps)?;
                let unit = numcore::filter_normalize(&layer.weight)?.weights;
                Ok(Some(numcore::filters::scale_filters(&hat, &unit)?))
            }
        })
        .collect()
}

/// Copy of `model` whose trunk carries task `k`'s route weights, for
/// importance-free deployment of that task.
pub fn bake_route(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    eps: f64,
) -> Result<MultiOutputModel> {
    let mut out = model.clone();
    for (j, w) in effective_weights(model, imps, k, eps)?
        .into_iter()
        .enumerate()
    {
        if let Some(w) = w {
            out.trunk[j].weight = w;
        }
    }
    Ok(out)
}

/// Graph nodes for every model tensor.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub trunk_w: Vec<NodeId>,
    pub trunk_b: Vec<Option<NodeId>>,
    pub heads: Vec<Vec<(NodeId, Option<NodeId>)>>,
    /// Registered trainable tensors, in `ParamId` order.
    pub params: Vec<(ParamId, ParamRef)>,
}

impl BoundModel {
    pub fn node(&self, r: ParamRef) -> Option<NodeId> {
        match r {
            ParamRef::TrunkWeight(j) => self.trunk_w.get(j).copied(),
            ParamRef::TrunkBias(j) => self.trunk_b.get(j).copied().flatten(),
            ParamRef::HeadWeight(k, l) => self.heads.get(k)?.get(l).map(|p| p.0),
            ParamRef::HeadBias(k, l) => self.heads.get(k)?.get(l)?.1,
            ParamRef::Importance(..) => None,
        }
    }
}

fn leaf(
    g: &mut Graph,
    t: &Tensor,
    r: ParamRef,
    trainable: &dyn Fn(ParamRef) -> bool,
    params: &mut Vec<(ParamId, ParamRef)>,
) -> NodeId {
    if trainable(r) {
        let (id, pid) = g.parameter(t.clone());
        params.push((pid, r));
        id
    } else {
        g.constant(t.clone())
    }
}

/// Places the model in `g`, registering the tensors selected by `trainable`
/// as parameters and the rest as constants.
pub fn bind(
    g: &mut Graph,
    model: &MultiOutputModel,
    trainable: &dyn Fn(ParamRef) -> bool,
) -> BoundModel {
    let mut params = Vec::new();
    let mut trunk_w = Vec::new();
    let mut trunk_b = Vec::new();
    for (j, l) in model.trunk.iter().enumerate() {
        trunk_w.push(leaf(
            g,
            &l.weight,
            ParamRef::TrunkWeight(j),
            trainable,
            &mut params,
        ));
        trunk_b.push(
            l.bias
                .as_ref()
                .map(|b| leaf(g, b, ParamRef::TrunkBias(j), trainable, &mut params)),
        );
    }
    let heads = model
        .heads
        .iter()
        .enumerate()
        .map(|(k, head)| {
            head.iter()
                .enumerate()
                .map(|(l, layer)| {
                    let w = leaf(
                        g,
                        &layer.weight,
                        ParamRef::HeadWeight(k, l),
                        trainable,
                        &mut params,
                    );
                    let b = layer
                        .bias
                        .as_ref()
                        .map(|b| leaf(g, b, ParamRef::HeadBias(k, l), trainable, &mut params));
                    (w, b)
                })
                .collect()
        })
        .collect();
    BoundModel {
        trunk_w,
        trunk_b,
        heads,
        params,
    }
}

/// Places task `k`'s importance fields in `g`.
pub fn bind_importances(
    g: &mut Graph,
    imps: &ImportanceSet,
    k: usize,
    trainable: bool,
    params: &mut Vec<(ParamId, ParamRef)>,
) -> Vec<Option<NodeId>> {
    imps.fields[k]
        .iter()
        .enumerate()
        .map(|(j, f)| {
            f.as_ref()
                .map(|t| leaf(g, t, ParamRef::Importance(k, j), &|_| trainable, params))
        })
        .collect()
}

/// Trunk weights of a route: layers with an importance field use
/// `lateral_normalize(ν) ⊙ w/‖w‖`, the rest use `w` verbatim.
pub fn route_weights(
    g: &mut Graph,
    bound: &BoundModel,
    fields: &[Option<NodeId>],
    eps: f64,
) -> Result<Vec<NodeId>> {
    bound
        .trunk_w
        .iter()
        .zip(fields)
        .map(|(&w, nu)| match nu {
            None => Ok(w),
            Some(nu) => {
                let hat = g.lateral_normalize(*nu, eps)?;
                let unit = g.filter_normalize(w)?;
                Ok(g.filter_scale(hat, unit)?)
            }
        })
        .collect()
}

/// Outputs of `tasks` when the trunk uses `trunk_weights`.
pub fn task_outputs(
    g: &mut Graph,
    topology: &Topology,
    bound: &BoundModel,
    trunk_weights: &[NodeId],
    tasks: &[usize],
    batch: &Batch,
) -> Result<Vec<NodeId>> {
    match topology {
        Topology::Network(_) => {
            let depth = tasks
                .iter()
                .map(|&k| topology.task_depth(k))
                .max()
                .unwrap_or(0);
            let mut acts = Vec::with_capacity(depth);
            let mut h = g.constant(batch.x.clone());
            for j in 0..depth {
                let z = g.dense(h, trunk_weights[j], bound.trunk_b[j])?;
                h = g.relu(z);
                acts.push(h);
            }
            tasks
                .iter()
                .map(|&k| {
                    let mut h = acts[topology.task_depth(k) - 1];
                    let head = &bound.heads[k];
                    for (l, &(w, b)) in head.iter().enumerate() {
                        h = g.dense(h, w, b)?;
                        if l + 1 < head.len() {
                            h = g.relu(h);
                        }
                    }
                    Ok(h)
                })
                .collect()
        }
        Topology::Quadratic(q) => {
            let p = q.shared_params();
            let shared = g.reshape(trunk_weights[0], &[1, p])?;
            tasks
                .iter()
                .map(|&k| {
                    let rows = q.design[k].len();
                    let a = Tensor::new(vec![rows, p], q.design[k].concat())?;
                    let a = g.constant(a);
                    let b = g.constant(Tensor::new(vec![rows, 1], q.head_coef[k].clone())?);
                    let ae = g.dense(a, shared, None)?;
                    let bt = g.dense(b, bound.heads[k][0].0, None)?;
                    Ok(g.add(ae, bt)?)
                })
                .collect()
        }
    }
}

/// Loss of task `k` given its output node.
pub fn task_loss(
    g: &mut Graph,
    topology: &Topology,
    output: NodeId,
    batch: &Batch,
    k: usize,
) -> Result<NodeId> {
    match topology {
        Topology::Network(_) => Ok(g.softmax_cross_entropy(output, batch.task_labels(k))?),
        Topology::Quadratic(q) => {
            let rows = q.targets[k].len();
            let c = g.constant(Tensor::new(vec![rows, 1], q.targets[k].clone())?);
            let mse = g.mse(output, c)?;
            Ok(g.scale(mse, 0.5 * rows as f64))
        }
    }
}

fn everything_fixed(_: ParamRef) -> bool {
    false
}

/// Task `k`'s output on raw trunk weights.
pub fn plain_forward(model: &MultiOutputModel, k: usize, batch: &Batch) -> Result<Tensor> {
    check_task(model, k)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, model, &everything_fixed);
    let w = bound.trunk_w.clone();
    let out = task_outputs(&mut g, &model.topology, &bound, &w, &[k], batch)?;
    Ok(g.value(out[0]).clone())
}

/// Task `k`'s output along its importance-weighted route.
pub fn forward_task(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    batch: &Batch,
    eps: f64,
) -> Result<Tensor> {
    check_task(model, k)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, model, &everything_fixed);
    let mut unused = Vec::new();
    let fields = bind_importances(&mut g, imps, k, false, &mut unused);
    let w = route_weights(&mut g, &bound, &fields, eps)?;
    let out = task_outputs(&mut g, &model.topology, &bound, &w, &[k], batch)?;
    Ok(g.value(out[0]).clone())
}

fn check_task(model: &MultiOutputModel, k: usize) -> Result<()> {
    if k >= model.num_tasks() {
        return contract(format!(
            "task {k} out of range ({} tasks)",
            model.num_tasks()
        ));
    }
    Ok(())
}

/// Which weights each task sees at inference.
#[derive(Debug, Clone, Copy)]
pub enum Inference<'a> {
    Plain,
    Routes {
        importances: &'a ImportanceSet,
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub loss: f64,
    /// Top-1 accuracy; `None` for regression landscapes.
    pub accuracy: Option<f64>,
}

/// Per-task loss and accuracy on `batch`.
pub fn evaluate(
    model: &MultiOutputModel,
    inference: Inference<'_>,
    batch: &Batch,
) -> Result<Vec<TaskEval>> {
    (0..model.num_tasks())
        .map(|k| {
            let mut g = Graph::new();
            let bound = bind(&mut g, model, &everything_fixed);
            let w = match inference {
                Inference::Plain => bound.trunk_w.clone(),
                Inference::Routes { importances, eps } => {
                    let mut unused = Vec::new();
                    let fields = bind_importances(&mut g, importances, k, false, &mut unused);
                    route_weights(&mut g, &bound, &fields, eps)?
                }
            };
            let out = task_outputs(&mut g, &model.topology, &bound, &w, &[k], batch)?[0];
            let loss = task_loss(&mut g, &model.topology, out, batch, k)?;
            let accuracy = match model.topology {
                Topology::Network(_) => Some(accuracy(g.value(out), batch.task_labels(k))?),
                Topology::Quadratic(_) => None,
            };
            Ok(TaskEval {
                loss: g.value(loss).item()?,
                accuracy,
            })
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logits.dims2()?;
    if rows != labels.len() {
        return contract("accuracy: label count mismatch");
    }
    let hits = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == l
        })
        .count();
    Ok(hits as f64 / rows as f64)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DRMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    topology: Topology,
    /// Tensor names in payload order.
    tensors: Vec<String>,
}

/// Writes a model (and optionally its importances) as
/// `magic, u32 version, u32 header length, JSON header, tensors...`, every
/// tensor in the numcore container format.
pub fn write_checkpoint<W: Write>(
    out: &mut W,
    model: &MultiOutputModel,
    imps: Option<&ImportanceSet>,
) -> Result<()> {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for r in model.param_refs() {
        names.push(format!("{r:?}"));
        tensors.push(model.get(r).expect("listed ref exists"));
    }
    if let Some(imps) = imps {
        for (k, per) in imps.fields.iter().enumerate() {
            for (j, f) in per.iter().enumerate() {
                if let Some(f) = f {
                    names.push(format!("{:?}", ParamRef::Importance(k, j)));
                    tensors.push(f);
                }
            }
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        topology: model.topology.clone(),
        tensors: names,
    })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for t in tensors {
        numcore::io::write_tensor(out, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(
    input: &mut R,
) -> Result<(MultiOutputModel, Option<ImportanceSet>)> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if &word != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    input.read_exact(&mut word)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;

    let mut model = MultiOutputModel::init(header.topology.clone(), &mut Rng::new(0))?;
    let refs = model.param_refs();
    let mut imps: Option<ImportanceSet> = None;
    for (i, name) in header.tensors.iter().enumerate() {
        let t = numcore::io::read_tensor(input)?;
        if let Some(r) = refs.get(i) {
            if &format!("{r:?}") != name {
                return Err(Error::Format(format!(
                    "tensor {i} is {name}, expected {r:?}"
                )));
            }
            let slot = model.get_mut(*r).expect("listed ref exists");
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        } else {
            let set = imps.get_or_insert_with(|| ImportanceSet {
                fields: (0..model.num_tasks())
                    .map(|_| vec![None; model.trunk.len()])
                    .collect(),
            });
            let (k, j) = parse_importance_name(name)?;
            if model.topology.importance_shape(k, j).map(|s| s.to_vec()) != Some(t.shape().to_vec())
            {
                return Err(Error::Format(format!(
                    "{name}: unexpected importance shape {:?}",
                    t.shape()
                )));
            }
            set.fields[k][j] = Some(t);
        }
    }
    if header.tensors.len() < refs.len() {
        return Err(Error::Format("checkpoint is missing model tensors".into()));
    }
    Ok((model, imps))
}

fn parse_importance_name(name: &str) -> Result<(usize, usize)> {
    let inner = name
        .strip_prefix("Importance(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
    let mut it = inner.split(", ").map(str::parse::<usize>);
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(k)), Some(Ok(j)), None) => Ok((k, j)),
        _ => Err(Error::Format(format!("bad importance tensor name {name}"))),
    }
}

/// Rescales every filter of shared layer `layer` by its own positive factor.
pub fn rescale_filters(w: &Tensor, factors: &Tensor) -> Result<Tensor> {
    let dims = FilterDims::of(w.shape())?;
    if factors.len() != dims.filters() || factors.data().iter().any(|&c| c <= 0.0) {
        return contract("one positive factor per filter required");
    }
    Ok(numcore::filters::scale_filters(
        &factors.reshape(&dims.field_shape())?,
        w,
    )?)
}
