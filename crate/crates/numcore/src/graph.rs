//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Every operation is evaluated eagerly when it is recorded, so a node's
//! parents always precede it and the list is a topological order. `backward`
//! walks the list once in reverse.

use crate::error::{contract, NumError, Result};
use crate::filters::{FilterDims, NORM_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Slot of a trainable leaf, numbered in registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(NodeId, NodeId),
    FilterNormalize {
        w: NodeId,
        norms: Vec<f64>,
    },
    LateralNormalize {
        nu: NodeId,
        roots: Vec<f64>,
    },
    FilterScale {
        field: NodeId,
        bank: NodeId,
    },
    ConvexCombine {
        weights: Vec<NodeId>,
        values: Vec<NodeId>,
        totals: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Parameter => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Dense { .. } => "dense",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Mse(..) => "mse",
            Op::FilterNormalize { .. } => "filter_normalize",
            Op::LateralNormalize { .. } => "lateral_normalize",
            Op::FilterScale { .. } => "filter_scale",
            Op::ConvexCombine { .. } => "convex_combine",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, p: ParamId) -> &Tensor {
        &self.by_param[p.0]
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.by_param
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    fallback_filters: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_node(&self, p: ParamId) -> NodeId {
        self.params[p.0]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Filters that `convex_combine` had to average uniformly because all of
    /// their weights were zero.
    pub fn fallback_filters(&self) -> usize {
        self.fallback_filters
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant, t)
    }

    pub fn parameter(&mut self, t: Tensor) -> (NodeId, ParamId) {
        let pid = ParamId(self.params.len());
        let id = self.push(Op::Parameter, t);
        self.params.push(id);
        (id, pid)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Sum of several same-shaped nodes; a single node is returned as is.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| NumError::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `x · wᵀ + b` for `x: [batch, d]`, `w: [m, ...]` with `d` inputs per
    /// output row, `b: [m]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, d) = self.value(x).dims2()?;
        let ws = self.shape_of(w);
        if ws.is_empty() {
            return contract("dense weight must have an output axis");
        }
        let m = ws[0];
        if self.value(w).len() != m * d {
            return contract(format!("dense: input width {d} vs weight shape {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape_of(b) != [m] {
                return contract(format!(
                    "dense: bias {:?} for {m} outputs",
                    self.shape_of(b)
                ));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * m];
        for r in 0..batch {
            let xr = &xv[r * d..(r + 1) * d];
            for i in 0..m {
                let wr = &wv[i * d..(i + 1) * d];
                out[r * m + i] = xr.iter().zip(wr).map(|(a, c)| a * c).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, c)| *o += c);
            }
        }
        let v = Tensor::new(vec![batch, m], out)?;
        Ok(self.push(Op::Dense { x, w, b }, v))
    }

    /// Mean softmax cross-entropy of `logits: [batch, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (batch, classes) = self.value(logits).dims2()?;
        if labels.len() != batch {
            return contract(format!("{} labels for batch {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return contract(format!("label {bad} out of {classes} classes"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for r in 0..batch {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[r * classes..(r + 1) * classes]
                .iter_mut()
                .for_each(|p| *p /= z);
            total += max + z.ln() - row[labels[r]];
        }
        let v = Tensor::scalar(total / batch as f64);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            v,
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.value(pred).sub(self.value(target))?;
        let v = Tensor::scalar(d.norm_sq() / d.len() as f64);
        Ok(self.push(Op::Mse(pred, target), v))
    }

    /// Divides every filter of a bank by `max(norm, NORM_FLOOR)`.
    pub fn filter_normalize(&mut self, w: NodeId) -> Result<NodeId> {
        let norms = crate::filters::filter_norms(self.value(w))?.into_data();
        let mut v = self.value(w).clone();
        let f = FilterDims::of(v.shape())?.filter_len;
        for (chunk, &n) in v.data_mut().chunks_exact_mut(f).zip(&norms) {
            let d = n.max(NORM_FLOOR);
            chunk.iter_mut().for_each(|x| *x /= d);
        }
        Ok(self.push(Op::FilterNormalize { w, norms }, v))
    }

    /// `nu_ij / sqrt(eps + 0.1 * sum_j nu_ij)` on a `[m, n]` field.
    pub fn lateral_normalize(&mut self, nu: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.value(nu).dims2()?;
        let data = self.value(nu).data();
        let mut roots = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in data.chunks_exact(n) {
            let inner = eps + 0.1 * row.iter().sum::<f64>();
            if inner <= 0.0 || !inner.is_finite() {
                return contract(format!("lateral normalization denominator {inner} <= 0"));
            }
            let r = inner.sqrt();
            roots.push(r);
            out.extend(row.iter().map(|v| v / r));
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::LateralNormalize { nu, roots }, v))
    }

    /// Scales each filter of `bank` by the matching entry of `field: [m, n]`.
    pub fn filter_scale(&mut self, field: NodeId, bank: NodeId) -> Result<NodeId> {
        let v = crate::filters::scale_filters(self.value(field), self.value(bank))?;
        Ok(self.push(Op::FilterScale { field, bank }, v))
    }

    /// Per-filter convex combination `sum_k a_k v_k / sum_k a_k` of filter
    /// banks `values` under nonnegative per-filter weights. Filters whose
    /// weights are all zero get the uniform mean and no weight gradient.
    pub fn convex_combine(&mut self, weights: &[NodeId], values: &[NodeId]) -> Result<NodeId> {
        if weights.is_empty() || weights.len() != values.len() {
            return contract("convex_combine needs one weight field per value");
        }
        let dims = FilterDims::of(self.shape_of(values[0]))?;
        for (&a, &v) in weights.iter().zip(values) {
            if self.shape_of(v) != self.shape_of(values[0]) {
                return contract("convex_combine values differ in shape");
            }
            if self.shape_of(a) != dims.field_shape() {
                return contract("convex_combine weight field shape mismatch");
            }
            if self.value(a).data().iter().any(|&x| x < 0.0) {
                return contract("convex_combine weights must be nonnegative");
            }
        }
        let f = dims.filter_len;
        let k = weights.len() as f64;
        let mut totals = vec![0.0; dims.filters()];
        for &a in weights {
            totals
                .iter_mut()
                .zip(self.value(a).data())
                .for_each(|(t, x)| *t += x);
        }
        let mut out = vec![0.0; dims.filters() * f];
        let mut fallbacks = 0;
        for (fi, &total) in totals.iter().enumerate() {
            let dst = &mut out[fi * f..(fi + 1) * f];
            if total > 0.0 {
                for (&a, &v) in weights.iter().zip(values) {
                    let c = self.value(a).data()[fi] / total;
                    let src = &self.value(v).data()[fi * f..(fi + 1) * f];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
                }
            } else {
                fallbacks += 1;
                for &v in values {
                    let src = &self.value(v).data()[fi * f..(fi + 1) * f];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s / k);
                }
            }
        }
        self.fallback_filters += fallbacks;
        let v = Tensor::new(self.shape_of(values[0]).to_vec(), out)?;
        Ok(self.push(
            Op::ConvexCombine {
                weights: weights.to_vec(),
                values: values.to_vec(),
                totals,
            },
            v,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every parameter. Values
    /// are left untouched.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.value.is_finite() || !up.is_finite() {
                return Err(NumError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            for (parent, g) in self.local_grads(node, &up)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
            // keep parameter gradients for collection below
            if matches!(node.op, Op::Parameter) {
                grads[idx] = Some(up);
            }
        }

        let by_param = self
            .params
            .iter()
            .map(|&id| {
                grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()))
            })
            .collect();
        Ok(Gradients { by_param })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| self.value(id);
        Ok(match &node.op {
            Op::Constant | Op::Parameter => Vec::new(),
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Sub(a, b) => vec![(*a, up.clone()), (*b, up.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, up.zip_map(val(*b), |u, y| u * y)?),
                (*b, up.zip_map(val(*a), |u, x| u * x)?),
            ],
            Op::Div(a, b) => {
                let ga = up.zip_map(val(*b), |u, y| u / y)?;
                let q = val(*a).zip_map(val(*b), |x, y| x / (y * y))?;
                vec![(*a, ga), (*b, up.zip_map(&q, |u, q| -u * q)?)]
            }
            Op::Scale(a, c) => vec![(*a, up.scale(*c))],
            Op::Square(a) => vec![(*a, up.zip_map(val(*a), |u, x| 2.0 * u * x)?)],
            Op::Sqrt(a) => vec![(*a, up.zip_map(&node.value, |u, r| u / (2.0 * r))?)],
            Op::Relu(a) => vec![(
                *a,
                up.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 })?,
            )],
            Op::Sum(a) => {
                let u = up.item()?;
                vec![(*a, Tensor::full(val(*a).shape(), u))]
            }
            Op::Mean(a) => {
                let u = up.item()? / val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), u))]
            }
            Op::Reshape(a) => vec![(*a, up.reshape(val(*a).shape())?)],
            Op::Dense { x, w, b } => {
                let (batch, d) = val(*x).dims2()?;
                let m = val(*w).shape()[0];
                let (xv, wv, uv) = (val(*x).data(), val(*w).data(), up.data());
                let mut gx = vec![0.0; batch * d];
                let mut gw = vec![0.0; m * d];
                for r in 0..batch {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gxr = &mut gx[r * d..(r + 1) * d];
                    for i in 0..m {
                        let u = uv[r * m + i];
                        if u == 0.0 {
                            continue;
                        }
                        let wr = &wv[i * d..(i + 1) * d];
                        gxr.iter_mut().zip(wr).for_each(|(g, c)| *g += u * c);
                        gw[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(xr)
                            .for_each(|(g, c)| *g += u * c);
                    }
                }
                let mut out = vec![
                    (*x, Tensor::new(vec![batch, d], gx)?),
                    (*w, Tensor::new(val(*w).shape().to_vec(), gw)?),
                ];
                if let Some(b) = b {
                    let mut gb = vec![0.0; m];
                    for row in uv.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                    out.push((*b, Tensor::new(vec![m], gb)?));
                }
                out
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let (batch, classes) = val(*logits).dims2()?;
                let scale = up.item()? / batch as f64;
                let mut g = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * classes + l] -= 1.0;
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(vec![batch, classes], g)?)]
            }
            Op::Mse(p, t) => {
                let n = val(*p).len() as f64;
                let c = 2.0 * up.item()? / n;
                let d = val(*p).sub(val(*t))?.scale(c);
                vec![(*t, d.scale(-1.0)), (*p, d)]
            }
            Op::FilterNormalize { w, norms } => {
                let f = FilterDims::of(val(*w).shape())?.filter_len;
                let mut g = up.clone();
                for ((gc, uc), &n) in g
                    .data_mut()
                    .chunks_exact_mut(f)
                    .zip(node.value.data().chunks_exact(f))
                    .zip(norms)
                {
                    if n < NORM_FLOOR {
                        gc.iter_mut().for_each(|v| *v /= NORM_FLOOR);
                    } else {
                        let proj: f64 = gc.iter().zip(uc).map(|(a, b)| a * b).sum();
                        gc.iter_mut()
                            .zip(uc)
                            .for_each(|(v, u)| *v = (*v - u * proj) / n);
                    }
                }
                vec![(*w, g)]
            }
            Op::LateralNormalize { nu, roots } => {
                let (_, n) = val(*nu).dims2()?;
                let mut g = up.clone();
                for ((gr, nr), &r) in g
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(val(*nu).data().chunks_exact(n))
                    .zip(roots)
                {
                    let coupling: f64 = gr.iter().zip(nr).map(|(u, v)| u * v).sum();
                    let c = 0.05 * coupling / (r * r * r);
                    gr.iter_mut().for_each(|v| *v = *v / r - c);
                }
                vec![(*nu, g)]
            }
            Op::FilterScale { field, bank } => {
                let f = FilterDims::of(val(*bank).shape())?.filter_len;
                let gfield: Vec<f64> = up
                    .data()
                    .chunks_exact(f)
                    .zip(val(*bank).data().chunks_exact(f))
                    .map(|(u, b)| u.iter().zip(b).map(|(x, y)| x * y).sum())
                    .collect();
                vec![
                    (*field, Tensor::new(val(*field).shape().to_vec(), gfield)?),
                    (*bank, crate::filters::scale_filters(val(*field), up)?),
                ]
            }
            Op::ConvexCombine {
                weights,
                values,
                totals,
            } => {
                let f = FilterDims::of(node.value.shape())?.filter_len;
                let k = values.len() as f64;
                let mut out = Vec::with_capacity(2 * weights.len());
                for (&a, &v) in weights.iter().zip(values) {
                    let mut ga = vec![0.0; totals.len()];
                    let mut gv = vec![0.0; node.value.len()];
                    for (fi, &total) in totals.iter().enumerate() {
                        let span = fi * f..(fi + 1) * f;
                        let u = &up.data()[span.clone()];
                        if total > 0.0 {
                            let vk = &val(v).data()[span.clone()];
                            let fused = &node.value.data()[span.clone()];
                            ga[fi] = u
                                .iter()
                                .zip(vk.iter().zip(fused))
                                .map(|(u, (x, y))| u * (x - y))
                                .sum::<f64>()
                                / total;
                            let c = val(a).data()[fi] / total;
                            gv[span].iter_mut().zip(u).for_each(|(g, u)| *g = c * u);
                        } else {
                            gv[span].iter_mut().zip(u).for_each(|(g, u)| *g = u / k);
                        }
                    }
                    out.push((a, Tensor::new(val(a).shape().to_vec(), ga)?));
                    out.push((v, Tensor::new(val(v).shape().to_vec(), gv)?));
                }
                out
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let (x, p) = g.parameter(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.backward(y).unwrap().get(p).item().unwrap(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let (_, p) = g.parameter(Tensor::vector(&[1.0, 2.0]));
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let (x, px) = g.parameter(Tensor::scalar(2.0));
        let (y, py) = g.parameter(Tensor::scalar(3.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(px).item().unwrap(), 3.0);
        assert_eq!(grads.get(py).item().unwrap(), 2.0);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let (x, p) = g.parameter(Tensor::scalar(1.5));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        assert_eq!(g.backward(z).unwrap().get(p).item().unwrap(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let (x, _) = g.parameter(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NumError::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut g = Graph::new();
        let (x, _) = g.parameter(Tensor::scalar(-1.0));
        let r = g.sqrt(x);
        let err = g.backward(r).unwrap_err();
        match err {
            NumError::NonFinite { node, op } => {
                assert_eq!(node, r.index());
                assert_eq!(op, "sqrt");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convex_combine_falls_back_on_zero_weights() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[&[0.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::matrix(&[&[0.0, 1.0]]).unwrap());
        let va = g.constant(Tensor::matrix(&[&[1.0, 3.0]]).unwrap());
        let vb = g.constant(Tensor::matrix(&[&[3.0, -3.0]]).unwrap());
        let out = g.convex_combine(&[a, b], &[va, vb]).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 1.0]);
        assert_eq!(g.fallback_filters(), 1);
    }
}
