//! Gradient-conflict, convergence-gain and importance measurements, pruning
//! studies, structure similarity and the Δm summary.

use numcore::filters::{filter_norms, FilterDims};
use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{contract, Error, Result};
use crate::model::{
    bake_route, bind, bind_importances, evaluate, route_weights, task_loss, task_outputs,
    ImportanceSet, Inference, MultiOutputModel, ParamRef,
};

/// Filter slices of a list of banks, in order.
fn filters(banks: &[Tensor]) -> Result<Vec<&[f64]>> {
    let mut out = Vec::new();
    for b in banks {
        let d = FilterDims::of(b.shape())?;
        out.extend(b.data().chunks_exact(d.filter_len));
    }
    Ok(out)
}

/// `Σ_i max(0, −g1_iᵀ g2_i) / ‖g1‖²` over the filters `i` of the given
/// banks.
pub fn conflict_value(g1: &[Tensor], g2: &[Tensor]) -> Result<f64> {
    if g1.len() != g2.len() || g1.iter().zip(g2).any(|(a, b)| a.shape() != b.shape()) {
        return contract("conflict_value: gradient shapes differ");
    }
    let n1: f64 = g1.iter().map(Tensor::norm_sq).sum();
    if n1 == 0.0 {
        return contract("conflict_value: first gradient is zero");
    }
    let hinge: f64 = filters(g1)?
        .into_iter()
        .zip(filters(g2)?)
        .map(|(a, b)| (-a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).max(0.0))
        .sum();
    Ok(hinge / n1)
}

/// `(Δf(g1+g2) − Δf(g1)) / Δf(g1)` from trial steps `w − η g`. `None` when
/// the single-gradient step leaves the loss unchanged.
pub fn convergence_gain<F>(
    mut loss: F,
    w: &[Tensor],
    g1: &[Tensor],
    g2: &[Tensor],
    eta: f64,
) -> Result<Option<f64>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if w.len() != g1.len() || w.len() != g2.len() {
        return contract("convergence_gain: operand lists differ in length");
    }
    let base = loss(w)?;
    let step = |both: bool| -> Result<Vec<Tensor>> {
        w.iter()
            .zip(g1)
            .zip(g2)
            .map(|((p, a), b)| {
                let mut q = p.clone();
                q.axpy(-eta, a)?;
                if both {
                    q.axpy(-eta, b)?;
                }
                Ok(q)
            })
            .collect()
    };
    let d1 = loss(&step(false)?)? - base;
    let d12 = loss(&step(true)?)? - base;
    if d1 == 0.0 || !d1.is_finite() {
        return Ok(None);
    }
    Ok(Some((d12 - d1) / d1))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard score with the population standard deviation.
pub fn zscore(series: &[f64], name: &str) -> Result<Vec<f64>> {
    if series.len() < 2 {
        return contract(format!("series {name} needs at least two samples"));
    }
    let (mean, std) = mean_std(series);
    if std == 0.0 || !std.is_finite() {
        return contract(format!("series {name} has zero spread"));
    }
    Ok(series.iter().map(|x| (x - mean) / std).collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract("pearson: series lengths differ");
    }
    let za = zscore(a, "a")?;
    let zb = zscore(b, "b")?;
    let r = za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64;
    Ok(r.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AccumulatedGradient,
    Learned,
}

/// Per task, one nonnegative score per shared filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub provenance: Provenance,
    pub rows: Vec<Vec<f64>>,
}

/// `(Σ_t n_t,i)² / Σ_i (Σ_t n_t,i)²` from per-step filter gradient norms
/// `n[t][i]`. The flag reports an all-zero accumulation, which yields the
/// uniform profile.
pub fn accumulate_importance(norms: &[Vec<f64>]) -> Result<(Vec<f64>, bool)> {
    let first = norms
        .first()
        .ok_or_else(|| Error::Contract("no steps recorded".into()))?;
    let n = first.len();
    if n == 0 || norms.iter().any(|r| r.len() != n) {
        return contract("every step needs one norm per filter");
    }
    let mut acc = vec![0.0; n];
    for row in norms {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    let sq: Vec<f64> = acc.iter().map(|a| a * a).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return Ok((vec![1.0 / n as f64; n], true));
    }
    Ok((sq.iter().map(|s| s / total).collect(), false))
}

/// Learned profile: per shared filter, task `k`'s share `ν_k / Σ_k ν_k` of
/// the importance mass (zero where the task has no field).
pub fn learned_profile(model: &MultiOutputModel, imps: &ImportanceSet) -> ImportanceProfile {
    let topo = &model.topology;
    let mut rows = vec![Vec::new(); topo.num_tasks()];
    for j in topo.shared_layers() {
        let users = topo.layer_users(j);
        let n = topo
            .importance_shape(users[0], j)
            .map_or(0, |s| s[0] * s[1]);
        for i in 0..n {
            let total: f64 = users
                .iter()
                .filter_map(|&k| imps.get(k, j))
                .map(|f| f.data()[i])
                .sum();
            for (k, row) in rows.iter_mut().enumerate() {
                let v = imps.get(k, j).map_or(0.0, |f| f.data()[i]);
                row.push(if total > 0.0 { v / total } else { 0.0 });
            }
        }
    }
    ImportanceProfile {
        provenance: Provenance::Learned,
        rows,
    }
}

/// Per-filter norms of each task's gradient on the shared layers, flattened
/// in shared-layer order (zero for layers off the task's path).
pub fn shared_filter_grad_norms(model: &MultiOutputModel, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let topo = &model.topology;
    let shared = topo.shared_layers();
    let grads = shared_grads(model, batch, &shared)?;
    grads
        .iter()
        .map(|per_layer| {
            let mut out = Vec::new();
            for (t, &j) in per_layer.iter().zip(&shared) {
                let w = &model.trunk[j].weight;
                match t {
                    Some(g) => out.extend_from_slice(filter_norms(g)?.data()),
                    None => out.extend(std::iter::repeat_n(
                        0.0,
                        w.len() / FilterDims::of(w.shape())?.filter_len,
                    )),
                }
            }
            Ok(out)
        })
        .collect()
}

/// Gradient of each task's loss with respect to the trunk weights of
/// `layers` (plain forward); `None` for layers off the task's path.
pub fn shared_grads(
    model: &MultiOutputModel,
    batch: &Batch,
    layers: &[usize],
) -> Result<Vec<Vec<Option<Tensor>>>> {
    let topo = &model.topology;
    let mut g = numcore::Graph::new();
    let bound = bind(
        &mut g,
        model,
        &|r| matches!(r, crate::model::ParamRef::TrunkWeight(j) if layers.contains(&j)),
    );
    let tasks: Vec<usize> = (0..topo.num_tasks()).collect();
    let w = bound.trunk_w.clone();
    let outs = task_outputs(&mut g, topo, &bound, &w, &tasks, batch)?;
    let mut result = Vec::with_capacity(tasks.len());
    for &k in &tasks {
        let l = task_loss(&mut g, topo, outs[k], batch, k)?;
        let grads = g.backward(l)?;
        let by_ref: std::collections::BTreeMap<_, _> = bound
            .params
            .iter()
            .map(|&(p, r)| (r, grads.get(p).clone()))
            .collect();
        result.push(
            layers
                .iter()
                .map(|&j| {
                    topo.uses_layer(k, j)
                        .then(|| by_ref[&crate::model::ParamRef::TrunkWeight(j)].clone())
                })
                .collect(),
        );
    }
    Ok(result)
}

/// Per-task gradients at the weights each task uses for inference, on the
/// shared layers. With routes, task `k`'s gradient is taken with respect to
/// its route weights.
pub fn inference_grads(
    model: &MultiOutputModel,
    inference: Inference<'_>,
    batch: &Batch,
) -> Result<Vec<Vec<Option<Tensor>>>> {
    let layers = model.topology.shared_layers();
    match inference {
        Inference::Plain => shared_grads(model, batch, &layers),
        Inference::Routes { importances, eps } => (0..model.num_tasks())
            .map(|k| {
                let baked = bake_route(model, importances, k, eps)?;
                Ok(shared_grads(&baked, batch, &layers)?.swap_remove(k))
            })
            .collect(),
    }
}

/// Conflict value of the pair `(a, b)` over the shared layers both use,
/// normalized by task `a`'s gradient.
pub fn pair_conflict(grads: &[Vec<Option<Tensor>>], a: usize, b: usize) -> Result<Option<f64>> {
    let (ga, gb): (Vec<Tensor>, Vec<Tensor>) = grads[a]
        .iter()
        .zip(&grads[b])
        .filter_map(|(x, y)| Some((x.clone()?, y.clone()?)))
        .unzip();
    if ga.is_empty() || ga.iter().all(|t| t.norm_sq() == 0.0) {
        return Ok(None);
    }
    conflict_value(&ga, &gb).map(Some)
}

/// Pairs of every task with the deepest one.
pub fn default_pairs(model: &MultiOutputModel) -> Vec<(usize, usize)> {
    let topo = &model.topology;
    let deepest = (0..topo.num_tasks())
        .max_by_key(|&k| (topo.task_depth(k), k))
        .unwrap_or(0);
    (0..topo.num_tasks())
        .filter(|&k| k != deepest)
        .map(|k| (k, deepest))
        .collect()
}

/// Mean pairwise conflict over `batches` at the inference weights.
pub fn mean_conflict(
    model: &MultiOutputModel,
    inference: Inference<'_>,
    batches: &[Batch],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in batches {
        let grads = inference_grads(model, inference, b)?;
        for &(a, c) in pairs {
            if let Some(v) = pair_conflict(&grads, a, c)? {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        return contract("no conflict samples");
    }
    Ok(sum / n as f64)
}

/// One conflict/gain measurement for the task pair `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictSample {
    pub step: usize,
    pub a: usize,
    pub b: usize,
    pub conflict: f64,
    pub gain: f64,
}

/// Plain-forward loss of task `k` with the trunk weights of `layers`
/// replaced by `weights`.
fn loss_with_trunk(
    model: &MultiOutputModel,
    layers: &[usize],
    weights: &[Tensor],
    k: usize,
    batch: &Batch,
) -> Result<f64> {
    let mut m = model.clone();
    for (&j, w) in layers.iter().zip(weights) {
        m.trunk[j].weight = w.clone();
    }
    evaluate_task(&m, k, batch)
}

fn evaluate_task(model: &MultiOutputModel, k: usize, batch: &Batch) -> Result<f64> {
    let mut g = numcore::Graph::new();
    let bound = bind(&mut g, model, &|_| false);
    let w = bound.trunk_w.clone();
    let out = task_outputs(&mut g, &model.topology, &bound, &w, &[k], batch)?[0];
    let l = task_loss(&mut g, &model.topology, out, batch, k)?;
    Ok(g.value(l).item()?)
}

/// Conflict value and measured convergence gain of every pair at the
/// current plain weights. Returns the samples and the number of pairs
/// dropped because the single-gradient step left the loss unchanged.
pub fn conflict_gain_samples(
    model: &MultiOutputModel,
    batch: &Batch,
    pairs: &[(usize, usize)],
    eta: f64,
    step: usize,
) -> Result<(Vec<ConflictSample>, usize)> {
    let shared = model.topology.shared_layers();
    let grads = shared_grads(model, batch, &shared)?;
    let mut out = Vec::with_capacity(pairs.len());
    let mut dropped = 0;
    for &(a, b) in pairs {
        let (layers, (ga, gb)): (Vec<usize>, (Vec<Tensor>, Vec<Tensor>)) = shared
            .iter()
            .zip(grads[a].iter().zip(&grads[b]))
            .filter_map(|(&j, (x, y))| Some((j, (x.clone()?, y.clone()?))))
            .unzip();
        if ga.is_empty() || ga.iter().all(|t| t.norm_sq() == 0.0) {
            dropped += 1;
            continue;
        }
        let conflict = conflict_value(&ga, &gb)?;
        let w: Vec<Tensor> = layers
            .iter()
            .map(|&j| model.trunk[j].weight.clone())
            .collect();
        match convergence_gain(
            |w| loss_with_trunk(model, &layers, w, a, batch),
            &w,
            &ga,
            &gb,
            eta,
        )? {
            Some(gain) => out.push(ConflictSample {
                step,
                a,
                b,
                conflict,
                gain,
            }),
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

/// Cosine similarity of the raw importance fields of every task pair, over
/// the shared layers both tasks use.
pub fn similarity_matrix(model: &MultiOutputModel, imps: &ImportanceSet) -> Result<Vec<Vec<f64>>> {
    let topo = &model.topology;
    let k = topo.num_tasks();
    let shared = topo.shared_layers();
    let mut m = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let (mut va, mut vb) = (Vec::new(), Vec::new());
            for &j in &shared {
                if let (Some(x), Some(y)) = (imps.get(a, j), imps.get(b, j)) {
                    va.extend_from_slice(x.data());
                    vb.extend_from_slice(y.data());
                }
            }
            let s = structure_similarity(&va, &vb)?;
            m[a][b] = s;
            m[b][a] = s;
        }
    }
    Ok(m)
}

/// `K x K` relative accuracy drops; row `p` prunes task `p`'s dominant
/// filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Number of filters pruned for each row.
    pub pruned: Vec<usize>,
    pub baseline_accuracy: Vec<f64>,
}

impl DegradationMatrix {
    /// Rows whose maximum sits on the diagonal.
    pub fn diagonal_rows(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .filter(|(p, row)| row.iter().all(|&v| v <= row[*p]))
            .count()
    }
}

/// Filters where task `p`'s score beats every other task strictly.
pub fn dominant_filters(profile: &ImportanceProfile, p: usize) -> Vec<usize> {
    let rows = &profile.rows;
    (0..rows[p].len())
        .filter(|&i| {
            rows.iter()
                .enumerate()
                .all(|(k, r)| k == p || rows[p][i] > r[i])
        })
        .collect()
}

/// Zeroes shared filter `i` (flattened over shared layers) of `model`.
fn zero_filter(model: &mut MultiOutputModel, mut i: usize) -> Result<()> {
    for j in model.topology.shared_layers() {
        let w = &mut model.trunk[j].weight;
        let d = FilterDims::of(w.shape())?;
        if i < d.filters() {
            w.data_mut()[i * d.filter_len..(i + 1) * d.filter_len].fill(0.0);
            return Ok(());
        }
        i -= d.filters();
    }
    contract("filter index beyond the shared layers")
}

/// For every task `p`, prunes the shared filters it dominates and records
/// each task's relative accuracy drop.
pub fn prune_and_measure(
    model: &MultiOutputModel,
    importances: Option<(&ImportanceSet, f64)>,
    profile: &ImportanceProfile,
    data: &Dataset,
) -> Result<DegradationMatrix> {
    if data.rows() == 0 {
        return contract("evaluation data is empty");
    }
    let k = model.num_tasks();
    if profile.rows.len() != k {
        return contract("profile must cover every task");
    }
    let batch = data.full_batch()?;
    let acc = |m: &MultiOutputModel| -> Result<Vec<f64>> {
        let inference = match importances {
            Some((imps, eps)) => Inference::Routes {
                importances: imps,
                eps,
            },
            None => Inference::Plain,
        };
        evaluate(m, inference, &batch)?
            .iter()
            .map(|e| {
                e.accuracy
                    .ok_or_else(|| Error::Contract("pruning needs classification tasks".into()))
            })
            .collect()
    };
    let before = acc(model)?;
    let mut rows = Vec::with_capacity(k);
    let mut pruned = Vec::with_capacity(k);
    for p in 0..k {
        let targets = dominant_filters(profile, p);
        let mut copy = model.clone();
        for &i in &targets {
            zero_filter(&mut copy, i)?;
        }
        let after = acc(&copy)?;
        rows.push(
            before
                .iter()
                .zip(&after)
                .map(|(b, a)| if *b > 0.0 { (b - a) / b } else { 0.0 })
                .collect(),
        );
        pruned.push(targets.len());
    }
    Ok(DegradationMatrix {
        rows,
        pruned,
        baseline_accuracy: before,
    })
}

/// Cosine similarity of two flattened importance vectors.
pub fn structure_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract("similarity: lengths differ");
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return contract("similarity of a zero vector");
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Whether larger values of a metric are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// `(1/K) Σ −s_i (M_i − M0_i) / M0_i` with `s = +1` for higher-better and
/// `−1` for lower-better metrics. Negative means better than the baseline.
pub fn delta_m(metrics: &[f64], baselines: &[f64], directions: &[Direction]) -> Result<f64> {
    if metrics.len() != baselines.len() || metrics.len() != directions.len() || metrics.is_empty() {
        return contract("delta_m: one metric, baseline and direction per task");
    }
    if baselines.contains(&0.0) {
        return contract("delta_m: zero baseline");
    }
    let total: f64 = metrics
        .iter()
        .zip(baselines)
        .zip(directions)
        .map(|((m, b), d)| {
            let s = match d {
                Direction::HigherBetter => 1.0,
                Direction::LowerBetter => -1.0,
            };
            -s * (m - b) / b
        })
        .sum();
    // `+ 0.0` turns a negative zero into a positive one.
    Ok(total / metrics.len() as f64 + 0.0)
}

/// Task `k`'s route loss and, when `grads` is set, its autodiff gradient
/// with respect to every model tensor followed by task `k`'s importance
/// fields.
fn route_loss(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    batch: &Batch,
    eps: f64,
    grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = numcore::Graph::new();
    let mut bound = bind(&mut g, model, &|_| grads);
    let fields = bind_importances(&mut g, imps, k, grads, &mut bound.params);
    let w = route_weights(&mut g, &bound, &fields, eps)?;
    let out = task_outputs(&mut g, &model.topology, &bound, &w, &[k], batch)?[0];
    let loss = task_loss(&mut g, &model.topology, out, batch, k)?;
    let value = g.value(loss).item()?;
    Ok((
        value,
        if grads {
            g.backward(loss)?.into_vec()
        } else {
            Vec::new()
        },
    ))
}

/// Largest norm-relative gap between autodiff and central differences
/// (step `h`) for task `k`'s route loss, over every model tensor and task
/// `k`'s importance fields. Gaps are measured per tensor, relative to the
/// larger gradient norm floored at `1e-3`.
pub fn route_gradient_check(
    model: &MultiOutputModel,
    imps: &ImportanceSet,
    k: usize,
    batch: &Batch,
    eps: f64,
    h: f64,
) -> Result<f64> {
    if k >= model.num_tasks() {
        return contract(format!("task {k} out of range"));
    }
    let refs: Vec<ParamRef> = model.param_refs().into_iter().chain(imps.refs(k)).collect();
    let read = |m: &MultiOutputModel, i: &ImportanceSet, r: ParamRef| match r {
        ParamRef::Importance(t, j) => i.get(t, j).cloned(),
        _ => m.get(r).cloned(),
    };
    let params: Vec<Tensor> = refs
        .iter()
        .map(|&r| read(model, imps, r).expect("listed refs exist"))
        .collect();
    let (_, auto) = route_loss(model, imps, k, batch, eps, true)?;
    let numeric = numcore::finite_diff(
        |ps| {
            let mut m = model.clone();
            let mut i = imps.clone();
            for (&r, p) in refs.iter().zip(ps) {
                let slot = match r {
                    ParamRef::Importance(t, j) => i.get_mut(t, j),
                    _ => m.get_mut(r),
                };
                *slot.expect("listed refs exist") = p.clone();
            }
            route_loss(&m, &i, k, batch, eps, false)
                .map(|(l, _)| l)
                .map_err(|e| numcore::NumError::Contract(e.to_string()))
        },
        &params,
        h,
    )?;
    let mut worst: f64 = 0.0;
    for (a, n) in auto.iter().zip(&numeric) {
        let gap = a.sub(n)?.norm() / a.norm().max(n.norm()).max(1e-3);
        worst = worst.max(gap);
    }
    Ok(worst)
}
