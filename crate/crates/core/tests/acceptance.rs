//! End-to-end acceptance run: one pass/fail line per criterion, non-zero
//! exit if any fails.

use std::time::{Duration, Instant};

use drmgf::bench::config::RunConfig;
use drmgf::bench::datasets::{gen_synthetic, DatasetKind, DatasetSpec};
use drmgf::bench::record::RunRecord;
use drmgf::bench::runner::execute;
use drmgf::bench::toy::{toy_problem, ToyConfig};
use drmgf::data::LabelMode;
use drmgf::diagnostics::{conflict_value, convergence_gain, pearson, route_gradient_check};
use drmgf::metagf::{fuse_gradients, Method};
use drmgf::model::{NetSpec, DEFAULT_EPS};
use drmgf::{ImportanceInit, ImportanceSet, MultiOutputModel, Topology};
use numcore::{Rng, Tensor};
use rayon::prelude::*;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    outcome: Outcome,
    elapsed: Duration,
}

fn timed(id: usize, name: &'static str, budget_s: u64, f: impl FnOnce() -> Outcome) -> Criterion {
    let t = Instant::now();
    let outcome = f();
    Criterion {
        id,
        name,
        budget: Duration::from_secs(budget_s),
        outcome,
        elapsed: t.elapsed(),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_oracle() -> Outcome {
    let mut rng = Rng::new(0x6a7d);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let s = 1 + rng.below(2);
        let s2 = s * s;
        let dim = s2 * (1 + rng.below(3));
        let width = s2 * (1 + rng.below(3));
        let classes = 2 + rng.below(3);
        let tasks = 1 + rng.below(3);
        let (spec, mode) = if rng.below(2) == 0 {
            (
                NetSpec::multi_exit(dim, width, tasks, classes, s),
                LabelMode::MultiExit,
            )
        } else {
            let depth = 1 + rng.below(2);
            (
                NetSpec::multi_task(dim, width, depth, &vec![classes; tasks], s),
                LabelMode::MultiTask,
            )
        };
        let data = DatasetSpec {
            kind: DatasetKind::SyntheticClusters,
            size: 6,
            dim,
            classes,
            tasks,
            mode,
            splits: vec![1.0],
            ..DatasetSpec::default()
        };
        let batch = gen_synthetic(&data, case)
            .and_then(|d| d.full_batch())
            .map_err(|e| e.to_string())?;
        let mut model =
            MultiOutputModel::init(Topology::Network(spec), &mut rng).map_err(|e| e.to_string())?;
        // Biases start at zero, which puts dead units exactly on the next
        // layer's ReLU kink; jitter everything to land on a smooth point.
        for r in model.param_refs() {
            if let Some(t) = model.get_mut(r) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += 0.1 * rng.normal());
            }
        }
        let imps = ImportanceSet::init(&model, ImportanceInit::KaimingAbs, DEFAULT_EPS, &mut rng)
            .map_err(|e| e.to_string())?;
        for k in 0..model.num_tasks() {
            let err = route_gradient_check(&model, &imps, k, &batch, DEFAULT_EPS, 1e-6)
                .map_err(|e| e.to_string())?;
            worst = worst.max(err);
        }
    }
    check(
        worst < 1e-6,
        format!("200 graphs, max relative error {worst:.2e}"),
    )
}

fn toy() -> Outcome {
    let out = toy_problem(&ToyConfig::default()).map_err(|e| e.to_string())?;
    let gaps = |m| out.gaps(m).unwrap_or_default();
    let (dr, sgd, pc) = (
        gaps(Method::DrMgf),
        gaps(Method::SgdJoint),
        gaps(Method::Pcgrad),
    );
    let ok = dr.iter().all(|g| g.abs() <= 1e-3)
        && sgd.iter().any(|&g| g >= 1e-2)
        && pc.iter().any(|&g| g >= 1e-2);
    let f = |v: &[f64]| {
        v.iter()
            .map(|g| format!("{g:.2e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    check(
        ok,
        format!(
            "gaps dr-mgf [{}], sgd-joint [{}], pcgrad [{}]",
            f(&dr),
            f(&sgd),
            f(&pc)
        ),
    )
}

fn benchmark() -> RunConfig {
    RunConfig::from_toml_str(include_str!("../configs/benchmark.toml"))
        .expect("benchmark config parses")
}

fn correlation() -> Outcome {
    let mut cfg = benchmark();
    cfg.method = Method::SgdJoint;
    cfg.train.epochs = 10;
    cfg.diagnostics.gain_every = 1;
    cfg.diagnostics.conflict = false;
    let (rec, _) = execute(&cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let samples = &rec.metrics.gain_samples;
    let c: Vec<f64> = samples.iter().map(|s| s.conflict).collect();
    let g: Vec<f64> = samples.iter().map(|s| s.gain).collect();
    let r = pearson(&c, &g).map_err(|e| e.to_string())?;
    check(
        r < -0.1 && samples.len() >= 500,
        format!("pearson {r:.4} over {} samples", samples.len()),
    )
}

fn quadratic_interference() -> Outcome {
    let mut rng = Rng::new(0x51);
    let (mut worse, mut total) = (0, 0);
    while total < 1000 {
        let d = 2 + rng.below(7);
        let b: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        // A = BᵀB + 0.1 I is positive definite.
        let a: Vec<f64> = (0..d * d)
            .map(|ij| {
                let (i, j) = (ij / d, ij % d);
                (0..d).map(|r| b[r * d + i] * b[r * d + j]).sum::<f64>()
                    + if i == j { 0.1 } else { 0.0 }
            })
            .collect();
        let centre: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let diff: Vec<f64> = w.iter().zip(&centre).map(|(x, c)| x - c).collect();
        let g1: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| a[i * d + j] * diff[j]).sum())
            .collect();
        let g2: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let t = |v: Vec<f64>| Tensor::new(vec![1, 1, d], v).unwrap();
        let (w, g1, g2) = ([t(w)], [t(g1)], [t(g2)]);
        if conflict_value(&g1, &g2).map_err(|e| e.to_string())? <= 0.0 {
            continue;
        }
        let f1 = |p: &[Tensor]| -> drmgf::Result<f64> {
            let x = p[0].data();
            let e: Vec<f64> = x.iter().zip(&centre).map(|(x, c)| x - c).collect();
            Ok(0.5
                * (0..d)
                    .map(|i| e[i] * (0..d).map(|j| a[i * d + j] * e[j]).sum::<f64>())
                    .sum::<f64>())
        };
        total += 1;
        // A negative gain means the joint step reduced f1 less than g1 alone.
        if let Some(gain) = convergence_gain(f1, &w, &g1, &g2, 1e-3).map_err(|e| e.to_string())? {
            if gain < 0.0 {
                worse += 1;
            }
        }
    }
    check(
        worse * 100 >= 95 * total,
        format!("{worse}/{total} conflicting instances worse under g1+g2"),
    )
}

fn fusion_algebra() -> Outcome {
    let mut rng = Rng::new(0xf0);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..1000 {
        let k = 1 + rng.below(4);
        let filters = 1 + rng.below(6);
        let s = 1 + rng.below(3);
        let grads: Vec<Tensor> = (0..k)
            .map(|_| {
                Tensor::new(
                    vec![filters, 1, s, s],
                    (0..filters * s * s)
                        .map(|_| rng.uniform_in(-5.0, 5.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let field = |rng: &mut Rng| {
            Tensor::new(
                vec![filters, 1],
                (0..filters).map(|_| rng.uniform_in(0.01, 3.0)).collect(),
            )
            .unwrap()
        };
        let weights: Vec<Tensor> = (0..k).map(|_| field(&mut rng)).collect();
        let gr: Vec<&Tensor> = grads.iter().collect();
        let fuse = |w: &[Tensor]| {
            fuse_gradients(&w.iter().collect::<Vec<_>>(), &gr)
                .map(|r| r.0)
                .map_err(|e| e.to_string())
        };
        let base = fuse(&weights)?;
        let tol = 1e-12 * base.max_abs().max(1.0);

        let c = Tensor::new(
            vec![filters, 1],
            (0..filters).map(|_| rng.uniform_in(1e-3, 1e3)).collect(),
        )
        .unwrap();
        let scaled: Vec<Tensor> = weights
            .iter()
            .map(|w| w.zip_map(&c, |a, b| a * b).unwrap())
            .collect();
        let scale_gap = base.sub(&fuse(&scaled)?).unwrap().max_abs();

        let j = rng.below(k);
        let one_hot: Vec<Tensor> = (0..k)
            .map(|q| {
                if q == j {
                    field(&mut rng)
                } else {
                    Tensor::zeros(&[filters, 1])
                }
            })
            .collect();
        let hot_gap = fuse(&one_hot)?.sub(&grads[j]).unwrap().max_abs();

        let hull_gap = (0..base.len())
            .map(|i| {
                let lo = grads
                    .iter()
                    .map(|g| g.data()[i])
                    .fold(f64::INFINITY, f64::min);
                let hi = grads
                    .iter()
                    .map(|g| g.data()[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo - base.data()[i]).max(base.data()[i] - hi).max(0.0)
            })
            .fold(0.0, f64::max);

        let gap = scale_gap.max(hot_gap).max(hull_gap);
        worst = worst.max(gap);
        if gap > tol {
            failures.push(case);
        }
    }
    check(
        failures.is_empty(),
        format!("1000 instances, max deviation {worst:.2e}, failing cases {failures:?}"),
    )
}

const ABLATION: [Method; 4] = [
    Method::DrMgf,
    Method::MetaGfOnly,
    Method::DrAvgf,
    Method::SgdJoint,
];
const SEEDS: u64 = 3;
const THRESHOLD: f64 = 0.7;

/// Benchmark runs of every ablation method over three seeds, indexed
/// `[method][seed]`.
fn ablation_runs() -> drmgf::Result<Vec<Vec<RunRecord>>> {
    let base = benchmark();
    let jobs: Vec<(usize, u64)> = (0..ABLATION.len())
        .flat_map(|m| (0..SEEDS).map(move |s| (m, s)))
        .collect();
    let recs = jobs
        .par_iter()
        .map(|&(m, seed)| {
            execute(
                &RunConfig {
                    method: ABLATION[m],
                    seed,
                    ..base.clone()
                },
                |_, _| Ok(()),
            )
            .map(|r| r.0)
        })
        .collect::<drmgf::Result<Vec<_>>>()?;
    let mut it = recs.into_iter();
    Ok(ABLATION
        .iter()
        .map(|_| it.by_ref().take(SEEDS as usize).collect())
        .collect())
}

fn conflict_reduction(runs: &[Vec<RunRecord>]) -> Outcome {
    let epochs = runs[0][0].metrics.epochs.len();
    let mean = |rs: &[RunRecord], e: usize| {
        rs.iter()
            .map(|r| r.metrics.epochs[e].conflict.unwrap_or(f64::NAN))
            .sum::<f64>()
            / rs.len() as f64
    };
    let tail: Vec<usize> = (epochs - epochs / 2..epochs).collect();
    let lower = tail
        .iter()
        .filter(|&&e| mean(&runs[0], e) < mean(&runs[3], e))
        .count();
    let (dr, sgd): (f64, f64) = tail.iter().fold((0.0, 0.0), |(a, b), &e| {
        (a + mean(&runs[0], e), b + mean(&runs[3], e))
    });
    let n = tail.len() as f64;
    check(
        lower == tail.len(),
        format!(
            "dr-mgf lower on {lower}/{} final epochs (means {:.4} vs {:.4})",
            tail.len(),
            dr / n,
            sgd / n
        ),
    )
}

fn disentanglement(runs: &[Vec<RunRecord>]) -> Outcome {
    let k = runs[0][0].metrics.tasks;
    let need = k.div_ceil(2);
    let rows: Vec<usize> = runs[0]
        .iter()
        .map(|r| r.metrics.degradation.diagonal_rows())
        .collect();
    check(
        rows.iter().all(|&d| d >= need),
        format!("diagonal rows per seed {rows:?}, need {need} of {k}"),
    )
}

fn ablation_order(runs: &[Vec<RunRecord>]) -> Outcome {
    let cap = benchmark().train.epochs + 1;
    let means: Vec<f64> = runs
        .iter()
        .map(|rs| {
            rs.iter()
                .map(|r| r.metrics.epochs_to_threshold(THRESHOLD).unwrap_or(cap) as f64)
                .sum::<f64>()
                / rs.len() as f64
        })
        .collect();
    let ok = means[0] <= means[1].min(means[2]) && means[1].min(means[2]) <= means[3];
    let detail = ABLATION
        .iter()
        .zip(&means)
        .map(|(m, v)| format!("{m} {v:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("mean epochs to {THRESHOLD}: {detail}"))
}

fn similarity_order(runs: &[Vec<RunRecord>]) -> Outcome {
    let mut hits = 0;
    let mut parts = Vec::new();
    for r in &runs[0] {
        let sim = r
            .metrics
            .similarity
            .as_ref()
            .ok_or("dr-mgf run has no similarity matrix")?;
        let k = sim.len();
        let adjacent = (0..k - 1).map(|a| sim[a][a + 1]).sum::<f64>() / (k - 1) as f64;
        if adjacent > sim[0][k - 1] {
            hits += 1;
        }
        parts.push(format!("{adjacent:.4}>{:.4}", sim[0][k - 1]));
    }
    check(
        hits == runs[0].len(),
        format!("adjacent vs first-last per seed: {}", parts.join(", ")),
    )
}

fn determinism(runs: &[Vec<RunRecord>]) -> Outcome {
    let mut mismatched = Vec::new();
    for m in Method::ALL {
        let mut cfg = RunConfig::smoke();
        cfg.method = m;
        cfg.train.epochs = 2;
        let a = execute(&cfg, |_, _| Ok(())).map_err(|e| e.to_string())?.0;
        let b = execute(&cfg, |_, _| Ok(())).map_err(|e| e.to_string())?.0;
        if a.metrics != b.metrics {
            mismatched.push(m.to_string());
        }
    }
    let first = &runs[0][0];
    let again = execute(&first.config, |_, _| Ok(()))
        .map_err(|e| e.to_string())?
        .0;
    if again.metrics != first.metrics {
        mismatched.push("benchmark dr-mgf".into());
    }
    check(
        mismatched.is_empty(),
        format!(
            "{} smoke configs and one benchmark run rerun; mismatches {mismatched:?}",
            Method::ALL.len()
        ),
    )
}

fn main() {
    let mut results = vec![
        timed(1, "gradient oracle", 30, gradient_oracle),
        timed(2, "toy two-task landscape", 60, toy),
        timed(3, "conflict-gain correlation", 600, correlation),
        timed(
            4,
            "conflicting steps slow the first task",
            60,
            quadratic_interference,
        ),
        timed(8, "fusion algebra", 10, fusion_algebra),
    ];
    let t = Instant::now();
    let runs = ablation_runs();
    let shared = t.elapsed();
    match &runs {
        Ok(runs) => {
            for (id, name, budget, f) in [
                (
                    5,
                    "conflict reduction",
                    1200,
                    conflict_reduction as fn(&[Vec<RunRecord>]) -> Outcome,
                ),
                (6, "task-specific pruning", 600, disentanglement),
                (7, "ablation ordering", 2700, ablation_order),
                (9, "route similarity ordering", 2700, similarity_order),
                (10, "determinism", 600, determinism),
            ] {
                let mut c = timed(id, name, budget, || f(runs));
                c.elapsed += shared;
                results.push(c);
            }
        }
        Err(e) => {
            for (id, name) in [
                (5, "conflict reduction"),
                (6, "task-specific pruning"),
                (7, "ablation ordering"),
                (9, "route similarity ordering"),
                (10, "determinism"),
            ] {
                results.push(Criterion {
                    id,
                    name,
                    budget: Duration::MAX,
                    outcome: Err(format!("benchmark runs failed: {e}")),
                    elapsed: shared,
                });
            }
        }
    }
    results.sort_by_key(|c| c.id);

    let mut failed = 0;
    for c in &results {
        let over = c.elapsed > c.budget;
        let (tag, detail) = match (&c.outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => (
                "FAIL",
                format!("{d}; over the {}s budget", c.budget.as_secs()),
            ),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {:>2} {tag}  {:<38} {:>8.1}s  {detail}",
            c.id,
            c.name,
            c.elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
