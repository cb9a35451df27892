//! Delimited-text summaries over one or more run records, plus the toy
//! landscape report.

use std::path::Path;

use crate::bench::record::{mean, RunRecord};
use crate::bench::toy::ToyOutcome;
use crate::diagnostics::{delta_m, Direction};
use crate::error::{Error, Result};
use crate::metagf::Method;

/// A named CSV table. Rows are kept sorted so output does not depend on
/// the order runs were given in.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn finish(mut self) -> Self {
        self.rows.sort();
        self
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(format!("{}.csv", self.name)), self.to_csv()?)?;
        Ok(())
    }
}

/// Zero-padded integers so that lexicographic row order is numeric order.
fn idx(i: usize) -> String {
    format!("{i:04}")
}

fn num(v: f64) -> String {
    v.to_string()
}

fn coord(p: &[f64], i: usize) -> String {
    p.get(i).map_or(String::new(), |v| num(*v))
}

/// Short identifier of a run: method, seed and config-hash prefix.
pub fn run_label(r: &RunRecord) -> String {
    format!(
        "{}-s{}-{}",
        r.config.method,
        r.config.seed,
        &r.config_hash[..8]
    )
}

/// Picks the Δm baseline of `run`: the sgd-joint run with the same seed if
/// there is one, else the first run in sorted order.
fn baseline<'a>(runs: &'a [&'a RunRecord], run: &RunRecord) -> &'a RunRecord {
    runs.iter()
        .find(|b| b.config.method == Method::SgdJoint && b.config.seed == run.config.seed)
        .unwrap_or(&runs[0])
}

/// Every summary table over `runs`. All runs must have the same task count.
pub fn emit_report(runs: &[RunRecord]) -> Result<Vec<Table>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Config("report needs at least one run".into()))?;
    let k = first.metrics.tasks;
    if let Some(bad) = runs.iter().find(|r| r.metrics.tasks != k) {
        return Err(Error::Config(format!(
            "runs are not comparable: {} has {} tasks, {} has {k}",
            run_label(bad),
            bad.metrics.tasks,
            run_label(first)
        )));
    }
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by_key(|r| run_label(r));

    let mut per_exit = Table::new(
        "per_exit",
        &[
            "run",
            "method",
            "seed",
            "task",
            "train_acc",
            "test_acc",
            "test_loss",
        ],
    );
    let mut curves = Table::new(
        "curves",
        &[
            "run",
            "epoch",
            "lr",
            "mean_train_acc",
            "mean_test_acc",
            "joint_loss",
            "conflict",
        ],
    );
    let mut scatter = Table::new(
        "conflict_gain",
        &["run", "step", "a", "b", "conflict", "gain"],
    );
    let mut degradation = Table::new(
        "degradation",
        &[
            "run",
            "pruned_task",
            "task",
            "relative_drop",
            "filters_pruned",
        ],
    );
    let mut similarity = Table::new("similarity", &["run", "a", "b", "cosine"]);
    let mut dm = Table::new("delta_m", &["run", "baseline", "delta_m", "mean_test_acc"]);

    for r in &sorted {
        let label = run_label(r);
        let m = &r.metrics;
        for t in 0..k {
            per_exit.push(vec![
                label.clone(),
                r.config.method.to_string(),
                r.config.seed.to_string(),
                idx(t),
                num(m.final_train_accuracy[t]),
                num(m.final_test_accuracy[t]),
                num(m.final_test_loss[t]),
            ]);
        }
        for e in &m.epochs {
            curves.push(vec![
                label.clone(),
                idx(e.epoch),
                num(e.lr),
                num(e.mean_train_accuracy()),
                num(mean(&e.test_accuracy)),
                num(e.joint_loss),
                e.conflict.map_or(String::new(), num),
            ]);
        }
        for s in &m.gain_samples {
            scatter.push(vec![
                label.clone(),
                format!("{:08}", s.step),
                idx(s.a),
                idx(s.b),
                num(s.conflict),
                num(s.gain),
            ]);
        }
        for (p, row) in m.degradation.rows.iter().enumerate() {
            for (q, v) in row.iter().enumerate() {
                degradation.push(vec![
                    label.clone(),
                    idx(p),
                    idx(q),
                    num(*v),
                    m.degradation.pruned[p].to_string(),
                ]);
            }
        }
        if let Some(sim) = &m.similarity {
            for (a, row) in sim.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    similarity.push(vec![label.clone(), idx(a), idx(b), num(*v)]);
                }
            }
        }
        let base = baseline(&sorted, r);
        let value = delta_m(
            &m.final_test_accuracy,
            &base.metrics.final_test_accuracy,
            &vec![Direction::HigherBetter; k],
        )?;
        dm.push(vec![
            label.clone(),
            run_label(base),
            num(value),
            num(mean(&m.final_test_accuracy)),
        ]);
    }
    Ok([per_exit, curves, scatter, degradation, similarity, dm]
        .into_iter()
        .map(Table::finish)
        .collect())
}

/// Trajectories of every method with the independent reference optima
/// alongside, one row per method, epoch and task.
pub fn toy_report(outcome: &ToyOutcome) -> Vec<Table> {
    let mut traj = Table::new(
        "toy_trajectories",
        &[
            "method",
            "epoch",
            "task",
            "w1",
            "w2",
            "route_w1",
            "route_w2",
            "loss",
            "optimum_loss",
        ],
    );
    let mut summary = Table::new(
        "toy_summary",
        &[
            "method",
            "task",
            "final_loss",
            "optimum_loss",
            "gap",
            "optimum_w1",
            "optimum_w2",
            "diverged",
        ],
    );
    for t in &outcome.trajectories {
        for (e, (shared, points)) in t.shared.iter().zip(&t.task_points).enumerate() {
            for (task, p) in points.iter().enumerate() {
                traj.push(vec![
                    t.method.to_string(),
                    idx(e),
                    idx(task),
                    coord(shared, 0),
                    coord(shared, 1),
                    coord(p, 0),
                    coord(p, 1),
                    num(t.losses[e][task]),
                    num(outcome.optima[task]),
                ]);
            }
        }
        for (task, l) in t.final_losses.iter().enumerate() {
            let opt = outcome.optima[task];
            summary.push(vec![
                t.method.to_string(),
                idx(task),
                num(*l),
                num(opt),
                num(l - opt),
                coord(&outcome.optimum_points[task], 0),
                coord(&outcome.optimum_points[task], 1),
                t.diverged.to_string(),
            ]);
        }
    }
    vec![traj.finish(), summary.finish()]
}
