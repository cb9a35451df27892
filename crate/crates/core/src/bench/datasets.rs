//! Synthetic cluster data and CSV datasets.

use std::path::{Path, PathBuf};

use numcore::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Two-dimensional clusters.
    Toy2d,
    SyntheticClusters,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub dim: usize,
    pub classes: usize,
    /// Label columns in multi-task mode; ignored for multi-exit data.
    pub tasks: usize,
    pub mode: LabelMode,
    /// Standard deviation of the within-cluster noise.
    pub noise: f64,
    /// Scale of the cluster centres.
    pub separation: f64,
    /// Clusters per class; more than one makes classes non-convex.
    pub subclusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Train / held-out fractions.
    pub splits: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticClusters,
            size: 2048,
            dim: 32,
            classes: 8,
            tasks: 3,
            mode: LabelMode::MultiExit,
            noise: 1.0,
            separation: 1.0,
            subclusters: 3,
            path: None,
            splits: vec![0.75, 0.25],
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dataset: {m}")));
        if self.kind != DatasetKind::Csv {
            if self.size == 0 || self.classes < 2 || self.subclusters == 0 {
                return bad("size, classes (>= 2) and subclusters must be positive");
            }
            if self.kind == DatasetKind::SyntheticClusters && self.dim == 0 {
                return bad("dim must be positive");
            }
            if self.mode == LabelMode::MultiTask && self.tasks == 0 {
                return bad("multi-task data needs at least one task");
            }
            if !(self.noise >= 0.0) || !(self.separation > 0.0) {
                return bad("noise must be >= 0 and separation > 0");
            }
        } else if self.path.is_none() {
            return bad("csv datasets need a path");
        }
        let total: f64 = self.splits.iter().sum();
        if self.splits.is_empty()
            || self.splits.iter().any(|&f| f < 0.0)
            || (total - 1.0).abs() > 1e-9
        {
            return bad("split fractions must be nonnegative and sum to 1");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Toy2d => 2,
            _ => self.dim,
        }
    }

    pub fn label_columns(&self) -> usize {
        match self.mode {
            LabelMode::MultiExit => 1,
            LabelMode::MultiTask => self.tasks,
        }
    }
}

/// Gaussian-cluster classification data, deterministic in `seed`. Each label
/// column has `classes x subclusters` centres drawn from `N(0, separation²)`
/// in its own random direction set; a sample's features are the sum of its
/// columns' centres plus isotropic noise.
pub fn gen_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind == DatasetKind::Csv {
        return Err(Error::Config(
            "gen_synthetic cannot generate csv data".into(),
        ));
    }
    let d = spec.feature_dim();
    let cols = spec.label_columns();
    let mut rng = Rng::with_stream(seed, 0);
    let centres: Vec<Vec<Vec<f64>>> = (0..cols)
        .map(|_| {
            (0..spec.classes * spec.subclusters)
                .map(|_| (0..d).map(|_| spec.separation * rng.normal()).collect())
                .collect()
        })
        .collect();
    let mut features = vec![0.0; spec.size * d];
    let mut labels = vec![vec![0usize; spec.size]; cols];
    for i in 0..spec.size {
        let row = &mut features[i * d..(i + 1) * d];
        for (c, col) in labels.iter_mut().enumerate() {
            let y = rng.below(spec.classes);
            let sub = rng.below(spec.subclusters);
            col[i] = y;
            let centre = &centres[c][y * spec.subclusters + sub];
            row.iter_mut().zip(centre).for_each(|(x, m)| *x += m);
        }
        row.iter_mut().for_each(|x| *x += spec.noise * rng.normal());
    }
    Dataset::new(
        Tensor::new(vec![spec.size, d], features)?,
        labels,
        vec![spec.classes; cols],
        spec.mode,
    )
}

/// Loads `spec.path` (or `path`): a header row, then one row per sample.
/// Columns whose header starts with `label` hold class indices; the others
/// are features.
pub fn load_csv(path: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let name = path.display().to_string();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: name.clone(),
        line: line as usize,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let is_label: Vec<bool> = header
        .iter()
        .map(|h| h.trim().starts_with("label"))
        .collect();
    let n_labels = is_label.iter().filter(|&&b| b).count();
    let n_features = header.len() - n_labels;
    if n_labels == 0 || n_features == 0 {
        return Err(parse_err(
            1,
            "header needs feature columns and at least one label column".into(),
        ));
    }
    if spec.dim != 0 && spec.dim != n_features {
        return Err(parse_err(
            1,
            format!("expected {} feature columns, found {n_features}", spec.dim),
        ));
    }
    if spec.mode == LabelMode::MultiExit && n_labels != 1 {
        return Err(parse_err(
            1,
            format!("multi-exit data needs one label column, found {n_labels}"),
        ));
    }
    let mut features = Vec::new();
    let mut labels = vec![Vec::new(); n_labels];
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut col = 0;
        for (cell, &lab) in record.iter().zip(&is_label) {
            let cell = cell.trim();
            if lab {
                let v: usize = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("label {cell:?} is not a class index")))?;
                labels[col].push(v);
                col += 1;
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("cell {cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("cell {cell:?} is not finite")));
                }
                features.push(v);
            }
        }
    }
    let rows = labels[0].len();
    if rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }
    let classes = labels
        .iter()
        .map(|c| (c.iter().max().copied().unwrap_or(0) + 1).max(spec.classes))
        .collect();
    Dataset::new(
        Tensor::new(vec![rows, n_features], features)?,
        labels,
        classes,
        spec.mode,
    )
}

/// Writes `data` in the layout [`load_csv`] reads. Values use the shortest
/// representation that parses back to the same bits.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..data.labels.len()).map(|i| format!("label{i}")));
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(io)?;
    for (i, row) in data.features.data().chunks_exact(d).enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.extend(data.labels.iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads or generates the dataset and splits it by `spec.splits`.
pub fn materialize(spec: &DatasetSpec, seed: u64) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let full = match spec.kind {
        DatasetKind::Csv => load_csv(spec.path.as_deref().expect("validated"), spec)?,
        _ => gen_synthetic(spec, seed)?,
    };
    full.split(&spec.splits, &mut Rng::with_stream(seed, 1))
}
