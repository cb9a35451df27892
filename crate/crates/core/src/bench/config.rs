//! Run configuration: a TOML file with dotted sections over built-in
//! defaults, with `key=value` overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::datasets::{DatasetKind, DatasetSpec};
use crate::data::LabelMode;
use crate::error::{Error, Result};
use crate::metagf::{Method, TrainerConfig};
use crate::model::{ImportanceInit, NetSpec, Topology};
use crate::trainers::{AuxWeights, DisentangleConfig, RouteMode, Schedule, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` after which the rates drop.
    pub milestones: Vec<f64>,
    pub factor: f64,
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    KaimingAbs,
    Constant,
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceSection {
    pub init: InitKind,
    /// Value for `init = "constant"`.
    pub init_value: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    pub alpha: f64,
    pub beta: f64,
    pub meta_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    /// Exits of a multi-exit network, one after each trunk layer.
    pub exits: usize,
    /// Trunk depth of a multi-task network.
    pub depth: usize,
    pub filter_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Measure the mean pairwise conflict after every epoch.
    pub conflict: bool,
    /// Batches of the epoch the conflict is averaged over; 0 means all.
    pub conflict_batches: usize,
    /// Sample conflict and convergence gain before every `gain_every`-th
    /// joint-training step; 0 disables sampling.
    pub gain_every: usize,
    /// Step size of the trial updates behind convergence-gain samples.
    pub gain_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Root under which run directories are created; the environment
    /// default applies when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Checkpoint period in epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub train: TrainSection,
    pub importance: ImportanceSection,
    pub fusion: FusionSection,
    pub model: ModelSection,
    pub dataset: DatasetSpec,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = SgdConfig::weights();
        let nu = SgdConfig::importances();
        let schedule = Schedule::default();
        Self {
            method: Method::DrMgf,
            seed: 0,
            train: TrainSection {
                epochs: 20,
                batch_size: 64,
                lr: w.lr,
                momentum: w.momentum,
                weight_decay: w.weight_decay,
                milestones: schedule.milestones,
                factor: schedule.factor,
                parallel: true,
            },
            importance: ImportanceSection {
                init: InitKind::KaimingAbs,
                init_value: 1.0,
                lr: nu.lr,
                momentum: nu.momentum,
                weight_decay: nu.weight_decay,
                eps: crate::model::DEFAULT_EPS,
                lambda: 1e-4,
            },
            fusion: FusionSection {
                alpha: 1.0,
                beta: 0.4,
                meta_steps: 1,
            },
            model: ModelSection {
                width: 64,
                exits: 4,
                depth: 4,
                filter_size: 2,
            },
            dataset: DatasetSpec::default(),
            diagnostics: DiagnosticsSection {
                conflict: true,
                conflict_batches: 0,
                gain_every: 0,
                gain_eta: 1e-3,
            },
            output: OutputSection {
                root: None,
                checkpoint_every: 5,
            },
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Overlays `over` onto `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string so that `method=dr-avgf` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    fn from_table(t: toml::Table) -> Result<Self> {
        let cfg: Self = t.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults overlaid with the keys of a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let over: toml::Table = text.parse().map_err(config_err)?;
        let mut base = Self::default().to_table();
        merge(&mut base, over);
        Self::from_table(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Sets one dotted key, e.g. `train.lr` or `dataset.noise`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut table = self.to_table();
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts
            .pop()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| config_err(format!("empty key {key:?}")))?;
        let mut cur = &mut table;
        for p in parts {
            cur = match cur.get_mut(p) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(config_err(format!("unknown section {p:?} in {key:?}"))),
            };
        }
        cur.insert(last.to_string(), parse_value(raw));
        *self = Self::from_table(table).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{key}: {m}")),
            e => e,
        })?;
        Ok(())
    }

    /// Defaults, then the file, then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization. The output root is excluded,
    /// so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.root = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let i = &self.importance;
        let positive = [
            ("train.lr", t.lr),
            ("train.factor", t.factor),
            ("importance.lr", i.lr),
            ("importance.eps", i.eps),
            ("diagnostics.gain_eta", self.diagnostics.gain_eta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("train.momentum", t.momentum),
            ("train.weight_decay", t.weight_decay),
            ("importance.momentum", i.momentum),
            ("importance.weight_decay", i.weight_decay),
            ("importance.lambda", i.lambda),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(config_err(
                "train.epochs and train.batch_size must be positive",
            ));
        }
        let m = &self.model;
        if m.width == 0 || m.exits == 0 || m.depth == 0 || m.filter_size == 0 {
            return Err(config_err("model sizes must be positive"));
        }
        self.schedule().validate()?;
        AuxWeights {
            alpha: self.fusion.alpha,
            beta: self.fusion.beta,
        }
        .validate()?;
        self.dataset.validate()
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            milestones: self.train.milestones.clone(),
            factor: self.train.factor,
        }
    }

    pub fn importance_init(&self) -> ImportanceInit {
        match self.importance.init {
            InitKind::KaimingAbs => ImportanceInit::KaimingAbs,
            InitKind::Constant => ImportanceInit::Constant(self.importance.init_value),
            InitKind::Reconstruct => ImportanceInit::Reconstruct,
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        let t = &self.train;
        let i = &self.importance;
        TrainerConfig {
            method: self.method,
            seed: self.seed,
            max_epochs: t.epochs,
            batch_size: t.batch_size,
            disentangle: DisentangleConfig {
                weights: SgdConfig {
                    lr: t.lr,
                    momentum: t.momentum,
                    weight_decay: t.weight_decay,
                },
                importances: SgdConfig {
                    lr: i.lr,
                    momentum: i.momentum,
                    weight_decay: i.weight_decay,
                },
                aux: AuxWeights {
                    alpha: self.fusion.alpha,
                    beta: self.fusion.beta,
                },
                lambda: i.lambda,
                eps: i.eps,
                route: RouteMode::Learned,
            },
            schedule: self.schedule(),
            meta_steps: self.fusion.meta_steps,
            importance_init: self.importance_init(),
            parallel: t.parallel,
        }
    }

    /// Network for data with `input_dim` features and `classes` per label
    /// column.
    pub fn topology(&self, input_dim: usize, classes: &[usize]) -> Result<Topology> {
        let m = &self.model;
        let net = match self.dataset.mode {
            LabelMode::MultiExit => {
                let c = *classes
                    .first()
                    .ok_or_else(|| config_err("dataset has no label column"))?;
                NetSpec::multi_exit(input_dim, m.width, m.exits, c, m.filter_size)
            }
            LabelMode::MultiTask => {
                NetSpec::multi_task(input_dim, m.width, m.depth, classes, m.filter_size)
            }
        };
        let topo = Topology::Network(net);
        topo.validate()
            .map_err(|e| config_err(format!("model: {e}")))?;
        Ok(topo)
    }

    /// A one-epoch configuration on two-dimensional clusters.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.train.epochs = 1;
        c.dataset.kind = DatasetKind::Toy2d;
        c.dataset.size = 256;
        c.dataset.classes = 4;
        c.model.width = 8;
        c.model.exits = 2;
        c.model.filter_size = 1;
        c
    }
}
