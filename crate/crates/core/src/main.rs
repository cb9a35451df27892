use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use drmgf::bench::config::RunConfig;
use drmgf::bench::datasets::{materialize, save_csv, DatasetKind};
use drmgf::bench::record::RunRecord;
use drmgf::bench::report::{emit_report, toy_report, Table};
use drmgf::bench::runner::{self, OUTPUT_ROOT_ENV};
use drmgf::bench::toy::{toy_problem, ToyConfig};
use drmgf::diagnostics::{default_pairs, mean_conflict, prune_and_measure, similarity_matrix};
use drmgf::metagf::Method;
use drmgf::model::{read_checkpoint, Inference};

#[derive(Parser)]
#[command(
    name = "drmgf",
    version,
    about = "Disentangle-and-fuse training benchmarks"
)]
struct Cli {
    /// Root for run directories and reports.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; missing keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr=0.05`. Repeatable;
    /// applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, root: &Option<PathBuf>) -> drmgf::Result<RunConfig> {
        let mut sets = self.overrides.clone();
        if let Some(m) = self.method {
            sets.push(format!("method={m}"));
        }
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(e) = self.epochs {
            sets.push(format!("train.epochs={e}"));
        }
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &sets)?;
        if cfg.output.root.is_none() {
            cfg.output.root = root.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-task quadratic landscape: every method against independent optima.
    Toy {
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the trajectory tables (default: <root>/toy).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one configuration and persists its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pruning, similarity and conflict studies on a saved checkpoint.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the tables (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summary tables over finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the tables (default: <root>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn root(cli_root: &Option<PathBuf>) -> PathBuf {
    cli_root.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_tables(dir: &Path, tables: &[Table]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for t in tables {
        t.write(dir)?;
    }
    println!("wrote {} tables to {}", tables.len(), dir.display());
    Ok(())
}

fn fmt_row(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Toy { epochs, seed, out } => {
            let cfg = ToyConfig {
                epochs,
                seed,
                methods: Method::ALL.to_vec(),
                ..ToyConfig::default()
            };
            let outcome = toy_problem(&cfg)?;
            println!("independent optima: {}", fmt_row(&outcome.optima));
            for t in &outcome.trajectories {
                let gaps = outcome.gaps(t.method).unwrap_or_default();
                let flag = if t.diverged { "  (diverged)" } else { "" };
                println!("{:>13}  gaps {}{flag}", t.method.name(), fmt_row(&gaps));
            }
            write_tables(
                &out.unwrap_or_else(|| root(&cli.output_root).join("toy")),
                &toy_report(&outcome),
            )
        }
        Cmd::GenData { config, out } => {
            let mut cfg = config.resolve(&cli.output_root)?;
            if cfg.dataset.kind == DatasetKind::Csv {
                anyhow::bail!(drmgf::Error::Config(
                    "gen-data generates synthetic data; dataset.kind is csv".into()
                ));
            }
            cfg.dataset.splits = vec![1.0];
            let data = materialize(&cfg.dataset, cfg.seed)?.remove(0);
            save_csv(&out, &data)?;
            println!(
                "wrote {} rows x {} features to {}",
                data.rows(),
                data.dim(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train { config } => {
            let cfg = config.resolve(&cli.output_root)?;
            let (dir, rec) = runner::run_experiment(&cfg)?;
            let m = &rec.metrics;
            println!("run directory: {}", dir.display());
            println!(
                "test accuracy per task: {}",
                fmt_row(&m.final_test_accuracy)
            );
            println!(
                "pruning rows with diagonal maximum: {}/{}",
                m.degradation.diagonal_rows(),
                m.tasks
            );
            Ok(())
        }
        Cmd::Diagnose {
            config,
            checkpoint,
            out,
        } => {
            let cfg = config.resolve(&cli.output_root)?;
            let mut file = std::fs::File::open(&checkpoint)
                .with_context(|| format!("opening {}", checkpoint.display()))?;
            let (model, imps) = read_checkpoint(&mut std::io::BufReader::new(&mut file))?;
            let (train, test) = runner::load_data(&cfg)?;
            let eps = cfg.importance.eps;
            let inference = match (&imps, cfg.method.uses_routes()) {
                (Some(i), true) => Inference::Routes {
                    importances: i,
                    eps,
                },
                _ => Inference::Plain,
            };
            let profile = match &imps {
                Some(i) => drmgf::diagnostics::learned_profile(&model, i),
                None => {
                    let trainer = drmgf::metagf::Trainer::new(cfg.trainer_config(), model.clone())?;
                    runner::importance_profile(&trainer, &train)?
                }
            };
            let routes = match inference {
                Inference::Routes { importances, eps } => Some((importances, eps)),
                Inference::Plain => None,
            };
            let deg = prune_and_measure(&model, routes, &profile, &test)?;
            let batches = test.batches(cfg.train.batch_size, &mut numcore::Rng::new(cfg.seed))?;
            let conflict = mean_conflict(&model, inference, &batches, &default_pairs(&model))?;
            println!("mean conflict on held-out batches: {conflict:.6}");
            let mut tables = vec![matrix_table("degradation", &deg.rows)];
            for (p, row) in deg.rows.iter().enumerate() {
                println!(
                    "prune task {p} ({} filters): {}",
                    deg.pruned[p],
                    fmt_row(row)
                );
            }
            if let Some(i) = &imps {
                let sim = similarity_matrix(&model, i)?;
                tables.push(matrix_table("similarity", &sim));
            }
            let dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("diagnose")
            });
            write_tables(&dir, &tables)
        }
        Cmd::Report { runs, out } => {
            let records = runs
                .iter()
                .map(|d| {
                    let p = if d.is_dir() {
                        d.join("record.json")
                    } else {
                        d.clone()
                    };
                    RunRecord::load(&p).with_context(|| format!("loading {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let tables = emit_report(&records)?;
            write_tables(
                &out.unwrap_or_else(|| root(&cli.output_root).join("report")),
                &tables,
            )
        }
    }
}

fn matrix_table(name: &str, rows: &[Vec<f64>]) -> Table {
    let k = rows.first().map_or(0, Vec::len);
    let mut header = vec!["row".to_string()];
    header.extend((0..k).map(|q| format!("task{q}")));
    Table {
        name: name.to_string(),
        header,
        rows: rows
            .iter()
            .enumerate()
            .map(|(p, r)| {
                std::iter::once(p.to_string())
                    .chain(r.iter().map(f64::to_string))
                    .collect()
            })
            .collect(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<drmgf::Error>())
                .map_or(1, |d| d.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
