//! Run matrix over splits, strategies and seeds, with per-cell aggregation
//! and file outputs.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_world, split, SplitKind, SplitSpec, StDataset, WorldConfig};
use crate::error::{Error, Result};
use crate::flow::{train_inverse_surrogate, ChainTrainConfig, TrainedChain};
use crate::losses::LocationId;
use crate::pipelines::{train, Metrics, ModelKind, Strategy, StrategySpec, TrainConfig};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;

/// Spread reported after each mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    /// Sample standard deviation.
    #[default]
    Std,
    /// Standard error of the mean.
    Stderr,
}

impl std::str::FromStr for Agg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "std" => Ok(Agg::Std),
            "stderr" => Ok(Agg::Stderr),
            other => Err(Error::config(format!(
                "unknown aggregation `{other}` (std or stderr)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub world_seed: u64,
    pub splits: Vec<SplitSpec>,
    pub strategies: Vec<Strategy>,
    pub model: ModelKind,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub chain: ChainTrainConfig,
    pub agg: Agg,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig {
                time_stride: 15,
                ..WorldConfig::default()
            },
            world_seed: 0,
            splits: [
                SplitKind::GeoRegion,
                SplitKind::TemperatureZone,
                SplitKind::RandomGroups,
            ]
            .into_iter()
            .map(SplitKind::default_spec)
            .collect(),
            strategies: Strategy::ALL.to_vec(),
            model: ModelKind::Fnn,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            chain: ChainTrainConfig {
                batch: 32,
                prior_samples: 3000,
                ..ChainTrainConfig::default()
            },
            agg: Agg::Std,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("an experiment needs at least one seed"));
        }
        if self.splits.is_empty() || self.strategies.is_empty() {
            return Err(Error::config(
                "an experiment needs at least one split and one strategy",
            ));
        }
        let mut names: Vec<String> = self.splits.iter().map(split_name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.splits.len() {
            return Err(Error::config(
                "two splits share a name; give them distinct parameters",
            ));
        }
        for s in &self.strategies {
            StrategySpec::new(*s).validate()?;
        }
        Ok(())
    }

    /// Every (split, strategy, seed) cell in output order.
    pub fn plan(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for sp in &self.splits {
            for &strategy in &self.strategies {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        split: split_name(sp),
                        strategy,
                        seed,
                    });
                }
            }
        }
        cells
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            ..self.train.clone()
        }
    }
}

/// Name of a split in outputs: its kind, plus its parameter when it
/// differs from the default.
pub fn split_name(spec: &SplitSpec) -> String {
    let kind = spec.kind();
    if *spec == kind.default_spec() {
        kind.as_str().to_string()
    } else {
        let params = serde_json::to_value(spec).unwrap_or_default();
        let extra: Vec<String> = params
            .as_object()
            .map(|m| {
                m.iter()
                    .filter(|(k, _)| k.as_str() != "kind")
                    .map(|(k, v)| format!("{k}={}", v.to_string().trim_matches('"')))
                    .collect()
            })
            .unwrap_or_default();
        format!("{}[{}]", kind.as_str(), extra.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub split: String,
    pub strategy: Strategy,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} / {} / seed {}",
            self.split,
            self.strategy.as_str(),
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationError {
    pub location_id: LocationId,
    pub lat: f64,
    pub lon: f64,
    pub n: usize,
    pub mean_abs_error: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Ok {
        metrics: Metrics,
        locations: Vec<LocationError>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: Outcome,
    pub seconds: f64,
}

impl CellResult {
    pub fn metrics(&self) -> Option<&Metrics> {
        match &self.outcome {
            Outcome::Ok { metrics, .. } => Some(metrics),
            Outcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub spread: f64,
}

impl Spread {
    fn of(v: &[f64], agg: Agg) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let spread = match agg {
            Agg::Std => sd,
            Agg::Stderr => sd / n.sqrt(),
        };
        Some(Spread { mean, spread })
    }

    /// Table form, e.g. `2.04 (±0.19)`.
    pub fn table(&self) -> String {
        format!("{:.2} (±{:.2})", self.mean, self.spread)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub split: String,
    pub strategy: Strategy,
    pub runs: usize,
    pub failed: usize,
    pub rmse: Option<Spread>,
    pub pearson: Option<Spread>,
    pub fairness: Option<Spread>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub split: String,
    pub forward_rmse: Option<f64>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub chains: Vec<ChainSummary>,
}

impl ExperimentResults {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.metrics().is_none()).count()
    }

    /// Metrics of every successful run of `strategy` on `split` (all splits
    /// when `None`).
    pub fn runs(&self, split: Option<&str>, strategy: Strategy) -> Vec<&Metrics> {
        self.cells
            .iter()
            .filter(|c| c.cell.strategy == strategy && split.is_none_or(|s| c.cell.split == s))
            .filter_map(CellResult::metrics)
            .collect()
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

fn location_errors(test: &StDataset, preds: &[f64]) -> Vec<LocationError> {
    let mut by: std::collections::BTreeMap<LocationId, (usize, f64, f64)> = Default::default();
    for ((&l, p), t) in test.locations().iter().zip(preds).zip(test.labels()) {
        let e = by.entry(l).or_default();
        e.0 += 1;
        e.1 += (p - t).abs();
        e.2 += (p - t) * (p - t);
    }
    by.into_iter()
        .map(|(l, (n, abs, sq))| {
            let st = test.station(l);
            LocationError {
                location_id: l,
                lat: st.map_or(f64::NAN, |s| s.lat),
                lon: st.map_or(f64::NAN, |s| s.lon),
                n,
                mean_abs_error: abs / n as f64,
                rmse: (sq / n as f64).sqrt(),
            }
        })
        .collect()
}

struct Prepared {
    name: String,
    train: StDataset,
    test: StDataset,
    chain: Option<std::result::Result<TrainedChain, String>>,
}

fn run_cell(cfg: &ExperimentConfig, p: &Prepared, cell: &Cell) -> Outcome {
    let go = || -> Result<Outcome> {
        let chain = match &p.chain {
            Some(Ok(c)) => Some(c),
            Some(Err(e)) if cell.strategy.needs_chain() => {
                return Err(Error::config(format!("inverse chain training failed: {e}")))
            }
            _ => None,
        };
        let (model, _) = train(
            &StrategySpec::new(cell.strategy),
            &p.train,
            &p.test.test_features(),
            chain,
            &cfg.train_config(),
            cell.seed,
        )?;
        let preds = model.predict_dataset(&p.test)?;
        let metrics =
            crate::pipelines::compute_metrics(p.test.locations(), &preds, p.test.labels())?;
        Ok(Outcome::Ok {
            metrics,
            locations: location_errors(&p.test, &preds),
        })
    };
    go().unwrap_or_else(|e| Outcome::Failed {
        error: e.to_string(),
    })
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for sp in &cfg.splits {
        let name = split_name(sp);
        for &strategy in &cfg.strategies {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.cell.split == name && c.cell.strategy == strategy)
                .collect();
            let ok: Vec<&Metrics> = group.iter().filter_map(|c| c.metrics()).collect();
            let col = |f: fn(&Metrics) -> f64| {
                Spread::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>(), cfg.agg)
            };
            rows.push(SummaryRow {
                split: name.clone(),
                strategy,
                runs: group.len(),
                failed: group.len() - ok.len(),
                rmse: col(|m| m.rmse),
                pearson: col(|m| m.pearson),
                fairness: col(|m| m.fairness),
            });
        }
    }
    rows
}

/// Runs every cell of the matrix on up to `jobs` threads. A failing cell
/// is recorded as failed and the others still run.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResults> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let world = generate_world(&cfg.world, cfg.world_seed)?;
        let needs_chain = cfg.strategies.iter().any(|s| s.needs_chain());
        let model = cfg.world.sim.model();
        let prepared: Vec<Prepared> = cfg
            .splits
            .par_iter()
            .map(|sp| -> Result<Prepared> {
                let (train, test) = split(&world, sp)?;
                let chain = if needs_chain {
                    let states = train.sim_states(&model.state_names())?;
                    Some(
                        train_inverse_surrogate(model.as_ref(), &states, &cfg.chain)
                            .map_err(|e| e.to_string()),
                    )
                } else {
                    None
                };
                Ok(Prepared {
                    name: split_name(sp),
                    train,
                    test,
                    chain,
                })
            })
            .collect::<Result<_>>()?;
        let cells: Vec<CellResult> = cfg
            .plan()
            .into_par_iter()
            .map(|cell| {
                let t0 = Instant::now();
                let p = prepared
                    .iter()
                    .find(|p| p.name == cell.split)
                    .expect("planned from the same splits");
                let outcome = run_cell(cfg, p, &cell);
                CellResult {
                    cell,
                    outcome,
                    seconds: t0.elapsed().as_secs_f64(),
                }
            })
            .collect();
        let chains = prepared
            .iter()
            .filter_map(|p| match &p.chain {
                Some(Ok(c)) => Some(ChainSummary {
                    split: p.name.clone(),
                    forward_rmse: c.report.forward_rmse,
                    train_pairs: c.report.train_pairs,
                    holdout_pairs: c.report.holdout_pairs,
                }),
                _ => None,
            })
            .collect();
        Ok(ExperimentResults {
            summary: summarize(cfg, &cells),
            cells,
            chains,
        })
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_spread(s: &Option<Spread>) -> [String; 3] {
    match s {
        Some(s) => [s.table(), num(s.mean), num(s.spread)],
        None => [String::new(), String::new(), String::new()],
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// `runs.csv`: one row per cell.
pub fn runs_csv(res: &ExperimentResults) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "split",
            "strategy",
            "seed",
            "status",
            "rmse",
            "pearson",
            "pearson_defined",
            "fairness",
            "n",
            "error",
        ],
        res.cells.iter().map(|c| {
            let head = vec![
                c.cell.split.clone(),
                c.cell.strategy.as_str().into(),
                c.cell.seed.to_string(),
            ];
            let tail = match &c.outcome {
                Outcome::Ok { metrics: m, .. } => vec![
                    "ok".into(),
                    num(m.rmse),
                    num(m.pearson),
                    m.pearson_defined.to_string(),
                    num(m.fairness),
                    m.n.to_string(),
                    String::new(),
                ],
                Outcome::Failed { error } => {
                    let mut v = vec!["failed".to_string()];
                    v.extend(std::iter::repeat_n(String::new(), 5));
                    v.push(error.clone());
                    v
                }
            };
            head.into_iter().chain(tail).collect()
        }),
    )
}

/// `summary.csv`: one row per (split, strategy) with table-style columns
/// and the raw numbers behind them.
pub fn summary_csv(res: &ExperimentResults) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "split",
            "strategy",
            "runs",
            "failed",
            "rmse",
            "rmse_mean",
            "rmse_spread",
            "corr",
            "corr_mean",
            "corr_spread",
            "fairness",
            "fairness_mean",
            "fairness_spread",
        ],
        res.summary.iter().map(|r| {
            let mut v = vec![
                r.split.clone(),
                r.strategy.display_name().into(),
                r.runs.to_string(),
                r.failed.to_string(),
            ];
            v.extend(opt_spread(&r.rmse));
            v.extend(opt_spread(&r.pearson));
            v.extend(opt_spread(&r.fairness));
            v
        }),
    )
}

/// `location_errors.csv`: per-location absolute errors of every run.
pub fn location_errors_csv(res: &ExperimentResults) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for c in &res.cells {
        if let Outcome::Ok { locations, .. } = &c.outcome {
            for l in locations {
                rows.push(vec![
                    c.cell.split.clone(),
                    c.cell.strategy.as_str().into(),
                    c.cell.seed.to_string(),
                    l.location_id.to_string(),
                    num(l.lat),
                    num(l.lon),
                    l.n.to_string(),
                    num(l.mean_abs_error),
                    num(l.rmse),
                ]);
            }
        }
    }
    csv_bytes(
        &[
            "split",
            "strategy",
            "seed",
            "location_id",
            "lat",
            "lon",
            "n",
            "mean_abs_error",
            "rmse",
        ],
        rows,
    )
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    schema_version: u32,
    agg: Agg,
    cells: &'a [SummaryRow],
    chains: &'a [ChainSummary],
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub version: String,
    pub git_describe: String,
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes `runs.csv`, `summary.csv`, `summary.json`,
/// `location_errors.csv`, `manifest.json` and `timings.json` into `dir`.
/// Everything except `timings.json` depends only on the config.
pub fn write_outputs(cfg: &ExperimentConfig, res: &ExperimentResults, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("runs.csv"), runs_csv(res)?)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(res)?)?;
    std::fs::write(dir.join("location_errors.csv"), location_errors_csv(res)?)?;
    let summary = SummaryJson {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        agg: cfg.agg,
        cells: &res.summary,
        chains: &res.chains,
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    let manifest = Manifest {
        schema_version: EXPERIMENT_SCHEMA_VERSION,
        kind: "experiment-manifest".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        git_describe: git_describe(),
        config: cfg.clone(),
        cells: cfg.plan(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let timings: Vec<serde_json::Value> = res
        .cells
        .iter()
        .map(|c| serde_json::json!({"cell": c.cell, "seconds": c.seconds}))
        .collect();
    std::fs::write(
        dir.join("timings.json"),
        serde_json::to_vec_pretty(
            &serde_json::json!({"schema_version": EXPERIMENT_SCHEMA_VERSION, "cells": timings}),
        )?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_is_the_full_product() {
        let cfg = ExperimentConfig {
            splits: vec![SplitKind::GeoRegion.default_spec()],
            strategies: vec![Strategy::BaseNet, Strategy::RegFair],
            seeds: vec![0, 1],
            ..ExperimentConfig::default()
        };
        let plan = cfg.plan();
        assert_eq!(plan.len(), 4);
        assert_eq!(plan[0].to_string(), "geo-region / basenet / seed 0");
        assert_eq!(ExperimentConfig::default().plan().len(), 3 * 7 * 5);
    }

    #[test]
    fn spread_formats_like_a_table() {
        let s = Spread::of(&[1.0, 2.0, 3.0], Agg::Std).unwrap();
        assert_eq!(s.table(), "2.00 (±1.00)");
        let e = Spread::of(&[1.0, 2.0, 3.0], Agg::Stderr).unwrap();
        assert!((e.spread - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(Spread::of(&[4.0], Agg::Std).unwrap().spread, 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn validation() {
        let mut cfg = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![0];
        cfg.splits = vec![SplitKind::GeoRegion.default_spec(); 2];
        assert!(cfg.validate().is_err());
        cfg.splits = vec![
            SplitKind::GeoRegion.default_spec(),
            SplitSpec::GeoRegion {
                threshold_lon: -90.0,
            },
        ];
        cfg.validate().unwrap();
        assert_eq!(
            split_name(&cfg.splits[1]),
            "geo-region[threshold_lon=-90.0]"
        );
    }

    #[test]
    fn config_json_round_trip_and_partial() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seeds": [3], "strategies": ["basenet"]}"#).unwrap();
        assert_eq!(partial.seeds, vec![3]);
        assert_eq!(partial.splits.len(), 3);
    }

    #[test]
    fn failed_cells_are_kept() {
        let cfg = ExperimentConfig {
            world: WorldConfig {
                stations: 20,
                days: 30,
                time_stride: 3,
                ..WorldConfig::default()
            },
            splits: vec![SplitKind::GeoRegion.default_spec()],
            strategies: vec![Strategy::BaseNet, Strategy::SimFair],
            seeds: vec![0],
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            // a chain of the wrong width fails to train; SimFair then fails
            chain: ChainTrainConfig {
                chain: crate::flow::ChainConfig {
                    dim: 3,
                    ..crate::flow::ChainConfig::default()
                },
                epochs: 1,
                ..ChainTrainConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let res = run_experiment(&cfg, 1).unwrap();
        assert_eq!(res.cells.len(), 2);
        assert!(res.cells[0].metrics().is_some());
        assert!(matches!(res.cells[1].outcome, Outcome::Failed { .. }));
        assert_eq!(res.failed(), 1);
        let runs = String::from_utf8(runs_csv(&res).unwrap()).unwrap();
        assert!(runs.lines().nth(2).unwrap().contains("failed"));
        assert_eq!(res.summary[1].failed, 1);
        assert!(res.summary[1].rmse.is_none());
    }
}
