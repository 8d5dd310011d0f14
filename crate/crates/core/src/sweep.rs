//! Hyperparameter sweeps: cartesian blocks of configurations, repeated seeds,
//! per-configuration averaging and cross-configuration summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PartitionConfig, PipelineConfig};
use crate::detection::{kendall_tau, pearson, rank_configurations, MetricRow, Orientation};
use crate::error::{Error, Result, Stage, StageExt};
use crate::pipeline::{
    default_orientations, default_ranking_metrics, fmt_value, metrics_csv, ranking_csv,
    run_pipeline, write_csv, METRIC_NAMES,
};
use crate::semantics::SemanticsMode;
use crate::trace_store::TraceContainer;

/// One cartesian block. Empty axes keep the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub pca_k: Vec<Option<usize>>,
    pub partition: Vec<PartitionConfig>,
    pub history: Vec<usize>,
    pub model: Vec<ModelConfig>,
    pub semantics: Vec<SemanticsMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingSpec {
    /// Metrics summed into the ranking score; defaults apply when empty.
    pub selected: Vec<String>,
    /// Overrides and additions to the default orientations.
    pub orientations: BTreeMap<String, Orientation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: PipelineConfig,
    #[serde(default)]
    pub blocks: Vec<SweepAxes>,
    /// Seeds each configuration runs with; the base seed when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ranking: RankingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Free-form annotations, carried into the summary.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn seeds(&self) -> Vec<u64> {
        axis(&self.seeds, self.base.seed)
    }

    /// Configurations in block order, each block expanded as
    /// pca x partition x history x model x semantics.
    pub fn expand(&self) -> Vec<PipelineConfig> {
        let default_block = [SweepAxes::default()];
        let blocks = if self.blocks.is_empty() {
            &default_block[..]
        } else {
            &self.blocks[..]
        };
        let b = &self.base;
        let mut out = Vec::new();
        for block in blocks {
            for &pca_k in &axis(&block.pca_k, b.pca_k) {
                for &partition in &axis(&block.partition, b.partition) {
                    for &history in &axis(&block.history, b.history) {
                        for &model in &axis(&block.model, b.model) {
                            for &semantics in &axis(&block.semantics, b.semantics) {
                                out.push(PipelineConfig {
                                    pca_k,
                                    partition,
                                    history,
                                    model,
                                    semantics,
                                    ..b.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "error", rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub config_id: String,
    pub seed: u64,
    pub status: RowStatus,
    pub metrics: BTreeMap<String, f64>,
}

/// Per-configuration row; metric values are means over its successful seeds.
/// A configuration with any failed seed is flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    pub config: PipelineConfig,
    pub status: RowStatus,
    pub seeds_ok: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric: String,
    pub pearson: Option<f64>,
    pub kendall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub raw: Vec<SeedRow>,
    pub ranking: Vec<(String, f64)>,
    /// Correlation of each metric with ROC AUC across successful configurations.
    pub correlations: Vec<Correlation>,
    /// Fraction of successful runs whose normal-vs-abnormal p-value is below 0.05.
    pub significant_proportion: f64,
}

fn mean_metrics(rows: &[&SeedRow]) -> BTreeMap<String, f64> {
    METRIC_NAMES
        .iter()
        .map(|&k| {
            let vals: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.metrics.get(k).copied())
                .collect();
            let m = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (k.to_string(), m)
        })
        .collect()
}

/// Runs every configuration for every seed. Individual failures are
/// recorded in the rows; the sweep itself fails only on an invalid grid.
pub fn run_sweep(
    grid: &SweepGrid,
    train: &TraceContainer,
    test: &TraceContainer,
) -> Result<SweepResult> {
    let configs = grid.expand();
    let seeds = grid.seeds();
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let raw: Vec<SeedRow> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = PipelineConfig {
                seed,
                ..configs[c].clone()
            };
            match run_pipeline(&cfg, train, test) {
                Ok(report) => SeedRow {
                    config_id: cfg.id(),
                    seed,
                    status: RowStatus::Ok,
                    metrics: report.metrics_row().metrics,
                },
                Err(e) => SeedRow {
                    config_id: cfg.id(),
                    seed,
                    status: RowStatus::Failed(e.to_string()),
                    metrics: BTreeMap::new(),
                },
            }
        })
        .collect();

    let rows: Vec<SweepRow> = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let runs = &raw[c * seeds.len()..(c + 1) * seeds.len()];
            let ok: Vec<&SeedRow> = runs.iter().filter(|r| r.status == RowStatus::Ok).collect();
            let status = runs
                .iter()
                .find_map(|r| match &r.status {
                    RowStatus::Failed(e) => {
                        Some(RowStatus::Failed(format!("seed {}: {e}", r.seed)))
                    }
                    RowStatus::Ok => None,
                })
                .unwrap_or(RowStatus::Ok);
            SweepRow {
                config_id: cfg.id(),
                config: cfg.clone(),
                status,
                seeds_ok: ok.len(),
                metrics: mean_metrics(&ok),
            }
        })
        .collect();

    let ok_rows: Vec<&SweepRow> = rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
    let mut orientations = default_orientations();
    orientations.extend(grid.ranking.orientations.clone());
    let selected = if grid.ranking.selected.is_empty() {
        default_ranking_metrics()
    } else {
        grid.ranking.selected.clone()
    };
    let table: Vec<MetricRow> = ok_rows
        .iter()
        .map(|r| MetricRow {
            config_id: r.config_id.clone(),
            metrics: r.metrics.clone(),
        })
        .collect();
    for m in &selected {
        if !orientations.contains_key(m) {
            return Err(Error::UnknownMetric(m.clone()));
        }
    }
    // metrics undefined for some configuration cannot rank the table
    let rankable: Vec<String> = selected
        .into_iter()
        .filter(|m| {
            table
                .iter()
                .all(|r| r.metrics.get(m).is_some_and(|v| v.is_finite()))
        })
        .collect();
    let ranking = if table.is_empty() {
        Vec::new()
    } else {
        rank_configurations(&table, &rankable, &orientations)?
    };

    let auc: Vec<f64> = ok_rows.iter().map(|r| r.metrics["auc"]).collect();
    let correlations = METRIC_NAMES
        .iter()
        .filter(|&&m| m != "auc" && m != "auc_complement")
        .map(|&m| {
            let (x, y): (Vec<f64>, Vec<f64>) = ok_rows
                .iter()
                .map(|r| r.metrics[m])
                .zip(auc.iter().copied())
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .unzip();
            Correlation {
                metric: m.to_string(),
                pearson: pearson(&x, &y).ok(),
                kendall: kendall_tau(&x, &y).ok(),
            }
        })
        .collect();

    let ok_runs: Vec<&SeedRow> = raw.iter().filter(|r| r.status == RowStatus::Ok).collect();
    let significant_proportion = if ok_runs.is_empty() {
        f64::NAN
    } else {
        ok_runs
            .iter()
            .filter(|r| r.metrics["p_value"] < 0.05)
            .count() as f64
            / ok_runs.len() as f64
    };

    Ok(SweepResult {
        rows,
        raw,
        ranking,
        correlations,
        significant_proportion,
    })
}

fn status_cells(statuses: impl Iterator<Item = RowStatus>) -> (Vec<String>, Vec<String>) {
    statuses
        .map(|s| match s {
            RowStatus::Ok => ("ok".to_string(), String::new()),
            RowStatus::Failed(e) => ("failed".to_string(), e),
        })
        .unzip()
}

/// Writes `metrics.csv`, `metrics_raw.csv`, `ranking.csv`,
/// `correlations.csv` and `summary.json` into `dir`.
pub fn write_sweep(result: &SweepResult, grid: &SweepGrid, dir: &Path) -> Result<()> {
    let write = || -> Result<()> {
        fs::create_dir_all(dir)?;
        let table: Vec<MetricRow> = result
            .rows
            .iter()
            .map(|r| MetricRow {
                config_id: r.config_id.clone(),
                metrics: r.metrics.clone(),
            })
            .collect();
        let (status, error) = status_cells(result.rows.iter().map(|r| r.status.clone()));
        let seeds_ok: Vec<String> = result.rows.iter().map(|r| r.seeds_ok.to_string()).collect();
        metrics_csv(
            &dir.join("metrics.csv"),
            &table,
            &[("status", status), ("seeds_ok", seeds_ok), ("error", error)],
        )?;

        let raw_table: Vec<MetricRow> = result
            .raw
            .iter()
            .map(|r| MetricRow {
                config_id: r.config_id.clone(),
                metrics: r.metrics.clone(),
            })
            .collect();
        let (status, error) = status_cells(result.raw.iter().map(|r| r.status.clone()));
        let seeds: Vec<String> = result.raw.iter().map(|r| r.seed.to_string()).collect();
        metrics_csv(
            &dir.join("metrics_raw.csv"),
            &raw_table,
            &[("seed", seeds), ("status", status), ("error", error)],
        )?;

        ranking_csv(&dir.join("ranking.csv"), &result.ranking)?;

        let opt = |v: Option<f64>| v.map_or(String::new(), fmt_value);
        let corr: Vec<Vec<String>> = result
            .correlations
            .iter()
            .map(|c| vec![c.metric.clone(), opt(c.pearson), opt(c.kendall)])
            .collect();
        write_csv(
            &dir.join("correlations.csv"),
            &["metric", "pearson_vs_auc", "kendall_vs_auc"].map(String::from),
            &corr,
        )?;

        let ok = result
            .rows
            .iter()
            .filter(|r| r.status == RowStatus::Ok)
            .count();
        let summary = serde_json::json!({
            "configurations": result.rows.len(),
            "configurations_ok": ok,
            "configurations_failed": result.rows.len() - ok,
            "seeds": grid.seeds(),
            "significant_proportion": result.significant_proportion,
            "best": result.ranking.first().map(|r| r.0.clone()),
            "notes": grid.notes,
        });
        let mut text = serde_json::to_string_pretty(&summary)?;
        text.push('\n');
        fs::write(dir.join("summary.json"), text)?;
        Ok(())
    };
    write().at(Stage::Report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SyntheticSourceSpec};

    fn data() -> (TraceContainer, TraceContainer) {
        let spec = SyntheticSourceSpec {
            n_source_states: 4,
            hidden_dim: 5,
            transition_normal: None,
            delta: 0.7,
            perturbation_shift: 1,
            means: None,
            mean_scale: 3.0,
            noise_sigma: 0.3,
            length_min: 5,
            length_max: 8,
            train_normal: 30,
            train_abnormal: 0,
            test_normal: 10,
            test_abnormal: 10,
        };
        synth_generate(&spec, 2).unwrap()
    }

    fn base() -> PipelineConfig {
        PipelineConfig {
            pca_k: Some(3),
            ..PipelineConfig::new(1, PartitionConfig::KMeans { n: 6 })
        }
    }

    fn grid(blocks: Vec<SweepAxes>, seeds: Vec<u64>) -> SweepGrid {
        SweepGrid {
            base: base(),
            blocks,
            seeds,
            ranking: RankingSpec::default(),
            train: None,
            test: None,
            notes: BTreeMap::new(),
        }
    }

    #[test]
    fn expansion_order_and_size() {
        let g = grid(
            vec![
                SweepAxes {
                    pca_k: vec![Some(2), Some(3)],
                    history: vec![1, 2],
                    ..Default::default()
                },
                SweepAxes {
                    partition: vec![PartitionConfig::Grid { m: 3 }],
                    ..Default::default()
                },
            ],
            vec![],
        );
        let ids: Vec<String> = g.expand().iter().map(|c| c.id()).collect();
        assert_eq!(
            ids,
            [
                "pca2-kmeans6-h1-dtmc-transition",
                "pca2-kmeans6-h2-dtmc-transition",
                "pca3-kmeans6-h1-dtmc-transition",
                "pca3-kmeans6-h2-dtmc-transition",
                "pca3-grid3-h1-dtmc-transition",
            ]
        );
        assert_eq!(g.seeds(), vec![1]);
    }

    #[test]
    fn failing_configuration_is_flagged() {
        let (train, test) = data();
        let g = grid(
            vec![SweepAxes {
                history: vec![1, 100],
                ..Default::default()
            }],
            vec![],
        );
        let r = run_sweep(&g, &train, &test).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].status, RowStatus::Ok);
        assert!(matches!(r.rows[1].status, RowStatus::Failed(_)));
        assert_eq!(r.ranking.len(), 1);

        let dir = tempfile::tempdir().unwrap();
        write_sweep(&r, &g, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().contains(",failed,"));
    }

    #[test]
    fn seed_means_and_raw_rows() {
        let (train, test) = data();
        let g = grid(
            vec![SweepAxes {
                partition: vec![
                    PartitionConfig::KMeans { n: 6 },
                    PartitionConfig::Gmm { n: 4 },
                ],
                ..Default::default()
            }],
            vec![1, 2, 3, 4, 5],
        );
        let r = run_sweep(&g, &train, &test).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.raw.len(), 10);
        for (c, row) in r.rows.iter().enumerate() {
            assert_eq!(row.seeds_ok, 5);
            let runs = &r.raw[c * 5..(c + 1) * 5];
            assert!(runs.iter().all(|s| s.config_id == row.config_id));
            for k in ["auc", "suc", "sen"] {
                let m = runs.iter().map(|s| s.metrics[k]).sum::<f64>() / 5.0;
                assert!((row.metrics[k] - m).abs() < 1e-12);
            }
        }
        let again = run_sweep(&g, &train, &test).unwrap();
        assert_eq!(
            serde_json::to_string(&again).unwrap(),
            serde_json::to_string(&r).unwrap()
        );
    }
}
