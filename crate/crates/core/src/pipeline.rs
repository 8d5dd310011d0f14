//! End-to-end runs: reduction, partition, model, binding, metrics, detection,
//! and the report bundle written for each run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, PartitionConfig, PipelineConfig};
use crate::detection::{
    aggregate_score, kendall_tau, mann_whitney_u, pearson, rank_configurations, roc_auc, MetricRow,
    Orientation, ScoreAggregator, ScoredTrace, StatResult, TraceClass,
};
use crate::error::{Error, Result, Stage, StageExt};
use crate::hmm::{hmm_fit, hmm_perplexity, hmm_step_probabilities, Hmm, HmmFitParams};
use crate::markov::{dtmc_fit, perplexity, stationary_distribution, Dtmc};
use crate::metrics_model::{
    cov, cov_transitions, perp_divergence, sde, sen, sink_ratio, suc, ModelMetricsReport,
};
use crate::metrics_semantics::{
    ent_corpus, ivt, ndt, nvt, pre, sl_bounds, sl_from_flags, SemanticsMetricsReport,
};
use crate::partition::{
    abstract_traces, gmm_fit, grid_fit, kmeans_fit, AbstractTrace, HistoryComposer, Partitioner,
    ReducedTrace,
};
use crate::reduction::{pca_fit, PcaModel};
use crate::semantics::{
    bind_state_semantics, semantics_trace, transition_semantics_trace, SemanticsBinding,
    SemanticsMode,
};
use crate::trace_store::{Trace, TraceContainer};

/// Flat metric columns of `metrics.csv`, in order.
pub const METRIC_NAMES: [&str; 24] = [
    "suc",
    "cov_state",
    "cov_transition",
    "sen",
    "sink_ratio",
    "sde",
    "sde_raw",
    "perp_divergence",
    "pre",
    "pre_abs",
    "ent",
    "ent_raw",
    "ivt_normal",
    "ivt_abnormal",
    "nvt_normal",
    "nvt_abnormal",
    "ndt_normal",
    "ndt_abnormal",
    "sl",
    "auc",
    "auc_complement",
    "u_statistic",
    "p_value",
    "p_value_train_test_normal",
];

/// Metrics with an unambiguous better direction, usable for ranking.
pub fn default_orientations() -> BTreeMap<String, Orientation> {
    use Orientation::*;
    [
        ("suc", LowerBetter),
        ("cov_state", LowerBetter),
        ("cov_transition", LowerBetter),
        ("sen", LowerBetter),
        ("sink_ratio", LowerBetter),
        ("perp_divergence", HigherBetter),
        ("pre_abs", LowerBetter),
        ("ivt_normal", LowerBetter),
        ("ivt_abnormal", LowerBetter),
        ("nvt_normal", LowerBetter),
        ("nvt_abnormal", LowerBetter),
        ("auc", HigherBetter),
        ("p_value", LowerBetter),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn default_ranking_metrics() -> Vec<String> {
    ["cov_state", "sen", "auc"].map(String::from).to_vec()
}

/// Everything fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub pca: Option<PcaModel>,
    pub partitioner: Partitioner,
    pub history: usize,
    pub dtmc: Dtmc,
    pub hmm: Option<Hmm>,
    pub hmm_loglik_history: Vec<f64>,
    /// State-level binding, present whenever training semantics exist.
    pub binding: Option<SemanticsBinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub config_id: String,
    pub aggregator: ScoreAggregator,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Normal is the positive class.
    pub auc: f64,
    pub auc_complement: f64,
    pub normal_vs_abnormal: StatResult,
    pub train_normal_vs_test_normal: Option<StatResult>,
    pub score_label_pearson: Option<f64>,
    pub score_label_kendall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub normal: usize,
    pub abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub model: ModelRecord,
    pub model_metrics: ModelMetricsReport,
    pub semantics_metrics: SemanticsMetricsReport,
    pub scores: Vec<ScoredTrace>,
    pub stats: DetectionStats,
    pub histogram: Vec<HistogramBin>,
}

impl RunReport {
    pub fn metrics_row(&self) -> MetricRow {
        let m = &self.model_metrics;
        let s = &self.semantics_metrics;
        let st = &self.stats;
        let values = [
            m.suc,
            m.cov_state,
            m.cov_transition,
            m.sen,
            m.sink_ratio,
            m.sde_reported,
            m.sde_raw,
            m.perp_divergence,
            s.pre_mean_error,
            s.pre_mean_abs_error,
            s.ent_reported,
            s.ent_raw,
            s.ivt_normal,
            s.ivt_abnormal,
            s.nvt_normal,
            s.nvt_abnormal,
            s.ndt_normal,
            s.ndt_abnormal,
            s.sl_mean,
            st.auc,
            st.auc_complement,
            st.normal_vs_abnormal.statistic,
            st.normal_vs_abnormal.p_value,
            st.train_normal_vs_test_normal
                .map_or(f64::NAN, |r| r.p_value),
        ];
        MetricRow {
            config_id: self.config.id(),
            metrics: METRIC_NAMES
                .iter()
                .map(|k| k.to_string())
                .zip(values)
                .collect(),
        }
    }
}

/// Ground-truth semantics of a trace: per-position values, else its label
/// broadcast, else none.
fn ground_truth(trace: &Trace) -> Option<Vec<f64>> {
    match (&trace.state_semantics, trace.trace_label) {
        (Some(s), _) => Some(s.iter().map(|&v| v as f64).collect()),
        (None, Some(l)) => Some(vec![l as f64; trace.len()]),
        (None, None) => None,
    }
}

fn trace_class(trace: &Trace, threshold: f64) -> Option<TraceClass> {
    let value = match (trace.trace_label, &trace.state_semantics) {
        (Some(l), _) => l as f64,
        (None, Some(s)) if !s.is_empty() => {
            s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64
        }
        _ => return None,
    };
    Some(if value >= threshold {
        TraceClass::Normal
    } else {
        TraceClass::Abnormal
    })
}

fn reduce(pca: Option<&PcaModel>, container: &TraceContainer) -> Result<Vec<ReducedTrace>> {
    container
        .traces()
        .iter()
        .map(|t| {
            let raw = t.states_f64();
            let rows = match pca {
                Some(p) => p.transform(raw.view())?,
                None => raw,
            };
            Ok(ReducedTrace {
                rows,
                semantics: ground_truth(t),
            })
        })
        .collect()
}

fn stack(blocks: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

fn composed(composer: &HistoryComposer, traces: &[ReducedTrace]) -> Result<Array2<f64>> {
    let blocks = traces
        .iter()
        .map(|t| composer.compose(t.rows.view()))
        .collect::<Result<Vec<_>>>()?;
    stack(&blocks)
}

fn fit_partitioner(config: &PipelineConfig, rows: ArrayView2<f64>) -> Result<Partitioner> {
    let d = &config.defaults;
    Ok(match config.partition {
        PartitionConfig::Grid { m } => Partitioner::Grid(grid_fit(rows, m)?),
        PartitionConfig::KMeans { n } => Partitioner::Cluster(kmeans_fit(
            rows,
            n,
            config.seed,
            d.kmeans_max_iter,
            d.kmeans_tol,
        )?),
        PartitionConfig::Gmm { n } => Partitioner::Cluster(gmm_fit(
            rows,
            n,
            config.seed,
            d.gmm_max_iter,
            d.gmm_tol,
            d.gmm_var_floor,
        )?),
    })
}

/// Dense row-stochastic matrix of an HMM's hidden chain as a DTMC.
fn hidden_chain(hmm: &Hmm) -> Result<Dtmc> {
    let rows: Vec<Vec<f64>> = hmm.transition.outer_iter().map(|r| r.to_vec()).collect();
    Dtmc::from_dense(&rows)
}

struct Fitted {
    record: ModelRecord,
    train_abs: Vec<AbstractTrace>,
    test_abs: Vec<AbstractTrace>,
    train_positions: usize,
    test_rows: Array2<f64>,
}

fn fit(config: &PipelineConfig, train: &TraceContainer, test: &TraceContainer) -> Result<Fitted> {
    let pca = match config.pca_k {
        Some(k) => Some(pca_fit(train.stacked_states().view(), k).at(Stage::Reduction)?),
        None => None,
    };
    let train_red = reduce(pca.as_ref(), train).at(Stage::Reduction)?;
    let test_red = reduce(pca.as_ref(), test).at(Stage::Reduction)?;

    let composer = HistoryComposer::new(config.history).at(Stage::Partition)?;
    let train_rows = composed(&composer, &train_red).at(Stage::Partition)?;
    let test_rows = composed(&composer, &test_red).at(Stage::Partition)?;
    let partitioner = fit_partitioner(config, train_rows.view()).at(Stage::Partition)?;
    let train_abs = abstract_traces(&partitioner, &composer, &train_red).at(Stage::Partition)?;
    let test_abs = abstract_traces(&partitioner, &composer, &test_red).at(Stage::Partition)?;

    let dtmc = dtmc_fit(&train_abs).at(Stage::Model)?;
    let (hmm, hmm_loglik_history) = match config.model {
        ModelConfig::Dtmc => (None, Vec::new()),
        ModelConfig::Hmm { n_hidden } => {
            let d = &config.defaults;
            let params = HmmFitParams {
                n_hidden,
                seed: config.seed,
                max_iter: d.hmm_max_iter,
                tol: d.hmm_tol,
                floor: d.hmm_floor,
                restarts: d.hmm_restarts,
            };
            let (h, hist) = hmm_fit(&train_abs, &params).at(Stage::Model)?;
            (Some(h), hist)
        }
    };

    let binding = if train_abs.iter().all(|t| t.semantics.is_some()) {
        Some(
            bind_state_semantics(&train_abs, config.defaults.unbound_semantics)
                .at(Stage::Binding)?,
        )
    } else if config.semantics == SemanticsMode::StateLevel {
        let missing = train_abs
            .iter()
            .position(|t| t.semantics.is_none())
            .unwrap_or(0);
        return Err(Error::MissingLabel(missing).at(Stage::Binding));
    } else {
        None
    };

    Ok(Fitted {
        train_positions: train_rows.nrows(),
        record: ModelRecord {
            pca,
            partitioner,
            history: config.history,
            dtmc,
            hmm,
            hmm_loglik_history,
            binding,
        },
        train_abs,
        test_abs,
        test_rows,
    })
}

/// Semantics trace of one abstract trace under the configured mode.
fn semantics_of(
    config: &PipelineConfig,
    model: &ModelRecord,
    states: &[crate::partition::StateId],
) -> Result<Vec<f64>> {
    match config.semantics {
        SemanticsMode::StateLevel => {
            let binding = model
                .binding
                .as_ref()
                .ok_or(Error::MissingLabel(0))?;
            semantics_trace(binding, states)
        }
        SemanticsMode::TransitionLevel => match &model.hmm {
            None => transition_semantics_trace(&model.dtmc, states, config.defaults.prob_floor),
            Some(hmm) => {
                if states.len() < 2 {
                    return Err(Error::TraceTooShort {
                        needed: 2,
                        got: states.len(),
                    });
                }
                let steps = hmm_step_probabilities(hmm, states, config.defaults.unk_floor);
                Ok(steps[1..].to_vec())
            }
        },
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean of `f` over traces long enough for it; shorter traces are skipped.
fn mean_where_defined(traces: &[&Vec<f64>], f: impl Fn(&[f64]) -> Result<f64>) -> f64 {
    let vals: Vec<f64> = traces.iter().filter_map(|t| f(t).ok()).collect();
    mean(&vals)
}

fn histogram(normal: &[f64], abnormal: &[f64], n_bins: usize) -> Vec<HistogramBin> {
    let all = normal.iter().chain(abnormal);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / n_bins as f64
    } else {
        0.0
    };
    let bin = |x: f64| {
        if width > 0.0 {
            (((x - lo) / width).floor() as usize).min(n_bins - 1)
        } else {
            0
        }
    };
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == n_bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            normal: 0,
            abnormal: 0,
        })
        .collect();
    normal.iter().for_each(|&x| bins[bin(x)].normal += 1);
    abnormal.iter().for_each(|&x| bins[bin(x)].abnormal += 1);
    bins
}

/// Runs every stage on a train/test pair. The result depends only on the
/// configuration and the input containers.
pub fn run_pipeline(
    config: &PipelineConfig,
    train: &TraceContainer,
    test: &TraceContainer,
) -> Result<RunReport> {
    config.validate().at(Stage::Load)?;
    if train.hidden_dim() != test.hidden_dim() {
        return Err(Error::DimMismatch {
            expected: train.hidden_dim(),
            got: test.hidden_dim(),
        }
        .at(Stage::Load));
    }
    let d = &config.defaults;
    let threshold = d.trend.good_threshold;
    let classes: Vec<TraceClass> = test
        .traces()
        .iter()
        .enumerate()
        .map(|(i, t)| trace_class(t, threshold).ok_or(Error::MissingLabel(i)))
        .collect::<Result<_>>()
        .at(Stage::Load)?;

    let fitted = fit(config, train, test)?;
    let model = &fitted.record;

    let test_sem: Vec<Vec<f64>> = fitted
        .test_abs
        .par_iter()
        .map(|t| semantics_of(config, model, &t.states))
        .collect::<Result<_>>()
        .at(Stage::Binding)?;
    let train_normal_sem: Vec<Vec<f64>> = fitted
        .train_abs
        .par_iter()
        .zip(train.traces())
        .filter(|(_, t)| trace_class(t, threshold) != Some(TraceClass::Abnormal))
        .map(|(a, _)| semantics_of(config, model, &a.states))
        .collect::<Result<_>>()
        .at(Stage::Binding)?;

    // model-wise metrics
    let (model_metrics, chain_states) = {
        let distinct: BTreeSet<_> = fitted
            .train_abs
            .iter()
            .flat_map(|t| t.states.iter())
            .collect();
        let test_states: Vec<_> = fitted
            .test_abs
            .iter()
            .flat_map(|t| t.states.iter().copied())
            .collect();
        let chain = match &model.hmm {
            Some(h) => hidden_chain(h),
            None => Ok(model.dtmc.clone()),
        }
        .at(Stage::Metrics)?;
        let stationary = stationary_distribution(&chain, d.stationary_max_iter, d.stationary_tol);
        let sde_report = sde(&chain, &stationary);
        let perps: Vec<f64> = fitted
            .test_abs
            .par_iter()
            .map(|t| match &model.hmm {
                Some(h) => Ok(hmm_perplexity(h, &t.states, d.unk_floor)),
                None => perplexity(&model.dtmc, &t.states, d.prob_floor),
            })
            .collect::<Result<_>>()
            .at(Stage::Metrics)?;
        let split = |class: TraceClass| -> Vec<f64> {
            perps
                .iter()
                .zip(&classes)
                .filter(|(_, &c)| c == class)
                .map(|(&p, _)| p)
                .collect()
        };
        let (pn, pa) = (split(TraceClass::Normal), split(TraceClass::Abnormal));
        let (perp_div, perp_rev) = if pn.is_empty() || pa.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                perp_divergence(&pn, &pa, d.perp_bins, d.perp_smoothing).at(Stage::Metrics)?,
                perp_divergence(&pa, &pn, d.perp_bins, d.perp_smoothing).at(Stage::Metrics)?,
            )
        };
        let report = ModelMetricsReport {
            suc: suc(distinct.len(), fitted.train_positions).at(Stage::Metrics)?,
            cov_state: cov(&test_states).at(Stage::Metrics)?,
            cov_transition: cov_transitions(&model.dtmc, &fitted.test_abs).unwrap_or(f64::NAN),
            sen: sen(
                fitted.test_rows.view(),
                &model.partitioner,
                d.sen_epsilon,
                d.sen_samples,
                config.seed,
            )
            .at(Stage::Metrics)?,
            sink_ratio: sink_ratio(&chain, d.sink_tol),
            synthesized_terminals: chain.synthesized_states().count(),
            sde_raw: sde_report.raw,
            sde_reported: sde_report.reported,
            stable_bound: sde_report.stable_bound,
            stochastic_bound: sde_report.stochastic_bound,
            perp_divergence: perp_div,
            perp_divergence_reverse: perp_rev,
        };
        (report, chain.n_states().max(model.dtmc.n_states()))
    };

    // semantics-wise metrics
    let semantics_metrics = {
        let t = &d.trend;
        let of = |class: TraceClass| -> Vec<&Vec<f64>> {
            test_sem
                .iter()
                .zip(&classes)
                .filter(|(_, &c)| c == class)
                .map(|(s, _)| s)
                .collect()
        };
        let (sn, sa) = (of(TraceClass::Normal), of(TraceClass::Abnormal));
        let pre_result = match &model.binding {
            Some(b) => pre(b, &fitted.test_abs).ok(),
            None => None,
        };
        let ent = ent_corpus(&test_sem).at(Stage::Metrics)?;
        let flags: Vec<Vec<bool>> = test_sem
            .iter()
            .map(|s| s.iter().map(|&v| v >= t.good_threshold).collect())
            .collect();
        let sl = sl_from_flags(&flags).map_or(f64::NAN, |r| r.sl_mean);
        let lengths: Vec<usize> = test_sem.iter().map(Vec::len).collect();
        let (sl_stable, sl_stochastic) =
            sl_bounds(chain_states, &lengths, t.good_threshold, config.seed)
                .unwrap_or((f64::NAN, f64::NAN));
        SemanticsMetricsReport {
            pre_mean_error: pre_result.map_or(f64::NAN, |p| p.signed_mean),
            pre_mean_abs_error: pre_result.map_or(f64::NAN, |p| p.mean_abs),
            ent_raw: ent.raw,
            ent_reported: ent.reported,
            ent_stable_bound: ent.stable_bound,
            ent_stochastic_bound: ent.stochastic_bound,
            ivt_normal: mean_where_defined(&sn, |s| ivt(s, t.v_normal)),
            ivt_abnormal: mean_where_defined(&sa, |s| ivt(s, t.v_abnormal)),
            nvt_normal: mean_where_defined(&sn, |s| nvt(s, t.v_normal, t.n_window)),
            nvt_abnormal: mean_where_defined(&sa, |s| nvt(s, t.v_abnormal, t.n_window)),
            ndt_normal: mean_where_defined(&sn, |s| ndt(s, t.n_window).map(|r| r.diff as f64)),
            ndt_abnormal: mean_where_defined(&sa, |s| ndt(s, t.n_window).map(|r| r.diff as f64)),
            sl_mean: sl,
            sl_stable_bound: sl_stable,
            sl_stochastic_bound: sl_stochastic,
            config: *t,
        }
    };

    // detection
    let scores: Vec<ScoredTrace> = test_sem
        .iter()
        .zip(&classes)
        .enumerate()
        .map(|(i, (s, &label))| {
            Ok(ScoredTrace {
                trace_index: i,
                score: aggregate_score(s, d.score_aggregator)?,
                label,
            })
        })
        .collect::<Result<_>>()
        .at(Stage::Detection)?;
    let pick = |class: TraceClass| -> Vec<f64> {
        scores
            .iter()
            .filter(|s| s.label == class)
            .map(|s| s.score)
            .collect()
    };
    let (normal, abnormal) = (pick(TraceClass::Normal), pick(TraceClass::Abnormal));
    let auc = roc_auc(&normal, &abnormal).at(Stage::Detection)?;
    let train_normal: Vec<f64> = train_normal_sem
        .iter()
        .map(|s| aggregate_score(s, d.score_aggregator))
        .collect::<Result<_>>()
        .at(Stage::Detection)?;
    let all_scores: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let indicator: Vec<f64> = scores
        .iter()
        .map(|s| {
            if s.label == TraceClass::Normal {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let stats = DetectionStats {
        config_id: config.id(),
        aggregator: d.score_aggregator,
        n_normal: normal.len(),
        n_abnormal: abnormal.len(),
        auc,
        auc_complement: 1.0 - auc,
        normal_vs_abnormal: mann_whitney_u(&normal, &abnormal).at(Stage::Detection)?,
        train_normal_vs_test_normal: if normal.is_empty() {
            None
        } else {
            mann_whitney_u(&train_normal, &normal).ok()
        },
        score_label_pearson: pearson(&all_scores, &indicator).ok(),
        score_label_kendall: kendall_tau(&all_scores, &indicator).ok(),
    };
    let histogram = histogram(&normal, &abnormal, d.score_hist_bins);

    Ok(RunReport {
        config: config.clone(),
        model: fitted.record,
        model_metrics,
        semantics_metrics,
        scores,
        stats,
        histogram,
    })
}

/// Decimal rendering used in every CSV; NaN and infinities are spelled out.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::IoFailure(std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::IoFailure(std::io::Error::other(e.to_string())))
}

pub(crate) fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    fs::write(path, csv_bytes(header, rows)?)?;
    Ok(())
}

pub(crate) fn metrics_csv(
    path: &Path,
    rows: &[MetricRow],
    extra: &[(&str, Vec<String>)],
) -> Result<()> {
    let mut header = vec!["config_id".to_string()];
    header.extend(extra.iter().map(|(k, _)| k.to_string()));
    header.extend(METRIC_NAMES.iter().map(|s| s.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut line = vec![r.config_id.clone()];
            line.extend(extra.iter().map(|(_, col)| col[i].clone()));
            line.extend(
                METRIC_NAMES
                    .iter()
                    .map(|k| fmt_value(r.metrics.get(*k).copied().unwrap_or(f64::NAN))),
            );
            line
        })
        .collect();
    write_csv(path, &header, &body)
}

pub(crate) fn ranking_csv(path: &Path, ranked: &[(String, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .enumerate()
        .map(|(i, (id, score))| vec![(i + 1).to_string(), id.clone(), fmt_value(*score)])
        .collect();
    write_csv(
        path,
        &["rank", "config_id", "score"].map(String::from),
        &rows,
    )
}

/// Writes the report bundle directory.
pub fn write_bundle(report: &RunReport, dir: &Path) -> Result<()> {
    let write = || -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), to_json(&report.config)?)?;
        fs::write(dir.join("model.json"), to_json(&report.model)?)?;
        let row = report.metrics_row();
        metrics_csv(&dir.join("metrics.csv"), std::slice::from_ref(&row), &[])?;

        let score_rows: Vec<Vec<String>> = report
            .scores
            .iter()
            .map(|s| {
                let label = match s.label {
                    TraceClass::Normal => "normal",
                    TraceClass::Abnormal => "abnormal",
                };
                vec![
                    s.trace_index.to_string(),
                    fmt_value(s.score),
                    label.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("scores.csv"),
            &["trace_id", "score", "label"].map(String::from),
            &score_rows,
        )?;

        let stats = serde_json::json!({
            "detection": report.stats,
            "model_metrics": report.model_metrics,
            "semantics_metrics": report.semantics_metrics,
        });
        fs::write(dir.join("stats.json"), to_json(&stats)?)?;

        let selected: Vec<String> = default_ranking_metrics()
            .into_iter()
            .filter(|m| row.metrics.get(m).is_some_and(|v| v.is_finite()))
            .collect();
        let ranked = rank_configurations(&[row], &selected, &default_orientations())?;
        ranking_csv(&dir.join("ranking.csv"), &ranked)?;

        let hist_rows: Vec<Vec<String>> = report
            .histogram
            .iter()
            .map(|b| {
                vec![
                    fmt_value(b.lo),
                    fmt_value(b.hi),
                    b.normal.to_string(),
                    b.abnormal.to_string(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("scores_hist.csv"),
            &["bin_lo", "bin_hi", "normal", "abnormal"].map(String::from),
            &hist_rows,
        )
    };
    write().at(Stage::Report)
}

/// Human-readable summary of a bundle directory.
fn pretty_number(raw: &str) -> String {
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v != 0.0 && v.fract() != 0.0 => {
            if v.abs() < 1e-3 {
                format!("{v:.4e}")
            } else {
                format!("{v:.6}")
            }
        }
        _ => raw.to_string(),
    }
}

fn pretty_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Number(n) => pretty_number(&n.to_string()),
        other => other.to_string(),
    }
}

pub fn render_bundle(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<String> { Ok(fs::read_to_string(dir.join(name))?) };
    let render = || -> Result<String> {
        let config: serde_json::Value = serde_json::from_str(&read("config.json")?)?;
        let stats: serde_json::Value = serde_json::from_str(&read("stats.json")?)?;
        let metrics = read("metrics.csv")?;
        let ranking = read("ranking.csv")?;
        let mut out = String::new();
        let det = &stats["detection"];
        out.push_str(&format!("bundle     {}\n", dir.display()));
        out.push_str(&format!(
            "config     {}\n",
            det["config_id"].as_str().unwrap_or("?")
        ));
        out.push_str(&format!("seed       {}\n", config["seed"]));
        out.push_str(&format!(
            "traces     {} normal, {} abnormal\n",
            det["n_normal"], det["n_abnormal"]
        ));
        out.push_str(&format!(
            "roc auc    {} (complement {})\n",
            pretty_json(&det["auc"]),
            pretty_json(&det["auc_complement"])
        ));
        let mw = &det["normal_vs_abnormal"];
        out.push_str(&format!(
            "u test     U = {}, p = {} ({})\n",
            pretty_json(&mw["statistic"]),
            pretty_json(&mw["p_value"]),
            mw["method"].as_str().unwrap_or("?")
        ));
        out.push_str("\nmetrics\n");
        let mut lines = metrics.lines();
        if let (Some(h), Some(v)) = (lines.next(), lines.next()) {
            for (k, v) in h.split(',').zip(v.split(',')) {
                out.push_str(&format!("  {k:<28}{}\n", pretty_number(v)));
            }
        }
        out.push_str("\nranking\n");
        for line in ranking.lines().skip(1) {
            out.push_str(&format!("  {line}\n"));
        }
        Ok(out)
    };
    render().at(Stage::Report)
}
