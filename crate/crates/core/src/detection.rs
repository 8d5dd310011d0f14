//! Detection scores and the statistics used to evaluate them.
//!
//! Polarity: normal traces are the positive class, so a higher semantics
//! score means "more normal".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest pooled sample size for which the U test is enumerated exactly.
pub const EXACT_U_MAX_POOLED: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregator {
    #[default]
    Mean,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceClass {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub trace_index: usize,
    pub score: f64,
    pub label: TraceClass,
}

pub fn semantics_score(trace: &[f64]) -> Result<f64> {
    aggregate_score(trace, ScoreAggregator::Mean)
}

pub fn aggregate_score(trace: &[f64], how: ScoreAggregator) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("semantics trace".into()));
    }
    Ok(match how {
        ScoreAggregator::Mean => trace.iter().sum::<f64>() / trace.len() as f64,
        ScoreAggregator::Product => trace.iter().product(),
    })
}

/// Average (mid-)ranks, 1-based, of the concatenation of `a` and `b`.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their average
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        tie_sizes.push(end - start);
        start = end;
    }
    (ranks, tie_sizes)
}

fn u_statistic(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<usize>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let n = a.len() as f64;
    let rank_sum: f64 = ranks[..a.len()].iter().sum();
    (rank_sum - n * (n + 1.0) / 2.0, ranks, ties)
}

/// ROC AUC with normal as the positive class: `P(normal > abnormal) + P(tie)/2`.
pub fn roc_auc(normal: &[f64], abnormal: &[f64]) -> Result<f64> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::EmptyInput(
            "both score samples must be non-empty".into(),
        ));
    }
    if normal.iter().chain(abnormal).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("detection scores".into()));
    }
    let (u, _, _) = u_statistic(normal, abnormal);
    Ok(u / (normal.len() as f64 * abnormal.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMethod {
    Exact,
    NormalApprox,
    /// All pooled values identical; p is 1 by convention.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: StatMethod,
}

/// Enumerates every assignment of `n_a` of the pooled ranks to the first
/// sample and counts those at least as far from the null mean as `u_obs`.
fn exact_two_sided_p(ranks: &[f64], n_a: usize, u_obs: f64) -> f64 {
    fn walk(ranks: &[f64], start: usize, left: usize, sum: f64, visit: &mut dyn FnMut(f64)) {
        if left == 0 {
            visit(sum);
            return;
        }
        for i in start..=ranks.len() - left {
            walk(ranks, i + 1, left - 1, sum + ranks[i], visit);
        }
    }
    let n = n_a as f64;
    let n_b = (ranks.len() - n_a) as f64;
    let mean = n * n_b / 2.0;
    let observed = (u_obs - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    walk(ranks, 0, n_a, 0.0, &mut |rank_sum| {
        let u = rank_sum - n * (n + 1.0) / 2.0;
        total += 1;
        // U values are multiples of 1/2, so this comparison is exact.
        if (u - mean).abs() >= observed {
            extreme += 1;
        }
    });
    extreme as f64 / total as f64
}

/// Two-sided Mann-Whitney U test. The statistic is `U` of sample `a`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("both samples must be non-empty".into()));
    }
    let (u, ranks, ties) = u_statistic(a, b);
    if ties.len() == 1 {
        return Ok(StatResult {
            statistic: u,
            p_value: 1.0,
            method: StatMethod::Degenerate,
        });
    }
    let total = a.len() + b.len();
    if total <= EXACT_U_MAX_POOLED {
        return Ok(StatResult {
            statistic: u,
            p_value: exact_two_sided_p(&ranks, a.len(), u),
            method: StatMethod::Exact,
        });
    }
    let (n, m, big_n) = (a.len() as f64, b.len() as f64, total as f64);
    let tie_term: f64 = ties
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / (big_n * (big_n - 1.0));
    let variance = n * m / 12.0 * ((big_n + 1.0) - tie_term);
    let z = (((u - n * m / 2.0).abs() - 0.5).max(0.0)) / variance.sqrt();
    Ok(StatResult {
        statistic: u,
        p_value: erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0),
        method: StatMethod::NormalApprox,
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least 2 pairs".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall's tau-b by pair counting.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("kendall needs at least 2 pairs".into()));
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + tie_x) as f64;
    let n1 = (concordant + discordant + tie_y) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::AllTied);
    }
    Ok(((concordant - discordant) as f64 / (n0 * n1).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// One configuration's metric values, keyed by metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub config_id: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Normalized rank in `[0, 1]` (1 = best) of each value; ties share the average.
fn normalized_ranks(values: &[f64], orientation: Orientation) -> Vec<f64> {
    let oriented: Vec<f64> = match orientation {
        Orientation::HigherBetter => values.to_vec(),
        Orientation::LowerBetter => values.iter().map(|v| -v).collect(),
    };
    let (ranks, _) = midranks(&oriented);
    let n = values.len();
    if n == 1 {
        return vec![1.0];
    }
    ranks.iter().map(|r| (r - 1.0) / (n - 1) as f64).collect()
}

/// Sums per-metric normalized ranks and sorts configurations best first.
/// Equal aggregates are ordered by configuration id.
pub fn rank_configurations(
    table: &[MetricRow],
    selected: &[String],
    orientations: &BTreeMap<String, Orientation>,
) -> Result<Vec<(String, f64)>> {
    let mut scores = vec![0.0; table.len()];
    for metric in selected {
        let orientation = *orientations
            .get(metric)
            .ok_or_else(|| Error::UnknownMetric(metric.clone()))?;
        let values: Vec<f64> = table
            .iter()
            .map(|row| {
                row.metrics
                    .get(metric)
                    .copied()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::UnknownMetric(format!("{metric} in {}", row.config_id)))
            })
            .collect::<Result<_>>()?;
        for (s, r) in scores
            .iter_mut()
            .zip(normalized_ranks(&values, orientation))
        {
            *s += r;
        }
    }
    let mut ranked: Vec<(String, f64)> = table
        .iter()
        .map(|r| r.config_id.clone())
        .zip(scores)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}
