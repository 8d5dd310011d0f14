//! Abstract-model-wise quality metrics: SUC, COV, SEN, SS, SDE and PERP.

use ndarray::{Array1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::{classify_states, Dtmc, StationaryResult};
use crate::partition::{AbstractTrace, Partitioner, StateId};

/// Self-transition probability of the reference "stable" chain.
pub const STABLE_SELF_LOOP: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetricsReport {
    pub suc: f64,
    pub cov_state: f64,
    pub cov_transition: f64,
    pub sen: f64,
    pub sink_ratio: f64,
    pub synthesized_terminals: usize,
    pub sde_raw: f64,
    pub sde_reported: f64,
    pub stable_bound: f64,
    pub stochastic_bound: f64,
    /// KL(normal || abnormal) over perplexity histograms.
    pub perp_divergence: f64,
    /// KL(abnormal || normal), reported alongside.
    pub perp_divergence_reverse: f64,
}

/// State reduction rate `|abstract| / |concrete|`.
pub fn suc(n_abstract: usize, n_concrete: usize) -> Result<f64> {
    if n_abstract == 0 || n_concrete == 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(n_abstract as f64 / n_concrete as f64)
}

/// Fraction of test positions that fall outside the abstraction.
pub fn cov(test_assignments: &[StateId]) -> Result<f64> {
    if test_assignments.is_empty() {
        return Err(Error::EmptyInput("no test positions".into()));
    }
    let unseen = test_assignments.iter().filter(|s| s.is_unseen()).count();
    Ok(unseen as f64 / test_assignments.len() as f64)
}

/// Fraction of test transitions that never occurred in training.
pub fn cov_transitions(dtmc: &Dtmc, test_traces: &[AbstractTrace]) -> Result<f64> {
    let mut total = 0usize;
    let mut unseen = 0usize;
    for t in test_traces {
        for w in t.states.windows(2) {
            total += 1;
            if !dtmc.transition_counts().contains_key(&(w[0], w[1])) {
                unseen += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no test transitions".into()));
    }
    Ok(unseen as f64 / total as f64)
}

/// Proportion of rows whose abstract id changes under some small perturbation.
///
/// Each row gets `samples_per_state` offsets drawn uniformly from the unit
/// L-infinity ball, scaled per dimension by `epsilon * scale` where `scale`
/// is the partitioner's training standard deviation. Row `i` draws from
/// stream `i` of a generator seeded with `seed`, so for a fixed seed the
/// perturbation sets are nested in `epsilon`.
pub fn sen(
    rows: ArrayView2<f64>,
    partitioner: &Partitioner,
    epsilon: f64,
    samples_per_state: usize,
    seed: u64,
) -> Result<f64> {
    if rows.nrows() == 0 {
        return Err(Error::EmptyInput("no rows for sensitivity".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    if rows.ncols() != partitioner.dims() {
        return Err(Error::DimMismatch {
            expected: partitioner.dims(),
            got: rows.ncols(),
        });
    }
    let radius: Array1<f64> = partitioner.scale().mapv(|s| s * epsilon);
    let ball = radius.dot(&radius).sqrt();
    let changed: usize = (0..rows.nrows())
        .into_par_iter()
        .filter(|&i| {
            let row = rows.row(i);
            let base = partitioner.assign_row(row);
            if base.is_unseen() {
                return true;
            }
            if partitioner.stable_radius(row).is_some_and(|r| ball < r) {
                return false;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut perturbed = Array1::zeros(row.len());
            (0..samples_per_state).any(|_| {
                for j in 0..row.len() {
                    let u: f64 = rng.random_range(-1.0..=1.0);
                    perturbed[j] = row[j] + u * radius[j];
                }
                let id = partitioner.assign_row(perturbed.view());
                id != base || id.is_unseen()
            })
        })
        .count();
    Ok(changed as f64 / rows.nrows() as f64)
}

/// Ratio of observed sink states. Self-loops synthesized for terminal states
/// are not counted.
pub fn sink_ratio(dtmc: &Dtmc, tol: f64) -> f64 {
    let classes = classify_states(dtmc, tol);
    let sinks = dtmc
        .states()
        .iter()
        .enumerate()
        .filter(|&(i, s)| classes[s].sink && !dtmc.is_synthesized(i))
        .count();
    sinks as f64 / dtmc.n_states() as f64
}

/// Entropy rate of the `n`-state chain with self-loop 0.95 and the rest of
/// each row spread uniformly. Its stationary distribution is uniform, so the
/// rate equals the row entropy.
pub fn stable_entropy_bound(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let off = (1.0 - STABLE_SELF_LOOP) / (n - 1) as f64;
    -(STABLE_SELF_LOOP * STABLE_SELF_LOOP.ln() + (n - 1) as f64 * off * off.ln())
}

/// Entropy rate of the uniform-random chain, `ln n`.
pub fn stochastic_entropy_bound(n: usize) -> f64 {
    (n.max(1) as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeReport {
    pub raw: f64,
    pub stable_bound: f64,
    pub stochastic_bound: f64,
    pub reported: f64,
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub fn sde(dtmc: &Dtmc, stationary: &StationaryResult) -> SdeReport {
    let raw: f64 = (0..dtmc.n_states())
        .map(|i| -stationary.pi[i] * dtmc.row(i).iter().map(|&(_, p)| xlogx(p)).sum::<f64>())
        .sum();
    let n = dtmc.n_states();
    let stable_bound = stable_entropy_bound(n);
    let stochastic_bound = stochastic_entropy_bound(n);
    SdeReport {
        raw,
        stable_bound,
        stochastic_bound,
        reported: (stable_bound + stochastic_bound) / 2.0 - raw,
    }
}

/// Smoothed histograms of two samples over their pooled range.
pub fn shared_histograms(
    a: &[f64],
    b: &[f64],
    n_bins: usize,
    smoothing: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("histogram sample".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be >= 1".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; n_bins];
        for &x in xs {
            let bin = if hi > lo {
                (((x - lo) / (hi - lo) * n_bins as f64).floor() as usize).min(n_bins - 1)
            } else {
                0
            };
            h[bin] += 1.0;
        }
        let n = xs.len() as f64;
        let mut h: Vec<f64> = h.into_iter().map(|c| c / n + smoothing).collect();
        let s: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= s);
        h
    };
    Ok((hist(a), hist(b)))
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL(normal || abnormal) between smoothed perplexity histograms, in nats.
pub fn perp_divergence(
    normal: &[f64],
    abnormal: &[f64],
    n_bins: usize,
    smoothing: f64,
) -> Result<f64> {
    let (p, q) = shared_histograms(normal, abnormal, n_bins, smoothing)?;
    Ok(kl_divergence(&p, &q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{dtmc_fit, stationary_distribution};
    use crate::partition::{grid_fit, ClusterMethod, ClusterPartitioner, GridPartitioner};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand_distr::StandardNormal;

    fn tr(ids: &[u64]) -> AbstractTrace {
        AbstractTrace::new(ids.iter().map(|&i| StateId(i)).collect())
    }

    #[test]
    fn suc_values() {
        assert_eq!(suc(10, 100).unwrap(), 0.1);
        assert_eq!(suc(7, 7).unwrap(), 1.0);
        assert_eq!(suc(1, 1000).unwrap(), 0.001);
        assert!(matches!(suc(1, 0), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn cov_values() {
        assert_eq!(cov(&[StateId(0), StateId(1)]).unwrap(), 0.0);
        assert_eq!(cov(&[StateId::UNSEEN; 3]).unwrap(), 1.0);
        assert_eq!(
            cov(&[StateId(0), StateId::UNSEEN, StateId(0), StateId(2)]).unwrap(),
            0.25
        );
        assert!(cov(&[]).is_err());

        let d = dtmc_fit(&[tr(&[0, 1, 0])]).unwrap();
        assert_eq!(cov_transitions(&d, &[tr(&[0, 1, 0])]).unwrap(), 0.0);
        assert_eq!(cov_transitions(&d, &[tr(&[0, 1, 1])]).unwrap(), 0.5);
    }

    #[test]
    fn sen_cases() {
        let g = Partitioner::Grid(GridPartitioner {
            lo: vec![0.0],
            hi: vec![1.0],
            m: 2,
            scale: vec![1.0],
        });
        let rows = array![[0.499], [0.2]];
        assert_eq!(sen(rows.view(), &g, 0.01, 64, 1).unwrap(), 0.5);
        assert_eq!(sen(rows.view(), &g, 1e-15, 64, 1).unwrap(), 0.0);

        let c = Partitioner::Cluster(ClusterPartitioner {
            method: ClusterMethod::KMeans,
            centers: array![[0.0, 0.0]],
            gmm_weights: None,
            gmm_diag_variances: None,
            max_train_dist: 1.0,
            scale: array![1.0, 1.0],
            gmm_terms: Default::default(),
        });
        let near = array![[0.01, 0.0], [0.0, -0.02], [0.05, 0.05]];
        assert_eq!(sen(near.view(), &c, 0.01, 64, 3).unwrap(), 0.0);
        assert!(sen(Array2::zeros((0, 1)).view(), &g, 0.1, 4, 0).is_err());
    }

    #[test]
    fn sen_monotone_in_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((300, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let g = Partitioner::Grid(grid_fit(x.view(), 5).unwrap());
        let mut prev = 0.0;
        for eps in [0.001, 0.01, 0.05, 0.1, 0.3, 1.0] {
            let s = sen(x.view(), &g, eps, 16, 5).unwrap();
            assert!(s >= prev, "eps {eps}: {s} < {prev}");
            prev = s;
        }
    }

    #[test]
    fn sink_ratio_cases() {
        let d = dtmc_fit(&[tr(&[0, 1, 0, 1])]).unwrap();
        assert_eq!(sink_ratio(&d, 1e-9), 0.0);
        let d = dtmc_fit(&[tr(&[1, 0, 0])]).unwrap();
        assert_eq!(sink_ratio(&d, 1e-9), 0.5);
        let d = dtmc_fit(&[tr(&[0, 0]), tr(&[1, 1])]).unwrap();
        assert_eq!(sink_ratio(&d, 1e-9), 1.0);
        // a synthesized terminal self-loop does not count
        let d = dtmc_fit(&[tr(&[0, 1])]).unwrap();
        assert_eq!(sink_ratio(&d, 1e-9), 0.0);
    }

    #[test]
    fn sde_uniform_two_state() {
        let d = Dtmc::from_dense(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let r = sde(&d, &stationary_distribution(&d, 1000, 1e-14));
        assert_abs_diff_eq!(r.raw, 2f64.ln(), epsilon = 1e-12);
        // direct evaluation of the row entropy at p_ii = 0.95
        let stable = -(0.95f64 * 0.95f64.ln() + 0.05f64 * 0.05f64.ln());
        assert_abs_diff_eq!(r.stable_bound, stable, epsilon = 1e-15);
        assert_abs_diff_eq!(r.stable_bound, 0.198515, epsilon = 1e-6);
        assert_abs_diff_eq!(r.stochastic_bound, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.reported, -0.247316, epsilon = 1e-6);
    }

    #[test]
    fn entropy_bounds_ordered() {
        for n in 2..50 {
            assert!(stable_entropy_bound(n) <= stochastic_entropy_bound(n));
        }
        assert_eq!(stable_entropy_bound(1), 0.0);
        assert_eq!(stochastic_entropy_bound(1), 0.0);
    }

    #[test]
    fn perp_divergence_cases() {
        let a = [1.0, 2.0, 3.0, 2.5];
        assert_eq!(perp_divergence(&a, &a, 8, 1e-9).unwrap(), 0.0);
        let lo = [1.0; 10];
        let hi = [8.0; 10];
        let kl = perp_divergence(&lo, &hi, 4, 1e-9).unwrap();
        // almost all mass of p sits where q only has smoothing mass
        assert!(kl > 15.0, "{kl}");
        assert!(perp_divergence(&[], &a, 4, 1e-9).is_err());
    }

    #[test]
    fn perp_divergence_matches_hand_rolled_oracle() {
        fn oracle(a: &[f64], b: &[f64], bins: usize, eps: f64) -> f64 {
            let mut all: Vec<f64> = a.iter().chain(b.iter()).cloned().collect();
            all.sort_by(f64::total_cmp);
            let (lo, hi) = (all[0], all[all.len() - 1]);
            let width = (hi - lo) / bins as f64;
            let count = |xs: &[f64]| -> Vec<f64> {
                let mut c = vec![0usize; bins];
                for &x in xs {
                    let mut k = 0;
                    while k + 1 < bins && x >= lo + (k + 1) as f64 * width {
                        k += 1;
                    }
                    c[k] += 1;
                }
                let raw: Vec<f64> = c
                    .iter()
                    .map(|&n| n as f64 / xs.len() as f64 + eps)
                    .collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|v| v / z).collect()
            };
            let (p, q) = (count(a), count(b));
            let mut kl = 0.0;
            for k in 0..bins {
                kl += p[k] * (p[k].ln() - q[k].ln());
            }
            kl
        }
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let a: Vec<f64> = (0..40).map(|_| rng.random_range(1.0..5.0)).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.random_range(2.0..9.0)).collect();
            let got = perp_divergence(&a, &b, 10, 1e-6).unwrap();
            assert_abs_diff_eq!(got, oracle(&a, &b, 10, 1e-6), epsilon = 1e-12);
            assert!(got >= 0.0);
        }
    }
}
