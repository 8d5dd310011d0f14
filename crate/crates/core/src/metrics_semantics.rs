//! Semantics-wise metrics: PRE, ENT, IVT, NVT, NDT and SL.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics_model::STABLE_SELF_LOOP;
use crate::partition::AbstractTrace;
use crate::semantics::SemanticsBinding;

/// Bernoulli probabilities are clamped to `[SL_EPS, 1 - SL_EPS]` before KL.
pub const SL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticsMetricsReport {
    pub pre_mean_error: f64,
    pub pre_mean_abs_error: f64,
    pub ent_raw: f64,
    pub ent_reported: f64,
    pub ent_stable_bound: f64,
    pub ent_stochastic_bound: f64,
    pub ivt_normal: f64,
    pub ivt_abnormal: f64,
    pub nvt_normal: f64,
    pub nvt_abnormal: f64,
    pub ndt_normal: f64,
    pub ndt_abnormal: f64,
    pub sl_mean: f64,
    pub sl_stable_bound: f64,
    pub sl_stochastic_bound: f64,
    pub config: TrendConfig,
}

/// Targets and window used by the trend and surprise metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendConfig {
    pub v_normal: f64,
    pub v_abnormal: f64,
    pub n_window: usize,
    pub good_threshold: f64,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            v_normal: 1.0,
            v_abnormal: 0.0,
            n_window: 2,
            good_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreResult {
    pub signed_mean: f64,
    pub mean_abs: f64,
}

/// Mean of (ground-truth semantics - bound abstract semantics) over all test
/// positions.
pub fn pre(binding: &SemanticsBinding, test_traces: &[AbstractTrace]) -> Result<PreResult> {
    let mut signed = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for (i, t) in test_traces.iter().enumerate() {
        let truth = t.semantics.as_ref().ok_or_else(|| {
            Error::MisalignedSemantics(format!("test trace {i} carries no ground truth"))
        })?;
        if truth.len() != t.states.len() {
            return Err(Error::MisalignedSemantics(format!(
                "test trace {i}: {} truths for {} states",
                truth.len(),
                t.states.len()
            )));
        }
        for (&s, &g) in t.states.iter().zip(truth) {
            let e = g - binding.value(s);
            signed += e;
            abs += e.abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no test positions".into()));
    }
    Ok(PreResult {
        signed_mean: signed / count as f64,
        mean_abs: abs / count as f64,
    })
}

/// `-sum theta ln theta` over a semantics trace, with `0 ln 0 = 0`.
pub fn ent(trace: &[f64]) -> f64 {
    -trace
        .iter()
        .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Per-position entropy of a semantics value held at 0.95.
pub fn ent_stable_bound() -> f64 {
    -STABLE_SELF_LOOP * STABLE_SELF_LOOP.ln()
}

/// Expected per-position entropy of uniformly random semantics,
/// `E[-U ln U] = 1/4` for `U ~ Uniform(0, 1)`.
pub fn ent_stochastic_bound() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntCorpus {
    pub raw: f64,
    pub stable_bound: f64,
    pub stochastic_bound: f64,
    pub reported: f64,
}

/// Corpus entropy: mean over traces of the length-normalized entropy.
pub fn ent_corpus(traces: &[Vec<f64>]) -> Result<EntCorpus> {
    let per: Vec<f64> = traces
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| ent(t) / t.len() as f64)
        .collect();
    if per.is_empty() {
        return Err(Error::EmptyInput("no semantics traces".into()));
    }
    let raw = per.iter().sum::<f64>() / per.len() as f64;
    let (stable_bound, stochastic_bound) = (ent_stable_bound(), ent_stochastic_bound());
    Ok(EntCorpus {
        raw,
        stable_bound,
        stochastic_bound,
        reported: (stable_bound + stochastic_bound) / 2.0 - raw,
    })
}

/// Instant value trend: `min_i |theta_i - v|`.
pub fn ivt(trace: &[f64], v: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::EmptyInput("semantics trace".into()));
    }
    Ok(trace
        .iter()
        .map(|t| (t - v).abs())
        .fold(f64::INFINITY, f64::min))
}

/// n-gram value trend: smallest sum of `|theta - v|` over `n` consecutive steps.
pub fn nvt(trace: &[f64], v: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("window n must be >= 1".into()));
    }
    if trace.len() < n {
        return Err(Error::TraceTooShort {
            needed: n,
            got: trace.len(),
        });
    }
    Ok(trace
        .windows(n)
        .map(|w| w.iter().map(|t| (t - v).abs()).sum::<f64>())
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdtResult {
    pub increasing: i64,
    pub decreasing: i64,
    pub diff: i64,
}

/// n-gram derivative trend over the left-derivative signs of the trace.
pub fn ndt(trace: &[f64], n: usize) -> Result<NdtResult> {
    if n == 0 {
        return Err(Error::InvalidConfig("window n must be >= 1".into()));
    }
    if trace.len() < n + 1 {
        return Err(Error::TraceTooShort {
            needed: n + 1,
            got: trace.len(),
        });
    }
    let signs: Vec<i64> = trace
        .windows(2)
        .map(|w| match w[1].partial_cmp(&w[0]) {
            Some(std::cmp::Ordering::Greater) => 1,
            Some(std::cmp::Ordering::Less) => -1,
            _ => 0,
        })
        .collect();
    let sums: Vec<i64> = signs.windows(n).map(|w| w.iter().sum()).collect();
    let increasing = *sums.iter().max().expect("at least one window");
    let decreasing = *sums.iter().min().expect("at least one window");
    Ok(NdtResult {
        increasing,
        decreasing,
        diff: (increasing - decreasing).abs(),
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(SL_EPS, 1.0 - SL_EPS)
}

/// KL(Bernoulli(p) || Bernoulli(q)) after clamping both.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlResult {
    pub sl_mean: f64,
    /// `(position, KL)` for every position with a defined posterior.
    pub per_position_kl: Vec<(usize, f64)>,
}

/// Surprise over binary good/bad flags, position by position.
///
/// For position `l`: the prior is `P(good_l)` over traces reaching `l`; the
/// posterior `P(good_l | good_{l+1})` is obtained through Bayes' rule from
/// `P(good_{l+1} | good_l)` and `P(good_{l+1})`, both over traces reaching
/// `l + 1`.
pub fn sl_from_flags(flags: &[Vec<bool>]) -> Result<SlResult> {
    let max_len = flags.iter().map(Vec::len).max().unwrap_or(0);
    let mut per_position_kl = Vec::new();
    for l in 0..max_len.saturating_sub(1) {
        let reach_l: Vec<&Vec<bool>> = flags.iter().filter(|f| f.len() > l).collect();
        let prior = reach_l.iter().filter(|f| f[l]).count() as f64 / reach_l.len() as f64;

        let reach_next: Vec<&Vec<bool>> = flags.iter().filter(|f| f.len() > l + 1).collect();
        let good_l: Vec<&&Vec<bool>> = reach_next.iter().filter(|f| f[l]).collect();
        let p_next =
            reach_next.iter().filter(|f| f[l + 1]).count() as f64 / reach_next.len() as f64;
        if good_l.is_empty() || p_next == 0.0 {
            continue;
        }
        let likelihood = good_l.iter().filter(|f| f[l + 1]).count() as f64 / good_l.len() as f64;
        let posterior = likelihood * prior / p_next;
        per_position_kl.push((l, bernoulli_kl(prior, posterior)));
    }
    if per_position_kl.is_empty() {
        return Err(Error::NoValidPositions);
    }
    let sl_mean =
        per_position_kl.iter().map(|(_, k)| k).sum::<f64>() / per_position_kl.len() as f64;
    Ok(SlResult {
        sl_mean,
        per_position_kl,
    })
}

/// Surprise of a corpus of abstract traces: a position is good when its bound
/// semantics reach `good_threshold`.
pub fn sl(
    traces: &[AbstractTrace],
    binding: &SemanticsBinding,
    good_threshold: f64,
) -> Result<SlResult> {
    let flags: Vec<Vec<bool>> = traces
        .iter()
        .map(|t| {
            t.states
                .iter()
                .map(|&s| binding.value(s) >= good_threshold)
                .collect()
        })
        .collect();
    sl_from_flags(&flags)
}

/// Surprise of traces simulated from a reference chain with per-state good flags.
fn simulated_sl(
    matrix: &[Vec<f64>],
    good: &[bool],
    lengths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = good.len();
    let flags: Vec<Vec<bool>> = lengths
        .iter()
        .map(|&len| {
            let mut s = rng.random_range(0..n);
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                out.push(good[s]);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = n - 1;
                for (j, &p) in matrix[s].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                s = next;
            }
            out
        })
        .collect();
    Ok(sl_from_flags(&flags).map(|r| r.sl_mean).unwrap_or(0.0))
}

/// Reference surprise levels `(stable, stochastic)` for an `n_states` model
/// with randomly assigned semantics, simulated over the given trace lengths.
///
/// The stochastic reference uses Dirichlet(1) transition rows; the stable
/// one keeps each state with probability 0.95.
pub fn sl_bounds(
    n_states: usize,
    lengths: &[usize],
    good_threshold: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_states == 0 || lengths.is_empty() {
        return Err(Error::EmptyInput("surprise reference model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let good: Vec<bool> = (0..n_states)
        .map(|_| rng.random::<f64>() >= good_threshold)
        .collect();
    let random_rows: Vec<Vec<f64>> = (0..n_states)
        .map(|_| {
            let d: Vec<f64> = (0..n_states).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = d.iter().sum();
            d.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let stable_rows: Vec<Vec<f64>> = (0..n_states)
        .map(|i| {
            if n_states == 1 {
                return vec![1.0];
            }
            let off = (1.0 - STABLE_SELF_LOOP) / (n_states - 1) as f64;
            (0..n_states)
                .map(|j| if i == j { STABLE_SELF_LOOP } else { off })
                .collect()
        })
        .collect();
    let stable = simulated_sl(&stable_rows, &good, lengths, &mut rng)?;
    let stochastic = simulated_sl(&random_rows, &good, lengths, &mut rng)?;
    Ok((stable, stochastic))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::StateId;
    use crate::semantics::SemanticsMode;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    #[test]
    fn pre_cases() {
        let b = SemanticsBinding {
            mode: SemanticsMode::StateLevel,
            state_values: BTreeMap::from([(StateId(0), 0.3)]),
            default_value: 0.0,
        };
        let t = AbstractTrace {
            states: vec![StateId(0)],
            semantics: Some(vec![0.5]),
        };
        let r = pre(&b, &[t]).unwrap();
        assert_abs_diff_eq!(r.signed_mean, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(r.mean_abs, 0.2, epsilon = 1e-15);

        // test == train, single state: deviations about the mean cancel
        let t = AbstractTrace {
            states: vec![StateId(0), StateId(0)],
            semantics: Some(vec![0.2, 0.4]),
        };
        let r = pre(&b, &[t.clone()]).unwrap();
        assert_abs_diff_eq!(r.signed_mean, 0.0, epsilon = 1e-15);

        let exact = AbstractTrace {
            states: vec![StateId(0)],
            semantics: Some(vec![0.3]),
        };
        assert_eq!(pre(&b, &[exact]).unwrap().signed_mean, 0.0);

        let bad = AbstractTrace {
            states: vec![StateId(0)],
            semantics: None,
        };
        assert!(matches!(
            pre(&b, &[bad]),
            Err(Error::MisalignedSemantics(_))
        ));
    }

    #[test]
    fn ent_cases() {
        assert_abs_diff_eq!(ent(&[0.5, 0.5]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(ent(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(ent(&[1.0, 0.0]), 0.0);
        let c = ent_corpus(&[vec![0.5, 0.5], vec![1.0]]).unwrap();
        assert_abs_diff_eq!(c.raw, 2f64.ln() / 4.0, epsilon = 1e-15);
        assert!(c.stable_bound < c.stochastic_bound);
    }

    #[test]
    fn stochastic_ent_bound_is_uniform_expectation() {
        // midpoint quadrature of -x ln x over (0, 1)
        let n = 200_000;
        let q: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                -x * x.ln()
            })
            .sum::<f64>()
            / n as f64;
        assert_abs_diff_eq!(q, ent_stochastic_bound(), epsilon = 1e-8);
    }

    #[test]
    fn value_trends() {
        let t = [0.2, 0.9, 0.5];
        assert_abs_diff_eq!(ivt(&t, 1.0).unwrap(), 0.1, epsilon = 1e-15);
        assert_eq!(ivt(&[0.4, 0.7], 0.7).unwrap(), 0.0);
        assert_eq!(ivt(&[0.3], 0.0).unwrap(), 0.3);
        assert!(ivt(&[], 0.0).is_err());

        assert_abs_diff_eq!(nvt(&t, 1.0, 2).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(nvt(&t, 1.0, 3).unwrap(), 0.8 + 0.1 + 0.5, epsilon = 1e-15);
        assert_eq!(nvt(&[0.4; 5], 0.4, 3).unwrap(), 0.0);
        assert!(matches!(nvt(&t, 1.0, 4), Err(Error::TraceTooShort { .. })));
    }

    #[test]
    fn derivative_trends() {
        assert_eq!(
            ndt(&[0.1, 0.2, 0.3, 0.1], 2).unwrap(),
            NdtResult {
                increasing: 2,
                decreasing: 0,
                diff: 2
            }
        );
        assert_eq!(
            ndt(&[0.1, 0.2, 0.3, 0.4], 2).unwrap(),
            NdtResult {
                increasing: 2,
                decreasing: 2,
                diff: 0
            }
        );
        assert_eq!(
            ndt(&[0.5; 4], 2).unwrap(),
            NdtResult {
                increasing: 0,
                decreasing: 0,
                diff: 0
            }
        );
        assert!(ndt(&[0.1, 0.2], 2).is_err());
    }

    #[test]
    fn surprise_cases() {
        let g = |v: &[u8]| v.iter().map(|&b| b == 1).collect::<Vec<bool>>();
        let all_good = vec![g(&[1, 1, 1]), g(&[1, 1])];
        assert_eq!(sl_from_flags(&all_good).unwrap().sl_mean, 0.0);

        // (G,G),(B,G): prior 0.5, likelihood 1, P(good_2) = 1 -> posterior 0.5
        let r = sl_from_flags(&[g(&[1, 1]), g(&[0, 1])]).unwrap();
        assert_abs_diff_eq!(r.sl_mean, 0.0, epsilon = 1e-15);

        // (G,G),(B,B): posterior = 1 * 0.5 / 0.5 = 1, clamped to 1 - eps
        let r = sl_from_flags(&[g(&[1, 1]), g(&[0, 0])]).unwrap();
        let q = 1.0 - SL_EPS;
        let want = 0.5 * (0.5 / q).ln() + 0.5 * (0.5 / (1.0 - q)).ln();
        assert_abs_diff_eq!(r.sl_mean, want, epsilon = 1e-6);
        assert!(r.sl_mean > 9.0);

        assert!(matches!(
            sl_from_flags(&[g(&[1])]),
            Err(Error::NoValidPositions)
        ));
    }

    #[test]
    fn surprise_near_zero_for_independent_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flags: Vec<Vec<bool>> = (0..20_000)
            .map(|_| (0..4).map(|_| rng.random::<f64>() < 0.6).collect())
            .collect();
        let r = sl_from_flags(&flags).unwrap();
        assert!(r.sl_mean < 1e-3, "{}", r.sl_mean);
    }

    #[test]
    fn surprise_bounds_are_finite() {
        let (stable, stochastic) = sl_bounds(6, &[20; 50], 0.5, 1).unwrap();
        assert!(stable.is_finite() && stable >= 0.0);
        assert!(stochastic.is_finite() && stochastic >= 0.0);
    }

    proptest! {
        #[test]
        fn nvt_window_one_is_ivt(trace in prop::collection::vec(0.0f64..=1.0, 1..30), v in 0.0f64..=1.0) {
            prop_assert_eq!(nvt(&trace, v, 1).unwrap(), ivt(&trace, v).unwrap());
        }

        #[test]
        fn ndt_bounded(trace in prop::collection::vec(0.0f64..=1.0, 2..30), n in 1usize..5) {
            prop_assume!(trace.len() > n);
            let r = ndt(&trace, n).unwrap();
            let n = n as i64;
            prop_assert!(-n <= r.decreasing && r.increasing <= n);
            prop_assert!((0..=2 * n).contains(&r.diff));
        }

        #[test]
        fn pre_is_translation_covariant(truth in prop::collection::vec(0.0f64..0.5, 1..10), delta in 0.0f64..0.5) {
            let b = SemanticsBinding {
                mode: SemanticsMode::StateLevel,
                state_values: BTreeMap::from([(StateId(0), 0.25)]),
                default_value: 0.0,
            };
            let mk = |sem: Vec<f64>| AbstractTrace { states: vec![StateId(0); sem.len()], semantics: Some(sem) };
            let base = pre(&b, &[mk(truth.clone())]).unwrap().signed_mean;
            let shifted = pre(&b, &[mk(truth.iter().map(|t| t + delta).collect())]).unwrap().signed_mean;
            prop_assert!((shifted - base - delta).abs() < 1e-12);
        }

        #[test]
        fn surprise_non_negative(raw in prop::collection::vec(prop::collection::vec(any::<bool>(), 2..6), 1..10)) {
            if let Ok(r) = sl_from_flags(&raw) {
                prop_assert!(r.sl_mean >= 0.0);
            }
        }
    }
}
