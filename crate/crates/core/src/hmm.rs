//! Hidden Markov model over abstract-state observations, fitted by Baum-Welch.
//!
//! Forward/backward passes use per-step scaling: `alpha_t` is normalized to
//! sum 1 and the normalizers `c_t = P(o_t | o_<t)` are kept, so that
//! `ln P(o) = sum ln c_t`. Scaled quantities stay in `[0, 1]`; the only
//! underflow risk is an individual `c_t` reaching 0, which the emission and
//! transition floors rule out after the first M-step.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{AbstractTrace, StateId};
use crate::serde_blocks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hmm {
    /// Observation alphabet: the seen abstract states, sorted.
    pub alphabet: Vec<StateId>,
    #[serde(with = "serde_blocks::array2")]
    pub transition: Array2<f64>,
    #[serde(with = "serde_blocks::array2")]
    pub emission: Array2<f64>,
    #[serde(with = "serde_blocks::array1")]
    pub initial: Array1<f64>,
}

impl Hmm {
    pub fn n_hidden(&self) -> usize {
        self.transition.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.alphabet.len()
    }

    pub fn symbol(&self, s: StateId) -> Option<usize> {
        self.alphabet.binary_search(&s).ok()
    }

    fn encode_strict(&self, trace: &[StateId]) -> Result<Vec<usize>> {
        trace
            .iter()
            .map(|&s| self.symbol(s).ok_or(Error::UnknownObservation(s.0)))
            .collect()
    }

    /// Scaled forward pass over flat `t * n + i` storage. Fills the
    /// normalized alphas and returns the scale factors.
    fn forward_into(
        &self,
        obs: &[Option<usize>],
        unk_floor: f64,
        alpha: &mut Vec<f64>,
        scales: &mut Vec<f64>,
    ) {
        let (n, m) = (self.n_hidden(), self.n_obs());
        let tr = self.transition.as_standard_layout();
        let tr = tr.as_slice().expect("standard layout");
        let em = self.emission.as_standard_layout();
        let em = em.as_slice().expect("standard layout");
        alpha.clear();
        alpha.resize(obs.len() * n, 0.0);
        scales.clear();
        for (t, &o) in obs.iter().enumerate() {
            let (done, rest) = alpha.split_at_mut(t * n);
            let cur = &mut rest[..n];
            if t == 0 {
                for (c, &p) in cur.iter_mut().zip(&self.initial) {
                    *c = p;
                }
            } else {
                let prev = &done[(t - 1) * n..];
                for (i, &a) in prev.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (c, &p) in cur.iter_mut().zip(&tr[i * n..(i + 1) * n]) {
                        *c += a * p;
                    }
                }
            }
            match o {
                Some(o) => {
                    for (j, c) in cur.iter_mut().enumerate() {
                        *c *= em[j * m + o];
                    }
                }
                None => cur.iter_mut().for_each(|c| *c *= unk_floor),
            }
            let c: f64 = cur.iter().sum();
            if c > 0.0 {
                cur.iter_mut().for_each(|v| *v /= c);
            }
            scales.push(c);
        }
    }

    fn scales(&self, obs: &[Option<usize>], unk_floor: f64) -> Vec<f64> {
        let (mut alpha, mut scales) = (Vec::new(), Vec::new());
        self.forward_into(obs, unk_floor, &mut alpha, &mut scales);
        scales
    }
}

/// Maximizes `sum_j w_j ln p_j` over the simplex subject to `p_j >= floor`.
///
/// The solution is `p_j = max(floor, w_j / lambda)` with `lambda` chosen so
/// the entries sum to 1. All-zero weights give the uniform distribution.
pub(crate) fn floored_normalize(weights: &[f64], floor: f64) -> Vec<f64> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return vec![1.0 / n as f64; n];
    }
    let floor = floor.min(1.0 / n as f64);
    let mut clamped = vec![false; n];
    loop {
        let free_mass: f64 = weights
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|(w, _)| w)
            .sum();
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let budget = 1.0 - n_clamped as f64 * floor;
        let mut changed = false;
        for j in 0..n {
            if !clamped[j] && (free_mass <= 0.0 || weights[j] / free_mass * budget < floor) {
                clamped[j] = true;
                changed = true;
            }
        }
        if !changed {
            return weights
                .iter()
                .zip(&clamped)
                .map(|(&w, &c)| if c { floor } else { w / free_mass * budget })
                .collect();
        }
    }
}

struct Accumulators {
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
    loglik: f64,
}

impl Accumulators {
    fn zeros(n: usize, m: usize) -> Self {
        Accumulators {
            initial: vec![0.0; n],
            transition: vec![0.0; n * n],
            emission: vec![0.0; n * m],
            loglik: 0.0,
        }
    }

    fn add(&mut self, other: &Accumulators) {
        let sum = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        sum(&mut self.initial, &other.initial);
        sum(&mut self.transition, &other.transition);
        sum(&mut self.emission, &other.emission);
        self.loglik += other.loglik;
    }
}

#[derive(Default)]
struct Scratch {
    wrapped: Vec<Option<usize>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    scales: Vec<f64>,
    eb: Vec<f64>,
}

/// Adds one sequence's expected counts to `acc`.
fn expectations_into(hmm: &Hmm, obs: &[usize], acc: &mut Accumulators, sc: &mut Scratch) {
    let (n, m) = (hmm.n_hidden(), hmm.n_obs());
    let t_len = obs.len();
    sc.wrapped.clear();
    sc.wrapped.extend(obs.iter().map(|&o| Some(o)));
    hmm.forward_into(&sc.wrapped, 0.0, &mut sc.alpha, &mut sc.scales);
    if sc.scales.iter().any(|&c| c <= 0.0) {
        acc.loglik = f64::NEG_INFINITY;
        return;
    }
    acc.loglik += sc.scales.iter().map(|c| c.ln()).sum::<f64>();

    let tr = hmm.transition.as_standard_layout();
    let tr = tr.as_slice().expect("standard layout");
    let em = hmm.emission.as_standard_layout();
    let em = em.as_slice().expect("standard layout");
    let (alpha, scales, beta, eb) = (&sc.alpha, &sc.scales, &mut sc.beta, &mut sc.eb);
    beta.clear();
    beta.resize(t_len * n, 0.0);
    beta[(t_len - 1) * n..].fill(1.0);
    eb.clear();
    eb.resize(n, 0.0);
    for t in (0..t_len - 1).rev() {
        let (head, next) = beta.split_at_mut((t + 1) * n);
        let next = &next[..n];
        for j in 0..n {
            eb[j] = em[j * m + obs[t + 1]] * next[j];
        }
        let c = scales[t + 1];
        for (i, b) in head[t * n..].iter_mut().enumerate() {
            let v: f64 = tr[i * n..(i + 1) * n]
                .iter()
                .zip(eb.iter())
                .map(|(p, e)| p * e)
                .sum();
            *b = v / c;
        }
    }

    for t in 0..t_len {
        let a = &alpha[t * n..(t + 1) * n];
        let b = &beta[t * n..(t + 1) * n];
        let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let g = if g > 0.0 { g } else { 1.0 };
        for i in 0..n {
            let gamma = a[i] * b[i] / g;
            if t == 0 {
                acc.initial[i] += gamma;
            }
            acc.emission[i * m + obs[t]] += gamma;
        }
        if t + 1 < t_len {
            let next = &beta[(t + 1) * n..(t + 2) * n];
            let c = scales[t + 1];
            for j in 0..n {
                eb[j] = em[j * m + obs[t + 1]] * next[j] / c;
            }
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let row = &tr[i * n..(i + 1) * n];
                let out = &mut acc.transition[i * n..(i + 1) * n];
                for j in 0..n {
                    out[j] += ai * row[j] * eb[j];
                }
            }
        }
    }
}

/// Sequences per E-step work unit. Fixed so sums do not depend on the
/// thread count.
const ESTEP_CHUNK: usize = 32;

fn floored_matrix(flat: &[f64], rows: usize, cols: usize, floor: f64) -> Array2<f64> {
    let out: Vec<f64> = flat
        .chunks(cols)
        .flat_map(|r| floored_normalize(r, floor))
        .collect();
    Array2::from_shape_vec((rows, cols), out).expect("shape")
}

/// One Baum-Welch iteration. Returns the re-estimated model and the
/// log-likelihood of the data under the *input* model.
pub fn baum_welch_step(hmm: &Hmm, sequences: &[Vec<usize>], floor: f64) -> (Hmm, f64) {
    let (n, m) = (hmm.n_hidden(), hmm.n_obs());
    let partial: Vec<Accumulators> = sequences
        .par_chunks(ESTEP_CHUNK)
        .map(|chunk| {
            let mut acc = Accumulators::zeros(n, m);
            let mut scratch = Scratch::default();
            for s in chunk.iter().filter(|s| !s.is_empty()) {
                expectations_into(hmm, s, &mut acc, &mut scratch);
            }
            acc
        })
        .collect();
    let mut total = Accumulators::zeros(n, m);
    for acc in &partial {
        total.add(acc);
    }
    let next = Hmm {
        alphabet: hmm.alphabet.clone(),
        transition: floored_matrix(&total.transition, n, n, floor),
        emission: floored_matrix(&total.emission, n, m, floor),
        initial: Array1::from(floored_normalize(&total.initial, floor)),
    };
    (next, total.loglik)
}

fn dirichlet_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / s).collect()
}

/// Seeded Dirichlet(1) initialization over the given alphabet.
pub fn random_hmm(alphabet: Vec<StateId>, n_hidden: usize, seed: u64, floor: f64) -> Hmm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = alphabet.len();
    let mut transition = Array2::zeros((n_hidden, n_hidden));
    let mut emission = Array2::zeros((n_hidden, m));
    for i in 0..n_hidden {
        let r = floored_normalize(&dirichlet_row(&mut rng, n_hidden), floor);
        transition.row_mut(i).assign(&Array1::from(r));
        let r = floored_normalize(&dirichlet_row(&mut rng, m), floor);
        emission.row_mut(i).assign(&Array1::from(r));
    }
    let initial = Array1::from(floored_normalize(&dirichlet_row(&mut rng, n_hidden), floor));
    Hmm {
        alphabet,
        transition,
        emission,
        initial,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmFitParams {
    pub n_hidden: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub floor: f64,
    /// Independent random starts; restart `r` is seeded with `seed + r` and
    /// the fit with the highest final log-likelihood is kept.
    pub restarts: usize,
}

impl Default for HmmFitParams {
    fn default() -> Self {
        HmmFitParams {
            n_hidden: 4,
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            floor: 1e-10,
            restarts: 1,
        }
    }
}

fn training_alphabet(traces: &[AbstractTrace]) -> Result<Vec<StateId>> {
    let mut alphabet: Vec<StateId> = traces
        .iter()
        .flat_map(|t| t.states.iter().copied())
        .collect();
    if alphabet.is_empty() {
        return Err(Error::EmptyInput("no observations to fit an HMM".into()));
    }
    if let Some(s) = alphabet.iter().find(|s| s.is_unseen()) {
        return Err(Error::UnknownObservation(s.0));
    }
    alphabet.sort_unstable();
    alphabet.dedup();
    Ok(alphabet)
}

/// Fits an HMM whose observation alphabet is the set of training states.
pub fn hmm_fit(traces: &[AbstractTrace], params: &HmmFitParams) -> Result<(Hmm, Vec<f64>)> {
    if params.n_hidden == 0 {
        return Err(Error::InvalidConfig("n_hidden must be >= 1".into()));
    }
    if params.restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be >= 1".into()));
    }
    let alphabet = training_alphabet(traces)?;
    let mut best: Option<(Hmm, Vec<f64>)> = None;
    for r in 0..params.restarts {
        let seed = params.seed.wrapping_add(r as u64);
        let init = random_hmm(alphabet.clone(), params.n_hidden, seed, params.floor);
        let fit = hmm_fit_from(init, traces, params.max_iter, params.tol, params.floor)?;
        let last = |h: &[f64]| h.last().copied().unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, h)| last(&fit.1) > last(h)) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Runs Baum-Welch from a given starting model.
///
/// The returned history holds the log-likelihood of each model visited,
/// including the final one.
pub fn hmm_fit_from(
    init: Hmm,
    traces: &[AbstractTrace],
    max_iter: usize,
    tol: f64,
    floor: f64,
) -> Result<(Hmm, Vec<f64>)> {
    let sequences: Vec<Vec<usize>> = traces
        .iter()
        .map(|t| init.encode_strict(&t.states))
        .collect::<Result<_>>()?;
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::EmptyInput("no observations to fit an HMM".into()));
    }
    let mut model = init;
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let (next, ll) = baum_welch_step(&model, &sequences, floor);
        let gain = history.last().map(|&prev: &f64| ll - prev);
        history.push(ll);
        if gain.is_some_and(|g| g < tol) {
            return Ok((model, history));
        }
        model = next;
    }
    let final_ll = sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| sequence_log_prob(&model, s))
        .sum();
    history.push(final_ll);
    Ok((model, history))
}

fn sequence_log_prob(hmm: &Hmm, obs: &[usize]) -> f64 {
    let wrapped: Vec<Option<usize>> = obs.iter().map(|&o| Some(o)).collect();
    hmm.scales(&wrapped, 0.0).iter().map(|c| c.ln()).sum()
}

/// Per-step predictive probabilities `P(o_t | o_<t)`; out-of-alphabet
/// observations emit with probability `unk_floor` from every hidden state.
pub fn hmm_step_probabilities(hmm: &Hmm, trace: &[StateId], unk_floor: f64) -> Vec<f64> {
    let obs: Vec<Option<usize>> = trace.iter().map(|&s| hmm.symbol(s)).collect();
    hmm.scales(&obs, unk_floor)
}

pub fn hmm_log_prob(hmm: &Hmm, trace: &[StateId], unk_floor: f64) -> f64 {
    hmm_step_probabilities(hmm, trace, unk_floor)
        .iter()
        .map(|c| c.ln())
        .sum()
}

pub fn hmm_perplexity(hmm: &Hmm, trace: &[StateId], unk_floor: f64) -> f64 {
    if trace.is_empty() {
        return 1.0;
    }
    (-hmm_log_prob(hmm, trace, unk_floor) / trace.len() as f64).exp()
}
