//! Discrete-time Markov chain over abstract states.

use std::collections::{BTreeMap, HashMap};

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{AbstractTrace, StateId};

/// Empirical DTMC with sparse, row-normalized transition probabilities.
///
/// States that were never observed with an outgoing transition get a
/// synthesized self-loop of probability 1 so that every row is stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct Dtmc {
    states: Vec<StateId>,
    index: HashMap<StateId, usize>,
    initial_counts: BTreeMap<StateId, u64>,
    transition_counts: BTreeMap<(StateId, StateId), u64>,
    /// `rows[i]` lists `(target index, probability)` sorted by target.
    rows: Vec<Vec<(usize, f64)>>,
    synthesized: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct DtmcRecord {
    states: Vec<StateId>,
    initial_counts: Vec<(StateId, u64)>,
    /// `(row_id, col_id, count)` triplets.
    transitions: Vec<(StateId, StateId, u64)>,
    synthesized_absorbing: Vec<StateId>,
}

impl Serialize for Dtmc {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DtmcRecord {
            states: self.states.clone(),
            initial_counts: self.initial_counts.iter().map(|(&k, &v)| (k, v)).collect(),
            transitions: self
                .transition_counts
                .iter()
                .map(|(&(a, b), &c)| (a, b, c))
                .collect(),
            synthesized_absorbing: self.synthesized_states().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dtmc {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = DtmcRecord::deserialize(d)?;
        Ok(Dtmc::from_counts(
            rec.states,
            rec.initial_counts.into_iter().collect(),
            rec.transitions
                .into_iter()
                .map(|(a, b, c)| ((a, b), c))
                .collect(),
        ))
    }
}

impl Dtmc {
    fn from_counts(
        mut states: Vec<StateId>,
        initial_counts: BTreeMap<StateId, u64>,
        transition_counts: BTreeMap<(StateId, StateId), u64>,
    ) -> Dtmc {
        states.sort_unstable();
        states.dedup();
        let index: HashMap<StateId, usize> =
            states.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); states.len()];
        let mut totals = vec![0u64; states.len()];
        for (&(from, _), &c) in &transition_counts {
            totals[index[&from]] += c;
        }
        // BTreeMap iteration is sorted by (from, to), so each row comes out sorted.
        for (&(from, to), &c) in &transition_counts {
            let i = index[&from];
            rows[i].push((index[&to], c as f64 / totals[i] as f64));
        }
        let mut synthesized = vec![false; states.len()];
        for (i, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                row.push((i, 1.0));
                synthesized[i] = true;
            }
        }
        Dtmc {
            states,
            index,
            initial_counts,
            transition_counts,
            rows,
            synthesized,
        }
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn index_of(&self, s: StateId) -> Option<usize> {
        self.index.get(&s).copied()
    }

    pub fn transition_counts(&self) -> &BTreeMap<(StateId, StateId), u64> {
        &self.transition_counts
    }

    pub fn initial_counts(&self) -> &BTreeMap<StateId, u64> {
        &self.initial_counts
    }

    pub fn initial_probability(&self, s: StateId) -> f64 {
        let total: u64 = self.initial_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        self.initial_counts.get(&s).copied().unwrap_or(0) as f64 / total as f64
    }

    /// Sparse row `i` as `(target index, probability)` pairs.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn is_synthesized(&self, i: usize) -> bool {
        self.synthesized[i]
    }

    pub fn synthesized_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states
            .iter()
            .zip(&self.synthesized)
            .filter(|(_, &syn)| syn)
            .map(|(&s, _)| s)
    }

    /// `P(from -> to)`, or `None` when either state is unknown.
    pub fn probability(&self, from: StateId, to: StateId) -> Option<f64> {
        let i = self.index_of(from)?;
        let j = self.index_of(to)?;
        Some(
            self.rows[i]
                .binary_search_by_key(&j, |&(t, _)| t)
                .map_or(0.0, |k| self.rows[i][k].1),
        )
    }

    /// Dense transition matrix, mainly for tests and small-chain analysis.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row {
                m[i][j] = p;
            }
        }
        m
    }

    /// Builds a chain directly from a dense row-stochastic matrix over
    /// states `0..n`. Probabilities are stored as given; no counts exist.
    pub fn from_dense(matrix: &[Vec<f64>]) -> Result<Dtmc> {
        let n = matrix.len();
        if n == 0 {
            return Err(Error::EmptyInput("transition matrix".into()));
        }
        let states: Vec<StateId> = (0..n as u64).map(StateId).collect();
        let mut rows = Vec::with_capacity(n);
        for (i, r) in matrix.iter().enumerate() {
            if r.len() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    got: r.len(),
                });
            }
            let sum: f64 = r.iter().sum();
            if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::OutOfRange(format!("row {i} is not stochastic")));
            }
            rows.push(
                r.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(j, &p)| (j, p))
                    .collect(),
            );
        }
        Ok(Dtmc {
            index: states.iter().enumerate().map(|(i, &s)| (s, i)).collect(),
            states,
            initial_counts: BTreeMap::new(),
            transition_counts: BTreeMap::new(),
            rows,
            synthesized: vec![false; n],
        })
    }
}

/// Counts transitions over a trace corpus and row-normalizes them.
pub fn dtmc_fit(traces: &[AbstractTrace]) -> Result<Dtmc> {
    let mut states = Vec::new();
    let mut initial_counts = BTreeMap::new();
    let mut transition_counts = BTreeMap::new();
    for trace in traces.iter().filter(|t| !t.is_empty()) {
        if trace.states.iter().any(|s| s.is_unseen()) {
            return Err(Error::DegenerateInput(
                "training trace contains UNSEEN states".into(),
            ));
        }
        *initial_counts.entry(trace.states[0]).or_insert(0u64) += 1;
        states.extend_from_slice(&trace.states);
        for w in trace.states.windows(2) {
            *transition_counts.entry((w[0], w[1])).or_insert(0u64) += 1;
        }
    }
    if states.is_empty() {
        return Err(Error::EmptyInput("no non-empty abstract traces".into()));
    }
    Ok(Dtmc::from_counts(states, initial_counts, transition_counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryResult {
    pub pi: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Stationary distribution by power iteration from the uniform vector.
///
/// Iterates the lazy chain `(I + P) / 2`, i.e. binomially weighted averages
/// of the iterates of `P`. This has the same fixed points as `P`, stays
/// convergent on periodic chains, and converges geometrically where a plain
/// running mean of iterates would only converge at rate `1/t`.
pub fn stationary_distribution(dtmc: &Dtmc, max_iter: usize, tol: f64) -> StationaryResult {
    let n = dtmc.n_states();
    let mut x = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for it in 1..=max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in dtmc.rows.iter().enumerate() {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for &(j, p) in row {
                next[j] += xi * p;
            }
        }
        for (nj, xj) in next.iter_mut().zip(&x) {
            *nj = 0.5 * (*nj + xj);
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if diff < tol {
            return StationaryResult {
                pi: x,
                converged: true,
                iterations: it,
            };
        }
    }
    StationaryResult {
        pi: x,
        converged: false,
        iterations: max_iter,
    }
}

/// Structural classification of one state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateClass {
    pub sink: bool,
    pub source: bool,
    pub recurrent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Sink,
    Source,
    RecurrentFlagged,
    Other,
}

impl StateClass {
    pub fn kind(&self) -> StateKind {
        if self.sink {
            StateKind::Sink
        } else if self.source {
            StateKind::Source
        } else if self.recurrent {
            StateKind::RecurrentFlagged
        } else {
            StateKind::Other
        }
    }
}

pub fn classify_states(dtmc: &Dtmc, tol: f64) -> BTreeMap<StateId, StateClass> {
    let n = dtmc.n_states();
    let mut graph = DiGraph::<usize, ()>::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|i| graph.add_node(i)).collect();
    let mut has_in_from_other = vec![false; n];
    let mut has_out_to_other = vec![false; n];
    for (i, row) in dtmc.rows.iter().enumerate() {
        for &(j, p) in row {
            if p > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
                if i != j {
                    has_out_to_other[i] = true;
                    has_in_from_other[j] = true;
                }
            }
        }
    }

    let sccs = tarjan_scc(&graph);
    let mut component = vec![0usize; n];
    for (c, scc) in sccs.iter().enumerate() {
        for node in scc {
            component[graph[*node]] = c;
        }
    }
    let mut bottom = vec![true; sccs.len()];
    for (i, row) in dtmc.rows.iter().enumerate() {
        for &(j, p) in row {
            if p > 0.0 && component[i] != component[j] {
                bottom[component[i]] = false;
            }
        }
    }

    (0..n)
        .map(|i| {
            let self_loop = dtmc.rows[i]
                .iter()
                .find(|&&(j, _)| j == i)
                .map_or(0.0, |&(_, p)| p);
            let class = StateClass {
                sink: self_loop >= 1.0 - tol,
                source: has_out_to_other[i] && !has_in_from_other[i],
                recurrent: bottom[component[i]],
            };
            (dtmc.states[i], class)
        })
        .collect()
}

/// Log-probability of a trace conditioned on its first state. Unknown
/// transitions (including those into UNSEEN) contribute `ln(floor)`.
pub fn trace_log_prob(dtmc: &Dtmc, trace: &[StateId], floor: f64) -> Result<(f64, usize)> {
    if trace.len() < 2 {
        return Err(Error::TraceTooShort {
            needed: 2,
            got: trace.len(),
        });
    }
    let lp = trace
        .windows(2)
        .map(|w| dtmc.probability(w[0], w[1]).unwrap_or(0.0).max(floor).ln())
        .sum();
    Ok((lp, trace.len() - 1))
}

pub fn perplexity(dtmc: &Dtmc, trace: &[StateId], floor: f64) -> Result<f64> {
    let (lp, steps) = trace_log_prob(dtmc, trace, floor)?;
    Ok((-lp / steps as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const A: StateId = StateId(0);
    const B: StateId = StateId(1);
    const C: StateId = StateId(2);

    fn tr(s: &[StateId]) -> AbstractTrace {
        AbstractTrace::new(s.to_vec())
    }

    #[test]
    fn counting_example() {
        let d = dtmc_fit(&[tr(&[A, B, A]), tr(&[A, B, B])]).unwrap();
        assert_eq!(d.probability(A, B), Some(1.0));
        assert_eq!(d.probability(B, A), Some(0.5));
        assert_eq!(d.probability(B, B), Some(0.5));
        assert_eq!(d.initial_probability(A), 1.0);
        assert_eq!(d.synthesized_states().count(), 0);
    }

    #[test]
    fn self_loop_and_terminal() {
        let d = dtmc_fit(&[tr(&[A, A, A])]).unwrap();
        assert_eq!(d.probability(A, A), Some(1.0));
        assert!(!d.is_synthesized(0));
        let d = dtmc_fit(&[tr(&[A])]).unwrap();
        assert_eq!(d.probability(A, A), Some(1.0));
        assert!(d.is_synthesized(0));
        assert!(matches!(dtmc_fit(&[]), Err(Error::EmptyInput(_))));
        assert!(dtmc_fit(&[tr(&[A, StateId::UNSEEN])]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let d = dtmc_fit(&[tr(&[A, B, A]), tr(&[A, B, C])]).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: Dtmc = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn stationary_symmetric_and_periodic() {
        let d = Dtmc::from_dense(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let r = stationary_distribution(&d, 1000, 1e-12);
        assert!(r.converged);
        assert_abs_diff_eq!(r.pi[0], 0.5, epsilon = 1e-12);

        let d = Dtmc::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = stationary_distribution(&d, 1000, 1e-12);
        assert!(r.converged);
        assert_abs_diff_eq!(r.pi[1], 0.5, epsilon = 1e-12);

        // period 3, asymmetric start irrelevant since start is uniform; use a 3-cycle with a tail
        let d = Dtmc::from_dense(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let r = stationary_distribution(&d, 100_000, 1e-13);
        assert!(r.converged);
        for (got, want) in r.pi.iter().zip([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn classification() {
        // P(a->a)=1, P(b->a)=1
        let d = dtmc_fit(&[tr(&[B, A, A])]).unwrap();
        let c = classify_states(&d, 1e-9);
        assert_eq!(c[&A].kind(), StateKind::Sink);
        assert_eq!(c[&B].kind(), StateKind::Source);

        let d = dtmc_fit(&[tr(&[A, B, A, B])]).unwrap();
        let c = classify_states(&d, 1e-9);
        assert!(c.values().all(|k| k.kind() == StateKind::RecurrentFlagged));

        let d = dtmc_fit(&[tr(&[A, B, C, C])]).unwrap();
        let c = classify_states(&d, 1e-9);
        assert_eq!(c[&C].kind(), StateKind::Sink);
        assert_eq!(c[&A].kind(), StateKind::Source);
        assert_eq!(c[&B].kind(), StateKind::Other);
        for class in c.values() {
            if class.sink {
                assert!(class.recurrent);
            }
            if class.source {
                assert!(!class.recurrent);
            }
        }
    }

    #[test]
    fn log_prob_and_perplexity() {
        let d = dtmc_fit(&[tr(&[A, B, A]), tr(&[A, B, B])]).unwrap();
        // B->A, A->B, B->B each... use trace B,A,B,B: 0.5,1,0.5
        let (lp, steps) = trace_log_prob(&d, &[B, B, B, B, B], 1e-6).unwrap();
        assert_eq!(steps, 4);
        assert_abs_diff_eq!(lp, 4.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            perplexity(&d, &[B, B, B, B, B], 1e-6).unwrap(),
            2.0,
            epsilon = 1e-12
        );

        let (lp, _) = trace_log_prob(&d, &[A, A], 1e-6).unwrap();
        assert_abs_diff_eq!(lp, 1e-6f64.ln(), epsilon = 1e-12);
        let (lp, _) = trace_log_prob(&d, &[A, StateId::UNSEEN], 1e-6).unwrap();
        assert_abs_diff_eq!(lp, 1e-6f64.ln(), epsilon = 1e-12);

        let det = dtmc_fit(&[tr(&[A, B, C, C, C])]).unwrap();
        assert_eq!(trace_log_prob(&det, &[A, B, C, C], 1e-6).unwrap().0, 0.0);
        assert_eq!(perplexity(&det, &[A, B, C], 1e-6).unwrap(), 1.0);
        assert!(matches!(
            perplexity(&det, &[A], 1e-6),
            Err(Error::TraceTooShort { .. })
        ));
    }

    #[test]
    fn perplexity_geometric_mean() {
        // Hand evaluation: steps p = 0.5 then 0.125 -> exp(-(ln0.5+ln0.125)/2) = 4.
        let m = vec![
            vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.125, 0.875, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        let mut full = m.clone();
        for i in 2..9 {
            let mut r = vec![0.0; 9];
            r[i] = 1.0;
            full.push(r);
        }
        let d = Dtmc::from_dense(&full).unwrap();
        let p = perplexity(&d, &[StateId(0), StateId(1), StateId(2)], 1e-6).unwrap();
        assert_abs_diff_eq!(p, 4.0, epsilon = 1e-12);
    }
}
