//! Binding trustworthiness semantics to abstract states and transitions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::Dtmc;
use crate::partition::{AbstractTrace, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticsMode {
    StateLevel,
    TransitionLevel,
}

impl SemanticsMode {
    fn name(self) -> &'static str {
        match self {
            SemanticsMode::StateLevel => "state_level",
            SemanticsMode::TransitionLevel => "transition_level",
        }
    }
}

/// Abstract semantics per state, plus the value used for unbound states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticsBinding {
    pub mode: SemanticsMode,
    pub state_values: BTreeMap<StateId, f64>,
    pub default_value: f64,
}

impl SemanticsBinding {
    /// A transition-level binding carries no table: values come from the model.
    pub fn transition_level(default_value: f64) -> Self {
        SemanticsBinding {
            mode: SemanticsMode::TransitionLevel,
            state_values: BTreeMap::new(),
            default_value,
        }
    }

    pub fn value(&self, s: StateId) -> f64 {
        self.state_values
            .get(&s)
            .copied()
            .unwrap_or(self.default_value)
    }
}

/// Averages the concrete semantics of every occurrence of each abstract state.
pub fn bind_state_semantics(
    traces: &[AbstractTrace],
    default_value: f64,
) -> Result<SemanticsBinding> {
    let mut sums: BTreeMap<StateId, (f64, usize)> = BTreeMap::new();
    for (i, trace) in traces.iter().enumerate() {
        let sem = trace
            .semantics
            .as_ref()
            .ok_or_else(|| Error::MisalignedSemantics(format!("trace {i} carries no semantics")))?;
        if sem.len() != trace.states.len() {
            return Err(Error::MisalignedSemantics(format!(
                "trace {i}: {} semantics for {} states",
                sem.len(),
                trace.states.len()
            )));
        }
        for (&s, &v) in trace.states.iter().zip(sem) {
            if s.is_unseen() {
                continue;
            }
            let e = sums.entry(s).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(SemanticsBinding {
        mode: SemanticsMode::StateLevel,
        state_values: sums
            .into_iter()
            .map(|(s, (sum, n))| (s, sum / n as f64))
            .collect(),
        default_value,
    })
}

/// Per-position lookup of bound state semantics.
pub fn semantics_trace(binding: &SemanticsBinding, trace: &[StateId]) -> Result<Vec<f64>> {
    if binding.mode != SemanticsMode::StateLevel {
        return Err(Error::WrongMode(binding.mode.name().into()));
    }
    Ok(trace.iter().map(|&s| binding.value(s)).collect())
}

/// Transition probabilities along a trace; unknown pairs take `floor`.
pub fn transition_semantics_trace(dtmc: &Dtmc, trace: &[StateId], floor: f64) -> Result<Vec<f64>> {
    if trace.len() < 2 {
        return Err(Error::TraceTooShort {
            needed: 2,
            got: trace.len(),
        });
    }
    Ok(trace
        .windows(2)
        .map(|w| dtmc.probability(w[0], w[1]).unwrap_or(0.0).max(floor))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::dtmc_fit;
    use proptest::prelude::*;

    const A: StateId = StateId(0);
    const B: StateId = StateId(1);

    fn with_sem(states: &[StateId], sem: &[f64]) -> AbstractTrace {
        AbstractTrace {
            states: states.to_vec(),
            semantics: Some(sem.to_vec()),
        }
    }

    #[test]
    fn binding_means() {
        let b = bind_state_semantics(
            &[with_sem(&[A, B], &[0.2, 1.0]), with_sem(&[A], &[0.4])],
            0.0,
        )
        .unwrap();
        assert!((b.state_values[&A] - 0.3).abs() < 1e-15);
        assert_eq!(b.state_values[&B], 1.0);

        let zeros = bind_state_semantics(&[with_sem(&[A, B, A], &[0.0, 0.0, 0.0])], 0.5).unwrap();
        assert!(zeros.state_values.values().all(|&v| v == 0.0));

        let bad = AbstractTrace {
            states: vec![A, B],
            semantics: Some(vec![0.1]),
        };
        assert!(matches!(
            bind_state_semantics(&[bad], 0.0),
            Err(Error::MisalignedSemantics(_))
        ));
    }

    #[test]
    fn lookup_rules() {
        let mut b = SemanticsBinding {
            mode: SemanticsMode::StateLevel,
            state_values: BTreeMap::from([(A, 0.3), (B, 0.9)]),
            default_value: 0.0,
        };
        assert_eq!(semantics_trace(&b, &[A, B]).unwrap(), vec![0.3, 0.9]);
        assert_eq!(
            semantics_trace(&b, &[A, StateId::UNSEEN]).unwrap(),
            vec![0.3, 0.0]
        );
        b.state_values.clear();
        b.default_value = 0.5;
        assert_eq!(semantics_trace(&b, &[A, B, A]).unwrap(), vec![0.5; 3]);
        assert!(matches!(
            semantics_trace(&SemanticsBinding::transition_level(0.0), &[A]),
            Err(Error::WrongMode(_))
        ));
    }

    #[test]
    fn transition_values() {
        let t = |s: &[StateId]| AbstractTrace::new(s.to_vec());
        let d = dtmc_fit(&[t(&[A, B, A]), t(&[A, B, B])]).unwrap();
        assert_eq!(
            transition_semantics_trace(&d, &[A, B, B], 1e-6).unwrap(),
            vec![1.0, 0.5]
        );
        assert_eq!(
            transition_semantics_trace(&d, &[A, A], 1e-6).unwrap(),
            vec![1e-6]
        );
        let det = dtmc_fit(&[t(&[A, B, B])]).unwrap();
        assert_eq!(
            transition_semantics_trace(&det, &[A, B, B, B], 1e-6).unwrap(),
            vec![1.0; 3]
        );
        assert!(transition_semantics_trace(&d, &[A], 1e-6).is_err());
    }

    proptest! {
        #[test]
        fn binding_is_permutation_invariant_and_exact(
            raw in prop::collection::vec(prop::collection::vec((0u64..4, 0u32..=8), 1..6), 1..6),
            rot in 0usize..6,
        ) {
            // semantics on a 1/8 grid keep every sum exact in binary floating point
            let traces: Vec<AbstractTrace> = raw.iter().map(|t| AbstractTrace {
                states: t.iter().map(|&(s, _)| StateId(s)).collect(),
                semantics: Some(t.iter().map(|&(_, v)| v as f64 / 8.0).collect()),
            }).collect();
            let b = bind_state_semantics(&traces, 0.0).unwrap();
            let mut rotated = traces.clone();
            rotated.rotate_left(rot % traces.len());
            prop_assert_eq!(&bind_state_semantics(&rotated, 0.0).unwrap(), &b);
            for (s, v) in &b.state_values {
                let vals: Vec<u32> = raw.iter().flatten().filter(|(id, _)| StateId(*id) == *s).map(|&(_, v)| v).collect();
                let want = vals.iter().sum::<u32>() as f64 / 8.0 / vals.len() as f64;
                prop_assert_eq!(*v, want);
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
