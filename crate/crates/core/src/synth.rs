//! Synthetic hidden-state sources: a Markov chain over source states, each
//! emitting its Gaussian mean plus isotropic noise.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_store::{Trace, TraceContainer};

pub const NORMAL_LABEL: f32 = 1.0;
pub const ABNORMAL_LABEL: f32 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSourceSpec {
    pub n_source_states: usize,
    pub hidden_dim: usize,
    /// Normal-law transitions. Defaults to a forward ring:
    /// `i -> i+1` 0.8, `i -> i` 0.1, `i -> i+2` 0.1.
    #[serde(default)]
    pub transition_normal: Option<Vec<Vec<f64>>>,
    /// Mixing weight of the perturbation in the abnormal law.
    pub delta: f64,
    /// Column shift of the perturbation: `R[i][j] = A[i][(j - shift) mod n]`.
    #[serde(default = "one")]
    pub perturbation_shift: usize,
    /// Per-state emission means; drawn as `N(0, mean_scale^2)` when absent.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "three")]
    pub mean_scale: f64,
    pub noise_sigma: f64,
    pub length_min: usize,
    pub length_max: usize,
    pub train_normal: usize,
    #[serde(default)]
    pub train_abnormal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

fn one() -> usize {
    1
}

fn three() -> f64 {
    3.0
}

/// The forward ring used when no normal transition matrix is given.
pub fn ring_transitions(n: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 0.1;
        row[(i + 1) % n] += 0.8;
        row[(i + 2) % n] += 0.1;
    }
    a
}

fn check_stochastic(name: &str, m: &[Vec<f64>], n: usize) -> Result<()> {
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidSpec(format!("{name} must be {n}x{n}")));
    }
    for (i, r) in m.iter().enumerate() {
        if r.iter().any(|p| !(0.0..=1.0).contains(p)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidSpec(format!(
                "{name} row {i} is not stochastic"
            )));
        }
    }
    Ok(())
}

/// Per-row total-variation distance between two transition matrices.
pub fn row_total_variation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .collect()
}

impl SyntheticSourceSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSourceSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_source_states;
        if n == 0 {
            return Err(Error::InvalidSpec("n_source_states must be >= 1".into()));
        }
        if self.hidden_dim < 2 {
            return Err(Error::InvalidSpec("hidden_dim must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidSpec("delta must lie in [0, 1]".into()));
        }
        // sigma = 0 is accepted: emissions are then exactly the means
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !(self.mean_scale > 0.0 && self.mean_scale.is_finite()) {
            return Err(Error::InvalidSpec("mean_scale must be positive".into()));
        }
        if self.length_min == 0 || self.length_min > self.length_max {
            return Err(Error::InvalidSpec(
                "need 1 <= length_min <= length_max".into(),
            ));
        }
        if self.train_normal + self.train_abnormal == 0 {
            return Err(Error::InvalidSpec("no training traces requested".into()));
        }
        if self.test_normal + self.test_abnormal == 0 {
            return Err(Error::InvalidSpec("no test traces requested".into()));
        }
        if let Some(a) = &self.transition_normal {
            check_stochastic("transition_normal", a, n)?;
        }
        if let Some(means) = &self.means {
            if means.len() != n || means.iter().any(|m| m.len() != self.hidden_dim) {
                return Err(Error::InvalidSpec(format!(
                    "means must be {n}x{}",
                    self.hidden_dim
                )));
            }
            if means.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSpec("means must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn normal_transitions(&self) -> Vec<Vec<f64>> {
        self.transition_normal
            .clone()
            .unwrap_or_else(|| ring_transitions(self.n_source_states))
    }

    /// `(1 - delta) A + delta R` with `R` the column-shifted normal matrix.
    pub fn abnormal_transitions(&self) -> Vec<Vec<f64>> {
        let a = self.normal_transitions();
        let n = self.n_source_states;
        let shift = self.perturbation_shift % n;
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| (1.0 - self.delta) * row[j] + self.delta * row[(j + n - shift) % n])
                    .collect()
            })
            .collect()
    }
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Source-state path of one trace; the first state is uniform.
pub fn sample_path(matrix: &[Vec<f64>], len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut s = rng.random_range(0..matrix.len());
    let mut path = Vec::with_capacity(len);
    for _ in 0..len {
        path.push(s);
        s = sample_row(&matrix[s], rng);
    }
    path
}

fn emit(path: &[usize], means: &[Vec<f64>], sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let d = means[0].len();
    Array2::from_shape_fn((path.len(), d), |(t, k)| {
        let noise: f64 = if sigma > 0.0 {
            sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        (means[path[t]][k] + noise) as f32
    })
}

/// Samples `(train, test)` containers. Traces carry labels 1.0 (normal) and
/// 0.0 (abnormal); normal traces precede abnormal ones in each container.
pub fn synth_generate(
    spec: &SyntheticSourceSpec,
    seed: u64,
) -> Result<(TraceContainer, TraceContainer)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = match &spec.means {
        Some(m) => m.clone(),
        None => {
            let normal =
                Normal::new(0.0, spec.mean_scale).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            (0..spec.n_source_states)
                .map(|_| {
                    (0..spec.hidden_dim)
                        .map(|_| normal.sample(&mut rng))
                        .collect()
                })
                .collect()
        }
    };
    let laws = [spec.normal_transitions(), spec.abnormal_transitions()];
    let draw = |count: usize, law: usize, label: f32, rng: &mut ChaCha8Rng| -> Vec<Trace> {
        (0..count)
            .map(|_| {
                let len = rng.random_range(spec.length_min..=spec.length_max);
                let path = sample_path(&laws[law], len, rng);
                Trace::new(emit(&path, &means, spec.noise_sigma, rng)).with_label(label)
            })
            .collect()
    };
    let mut train = draw(spec.train_normal, 0, NORMAL_LABEL, &mut rng);
    train.extend(draw(spec.train_abnormal, 1, ABNORMAL_LABEL, &mut rng));
    let mut test = draw(spec.test_normal, 0, NORMAL_LABEL, &mut rng);
    test.extend(draw(spec.test_abnormal, 1, ABNORMAL_LABEL, &mut rng));

    let metadata = |split: &str| {
        BTreeMap::from([
            ("source".to_string(), "synthetic".to_string()),
            ("seed".to_string(), seed.to_string()),
            ("split".to_string(), split.to_string()),
            ("delta".to_string(), spec.delta.to_string()),
        ])
    };
    Ok((
        TraceContainer::with_metadata(spec.hidden_dim, train, metadata("train"))?,
        TraceContainer::with_metadata(spec.hidden_dim, test, metadata("test"))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSourceSpec {
        SyntheticSourceSpec {
            n_source_states: 5,
            hidden_dim: 4,
            transition_normal: None,
            delta: 0.6,
            perturbation_shift: 1,
            means: None,
            mean_scale: 3.0,
            noise_sigma: 0.5,
            length_min: 3,
            length_max: 6,
            train_normal: 10,
            train_abnormal: 0,
            test_normal: 4,
            test_abnormal: 4,
        }
    }

    #[test]
    fn perturbation_distance() {
        let s = spec();
        let tv = row_total_variation(&s.normal_transitions(), &s.abnormal_transitions());
        for v in tv {
            assert!((v - 0.48).abs() < 1e-12);
        }
        let zero = SyntheticSourceSpec {
            delta: 0.0,
            ..spec()
        };
        assert_eq!(zero.normal_transitions(), zero.abnormal_transitions());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let (a_train, a_test) = synth_generate(&spec(), 3).unwrap();
        let (b_train, b_test) = synth_generate(&spec(), 3).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.len(), 10);
        assert_eq!(a_test.len(), 8);
        assert_eq!(a_test.traces()[0].trace_label, Some(NORMAL_LABEL));
        assert_eq!(a_test.traces()[7].trace_label, Some(ABNORMAL_LABEL));
        assert!(a_train.traces().iter().all(|t| (3..=6).contains(&t.len())));
        let (c_train, _) = synth_generate(&spec(), 4).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn noiseless_emissions_equal_means() {
        let means: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..4).map(|k| (10 * i + k) as f64).collect())
            .collect();
        let s = SyntheticSourceSpec {
            noise_sigma: 0.0,
            means: Some(means.clone()),
            ..spec()
        };
        let (train, _) = synth_generate(&s, 0).unwrap();
        for t in train.traces() {
            for row in t.states.outer_iter() {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                assert!(means.contains(&row));
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SyntheticSourceSpec {
                hidden_dim: 1,
                ..spec()
            },
            SyntheticSourceSpec {
                delta: 1.5,
                ..spec()
            },
            SyntheticSourceSpec {
                noise_sigma: -1.0,
                ..spec()
            },
            SyntheticSourceSpec {
                length_min: 7,
                ..spec()
            },
            SyntheticSourceSpec {
                transition_normal: Some(vec![vec![0.5; 5]; 5]),
                ..spec()
            },
        ];
        for s in bad {
            assert!(matches!(synth_generate(&s, 0), Err(Error::InvalidSpec(_))));
        }
    }
}
