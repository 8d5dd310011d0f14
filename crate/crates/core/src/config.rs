//! Pipeline configuration. Every value the analysis leaves open lives in
//! [`AnalysisDefaults`] and is written back into each report.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detection::ScoreAggregator;
use crate::error::{Error, Result};
use crate::metrics_semantics::TrendConfig;
use crate::semantics::SemanticsMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PartitionConfig {
    Grid { m: usize },
    KMeans { n: usize },
    Gmm { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelConfig {
    Dtmc,
    Hmm { n_hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisDefaults {
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub gmm_var_floor: f64,
    pub hmm_max_iter: usize,
    pub hmm_tol: f64,
    pub hmm_floor: f64,
    pub hmm_restarts: usize,
    /// Probability assigned to unseen transitions (DTMC likelihood and
    /// transition semantics).
    pub prob_floor: f64,
    /// HMM emission probability for out-of-alphabet observations.
    pub unk_floor: f64,
    pub stationary_max_iter: usize,
    pub stationary_tol: f64,
    pub sink_tol: f64,
    pub sen_epsilon: f64,
    pub sen_samples: usize,
    pub perp_bins: usize,
    pub perp_smoothing: f64,
    /// Semantics of states unbound at training time.
    pub unbound_semantics: f64,
    pub trend: TrendConfig,
    pub score_aggregator: ScoreAggregator,
    pub score_hist_bins: usize,
}

impl Default for AnalysisDefaults {
    fn default() -> Self {
        AnalysisDefaults {
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            gmm_max_iter: 100,
            gmm_tol: 1e-6,
            gmm_var_floor: 1e-6,
            hmm_max_iter: 100,
            hmm_tol: 1e-4,
            hmm_floor: 1e-10,
            hmm_restarts: 3,
            prob_floor: 1e-6,
            unk_floor: 1e-6,
            stationary_max_iter: 100_000,
            stationary_tol: 1e-12,
            sink_tol: 1e-9,
            sen_epsilon: 0.01,
            sen_samples: 64,
            perp_bins: 20,
            perp_smoothing: 1e-6,
            unbound_semantics: 0.0,
            trend: TrendConfig::default(),
            score_aggregator: ScoreAggregator::Mean,
            score_hist_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Retained PCA components; `None` keeps the raw hidden states.
    #[serde(default)]
    pub pca_k: Option<usize>,
    pub partition: PartitionConfig,
    #[serde(default = "one")]
    pub history: usize,
    #[serde(default = "dtmc")]
    pub model: ModelConfig,
    #[serde(default = "transition_level")]
    pub semantics: SemanticsMode,
    #[serde(default)]
    pub defaults: AnalysisDefaults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

fn one() -> usize {
    1
}

fn dtmc() -> ModelConfig {
    ModelConfig::Dtmc
}

fn transition_level() -> SemanticsMode {
    SemanticsMode::TransitionLevel
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl PipelineConfig {
    pub fn new(seed: u64, partition: PartitionConfig) -> Self {
        PipelineConfig {
            seed,
            pca_k: None,
            partition,
            history: 1,
            model: ModelConfig::Dtmc,
            semantics: SemanticsMode::TransitionLevel,
            defaults: AnalysisDefaults::default(),
            train: None,
            test: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short identifier naming the configuration's axes.
    pub fn id(&self) -> String {
        let pca = self.pca_k.map_or("raw".to_string(), |k| format!("pca{k}"));
        let part = match self.partition {
            PartitionConfig::Grid { m } => format!("grid{m}"),
            PartitionConfig::KMeans { n } => format!("kmeans{n}"),
            PartitionConfig::Gmm { n } => format!("gmm{n}"),
        };
        let model = match self.model {
            ModelConfig::Dtmc => "dtmc".to_string(),
            ModelConfig::Hmm { n_hidden } => format!("hmm{n_hidden}"),
        };
        let sem = match self.semantics {
            SemanticsMode::StateLevel => "state",
            SemanticsMode::TransitionLevel => "transition",
        };
        format!("{pca}-{part}-h{}-{model}-{sem}", self.history)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pca_k == Some(0) {
            return Err(Error::InvalidConfig("pca_k must be >= 1".into()));
        }
        if self.history == 0 {
            return Err(Error::InvalidConfig("history must be >= 1".into()));
        }
        match self.partition {
            PartitionConfig::Grid { m: 0 } => {
                return Err(Error::InvalidConfig("grid m must be >= 1".into()))
            }
            PartitionConfig::KMeans { n } | PartitionConfig::Gmm { n } if n == 0 => {
                return Err(Error::InvalidConfig("cluster count must be >= 1".into()))
            }
            _ => {}
        }
        if let ModelConfig::Hmm { n_hidden: 0 } = self.model {
            return Err(Error::InvalidConfig("n_hidden must be >= 1".into()));
        }
        let d = &self.defaults;
        positive("gmm_var_floor", d.gmm_var_floor)?;
        positive("prob_floor", d.prob_floor)?;
        positive("unk_floor", d.unk_floor)?;
        positive("sen_epsilon", d.sen_epsilon)?;
        positive("perp_smoothing", d.perp_smoothing)?;
        positive("stationary_tol", d.stationary_tol)?;
        if d.prob_floor > 1.0 || d.unk_floor > 1.0 {
            return Err(Error::InvalidConfig("floors must not exceed 1".into()));
        }
        if !(0.0..1.0).contains(&d.hmm_floor) {
            return Err(Error::InvalidConfig("hmm_floor must lie in [0, 1)".into()));
        }
        if d.sen_samples == 0 || d.perp_bins == 0 || d.score_hist_bins == 0 || d.hmm_restarts == 0 {
            return Err(Error::InvalidConfig(
                "sample, bin and restart counts must be >= 1".into(),
            ));
        }
        if d.trend.n_window == 0 {
            return Err(Error::InvalidConfig("trend window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&d.unbound_semantics) {
            return Err(Error::InvalidConfig(
                "unbound_semantics must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_fills_defaults() {
        let cfg = PipelineConfig::from_json(
            r#"{"seed": 7, "pca_k": 4, "partition": {"method": "kmeans", "n": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.history, 1);
        assert_eq!(cfg.model, ModelConfig::Dtmc);
        assert_eq!(cfg.defaults, AnalysisDefaults::default());
        assert_eq!(cfg.id(), "pca4-kmeans10-h1-dtmc-transition");

        let round: PipelineConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn seed_is_mandatory_and_ranges_checked() {
        assert!(PipelineConfig::from_json(r#"{"partition": {"method": "grid", "m": 3}}"#).is_err());
        assert!(PipelineConfig::from_json(
            r#"{"seed": 1, "partition": {"method": "grid", "m": 0}}"#
        )
        .is_err());
        assert!(PipelineConfig::from_json(
            r#"{"seed": 1, "partition": {"method": "grid", "m": 3}, "model": {"type": "hmm", "n_hidden": 0}}"#
        )
        .is_err());
        assert!(PipelineConfig::from_json(
            r#"{"seed": 1, "partition": {"method": "grid", "m": 3}, "bogus": 1}"#
        )
        .is_err());
    }
}
