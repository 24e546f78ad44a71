//! Engine configuration: one TOML file with every tunable constant.

use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::cf::CfParams;
use crate::ingest::parse_timestamp;
use crate::mf::AlsParams;
use crate::recommend::RecommendParams;
use crate::scoring::ScoreWeights;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Share of each user's latest applies held out.
    pub holdout_fraction: f64,
    /// List length scored by precision and recall.
    pub k: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            holdout_fraction: 0.3,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub window_days: u32,
    /// RFC 3339 timestamp; when unset, the latest event timestamp is used.
    pub reference_date: Option<String>,
    pub seed: u64,
    /// Clicks without a query id are grouped into sessions split by gaps
    /// longer than this.
    pub session_gap_minutes: u32,
    /// Only compare embeddings of jobs in the same category.
    pub category_blocking: bool,
    pub weights: ScoreWeights,
    pub recommend: RecommendParams,
    pub mf: AlsParams,
    pub cf: CfParams,
    pub eval: EvalParams,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            window_days: 180,
            reference_date: None,
            seed: 0,
            session_gap_minutes: 30,
            category_blocking: false,
            weights: ScoreWeights::default(),
            recommend: RecommendParams::default(),
            mf: AlsParams::default(),
            cf: CfParams::default(),
            eval: EvalParams::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: EngineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_days == 0 {
            return Err(invalid("window_days", "must be positive"));
        }
        self.reference()?;
        self.weights
            .validate()
            .map_err(|e| invalid("weights", e.to_string()))?;

        let r = &self.recommend;
        if r.k == 0 {
            return Err(invalid("recommend.k", "must be at least 1"));
        }
        if r.min_recs == Some(0) {
            return Err(invalid("recommend.min_recs", "must be at least 1"));
        }
        if !(r.activity_lambda.is_finite() && r.activity_lambda >= 0.0) {
            return Err(invalid(
                "recommend.activity_lambda",
                "must be finite and non-negative",
            ));
        }
        if r.level2_fanout == Some(0) {
            return Err(invalid("recommend.level2_fanout", "must be at least 1"));
        }
        if !(r.location_radius_km.is_finite() && r.location_radius_km > 0.0) {
            return Err(invalid("recommend.location_radius_km", "must be positive"));
        }
        if !(r.location_boost.is_finite() && r.location_boost >= 1.0) {
            return Err(invalid("recommend.location_boost", "must be at least 1"));
        }
        let pr = &r.pagerank;
        if !(pr.damping > 0.0 && pr.damping < 1.0) {
            return Err(invalid("recommend.pagerank.damping", "must lie in (0, 1)"));
        }
        if !(pr.epsilon.is_finite() && pr.epsilon > 0.0) {
            return Err(invalid("recommend.pagerank.epsilon", "must be positive"));
        }
        if pr.max_iters == 0 {
            return Err(invalid(
                "recommend.pagerank.max_iters",
                "must be at least 1",
            ));
        }

        if self.mf.k == 0 {
            return Err(invalid("mf.k", "must be at least 1"));
        }
        if !(self.mf.lambda.is_finite() && self.mf.lambda >= 0.0) {
            return Err(invalid("mf.lambda", "must be finite and non-negative"));
        }
        if self.cf.applicants == 0 {
            return Err(invalid("cf.applicants", "must be at least 1"));
        }
        if !(self.cf.recency_lambda.is_finite() && self.cf.recency_lambda >= 0.0) {
            return Err(invalid(
                "cf.recency_lambda",
                "must be finite and non-negative",
            ));
        }
        let f = self.eval.holdout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid("eval.holdout_fraction", "must lie in (0, 1)"));
        }
        if self.eval.k == 0 {
            return Err(invalid("eval.k", "must be at least 1"));
        }
        Ok(())
    }

    /// The configured reference date, if any.
    pub fn reference(&self) -> Result<Option<DateTime<Utc>>, ConfigError> {
        self.reference_date
            .as_deref()
            .map(|s| parse_timestamp(s).map_err(|e| invalid("reference_date", e)))
            .transpose()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
