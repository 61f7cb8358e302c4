//! Selector backends: a deterministic biased-responder simulator used as a
//! verification oracle, and a live HTTP chat-completion client with an
//! append-only answer cache.
//!
//! Both backends speak [`ModelAnswer`]: the raw reply text, the parsed
//! symbol (or none, when unparseable), and — for gray-box backends —
//! per-symbol probabilities.

pub mod cache;
pub mod http;
pub mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debias::SymbolProbabilities;
use crate::mcq::{McqItem, OptionSymbol, RequestLayout};
use crate::prompting::{ParseFailure, PromptText};

/// One selector reply.
///
/// `parsed: None` is the invalid sentinel (no `[[X]]` tag within range).
/// When `probabilities` is present, `parsed` is its argmax — except in the
/// simulator's sampling stress mode, which deliberately decouples the
/// sampled reply from the exact mixture to model decode noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub raw_text: String,
    pub parsed: Option<OptionSymbol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<SymbolProbabilities>,
}

impl ModelAnswer {
    pub fn is_gray_box(&self) -> bool {
        self.probabilities.is_some()
    }
}

/// Ground-truth bias knobs for the simulator.
///
/// The responder knows the gold answer with probability `theta`; otherwise
/// it draws from a bias mixture proportional to
/// `token_bias[symbol] * position_bias[presentation position]`. Bias
/// vectors shorter than `k` repeat their last element, so `[1.0]` means
/// uniform for any `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub theta: f64,
    #[serde(default = "uniform_bias")]
    pub token_bias: Vec<f64>,
    #[serde(default = "uniform_bias")]
    pub position_bias: Vec<f64>,
    /// Run seed override; `None` inherits the run-level seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// When set, the reply is sampled from the mixture instead of being
    /// its argmax. Probabilities still report the exact mixture.
    #[serde(default)]
    pub sample: bool,
}

fn uniform_bias() -> Vec<f64> {
    vec![1.0]
}

impl BiasProfile {
    /// A bias-free always-correct responder.
    pub fn neutral() -> Self {
        BiasProfile {
            theta: 1.0,
            token_bias: uniform_bias(),
            position_bias: uniform_bias(),
            seed: None,
            sample: false,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |reason: &str| {
            Err(BackendError::InvalidProfile {
                reason: reason.to_string(),
            })
        };
        if !(0.0..=1.0).contains(&self.theta) {
            return invalid("theta must lie in [0, 1]");
        }
        for (name, v) in [
            ("token_bias", &self.token_bias),
            ("position_bias", &self.position_bias),
        ] {
            if v.is_empty() {
                return invalid(&format!("{name} must not be empty"));
            }
            if v.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return invalid(&format!("{name} weights must be finite and >= 0"));
            }
            if v.iter().all(|w| *w == 0.0) {
                return invalid(&format!("{name} needs at least one positive weight"));
            }
        }
        Ok(())
    }
}

/// Everything a backend may need to answer one request. The simulator uses
/// the item and layout; the HTTP client uses the prompt and the layout's
/// option count for reply parsing.
#[derive(Debug, Clone, Copy)]
pub struct AnswerRequest<'a> {
    pub item: &'a McqItem,
    pub layout: &'a RequestLayout,
    pub prompt: &'a PromptText,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("unparseable reply after retry")]
    Parse(#[from] ParseFailure),
    #[error("invalid bias profile: {reason}")]
    InvalidProfile { reason: String },
    #[error("no API key: pass one explicitly or set {var}")]
    MissingApiKey { var: &'static str },
}

/// A selector that can answer one laid-out question.
pub trait SelectorBackend: Send + Sync {
    fn answer(&self, request: &AnswerRequest<'_>) -> Result<ModelAnswer, BackendError>;

    /// Whether answers carry per-symbol probabilities.
    fn gray_box(&self) -> bool;

    /// Model identifier used in reports and cache records.
    fn model_name(&self) -> &str;

    /// Decoding-parameter string for cache keying, or `None` when answers
    /// should not be cached (the simulator: free, and keyed on more than
    /// the prompt text).
    fn cache_params(&self) -> Option<String> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_profile_is_valid() {
        BiasProfile::neutral().validate().unwrap();
    }

    #[test]
    fn profile_rejects_bad_theta() {
        let mut p = BiasProfile::neutral();
        p.theta = 1.5;
        assert!(matches!(
            p.validate(),
            Err(BackendError::InvalidProfile { .. })
        ));
    }

    #[test]
    fn profile_rejects_all_zero_and_negative_weights() {
        let mut p = BiasProfile::neutral();
        p.token_bias = vec![0.0, 0.0];
        assert!(p.validate().is_err());
        p.token_bias = vec![1.0, -0.1];
        assert!(p.validate().is_err());
        p.token_bias = vec![1.0];
        p.position_bias = vec![];
        assert!(p.validate().is_err());
    }

    #[test]
    fn profile_json_defaults() {
        let p: BiasProfile = serde_json::from_str(r#"{"theta": 0.6}"#).unwrap();
        assert_eq!(p.token_bias, vec![1.0]);
        assert_eq!(p.position_bias, vec![1.0]);
        assert_eq!(p.seed, None);
        assert!(!p.sample);
        p.validate().unwrap();
    }

    #[test]
    fn profile_json_round_trip() {
        let p: BiasProfile = serde_json::from_str(
            r#"{"theta": 0.6, "token_bias": [0.7, 0.1, 0.1, 0.1], "position_bias": [1.0], "seed": 7, "sample": true}"#,
        )
        .unwrap();
        let back: BiasProfile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
