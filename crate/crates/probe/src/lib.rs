//! Harness for measuring and mitigating selection biases of multiple-choice
//! answer selectors.
//!
//! A selector (an LLM, or the bundled biased-responder simulator) is asked
//! every question twice: once in its original presentation (`forward`) and
//! once under one of three reversals (`backward`): relabeled symbols
//! (`token`), reversed presentation order (`order`), or reversed contents
//! under fixed symbols (`both`). Disagreement between the two decoded
//! answers is the fluctuation rate; three mitigation strategies (probability
//! weighting, probability calibration, two-hop) reduce the damage the
//! underlying bias does to accuracy.

pub mod backends;
pub mod datasets;
pub mod debias;
pub mod mcq;
pub mod metrics;
pub mod prompting;
pub mod report;
pub mod runner;

pub use mcq::{
    build_request_pair, decode_answer, validate_item, Direction, McqItem, OptionSymbol,
    RequestLayout, SensitivitySetting,
};
