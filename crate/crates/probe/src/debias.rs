//! The three bias-mitigation algorithms: gray-box probability weighting,
//! gray-box probability calibration, and the black-box two-hop rule.
//!
//! All argmax ties break to the lowest symbol or content index so that runs
//! are reproducible. Probabilities need not be normalized — both gray-box
//! selectors are invariant under scaling a probability set by a positive
//! constant, so raw values (e.g. exponentiated top-5 logprobs) are used
//! as-is.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcq::{
    decode_answer, Direction, McqError, OptionSymbol, RequestLayout, SensitivitySetting,
    MAX_OPTIONS, MIN_OPTIONS,
};

/// Probability assigned to symbols absent from a truncated top-k list.
/// Keeps weighting products and calibration ratios finite without letting
/// an unreported symbol win any argmax.
pub const PROBABILITY_FLOOR: f64 = 1e-10;

/// Per-symbol answer probabilities from a gray-box backend.
///
/// Values are raw (not necessarily summing to one); symbols missing from
/// the map read as [`PROBABILITY_FLOOR`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolProbabilities {
    map: BTreeMap<OptionSymbol, f64>,
}

impl SymbolProbabilities {
    pub fn new(entries: impl IntoIterator<Item = (OptionSymbol, f64)>) -> Self {
        SymbolProbabilities {
            map: entries.into_iter().collect(),
        }
    }

    /// Probability of `symbol`, with the floor for missing symbols.
    pub fn get(&self, symbol: OptionSymbol) -> f64 {
        self.map.get(&symbol).copied().unwrap_or(PROBABILITY_FLOOR)
    }

    pub fn insert(&mut self, symbol: OptionSymbol, p: f64) {
        self.map.insert(symbol, p);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OptionSymbol, f64)> + '_ {
        self.map.iter().map(|(s, p)| (*s, *p))
    }

    /// Highest-probability symbol among the first `k`; ties break to the
    /// lowest symbol.
    pub fn argmax(&self, k: usize) -> OptionSymbol {
        let mut best = OptionSymbol::from_index(1).unwrap();
        let mut best_p = self.get(best);
        for s in OptionSymbol::first(k).skip(1) {
            let p = self.get(s);
            if p > best_p {
                best = s;
                best_p = p;
            }
        }
        best
    }
}

/// Smoothed empirical selection distribution p_d over the first `k` symbols.
///
/// Built by [`estimate_distribution`]; every entry is strictly positive, so
/// it is safe as a divisor and its argmax is well defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    /// p_d for symbols A.. in order; sums to 1 within 1e-9.
    values: Vec<f64>,
    pub sample_count: usize,
}

impl AnswerDistribution {
    /// Builds a distribution from explicit proportions (e.g. a nominal
    /// distribution known in closed form rather than estimated). Returns
    /// `None` unless every value is strictly positive — zero entries would
    /// break the calibration divisions.
    pub fn from_proportions(values: Vec<f64>, sample_count: usize) -> Option<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite() && *v > 0.0) {
            return None;
        }
        Some(AnswerDistribution {
            values,
            sample_count,
        })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// p_d(symbol). Symbols beyond this distribution's k read as 0, which
    /// never wins an argmax and flags misuse in the selectors' k checks.
    pub fn p(&self, symbol: OptionSymbol) -> f64 {
        self.values.get(symbol.index() - 1).copied().unwrap_or(0.0)
    }

    /// The most-selected symbol; ties break to the lowest symbol.
    pub fn argmax_symbol(&self) -> OptionSymbol {
        let mut best = 0usize;
        for (i, v) in self.values.iter().enumerate().skip(1) {
            if *v > self.values[best] {
                best = i;
            }
        }
        OptionSymbol::from_index(best + 1).unwrap()
    }

    pub fn iter(&self) -> impl Iterator<Item = (OptionSymbol, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (OptionSymbol::from_index(i + 1).unwrap(), *v))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DebiasError {
    #[error("all weighted probability products are zero")]
    DegenerateProbabilities,
    #[error("neither direction produced a parseable choice")]
    BothInvalid,
    #[error("layout has {layout_k} options but the distribution covers {dist_k}")]
    DistributionMismatch { layout_k: usize, dist_k: usize },
    #[error("forward and backward layouts disagree on option count")]
    LayoutMismatch,
    #[error(transparent)]
    Decode(#[from] McqError),
}

/// Add-one-smoothed per-symbol selection proportions over a sample of valid
/// choices: p_d(s) = (count(s) + 1) / (N + k).
///
/// Total: an empty sample yields the uniform distribution. Choices beyond
/// the first `k` symbols cannot occur upstream (the parser enforces the
/// bound) and are ignored here.
pub fn estimate_distribution(valid_choices: &[OptionSymbol], k: usize) -> AnswerDistribution {
    assert!(
        (MIN_OPTIONS..=MAX_OPTIONS).contains(&k),
        "option count {k} outside {MIN_OPTIONS}..={MAX_OPTIONS}"
    );
    let mut counts = vec![0usize; k];
    let mut n = 0usize;
    for choice in valid_choices {
        if choice.index() <= k {
            counts[choice.index() - 1] += 1;
            n += 1;
        }
    }
    let denom = (n + k) as f64;
    AnswerDistribution {
        values: counts.iter().map(|c| (*c + 1) as f64 / denom).collect(),
        sample_count: n,
    }
}

/// Gray-box weighting: for each content, multiply the probabilities of the
/// symbol labelling it in the forward and backward layouts; pick the content
/// with the largest product (ties to the lowest content index).
pub fn weighted_select(
    forward: &RequestLayout,
    backward: &RequestLayout,
    p_forward: &SymbolProbabilities,
    p_backward: &SymbolProbabilities,
) -> Result<usize, DebiasError> {
    let k = forward.k();
    if backward.k() != k {
        return Err(DebiasError::LayoutMismatch);
    }
    let mut best: Option<(usize, f64)> = None;
    for content in 1..=k {
        let sym_f = forward
            .symbol_for_content(content)
            .ok_or(DebiasError::LayoutMismatch)?;
        let sym_b = backward
            .symbol_for_content(content)
            .ok_or(DebiasError::LayoutMismatch)?;
        let product = p_forward.get(sym_f) * p_backward.get(sym_b);
        let better = match best {
            None => true,
            Some((_, best_p)) => product > best_p,
        };
        if better {
            best = Some((content, product));
        }
    }
    match best {
        Some((content, product)) if product > 0.0 => Ok(content),
        _ => Err(DebiasError::DegenerateProbabilities),
    }
}

/// Gray-box calibration: divide each symbol's probability by its empirical
/// selection share, take the argmax (ties to the lowest symbol), and decode
/// it through the layout.
pub fn calibrated_select(
    layout: &RequestLayout,
    p: &SymbolProbabilities,
    p_d: &AnswerDistribution,
) -> Result<usize, DebiasError> {
    let k = layout.k();
    if p_d.k() != k {
        return Err(DebiasError::DistributionMismatch {
            layout_k: k,
            dist_k: p_d.k(),
        });
    }
    let mut best = OptionSymbol::from_index(1).unwrap();
    let mut best_ratio = p.get(best) / p_d.p(best);
    for s in OptionSymbol::first(k).skip(1) {
        let ratio = p.get(s) / p_d.p(s);
        if ratio > best_ratio {
            best = s;
            best_ratio = ratio;
        }
    }
    Ok(decode_answer(layout, best)?)
}

/// Black-box two-hop rule: accept the forward choice unless it landed on
/// the most-biased symbol (the argmax of `p_d_forward`), in which case take
/// the backward choice instead.
///
/// `None` stands for an unparseable answer: an invalid forward falls
/// through to the backward answer, an invalid backward keeps the forward
/// one, and two invalids are an error.
pub fn two_hop_select(
    forward: &RequestLayout,
    backward: &RequestLayout,
    forward_choice: Option<OptionSymbol>,
    backward_choice: Option<OptionSymbol>,
    p_d_forward: &AnswerDistribution,
) -> Result<usize, DebiasError> {
    let k = forward.k();
    if backward.k() != k {
        return Err(DebiasError::LayoutMismatch);
    }
    if p_d_forward.k() != k {
        return Err(DebiasError::DistributionMismatch {
            layout_k: k,
            dist_k: p_d_forward.k(),
        });
    }
    let most_biased = p_d_forward.argmax_symbol();
    match (forward_choice, backward_choice) {
        (None, None) => Err(DebiasError::BothInvalid),
        (None, Some(b)) => Ok(decode_answer(backward, b)?),
        (Some(f), None) => Ok(decode_answer(forward, f)?),
        (Some(f), Some(b)) => {
            if f != most_biased {
                Ok(decode_answer(forward, f)?)
            } else {
                Ok(decode_answer(backward, b)?)
            }
        }
    }
}

/// On-disk form of an [`AnswerDistribution`], tagged with the run context
/// it was estimated under so a later run can refuse a mismatched file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFile {
    pub symbols: BTreeMap<OptionSymbol, f64>,
    pub n: usize,
    pub setting: SensitivitySetting,
    pub direction: Direction,
}

#[derive(Debug, Error)]
pub enum DistributionFileError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parsing {path}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("distribution file has a gap: missing symbol {missing}")]
    MissingSymbol { missing: OptionSymbol },
    #[error("distribution file is empty")]
    Empty,
}

impl DistributionFile {
    pub fn new(
        dist: &AnswerDistribution,
        setting: SensitivitySetting,
        direction: Direction,
    ) -> Self {
        DistributionFile {
            symbols: dist.iter().collect(),
            n: dist.sample_count,
            setting,
            direction,
        }
    }

    /// Reassembles the in-memory distribution. The symbols must form a
    /// contiguous A..k block.
    pub fn to_distribution(&self) -> Result<AnswerDistribution, DistributionFileError> {
        if self.symbols.is_empty() {
            return Err(DistributionFileError::Empty);
        }
        let k = self.symbols.len();
        let mut values = Vec::with_capacity(k);
        for s in OptionSymbol::first(k) {
            match self.symbols.get(&s) {
                Some(v) => values.push(*v),
                None => return Err(DistributionFileError::MissingSymbol { missing: s }),
            }
        }
        Ok(AnswerDistribution {
            values,
            sample_count: self.n,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DistributionFileError> {
        let text = serde_json::to_string_pretty(self).expect("distribution serializes");
        fs::write(path, text).map_err(|source| DistributionFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DistributionFileError> {
        let text = fs::read_to_string(path).map_err(|source| DistributionFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DistributionFileError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}
