//! Fluctuation rate, accuracies, option-proportion statistics, and the
//! accuracy-vs-fluctuation regression.
//!
//! All comparisons run over decoded *content* indices, so agreement is
//! meaningful across the symbol/order relabelings of the backward layouts.
//! An unparseable answer is `Invalid`: it disagrees with everything
//! (including another `Invalid`) and never counts as correct. The report
//! carries `invalid_count` separately so the opposite convention can be
//! recomputed from logs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcq::{OptionSymbol, SensitivitySetting};

/// A decoded answer: the chosen content index, or the invalid sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodedChoice {
    Content(usize),
    Invalid,
}

impl DecodedChoice {
    /// Agreement between two decoded answers. `Invalid` agrees with nothing,
    /// not even another `Invalid`.
    pub fn agrees_with(&self, other: &DecodedChoice) -> bool {
        match (self, other) {
            (DecodedChoice::Content(a), DecodedChoice::Content(b)) => a == b,
            _ => false,
        }
    }

    pub fn is_correct(&self, gold_index: usize) -> bool {
        matches!(self, DecodedChoice::Content(c) if *c == gold_index)
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, DecodedChoice::Invalid)
    }
}

/// The decoded forward and backward answers for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub item_id: String,
    pub forward_choice: DecodedChoice,
    pub backward_choice: DecodedChoice,
    pub gold_index: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("no valid answer in input")]
    AllInvalid,
    #[error("degenerate regression input: need at least two points with distinct x")]
    DegenerateInput,
}

/// Fraction of items whose forward and backward decoded answers differ.
pub fn fluctuation_rate(outcomes: &[PairedOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let flips = outcomes
        .iter()
        .filter(|o| !o.forward_choice.agrees_with(&o.backward_choice))
        .count();
    Ok(flips as f64 / outcomes.len() as f64)
}

/// Per-direction accuracies and their arithmetic mean.
pub fn accuracy(outcomes: &[PairedOutcome]) -> Result<(f64, f64, f64), MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = outcomes.len() as f64;
    let fwd = outcomes
        .iter()
        .filter(|o| o.forward_choice.is_correct(o.gold_index))
        .count() as f64
        / n;
    let bwd = outcomes
        .iter()
        .filter(|o| o.backward_choice.is_correct(o.gold_index))
        .count() as f64
        / n;
    Ok((fwd, bwd, (fwd + bwd) / 2.0))
}

/// Per-symbol selection shares over the valid answers, with the invalid
/// share reported separately (the valid shares sum to one on their own).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionProportions {
    pub shares: BTreeMap<OptionSymbol, f64>,
    pub invalid_share: f64,
    pub valid_count: usize,
    pub invalid_count: usize,
}

/// Fraction of valid answers selecting each of the first `k` symbols.
pub fn option_proportions(
    choices: &[Option<OptionSymbol>],
    k: usize,
) -> Result<OptionProportions, MetricsError> {
    let mut counts: BTreeMap<OptionSymbol, usize> =
        OptionSymbol::first(k).map(|s| (s, 0)).collect();
    let mut valid = 0usize;
    let mut invalid = 0usize;
    for choice in choices {
        match choice {
            Some(sym) if sym.index() <= k => {
                *counts.get_mut(sym).unwrap() += 1;
                valid += 1;
            }
            _ => invalid += 1,
        }
    }
    if valid == 0 {
        return Err(MetricsError::AllInvalid);
    }
    let shares = counts
        .into_iter()
        .map(|(s, c)| (s, c as f64 / valid as f64))
        .collect();
    Ok(OptionProportions {
        shares,
        invalid_share: invalid as f64 / choices.len() as f64,
        valid_count: valid,
        invalid_count: invalid,
    })
}

/// Ordinary least squares fit of `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// OLS over (accuracy, fluctuation-rate) points.
///
/// For constant-y input R-squared is 1 when the residuals are zero too
/// (the fit is exact), avoiding the 0/0 form.
pub fn linear_regression(points: &[(f64, f64)]) -> Result<RegressionSummary, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::DegenerateInput);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(RegressionSummary {
        slope,
        intercept,
        r_squared,
    })
}

/// Accuracy and delta for a debias run, reported next to the baseline
/// computed from the same answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub accuracy: f64,
    /// Baseline this method is compared against: the mean of the raw
    /// forward and backward accuracies.
    pub baseline_accuracy: f64,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_backward_calibrated: Option<f64>,
}

/// Aggregated statistics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub setting: SensitivitySetting,
    pub n: usize,
    pub acc_forward: f64,
    pub acc_backward: f64,
    pub acc_mean: f64,
    pub fluctuation_rate: f64,
    /// Selection shares of the forward answers, over valid answers only.
    pub proportions_forward: BTreeMap<OptionSymbol, f64>,
    /// Unparseable answers across both directions.
    pub invalid_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodReport>,
    /// Present (and true) only when a run was aborted and the report covers
    /// the completed items only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incomplete: Option<bool>,
}

impl EvaluationReport {
    /// Builds the baseline report from paired outcomes plus the forward
    /// symbol choices. If every forward answer is invalid the proportions
    /// map is left empty rather than failing the whole run.
    pub fn from_outcomes(
        setting: SensitivitySetting,
        outcomes: &[PairedOutcome],
        forward_symbols: &[Option<OptionSymbol>],
        k: usize,
    ) -> Result<Self, MetricsError> {
        let (acc_forward, acc_backward, acc_mean) = accuracy(outcomes)?;
        let fluct = fluctuation_rate(outcomes)?;
        let proportions_forward = match option_proportions(forward_symbols, k) {
            Ok(p) => p.shares,
            Err(MetricsError::AllInvalid) => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        let invalid_count = outcomes
            .iter()
            .map(|o| {
                o.forward_choice.is_invalid() as usize + o.backward_choice.is_invalid() as usize
            })
            .sum();
        Ok(EvaluationReport {
            setting,
            n: outcomes.len(),
            acc_forward,
            acc_backward,
            acc_mean,
            fluctuation_rate: fluct,
            proportions_forward,
            invalid_count,
            method: None,
            incomplete: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcomes(forward: &[i64], backward: &[i64], gold: &[usize]) -> Vec<PairedOutcome> {
        let dec = |v: i64| {
            if v < 0 {
                DecodedChoice::Invalid
            } else {
                DecodedChoice::Content(v as usize)
            }
        };
        forward
            .iter()
            .zip(backward)
            .zip(gold)
            .enumerate()
            .map(|(i, ((&f, &b), &g))| PairedOutcome {
                item_id: format!("i{i}"),
                forward_choice: dec(f),
                backward_choice: dec(b),
                gold_index: g,
            })
            .collect()
    }

    fn sym(c: char) -> OptionSymbol {
        OptionSymbol::from_letter(c).unwrap()
    }

    #[test]
    fn fluctuation_rate_counts_mismatching_positions() {
        // Positions 2 and 5 disagree.
        let o = outcomes(&[1, 2, 3, 4, 2], &[1, 3, 3, 4, 1], &[1; 5]);
        assert_eq!(fluctuation_rate(&o).unwrap(), 0.4);
    }

    #[test]
    fn fluctuation_rate_zero_when_all_agree() {
        let o = outcomes(&[1, 2, 3], &[1, 2, 3], &[1; 3]);
        assert_eq!(fluctuation_rate(&o).unwrap(), 0.0);
    }

    #[test]
    fn fluctuation_rate_one_when_all_differ() {
        let o = outcomes(&[1, 1, 1], &[2, 3, 4], &[1; 3]);
        assert_eq!(fluctuation_rate(&o).unwrap(), 1.0);
    }

    #[test]
    fn invalid_disagrees_even_with_invalid() {
        let o = outcomes(&[-1, 1], &[-1, 1], &[1, 1]);
        assert_eq!(fluctuation_rate(&o).unwrap(), 0.5);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(fluctuation_rate(&[]).unwrap_err(), MetricsError::EmptyInput);
        assert_eq!(accuracy(&[]).unwrap_err(), MetricsError::EmptyInput);
    }

    #[test]
    fn accuracy_split_and_mean() {
        let o = outcomes(&[1, 1, 1, 1], &[2, 2, 2, 2], &[1; 4]);
        assert_eq!(accuracy(&o).unwrap(), (1.0, 0.0, 0.5));
    }

    #[test]
    fn accuracy_hand_count() {
        // 3 of 4 forward correct, 1 of 4 backward correct.
        let o = outcomes(&[1, 2, 3, 4], &[2, 2, 1, 1], &[1, 2, 3, 2]);
        assert_eq!(accuracy(&o).unwrap(), (0.75, 0.25, 0.5));
    }

    #[test]
    fn invalid_never_matches_gold() {
        let o = outcomes(&[-1, -1], &[-1, -1], &[1, 2]);
        assert_eq!(accuracy(&o).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn proportions_exclude_invalid_from_denominator() {
        let choices = vec![Some(sym('A')), Some(sym('B')), Some(sym('A')), None];
        let p = option_proportions(&choices, 2).unwrap();
        assert!((p.shares[&sym('A')] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.shares[&sym('B')] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.invalid_share, 0.25);
        assert_eq!((p.valid_count, p.invalid_count), (3, 1));
    }

    #[test]
    fn proportions_all_same_symbol() {
        let choices = vec![Some(sym('A')); 5];
        let p = option_proportions(&choices, 4).unwrap();
        assert_eq!(p.shares[&sym('A')], 1.0);
        assert_eq!(p.shares[&sym('D')], 0.0);
    }

    #[test]
    fn proportions_all_invalid_is_an_error() {
        let choices: Vec<Option<OptionSymbol>> = vec![None, None];
        assert_eq!(
            option_proportions(&choices, 4).unwrap_err(),
            MetricsError::AllInvalid
        );
    }

    #[test]
    fn proportions_recover_an_arc_like_share_row() {
        // A realistic ARC answer-share profile: 18.46 / 29.48 / 30.18 /
        // 21.87 percent at N = 10000.
        let mut choices = Vec::new();
        for (c, n) in [('A', 1846), ('B', 2948), ('C', 3018), ('D', 2188)] {
            choices.extend(std::iter::repeat_n(Some(sym(c)), n));
        }
        let p = option_proportions(&choices, 4).unwrap();
        assert!((p.shares[&sym('A')] - 0.1846).abs() < 1e-12);
        assert!((p.shares[&sym('C')] - 0.3018).abs() < 1e-12);
        let sum: f64 = p.shares.values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn regression_perfect_line() {
        let fit = linear_regression(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert_eq!(fit.slope, 1.0);
        assert_eq!(fit.intercept, 0.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn regression_constant_y() {
        let fit = linear_regression(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.intercept, 1.0);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn regression_rejects_degenerate_input() {
        assert_eq!(
            linear_regression(&[(1.0, 2.0)]).unwrap_err(),
            MetricsError::DegenerateInput
        );
        assert_eq!(
            linear_regression(&[(1.0, 2.0), (1.0, 3.0)]).unwrap_err(),
            MetricsError::DegenerateInput
        );
    }

    #[test]
    fn regression_matches_normal_equation_oracle_on_cloud() {
        // Independent route: solve the 2x2 normal equations by Cramer's rule.
        let pts = [(0.1, 0.9), (0.35, 0.7), (0.5, 0.55), (0.72, 0.3), (0.9, 0.2)];
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        let slope = (n * sxy - sx * sy) / det;
        let intercept = (sy * sxx - sx * sxy) / det;

        let fit = linear_regression(&pts).unwrap();
        assert!((fit.slope - slope).abs() < 1e-12);
        assert!((fit.intercept - intercept).abs() < 1e-12);
        assert!(fit.r_squared > 0.9 && fit.r_squared <= 1.0);
    }

    #[test]
    fn statistics_are_order_independent() {
        let a = outcomes(&[1, 2, -1, 4], &[2, 2, 3, 4], &[1, 2, 3, 4]);
        let mut b = a.clone();
        b.reverse();
        assert_eq!(fluctuation_rate(&a).unwrap(), fluctuation_rate(&b).unwrap());
        assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
    }

    #[test]
    fn report_mean_is_exact_midpoint_and_counts_invalids() {
        let o = outcomes(&[1, -1, 3], &[1, 2, -1], &[1, 2, 3]);
        let symbols = vec![Some(sym('A')), None, Some(sym('C'))];
        let report =
            EvaluationReport::from_outcomes(SensitivitySetting::Token, &o, &symbols, 4).unwrap();
        assert_eq!(report.acc_mean, (report.acc_forward + report.acc_backward) / 2.0);
        assert_eq!(report.invalid_count, 2);
        assert_eq!(report.n, 3);
    }
}
