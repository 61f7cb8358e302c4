//! Run orchestration: layout pairs, backend queries (through the cache),
//! decoding, and aggregation into an [`EvaluationReport`].
//!
//! Items are processed by a bounded worker pool, but every answer is placed
//! back at its item index before aggregation, and the aggregate statistics
//! are order-independent — so reports are byte-identical across worker
//! counts. On a backend failure mid-run the completed items are still
//! aggregated into a partial report (marked `incomplete`) so paid API work
//! is never lost.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use thiserror::Error;

use crate::backends::cache::{request_key, AnswerCache};
use crate::backends::{AnswerRequest, BackendError, ModelAnswer, SelectorBackend};
use crate::datasets::{split_validation, DatasetError, DatasetManifest};
use crate::debias::{
    calibrated_select, estimate_distribution, two_hop_select, weighted_select, AnswerDistribution,
    DebiasError,
};
use crate::mcq::{
    build_request_pair, decode_answer, Direction, McqItem, OptionSymbol, RequestLayout,
    SensitivitySetting,
};
use crate::metrics::{DecodedChoice, EvaluationReport, MethodReport, MetricsError, PairedOutcome};
use crate::prompting::render_prompt;

/// Mitigation algorithm applied on top of the paired answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    None,
    Weighting,
    Calibration,
    TwoHop,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Weighting => "weighting",
            Method::Calibration => "calibration",
            Method::TwoHop => "two-hop",
        }
    }

    /// Whether the method needs per-symbol probabilities from the backend.
    pub fn needs_gray_box(&self) -> bool {
        matches!(self, Method::Weighting | Method::Calibration)
    }

    /// Whether the method needs an empirical answer distribution.
    pub fn needs_distribution(&self) -> bool {
        matches!(self, Method::Calibration | Method::TwoHop)
    }
}

/// Which direction(s) calibration corrects. Forward alone is the default —
/// it needs only one request per question on a live backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrateDirection {
    Forward,
    Backward,
    Both,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub setting: SensitivitySetting,
    pub method: Method,
    pub seed: u64,
    pub concurrency: usize,
    /// Items sampled off for distribution estimation when no distribution
    /// file is supplied.
    pub validation_size: usize,
    pub calibrate: CalibrateDirection,
    /// Pre-estimated distributions (e.g. loaded from files); when absent
    /// they are estimated from the validation split.
    pub dist_forward: Option<AnswerDistribution>,
    pub dist_backward: Option<AnswerDistribution>,
}

impl RunConfig {
    pub fn new(setting: SensitivitySetting) -> Self {
        RunConfig {
            setting,
            method: Method::None,
            seed: 42,
            concurrency: 4,
            validation_size: 200,
            calibrate: CalibrateDirection::Forward,
            dist_forward: None,
            dist_backward: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(BackendError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("method {method} needs per-symbol probabilities, which this backend did not supply")]
    GrayBoxRequired { method: &'static str },
    #[error("method {method} needs a fixed option count, but the dataset mixes several")]
    MixedOptionCounts { method: &'static str },
    #[error("{direction} distribution covers {dist_k} symbols but the dataset has {expected_k} options")]
    DistributionMismatch {
        direction: Direction,
        dist_k: usize,
        expected_k: usize,
    },
    #[error("no items to evaluate")]
    NoItems,
}

impl RunError {
    /// True for failures of the run's inputs or configuration (as opposed
    /// to the backend misbehaving at runtime).
    pub fn is_config_error(&self) -> bool {
        !matches!(self, RunError::Backend(_))
    }
}

/// A failed run, still carrying the report over the completed items when
/// any item finished before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub error: RunError,
    pub partial: Option<Box<EvaluationReport>>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)?;
        if self.partial.is_some() {
            write!(f, " (partial results flushed)")?;
        }
        Ok(())
    }
}

impl std::error::Error for RunFailure {}

impl From<RunError> for RunFailure {
    fn from(error: RunError) -> Self {
        RunFailure {
            error,
            partial: None,
        }
    }
}

/// Runs `f(0..n)` on a bounded pool, placing each result at its index.
/// After the first error no new items are started; in-flight items finish.
/// Returns the indexed results and the first error, if any.
fn parallel_map<T, F>(
    n: usize,
    concurrency: usize,
    f: F,
) -> (Vec<Option<T>>, Option<BackendError>)
where
    T: Send,
    F: Fn(usize) -> Result<T, BackendError> + Sync,
{
    let mut results: Vec<Option<T>> = (0..n).map(|_| None).collect();
    if n == 0 {
        return (results, None);
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = concurrency.clamp(1, n);
    let (tx, rx) = mpsc::channel::<(usize, Result<T, BackendError>)>();
    let first_error = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (f, next, stop) = (&f, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let result = f(i);
                if result.is_err() {
                    stop.store(true, Ordering::Relaxed);
                }
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut first_error = None;
        for (i, result) in rx {
            match result {
                Ok(value) => results[i] = Some(value),
                Err(err) => {
                    if first_error.is_none() {
                        first_error = Some(err);
                    }
                }
            }
        }
        first_error
    });
    (results, first_error)
}

fn invalid_answer(raw: String) -> ModelAnswer {
    ModelAnswer {
        raw_text: raw,
        parsed: None,
        probabilities: None,
    }
}

/// One backend query, going through the cache when the backend is cacheable
/// and a cache is attached. A reply that stays unparseable after the
/// backend's retry is recorded as an invalid answer, not a run failure.
fn fetch_answer(
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    item: &McqItem,
    layout: &RequestLayout,
) -> Result<ModelAnswer, BackendError> {
    let prompt = render_prompt(item, layout).expect("validated items render");
    let cache_entry = match (cache, backend.cache_params()) {
        (Some(cache), Some(params)) => {
            let key = request_key(backend.model_name(), prompt.as_str(), &params);
            if let Some(hit) = cache.lookup(&key) {
                return Ok(hit);
            }
            Some((cache, key))
        }
        _ => None,
    };
    let request = AnswerRequest {
        item,
        layout,
        prompt: &prompt,
    };
    let answer = match backend.answer(&request) {
        Ok(answer) => answer,
        Err(BackendError::Parse(failure)) => invalid_answer(failure.raw),
        Err(err) => return Err(err),
    };
    if let Some((cache, key)) = cache_entry {
        if let Err(err) = cache.store(&key, backend.model_name(), prompt.as_str(), &answer) {
            log::warn!("cache append failed: {err}");
        }
    }
    Ok(answer)
}

struct PairAnswers {
    forward: ModelAnswer,
    backward: ModelAnswer,
}

fn collect_pairs(
    items: &[McqItem],
    setting: SensitivitySetting,
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    concurrency: usize,
) -> (Vec<Option<PairAnswers>>, Option<BackendError>) {
    parallel_map(items.len(), concurrency, |i| {
        let item = &items[i];
        let (fwd, bwd) = build_request_pair(item, setting).expect("validated item");
        Ok(PairAnswers {
            forward: fetch_answer(backend, cache, item, &fwd)?,
            backward: fetch_answer(backend, cache, item, &bwd)?,
        })
    })
}

fn collect_one_direction(
    items: &[McqItem],
    setting: SensitivitySetting,
    direction: Direction,
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    concurrency: usize,
) -> Result<Vec<ModelAnswer>, RunError> {
    let (answers, error) = parallel_map(items.len(), concurrency, |i| {
        let item = &items[i];
        let (fwd, bwd) = build_request_pair(item, setting).expect("validated item");
        let layout = match direction {
            Direction::Forward => fwd,
            Direction::Backward => bwd,
        };
        fetch_answer(backend, cache, item, &layout)
    });
    if let Some(err) = error {
        return Err(RunError::Backend(err));
    }
    Ok(answers.into_iter().map(|a| a.unwrap()).collect())
}

fn decoded_choice(layout: &RequestLayout, answer: &ModelAnswer) -> DecodedChoice {
    match answer.parsed.and_then(|s| decode_answer(layout, s).ok()) {
        Some(content) => DecodedChoice::Content(content),
        None => DecodedChoice::Invalid,
    }
}

/// Builds the baseline report over the completed answer pairs.
fn baseline_report(
    items: &[McqItem],
    pairs: &[(usize, &PairAnswers)],
    setting: SensitivitySetting,
) -> Result<EvaluationReport, RunError> {
    if pairs.is_empty() {
        return Err(RunError::NoItems);
    }
    let mut outcomes = Vec::with_capacity(pairs.len());
    let mut forward_symbols: Vec<Option<OptionSymbol>> = Vec::with_capacity(pairs.len());
    let mut k_max = 0usize;
    for (idx, pair) in pairs {
        let item = &items[*idx];
        let (fwd, bwd) = build_request_pair(item, setting).expect("validated item");
        k_max = k_max.max(item.k());
        outcomes.push(PairedOutcome {
            item_id: item.id.clone(),
            forward_choice: decoded_choice(&fwd, &pair.forward),
            backward_choice: decoded_choice(&bwd, &pair.backward),
            gold_index: item.gold_index,
        });
        forward_symbols.push(pair.forward.parsed);
    }
    EvaluationReport::from_outcomes(setting, &outcomes, &forward_symbols, k_max).map_err(
        |err| match err {
            MetricsError::EmptyInput => RunError::NoItems,
            other => RunError::Backend(BackendError::Transport {
                attempts: 0,
                message: format!("aggregation failed: {other}"),
            }),
        },
    )
}

/// Measures accuracies and fluctuation without applying any method.
pub fn run_sensitivity(
    manifest: &DatasetManifest,
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    config: &RunConfig,
) -> Result<EvaluationReport, RunFailure> {
    if manifest.items.is_empty() {
        return Err(RunError::NoItems.into());
    }
    let (pairs, error) = collect_pairs(
        &manifest.items,
        config.setting,
        backend,
        cache,
        config.concurrency,
    );
    let completed: Vec<(usize, &PairAnswers)> = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    match error {
        None => baseline_report(&manifest.items, &completed, config.setting).map_err(Into::into),
        Some(err) => {
            let partial = baseline_report(&manifest.items, &completed, config.setting)
                .ok()
                .map(|mut report| {
                    report.incomplete = Some(true);
                    Box::new(report)
                });
            Err(RunFailure {
                error: RunError::Backend(err),
                partial,
            })
        }
    }
}

/// The distribution sources for a debias run, either supplied up front or
/// estimated from a validation split.
struct Distributions {
    forward: Option<AnswerDistribution>,
    backward: Option<AnswerDistribution>,
}

fn check_dist(
    dist: AnswerDistribution,
    direction: Direction,
    k: usize,
) -> Result<AnswerDistribution, RunError> {
    if dist.k() != k {
        return Err(RunError::DistributionMismatch {
            direction,
            dist_k: dist.k(),
            expected_k: k,
        });
    }
    Ok(dist)
}

/// Symbols of the valid parsed answers, for distribution estimation.
fn valid_symbols(answers: &[ModelAnswer]) -> Vec<OptionSymbol> {
    answers.iter().filter_map(|a| a.parsed).collect()
}

/// Estimates the forward and backward answer distributions from a seeded
/// validation sample, for persisting and reusing across runs. With a
/// validation size of zero both distributions are uniform (pure smoothing).
pub fn estimate_distributions(
    manifest: &DatasetManifest,
    setting: SensitivitySetting,
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    validation_size: usize,
    seed: u64,
    concurrency: usize,
) -> Result<(AnswerDistribution, AnswerDistribution), RunFailure> {
    let k = manifest
        .declared_k
        .ok_or(RunError::MixedOptionCounts {
            method: "estimate-dist",
        })?;
    let (validation, _) =
        split_validation(manifest, validation_size, seed).map_err(RunError::Dataset)?;
    let forward = collect_one_direction(
        &validation,
        setting,
        Direction::Forward,
        backend,
        cache,
        concurrency,
    )?;
    let backward = collect_one_direction(
        &validation,
        setting,
        Direction::Backward,
        backend,
        cache,
        concurrency,
    )?;
    Ok((
        estimate_distribution(&valid_symbols(&forward), k),
        estimate_distribution(&valid_symbols(&backward), k),
    ))
}

/// Applies the configured method per item and attaches the method block to
/// the baseline report.
pub fn run_debias(
    manifest: &DatasetManifest,
    backend: &dyn SelectorBackend,
    cache: Option<&AnswerCache>,
    config: &RunConfig,
) -> Result<EvaluationReport, RunFailure> {
    let method = config.method;
    if method == Method::None {
        return run_sensitivity(manifest, backend, cache, config);
    }
    if method.needs_gray_box() && !backend.gray_box() {
        return Err(RunError::GrayBoxRequired {
            method: method.as_str(),
        }
        .into());
    }

    let need_forward_dist = method == Method::TwoHop
        || (method == Method::Calibration
            && matches!(
                config.calibrate,
                CalibrateDirection::Forward | CalibrateDirection::Both
            ));
    let need_backward_dist = method == Method::Calibration
        && matches!(
            config.calibrate,
            CalibrateDirection::Backward | CalibrateDirection::Both
        );

    let fixed_k = if method.needs_distribution() {
        Some(manifest.declared_k.ok_or(RunError::MixedOptionCounts {
            method: method.as_str(),
        })?)
    } else {
        None
    };

    // Resolve distributions: supplied ones are used as-is; otherwise a
    // validation split is sampled off and queried in the needed directions,
    // and evaluation proceeds on the remainder.
    let mut owned_evaluation: Option<Vec<McqItem>> = None;
    let mut dists = Distributions {
        forward: None,
        backward: None,
    };
    if method.needs_distribution() {
        let k = fixed_k.unwrap();
        let estimate_forward = need_forward_dist && config.dist_forward.is_none();
        let estimate_backward = need_backward_dist && config.dist_backward.is_none();
        if estimate_forward || estimate_backward {
            let (validation, evaluation) =
                split_validation(manifest, config.validation_size, config.seed)
                    .map_err(RunError::Dataset)?;
            if estimate_forward {
                let answers = collect_one_direction(
                    &validation,
                    config.setting,
                    Direction::Forward,
                    backend,
                    cache,
                    config.concurrency,
                )?;
                dists.forward = Some(estimate_distribution(&valid_symbols(&answers), k));
            }
            if estimate_backward {
                let answers = collect_one_direction(
                    &validation,
                    config.setting,
                    Direction::Backward,
                    backend,
                    cache,
                    config.concurrency,
                )?;
                dists.backward = Some(estimate_distribution(&valid_symbols(&answers), k));
            }
            owned_evaluation = Some(evaluation);
        }
        if need_forward_dist && dists.forward.is_none() {
            dists.forward = Some(check_dist(
                config.dist_forward.clone().expect("resolved above"),
                Direction::Forward,
                k,
            )?);
        }
        if need_backward_dist && dists.backward.is_none() {
            dists.backward = Some(check_dist(
                config.dist_backward.clone().expect("resolved above"),
                Direction::Backward,
                k,
            )?);
        }
    }
    let evaluation_items: &[McqItem] = owned_evaluation.as_deref().unwrap_or(&manifest.items);

    if evaluation_items.is_empty() {
        return Err(RunError::NoItems.into());
    }

    let (pairs, error) = collect_pairs(
        evaluation_items,
        config.setting,
        backend,
        cache,
        config.concurrency,
    );
    let completed: Vec<(usize, &PairAnswers)> = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();

    let build = |completed: &[(usize, &PairAnswers)]| -> Result<EvaluationReport, RunError> {
        let mut report = baseline_report(evaluation_items, completed, config.setting)?;
        let method_block = apply_method(evaluation_items, completed, config, &dists)?;
        report.method = Some(MethodReport {
            baseline_accuracy: report.acc_mean,
            delta: method_block.0 - report.acc_mean,
            name: method.as_str().to_string(),
            accuracy: method_block.0,
            accuracy_backward_calibrated: method_block.1,
        });
        Ok(report)
    };

    match error {
        None => build(&completed).map_err(Into::into),
        Some(err) => {
            let partial = build(&completed).ok().map(|mut report| {
                report.incomplete = Some(true);
                Box::new(report)
            });
            Err(RunFailure {
                error: RunError::Backend(err),
                partial,
            })
        }
    }
}

/// Per-item method application. Returns the method accuracy and, when
/// calibrating both directions, the backward-calibrated accuracy.
fn apply_method(
    items: &[McqItem],
    pairs: &[(usize, &PairAnswers)],
    config: &RunConfig,
    dists: &Distributions,
) -> Result<(f64, Option<f64>), RunError> {
    let method = config.method;
    let gray_box_required = || RunError::GrayBoxRequired {
        method: method.as_str(),
    };
    let mut correct = 0usize;
    let mut backward_correct = 0usize;
    for (idx, pair) in pairs {
        let item = &items[*idx];
        let (fwd, bwd) = build_request_pair(item, config.setting).expect("validated item");
        match method {
            Method::None => unreachable!("dispatched to run_sensitivity"),
            Method::Weighting => {
                let p_f = pair
                    .forward
                    .probabilities
                    .as_ref()
                    .ok_or_else(gray_box_required)?;
                let p_b = pair
                    .backward
                    .probabilities
                    .as_ref()
                    .ok_or_else(gray_box_required)?;
                let choice = match weighted_select(&fwd, &bwd, p_f, p_b) {
                    Ok(content) => DecodedChoice::Content(content),
                    Err(DebiasError::DegenerateProbabilities) => {
                        // No information in the products; fall back to the
                        // plain forward answer.
                        decoded_choice(&fwd, &pair.forward)
                    }
                    Err(err) => return Err(unexpected(err)),
                };
                if choice.is_correct(item.gold_index) {
                    correct += 1;
                }
            }
            Method::Calibration => {
                let run_one = |layout: &RequestLayout,
                               answer: &ModelAnswer,
                               dist: &AnswerDistribution|
                 -> Result<bool, RunError> {
                    let probs = answer.probabilities.as_ref().ok_or_else(gray_box_required)?;
                    let content = calibrated_select(layout, probs, dist).map_err(unexpected)?;
                    Ok(content == item.gold_index)
                };
                match config.calibrate {
                    CalibrateDirection::Forward => {
                        let dist = dists.forward.as_ref().expect("resolved");
                        if run_one(&fwd, &pair.forward, dist)? {
                            correct += 1;
                        }
                    }
                    CalibrateDirection::Backward => {
                        let dist = dists.backward.as_ref().expect("resolved");
                        if run_one(&bwd, &pair.backward, dist)? {
                            correct += 1;
                        }
                    }
                    CalibrateDirection::Both => {
                        let dist_f = dists.forward.as_ref().expect("resolved");
                        let dist_b = dists.backward.as_ref().expect("resolved");
                        if run_one(&fwd, &pair.forward, dist_f)? {
                            correct += 1;
                        }
                        if run_one(&bwd, &pair.backward, dist_b)? {
                            backward_correct += 1;
                        }
                    }
                }
            }
            Method::TwoHop => {
                let dist = dists.forward.as_ref().expect("resolved");
                let choice = match two_hop_select(
                    &fwd,
                    &bwd,
                    pair.forward.parsed,
                    pair.backward.parsed,
                    dist,
                ) {
                    Ok(content) => DecodedChoice::Content(content),
                    Err(DebiasError::BothInvalid) => DecodedChoice::Invalid,
                    Err(err) => return Err(unexpected(err)),
                };
                if choice.is_correct(item.gold_index) {
                    correct += 1;
                }
            }
        }
    }
    let n = pairs.len() as f64;
    let backward = (config.method == Method::Calibration
        && config.calibrate == CalibrateDirection::Both)
        .then(|| backward_correct as f64 / n);
    Ok((correct as f64 / n, backward))
}

/// Debias preconditions are all checked before the per-item loop, so a
/// selector error here means an internal inconsistency.
fn unexpected(err: DebiasError) -> RunError {
    RunError::Backend(BackendError::Transport {
        attempts: 0,
        message: format!("method application failed: {err}"),
    })
}
