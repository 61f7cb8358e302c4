//! Deterministic biased-responder simulator.
//!
//! The simulated selector answers a laid-out question from a closed-form
//! mixture: with probability `theta` it picks the symbol labelling the gold
//! content in this layout; with probability `1 - theta` it draws from a
//! bias distribution q(s) proportional to
//! `token_bias[letter] * position_bias[presentation position]`.
//!
//! Because the mixture is known exactly, every mitigation algorithm can be
//! verified against hand-computable expectations without network access.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::debias::SymbolProbabilities;
use crate::mcq::{McqItem, RequestLayout};

use super::{AnswerRequest, BackendError, BiasProfile, ModelAnswer, SelectorBackend};

/// Weight for index `i`, repeating the final element beyond the vector's
/// length so short vectors (like `[1.0]`) cover any `k`.
fn bias_at(weights: &[f64], i: usize) -> f64 {
    weights
        .get(i)
        .copied()
        .unwrap_or_else(|| *weights.last().expect("validated profile is non-empty"))
}

/// The exact per-symbol mixture for one layout, in presentation order.
/// Sums to 1 within 1e-12.
fn mixture(item: &McqItem, layout: &RequestLayout, profile: &BiasProfile) -> Vec<f64> {
    let k = layout.k();
    let mut q: Vec<f64> = (0..k)
        .map(|j| {
            let slot = layout.slots[j];
            bias_at(&profile.token_bias, slot.symbol.index() - 1)
                * bias_at(&profile.position_bias, j)
        })
        .collect();
    let total: f64 = q.iter().sum();
    if total > 0.0 {
        for w in q.iter_mut() {
            *w /= total;
        }
    } else {
        // Token and position weights can be individually valid yet zero out
        // every product; fall back to a uniform bias term.
        q = vec![1.0 / k as f64; k];
    }
    (0..k)
        .map(|j| {
            let knows = layout.slots[j].content_index == item.gold_index;
            profile.theta * (knows as u8 as f64) + (1.0 - profile.theta) * q[j]
        })
        .collect()
}

/// Per-call RNG, derived so that each (item, direction, setting) triple
/// gets an independent, reproducible stream.
fn derive_rng(seed: u64, item: &McqItem, layout: &RequestLayout) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((item.id.len() as u64).to_le_bytes());
    hasher.update(item.id.as_bytes());
    hasher.update(layout.direction.as_str().as_bytes());
    hasher.update(layout.setting.as_str().as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Simulates one reply. Deterministic: equal inputs give equal outputs.
///
/// The reply text is `[[X]]` for the chosen symbol, and the attached
/// probabilities are the exact mixture. By default the chosen symbol is the
/// mixture argmax (ties to the lowest symbol); with `profile.sample` it is
/// Gumbel-max sampled from the mixture instead, which models decode noise
/// while keeping the gray-box probabilities exact.
pub fn simulate_answer(
    item: &McqItem,
    layout: &RequestLayout,
    profile: &BiasProfile,
    run_seed: u64,
) -> ModelAnswer {
    let k = layout.k();
    let p = mixture(item, layout, profile);
    let probabilities = SymbolProbabilities::new(
        (0..k).map(|j| (layout.slots[j].symbol, p[j])),
    );

    let chosen = if profile.sample {
        let seed = profile.seed.unwrap_or(run_seed);
        let mut rng = derive_rng(seed, item, layout);
        let mut best = 0usize;
        let mut best_key = f64::NEG_INFINITY;
        for (j, pj) in p.iter().enumerate() {
            let u = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            let key = if *pj > 0.0 {
                pj.ln() - (-u.ln()).ln()
            } else {
                f64::NEG_INFINITY
            };
            if key > best_key {
                best = j;
                best_key = key;
            }
        }
        layout.slots[best].symbol
    } else {
        probabilities.argmax(k)
    };

    ModelAnswer {
        raw_text: format!("[[{}]]", chosen.letter()),
        parsed: Some(chosen),
        probabilities: Some(probabilities),
    }
}

/// [`SelectorBackend`] wrapper around [`simulate_answer`].
pub struct SimBackend {
    profile: BiasProfile,
    run_seed: u64,
    model: String,
}

impl SimBackend {
    pub fn new(profile: BiasProfile, run_seed: u64) -> Result<Self, BackendError> {
        profile.validate()?;
        Ok(SimBackend {
            profile,
            run_seed,
            model: "sim".to_string(),
        })
    }

    pub fn profile(&self) -> &BiasProfile {
        &self.profile
    }
}

impl SelectorBackend for SimBackend {
    fn answer(&self, request: &AnswerRequest<'_>) -> Result<ModelAnswer, BackendError> {
        Ok(simulate_answer(
            request.item,
            request.layout,
            &self.profile,
            self.run_seed,
        ))
    }

    fn gray_box(&self) -> bool {
        true
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcq::{build_request_pair, decode_answer, OptionSymbol, SensitivitySetting};

    fn item(id: &str, k: usize, gold: usize) -> McqItem {
        McqItem {
            id: id.to_string(),
            question: "which?".to_string(),
            contents: (1..=k).map(|i| format!("choice {i}")).collect(),
            gold_index: gold,
            subtask: None,
        }
    }

    fn profile(theta: f64, token: &[f64], position: &[f64]) -> BiasProfile {
        BiasProfile {
            theta,
            token_bias: token.to_vec(),
            position_bias: position.to_vec(),
            seed: None,
            sample: false,
        }
    }

    fn decoded(item: &McqItem, layout: &RequestLayout, profile: &BiasProfile) -> usize {
        let answer = simulate_answer(item, layout, profile, 42);
        decode_answer(layout, answer.parsed.unwrap()).unwrap()
    }

    #[test]
    fn theta_one_always_decodes_to_gold() {
        let p = BiasProfile::neutral();
        for setting in SensitivitySetting::ALL {
            for gold in 1..=4 {
                let it = item(&format!("g{gold}"), 4, gold);
                let (fwd, bwd) = build_request_pair(&it, setting).unwrap();
                assert_eq!(decoded(&it, &fwd, &p), gold, "{setting} forward");
                assert_eq!(decoded(&it, &bwd, &p), gold, "{setting} backward");
            }
        }
    }

    #[test]
    fn pure_token_bias_fixates_on_the_symbol() {
        // theta = 0, all weight on token A: the reply is always symbol A,
        // which decodes to content 1 forward but content 4 under the token
        // reversal — every pair disagrees.
        let p = profile(0.0, &[1.0, 0.0, 0.0, 0.0], &[1.0]);
        let it = item("t", 4, 2);
        let (fwd, bwd) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        let fa = simulate_answer(&it, &fwd, &p, 42);
        let ba = simulate_answer(&it, &bwd, &p, 42);
        assert_eq!(fa.parsed.unwrap().letter(), 'A');
        assert_eq!(ba.parsed.unwrap().letter(), 'A');
        assert_eq!(decode_answer(&fwd, fa.parsed.unwrap()).unwrap(), 1);
        assert_eq!(decode_answer(&bwd, ba.parsed.unwrap()).unwrap(), 4);
    }

    #[test]
    fn pure_position_bias_fixates_on_the_first_slot() {
        // theta = 0, all weight on the first presented position. Under the
        // token reversal the first slot still holds content 1 (relabelled
        // D), so the pair agrees; under the order reversal it holds content
        // 4, so the pair flips.
        let p = profile(0.0, &[1.0], &[1.0, 0.0, 0.0, 0.0]);
        let it = item("p", 4, 2);

        let (fwd, bwd) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        assert_eq!(decoded(&it, &fwd, &p), 1);
        let ba = simulate_answer(&it, &bwd, &p, 42);
        assert_eq!(ba.parsed.unwrap().letter(), 'D');
        assert_eq!(decode_answer(&bwd, ba.parsed.unwrap()).unwrap(), 1);

        let (_, bwd_order) = build_request_pair(&it, SensitivitySetting::Order).unwrap();
        assert_eq!(decoded(&it, &bwd_order, &p), 4);
    }

    #[test]
    fn mixture_matches_hand_computation() {
        // theta 0.6, token bias [.7,.1,.1,.1], uniform positions, gold 2:
        // q = [.7,.1,.1,.1], p = [.28, .64, .04, .04].
        let p = profile(0.6, &[0.7, 0.1, 0.1, 0.1], &[1.0]);
        let it = item("m", 4, 2);
        let (fwd, bwd) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        let answer = simulate_answer(&it, &fwd, &p, 42);
        let probs = answer.probabilities.unwrap();
        let sym = |c| OptionSymbol::from_letter(c).unwrap();
        assert!((probs.get(sym('A')) - 0.28).abs() < 1e-12);
        assert!((probs.get(sym('B')) - 0.64).abs() < 1e-12);
        assert!((probs.get(sym('C')) - 0.04).abs() < 1e-12);
        assert!((probs.get(sym('D')) - 0.04).abs() < 1e-12);
        assert_eq!(answer.parsed.unwrap(), sym('B'));

        // Backward: gold content 2 is labelled C there, so the knowledge
        // mass moves; token bias keeps following the letters.
        let back = simulate_answer(&it, &bwd, &p, 42);
        let probs = back.probabilities.unwrap();
        assert!((probs.get(sym('C')) - 0.64).abs() < 1e-12);
        assert!((probs.get(sym('A')) - 0.28).abs() < 1e-12);
    }

    #[test]
    fn mixture_sums_to_one() {
        let profiles = [
            profile(0.3, &[0.7, 0.1], &[2.0, 1.0, 0.5]),
            profile(0.0, &[5.0], &[1.0, 0.0]),
            profile(1.0, &[0.1, 0.9], &[1.0]),
        ];
        for p in &profiles {
            for setting in SensitivitySetting::ALL {
                let it = item("s", 5, 3);
                let (fwd, bwd) = build_request_pair(&it, setting).unwrap();
                for layout in [&fwd, &bwd] {
                    let total: f64 = mixture(&it, layout, p).iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn short_bias_vectors_repeat_their_last_element() {
        // [1.0] expands to uniform; [0.7, 0.1] expands to [.7,.1,.1,.1].
        let p = profile(0.0, &[0.7, 0.1], &[1.0]);
        let it = item("pad", 4, 1);
        let (fwd, _) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        let probs = simulate_answer(&it, &fwd, &p, 42).probabilities.unwrap();
        let sym = |c| OptionSymbol::from_letter(c).unwrap();
        assert!((probs.get(sym('A')) - 0.7).abs() < 1e-12);
        for c in ['B', 'C', 'D'] {
            assert!((probs.get(sym(c)) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_products_fall_back_to_uniform() {
        // Each vector has a positive weight, but every product is zero.
        let p = profile(0.0, &[1.0, 0.0], &[0.0, 1.0]);
        let it = item("z", 2, 1);
        let (fwd, _) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        let answer = simulate_answer(&it, &fwd, &p, 42);
        let probs = answer.probabilities.clone().unwrap();
        let sym = |c| OptionSymbol::from_letter(c).unwrap();
        assert!((probs.get(sym('A')) - 0.5).abs() < 1e-12);
        assert!((probs.get(sym('B')) - 0.5).abs() < 1e-12);
        // Tie: the lowest symbol wins.
        assert_eq!(answer.parsed.unwrap(), sym('A'));
    }

    #[test]
    fn deterministic_across_calls_and_seed_sensitive_when_sampling() {
        let mut p = profile(0.5, &[0.7, 0.1, 0.1, 0.1], &[1.0]);
        p.sample = true;
        let it = item("d", 4, 2);
        let (fwd, _) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
        let a = simulate_answer(&it, &fwd, &p, 42);
        let b = simulate_answer(&it, &fwd, &p, 42);
        assert_eq!(a, b);

        // Across many items, two different run seeds give different draws.
        let mut differs = false;
        for i in 0..50 {
            let it = item(&format!("d{i}"), 4, 2);
            let x = simulate_answer(&it, &fwd, &p, 1);
            let y = simulate_answer(&it, &fwd, &p, 2);
            if x.parsed != y.parsed {
                differs = true;
                break;
            }
        }
        assert!(differs);
    }

    #[test]
    fn raw_text_is_the_bracketed_symbol() {
        let it = item("r", 4, 3);
        let (fwd, _) = build_request_pair(&it, SensitivitySetting::Both).unwrap();
        let answer = simulate_answer(&it, &fwd, &BiasProfile::neutral(), 42);
        assert_eq!(answer.raw_text, "[[C]]");
    }

    #[test]
    fn sampled_frequencies_track_the_mixture() {
        let mut p = profile(0.0, &[0.7, 0.1, 0.1, 0.1], &[1.0]);
        p.sample = true;
        let n = 4000;
        let mut a_count = 0usize;
        for i in 0..n {
            let it = item(&format!("f{i}"), 4, 1 + i % 4);
            let (fwd, _) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
            let answer = simulate_answer(&it, &fwd, &p, 42);
            if answer.parsed.unwrap().letter() == 'A' {
                a_count += 1;
            }
        }
        let share = a_count as f64 / n as f64;
        // Expected 0.70; 3 standard errors is about 0.022.
        assert!((share - 0.7).abs() < 0.03, "share = {share}");
    }

    #[test]
    fn sampled_uniform_proportions_converge_to_uniform() {
        let mut p = profile(0.0, &[1.0], &[1.0]);
        p.sample = true;
        let n = 10_000;
        let mut counts = [0usize; 4];
        for i in 0..n {
            let it = item(&format!("u{i}"), 4, 1);
            let (fwd, _) = build_request_pair(&it, SensitivitySetting::Token).unwrap();
            let answer = simulate_answer(&it, &fwd, &p, 42);
            counts[answer.parsed.unwrap().index() - 1] += 1;
        }
        // 3 standard errors around 0.25 at N = 10,000 is about 0.013.
        for c in counts {
            let share = c as f64 / n as f64;
            assert!((share - 0.25).abs() < 0.013, "share = {share}");
        }
    }

    #[test]
    fn backend_wrapper_rejects_invalid_profiles() {
        let mut p = BiasProfile::neutral();
        p.theta = -0.2;
        assert!(SimBackend::new(p, 42).is_err());
    }
}
