//! Live chat-completion client.
//!
//! One blocking POST per request to `{base_url}/chat/completions` at
//! temperature 0, asking for the top-5 token log-probabilities. Transient
//! failures (connect errors, 429, 5xx) are retried with capped exponential
//! backoff; an unparseable reply is retried once with the identical prompt.
//! An internal semaphore bounds in-flight requests regardless of how many
//! worker threads share the client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::debias::SymbolProbabilities;
use crate::mcq::OptionSymbol;
use crate::prompting::{parse_choice, PromptText};

use super::{AnswerRequest, BackendError, ModelAnswer, SelectorBackend};

/// Environment variable consulted for the API key when none is configured.
pub const API_KEY_ENV: &str = "SELECTOR_PROBE_API_KEY";

pub const DEFAULT_MAX_ATTEMPTS: u32 = 4;
pub const DEFAULT_MAX_TOKENS: u32 = 64;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

const BACKOFF_BASE: Duration = Duration::from_millis(250);
const BACKOFF_CAP: Duration = Duration::from_millis(4000);

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub model: String,
    /// Endpoint root; `/chat/completions` is appended.
    pub base_url: String,
    /// Explicit API key; falls back to [`API_KEY_ENV`].
    pub api_key: Option<String>,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub max_tokens: u32,
    /// In-flight request bound across all threads sharing this client.
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(model: impl Into<String>, base_url: impl Into<String>) -> Self {
        HttpConfig {
            model: model.into(),
            base_url: base_url.into(),
            api_key: None,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_tokens: DEFAULT_MAX_TOKENS,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout: Duration::from_secs(30),
        }
    }
}

/// Backoff before retry number `attempt` (1-based): 250 ms doubling per
/// attempt, capped at 4 s.
fn backoff_delay(attempt: u32) -> Duration {
    let factor = 1u32 << (attempt - 1).min(6);
    BACKOFF_CAP.min(BACKOFF_BASE * factor)
}

// Wire format, pinned by fixtures/http/chat_request.json.
#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatRequestMessage<'a>; 1],
    temperature: f64,
    logprobs: bool,
    top_logprobs: u32,
    max_tokens: u32,
}

#[derive(Debug, Serialize)]
struct ChatRequestMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    token: String,
    #[serde(default)]
    top_logprobs: Option<Vec<TopLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

/// A token stripped down to the single option letter it represents, if any.
fn normalize_token(token: &str) -> Option<char> {
    let trimmed = token.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// Per-symbol probabilities from the top-logprob list attached to the
/// reply's answer token: the list entry whose token is the parsed letter.
/// Log-probabilities map to probabilities by exponentiation; duplicate
/// tokens for one symbol keep the larger value. Returns `None` when the
/// endpoint sent no usable logprobs.
fn probabilities_from_logprobs(
    response: &ChatResponse,
    parsed: OptionSymbol,
    k: usize,
) -> Option<SymbolProbabilities> {
    let tokens = response
        .choices
        .first()?
        .logprobs
        .as_ref()?
        .content
        .as_ref()?;
    // The verdict is the last [[X]] tag, so scan for the last matching token.
    let answer_token = tokens
        .iter()
        .rev()
        .find(|t| normalize_token(&t.token) == Some(parsed.letter()))?;
    let mut map = std::collections::BTreeMap::new();
    for top in answer_token.top_logprobs.as_deref().unwrap_or(&[]) {
        let Some(letter) = normalize_token(&top.token) else {
            continue;
        };
        let Some(symbol) = OptionSymbol::from_letter(letter) else {
            continue;
        };
        if symbol.index() > k {
            continue;
        }
        let p = top.logprob.exp();
        let entry = map.entry(symbol).or_insert(p);
        if p > *entry {
            *entry = p;
        }
    }
    if map.is_empty() {
        return None;
    }
    let probs = SymbolProbabilities::new(map);
    if probs.argmax(k) != parsed {
        // Keep the answer black-box rather than publish probabilities that
        // contradict the parsed choice.
        log::warn!(
            "top-logprob argmax disagrees with parsed symbol {}; dropping probabilities",
            parsed
        );
        return None;
    }
    Some(probs)
}

enum SendFailure {
    Auth(u16),
    RateLimited,
    Retryable(String),
    Fatal(String),
}

/// Counting semaphore (permits + condvar); `acquire` blocks until a permit
/// frees up and the guard returns it on drop.
struct Limiter {
    permits: Mutex<usize>,
    available: Condvar,
}

struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    fn new(permits: usize) -> Self {
        Limiter {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.available.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.permits.lock().unwrap() += 1;
        self.limiter.available.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    limiter: Limiter,
    requests_sent: AtomicU64,
}

impl HttpBackend {
    /// Builds the client; fails fast when no API key is configured and the
    /// environment variable is unset.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let api_key = match &config.api_key {
            Some(key) => key.clone(),
            None => std::env::var(API_KEY_ENV)
                .map_err(|_| BackendError::MissingApiKey { var: API_KEY_ENV })?,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|err| BackendError::Transport {
                attempts: 0,
                message: format!("building HTTP client: {err}"),
            })?;
        Ok(HttpBackend {
            limiter: Limiter::new(config.max_in_flight),
            api_key,
            client,
            requests_sent: AtomicU64::new(0),
            config,
        })
    }

    /// Total HTTP requests actually sent, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests_sent.load(Ordering::Relaxed)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body<'a>(&'a self, prompt: &'a str) -> ChatRequest<'a> {
        ChatRequest {
            model: &self.config.model,
            messages: [ChatRequestMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
            logprobs: true,
            top_logprobs: 5,
            max_tokens: self.config.max_tokens,
        }
    }

    fn send_once(&self, prompt: &str) -> Result<ChatResponse, SendFailure> {
        self.requests_sent.fetch_add(1, Ordering::Relaxed);
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(&self.request_body(prompt))
            .send()
            .map_err(|err| SendFailure::Retryable(err.to_string()))?;
        let status = response.status();
        match status.as_u16() {
            200 => response
                .json::<ChatResponse>()
                .map_err(|err| SendFailure::Retryable(format!("malformed response body: {err}")))
                .and_then(|parsed| {
                    if parsed.choices.is_empty() {
                        Err(SendFailure::Retryable("response carried no choices".into()))
                    } else {
                        Ok(parsed)
                    }
                }),
            401 | 403 => Err(SendFailure::Auth(status.as_u16())),
            429 => Err(SendFailure::RateLimited),
            500..=599 => Err(SendFailure::Retryable(format!("server error {status}"))),
            _ => Err(SendFailure::Fatal(format!("unexpected status {status}"))),
        }
    }

    fn send_with_retries(&self, prompt: &str) -> Result<ChatResponse, BackendError> {
        let max = self.config.max_attempts.max(1);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.send_once(prompt) {
                Ok(response) => return Ok(response),
                Err(SendFailure::Auth(status)) => return Err(BackendError::Auth { status }),
                Err(SendFailure::Fatal(message)) => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(SendFailure::RateLimited) => {
                    if attempt >= max {
                        return Err(BackendError::RateLimited { attempts: attempt });
                    }
                    log::debug!("rate limited, attempt {attempt}/{max}; backing off");
                    std::thread::sleep(backoff_delay(attempt));
                }
                Err(SendFailure::Retryable(message)) => {
                    if attempt >= max {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::debug!("transient failure ({message}), attempt {attempt}/{max}");
                    std::thread::sleep(backoff_delay(attempt));
                }
            }
        }
    }

    /// One round trip: send (with transport retries), then parse the reply.
    /// `Ok(Err(raw))` is a transport success whose text had no valid verdict.
    fn request_and_parse(
        &self,
        prompt: &str,
        k: usize,
    ) -> Result<Result<ModelAnswer, String>, BackendError> {
        let response = self.send_with_retries(prompt)?;
        let text = response.choices[0].message.content.clone();
        match parse_choice(&text, k) {
            Ok(symbol) => {
                let probabilities = probabilities_from_logprobs(&response, symbol, k);
                Ok(Ok(ModelAnswer {
                    raw_text: text,
                    parsed: Some(symbol),
                    probabilities,
                }))
            }
            Err(failure) => Ok(Err(failure.raw)),
        }
    }

    /// Sends the prompt and decodes the reply; retries an unparseable reply
    /// once with the identical prompt before giving up.
    pub fn complete(&self, prompt: &PromptText, k: usize) -> Result<ModelAnswer, BackendError> {
        let _permit = self.limiter.acquire();
        match self.request_and_parse(prompt.as_str(), k)? {
            Ok(answer) => Ok(answer),
            Err(first_raw) => {
                log::warn!("unparseable reply ({first_raw:?}); retrying once");
                match self.request_and_parse(prompt.as_str(), k)? {
                    Ok(answer) => Ok(answer),
                    Err(raw) => Err(BackendError::Parse(crate::prompting::ParseFailure { raw })),
                }
            }
        }
    }
}

impl SelectorBackend for HttpBackend {
    fn answer(&self, request: &AnswerRequest<'_>) -> Result<ModelAnswer, BackendError> {
        self.complete(request.prompt, request.layout.k())
    }

    fn gray_box(&self) -> bool {
        true
    }

    fn model_name(&self) -> &str {
        &self.config.model
    }

    fn cache_params(&self) -> Option<String> {
        Some(format!(
            "temperature=0;logprobs=true;top_logprobs=5;max_tokens={}",
            self.config.max_tokens
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let millis: Vec<u64> = (1..=6).map(|a| backoff_delay(a).as_millis() as u64).collect();
        assert_eq!(millis, vec![250, 500, 1000, 2000, 4000, 4000]);
    }

    #[test]
    fn request_body_matches_pinned_fixture() {
        let config = HttpConfig {
            api_key: Some("k".into()),
            ..HttpConfig::new("probe-model", "http://example.invalid")
        };
        let backend = HttpBackend::new(config).unwrap();
        let got = serde_json::to_value(backend.request_body("PROMPT")).unwrap();
        let fixture: serde_json::Value = serde_json::from_str(include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/http/chat_request.json"
        )))
        .unwrap();
        assert_eq!(got, fixture);
    }

    #[test]
    fn logprobs_map_to_probabilities_by_exponentiation() {
        let response: ChatResponse = serde_json::from_str(include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/http/chat_response.json"
        )))
        .unwrap();
        let text = &response.choices[0].message.content;
        let parsed = parse_choice(text, 4).unwrap();
        assert_eq!(parsed.letter(), 'B');
        let probs = probabilities_from_logprobs(&response, parsed, 4).unwrap();
        let sym = |c| OptionSymbol::from_letter(c).unwrap();
        assert!((probs.get(sym('A')) - 0.100).abs() < 5e-4);
        assert!((probs.get(sym('B')) - 0.900).abs() < 5e-4);
        assert!((probs.get(sym('C')) - 0.0498).abs() < 5e-5);
        assert!((probs.get(sym('D')) - 0.0498).abs() < 5e-5);
        assert_eq!(probs.argmax(4), sym('B'));
    }

    #[test]
    fn out_of_range_top_tokens_are_ignored() {
        let response: ChatResponse = serde_json::from_str(include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/fixtures/http/chat_response.json"
        )))
        .unwrap();
        let parsed = OptionSymbol::from_letter('B').unwrap();
        // With k = 2 only A and B qualify.
        let probs = probabilities_from_logprobs(&response, parsed, 2).unwrap();
        let sym = |c| OptionSymbol::from_letter(c).unwrap();
        assert!(probs.get(sym('B')) > 0.89);
        // C was never inserted, so it reads as the floor.
        assert!(probs.get(sym('C')) < 1e-9);
    }

    #[test]
    fn token_normalization_strips_punctuation() {
        assert_eq!(normalize_token("B"), Some('B'));
        assert_eq!(normalize_token(" b"), Some('B'));
        assert_eq!(normalize_token("[[C"), Some('C'));
        assert_eq!(normalize_token("D]]"), Some('D'));
        assert_eq!(normalize_token("(a)"), Some('A'));
        assert_eq!(normalize_token("AB"), None);
        assert_eq!(normalize_token("[["), None);
        assert_eq!(normalize_token("1"), None);
        assert_eq!(normalize_token(""), None);
    }

    #[test]
    fn explicit_api_key_wins_and_missing_key_is_an_error() {
        // This test owns the env var; no other test touches it.
        std::env::remove_var(API_KEY_ENV);
        let config = HttpConfig::new("m", "http://example.invalid");
        match HttpBackend::new(config.clone()) {
            Err(BackendError::MissingApiKey { var }) => assert_eq!(var, API_KEY_ENV),
            Err(other) => panic!("expected MissingApiKey, got {other:?}"),
            Ok(_) => panic!("expected MissingApiKey, got a backend"),
        }
        let with_key = HttpConfig {
            api_key: Some("sk-test".into()),
            ..config.clone()
        };
        assert!(HttpBackend::new(with_key).is_ok());
        std::env::set_var(API_KEY_ENV, "sk-env");
        assert!(HttpBackend::new(config).is_ok());
        std::env::remove_var(API_KEY_ENV);
    }

    #[test]
    fn limiter_bounds_concurrent_holders() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;

        let limiter = Arc::new(Limiter::new(2));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let limiter = Arc::clone(&limiter);
            let current = Arc::clone(&current);
            let peak = Arc::clone(&peak);
            handles.push(std::thread::spawn(move || {
                let _permit = limiter.acquire();
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                current.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for handle in handles {
            handle.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
