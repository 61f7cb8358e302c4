//! Append-only answer cache for live-backend runs.
//!
//! Each line of the cache file is one JSON record carrying the request key,
//! model, prompt digest, the full answer, and a checksum over the rest of
//! the record. The checksum lets a re-analysis detect tampered or truncated
//! lines: such lines are counted, logged, and treated as misses, so the run
//! proceeds by re-querying.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelAnswer;

/// The checksummed portion of a cache line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheBody {
    key: String,
    model: String,
    prompt_sha256: String,
    answer: ModelAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    #[serde(flatten)]
    body: CacheBody,
    checksum: String,
}

fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

impl CacheRecord {
    fn new(body: CacheBody) -> Self {
        let serialized = serde_json::to_string(&body).expect("cache body serializes");
        CacheRecord {
            checksum: hex_sha256(serialized.as_bytes()),
            body,
        }
    }

    fn verify(&self) -> bool {
        let serialized = serde_json::to_string(&self.body).expect("cache body serializes");
        self.checksum == hex_sha256(serialized.as_bytes())
    }
}

/// Content hash identifying one request: model name, full prompt text, and
/// the decoding-parameter string. Parts are length-prefixed so no two
/// distinct triples collide by concatenation.
pub fn request_key(model: &str, prompt: &str, params: &str) -> String {
    let mut hasher = Sha256::new();
    for part in [model, prompt, params] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let mut out = String::with_capacity(64);
    for b in hasher.finalize() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// JSON-lines answer cache: concurrent lookups, serialized appends.
pub struct AnswerCache {
    path: PathBuf,
    index: RwLock<HashMap<String, ModelAnswer>>,
    file: Mutex<File>,
    corrupt: AtomicU64,
}

impl AnswerCache {
    /// Opens (or creates) the cache file and indexes every intact record.
    /// Later records win on duplicate keys, matching append order.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut index = HashMap::new();
        let mut corrupt = 0u64;
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (line_no, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(record) if record.verify() => {
                        index.insert(record.body.key, record.body.answer);
                    }
                    Ok(_) => {
                        log::warn!(
                            "cache {}: checksum mismatch on line {}, ignoring entry",
                            path.display(),
                            line_no + 1
                        );
                        corrupt += 1;
                    }
                    Err(err) => {
                        log::warn!(
                            "cache {}: unreadable line {} ({err}), ignoring entry",
                            path.display(),
                            line_no + 1
                        );
                        corrupt += 1;
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AnswerCache {
            path: path.to_path_buf(),
            index: RwLock::new(index),
            file: Mutex::new(file),
            corrupt: AtomicU64::new(corrupt),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lookup(&self, key: &str) -> Option<ModelAnswer> {
        self.index.read().unwrap().get(key).cloned()
    }

    /// Appends one record and indexes it.
    pub fn store(
        &self,
        key: &str,
        model: &str,
        prompt: &str,
        answer: &ModelAnswer,
    ) -> io::Result<()> {
        let record = CacheRecord::new(CacheBody {
            key: key.to_string(),
            model: model.to_string(),
            prompt_sha256: hex_sha256(prompt.as_bytes()),
            answer: answer.clone(),
        });
        let line = serde_json::to_string(&record).expect("cache record serializes");
        {
            let mut file = self.file.lock().unwrap();
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.index
            .write()
            .unwrap()
            .insert(key.to_string(), answer.clone());
        Ok(())
    }

    /// Number of indexed answers.
    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lines skipped at open time because they were unreadable or failed
    /// their checksum.
    pub fn corrupt_entries(&self) -> u64 {
        self.corrupt.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcq::OptionSymbol;

    fn answer(letter: char) -> ModelAnswer {
        ModelAnswer {
            raw_text: format!("[[{letter}]]"),
            parsed: OptionSymbol::from_letter(letter),
            probabilities: None,
        }
    }

    #[test]
    fn store_then_lookup_returns_the_same_answer() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnswerCache::open(&dir.path().join("c.jsonl")).unwrap();
        let key = request_key("gpt-x", "prompt text", "t=0");
        cache.store(&key, "gpt-x", "prompt text", &answer('B')).unwrap();
        assert_eq!(cache.lookup(&key), Some(answer('B')));
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn different_prompt_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = AnswerCache::open(&dir.path().join("c.jsonl")).unwrap();
        let key = request_key("gpt-x", "prompt one", "t=0");
        cache.store(&key, "gpt-x", "prompt one", &answer('A')).unwrap();
        assert_eq!(cache.lookup(&request_key("gpt-x", "prompt two", "t=0")), None);
    }

    #[test]
    fn keys_separate_model_prompt_and_params() {
        let base = request_key("m", "p", "x");
        assert_ne!(request_key("m2", "p", "x"), base);
        assert_ne!(request_key("m", "p2", "x"), base);
        assert_ne!(request_key("m", "p", "x2"), base);
        // Length prefixes keep shifted boundaries distinct.
        assert_ne!(request_key("mp", "", "x"), request_key("m", "p", "x"));
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let key = request_key("m", "p", "x");
        {
            let cache = AnswerCache::open(&path).unwrap();
            cache.store(&key, "m", "p", &answer('C')).unwrap();
        }
        let cache = AnswerCache::open(&path).unwrap();
        assert_eq!(cache.lookup(&key), Some(answer('C')));
        assert_eq!(cache.corrupt_entries(), 0);
    }

    #[test]
    fn duplicate_keys_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let key = request_key("m", "p", "x");
        {
            let cache = AnswerCache::open(&path).unwrap();
            cache.store(&key, "m", "p", &answer('A')).unwrap();
            cache.store(&key, "m", "p", &answer('D')).unwrap();
        }
        let cache = AnswerCache::open(&path).unwrap();
        assert_eq!(cache.lookup(&key), Some(answer('D')));
    }

    #[test]
    fn tampered_line_is_detected_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let key = request_key("m", "p", "x");
        {
            let cache = AnswerCache::open(&path).unwrap();
            cache.store(&key, "m", "p", &answer('B')).unwrap();
        }
        // Flip the recorded answer from B to C without updating the checksum.
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("[[B]]"));
        std::fs::write(&path, text.replace("[[B]]", "[[C]]")).unwrap();

        let cache = AnswerCache::open(&path).unwrap();
        assert_eq!(cache.lookup(&key), None);
        assert_eq!(cache.corrupt_entries(), 1);
        // The run proceeds by re-querying and re-storing.
        cache.store(&key, "m", "p", &answer('B')).unwrap();
        assert_eq!(cache.lookup(&key), Some(answer('B')));
    }

    #[test]
    fn unreadable_line_counts_as_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "this is not json\n").unwrap();
        let cache = AnswerCache::open(&path).unwrap();
        assert!(cache.is_empty());
        assert_eq!(cache.corrupt_entries(), 1);
    }

    #[test]
    fn gray_box_answers_round_trip_through_the_cache() {
        use crate::debias::SymbolProbabilities;
        let dir = tempfile::tempdir().unwrap();
        let cache = AnswerCache::open(&dir.path().join("c.jsonl")).unwrap();
        let probs = SymbolProbabilities::new([
            (OptionSymbol::from_letter('A').unwrap(), 0.1),
            (OptionSymbol::from_letter('B').unwrap(), 0.9),
        ]);
        let full = ModelAnswer {
            raw_text: "The answer is [[B]].".to_string(),
            parsed: OptionSymbol::from_letter('B'),
            probabilities: Some(probs),
        };
        let key = request_key("m", "p", "x");
        cache.store(&key, "m", "p", &full).unwrap();
        drop(cache);
        let reopened = AnswerCache::open(&dir.path().join("c.jsonl")).unwrap();
        assert_eq!(reopened.lookup(&key), Some(full));
    }
}
