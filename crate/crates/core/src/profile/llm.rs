//! Profile generation: LLM clients, the profile cache and resumable batch
//! generation with bounded parallelism.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use log::{info, warn};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::prompt_hash;
use super::{ProfileError, UserProfile};
use crate::digest::seed_from_text;

#[derive(Debug, Clone, Error)]
pub enum ClientError {
    /// Network failure, timeout, rate limit or server error.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Transport(_))
    }

    pub(crate) fn from_ureq(e: ureq::Error) -> Self {
        match e {
            ureq::Error::StatusCode(s) if s == 429 || s >= 500 => {
                Self::Transport(format!("status {s}"))
            }
            ureq::Error::StatusCode(s) => Self::Rejected {
                status: s,
                message: "endpoint refused the request".into(),
            },
            ureq::Error::Json(e) => Self::Malformed(e.to_string()),
            other => Self::Transport(other.to_string()),
        }
    }
}

/// Text-in, text-out generator.
pub trait LlmClient: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<String, ClientError>;
}

/// Deterministic stand-in: a five-section profile whose wording is drawn
/// from a generator seeded by the prompt digest.
#[derive(Debug, Default)]
pub struct MockLlm {
    calls: AtomicUsize,
}

impl MockLlm {
    pub const ID: &'static str = "mock-llm";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

const TRAITS: &[&str] = &[
    "adventurous",
    "nostalgic",
    "price-conscious",
    "quality-focused",
    "curious",
    "loyal",
    "trend-following",
    "selective",
    "eclectic",
    "practical",
    "sentimental",
    "detail-oriented",
];
const THEMES: &[&str] = &[
    "drama",
    "comedy",
    "documentaries",
    "skincare",
    "fragrances",
    "thrillers",
    "family titles",
    "classics",
    "new releases",
    "niche brands",
    "bestsellers",
    "animation",
];

impl LlmClient for MockLlm {
    fn id(&self) -> &str {
        Self::ID
    }

    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_text(prompt));
        let mut pick = |xs: &[&'static str]| *xs.choose(&mut rng).expect("non-empty list");
        let tag = &prompt_hash(prompt)[..12];
        Ok(format!(
            "1. History: mostly {} with some {}.\n\
             2. Evolution: recently shifting toward {}.\n\
             3. Likes: {} and {}.\n\
             4. Dislikes: {}.\n\
             5. Summary: a {} and {} user (profile {tag}).",
            pick(THEMES),
            pick(THEMES),
            pick(THEMES),
            pick(THEMES),
            pick(THEMES),
            pick(THEMES),
            pick(TRAITS),
            pick(TRAITS),
        ))
    }
}

/// OpenAI-compatible chat-completion endpoint.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_tokens: u32,
}

impl HttpChatClient {
    pub const DEFAULT_MODEL: &'static str = "gemma-2-9b-it";

    /// `api_key_env` names the environment variable holding the bearer
    /// token; the token itself never appears in configuration.
    pub fn new(endpoint: &str, model: &str, api_key_env: Option<&str>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: api_key_env.and_then(|v| std::env::var(v).ok()),
            max_tokens: 1024,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl LlmClient for HttpChatClient {
    fn id(&self) -> &str {
        &self.model
    }

    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
            "max_tokens": self.max_tokens,
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: ChatResponse = req
            .send_json(&body)
            .map_err(ClientError::from_ureq)?
            .body_mut()
            .read_json()
            .map_err(ClientError::from_ureq)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ClientError::Malformed("no choices in response".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff_ms: 0,
            max_backoff_ms: 0,
        }
    }

    /// Runs `f` until success, a non-retryable error or the attempt limit,
    /// doubling the pause between attempts.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut wait = self.initial_backoff_ms;
        let mut attempt = 1;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts.max(1) => {
                    warn!("attempt {attempt} failed ({e}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    wait = (wait * 2).min(self.max_backoff_ms);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Line-delimited store of generated profiles keyed by user and prompt
/// hash. Writes are serialized and flushed per record, so an interrupted
/// run keeps everything generated so far.
pub struct ProfileCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<(String, String), UserProfile>>,
    writer: Mutex<Option<File>>,
}

impl ProfileCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and appends to it afterwards. A torn final
    /// line from an interrupted write is dropped.
    pub fn open(path: &Path) -> Result<Self, ProfileError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(path)?)
                .lines()
                .collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<UserProfile>(line) {
                    Ok(p) => {
                        entries.insert((p.user_id.clone(), p.prompt_hash.clone()), p);
                    }
                    Err(e) if i + 1 == last => warn!("dropping torn last cache line: {e}"),
                    Err(e) => {
                        return Err(ProfileError::Cache {
                            line: i + 1,
                            reason: e.to_string(),
                        })
                    }
                }
            }
            // rewrite so a torn tail does not corrupt later appends
            let mut f = File::create(path)?;
            let mut sorted: Vec<&UserProfile> = entries.values().collect();
            sorted.sort_by(|a, b| (&a.user_id, &a.prompt_hash).cmp(&(&b.user_id, &b.prompt_hash)));
            for p in sorted {
                writeln!(f, "{}", serde_json::to_string(p).expect("serializable"))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, user_id: &str, prompt_hash: &str) -> Option<UserProfile> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(user_id.to_string(), prompt_hash.to_string()))
            .cloned()
    }

    pub fn insert(&self, profile: UserProfile) -> Result<(), ProfileError> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(f) = self.writer.lock().expect("writer lock").as_mut() {
            writeln!(
                f,
                "{}",
                serde_json::to_string(&profile).expect("serializable")
            )?;
            f.flush()?;
        }
        entries.insert(
            (profile.user_id.clone(), profile.prompt_hash.clone()),
            profile,
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProfileRequest {
    pub user_id: String,
    pub prompt: String,
}

#[derive(Debug, Default)]
pub struct GenerationReport {
    /// Successful profiles in request order.
    pub profiles: Vec<UserProfile>,
    /// `(user_id, reason)` of users whose generation failed.
    pub failures: Vec<(String, String)>,
    /// Requests that reached the client (cache misses).
    pub calls: usize,
    pub cache_hits: usize,
}

/// Returns a profile for every request, from the cache when the prompt hash
/// matches and from `client` otherwise. Failures are recorded per user and
/// never abort the batch; a rerun only calls the client for users still
/// missing from the cache.
pub fn generate_profiles(
    requests: &[ProfileRequest],
    client: &dyn LlmClient,
    cache: &ProfileCache,
    parallelism: usize,
    retry: &RetryPolicy,
) -> Result<GenerationReport, ProfileError> {
    let hashes: Vec<String> = requests.iter().map(|r| prompt_hash(&r.prompt)).collect();
    let mut slots: Vec<Option<Result<UserProfile, String>>> = vec![None; requests.len()];
    let mut pending = Vec::new();
    for (i, r) in requests.iter().enumerate() {
        match cache.get(&r.user_id, &hashes[i]) {
            Some(p) => slots[i] = Some(Ok(p)),
            None => pending.push(i),
        }
    }
    let cache_hits = requests.len() - pending.len();
    info!(
        "{} cached profiles, {} to generate",
        cache_hits,
        pending.len()
    );

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<UserProfile, String>)>> = Mutex::new(Vec::new());
    let io_error: Mutex<Option<ProfileError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.max(1).min(pending.len().max(1)) {
            scope.spawn(|| loop {
                let n = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(n) else { break };
                let req = &requests[i];
                let outcome = match retry.run(|| client.generate(&req.prompt)) {
                    Ok(text) if text.trim().is_empty() => Err("empty profile text".to_string()),
                    Ok(text) => {
                        let profile = UserProfile {
                            user_id: req.user_id.clone(),
                            text,
                            prompt_hash: hashes[i].clone(),
                            generator_id: client.id().to_string(),
                        };
                        match cache.insert(profile.clone()) {
                            Ok(()) => Ok(profile),
                            Err(e) => {
                                io_error.lock().expect("error lock").get_or_insert(e);
                                break;
                            }
                        }
                    }
                    Err(e) => Err(e.to_string()),
                };
                if let Err(reason) = &outcome {
                    warn!("profile generation failed for {}: {reason}", req.user_id);
                }
                results.lock().expect("results lock").push((i, outcome));
            });
        }
    });
    if let Some(e) = io_error.into_inner().expect("error lock") {
        return Err(e);
    }
    for (i, r) in results.into_inner().expect("results lock") {
        slots[i] = Some(r);
    }
    let mut report = GenerationReport {
        calls: pending.len(),
        cache_hits,
        ..Default::default()
    };
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.expect("every request resolved") {
            Ok(p) => report.profiles.push(p),
            Err(reason) => report.failures.push((requests[i].user_id.clone(), reason)),
        }
    }
    Ok(report)
}
