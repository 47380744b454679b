use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    fingerprint, prompt_hash, validate_response, Backend, BackendError, Health, InferenceRequest,
    InferenceResponse,
};
use crate::confidence::{FinishReason, ScoredSequence, TokenScore};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MockKey {
    Patch(usize),
    Fingerprint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockFailure {
    Transport,
    Timeout,
    Protocol,
    Refused,
}

impl MockFailure {
    fn to_error(self) -> BackendError {
        match self {
            MockFailure::Transport => BackendError::Transport("scripted transport failure".into()),
            MockFailure::Timeout => BackendError::Timeout,
            MockFailure::Protocol => BackendError::Protocol("scripted protocol failure".into()),
            MockFailure::Refused => BackendError::Refused {
                status: 400,
                detail: "scripted refusal".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Respond(ScoredSequence),
    Fail(MockFailure),
}

impl MockReply {
    /// Non-special tokens from `(text, logprob)` pairs.
    pub fn tokens<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        MockReply::Respond(ScoredSequence::from_pairs(pairs))
    }
}

/// Scripted responses keyed by patch index or pixel fingerprint, optionally
/// narrowed to one prompt. Unmatched requests get the default reply.
#[derive(Debug, Clone)]
pub struct MockScript {
    entries: HashMap<(MockKey, Option<String>), MockReply>,
    default: MockReply,
    uses_fingerprints: bool,
}

impl MockScript {
    pub fn new(default: MockReply) -> Self {
        Self {
            entries: HashMap::new(),
            default,
            uses_fingerprints: false,
        }
    }

    pub fn insert(&mut self, key: MockKey, prompt: Option<&str>, reply: MockReply) {
        self.insert_hashed(key, prompt.map(prompt_hash), reply);
    }

    fn insert_hashed(&mut self, key: MockKey, prompt_hash: Option<String>, reply: MockReply) {
        if matches!(key, MockKey::Fingerprint(_)) {
            self.uses_fingerprints = true;
        }
        self.entries.insert((key, prompt_hash), reply);
    }

    pub fn with_patch(mut self, index: usize, reply: MockReply) -> Self {
        self.insert(MockKey::Patch(index), None, reply);
        self
    }

    pub fn with_fingerprint(mut self, fp: impl Into<String>, reply: MockReply) -> Self {
        self.insert(MockKey::Fingerprint(fp.into()), None, reply);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn default_reply(&self) -> &MockReply {
        &self.default
    }

    /// Most specific match first: fingerprint before patch index, with the
    /// prompt before without it.
    pub fn lookup(&self, fingerprint: Option<&str>, patch_index: Option<usize>, prompt: &str) -> &MockReply {
        let ph = prompt_hash(prompt);
        let mut keys = Vec::with_capacity(4);
        if let Some(fp) = fingerprint {
            keys.push(MockKey::Fingerprint(fp.to_string()));
        }
        if let Some(i) = patch_index {
            keys.push(MockKey::Patch(i));
        }
        for key in keys {
            if let Some(r) = self.entries.get(&(key.clone(), Some(ph.clone()))) {
                return r;
            }
            if let Some(r) = self.entries.get(&(key, None)) {
                return r;
            }
        }
        &self.default
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("cannot read mock script {}: {e}", path.display())))?;
        let file: MockScriptFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?
        };
        file.into_script()
    }

    pub fn to_file(&self) -> MockScriptFile {
        let mut entries: Vec<MockEntrySpec> = self
            .entries
            .iter()
            .map(|((key, ph), reply)| {
                let (patch, fingerprint) = match key {
                    MockKey::Patch(i) => (Some(*i), None),
                    MockKey::Fingerprint(f) => (None, Some(f.clone())),
                };
                let (tokens, finish_reason, fail) = reply_to_spec(reply);
                MockEntrySpec {
                    patch,
                    fingerprint,
                    prompt: None,
                    prompt_hash: ph.clone(),
                    tokens,
                    finish_reason,
                    fail,
                }
            })
            .collect();
        entries.sort_by(|a, b| {
            (a.patch, &a.fingerprint, &a.prompt_hash).cmp(&(b.patch, &b.fingerprint, &b.prompt_hash))
        });
        let (tokens, finish_reason, fail) = reply_to_spec(&self.default);
        MockScriptFile {
            default: MockReplySpec {
                tokens,
                finish_reason,
                fail,
            },
            entries,
        }
    }
}

fn reply_to_spec(reply: &MockReply) -> (Vec<MockTokenSpec>, FinishReason, Option<MockFailure>) {
    match reply {
        MockReply::Respond(seq) => (
            seq.tokens
                .iter()
                .map(|t| MockTokenSpec {
                    id: Some(t.token_id),
                    text: t.text.clone(),
                    logprob: Some(t.logprob),
                    prob: None,
                    special: t.special,
                })
                .collect(),
            seq.finish_reason,
            None,
        ),
        MockReply::Fail(f) => (Vec::new(), FinishReason::Error, Some(*f)),
    }
}

/// On-disk form of a [`MockScript`] (TOML, or JSON by `.json` extension).
///
/// ```toml
/// [default]
/// tokens = [{ text = "garbage", logprob = -3.0 }]
///
/// [[entry]]
/// patch = 3
/// tokens = [{ text = "45", logprob = -0.01 }, { text = "21", logprob = -0.02 }]
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScriptFile {
    #[serde(default)]
    pub default: MockReplySpec,
    #[serde(default, rename = "entry")]
    pub entries: Vec<MockEntrySpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockReplySpec {
    #[serde(default)]
    pub tokens: Vec<MockTokenSpec>,
    #[serde(default)]
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntrySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default)]
    pub tokens: Vec<MockTokenSpec>,
    #[serde(default)]
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockTokenSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub special: bool,
}

fn build_reply(
    tokens: &[MockTokenSpec],
    finish_reason: FinishReason,
    fail: Option<MockFailure>,
) -> Result<MockReply, BackendError> {
    if let Some(f) = fail {
        return Ok(MockReply::Fail(f));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let logprob = match (t.logprob, t.prob) {
            (Some(lp), None) => lp,
            (None, Some(p)) if p > 0.0 && p <= 1.0 => p.ln(),
            (None, Some(p)) => {
                return Err(BackendError::InvalidRequest(format!("token {i}: prob {p} outside (0, 1]")))
            }
            _ => {
                return Err(BackendError::InvalidRequest(format!(
                    "token {i}: give exactly one of logprob or prob"
                )))
            }
        };
        out.push(TokenScore {
            token_id: t.id.unwrap_or(i as u32),
            text: t.text.clone(),
            logprob,
            special: t.special,
        });
    }
    let seq = ScoredSequence::new(out, finish_reason);
    validate_response(&seq).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    Ok(MockReply::Respond(seq))
}

impl MockScriptFile {
    pub fn into_script(self) -> Result<MockScript, BackendError> {
        let d = &self.default;
        let mut script = MockScript::new(build_reply(&d.tokens, d.finish_reason, d.fail)?);
        for (n, e) in self.entries.iter().enumerate() {
            let key = match (e.patch, &e.fingerprint) {
                (Some(i), None) => MockKey::Patch(i),
                (None, Some(f)) => MockKey::Fingerprint(f.clone()),
                _ => {
                    return Err(BackendError::InvalidRequest(format!(
                        "entry {n}: give exactly one of patch or fingerprint"
                    )))
                }
            };
            let ph = match (&e.prompt, &e.prompt_hash) {
                (Some(p), None) => Some(prompt_hash(p)),
                (None, h) => h.clone(),
                (Some(_), Some(_)) => {
                    return Err(BackendError::InvalidRequest(format!(
                        "entry {n}: give at most one of prompt or prompt_hash"
                    )))
                }
            };
            script.insert_hashed(key, ph, build_reply(&e.tokens, e.finish_reason, e.fail)?);
        }
        Ok(script)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mock script is always representable as TOML")
    }
}

/// Deterministic scripted backend.
///
/// Optional jitter sleeps a pseudo-random, per-request duration so that
/// concurrent callers see completions in a scrambled order.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    parallelism: usize,
    jitter: Option<(u64, Duration)>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            parallelism: 4,
            jitter: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn with_jitter(mut self, seed: u64, max_delay: Duration) -> Self {
        self.jitter = Some((seed, max_delay));
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    /// Number of `score_patch` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Backend for MockBackend {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let fp = (self.script.uses_fingerprints || self.jitter.is_some()).then(|| fingerprint(&req.image));
        if let Some((seed, max)) = self.jitter {
            let mut h = seed ^ req.patch_index.unwrap_or(usize::MAX) as u64;
            for chunk in fp.as_deref().unwrap_or_default().as_bytes().chunks(8) {
                h = splitmix64(h ^ chunk.iter().fold(0u64, |a, &b| (a << 8) | u64::from(b)));
            }
            let nanos = max.as_nanos().max(1) as u64;
            std::thread::sleep(Duration::from_nanos(splitmix64(h) % nanos));
        }
        match self.script.lookup(fp.as_deref(), req.patch_index, &req.prompt) {
            MockReply::Respond(seq) => {
                let mut seq = seq.clone();
                if seq.tokens.len() > req.max_tokens as usize {
                    seq.tokens.truncate(req.max_tokens as usize);
                    seq.finish_reason = FinishReason::Length;
                }
                Ok(seq)
            }
            MockReply::Fail(f) => Err(f.to_error()),
        }
    }

    fn healthcheck(&self) -> Health {
        Health::Ok
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }
}
