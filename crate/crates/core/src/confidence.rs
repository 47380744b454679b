//! Patch confidence: the mean natural-log probability of the greedily decoded
//! tokens a model produced for one patch.
//!
//! Values are in nats and always `<= 0`. Backends report the log-probability
//! of each chosen token directly, so no `exp`/`ln` round trip happens here.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::PatchRect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("no scored tokens left after stop-token exclusion")]
    EmptySequence,
    #[error("token {index} has log-probability {logprob}, expected a finite value <= 0")]
    InvalidLogprob { index: usize, logprob: f64 },
    #[error("probability {0} is outside (0, 1]")]
    InvalidProbability(f64),
}

/// A greedily chosen token and its log-probability (the log of the
/// maximum softmax probability at that step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_id: u32,
    pub text: String,
    pub logprob: f64,
    /// End-of-sequence or other control token; never part of the answer text.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub special: bool,
}

impl TokenScore {
    pub fn new(token_id: u32, text: impl Into<String>, logprob: f64) -> Self {
        Self {
            token_id,
            text: text.into(),
            logprob,
            special: false,
        }
    }

    pub fn from_prob(token_id: u32, text: impl Into<String>, prob: f64) -> Result<Self, ConfidenceError> {
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(ConfidenceError::InvalidProbability(prob));
        }
        Ok(Self::new(token_id, text, prob.ln()))
    }

    pub fn stop(token_id: u32, text: impl Into<String>, logprob: f64) -> Self {
        Self {
            special: true,
            ..Self::new(token_id, text, logprob)
        }
    }

    pub fn chosen_prob(&self) -> f64 {
        self.logprob.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    Length,
    Error,
}

impl fmt::Display for FinishReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
            FinishReason::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<TokenScore>,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

impl ScoredSequence {
    pub fn new(tokens: Vec<TokenScore>, finish_reason: FinishReason) -> Self {
        Self {
            tokens,
            finish_reason,
        }
    }

    /// Builds a sequence of non-special tokens from `(text, logprob)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Self {
        let tokens = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (text, lp))| TokenScore::new(i as u32, text, lp))
            .collect();
        Self::new(tokens, FinishReason::Stop)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Mean log-probability of the chosen tokens.
///
/// Special (stop) tokens are skipped unless `include_stop_token` is set.
pub fn patch_confidence(seq: &ScoredSequence, include_stop_token: bool) -> Result<f64, ConfidenceError> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (index, tok) in seq.tokens.iter().enumerate() {
        if tok.logprob.is_nan() || tok.logprob > 0.0 || tok.logprob == f64::NEG_INFINITY {
            return Err(ConfidenceError::InvalidLogprob {
                index,
                logprob: tok.logprob,
            });
        }
        if tok.special && !include_stop_token {
            continue;
        }
        sum += tok.logprob;
        n += 1;
    }
    if n == 0 {
        return Err(ConfidenceError::EmptySequence);
    }
    Ok(sum / n as f64)
}

/// Concatenated non-special token texts, trimmed.
pub fn decode_answer(seq: &ScoredSequence) -> String {
    let text: String = seq
        .tokens
        .iter()
        .filter(|t| !t.special)
        .map(|t| t.text.as_str())
        .collect();
    text.trim().to_string()
}

/// The outcome for one patch: what the model answered, how confident it
/// was, and whether the answer was thrown out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub patch_index: usize,
    pub rect: PatchRect,
    pub answer_text: String,
    /// `None` when no confidence could be computed (empty generation,
    /// backend failure).
    pub pc: Option<f64>,
    pub filtered: bool,
    pub filter_reason: Option<String>,
    pub token_count: usize,
}

impl PatchPrediction {
    /// Whether this patch may take part in selection.
    pub fn is_candidate(&self) -> bool {
        !self.filtered && self.pc.is_some()
    }
}
