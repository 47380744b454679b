//! Confidence-based prediction for one document and one field.
//!
//! Every patch of the grid is scored; patches whose answers fail the filter
//! chain (or whose scoring failed) are flagged; the unflagged patch with the
//! highest confidence wins, lowest index first on ties. The full per-patch
//! trace is always kept.

use image::DynamicImage;
use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, InferenceRequest, DEFAULT_MAX_TOKENS};
use crate::confidence::{decode_answer, patch_confidence, ConfidenceError, FinishReason, PatchPrediction};
use crate::filters::{FieldKind, FilterChain, FilterOutcome};
use crate::grid::{build_grid, crop, GridError, GridSpec, ImageDims, PatchGrid, PatchRect};
use crate::util::par_map;

pub const REASON_BACKEND_ERROR: &str = "backend_error";
pub const REASON_EMPTY_SEQUENCE: &str = "empty_sequence";
pub const REASON_NO_VALID_PATCH: &str = "no_valid_patch";

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("backend unavailable: all {patches} patch requests failed ({detail})")]
    BackendDown { patches: usize, detail: String },
    #[error("no valid patch: every patch was filtered")]
    NoValidPatch,
}

/// One field to pull out of a document.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionTask {
    pub field: String,
    pub prompt: String,
    pub chain: FilterChain,
}

impl ExtractionTask {
    pub fn new(field: impl Into<String>, prompt: impl Into<String>, chain: FilterChain) -> Self {
        Self {
            field: field.into(),
            prompt: prompt.into(),
            chain,
        }
    }

    pub fn kind(&self) -> FieldKind {
        self.chain.kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineSettings {
    pub max_tokens: u32,
    pub include_stop_token: bool,
    /// Concurrent patch requests; `None` defers to the backend.
    pub parallelism: Option<usize>,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            include_stop_token: false,
            parallelism: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub winner: Option<PatchPrediction>,
    pub trace: Vec<PatchPrediction>,
    pub grid: PatchGrid,
    pub aborted_reason: Option<String>,
}

impl SelectionResult {
    pub fn answer(&self) -> Result<&str, SelectionError> {
        self.winner
            .as_ref()
            .map(|w| w.answer_text.as_str())
            .ok_or(SelectionError::NoValidPatch)
    }

    pub fn winner_pc(&self) -> Option<f64> {
        self.winner.as_ref().and_then(|w| w.pc)
    }

    pub fn to_trace_document(&self, field: &str) -> TraceDocument {
        TraceDocument {
            field: field.to_string(),
            image_width: self.grid.dims.width,
            image_height: self.grid.dims.height,
            patch_count: self.trace.len(),
            winner_index: self.winner.as_ref().map(|w| w.patch_index),
            answer: self.winner.as_ref().map(|w| w.answer_text.clone()),
            winner_pc: self.winner_pc(),
            aborted_reason: self.aborted_reason.clone(),
            patches: self.trace.iter().map(TraceRecord::from).collect(),
        }
    }
}

/// Serialized audit trail of one selection run, one record per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub field: String,
    pub image_width: u32,
    pub image_height: u32,
    pub patch_count: usize,
    pub winner_index: Option<usize>,
    pub answer: Option<String>,
    pub winner_pc: Option<f64>,
    pub aborted_reason: Option<String>,
    pub patches: Vec<TraceRecord>,
}

impl TraceDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace documents always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
    pub pc: Option<f64>,
    pub answer: String,
    pub filtered: bool,
    pub reason: Option<String>,
}

impl From<&PatchPrediction> for TraceRecord {
    fn from(p: &PatchPrediction) -> Self {
        Self {
            index: p.patch_index,
            x0: p.rect.x0,
            y0: p.rect.y0,
            w: p.rect.w,
            h: p.rect.h,
            pc: p.pc,
            answer: p.answer_text.clone(),
            filtered: p.filtered,
            reason: p.filter_reason.clone(),
        }
    }
}

/// Index (into `trace`) of the unfiltered patch with maximal confidence;
/// the earliest one wins ties.
pub fn select_winner(trace: &[PatchPrediction]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in trace.iter().enumerate() {
        if p.filtered {
            continue;
        }
        let Some(pc) = p.pc else { continue };
        if best.is_none_or(|(_, b)| pc > b) {
            best = Some((i, pc));
        }
    }
    best.map(|(i, _)| i)
}

fn flagged(rect: PatchRect, answer: String, pc: Option<f64>, tokens: usize, reason: &str) -> PatchPrediction {
    PatchPrediction {
        patch_index: rect.index,
        rect,
        answer_text: answer,
        pc,
        filtered: true,
        filter_reason: Some(reason.to_string()),
        token_count: tokens,
    }
}

fn score_one<B: Backend + ?Sized>(
    backend: &B,
    image: &DynamicImage,
    rect: PatchRect,
    task: &ExtractionTask,
    settings: &EngineSettings,
) -> Result<(PatchPrediction, Option<BackendError>), GridError> {
    let patch = crop(image, &rect)?;
    let req = InferenceRequest::new(patch, task.prompt.clone(), settings.max_tokens).with_patch_index(rect.index);
    let seq = match backend.score_patch(&req) {
        Ok(seq) => seq,
        Err(e) => {
            debug!("patch {}: {e}", rect.index);
            return Ok((flagged(rect, String::new(), None, 0, REASON_BACKEND_ERROR), Some(e)));
        }
    };
    let answer = decode_answer(&seq);
    let tokens = seq.tokens.len();
    if seq.finish_reason == FinishReason::Error {
        return Ok((flagged(rect, answer, None, tokens, REASON_BACKEND_ERROR), None));
    }
    let pc = match patch_confidence(&seq, settings.include_stop_token) {
        Ok(pc) => pc,
        Err(ConfidenceError::EmptySequence) => {
            return Ok((flagged(rect, answer, None, tokens, REASON_EMPTY_SEQUENCE), None));
        }
        Err(e) => {
            debug!("patch {}: {e}", rect.index);
            return Ok((flagged(rect, answer, None, tokens, REASON_BACKEND_ERROR), None));
        }
    };
    let prediction = match task.chain.apply(&answer) {
        FilterOutcome::Pass => PatchPrediction {
            patch_index: rect.index,
            rect,
            answer_text: answer,
            pc: Some(pc),
            filtered: false,
            filter_reason: None,
            token_count: tokens,
        },
        FilterOutcome::Fail(rule) => flagged(rect, answer, Some(pc), tokens, rule.name()),
    };
    Ok((prediction, None))
}

/// Scores every patch of `spec`'s grid over `image` and picks the winner.
pub fn run_patch_selection<B: Backend + ?Sized>(
    backend: &B,
    image: &DynamicImage,
    task: &ExtractionTask,
    spec: &GridSpec,
    settings: &EngineSettings,
) -> Result<SelectionResult, SelectionError> {
    let dims = ImageDims::of(image)?;
    let grid = build_grid(dims, spec);
    let parallelism = settings.parallelism.unwrap_or_else(|| backend.parallelism());
    let scored = par_map(grid.len(), parallelism, |i| {
        score_one(backend, image, grid.patches[i], task, settings)
    });

    let mut trace = Vec::with_capacity(grid.len());
    let mut transport_failures = Vec::new();
    for item in scored {
        let (prediction, err) = item?;
        if let Some(e) = err.filter(BackendError::is_retryable) {
            transport_failures.push(e);
        }
        trace.push(prediction);
    }
    trace.sort_by_key(|p| p.patch_index);
    if !trace.is_empty() && transport_failures.len() == trace.len() {
        return Err(SelectionError::BackendDown {
            patches: trace.len(),
            detail: transport_failures[0].to_string(),
        });
    }

    let winner = select_winner(&trace).map(|i| trace[i].clone());
    let aborted_reason = winner.is_none().then(|| REASON_NO_VALID_PATCH.to_string());
    Ok(SelectionResult {
        winner,
        trace,
        grid,
        aborted_reason,
    })
}

/// Single whole-image pass: the no-patching baseline.
pub fn vanilla_run<B: Backend + ?Sized>(
    backend: &B,
    image: &DynamicImage,
    task: &ExtractionTask,
    settings: &EngineSettings,
) -> Result<SelectionResult, SelectionError> {
    run_patch_selection(backend, image, task, &GridSpec::whole_image(), settings)
}
