use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{load_image, HarnessError, Manifest, PromptLibrary, RunConfig};
use crate::backend::Backend;
use crate::filters::{check_answer, MATCH_RULES};
use crate::grid::GridSpec;
use crate::selection::{run_patch_selection, EngineSettings, ExtractionTask, SelectionError, REASON_NO_VALID_PATCH};
use crate::util::par_map;

pub const REASON_BACKEND_DOWN: &str = "backend_down";
pub const REASON_IMAGE_ERROR: &str = "image_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub field: String,
    pub answer: Option<String>,
    pub pc: Option<f64>,
    /// `None` when the manifest has no ground truth for this field.
    pub verdict: Option<Verdict>,
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl AccuracyRow {
    fn tally<'a>(verdicts: impl IntoIterator<Item = &'a Verdict>) -> Self {
        let (mut correct, mut total) = (0, 0);
        for v in verdicts {
            total += 1;
            correct += usize::from(*v == Verdict::Correct);
        }
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self { correct, total, accuracy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVerdict {
    pub field: String,
    pub verdict: Verdict,
    pub pc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentVerdicts {
    pub id: String,
    pub group: String,
    pub fields: Vec<FieldVerdict>,
}

/// Field-level micro-averaged accuracy over every graded (document, field).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: AccuracyRow,
    pub per_field: BTreeMap<String, AccuracyRow>,
    pub per_group: BTreeMap<String, AccuracyRow>,
    /// Predictions without ground truth, left out of every row.
    pub ungraded: usize,
    pub match_rules: String,
    pub documents: Vec<DocumentVerdicts>,
}

impl EvalReport {
    /// `None` when nothing is graded.
    pub fn from_predictions(predictions: &[Prediction]) -> Option<Self> {
        let graded: Vec<(&Prediction, &Verdict)> =
            predictions.iter().filter_map(|p| p.verdict.as_ref().map(|v| (p, v))).collect();
        if graded.is_empty() {
            return None;
        }
        let mut per_field: BTreeMap<String, Vec<&Verdict>> = BTreeMap::new();
        let mut per_group: BTreeMap<String, Vec<&Verdict>> = BTreeMap::new();
        let mut documents: Vec<DocumentVerdicts> = Vec::new();
        for (p, v) in &graded {
            per_field.entry(p.field.clone()).or_default().push(v);
            per_group.entry(p.group.clone()).or_default().push(v);
            let fv = FieldVerdict {
                field: p.field.clone(),
                verdict: **v,
                pc: p.pc,
            };
            match documents.last_mut() {
                Some(d) if d.id == p.id => d.fields.push(fv),
                _ => documents.push(DocumentVerdicts {
                    id: p.id.clone(),
                    group: p.group.clone(),
                    fields: vec![fv],
                }),
            }
        }
        Some(Self {
            overall: AccuracyRow::tally(graded.iter().map(|(_, v)| *v)),
            per_field: per_field.into_iter().map(|(k, v)| (k, AccuracyRow::tally(v))).collect(),
            per_group: per_group.into_iter().map(|(k, v)| (k, AccuracyRow::tally(v))).collect(),
            ungraded: predictions.len() - graded.len(),
            match_rules: MATCH_RULES.to_string(),
            documents,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<Prediction>,
    pub report: Option<EvalReport>,
}

impl BatchOutcome {
    /// JSON Lines, one prediction per line, in manifest order.
    pub fn write_predictions<W: Write>(&self, mut out: W) -> Result<(), HarnessError> {
        for p in &self.predictions {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn grade(truth: Option<&String>, answer: Option<&str>, task: &ExtractionTask) -> Option<Verdict> {
    truth.map(|t| match answer {
        Some(a) if check_answer(a, t, task.kind()) => Verdict::Correct,
        _ => Verdict::Incorrect,
    })
}

/// Runs every (document, field) of `manifest`. Documents run concurrently
/// under the backend's parallelism; a failing document is recorded and the
/// batch carries on.
pub fn run_batch<B: Backend + ?Sized>(
    manifest: &Manifest,
    config: &RunConfig,
    prompts: &PromptLibrary,
    backend: &B,
    spec: &GridSpec,
    settings: &EngineSettings,
) -> Result<BatchOutcome, HarnessError> {
    manifest.validate(config, prompts)?;
    let tasks: Vec<Vec<ExtractionTask>> = manifest
        .documents
        .iter()
        .map(|doc| {
            doc.fields
                .iter()
                .map(|f| config.task(prompts, &f.name, f.kind, f.prompt.as_deref()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;

    let parallelism = settings.parallelism.unwrap_or_else(|| backend.parallelism());
    let inner = EngineSettings {
        parallelism: Some(1),
        ..*settings
    };
    let per_doc = par_map(manifest.documents.len(), parallelism, |i| {
        let doc = &manifest.documents[i];
        let group = manifest.group_of(doc).to_string();
        let image = load_image(&doc.image);
        if let Err(e) = &image {
            warn!("{}: {e}", doc.id);
        }
        doc.fields
            .iter()
            .zip(&tasks[i])
            .map(|(field, task)| {
                let outcome = match &image {
                    Ok(img) => run_patch_selection(backend, img, task, spec, &inner).map_err(|e| match e {
                        SelectionError::BackendDown { .. } => REASON_BACKEND_DOWN,
                        _ => REASON_NO_VALID_PATCH,
                    }),
                    Err(_) => Err(REASON_IMAGE_ERROR),
                };
                let (answer, pc, reason) = match outcome {
                    Ok(result) => (
                        result.winner.as_ref().map(|w| w.answer_text.clone()),
                        result.winner_pc(),
                        result.aborted_reason.clone(),
                    ),
                    Err(reason) => {
                        warn!("{} / {}: {reason}", doc.id, field.name);
                        (None, None, Some(reason.to_string()))
                    }
                };
                Prediction {
                    id: doc.id.clone(),
                    field: field.name.clone(),
                    verdict: grade(field.ground_truth.as_ref(), answer.as_deref(), task),
                    answer,
                    pc,
                    group: group.clone(),
                    reason,
                }
            })
            .collect::<Vec<_>>()
    });
    let predictions: Vec<Prediction> = per_doc.into_iter().flatten().collect();
    let report = EvalReport::from_predictions(&predictions);
    Ok(BatchOutcome { predictions, report })
}
