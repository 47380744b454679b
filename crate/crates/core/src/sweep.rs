//! Patch-size sweep over a development set.
//!
//! For each candidate area fraction every (document, field) pair is run
//! through patch selection and the winner's confidence recorded. The
//! operating size is the largest candidate whose mean confidence is within
//! `plateau_delta` of the best mean and whose spread stays under `max_std`.

use std::collections::BTreeMap;
use std::io::Write;

use image::DynamicImage;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backend;
use crate::filters::check_answer;
use crate::grid::{GridError, GridSpec};
use crate::selection::{run_patch_selection, EngineSettings, ExtractionTask, SelectionError};
use crate::util::{fmt_sig, par_map};

pub const DEFAULT_CANDIDATES: [f64; 11] = [0.02, 0.05, 0.10, 0.15, 0.167, 0.20, 0.23, 0.25, 0.30, 0.40, 0.50];
pub const DEFAULT_PLATEAU_DELTA: f64 = 0.05;
pub const DEFAULT_MAX_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("development set is empty")]
    EmptyDevSet,
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("sweep aborted at s = {area_fraction}: {source}")]
    Backend {
        area_fraction: f64,
        #[source]
        source: SelectionError,
    },
    #[error("no candidate size produced a single winning patch")]
    NoData,
    #[error("writing sweep table: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing sweep table: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub candidate_fractions: Vec<f64>,
    pub plateau_delta: f64,
    pub max_std: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            candidate_fractions: DEFAULT_CANDIDATES.to_vec(),
            plateau_delta: DEFAULT_PLATEAU_DELTA,
            max_std: DEFAULT_MAX_STD,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.candidate_fractions.is_empty() {
            return Err(SweepError::Config("no candidate fractions".into()));
        }
        for &s in &self.candidate_fractions {
            if !(s > 0.0 && s <= 1.0) {
                return Err(SweepError::Config(format!("candidate {s} outside (0, 1]")));
            }
        }
        if self.candidate_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SweepError::Config("candidate fractions must be strictly increasing".into()));
        }
        if self.plateau_delta.is_nan() || self.plateau_delta < 0.0 || self.max_std.is_nan() || self.max_std < 0.0 {
            return Err(SweepError::Config("plateau_delta and max_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One (document, field) pair of the development set.
#[derive(Debug, Clone)]
pub struct SweepItem {
    pub document_id: String,
    pub group: String,
    pub image: DynamicImage,
    pub task: ExtractionTask,
    pub ground_truth: Option<String>,
}

/// Aggregate for one candidate size (or one group at one size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub area_fraction: f64,
    /// `None` when no item produced a winner at this size.
    pub mean_pc: Option<f64>,
    /// Population standard deviation.
    pub std_pc: Option<f64>,
    pub n: usize,
    /// Items that produced no winner.
    pub failures: usize,
    /// Dev-set accuracy over items with ground truth, if any.
    pub accuracy: Option<f64>,
}

/// Raw per-item outcome at one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub area_fraction: f64,
    pub document_id: String,
    pub group: String,
    pub field: String,
    pub pc: Option<f64>,
    pub answer: Option<String>,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SizeStats>,
    pub groups: BTreeMap<String, Vec<SizeStats>>,
    pub points: Vec<SweepPoint>,
    pub chosen_fraction: f64,
    pub plateau_delta: f64,
    pub max_std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn aggregate(area_fraction: f64, points: &[&SweepPoint]) -> SizeStats {
    let pcs: Vec<f64> = points.iter().filter_map(|p| p.pc).collect();
    let graded: Vec<bool> = points.iter().filter_map(|p| p.correct).collect();
    let (mean_pc, std_pc) = match mean_std(&pcs) {
        Some((m, s)) => (Some(m), Some(s)),
        None => (None, None),
    };
    SizeStats {
        area_fraction,
        mean_pc,
        std_pc,
        n: pcs.len(),
        failures: points.len() - pcs.len(),
        accuracy: (!graded.is_empty())
            .then(|| graded.iter().filter(|&&c| c).count() as f64 / graded.len() as f64),
    }
}

/// Picks the operating size from `rows`. Rows without data are ignored;
/// `None` only when no row has data.
pub fn choose_size(rows: &[SizeStats], plateau_delta: f64, max_std: f64) -> Option<f64> {
    let scored: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.area_fraction, r.mean_pc?, r.std_pc?)))
        .collect();
    choose_size_from(&scored, plateau_delta, max_std)
}

/// [`choose_size`] over bare `(s, mean, std)` triples.
pub fn choose_size_from(points: &[(f64, f64, f64)], plateau_delta: f64, max_std: f64) -> Option<f64> {
    let max_mean = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let plateau = points
        .iter()
        .filter(|(_, mean, std)| *mean >= max_mean - plateau_delta && *std <= max_std)
        .map(|p| p.0)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
    plateau.or_else(|| {
        points
            .iter()
            .filter(|p| p.1 == max_mean)
            .map(|p| p.0)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
    })
}

/// Runs the sweep. Items fan out under the backend's parallelism within each
/// size; sizes run in order.
pub fn sweep<B: Backend + ?Sized>(
    items: &[SweepItem],
    config: &SweepConfig,
    base: &GridSpec,
    backend: &B,
    settings: &EngineSettings,
) -> Result<SweepReport, SweepError> {
    config.validate()?;
    if items.is_empty() {
        return Err(SweepError::EmptyDevSet);
    }
    let parallelism = settings.parallelism.unwrap_or_else(|| backend.parallelism());
    let inner = EngineSettings {
        parallelism: Some(1),
        ..*settings
    };

    let mut points = Vec::with_capacity(items.len() * config.candidate_fractions.len());
    for &s in &config.candidate_fractions {
        let spec = base.with_area_fraction(s)?;
        let outcomes = par_map(items.len(), parallelism, |i| {
            run_patch_selection(backend, &items[i].image, &items[i].task, &spec, &inner)
        });
        for (item, outcome) in items.iter().zip(outcomes) {
            let result = match outcome {
                Ok(r) => r,
                Err(e @ SelectionError::BackendDown { .. }) => {
                    return Err(SweepError::Backend {
                        area_fraction: s,
                        source: e,
                    })
                }
                Err(e) => {
                    warn!("{} / {} at s = {s}: {e}", item.document_id, item.task.field);
                    points.push(SweepPoint {
                        area_fraction: s,
                        document_id: item.document_id.clone(),
                        group: item.group.clone(),
                        field: item.task.field.clone(),
                        pc: None,
                        answer: None,
                        correct: item.ground_truth.as_ref().map(|_| false),
                    });
                    continue;
                }
            };
            let answer = result.winner.as_ref().map(|w| w.answer_text.clone());
            let correct = item.ground_truth.as_ref().map(|truth| {
                answer
                    .as_deref()
                    .is_some_and(|a| check_answer(a, truth, item.task.kind()))
            });
            points.push(SweepPoint {
                area_fraction: s,
                document_id: item.document_id.clone(),
                group: item.group.clone(),
                field: item.task.field.clone(),
                pc: result.winner_pc(),
                answer,
                correct,
            });
        }
    }

    let rows: Vec<SizeStats> = config
        .candidate_fractions
        .iter()
        .map(|&s| {
            let at: Vec<&SweepPoint> = points.iter().filter(|p| p.area_fraction == s).collect();
            aggregate(s, &at)
        })
        .collect();
    let mut groups: BTreeMap<String, Vec<SizeStats>> = BTreeMap::new();
    for item in items {
        groups.entry(item.group.clone()).or_default();
    }
    for (group, stats) in groups.iter_mut() {
        *stats = config
            .candidate_fractions
            .iter()
            .map(|&s| {
                let at: Vec<&SweepPoint> = points
                    .iter()
                    .filter(|p| p.area_fraction == s && &p.group == group)
                    .collect();
                aggregate(s, &at)
            })
            .collect();
    }

    let chosen_fraction = choose_size(&rows, config.plateau_delta, config.max_std).ok_or(SweepError::NoData)?;
    info!("chosen area fraction {chosen_fraction}");
    Ok(SweepReport {
        rows,
        groups,
        points,
        chosen_fraction,
        plateau_delta: config.plateau_delta,
        max_std: config.max_std,
    })
}

fn opt_sig(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per candidate: `s,mean_pc,std_pc,n,failures,accuracy`.
    pub fn write_table<W: Write>(&self, out: W) -> Result<(), SweepError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "mean_pc", "std_pc", "n", "failures", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.area_fraction.to_string(),
                opt_sig(r.mean_pc),
                opt_sig(r.std_pc),
                r.n.to_string(),
                r.failures.to_string(),
                opt_sig(r.accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Same columns as [`write_table`](Self::write_table), prefixed by group.
    pub fn write_group_table<W: Write>(&self, out: W) -> Result<(), SweepError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "s", "mean_pc", "std_pc", "n", "failures", "accuracy"])?;
        for (group, rows) in &self.groups {
            for r in rows {
                w.write_record([
                    group.clone(),
                    r.area_fraction.to_string(),
                    opt_sig(r.mean_pc),
                    opt_sig(r.std_pc),
                    r.n.to_string(),
                    r.failures.to_string(),
                    opt_sig(r.accuracy),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (size, document, field) for scatter plots.
    pub fn write_points<W: Write>(&self, out: W) -> Result<(), SweepError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "document_id", "group", "field", "pc", "answer", "correct"])?;
        for p in &self.points {
            w.write_record([
                p.area_fraction.to_string(),
                p.document_id.clone(),
                p.group.clone(),
                p.field.clone(),
                opt_sig(p.pc),
                p.answer.clone().unwrap_or_default(),
                p.correct.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
