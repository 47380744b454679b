//! Field extraction from scanned documents by confidence-guided patch
//! selection.
//!
//! A document image is cut into an overlapping grid of patches
//! ([`grid`]). Each patch is sent with the field's prompt to a vision
//! language model behind the [`backend::Backend`] trait, and each greedy
//! answer is scored by its mean token log-probability ([`confidence`]).
//! Answers that fail format checks are dropped ([`filters`]), and the most
//! confident survivor wins ([`selection`]). [`sweep`] picks the patch size
//! from a development set and [`harness`] drives batch runs from files.

pub mod backend;
pub mod confidence;
pub mod filters;
pub mod grid;
pub mod harness;
pub mod selection;
pub mod sweep;
pub mod util;

pub use backend::{Backend, BackendError, MockBackend, MockReply, MockScript, RemoteBackend, RemoteConfig};
pub use confidence::{patch_confidence, PatchPrediction, ScoredSequence, TokenScore};
pub use filters::{normalize, parse_dms, FieldKind, FilterChain};
pub use grid::{build_grid, patch_dims, AspectMode, GridSpec, ImageDims, PatchRect};
pub use selection::{run_patch_selection, vanilla_run, EngineSettings, ExtractionTask, SelectionError, SelectionResult};
pub use sweep::{choose_size, sweep, SweepConfig, SweepReport};
