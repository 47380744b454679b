//! Overlapping patch grids over a document image.
//!
//! A grid is fully determined by the image dimensions and a [`GridSpec`]:
//! the patch extent comes from [`patch_dims`], the offsets along each axis
//! advance by `floor(extent * (1 - overlap))` and the last offset is clamped
//! so the final patch ends on the image edge. Patches never extend past the
//! image, so no padding is ever fed to the model.

use std::fmt;
use std::str::FromStr;

use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("area fraction must lie in (0, 1], got {0}")]
    AreaFraction(f64),
    #[error("overlap must lie in [0, 1), got {0}")]
    Overlap(f64),
    #[error("unknown aspect mode `{0}` (expected square, image-proportional or full-width-strip)")]
    AspectMode(String),
    #[error("patch {rect} does not fit a {width}x{height} image")]
    OutOfBounds {
        rect: PatchRect,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn of(image: &DynamicImage) -> Result<Self, GridError> {
        let (w, h) = image.dimensions();
        Self::new(w, h)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

/// One rectangular patch, `index` is its row-major ordinal within the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub index: usize,
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl PatchRect {
    pub fn whole(dims: ImageDims) -> Self {
        Self {
            index: 0,
            x0: 0,
            y0: 0,
            w: dims.width,
            h: dims.height,
        }
    }

    /// Exclusive right edge.
    pub fn x1(&self) -> u32 {
        self.x0 + self.w
    }

    /// Exclusive bottom edge.
    pub fn y1(&self) -> u32 {
        self.y0 + self.h
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1() && y >= self.y0 && y < self.y1()
    }

    pub fn fits(&self, dims: ImageDims) -> bool {
        self.w >= 1
            && self.h >= 1
            && u64::from(self.x0) + u64::from(self.w) <= u64::from(dims.width)
            && u64::from(self.y0) + u64::from(self.h) <= u64::from(dims.height)
    }
}

impl fmt::Display for PatchRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{} ({},{}) {}x{}",
            self.index, self.x0, self.y0, self.w, self.h
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AspectMode {
    /// `w = h = sqrt(s * W * H)`, capped at the shorter image side.
    #[default]
    Square,
    /// Same aspect ratio as the image, each side scaled by `sqrt(s)`.
    ImageProportional,
    /// Full image width, height `s * H`.
    FullWidthStrip,
}

impl AspectMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AspectMode::Square => "square",
            AspectMode::ImageProportional => "image-proportional",
            AspectMode::FullWidthStrip => "full-width-strip",
        }
    }
}

impl fmt::Display for AspectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AspectMode {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "square" => Ok(AspectMode::Square),
            "image-proportional" | "proportional" => Ok(AspectMode::ImageProportional),
            "full-width-strip" | "strip" => Ok(AspectMode::FullWidthStrip),
            _ => Err(GridError::AspectMode(s.to_string())),
        }
    }
}

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Patch size (as a fraction of the image area), shape and overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec", into = "RawGridSpec")]
pub struct GridSpec {
    area_fraction: f64,
    aspect_mode: AspectMode,
    overlap: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGridSpec {
    area_fraction: f64,
    #[serde(default)]
    aspect_mode: AspectMode,
    #[serde(default = "default_overlap")]
    overlap: f64,
}

fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = GridError;

    fn try_from(raw: RawGridSpec) -> Result<Self, Self::Error> {
        GridSpec::new(raw.area_fraction, raw.aspect_mode, raw.overlap)
    }
}

impl From<GridSpec> for RawGridSpec {
    fn from(spec: GridSpec) -> Self {
        RawGridSpec {
            area_fraction: spec.area_fraction,
            aspect_mode: spec.aspect_mode,
            overlap: spec.overlap,
        }
    }
}

impl GridSpec {
    pub fn new(area_fraction: f64, aspect_mode: AspectMode, overlap: f64) -> Result<Self, GridError> {
        if !(area_fraction > 0.0 && area_fraction <= 1.0) {
            return Err(GridError::AreaFraction(area_fraction));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(GridError::Overlap(overlap));
        }
        Ok(Self {
            area_fraction,
            aspect_mode,
            overlap,
        })
    }

    /// Square patches with the default overlap.
    pub fn square(area_fraction: f64) -> Result<Self, GridError> {
        Self::new(area_fraction, AspectMode::Square, DEFAULT_OVERLAP)
    }

    /// The single whole-image patch.
    pub fn whole_image() -> Self {
        Self {
            area_fraction: 1.0,
            aspect_mode: AspectMode::Square,
            overlap: DEFAULT_OVERLAP,
        }
    }

    pub fn with_area_fraction(self, area_fraction: f64) -> Result<Self, GridError> {
        Self::new(area_fraction, self.aspect_mode, self.overlap)
    }

    pub fn area_fraction(&self) -> f64 {
        self.area_fraction
    }

    pub fn aspect_mode(&self) -> AspectMode {
        self.aspect_mode
    }

    pub fn overlap(&self) -> f64 {
        self.overlap
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            area_fraction: 0.25,
            aspect_mode: AspectMode::Square,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

fn clamp_extent(v: u64, max: u32) -> u32 {
    v.clamp(1, u64::from(max)) as u32
}

/// Patch width and height in pixels for `spec` applied to `dims`.
///
/// `s = 1` is the whole image in every aspect mode.
pub fn patch_dims(dims: ImageDims, spec: &GridSpec) -> (u32, u32) {
    let (w, h) = (f64::from(dims.width), f64::from(dims.height));
    let s = spec.area_fraction;
    if s >= 1.0 {
        return (dims.width, dims.height);
    }
    match spec.aspect_mode {
        AspectMode::Square => {
            let side = round_half_up((s * w * h).sqrt());
            let side = clamp_extent(side, dims.width.min(dims.height));
            (side, side)
        }
        AspectMode::ImageProportional => {
            let k = s.sqrt();
            (
                clamp_extent(round_half_up(w * k), dims.width),
                clamp_extent(round_half_up(h * k), dims.height),
            )
        }
        AspectMode::FullWidthStrip => (dims.width, clamp_extent(round_half_up(s * h), dims.height)),
    }
}

/// Start offsets along one axis of length `len` for patches of `extent`.
fn axis_offsets(len: u32, extent: u32, overlap: f64) -> Vec<u32> {
    debug_assert!(extent >= 1 && extent <= len);
    let stride = ((f64::from(extent) * (1.0 - overlap)).floor() as u32).max(1);
    let last = len - extent;
    let mut offsets = Vec::with_capacity((last / stride) as usize + 2);
    let mut o = 0u32;
    while o < last {
        offsets.push(o);
        o += stride;
    }
    offsets.push(last);
    offsets
}

/// The grid of overlapping patches covering an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub dims: ImageDims,
    pub spec: GridSpec,
    pub patches: Vec<PatchRect>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PatchRect> {
        self.patches.iter()
    }

    /// Columns and rows of the grid.
    pub fn shape(&self) -> (usize, usize) {
        let rows = self
            .patches
            .iter()
            .filter(|p| p.x0 == 0)
            .count();
        if rows == 0 {
            return (0, 0);
        }
        (self.patches.len() / rows, rows)
    }
}

pub fn build_grid(dims: ImageDims, spec: &GridSpec) -> PatchGrid {
    let (pw, ph) = patch_dims(dims, spec);
    let xs = axis_offsets(dims.width, pw, spec.overlap);
    let ys = axis_offsets(dims.height, ph, spec.overlap);
    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            patches.push(PatchRect {
                index: patches.len(),
                x0,
                y0,
                w: pw,
                h: ph,
            });
        }
    }
    PatchGrid {
        dims,
        spec: *spec,
        patches,
    }
}

/// Copies the pixels under `rect` into a new image.
pub fn crop(image: &DynamicImage, rect: &PatchRect) -> Result<DynamicImage, GridError> {
    let (width, height) = image.dimensions();
    let dims = ImageDims { width, height };
    if !rect.fits(dims) {
        return Err(GridError::OutOfBounds {
            rect: *rect,
            width,
            height,
        });
    }
    Ok(image.crop_imm(rect.x0, rect.y0, rect.w, rect.h))
}
