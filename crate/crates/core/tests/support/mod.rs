#![allow(dead_code)]

pub mod corpus;
pub mod dd;
pub mod font;

use docpatch::filters::{FieldKind, FilterChain};
use docpatch::grid::{AspectMode, GridSpec};
use docpatch::selection::ExtractionTask;
use image::{DynamicImage, GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform random grey pixels, so every crop has a distinct fingerprint.
pub fn random_page(rng: &mut ChaCha8Rng, w: u32, h: u32) -> DynamicImage {
    DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |_, _| Luma([rng.random()])))
}

pub fn random_mode(rng: &mut ChaCha8Rng) -> AspectMode {
    [AspectMode::Square, AspectMode::ImageProportional, AspectMode::FullWidthStrip][rng.random_range(0..3)]
}

/// Area fraction in (0, 1] with 1.0 itself drawn now and then.
pub fn random_fraction(rng: &mut ChaCha8Rng, lo: f64) -> f64 {
    if rng.random_bool(0.1) {
        1.0
    } else {
        rng.random_range(lo..1.0)
    }
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> GridSpec {
    GridSpec::new(random_fraction(rng, 0.05), random_mode(rng), rng.random_range(0.0..0.8)).unwrap()
}

pub fn numeric_task() -> ExtractionTask {
    ExtractionTask::new("value", "Report the value.", FilterChain::default_for(FieldKind::Numeric))
}

pub fn digits(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

pub fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n).map(|_| char::from(b'a' + rng.random_range(0..26u8))).collect()
}
