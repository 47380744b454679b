//! Synthetic scanned pages and a simulated reader that scripts the mock
//! backend by patch fingerprint.
//!
//! The reader answers from what a patch shows: a fully visible field is
//! read correctly and confidently unless the patch is so large that the
//! page clutter overloads it; a clipped field yields a truncated,
//! low-confidence read; a patch with only clutter numbers yields one of
//! them with middling confidence; blank paper yields a confident
//! non-answer that filtering must remove.

use std::collections::HashMap;

use docpatch::backend::{fingerprint, MockKey, MockReply, MockScript};
use docpatch::filters::FieldKind;
use docpatch::grid::{build_grid, crop, GridSpec, ImageDims, PatchRect};
use docpatch::harness::inject_noise;
use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{draw_text, text_width, GLYPH_H};

/// Largest share of the page a patch can show before the reader is
/// overloaded.
pub const CAPACITY: f64 = 0.32;
const OVERLOAD_SLOPE: f64 = 4.0;
const NON_ANSWER: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub text: String,
}

impl Block {
    fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    fn x_overlap(&self, r: &PatchRect) -> u32 {
        (self.x + self.w).min(r.x1()).saturating_sub(self.x.max(r.x0))
    }

    fn y_overlap(&self, r: &PatchRect) -> u32 {
        (self.y + self.h).min(r.y1()).saturating_sub(self.y.max(r.y0))
    }

    fn visible_fraction(&self, r: &PatchRect) -> f64 {
        (u64::from(self.x_overlap(r)) * u64::from(self.y_overlap(r))) as f64 / self.area() as f64
    }

    fn collides(&self, other: &Block, margin: u32) -> bool {
        self.x < other.x + other.w + margin
            && other.x < self.x + self.w + margin
            && self.y < other.y + other.h + margin
            && other.y < self.y + self.h + margin
    }
}

#[derive(Debug, Clone)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
    pub block: Block,
    pub truth: String,
}

#[derive(Debug, Clone)]
pub struct Doc {
    pub id: String,
    pub image: DynamicImage,
    pub fields: Vec<Field>,
    pub clutter: Vec<Block>,
    /// Whether an overloaded view still resolves the fields (> 0.7).
    pub legibility: f64,
    /// Per-document confidence offset in the clear regime.
    pub steadiness: f64,
    /// How fast confidence collapses once overloaded.
    pub overload: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub width: u32,
    pub height: u32,
    pub fields: Vec<(String, FieldKind)>,
    pub clutter: usize,
    pub sigma: f64,
}

fn depth_value(rng: &mut ChaCha8Rng) -> (String, String) {
    let v: u32 = rng.random_range(1200..9800);
    (v.to_string(), format!("{v} ft"))
}

fn latitude_value(rng: &mut ChaCha8Rng) -> (String, String) {
    let d: u32 = rng.random_range(25..49);
    let m: u32 = rng.random_range(0..60);
    let cs: u32 = rng.random_range(0..6000);
    let text = format!("{d}°{m:02}'{:02}.{:02}\"", cs / 100, cs % 100);
    let deg = f64::from(d) + f64::from(m) / 60.0 + f64::from(cs) / 100.0 / 3600.0;
    (text, format!("{deg:.8}"))
}

fn place(rng: &mut ChaCha8Rng, spec: &CorpusSpec, taken: &[Block], text: String) -> Block {
    let (w, h) = (text_width(&text), GLYPH_H);
    for _ in 0..10_000 {
        let b = Block {
            x: rng.random_range(2..spec.width - w - 2),
            y: rng.random_range(2..spec.height - h - 2),
            w,
            h,
            text: text.clone(),
        };
        if taken.iter().all(|t| !t.collides(&b, 6)) {
            return b;
        }
    }
    panic!("page too crowded to place `{text}`");
}

/// Renders `n` documents. Everything, noise included, follows from `seed`.
pub fn generate(spec: &CorpusSpec, n: usize, seed: u64, prefix: &str) -> Vec<Doc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut taken = Vec::new();
            let mut fields = Vec::new();
            for (name, kind) in &spec.fields {
                let (text, truth) = match kind {
                    FieldKind::Latitude => latitude_value(&mut rng),
                    _ => depth_value(&mut rng),
                };
                let block = place(&mut rng, spec, &taken, text);
                taken.push(block.clone());
                fields.push(Field {
                    name: name.clone(),
                    kind: *kind,
                    block,
                    truth,
                });
            }
            let mut clutter = Vec::new();
            for _ in 0..spec.clutter {
                let v: u32 = rng.random_range(100..99_999);
                let block = place(&mut rng, spec, &taken, v.to_string());
                taken.push(block.clone());
                clutter.push(block);
            }
            let mut page = GrayImage::from_fn(spec.width, spec.height, |_, _| Luma([rng.random_range(150..=205)]));
            for b in &taken {
                draw_text(&mut page, b.x, b.y, &b.text);
            }
            let image = inject_noise(&DynamicImage::ImageLuma8(page), spec.sigma, rng.random()).unwrap();
            Doc {
                id: format!("{prefix}{i:03}"),
                image,
                fields,
                clutter,
                legibility: rng.random(),
                steadiness: rng.random(),
                overload: rng.random_range(0.3..1.0),
            }
        })
        .collect()
}

fn unit_hash(r: &PatchRect) -> f64 {
    let mut z = (u64::from(r.x0) << 48) ^ (u64::from(r.y0) << 32) ^ (u64::from(r.w) << 16) ^ u64::from(r.h);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Two characters per token, every token at `logprob`.
fn answer(text: &str, logprob: f64) -> MockReply {
    let chars: Vec<char> = text.chars().collect();
    MockReply::tokens(chars.chunks(2).map(|c| (c.iter().collect::<String>(), logprob)))
}

fn corrupt(text: &str) -> String {
    let mut chars: Vec<char> = text.chars().collect();
    if let Some(c) = chars.iter_mut().rev().find(|c| c.is_ascii_digit()) {
        *c = char::from_digit((c.to_digit(10).unwrap() + 1) % 10, 10).unwrap();
    }
    chars.into_iter().collect()
}

/// The reader's reply for field `field` of `doc` shown through `rect`.
pub fn read(doc: &Doc, field: usize, rect: &PatchRect) -> MockReply {
    let dims = ImageDims::of(&doc.image).unwrap();
    let area_frac = (u64::from(rect.w) * u64::from(rect.h)) as f64 / dims.area() as f64;
    let block = &doc.fields[field].block;
    let vis = block.visible_fraction(rect);
    let jitter = 0.004 * unit_hash(rect);
    if vis >= 1.0 {
        if area_frac <= CAPACITY {
            return answer(&block.text, -(0.02 + 0.03 * doc.steadiness + jitter));
        }
        let loss = OVERLOAD_SLOPE * doc.overload * (area_frac / CAPACITY - 1.0);
        return if doc.legibility > 0.7 {
            answer(&block.text, -(0.2 + loss + jitter))
        } else {
            answer(&corrupt(&block.text), -(0.15 + loss + jitter))
        };
    }
    if vis > 0.0 {
        let chars: Vec<char> = block.text.chars().collect();
        let shown = ((f64::from(block.x_overlap(rect)) / f64::from(block.w)) * chars.len() as f64).floor() as usize;
        let shown = shown.clamp(1, chars.len());
        let part: String = if rect.x0 <= block.x {
            chars[..shown].iter().collect()
        } else {
            chars[chars.len() - shown..].iter().collect()
        };
        return answer(&part, -(2.5 + 0.5 * (1.0 - vis) + jitter));
    }
    match doc.clutter.iter().find(|c| c.visible_fraction(rect) >= 1.0) {
        Some(c) => answer(&c.text, -(1.2 + 0.3 * unit_hash(rect))),
        None => answer(NON_ANSWER, -0.05),
    }
}

/// A mock script covering every patch of every grid in `fractions` over
/// `docs`, keyed by fingerprint and narrowed by each field's prompt.
/// Returns the script and the number of fingerprint collisions that would
/// have needed two different replies.
pub fn script_for(docs: &[Doc], prompts: &[String], fractions: &[f64], base: &GridSpec) -> (MockScript, usize) {
    let mut script = MockScript::new(answer(NON_ANSWER, -0.05));
    let mut seen: HashMap<(String, usize), MockReply> = HashMap::new();
    let mut collisions = 0;
    for doc in docs {
        let dims = ImageDims::of(&doc.image).unwrap();
        for &s in fractions {
            let grid = build_grid(dims, &base.with_area_fraction(s).unwrap());
            for rect in &grid.patches {
                let fp = fingerprint(&crop(&doc.image, rect).unwrap());
                for (i, prompt) in prompts.iter().enumerate() {
                    let reply = read(doc, i, rect);
                    match seen.get(&(fp.clone(), i)) {
                        Some(prev) if *prev != reply => collisions += 1,
                        Some(_) => {}
                        None => {
                            seen.insert((fp.clone(), i), reply.clone());
                            script.insert(MockKey::Fingerprint(fp.clone()), Some(prompt), reply);
                        }
                    }
                }
            }
        }
    }
    (script, collisions)
}

/// Patch side for square mode, computed from the geometry rules directly.
pub fn square_side(s: f64, w: u32, h: u32) -> u32 {
    if s >= 1.0 {
        return w.min(h);
    }
    let side = ((s * f64::from(w) * f64::from(h)).sqrt() + 0.5).floor() as u32;
    side.clamp(1, w.min(h))
}

/// Candidates where every placement of a `field_w` x `field_h` block is
/// fully inside some patch and no patch overloads the reader.
pub fn plateau_band(candidates: &[f64], w: u32, h: u32, field_w: u32, field_h: u32, overlap: f64) -> Vec<f64> {
    candidates
        .iter()
        .copied()
        .filter(|&s| {
            let side = square_side(s, w, h);
            let stride = ((f64::from(side) * (1.0 - overlap)).floor() as u32).max(1);
            let fits = side + 1 >= field_w + stride && side + 1 >= field_h + stride;
            let area = f64::from(side) * f64::from(side) / (f64::from(w) * f64::from(h));
            fits && area <= CAPACITY
        })
        .collect()
}
