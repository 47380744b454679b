//! The model seam.
//!
//! The engine only ever sees a [`Backend`]: hand it a patch image and a
//! prompt, get back the greedy decode with the log-probability of every
//! chosen token. [`RemoteBackend`] speaks JSON over HTTP to a scoring server,
//! [`MockBackend`] answers from a deterministic script.

mod mock;
mod remote;

use std::io::Cursor;

use image::{DynamicImage, ImageFormat};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::ScoredSequence;

pub use mock::{MockBackend, MockFailure, MockKey, MockReply, MockScript, MockScriptFile, MockTokenSpec};
pub use remote::{RemoteBackend, RemoteConfig, WireRequest, WireResponse, WireToken, ENV_BACKEND_TOKEN, ENV_BACKEND_URL};

pub const DEFAULT_MAX_TOKENS: u32 = 64;

/// Reply of a backend: greedy tokens with chosen-token log-probabilities.
pub type InferenceResponse = ScoredSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend refused the request (HTTP {status}): {detail}")]
    Refused { status: u16, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Failures that say nothing about the request itself and may succeed
    /// on retry.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Health {
    Ok,
    Unavailable(String),
}

impl Health {
    pub fn is_ok(&self) -> bool {
        matches!(self, Health::Ok)
    }
}

/// Only greedy decoding exists; the type documents the contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Greedy,
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    /// The patch pixels. Encoded losslessly (PNG) when sent over the wire.
    pub image: DynamicImage,
    pub prompt: String,
    pub max_tokens: u32,
    pub decode_mode: DecodeMode,
    /// Position of the patch in its grid, used by scripted backends only.
    pub patch_index: Option<usize>,
}

impl InferenceRequest {
    pub fn new(image: DynamicImage, prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            image,
            prompt: prompt.into(),
            max_tokens,
            decode_mode: DecodeMode::Greedy,
            patch_index: None,
        }
    }

    pub fn with_patch_index(mut self, index: usize) -> Self {
        self.patch_index = Some(index);
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(BackendError::InvalidRequest("image has no pixels".into()));
        }
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, BackendError> {
        encode_png(&self.image)
    }
}

pub fn encode_png(image: &DynamicImage) -> Result<Vec<u8>, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| BackendError::InvalidRequest(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// Rejects responses whose token log-probabilities are not finite and `<= 0`.
pub fn validate_response(resp: &InferenceResponse) -> Result<(), BackendError> {
    for (i, tok) in resp.tokens.iter().enumerate() {
        if !tok.logprob.is_finite() || tok.logprob > 0.0 {
            return Err(BackendError::Protocol(format!(
                "token {i} ({:?}) has logprob {}, expected a finite value <= 0",
                tok.text, tok.logprob
            )));
        }
    }
    Ok(())
}

/// Content hash of decoded pixels: dimensions, color layout and raw
/// samples. Stable across encoders, unlike a hash of the PNG bytes.
pub fn fingerprint(image: &DynamicImage) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image.width().to_le_bytes());
    hasher.update(image.height().to_le_bytes());
    hasher.update(format!("{:?}", image.color()).as_bytes());
    hasher.update(image.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    hex::encode(&digest[..8])
}

pub trait Backend: Send + Sync {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError>;

    fn healthcheck(&self) -> Health;

    /// How many patch requests the engine should keep in flight.
    fn parallelism(&self) -> usize {
        1
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        (**self).score_patch(req)
    }

    fn healthcheck(&self) -> Health {
        (**self).healthcheck()
    }

    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        (**self).score_patch(req)
    }

    fn healthcheck(&self) -> Health {
        (**self).healthcheck()
    }

    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn score_patch(&self, req: &InferenceRequest) -> Result<InferenceResponse, BackendError> {
        (**self).score_patch(req)
    }

    fn healthcheck(&self) -> Health {
        (**self).healthcheck()
    }

    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::TokenScore;
    use image::{GrayImage, Luma};

    fn img(v: u8) -> DynamicImage {
        DynamicImage::ImageLuma8(GrayImage::from_pixel(3, 2, Luma([v])))
    }

    #[test]
    fn request_validation() {
        assert!(InferenceRequest::new(img(0), "p", 8).validate().is_ok());
        assert!(InferenceRequest::new(img(0), "  ", 8).validate().is_err());
        assert!(InferenceRequest::new(img(0), "p", 0).validate().is_err());
    }

    #[test]
    fn positive_logprob_is_a_protocol_error() {
        let resp = ScoredSequence::new(vec![TokenScore::new(1, "a", 0.5)], Default::default());
        assert!(matches!(validate_response(&resp), Err(BackendError::Protocol(_))));
        let nan = ScoredSequence::new(vec![TokenScore::new(1, "a", f64::NAN)], Default::default());
        assert!(validate_response(&nan).is_err());
    }

    #[test]
    fn fingerprint_depends_on_pixels_and_shape() {
        assert_eq!(fingerprint(&img(7)), fingerprint(&img(7)));
        assert_ne!(fingerprint(&img(7)), fingerprint(&img(8)));
        let tall = DynamicImage::ImageLuma8(GrayImage::from_pixel(2, 3, Luma([7])));
        assert_ne!(fingerprint(&img(7)), fingerprint(&tall));
        assert_eq!(fingerprint(&img(7)).len(), 32);
    }

    #[test]
    fn png_encoding_is_lossless() {
        let src = DynamicImage::ImageLuma8(GrayImage::from_fn(5, 4, |x, y| Luma([(x * 40 + y) as u8])));
        let bytes = encode_png(&src).unwrap();
        let back = image::load_from_memory(&bytes).unwrap();
        assert_eq!(fingerprint(&back), fingerprint(&src));
    }
}
