//! Backend contracts: the generative transfer field, the latent codec,
//! segmentation, embedding, feature extraction, chat and image editing.
//!
//! Every contract has a deterministic in-process implementation in
//! [`mock`]; [`adapter`] hosts real models out of process.

pub mod adapter;
pub mod embed;
pub mod mock;

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbuffer::{ConditionTensor, CONDITION_CHANNELS};
use crate::image::Image;

/// Latent representation of a rendering state.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Image);

impl Latent {
    pub fn image(&self) -> &Image {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reentrancy {
    /// Safe to call concurrently.
    Reentrant,
    /// Calls must be queued.
    Serialized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub accepts_mask: bool,
    pub accepts_prompt: bool,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeBackendSpec {
    pub name: String,
    pub capabilities: Capabilities,
    pub native_resolution: Option<(usize, usize)>,
    pub reentrancy: Reentrancy,
}

/// Arguments of one call `f(z, t, C, M, y)`.
#[derive(Debug, Clone, Copy)]
pub struct GenerateInput<'a> {
    pub latent: &'a Latent,
    pub step: usize,
    pub condition: &'a ConditionTensor,
    pub mask: Option<&'a Image>,
    pub prompt: Option<&'a str>,
}

pub trait GenerativeBackend: Send + Sync {
    fn spec(&self) -> GenerativeBackendSpec;

    /// Produces the next image. Implementations may return values outside
    /// `[0, 1]`; the caller records them before clamping.
    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image>;
}

/// Calls `backend` and checks the result against the generate contract:
/// three channels at the condition's resolution, finite values.
pub fn generate(backend: &dyn GenerativeBackend, input: &GenerateInput<'_>) -> Result<Image> {
    let c = input.condition.data();
    if c.channels() != CONDITION_CHANNELS {
        return Err(Error::Shape(format!(
            "condition has {} channels, expected {CONDITION_CHANNELS}",
            c.channels()
        )));
    }
    if let Some(m) = input.mask {
        if m.dims() != c.dims() {
            return Err(Error::dims(c.dims(), m.dims(), "generate mask"));
        }
    }
    let out = backend.generate(input)?;
    if out.dims() != c.dims() || out.channels() != 3 {
        return Err(Error::Shape(format!(
            "backend returned {}x{}x{}, expected {}x{}x3",
            out.width(),
            out.height(),
            out.channels(),
            c.width(),
            c.height()
        )));
    }
    if !out.is_finite() {
        return Err(Error::NonFiniteOutput { step: input.step });
    }
    Ok(out)
}

/// Queues calls to a backend that is not safe to call concurrently.
pub struct Serialized<B> {
    inner: Mutex<B>,
    spec: GenerativeBackendSpec,
}

impl<B: GenerativeBackend> Serialized<B> {
    pub fn new(inner: B) -> Self {
        let mut spec = inner.spec();
        spec.reentrancy = Reentrancy::Reentrant;
        Self {
            inner: Mutex::new(inner),
            spec,
        }
    }
}

impl<B: GenerativeBackend> GenerativeBackend for Serialized<B> {
    fn spec(&self) -> GenerativeBackendSpec {
        self.spec.clone()
    }

    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image> {
        let guard = self
            .inner
            .lock()
            .map_err(|_| Error::BackendUnavailable("backend lock poisoned".into()))?;
        guard.generate(input)
    }
}

/// Maps images to latents and back.
pub trait Codec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
    /// Latent `(width, height, channels)` for an image of the given size.
    fn latent_shape(&self, width: usize, height: usize) -> (usize, usize, usize);
    /// Declared max-abs round-trip error on band-limited content.
    fn reconstruction_tolerance(&self) -> f64;
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, 1, |x, y, _| {
            if self.contains(x, y) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Zero-shot text-conditioned segmentation. Returns a single-channel
/// probability map at the backend's native resolution.
pub trait SegmentationBackend: Send + Sync {
    fn segment(&self, image: &Image, entity: &str) -> Result<Image>;
}

/// Joint image/text embedding space.
pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Feature extractor for distribution distances.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &Image) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// One chat completion request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub image_ref: String,
    pub history: Vec<ChatMessage>,
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Instruction-following image editor used to build training pairs.
pub trait EditingBackend: Send + Sync {
    fn edit(&self, image: &Image, prompt: &str, mask: &Image, step: usize) -> Result<Image>;
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
