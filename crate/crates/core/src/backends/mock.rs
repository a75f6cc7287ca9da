//! Deterministic in-process test doubles for every backend contract.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    Capabilities, ChatClient, ChatRequest, Codec, EditingBackend, Embedder, GenerateInput,
    GenerativeBackend, GenerativeBackendSpec, Latent, Rect, Reentrancy, SegmentationBackend,
};
use crate::error::{Error, Result};
use crate::gbuffer::BufferKind;
use crate::image::Image;

/// Returns the image unchanged as its own latent.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        Ok(Latent(image.clone()))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        Ok(latent.0.clone())
    }

    fn latent_shape(&self, width: usize, height: usize) -> (usize, usize, usize) {
        (width, height, 3)
    }

    fn reconstruction_tolerance(&self) -> f64 {
        0.0
    }
}

/// 2× box-average encoder with bilinear decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct DownsampleCodec;

impl Codec for DownsampleCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let (w, h) = image.dims();
        if w % 2 != 0 || h % 2 != 0 {
            return Err(Error::Shape(format!(
                "2x codec needs even dimensions, got {w}x{h}"
            )));
        }
        let c = image.channels();
        Ok(Latent(Image::from_fn(w / 2, h / 2, c, |x, y, ch| {
            0.25 * (image.get(2 * x, 2 * y, ch)
                + image.get(2 * x + 1, 2 * y, ch)
                + image.get(2 * x, 2 * y + 1, ch)
                + image.get(2 * x + 1, 2 * y + 1, ch))
        })))
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (w, h) = latent.0.dims();
        Ok(latent.0.resize_bilinear(2 * w, 2 * h))
    }

    fn latent_shape(&self, width: usize, height: usize) -> (usize, usize, usize) {
        (width / 2, height / 2, 3)
    }

    fn reconstruction_tolerance(&self) -> f64 {
        0.05
    }
}

/// Pure PBR synthesis stand-in: the albedo span of the condition tensor.
pub fn albedo_synthesis(input: &GenerateInput<'_>) -> Image {
    input.condition.span(BufferKind::Albedo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub target_image: Image,
    /// Contraction factor λ in `(0, 1]`.
    pub contraction: f64,
    pub respect_mask: bool,
}

impl MockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contraction > 0.0 && self.contraction <= 1.0) {
            return Err(Error::Config(format!(
                "mock contraction must lie in (0, 1], got {}",
                self.contraction
            )));
        }
        if self.target_image.channels() != 3 {
            return Err(Error::Shape("mock target must be RGB".into()));
        }
        Ok(())
    }
}

/// Contracting mock of the transfer field.
///
/// At `t = 0` it synthesizes from the albedo span; afterwards it returns
/// `x + λ·M⊙(target − x)` with `x = decode(z)`. A missing mask, or
/// `respect_mask == false`, edits everywhere.
pub struct MockGenerator {
    config: MockConfig,
    codec: Arc<dyn Codec>,
}

impl MockGenerator {
    pub fn new(config: MockConfig, codec: Arc<dyn Codec>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, codec })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }
}

fn mask_weight(mask: Option<&Image>, x: usize, y: usize, c: usize) -> f64 {
    match mask {
        None => 1.0,
        Some(m) if m.channels() == 1 => m.get(x, y, 0),
        Some(m) => m.get(x, y, c),
    }
}

impl GenerativeBackend for MockGenerator {
    fn spec(&self) -> GenerativeBackendSpec {
        GenerativeBackendSpec {
            name: "mock-contracting".into(),
            capabilities: Capabilities {
                accepts_mask: true,
                accepts_prompt: true,
                deterministic: true,
            },
            native_resolution: None,
            reentrancy: Reentrancy::Reentrant,
        }
    }

    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image> {
        if input.step == 0 {
            return Ok(albedo_synthesis(input));
        }
        let prev = self.codec.decode(input.latent)?;
        let target = &self.config.target_image;
        prev.ensure_same_shape(target, "mock target")?;
        let lambda = self.config.contraction;
        let mask = if self.config.respect_mask {
            input.mask
        } else {
            None
        };
        Ok(Image::from_fn(prev.width(), prev.height(), 3, |x, y, c| {
            let p = prev.get(x, y, c);
            p + lambda * mask_weight(mask, x, y, c) * (target.get(x, y, c) - p)
        }))
    }
}

/// Fixed-point mock: returns the decoded latent unchanged after synthesis.
pub struct EchoGenerator {
    codec: Arc<dyn Codec>,
}

impl EchoGenerator {
    pub fn new(codec: Arc<dyn Codec>) -> Self {
        Self { codec }
    }
}

impl GenerativeBackend for EchoGenerator {
    fn spec(&self) -> GenerativeBackendSpec {
        GenerativeBackendSpec {
            name: "mock-echo".into(),
            capabilities: Capabilities {
                accepts_mask: true,
                accepts_prompt: true,
                deterministic: true,
            },
            native_resolution: None,
            reentrancy: Reentrancy::Reentrant,
        }
    }

    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image> {
        if input.step == 0 {
            return Ok(albedo_synthesis(input));
        }
        self.codec.decode(input.latent)
    }
}

/// Wraps a backend and emits NaN from `fail_at_step` on.
pub struct FaultyGenerator<B> {
    pub inner: B,
    pub fail_at_step: usize,
}

impl<B: GenerativeBackend> GenerativeBackend for FaultyGenerator<B> {
    fn spec(&self) -> GenerativeBackendSpec {
        let mut s = self.inner.spec();
        s.name = format!("{}-faulty", s.name);
        s
    }

    fn generate(&self, input: &GenerateInput<'_>) -> Result<Image> {
        let mut out = self.inner.generate(input)?;
        if input.step >= self.fail_at_step {
            out.data_mut()[0] = f64::NAN;
        }
        Ok(out)
    }
}

/// Deterministic "photographic" target for a scene: albedo modulated by
/// irradiance plus fine texture.
pub fn procedural_target(albedo: &Image, irradiance: &Image, seed: u64) -> Image {
    let (w, h) = albedo.dims();
    let phase = (seed % 1000) as f64 * 0.017;
    Image::from_fn(w, h, 3, |x, y, c| {
        let u = x as f64 / w.max(1) as f64;
        let v = y as f64 / h.max(1) as f64;
        let grain = 0.04 * ((u * 41.0 + phase).sin() * (v * 37.0 - phase).cos());
        let lit = albedo.get(x, y, c) * (0.5 + irradiance.get(x, y, c));
        (0.85 * lit + 0.05 + grain).clamp(0.0, 1.0)
    })
}

/// Segmenter returning a constant probability everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSegmenter {
    value: f64,
    native: (usize, usize),
}

impl ConstantSegmenter {
    pub fn new(value: f64, native: (usize, usize)) -> Self {
        Self { value, native }
    }
}

impl SegmentationBackend for ConstantSegmenter {
    fn segment(&self, _image: &Image, _entity: &str) -> Result<Image> {
        Ok(Image::filled(self.native.0, self.native.1, 1, self.value))
    }
}

/// Segmenter keyed on entity text: `1` inside the entity's rectangle at
/// the native resolution, `0` elsewhere. Unknown entities use the fallback
/// rectangle, or an empty map without one.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RectSegmenter {
    pub native: (usize, usize),
    pub rects: BTreeMap<String, Rect>,
    #[serde(default)]
    pub fallback: Option<Rect>,
}

impl RectSegmenter {
    pub fn new(native: (usize, usize)) -> Self {
        Self {
            native,
            ..Default::default()
        }
    }

    pub fn with(mut self, entity: &str, rect: Rect) -> Self {
        self.rects.insert(entity.to_lowercase(), rect);
        self
    }

    pub fn with_fallback(mut self, rect: Rect) -> Self {
        self.fallback = Some(rect);
        self
    }

    fn lookup(&self, entity: &str) -> Option<&Rect> {
        let e = entity.to_lowercase();
        self.rects
            .get(&e)
            .or_else(|| {
                // Match on the head noun ("red car" → "car").
                e.split_whitespace()
                    .last()
                    .and_then(|head| self.rects.get(head))
            })
            .or(self.fallback.as_ref())
    }
}

impl SegmentationBackend for RectSegmenter {
    fn segment(&self, _image: &Image, entity: &str) -> Result<Image> {
        let (w, h) = self.native;
        Ok(match self.lookup(entity) {
            Some(r) => r.to_mask(w, h),
            None => Image::zeros(w, h, 1),
        })
    }
}

/// Same vector for every image and text.
#[derive(Debug, Clone)]
pub struct ConstantEmbedder(pub Vec<f64>);

impl Embedder for ConstantEmbedder {
    fn embed_image(&self, _image: &Image) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

type ImageFn = dyn Fn(&Image) -> Vec<f64> + Send + Sync;
type TextFn = dyn Fn(&str) -> Vec<f64> + Send + Sync;

/// Embedder built from closures.
pub struct FnEmbedder {
    image: Box<ImageFn>,
    text: Box<TextFn>,
}

impl FnEmbedder {
    pub fn new(
        image: impl Fn(&Image) -> Vec<f64> + Send + Sync + 'static,
        text: impl Fn(&str) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            image: Box::new(image),
            text: Box::new(text),
        }
    }
}

impl Embedder for FnEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok((self.image)(image))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok((self.text)(text))
    }
}

/// Always fails with `EmbedderUnavailable`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnavailableEmbedder;

impl Embedder for UnavailableEmbedder {
    fn embed_image(&self, _image: &Image) -> Result<Vec<f64>> {
        Err(Error::EmbedderUnavailable("no embedder configured".into()))
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::EmbedderUnavailable("no embedder configured".into()))
    }
}

/// Pixel-space editor for building synthetic pairs: moves the image toward
/// a target inside the mask, with optional noise and shift injection.
#[derive(Debug, Clone)]
pub struct MaskedEditor {
    pub target: Image,
    pub contraction: f64,
    /// `(step, amplitude, seed)`: add uniform noise in `[-a, a]` at that step.
    pub noise_at: Option<(usize, f64, u64)>,
    /// `(step, dx, dy)`: translate the output at that step.
    pub shift_at: Option<(usize, i64, i64)>,
}

impl MaskedEditor {
    pub fn new(target: Image, contraction: f64) -> Self {
        Self {
            target,
            contraction,
            noise_at: None,
            shift_at: None,
        }
    }
}

impl EditingBackend for MaskedEditor {
    fn edit(&self, image: &Image, _prompt: &str, mask: &Image, step: usize) -> Result<Image> {
        image.ensure_same_shape(&self.target, "editor target")?;
        let lambda = self.contraction;
        let mut out = Image::from_fn(image.width(), image.height(), 3, |x, y, c| {
            let p = image.get(x, y, c);
            p + lambda * mask_weight(Some(mask), x, y, c) * (self.target.get(x, y, c) - p)
        });
        if let Some((s, amp, seed)) = self.noise_at {
            if s == step {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Uniform::new_inclusive(-amp, amp).expect("finite amplitude");
                for v in out.data_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        if let Some((s, dx, dy)) = self.shift_at {
            if s == step {
                out = out.translate(dx, dy);
            }
        }
        Ok(out)
    }
}

/// Recorded replies keyed by a substring of the system prompt; replies for
/// a key are served in order and the last one repeats.
#[derive(Debug, Default)]
pub struct FixtureChatClient {
    replies: Mutex<Vec<(String, VecDeque<String>)>>,
}

impl FixtureChatClient {
    pub fn new(replies: impl IntoIterator<Item = (String, Vec<String>)>) -> Self {
        Self {
            replies: Mutex::new(
                replies
                    .into_iter()
                    .map(|(k, v)| (k, v.into_iter().collect()))
                    .collect(),
            ),
        }
    }

    /// Loads `{"<substring>": ["reply", ...], ...}`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)?;
        Ok(Self::new(map))
    }
}

impl ChatClient for FixtureChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut replies = self
            .replies
            .lock()
            .map_err(|_| Error::ClientUnavailable("fixture lock poisoned".into()))?;
        for (key, queue) in replies.iter_mut() {
            if request.system.contains(key.as_str()) {
                return match queue.len() {
                    0 => Err(Error::ClientUnavailable(format!(
                        "no replies left for {key:?}"
                    ))),
                    1 => Ok(queue[0].clone()),
                    _ => Ok(queue.pop_front().expect("non-empty")),
                };
            }
        }
        Err(Error::ClientUnavailable(
            "no fixture matches the system prompt".into(),
        ))
    }
}

/// Offline chat client that answers every critique with a well-formed
/// suggestion list chosen deterministically from a per-role vocabulary.
#[derive(Debug, Clone)]
pub struct ScriptedChatClient {
    vocab: HashMap<&'static str, Vec<(&'static str, &'static str)>>,
}

impl Default for ScriptedChatClient {
    fn default() -> Self {
        let mut vocab = HashMap::new();
        vocab.insert(
            "Global Auditor",
            vec![
                (
                    "wall",
                    "add soft bounce light and subtle stains to the wall",
                ),
                ("floor", "add fine scratches and uneven gloss to the floor"),
                ("ceiling", "add soft shadows along the ceiling edges"),
            ],
        );
        vocab.insert(
            "Contextual Enricher",
            vec![
                ("table", "add wood grain and worn edges to the table"),
                ("sofa", "add fabric folds and creases to the sofa"),
                ("window", "add dust and reflections to the window"),
            ],
        );
        vocab.insert(
            "Local Refiner",
            vec![
                ("plant", "add a potted plant near the corner"),
                ("books", "add a stack of books on the shelf"),
                ("rug", "add a woven rug under the furniture"),
            ],
        );
        Self { vocab }
    }
}

impl ChatClient for ScriptedChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let (_, options) = self
            .vocab
            .iter()
            .find(|(k, _)| request.system.contains(*k))
            .ok_or_else(|| Error::ClientUnavailable("unknown agent role".into()))?;
        let mut hasher = Sha256::new();
        hasher.update(request.image_ref.as_bytes());
        let digest = hasher.finalize();
        let pick = (digest[0] as usize + request.history.len()) % options.len();
        let (target, instruction) = options[pick];
        Ok(serde_json::json!({
            "findings": format!("the {target} looks synthetic"),
            "suggestions": [{"target": target, "instruction": instruction}],
        })
        .to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbuffer::{assemble_condition, synthetic};

    fn condition() -> crate::gbuffer::ConditionTensor {
        assemble_condition(&synthetic::scene("m", 8, 8, 1), None).unwrap()
    }

    #[test]
    fn zero_mask_keeps_previous() {
        let c = condition();
        let prev = Image::from_fn(8, 8, 3, |x, y, ch| ((x + y + ch) % 5) as f64 / 5.0);
        let gen = MockGenerator::new(
            MockConfig {
                target_image: Image::filled(8, 8, 3, 1.0),
                contraction: 0.7,
                respect_mask: true,
            },
            Arc::new(IdentityCodec),
        )
        .unwrap();
        let z = Latent(prev.clone());
        let zero = Image::zeros(8, 8, 1);
        let out = gen
            .generate(&GenerateInput {
                latent: &z,
                step: 1,
                condition: &c,
                mask: Some(&zero),
                prompt: None,
            })
            .unwrap();
        assert_eq!(out, prev);
    }

    #[test]
    fn full_contraction_hits_target() {
        let c = condition();
        let target = Image::from_fn(8, 8, 3, |x, _, _| x as f64 / 8.0);
        let gen = MockGenerator::new(
            MockConfig {
                target_image: target.clone(),
                contraction: 1.0,
                respect_mask: true,
            },
            Arc::new(IdentityCodec),
        )
        .unwrap();
        let z = Latent(Image::filled(8, 8, 3, 0.3));
        let ones = Image::filled(8, 8, 1, 1.0);
        let out = gen
            .generate(&GenerateInput {
                latent: &z,
                step: 2,
                condition: &c,
                mask: Some(&ones),
                prompt: None,
            })
            .unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn half_contraction_from_zero_to_one() {
        let c = condition();
        let gen = MockGenerator::new(
            MockConfig {
                target_image: Image::filled(8, 8, 3, 1.0),
                contraction: 0.5,
                respect_mask: true,
            },
            Arc::new(IdentityCodec),
        )
        .unwrap();
        let z = Latent(Image::zeros(8, 8, 3));
        let ones = Image::filled(8, 8, 1, 1.0);
        let out = gen
            .generate(&GenerateInput {
                latent: &z,
                step: 1,
                condition: &c,
                mask: Some(&ones),
                prompt: None,
            })
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn contraction_out_of_range_rejected() {
        let cfg = MockConfig {
            target_image: Image::zeros(2, 2, 3),
            contraction: 0.0,
            respect_mask: true,
        };
        assert!(MockGenerator::new(cfg, Arc::new(IdentityCodec)).is_err());
    }

    #[test]
    fn identity_codec_round_trip_exact() {
        let img = Image::from_fn(6, 4, 3, |x, y, c| (x * y + c) as f64 / 30.0);
        let c = IdentityCodec;
        assert_eq!(c.decode(&c.encode(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn downsample_codec_zero_round_trip() {
        let c = DownsampleCodec;
        let z = Image::zeros(8, 6, 3);
        assert_eq!(c.decode(&c.encode(&z).unwrap()).unwrap(), z);
        assert!(c.encode(&Image::zeros(5, 4, 3)).is_err());
    }

    #[test]
    fn rect_segmenter_matches_head_noun() {
        let seg = RectSegmenter::new((4, 4)).with("car", Rect::new(1, 1, 3, 2));
        let m = seg.segment(&Image::zeros(4, 4, 3), "red car").unwrap();
        assert_eq!(m.sum(), 2.0);
        let none = seg.segment(&Image::zeros(4, 4, 3), "tree").unwrap();
        assert_eq!(none.sum(), 0.0);
    }

    #[test]
    fn fixture_chat_serves_in_order_then_repeats() {
        let client =
            FixtureChatClient::new([("Auditor".to_string(), vec!["a".into(), "b".into()])]);
        let req = ChatRequest {
            system: "You are the Global Auditor".into(),
            image_ref: "x".into(),
            history: vec![],
        };
        assert_eq!(client.complete(&req).unwrap(), "a");
        assert_eq!(client.complete(&req).unwrap(), "b");
        assert_eq!(client.complete(&req).unwrap(), "b");
    }
}
