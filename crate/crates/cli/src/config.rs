//! JSON run configuration, command-line overrides and backend wiring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use dtv_core::backends::adapter::{AdapterConfig, HttpGenerator, HttpSegmenter};
use dtv_core::backends::mock::{
    ConstantSegmenter, DownsampleCodec, EchoGenerator, FaultyGenerator, FixtureChatClient,
    IdentityCodec, MockConfig, MockGenerator, RectSegmenter, ScriptedChatClient,
};
use dtv_core::backends::{ChatClient, Codec, GenerativeBackend, Rect, SegmentationBackend};
use dtv_core::forge::ForgeConfig;
use dtv_core::gbuffer::synthetic;
use dtv_core::mask::MaskMode;
use dtv_core::metrics::KidOptions;
use dtv_core::{
    load_gbuffer_set, DropoutSpec, EngineConfig, Error, GBufferSet, Image, LoadOptions, Result,
    SceneManifest,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene manifest file, or a directory of `<buffer>.{exr,png}` files.
    pub scene: Option<PathBuf>,
    /// Procedural scene used when no manifest is given.
    pub synthetic: Option<SyntheticScene>,
    /// Working resolution `[width, height]`; native size when absent.
    pub resolution: Option<[usize; 2]>,
    /// Image to edit (`edit` only).
    pub input_image: Option<PathBuf>,
    /// User region; switches mask resolution to user mode.
    pub user_mask: Option<PathBuf>,
    pub prompt: Option<String>,
    pub prompt_mode: PromptMode,
    pub backend: BackendConfig,
    pub segmenter: SegmenterConfig,
    pub chat: ChatConfig,
    pub engine: EngineConfig,
    pub seed: u64,
    pub dropout: DropoutSpec,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            synthetic: None,
            resolution: None,
            input_image: None,
            user_mask: None,
            prompt: None,
            prompt_mode: PromptMode::Static,
            backend: BackendConfig::default(),
            segmenter: SegmenterConfig::default(),
            chat: ChatConfig::default(),
            engine: EngineConfig::default(),
            seed: 0,
            dropout: DropoutSpec::uniform(1.0, 0),
            out: None,
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SyntheticScene {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            width: 64,
            height: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// The configured prompt at every step.
    #[default]
    Static,
    /// A fresh multi-agent critique of the current image at every step.
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Contracting mock toward a procedural target.
    #[default]
    Mock,
    /// Fixed point after synthesis.
    Echo,
    /// Contracting mock that emits NaN from `fail_at_step` on.
    Nan,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    #[default]
    Identity,
    Downsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub contraction: f64,
    pub respect_mask: bool,
    pub fail_at_step: usize,
    pub codec: CodecKind,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            contraction: 0.5,
            respect_mask: true,
            fail_at_step: 2,
            codec: CodecKind::Identity,
            timeout_ms: 120_000,
            retries: 3,
        }
    }
}

impl BackendConfig {
    fn adapter(&self, endpoint: &str) -> AdapterConfig {
        let mut a = AdapterConfig::new(endpoint);
        a.timeout = Duration::from_millis(self.timeout_ms);
        a.retries = self.retries;
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    /// Rectangles per entity, falling back to the central half of the frame.
    #[default]
    Rect,
    Constant,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    /// Entity rectangles in working-resolution pixels.
    pub rects: BTreeMap<String, Rect>,
    pub fallback: Option<Rect>,
    pub value: f64,
    pub endpoint: Option<String>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            kind: SegmenterKind::Rect,
            rects: BTreeMap::new(),
            fallback: None,
            value: 1.0,
            endpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatKind {
    #[default]
    Scripted,
    /// Recorded replies from a JSON file.
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub kind: ChatKind,
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: Vec<PathBuf>,
    /// Number of procedural scenes derived from `synthetic` when `scenes`
    /// is empty.
    pub synthetic_count: usize,
    pub forge: ForgeConfig,
    /// Contraction of the mock editor toward each scene's target.
    pub editor_contraction: f64,
    /// Reject pairs on embedding drift as well as noise.
    pub drift_check: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            synthetic_count: 3,
            forge: ForgeConfig::default(),
            editor_contraction: 0.5,
            drift_check: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Run directories, or parents of run directories.
    pub runs: Vec<PathBuf>,
    /// Directory of real photographs for KID.
    pub reference: Option<PathBuf>,
    pub embed_grid: usize,
    pub kid: KidOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: Vec::new(),
            reference: None,
            embed_grid: 8,
            kid: KidOptions::default(),
        }
    }
}

/// Values given on the command line; each one overrides the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub max_steps: Option<usize>,
    pub tau_stop: Option<f64>,
    pub mask: Option<PathBuf>,
    pub prompt: Option<String>,
    pub workers: Option<usize>,
    pub scene: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub agent: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: Overrides) -> Result<()> {
        if let Some(v) = o.out {
            self.out = Some(v);
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(b) = o.backend {
            match b.as_str() {
                "mock" => self.backend.kind = BackendKind::Mock,
                "echo" => self.backend.kind = BackendKind::Echo,
                "nan" => self.backend.kind = BackendKind::Nan,
                url if url.starts_with("http://") => {
                    self.backend.kind = BackendKind::Http;
                    self.backend.endpoint = Some(url.to_string());
                }
                other => {
                    return Err(Error::Config(format!(
                    "unknown backend `{other}` (expected mock, echo, nan or an http:// endpoint)"
                )))
                }
            }
        }
        if let Some(v) = o.max_steps {
            self.engine.max_steps = v;
            self.dataset.forge.steps = v;
        }
        if let Some(v) = o.tau_stop {
            self.engine.tau_stop = v;
        }
        if let Some(v) = o.mask {
            self.user_mask = Some(v);
        }
        if self.user_mask.is_some() {
            self.engine.mask.mode = MaskMode::User;
        }
        if let Some(v) = o.prompt {
            self.prompt = Some(v);
        }
        if let Some(v) = o.workers {
            self.dataset.forge.workers = v;
        }
        if let Some(v) = o.scene {
            self.scene = Some(v);
        }
        if let Some(v) = o.input {
            self.input_image = Some(v);
        }
        if o.agent {
            self.prompt_mode = PromptMode::Agent;
        }
        Ok(())
    }

    /// Checks ranges and referenced paths. Never contacts a backend.
    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.dropout.validate()?;
        self.dataset.forge.validate()?;
        let b = &self.backend;
        if !(b.contraction > 0.0 && b.contraction <= 1.0) {
            return Err(Error::Config(format!(
                "backend.contraction must lie in (0, 1], got {}",
                b.contraction
            )));
        }
        if b.kind == BackendKind::Http {
            check_endpoint("backend.endpoint", b.endpoint.as_deref())?;
        }
        if b.timeout_ms == 0 {
            return Err(Error::Config("backend.timeout_ms must be positive".into()));
        }
        if self.segmenter.kind == SegmenterKind::Http {
            check_endpoint("segmenter.endpoint", self.segmenter.endpoint.as_deref())?;
        }
        if !(0.0..=1.0).contains(&self.segmenter.value) {
            return Err(Error::Config(format!(
                "segmenter.value must lie in [0, 1], got {}",
                self.segmenter.value
            )));
        }
        if self.chat.kind == ChatKind::Fixture {
            match &self.chat.fixture {
                Some(p) => require_path(p)?,
                None => {
                    return Err(Error::Config(
                        "chat.fixture is required for fixture chat".into(),
                    ))
                }
            }
        }
        if let Some(s) = &self.synthetic {
            if s.width < 8 || s.height < 8 {
                return Err(Error::Config(
                    "synthetic scenes must be at least 8x8".into(),
                ));
            }
        }
        if let Some([w, h]) = self.resolution {
            if w == 0 || h == 0 {
                return Err(Error::Config("resolution must be positive".into()));
            }
        }
        if !(self.dataset.editor_contraction > 0.0 && self.dataset.editor_contraction <= 1.0) {
            return Err(Error::Config(
                "dataset.editor_contraction must lie in (0, 1]".into(),
            ));
        }
        if self.eval.embed_grid == 0 {
            return Err(Error::Config("eval.embed_grid must be positive".into()));
        }
        for p in self
            .scene
            .iter()
            .chain(&self.input_image)
            .chain(&self.user_mask)
            .chain(&self.dataset.scenes)
            .chain(&self.eval.runs)
            .chain(&self.eval.reference)
        {
            require_path(p)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))
    }

    /// Writes the resolved configuration as `config.resolved.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            resolution: self.resolution.map(|[w, h]| (w, h)),
        }
    }

    /// G-buffers of the configured scene.
    pub fn gbuffers(&self) -> Result<GBufferSet> {
        match (&self.scene, &self.synthetic) {
            (Some(path), _) => load_scene(path, &self.load_options()),
            (None, Some(s)) => Ok(synthetic::scene(&s.id, s.width, s.height, s.seed)),
            (None, None) => Err(Error::Config(
                "no scene: pass --scene or set `scene` or `synthetic`".into(),
            )),
        }
    }

    /// Scenes for a dataset build.
    pub fn dataset_scenes(&self) -> Result<Vec<GBufferSet>> {
        if !self.dataset.scenes.is_empty() {
            return self
                .dataset
                .scenes
                .iter()
                .map(|p| load_scene(p, &self.load_options()))
                .collect();
        }
        let base = self.synthetic.clone().unwrap_or_default();
        Ok((0..self.dataset.synthetic_count)
            .map(|i| {
                synthetic::scene(
                    &format!("{}_{i:03}", base.id),
                    base.width,
                    base.height,
                    base.seed.wrapping_add(i as u64),
                )
            })
            .collect())
    }

    pub fn codec(&self) -> Arc<dyn Codec> {
        match self.backend.codec {
            CodecKind::Identity => Arc::new(IdentityCodec),
            CodecKind::Downsample => Arc::new(DownsampleCodec),
        }
    }

    /// The generative backend. `target` is the mock's destination image.
    pub fn generator(
        &self,
        codec: Arc<dyn Codec>,
        target: Image,
    ) -> Result<Box<dyn GenerativeBackend>> {
        let b = &self.backend;
        let mock = || {
            MockGenerator::new(
                MockConfig {
                    target_image: target.clone(),
                    contraction: b.contraction,
                    respect_mask: b.respect_mask,
                },
                codec.clone(),
            )
        };
        Ok(match b.kind {
            BackendKind::Mock => Box::new(mock()?),
            BackendKind::Echo => Box::new(EchoGenerator::new(codec.clone())),
            BackendKind::Nan => Box::new(FaultyGenerator {
                inner: mock()?,
                fail_at_step: b.fail_at_step,
            }),
            BackendKind::Http => {
                let endpoint = b.endpoint.as_deref().unwrap_or_default();
                Box::new(HttpGenerator::new(b.adapter(endpoint)))
            }
        })
    }

    /// The segmentation backend for images of `dims`.
    pub fn segmentation(&self, dims: (usize, usize)) -> Box<dyn SegmentationBackend> {
        let s = &self.segmenter;
        match s.kind {
            SegmenterKind::Rect => {
                let (w, h) = dims;
                let fallback = s
                    .fallback
                    .unwrap_or(Rect::new(w / 4, h / 4, w - w / 4, h - h / 4));
                let seg = s
                    .rects
                    .iter()
                    .fold(RectSegmenter::new(dims), |seg, (entity, r)| {
                        seg.with(entity, *r)
                    });
                Box::new(seg.with_fallback(fallback))
            }
            SegmenterKind::Constant => Box::new(ConstantSegmenter::new(s.value, dims)),
            SegmenterKind::Http => {
                let endpoint = s.endpoint.as_deref().unwrap_or_default();
                Box::new(HttpSegmenter::new(self.backend.adapter(endpoint)))
            }
        }
    }

    pub fn chat_client(&self) -> Result<Box<dyn ChatClient>> {
        Ok(match self.chat.kind {
            ChatKind::Scripted => Box::new(ScriptedChatClient::default()),
            ChatKind::Fixture => {
                let path = self.chat.fixture.as_deref().unwrap_or(Path::new(""));
                Box::new(FixtureChatClient::from_json_file(path)?)
            }
        })
    }
}

fn load_scene(path: &Path, opts: &LoadOptions) -> Result<GBufferSet> {
    load_gbuffer_set(&SceneManifest::open(path)?, opts)
}

fn check_endpoint(field: &str, endpoint: Option<&str>) -> Result<()> {
    match endpoint {
        Some(e) if e.starts_with("http://") => Ok(()),
        Some(e) => Err(Error::Config(format!(
            "{field} must be an http:// URL, got `{e}`"
        ))),
        None => Err(Error::Config(format!(
            "{field} is required for http backends"
        ))),
    }
}

fn require_path(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}
