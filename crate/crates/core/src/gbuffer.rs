//! Physical condition buffers: loading, validation, condition assembly and
//! Bernoulli channel dropout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_image, write_image, Image, SampleFormat};

/// Channels per buffer inside the condition tensor.
pub const CHANNELS_PER_BUFFER: usize = 3;
/// First mask channel inside the condition tensor.
pub const MASK_OFFSET: usize = 18;
/// Total channels of an assembled condition tensor.
pub const CONDITION_CHANNELS: usize = 21;
/// Default working resolution (square).
pub const DEFAULT_RESOLUTION: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    Albedo,
    Roughness,
    Metallic,
    Normal,
    Depth,
    Irradiance,
}

impl BufferKind {
    /// Fixed concatenation order of the condition tensor.
    pub const ALL: [BufferKind; 6] = [
        BufferKind::Albedo,
        BufferKind::Roughness,
        BufferKind::Metallic,
        BufferKind::Normal,
        BufferKind::Depth,
        BufferKind::Irradiance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BufferKind::Albedo => "albedo",
            BufferKind::Roughness => "roughness",
            BufferKind::Metallic => "metallic",
            BufferKind::Normal => "normal",
            BufferKind::Depth => "depth",
            BufferKind::Irradiance => "irradiance",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Channels stored in a [`GBufferSet`]; scalar buffers keep one channel.
    pub fn stored_channels(self) -> usize {
        match self {
            BufferKind::Roughness | BufferKind::Metallic | BufferKind::Depth => 1,
            _ => 3,
        }
    }

    /// Channel offset of this buffer inside the condition tensor.
    pub fn condition_offset(self) -> usize {
        self.index() * CHANNELS_PER_BUFFER
    }
}

impl fmt::Display for BufferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The six physical buffers for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct GBufferSet {
    scene_id: String,
    width: usize,
    height: usize,
    buffers: [Image; 6],
    present: [bool; 6],
    normal_valid: Vec<bool>,
}

impl GBufferSet {
    /// Builds a set from optional buffers; absent buffers are zero-filled
    /// and marked as not present.
    pub fn new(
        scene_id: impl Into<String>,
        width: usize,
        height: usize,
        buffers: [Option<Image>; 6],
    ) -> Result<Self> {
        let mut present = [false; 6];
        let mut out: Vec<Image> = Vec::with_capacity(6);
        for (kind, buf) in BufferKind::ALL.into_iter().zip(buffers) {
            match buf {
                Some(img) => {
                    if img.dims() != (width, height) {
                        return Err(Error::dims((width, height), img.dims(), kind.name()));
                    }
                    if img.channels() != kind.stored_channels() {
                        return Err(Error::Shape(format!(
                            "{kind} has {} channels, expected {}",
                            img.channels(),
                            kind.stored_channels()
                        )));
                    }
                    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        return Err(Error::Shape(format!("{kind} value {v} outside [0, 1]")));
                    }
                    present[kind.index()] = true;
                    out.push(img);
                }
                None => out.push(Image::zeros(width, height, kind.stored_channels())),
            }
        }
        let buffers: [Image; 6] = out.try_into().expect("six buffers");
        let normal_valid = if present[BufferKind::Normal.index()] {
            normal_validity(&buffers[BufferKind::Normal.index()])
        } else {
            vec![false; width * height]
        };
        Ok(Self {
            scene_id: scene_id.into(),
            width,
            height,
            buffers,
            present,
            normal_valid,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn buffer(&self, kind: BufferKind) -> &Image {
        &self.buffers[kind.index()]
    }

    pub fn is_present(&self, kind: BufferKind) -> bool {
        self.present[kind.index()]
    }

    pub fn presence(&self) -> [bool; 6] {
        self.present
    }

    /// Per-pixel flag: the decoded normal is a usable direction.
    pub fn normal_valid(&self) -> &[bool] {
        &self.normal_valid
    }

    /// Returns a copy with `kind` zero-filled and marked absent.
    pub fn without(&self, kind: BufferKind) -> Self {
        let mut out = self.clone();
        out.drop_buffer(kind);
        out
    }

    fn drop_buffer(&mut self, kind: BufferKind) {
        let i = kind.index();
        self.buffers[i] = Image::zeros(self.width, self.height, kind.stored_channels());
        self.present[i] = false;
        if kind == BufferKind::Normal {
            self.normal_valid.iter_mut().for_each(|v| *v = false);
        }
    }
}

/// Decoded normals with length in this band count as valid.
const NORMAL_VALID_BAND: (f64, f64) = (0.5, 1.5);

fn decoded_norm(p: &[f64]) -> f64 {
    p.iter()
        .map(|v| (2.0 * v - 1.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn normal_validity(normal: &Image) -> Vec<bool> {
    (0..normal.height())
        .flat_map(|y| (0..normal.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            let n = decoded_norm(normal.pixel(x, y));
            n >= NORMAL_VALID_BAND.0 && n <= NORMAL_VALID_BAND.1
        })
        .collect()
}

/// Renormalizes `[0, 1]`-encoded normals to unit length where the decoded
/// vector is plausibly a direction; other pixels are left untouched.
pub fn renormalize_encoded_normals(normal: &Image) -> Image {
    assert_eq!(normal.channels(), 3);
    let mut out = normal.clone();
    for y in 0..normal.height() {
        for x in 0..normal.width() {
            let p = normal.pixel(x, y);
            let len = decoded_norm(p);
            if len < NORMAL_VALID_BAND.0 || len > NORMAL_VALID_BAND.1 {
                continue;
            }
            for (c, v) in p.iter().enumerate() {
                let n = (2.0 * v - 1.0) / len;
                out.set(x, y, c, ((n + 1.0) * 0.5).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Maps each value to `[0, 1]` by per-view min-max; constant input maps to 0.
pub fn minmax_normalize(img: &Image) -> Image {
    let (lo, hi) = img.min_max();
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Image::zeros(img.width(), img.height(), img.channels());
    }
    let span = hi - lo;
    img.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Reinhard tone map `v / (1 + v)` applied to non-negative radiance.
pub fn reinhard(img: &Image) -> Image {
    img.map(|v| {
        let v = v.max(0.0);
        v / (1.0 + v)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tonemap {
    Reinhard,
    None,
}

/// A scene descriptor: buffer names mapped to paths relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub buffers: BTreeMap<String, PathBuf>,
    /// Tone map applied to irradiance on load. Defaults to Reinhard for EXR
    /// input and none for PNG input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irradiance_tonemap: Option<Tonemap>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: SceneManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        for name in manifest.buffers.keys() {
            if BufferKind::from_name(name).is_none() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    message: format!("unknown buffer `{name}`"),
                });
            }
        }
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    /// Builds a manifest from `<dir>/{albedo,...}.{exr,png}`; the directory
    /// name becomes the scene id.
    pub fn discover(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "scene directory not found"),
            ));
        }
        let scene_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".to_string());
        let mut buffers = BTreeMap::new();
        for kind in BufferKind::ALL {
            for ext in ["exr", "png"] {
                let file = format!("{}.{ext}", kind.name());
                if dir.join(&file).is_file() {
                    buffers.insert(kind.name().to_string(), PathBuf::from(file));
                    break;
                }
            }
        }
        Ok(Self {
            scene_id,
            buffers,
            irradiance_tonemap: None,
            base_dir: dir.to_path_buf(),
        })
    }

    /// Loads a manifest file, or discovers one when `path` is a directory.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let manifest = path.join("manifest.json");
            if manifest.is_file() {
                return Self::from_file(&manifest);
            }
            return Self::discover(path);
        }
        Self::from_file(path)
    }

    pub fn path_of(&self, kind: BufferKind) -> Option<PathBuf> {
        self.buffers.get(kind.name()).map(|p| self.base_dir.join(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Working resolution `(width, height)`; `None` keeps native size and
    /// requires all buffers to agree.
    pub resolution: Option<(usize, usize)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            resolution: Some((DEFAULT_RESOLUTION, DEFAULT_RESOLUTION)),
        }
    }
}

fn to_channels(img: Image, channels: usize) -> Image {
    match (img.channels(), channels) {
        (a, b) if a == b => img,
        (1, 3) => img.replicate(3),
        (_, 1) => img.channel(0),
        _ => img,
    }
}

fn normalize_buffer(kind: BufferKind, img: Image, format: SampleFormat, tonemap: Tonemap) -> Image {
    let img = to_channels(img, kind.stored_channels());
    match kind {
        BufferKind::Albedo | BufferKind::Roughness | BufferKind::Metallic => img.clamp01(),
        BufferKind::Normal => {
            let (lo, _) = img.min_max();
            if format == SampleFormat::F32 && lo < 0.0 {
                img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            } else {
                img.clamp01()
            }
        }
        BufferKind::Depth => minmax_normalize(&img),
        BufferKind::Irradiance => match tonemap {
            Tonemap::Reinhard => reinhard(&img),
            Tonemap::None => img.clamp01(),
        },
    }
}

/// Loads, normalizes and resizes the buffers named by `manifest`.
///
/// Missing files are not fatal: the buffer is zero-filled and recorded as
/// absent. Decode failures are.
pub fn load_gbuffer_set(manifest: &SceneManifest, opts: &LoadOptions) -> Result<GBufferSet> {
    let mut loaded: [Option<Image>; 6] = Default::default();
    let mut first_missing = None;
    for kind in BufferKind::ALL {
        let Some(path) = manifest.path_of(kind) else {
            warn!(
                "{}: no {kind} buffer listed, treating as dropped",
                manifest.scene_id
            );
            first_missing.get_or_insert((kind, manifest.base_dir.join(kind.name())));
            continue;
        };
        if !path.is_file() {
            warn!(
                "{}: {} missing, treating as dropped",
                manifest.scene_id,
                path.display()
            );
            first_missing.get_or_insert((kind, path));
            continue;
        }
        let (img, format) = read_image(&path)?;
        let tonemap = manifest.irradiance_tonemap.unwrap_or(match format {
            SampleFormat::F32 => Tonemap::Reinhard,
            _ => Tonemap::None,
        });
        let mut img = normalize_buffer(kind, img, format, tonemap);
        if let Some((w, h)) = opts.resolution {
            img = img.resize_bilinear(w, h);
        }
        match kind {
            BufferKind::Depth => img = minmax_normalize(&img),
            BufferKind::Normal => img = renormalize_encoded_normals(&img),
            _ => {}
        }
        loaded[kind.index()] = Some(img);
    }

    let dims = match opts.resolution {
        Some(d) => d,
        None => {
            let mut dims = None;
            for (kind, img) in BufferKind::ALL.iter().zip(&loaded) {
                if let Some(img) = img {
                    match dims {
                        None => dims = Some(img.dims()),
                        Some(d) if d != img.dims() => {
                            return Err(Error::dims(d, img.dims(), kind.name()))
                        }
                        _ => {}
                    }
                }
            }
            match (dims, first_missing) {
                (Some(d), _) => d,
                (None, Some((kind, path))) => {
                    return Err(Error::MissingBuffer {
                        name: kind.name().to_string(),
                        path,
                    })
                }
                (None, None) => unreachable!("six buffers are either loaded or missing"),
            }
        }
    };
    GBufferSet::new(manifest.scene_id.clone(), dims.0, dims.1, loaded)
}

/// Writes the set as 16-bit PNGs plus a `manifest.json` into `dir`.
/// Absent buffers are not written.
pub fn write_gbuffer_set(g: &GBufferSet, dir: &Path) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buffers = BTreeMap::new();
    for kind in BufferKind::ALL {
        if !g.is_present(kind) {
            continue;
        }
        let file = PathBuf::from(format!("{}.png", kind.name()));
        write_image(g.buffer(kind), &dir.join(&file), SampleFormat::U16)?;
        buffers.insert(kind.name().to_string(), file);
    }
    let manifest = SceneManifest {
        scene_id: g.scene_id().to_string(),
        buffers,
        irradiance_tonemap: Some(Tonemap::None),
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// One named span of the condition tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// The `H × W × 21` control signal: six buffers and the semantic mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTensor {
    data: Image,
    dropout_state: [bool; 6],
}

impl ConditionTensor {
    pub fn from_parts(data: Image, dropout_state: [bool; 6]) -> Result<Self> {
        if data.channels() != CONDITION_CHANNELS {
            return Err(Error::Shape(format!(
                "condition tensor needs {CONDITION_CHANNELS} channels, got {}",
                data.channels()
            )));
        }
        Ok(Self {
            data,
            dropout_state,
        })
    }

    pub fn data(&self) -> &Image {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dims()
    }

    pub fn dropout_state(&self) -> [bool; 6] {
        self.dropout_state
    }

    pub fn channel_layout() -> Vec<ChannelSpan> {
        BufferKind::ALL
            .iter()
            .map(|k| ChannelSpan {
                name: k.name().to_string(),
                start: k.condition_offset(),
                len: CHANNELS_PER_BUFFER,
            })
            .chain(std::iter::once(ChannelSpan {
                name: "mask".to_string(),
                start: MASK_OFFSET,
                len: 3,
            }))
            .collect()
    }

    /// Copy of the three channels belonging to `kind`.
    pub fn span(&self, kind: BufferKind) -> Image {
        self.data
            .channel_span(kind.condition_offset(), CHANNELS_PER_BUFFER)
    }

    pub fn mask_span(&self) -> Image {
        self.data.channel_span(MASK_OFFSET, 3)
    }

    /// Zeroes the spans of buffers whose flag is `false`.
    pub fn with_retention(&self, retained: [bool; 6]) -> Self {
        let mut data = self.data.clone();
        let n = CONDITION_CHANNELS;
        for kind in BufferKind::ALL {
            if retained[kind.index()] {
                continue;
            }
            let off = kind.condition_offset();
            for px in data.data_mut().chunks_exact_mut(n) {
                px[off..off + CHANNELS_PER_BUFFER].fill(0.0);
            }
        }
        let mut state = self.dropout_state;
        for (s, r) in state.iter_mut().zip(retained) {
            *s &= r;
        }
        Self {
            data,
            dropout_state: state,
        }
    }

    /// Replaces the mask channels (single- or three-channel mask).
    pub fn with_mask(&self, mask: Option<&Image>) -> Result<Self> {
        let mut data = self.data.clone();
        write_mask(&mut data, mask)?;
        Ok(Self {
            data,
            dropout_state: self.dropout_state,
        })
    }
}

fn write_mask(data: &mut Image, mask: Option<&Image>) -> Result<()> {
    let (w, h) = data.dims();
    let n = data.channels();
    match mask {
        None => {
            for px in data.data_mut().chunks_exact_mut(n) {
                px[MASK_OFFSET..MASK_OFFSET + 3].fill(0.0);
            }
        }
        Some(m) => {
            if m.dims() != (w, h) {
                return Err(Error::dims((w, h), m.dims(), "mask"));
            }
            let mc = m.channels();
            if mc != 1 && mc != 3 {
                return Err(Error::Shape(format!(
                    "mask must have 1 or 3 channels, got {mc}"
                )));
            }
            for (px, mp) in data
                .data_mut()
                .chunks_exact_mut(n)
                .zip(m.data().chunks_exact(mc))
            {
                for c in 0..3 {
                    px[MASK_OFFSET + c] = mp[if mc == 1 { 0 } else { c }];
                }
            }
        }
    }
    Ok(())
}

/// Concatenates the six buffers and the mask into a 21-channel tensor.
///
/// Scalar buffers are replicated across their three channels. A missing
/// mask encodes as zeros.
pub fn assemble_condition(g: &GBufferSet, mask: Option<&Image>) -> Result<ConditionTensor> {
    let (w, h) = g.dims();
    let mut data = Image::zeros(w, h, CONDITION_CHANNELS);
    for kind in BufferKind::ALL {
        let src = g.buffer(kind);
        let sc = src.channels();
        let off = kind.condition_offset();
        for (px, sp) in data
            .data_mut()
            .chunks_exact_mut(CONDITION_CHANNELS)
            .zip(src.data().chunks_exact(sc))
        {
            for c in 0..CHANNELS_PER_BUFFER {
                px[off + c] = sp[if sc == 1 { 0 } else { c }];
            }
        }
    }
    write_mask(&mut data, mask)?;
    Ok(ConditionTensor {
        data,
        dropout_state: g.presence(),
    })
}

/// Per-buffer retention probabilities for Bernoulli channel dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub retention: [f64; 6],
    pub seed: u64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self {
            retention: [0.8; 6],
            seed: 0,
        }
    }
}

impl DropoutSpec {
    pub fn uniform(p: f64, seed: u64) -> Self {
        Self {
            retention: [p; 6],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, p) in BufferKind::ALL.iter().zip(self.retention) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "retention probability for {kind} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Draws the six inclusion flags from the seeded source.
    ///
    /// All six draws are always consumed so the stream does not depend on
    /// buffer presence.
    pub fn draw(&self) -> [bool; 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = [false; 6];
        for (flag, &p) in out.iter_mut().zip(&self.retention) {
            *flag = rng.random_bool(p.clamp(0.0, 1.0));
        }
        out
    }
}

/// Retains each buffer independently with its probability and zero-fills
/// the rest. Absent buffers always report `false`.
pub fn apply_channel_dropout(g: &GBufferSet, spec: &DropoutSpec) -> (GBufferSet, [bool; 6]) {
    let mut drawn = spec.draw();
    let mut out = g.clone();
    for kind in BufferKind::ALL {
        let i = kind.index();
        drawn[i] &= g.is_present(kind);
        if !drawn[i] {
            out.drop_buffer(kind);
        }
    }
    (out, drawn)
}

pub mod synthetic {
    //! Procedural G-buffers for fixtures, demos and benchmarks.

    use super::*;

    fn hash01(mut v: u64) -> f64 {
        v ^= v >> 33;
        v = v.wrapping_mul(0xff51afd7ed558ccd);
        v ^= v >> 33;
        v = v.wrapping_mul(0xc4ceb9fe1a85ec53);
        v ^= v >> 33;
        (v >> 11) as f64 / (1u64 << 53) as f64
    }

    /// A deterministic indoor-ish scene: a floor, a wall and a box lit from
    /// the upper left.
    pub fn scene(scene_id: &str, width: usize, height: usize, seed: u64) -> GBufferSet {
        let base = [hash01(seed), hash01(seed ^ 0x9e37), hash01(seed ^ 0x7f4a)];
        let horizon = height as f64 * (0.45 + 0.1 * hash01(seed ^ 0x55));
        let bx0 = width as f64 * (0.25 + 0.2 * hash01(seed ^ 0x11));
        let bx1 = bx0 + width as f64 * 0.3;
        let by0 = horizon - height as f64 * 0.1;
        let by1 = by0 + height as f64 * 0.3;
        let region = |x: usize, y: usize| -> u8 {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if fx >= bx0 && fx < bx1 && fy >= by0 && fy < by1 {
                2
            } else if fy >= horizon {
                1
            } else {
                0
            }
        };
        let tex = |x: usize, y: usize| {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            0.08 * ((u * 23.0 + base[0] * 6.0).sin() * (v * 17.0 + base[1] * 6.0).cos())
        };
        let albedo = Image::from_fn(width, height, 3, |x, y, c| {
            let r = region(x, y);
            let tint = match r {
                0 => 0.55 + 0.3 * base[c],
                1 => 0.35 + 0.25 * base[(c + 1) % 3],
                _ => 0.2 + 0.5 * base[(c + 2) % 3],
            };
            (tint + tex(x, y)).clamp(0.0, 1.0)
        });
        let roughness = Image::from_fn(width, height, 1, |x, y, _| match region(x, y) {
            0 => 0.8,
            1 => 0.5 + 0.3 * (y as f64 / height as f64),
            _ => 0.3,
        });
        let metallic = Image::from_fn(
            width,
            height,
            1,
            |x, y, _| {
                if region(x, y) == 2 {
                    0.9
                } else {
                    0.0
                }
            },
        );
        let normal_of = |x: usize, y: usize| -> [f64; 3] {
            match region(x, y) {
                0 => [0.0, 0.0, 1.0],
                1 => [0.0, 1.0, 0.0],
                _ => {
                    let s = std::f64::consts::FRAC_1_SQRT_2;
                    [s, 0.0, s]
                }
            }
        };
        let normal = Image::from_fn(width, height, 3, |x, y, c| (normal_of(x, y)[c] + 1.0) * 0.5);
        let depth = Image::from_fn(width, height, 1, |x, y, _| match region(x, y) {
            0 => 10.0,
            1 => 2.0 + 8.0 * (1.0 - (y as f64 - horizon) / (height as f64 - horizon).max(1.0)),
            _ => 5.0 - (x as f64 / width as f64),
        });
        let light = {
            let l = [-0.4, 0.6, 0.7f64];
            let n = l.iter().map(|v| v * v).sum::<f64>().sqrt();
            [l[0] / n, l[1] / n, l[2] / n]
        };
        let irradiance = Image::from_fn(width, height, 3, |x, y, c| {
            let n = normal_of(x, y);
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            let radiance = 0.15 + 1.6 * lambert * [1.0, 0.95, 0.85][c];
            radiance / (1.0 + radiance)
        });
        GBufferSet::new(
            scene_id,
            width,
            height,
            [
                Some(albedo),
                Some(roughness),
                Some(metallic),
                Some(normal),
                Some(minmax_normalize(&depth)),
                Some(irradiance),
            ],
        )
        .expect("procedural buffers are in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GBufferSet {
        synthetic::scene("s", 16, 12, 3)
    }

    #[test]
    fn layout_is_fixed_and_complete() {
        let layout = ConditionTensor::channel_layout();
        let names: Vec<_> = layout.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "albedo",
                "roughness",
                "metallic",
                "normal",
                "depth",
                "irradiance",
                "mask"
            ]
        );
        let total: usize = layout.iter().map(|s| s.len).sum();
        assert_eq!(total, CONDITION_CHANNELS);
        for w in layout.windows(2) {
            assert_eq!(w[0].start + w[0].len, w[1].start);
        }
    }

    #[test]
    fn no_mask_gives_zero_mask_channels() {
        let c = assemble_condition(&small(), None).unwrap();
        assert_eq!(c.mask_span().max_abs(), 0.0);
    }

    #[test]
    fn scalar_buffers_replicate() {
        let g = small();
        let rough = Image::filled(16, 12, 1, 0.3);
        let mut bufs: [Option<Image>; 6] = Default::default();
        for k in BufferKind::ALL {
            bufs[k.index()] = Some(g.buffer(k).clone());
        }
        bufs[BufferKind::Roughness.index()] = Some(rough);
        let g = GBufferSet::new("s", 16, 12, bufs).unwrap();
        let c = assemble_condition(&g, None).unwrap();
        for px in c.data().data().chunks_exact(CONDITION_CHANNELS) {
            assert_eq!(&px[3..6], &[0.3, 0.3, 0.3]);
        }
    }

    #[test]
    fn mask_resolution_mismatch_is_rejected() {
        let mask = Image::zeros(8, 8, 1);
        assert!(matches!(
            assemble_condition(&small(), Some(&mask)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_channel_mask_fills_three_channels() {
        let mask = Image::from_fn(16, 12, 1, |x, _, _| (x % 2) as f64);
        let c = assemble_condition(&small(), Some(&mask)).unwrap();
        let m = c.mask_span();
        for y in 0..12 {
            for x in 0..16 {
                for ch in 0..3 {
                    assert_eq!(m.get(x, y, ch), (x % 2) as f64);
                }
            }
        }
    }

    #[test]
    fn dropout_extremes() {
        let g = small();
        let (kept, flags) = apply_channel_dropout(&g, &DropoutSpec::uniform(1.0, 9));
        assert_eq!(kept, g);
        assert_eq!(flags, [true; 6]);
        let (dropped, flags) = apply_channel_dropout(&g, &DropoutSpec::uniform(0.0, 9));
        assert_eq!(flags, [false; 6]);
        for k in BufferKind::ALL {
            assert_eq!(dropped.buffer(k).max_abs(), 0.0);
        }
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let g = small();
        let spec = DropoutSpec::uniform(0.5, 1234);
        assert_eq!(
            apply_channel_dropout(&g, &spec),
            apply_channel_dropout(&g, &spec)
        );
    }

    #[test]
    fn absent_buffers_never_report_retained() {
        let g = small().without(BufferKind::Irradiance);
        let (_, flags) = apply_channel_dropout(&g, &DropoutSpec::uniform(1.0, 0));
        assert!(!flags[BufferKind::Irradiance.index()]);
    }

    #[test]
    fn retention_rejects_out_of_range() {
        let mut spec = DropoutSpec::default();
        spec.retention[2] = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn minmax_maps_depth_range() {
        let d = Image::from_fn(5, 1, 1, |x, _, _| 2.0 + 2.0 * x as f64);
        let n = minmax_normalize(&d);
        assert_eq!(n.min_max(), (0.0, 1.0));
    }

    #[test]
    fn synthetic_normals_are_unit() {
        let g = small();
        let n = g.buffer(BufferKind::Normal);
        for (i, valid) in g.normal_valid().iter().enumerate() {
            assert!(valid);
            let p = &n.data()[i * 3..i * 3 + 3];
            assert!((decoded_norm(p) - 1.0).abs() < 1e-9);
        }
    }
}
