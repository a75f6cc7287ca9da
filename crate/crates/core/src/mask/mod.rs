//! Prompt-grounded soft masks.
//!
//! An instruction is reduced to a target entity, segmented on the current
//! image into a raw probability map, then thresholded, dilated with a disk
//! and feathered with a Gaussian. A user-supplied region can stand in for
//! the segmentation output.

mod entity;
mod refine;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use self::entity::{
    extract_entity, Entity, EntityExtractor, LexiconParser, LinguisticParser, Parse, Pos, Token,
    ABSTRACT_NOUNS, COMMAND_VERBS, LEXICON_VERSION, NOUN_VERBS,
};
pub use self::refine::{
    binarize, dilate_disk, gaussian_blur, gaussian_kernel, reflect_index, GAUSSIAN_TRUNCATE,
};

use crate::backends::SegmentationBackend;
use crate::error::{Error, Result};
use crate::image::{write_image, Image, SampleFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Auto,
    User,
}

pub type MaskMode = MaskSource;

/// Raw probability map plus its refined soft mask and the parameters that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub raw: Image,
    pub refined: Image,
    pub source: MaskSource,
    pub threshold: f64,
    pub dilation_radius: usize,
    pub sigma: f64,
    pub entity: Option<String>,
}

impl SemanticMask {
    pub fn dims(&self) -> (usize, usize) {
        self.refined.dims()
    }

    /// Sum of refined weights.
    pub fn mass(&self) -> f64 {
        self.refined.sum()
    }

    pub fn sidecar(&self) -> MaskSidecar {
        MaskSidecar {
            source: self.source,
            threshold: self.threshold,
            dilation_radius: self.dilation_radius,
            sigma: self.sigma,
            entity: self.entity.clone(),
        }
    }

    /// Writes `<stem>.png` (8-bit refined mask) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_image(
            &self.refined,
            &dir.join(format!("{stem}.png")),
            SampleFormat::U8,
        )?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&self.sidecar())?)
            .map_err(|e| Error::io(&path, e))
    }
}

/// JSON record stored next to a persisted mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub source: MaskSource,
    #[serde(rename = "tau")]
    pub threshold: f64,
    #[serde(rename = "r")]
    pub dilation_radius: usize,
    pub sigma: f64,
    pub entity: Option<String>,
}

/// Parameters of mask resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub mode: MaskMode,
    pub threshold: f64,
    pub dilation_radius: usize,
    pub sigma: f64,
}

/// Resolution at which [`MaskParams::default`] radius applies.
pub const REFERENCE_RESOLUTION: usize = 512;

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            mode: MaskMode::Auto,
            threshold: 0.4,
            dilation_radius: 5,
            sigma: 3.0,
        }
    }
}

impl MaskParams {
    /// Defaults with the dilation radius scaled linearly from 512 px.
    pub fn for_resolution(width: usize, height: usize) -> Self {
        let side = width.min(height) as f64;
        let base = Self::default();
        Self {
            dilation_radius: (base.dilation_radius as f64 * side / REFERENCE_RESOLUTION as f64)
                .round() as usize,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "mask threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Binarizes `raw` at `threshold`, dilates with a disk of `dilation_radius`
/// and feathers with a Gaussian of width `sigma`.
pub fn refine_mask(
    raw: &Image,
    threshold: f64,
    dilation_radius: usize,
    sigma: f64,
) -> SemanticMask {
    let raw = to_single_channel(raw);
    let refined = refine::refine(&raw, threshold, dilation_radius, sigma);
    SemanticMask {
        raw,
        refined,
        source: MaskSource::Auto,
        threshold,
        dilation_radius,
        sigma,
        entity: None,
    }
}

fn to_single_channel(img: &Image) -> Image {
    match img.channels() {
        1 => img.clone(),
        3 => img.luminance(),
        _ => img.channel(0),
    }
}

/// Runs the segmentation backend for `entity` and resamples its map to the
/// image grid.
pub fn segment(image: &Image, entity: &Entity, backend: &dyn SegmentationBackend) -> Result<Image> {
    let map = backend.segment(image, &entity.text)?;
    if map.channels() != 1 {
        return Err(Error::Shape(format!(
            "segmentation map must be single-channel, got {}",
            map.channels()
        )));
    }
    if map.width() == 0 || map.height() == 0 || !map.is_finite() {
        return Err(Error::Shape(
            "segmentation map is empty or non-finite".into(),
        ));
    }
    Ok(map.resize_bilinear(image.width(), image.height()).clamp01())
}

/// What a mask request carries beyond the parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskRequest<'a> {
    pub prompt: Option<&'a str>,
    pub user_mask: Option<&'a Image>,
}

/// Produces a [`SemanticMask`] from either the user's region or the
/// extract → segment path, then refines it.
pub fn resolve_mask(
    params: &MaskParams,
    request: MaskRequest<'_>,
    image: &Image,
    extractor: &EntityExtractor,
    segmenter: Option<&dyn SegmentationBackend>,
) -> Result<SemanticMask> {
    let (raw, entity) = match params.mode {
        MaskMode::User => {
            let user = request.user_mask.ok_or(Error::MissingUserMask)?;
            if user.dims() != image.dims() {
                return Err(Error::dims(image.dims(), user.dims(), "user mask"));
            }
            (to_single_channel(user).clamp01(), None)
        }
        MaskMode::Auto => {
            let prompt = request.prompt.unwrap_or_default();
            let entity = extractor.extract(prompt)?;
            let backend = segmenter.ok_or_else(|| {
                Error::BackendUnavailable("no segmentation backend configured".into())
            })?;
            (segment(image, &entity, backend)?, Some(entity.text))
        }
    };
    let mut mask = refine_mask(&raw, params.threshold, params.dilation_radius, params.sigma);
    mask.source = params.mode;
    mask.entity = entity;
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{ConstantSegmenter, RectSegmenter};
    use crate::backends::Rect;

    #[test]
    fn zero_raw_gives_zero_refined() {
        let m = refine_mask(&Image::zeros(9, 9, 1), 0.4, 3, 1.5);
        assert_eq!(m.refined.max_abs(), 0.0);
    }

    #[test]
    fn refined_covers_thresholded_raw() {
        let raw = Image::from_fn(12, 12, 1, |x, y, _| ((x * 5 + y * 3) % 7) as f64 / 7.0);
        let m = refine_mask(&raw, 0.5, 1, 1.0);
        for (r, f) in raw.data().iter().zip(m.refined.data()) {
            if *r > 0.5 {
                assert!(*f > 0.0);
            }
            assert!((0.0..=1.0).contains(f));
        }
    }

    #[test]
    fn binary_identity_when_no_refinement() {
        let raw = Image::from_fn(8, 8, 1, |x, y, _| {
            ((2..5).contains(&x) && (1..6).contains(&y)) as u8 as f64
        });
        let m = refine_mask(&raw, 0.5, 0, 0.0);
        assert_eq!(m.refined, raw);
        let again = refine_mask(&m.refined, 0.5, 0, 0.0);
        assert_eq!(again.refined, m.refined);
    }

    #[test]
    fn user_mode_bypasses_segmentation() {
        let img = Image::zeros(10, 10, 3);
        let rect = Image::from_fn(10, 10, 1, |x, y, _| {
            ((3..7).contains(&x) && (2..5).contains(&y)) as u8 as f64
        });
        let params = MaskParams {
            mode: MaskMode::User,
            dilation_radius: 0,
            sigma: 0.0,
            ..Default::default()
        };
        let m = resolve_mask(
            &params,
            MaskRequest {
                prompt: None,
                user_mask: Some(&rect),
            },
            &img,
            &EntityExtractor::default(),
            None,
        )
        .unwrap();
        assert_eq!(m.refined, rect);
        assert_eq!(m.source, MaskSource::User);
    }

    #[test]
    fn user_mode_without_mask_errors() {
        let params = MaskParams {
            mode: MaskMode::User,
            ..Default::default()
        };
        let err = resolve_mask(
            &params,
            MaskRequest::default(),
            &Image::zeros(4, 4, 3),
            &EntityExtractor::default(),
            None,
        );
        assert!(matches!(err, Err(Error::MissingUserMask)));
    }

    #[test]
    fn auto_mode_abstract_prompt_errors() {
        let seg = ConstantSegmenter::new(0.9, (4, 4));
        let err = resolve_mask(
            &MaskParams::default(),
            MaskRequest {
                prompt: Some("enhance realism"),
                user_mask: None,
            },
            &Image::zeros(4, 4, 3),
            &EntityExtractor::default(),
            Some(&seg),
        );
        assert!(matches!(err, Err(Error::NoEntityFound { .. })));
    }

    #[test]
    fn auto_mode_contains_fixture_region() {
        let seg = RectSegmenter::new((16, 16)).with("car", Rect::new(4, 5, 9, 11));
        let params = MaskParams {
            dilation_radius: 2,
            sigma: 1.0,
            ..Default::default()
        };
        let img = Image::zeros(16, 16, 3);
        let m = resolve_mask(
            &params,
            MaskRequest {
                prompt: Some("add a car"),
                user_mask: None,
            },
            &img,
            &EntityExtractor::default(),
            Some(&seg),
        )
        .unwrap();
        assert_eq!(m.entity.as_deref(), Some("car"));
        assert_eq!(m.source, MaskSource::Auto);
        for y in 5..11 {
            for x in 4..9 {
                assert!(m.refined.get(x, y, 0) > 0.0);
            }
        }
    }

    #[test]
    fn constant_backend_gives_uniform_map() {
        let seg = ConstantSegmenter::new(0.5, (8, 8));
        let entity = extract_entity("wall").unwrap();
        let map = segment(&Image::zeros(32, 32, 3), &entity, &seg).unwrap();
        assert_eq!(map.dims(), (32, 32));
        assert!(map.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn radius_scales_with_resolution() {
        assert_eq!(MaskParams::for_resolution(512, 512).dilation_radius, 5);
        assert_eq!(MaskParams::for_resolution(1024, 1024).dilation_radius, 10);
        assert_eq!(MaskParams::for_resolution(256, 256).dilation_radius, 3);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = refine_mask(&Image::filled(4, 4, 1, 1.0), 0.4, 1, 0.0);
        m.entity = Some("wall".into());
        m.save(dir.path(), "mask_1").unwrap();
        let text = std::fs::read_to_string(dir.path().join("mask_1.json")).unwrap();
        let back: MaskSidecar = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m.sidecar());
        assert!(text.contains("\"tau\""));
    }
}
