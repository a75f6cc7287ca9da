//! Noise and drift rejection, and integer-shift alignment of pairs.

use serde::{Deserialize, Serialize};

use crate::backends::{cosine_similarity, Embedder};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Reject when the high-frequency energy ratio exceeds this.
    pub kappa_noise: f64,
    /// Reject when embedding cosine similarity falls below this.
    pub kappa_drift: f64,
    /// Added to both Laplacian variances so flat images do not blow up the ratio.
    pub noise_floor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            kappa_noise: 3.0,
            kappa_drift: 0.6,
            noise_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Noise,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

/// Verdict plus the measurements behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub verdict: Verdict,
    pub noise_ratio: f64,
    pub drift_similarity: Option<f64>,
    /// Set when the drift check could not run.
    pub drift_skipped: Option<String>,
    pub kappa_noise: f64,
    pub kappa_drift: f64,
}

/// Variance of the 4-neighbour Laplacian of luminance over interior pixels.
pub fn laplacian_variance(image: &Image) -> f64 {
    let lum = image.luminance();
    let (w, h) = lum.dims();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut values = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            values.push(
                lum.get(x - 1, y, 0)
                    + lum.get(x + 1, y, 0)
                    + lum.get(x, y - 1, 0)
                    + lum.get(x, y + 1, 0)
                    - 4.0 * lum.get(x, y, 0),
            );
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn noise_ratio(x_prev: &Image, x_next: &Image, floor: f64) -> f64 {
    (laplacian_variance(x_next) + floor) / (laplacian_variance(x_prev) + floor)
}

/// Keeps or rejects a pair. Noise is checked first. Without an embedder,
/// or if it fails with [`Error::EmbedderUnavailable`], the drift check is
/// skipped and the reason recorded.
pub fn filter_sample(
    x_prev: &Image,
    x_next: &Image,
    config: &FilterConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<FilterReport> {
    x_prev.ensure_same_shape(x_next, "filter pair")?;
    let ratio = noise_ratio(x_prev, x_next, config.noise_floor);
    let (similarity, skipped) = match embedder {
        None => (None, Some("no embedder configured".to_string())),
        Some(e) => match e
            .embed_image(x_prev)
            .and_then(|a| Ok((a, e.embed_image(x_next)?)))
        {
            Ok((a, b)) => (Some(cosine_similarity(&a, &b)?), None),
            Err(Error::EmbedderUnavailable(msg)) => {
                log::warn!("drift check skipped: {msg}");
                (None, Some(msg))
            }
            Err(e) => return Err(e),
        },
    };
    let verdict = if ratio > config.kappa_noise {
        Verdict::Reject(RejectReason::Noise)
    } else if similarity.is_some_and(|s| s < config.kappa_drift) {
        Verdict::Reject(RejectReason::Drift)
    } else {
        Verdict::Keep
    };
    Ok(FilterReport {
        verdict,
        noise_ratio: ratio,
        drift_similarity: similarity,
        drift_skipped: skipped,
        kappa_noise: config.kappa_noise,
        kappa_drift: config.kappa_drift,
    })
}

pub const DEFAULT_MAX_SHIFT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `x_next` moved back by `shift`.
    pub aligned: Image,
    /// Estimated displacement of `x_next` relative to `x_prev`, so that
    /// `x_next ≈ x_prev.translate(dx, dy)`.
    pub shift: (i64, i64),
    pub zncc: f64,
    /// Mean absolute luminance difference between the aligned image and
    /// `x_prev` over the compared interior.
    pub residual: f64,
}

fn zncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        ab += da * db;
        aa += da * da;
        bb += db * db;
    }
    if aa <= 1e-18 || bb <= 1e-18 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

/// Exhaustive integer-shift search over `[-S, S]²` maximizing zero-normalized
/// cross-correlation of luminance on the interior that stays in frame for
/// every candidate. Ties go to the shift closest to zero.
pub fn align_pair(x_prev: &Image, x_next: &Image, max_shift: usize) -> Result<Alignment> {
    x_prev.ensure_same_shape(x_next, "align pair")?;
    let (w, h) = x_prev.dims();
    let s = max_shift;
    if w <= 2 * s || h <= 2 * s {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            window: 2 * s + 1,
        });
    }
    let lp = x_prev.luminance();
    let ln = x_next.luminance();
    let region = |img: &Image, dx: i64, dy: i64| -> Vec<f64> {
        let mut v = Vec::with_capacity((w - 2 * s) * (h - 2 * s));
        for y in s..h - s {
            for x in s..w - s {
                v.push(img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize, 0));
            }
        }
        v
    };
    let reference = region(&lp, 0, 0);
    let si = s as i64;
    let mut best = ((0i64, 0i64), f64::NEG_INFINITY);
    let rank = |d: (i64, i64)| (d.0.abs().max(d.1.abs()), d.0.abs() + d.1.abs(), d.1, d.0);
    for dy in -si..=si {
        for dx in -si..=si {
            let score = zncc(&reference, &region(&ln, dx, dy));
            let better = score > best.1 + 1e-12
                || ((score - best.1).abs() <= 1e-12 && rank((dx, dy)) < rank(best.0));
            if better {
                best = ((dx, dy), score);
            }
        }
    }
    let (shift, score) = best;
    let aligned = x_next.translate(-shift.0, -shift.1);
    let la = region(&aligned.luminance(), 0, 0);
    let residual = la
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / la.len() as f64;
    Ok(Alignment {
        aligned,
        shift,
        zncc: score,
        residual,
    })
}
