//! Image quality, text alignment and distribution metrics.

pub mod report;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{evaluate_run, evaluate_runs, EvalOptions, EvalRecord, EvalReport, EvalSummary};

use crate::backends::{cosine_similarity, Embedder, Rect};
use crate::engine::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::image::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalized 1-D Gaussian window of odd length `n`.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let w: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn luma_plane(img: &Image) -> Image {
    if img.channels() == 1 {
        img.clone()
    } else {
        img.luminance()
    }
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM on luminance with a Gaussian window, over positions where the
/// window lies fully inside the image.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (w, h) = a.dims();
    if w < params.window || h < params.window {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            window: params.window,
        });
    }
    let la = luma_plane(a);
    let lb = luma_plane(b);
    let k = gaussian_window(params.window, params.sigma);
    let (pa, pb) = (la.data(), lb.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect()
    };
    let (mu_a, ow, oh) = filter_valid(pa, w, h, &k);
    let (mu_b, _, _) = filter_valid(pb, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Bounding box of `mask > 0`, or `None` if the mask is empty.
pub fn mask_bbox(mask: &Image) -> Option<Rect> {
    let (w, h) = mask.dims();
    let mut r: Option<Rect> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) > 0.0 {
                r = Some(match r {
                    None => Rect::new(x, y, x + 1, y + 1),
                    Some(r) => {
                        Rect::new(r.x0.min(x), r.y0.min(y), r.x1.max(x + 1), r.y1.max(y + 1))
                    }
                });
            }
        }
    }
    r
}

/// Grows `r` by `fraction` of its size in total, half on each side
/// (rounded up), clamped to the image.
pub fn expand_rect(r: Rect, fraction: f64, width: usize, height: usize) -> Rect {
    let pad_x = (0.5 * fraction * (r.x1 - r.x0) as f64).ceil() as usize;
    let pad_y = (0.5 * fraction * (r.y1 - r.y0) as f64).ceil() as usize;
    Rect::new(
        r.x0.saturating_sub(pad_x),
        r.y0.saturating_sub(pad_y),
        (r.x1 + pad_x).min(width),
        (r.y1 + pad_y).min(height),
    )
}

pub const LOCAL_CROP_EXPANSION: f64 = 0.10;

/// Crop used by [`local_clip`]: the mask's support box grown by 10%.
pub fn local_crop_rect(mask: &Image) -> Result<Rect> {
    let r = mask_bbox(mask).ok_or(Error::ZeroMask)?;
    Ok(expand_rect(
        r,
        LOCAL_CROP_EXPANSION,
        mask.width(),
        mask.height(),
    ))
}

pub fn global_clip(image: &Image, prompt: &str, embedder: &dyn Embedder) -> Result<f64> {
    cosine_similarity(&embedder.embed_image(image)?, &embedder.embed_text(prompt)?)
}

pub fn local_clip(
    image: &Image,
    mask: &Image,
    prompt: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    if mask.dims() != image.dims() {
        return Err(Error::dims(image.dims(), mask.dims(), "local clip mask"));
    }
    let r = local_crop_rect(mask)?;
    global_clip(&image.crop(r.x0, r.y0, r.x1, r.y1), prompt, embedder)
}

/// Increase in global alignment from `source` to `output`.
pub fn delta_clip(
    source: &Image,
    output: &Image,
    prompt: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    Ok(global_clip(output, prompt, embedder)? - global_clip(source, prompt, embedder)?)
}

/// Cosine between the image-embedding change and the caption-embedding change.
pub fn directional_clip(
    source: &Image,
    output: &Image,
    source_caption: &str,
    target_caption: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let di: Vec<f64> = embedder
        .embed_image(output)?
        .iter()
        .zip(embedder.embed_image(source)?)
        .map(|(o, s)| o - s)
        .collect();
    let dt: Vec<f64> = embedder
        .embed_text(target_caption)?
        .iter()
        .zip(embedder.embed_text(source_caption)?)
        .map(|(t, s)| t - s)
        .collect();
    cosine_similarity(&di, &dt)
}

/// Harmonic mean `2ab / (a + b)` of SSIM and local CLIP.
pub fn q_score(ssim: f64, local_clip: f64) -> Result<f64> {
    for v in [ssim, local_clip] {
        if v.is_nan() || v <= 0.0 {
            return Err(Error::NonPositiveInput(v));
        }
    }
    Ok(2.0 * ssim * local_clip / (ssim + local_clip))
}

/// Per-sample Q-Scores averaged over a set.
pub fn mean_q_score(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut s = 0.0;
    for &(a, b) in pairs {
        s += q_score(a, b)?;
    }
    Ok(s / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KidOptions {
    pub degree: i32,
    /// Kernel scale; `None` means `1 / dim`.
    pub gamma: Option<f64>,
    pub coef0: f64,
    /// Subset size; `None` or anything ≥ the smaller set uses all vectors once.
    pub subset_size: Option<usize>,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for KidOptions {
    fn default() -> Self {
        Self {
            degree: 3,
            gamma: None,
            coef0: 1.0,
            subset_size: None,
            subsets: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
    pub subsets: usize,
}

fn poly_kernel(a: &[f64], b: &[f64], gamma: f64, coef0: f64, degree: i32) -> f64 {
    (gamma * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() + coef0).powi(degree)
}

/// Unbiased MMD² between two sets under the polynomial kernel.
///
/// Equal-size sets use the paired U-statistic
/// `1/(n(n−1)) Σ_{i≠j} [k(xᵢ,xⱼ) + k(yᵢ,yⱼ) − k(xᵢ,yⱼ) − k(xⱼ,yᵢ)]`, which is
/// exactly zero when the sets coincide element for element. Unequal sizes
/// use the general unbiased estimator with the full cross term.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], opts: &KidOptions) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: m.min(n),
        });
    }
    let d = x[0].len();
    if x.iter().chain(y).any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let gamma = opts.gamma.unwrap_or(1.0 / d.max(1) as f64);
    let k = |a: &[f64], b: &[f64]| poly_kernel(a, b, gamma, opts.coef0, opts.degree);
    let off_diag = |s: &[Vec<f64>]| -> f64 {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t
    };
    if m == n {
        let mut cross = 0.0;
        for (i, a) in x.iter().enumerate() {
            for (j, b) in y.iter().enumerate() {
                if i != j {
                    cross += k(a, b);
                }
            }
        }
        let norm = (m * (m - 1)) as f64;
        return Ok((off_diag(x) + off_diag(y) - 2.0 * cross) / norm);
    }
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    Ok(
        off_diag(x) / (m * (m - 1)) as f64 + off_diag(y) / (n * (n - 1)) as f64
            - 2.0 * cross / (m * n) as f64,
    )
}

/// Kernel Inception Distance: [`mmd2_unbiased`] on the full sets, or
/// averaged over random equal-size subsets when `subset_size` is smaller
/// than both sets.
pub fn kid(real: &[Vec<f64>], generated: &[Vec<f64>], opts: &KidOptions) -> Result<KidEstimate> {
    let smaller = real.len().min(generated.len());
    match opts.subset_size {
        Some(s) if s < smaller && opts.subsets > 0 => {
            if s < 2 {
                return Err(Error::TooFewSamples { needed: 2, got: s });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut values = Vec::with_capacity(opts.subsets);
            for _ in 0..opts.subsets {
                let xi = sample(&mut rng, real.len(), s);
                let yi = sample(&mut rng, generated.len(), s);
                let xs: Vec<Vec<f64>> = xi.iter().map(|i| real[i].clone()).collect();
                let ys: Vec<Vec<f64>> = yi.iter().map(|i| generated[i].clone()).collect();
                values.push(mmd2_unbiased(&xs, &ys, opts)?);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
            Ok(KidEstimate {
                mean,
                std: var.sqrt(),
                subsets: values.len(),
            })
        }
        _ => Ok(KidEstimate {
            mean: mmd2_unbiased(real, generated, opts)?,
            std: 0.0,
            subsets: 1,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurve {
    /// Intensity of each evolution step, starting at step 1.
    pub series: Vec<f64>,
    /// First evolution step whose intensity is below `tau_stop`.
    pub converged_at: Option<usize>,
}

/// `intensities[0]` belongs to the synthesis step and is not part of the curve.
pub fn curve_from_intensities(intensities: &[f64], tau_stop: f64) -> ConvergenceCurve {
    let series: Vec<f64> = intensities.iter().skip(1).copied().collect();
    let converged_at = series.iter().position(|&v| v < tau_stop).map(|i| i + 1);
    ConvergenceCurve {
        series,
        converged_at,
    }
}

pub fn convergence_curve(record: &TrajectoryRecord) -> ConvergenceCurve {
    curve_from_intensities(&record.intensities, record.config.tau_stop)
}
