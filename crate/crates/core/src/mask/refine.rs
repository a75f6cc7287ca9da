//! Threshold, disk dilation and Gaussian feathering of probability maps.

use crate::image::Image;

/// Gaussian kernels are truncated at this many standard deviations.
pub const GAUSSIAN_TRUNCATE: f64 = 4.0;

/// `1.0` where `raw > threshold`, else `0.0`.
pub fn binarize(raw: &Image, threshold: f64) -> Image {
    raw.map(|v| if v > threshold { 1.0 } else { 0.0 })
}

/// Half-width of a radius-`r` disk at vertical offset `dy`.
pub(crate) fn disk_half_width(r: usize, dy: usize) -> usize {
    let r2 = (r * r) as i64;
    let d2 = (dy * dy) as i64;
    let mut w = ((r2 - d2).max(0) as f64).sqrt() as i64;
    while (w + 1) * (w + 1) + d2 <= r2 {
        w += 1;
    }
    while w > 0 && w * w + d2 > r2 {
        w -= 1;
    }
    w as usize
}

/// Dilates a single-channel image's support (values `> 0`) with the
/// Euclidean disk `dx² + dy² ≤ r²`. Pixels outside the frame are background.
pub fn dilate_disk(binary: &Image, r: usize) -> Image {
    assert_eq!(binary.channels(), 1);
    let (w, h) = binary.dims();
    if r == 0 {
        return binary.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    // Row prefix counts of foreground pixels.
    let mut prefix = vec![0u32; h * (w + 1)];
    for y in 0..h {
        let row = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
        for x in 0..w {
            row[x + 1] = row[x] + u32::from(binary.get(x, y, 0) > 0.0);
        }
    }
    let half: Vec<usize> = (0..=r).map(|dy| disk_half_width(r, dy)).collect();
    let mut out = Image::zeros(w, h, 1);
    for y in 0..h {
        let y_lo = y.saturating_sub(r);
        let y_hi = (y + r).min(h - 1);
        for x in 0..w {
            let hit = (y_lo..=y_hi).any(|sy| {
                let hw = half[sy.abs_diff(y)];
                let lo = x.saturating_sub(hw);
                let hi = (x + hw).min(w - 1);
                let row = &prefix[sy * (w + 1)..];
                row[hi + 1] > row[lo]
            });
            if hit {
                out.set(x, y, 0, 1.0);
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps for `sigma`, radius `ceil(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (GAUSSIAN_TRUNCATE * sigma).ceil() as usize;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) of an index into
/// `[0, n)`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflective borders. `sigma <= 0` is identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut tmp = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sx = reflect_index(x as i64 + j as i64 - radius, w);
                    acc += kv * img.get(sx, y, c);
                }
                tmp.set(x, y, c, acc);
            }
        }
    }
    let mut out = Image::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let sy = reflect_index(y as i64 + j as i64 - radius, h);
                    acc += kv * tmp.get(x, sy, c);
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Threshold → dilate → blur → clamp.
pub fn refine(raw: &Image, threshold: f64, dilation_radius: usize, sigma: f64) -> Image {
    let bin = binarize(raw, threshold);
    let dil = dilate_disk(&bin, dilation_radius);
    gaussian_blur(&dil, sigma).clamp01()
}
