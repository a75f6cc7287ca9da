//! Brute-force reference implementations used as test oracles. They follow
//! the textbook definitions directly and share no code with the crate.

#![allow(dead_code)]

use dtv_core::Image;

/// Mirror an out-of-range coordinate back into `[0, n)` by folding, with
/// the edge sample repeated (`c b a | a b c | c b a`).
pub fn mirror(mut i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i;
        }
    }
}

/// Threshold, then dilate by testing every pixel of the frame against the
/// disk `dx² + dy² ≤ r²`, then convolve with a dense 2-D Gaussian.
pub fn refine(raw: &Image, threshold: f64, r: usize, sigma: f64) -> Image {
    let (w, h) = raw.dims();
    let fg: Vec<bool> = raw.data().iter().map(|&v| v > threshold).collect();
    let r2 = (r * r) as i64;
    let mut dil = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit = false;
            for sy in 0..h as i64 {
                for sx in 0..w as i64 {
                    let (dx, dy) = (sx - x, sy - y);
                    if dx * dx + dy * dy <= r2 && fg[(sy * w as i64 + sx) as usize] {
                        hit = true;
                    }
                }
            }
            dil[(y * w as i64 + x) as usize] = if hit { 1.0 } else { 0.0 };
        }
    }
    if sigma <= 0.0 {
        return Image::from_vec(w, h, 1, dil).unwrap();
    }
    let rad = (4.0 * sigma).ceil() as i64;
    let mut kernel = Vec::new();
    let mut norm = 0.0;
    for ky in -rad..=rad {
        for kx in -rad..=rad {
            let v = (-((kx * kx + ky * ky) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push((kx, ky, v));
            norm += v;
        }
    }
    Image::from_fn(w, h, 1, |x, y, _| {
        let mut acc = 0.0;
        for &(kx, ky, v) in &kernel {
            let sx = mirror(x as i64 + kx, w as i64);
            let sy = mirror(y as i64 + ky, h as i64);
            acc += v * dil[(sy * w as i64 + sx) as usize];
        }
        (acc / norm).clamp(0.0, 1.0)
    })
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..a.channels() {
                let d = a.get(x, y, c) - b.get(x, y, c);
                se += d * d;
                n += 1;
            }
        }
    }
    let mse = se / n as f64;
    10.0 * (peak * peak / mse).log10()
}

fn luma(img: &Image, x: usize, y: usize) -> f64 {
    if img.channels() == 1 {
        img.get(x, y, 0)
    } else {
        0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
    }
}

/// Sliding-window SSIM: at each fully contained 11×11 window, weighted
/// moments from a dense Gaussian weight table, then the mean.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    const N: usize = 11;
    let sigma: f64 = 1.5;
    let mut wt = [[0.0f64; N]; N];
    let mut s = 0.0;
    for (j, row) in wt.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            s += *v;
        }
    }
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let (w, h) = a.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - N {
        for x0 in 0..=w - N {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, row) in wt.iter().enumerate() {
                for (i, w) in row.iter().enumerate() {
                    let k = w / s;
                    let pa = luma(a, x0 + i, y0 + j);
                    let pb = luma(b, x0 + i, y0 + j);
                    ma += k * pa;
                    mb += k * pb;
                    saa += k * pa * pa;
                    sbb += k * pb * pb;
                    sab += k * pa * pb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn kernel(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / a.len() as f64 + 1.0).powf(3.0)
}

/// Paired U-statistic MMD² for equal-size sets:
/// mean over ordered pairs `i ≠ j` of `h(zᵢ, zⱼ)`.
pub fn mmd2_paired(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            acc += kernel(&x[i], &x[j]) + kernel(&y[i], &y[j])
                - kernel(&x[i], &y[j])
                - kernel(&x[j], &y[i]);
            pairs += 1;
        }
    }
    acc / pairs as f64
}

/// General unbiased MMD² with a full cross term.
pub fn mmd2_general(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if i != j {
                    acc += kernel(a, b);
                    cnt += 1;
                }
            }
        }
        acc / cnt as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += kernel(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

/// `Σ M·mean_c|a − b| / Σ M`.
pub fn intensity(next: &Image, prev: &Image, mask: &Image) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..next.height() {
        for x in 0..next.width() {
            let m = mask.get(x, y, 0);
            let mut l1 = 0.0;
            for c in 0..next.channels() {
                l1 += (next.get(x, y, c) - prev.get(x, y, c)).abs();
            }
            num += m * l1 / next.channels() as f64;
            den += m;
        }
    }
    num / den
}

/// Deterministic high-frequency RGB texture.
pub fn textured(w: usize, h: usize, seed: u64) -> Image {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let noise: Vec<f64> = (0..w * h).map(|_| next()).collect();
    Image::from_fn(w, h, 3, |x, y, c| {
        let smooth = 0.5 + 0.25 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45 + c as f64).cos());
        (0.6 * smooth + 0.4 * noise[y * w + x]).clamp(0.0, 1.0)
    })
}
