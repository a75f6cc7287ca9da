//! Deterministic offline embedders and feature extractors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Embedder, FeatureExtractor};
use crate::error::Result;
use crate::image::Image;

/// Box-averages an image into a `grid × grid` RGB thumbnail and flattens it.
pub fn thumbnail(image: &Image, grid: usize) -> Vec<f64> {
    let (w, h) = image.dims();
    let ch = image.channels();
    let mut sums = vec![0.0; grid * grid * 3];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..h {
        let gy = y * grid / h;
        for x in 0..w {
            let gx = x * grid / w;
            let cell = gy * grid + gx;
            counts[cell] += 1;
            for c in 0..3 {
                sums[cell * 3 + c] += image.get(x, y, if ch == 1 { 0 } else { c });
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        if n > 0 {
            for c in 0..3 {
                sums[cell * 3 + c] /= n as f64;
            }
        }
    }
    sums
}

/// Hash-based joint embedder.
///
/// Images embed as a non-negative colour thumbnail; text embeds as a
/// bag of hashed tokens in the same number of dimensions. Both are
/// non-negative, so cosine similarities lie in `[0, 1]`. Useful as a
/// deterministic placeholder for a real image-text model.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    grid: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

impl HashEmbedder {
    pub fn new(grid: usize) -> Self {
        Self { grid }
    }

    pub fn dim(&self) -> usize {
        self.grid * self.grid * 3
    }
}

/// Bag-of-hashed-tokens vector of length `dim`, L2-normalized.
pub fn hash_text(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let digest = Sha256::digest(token.to_lowercase().as_bytes());
        for pair in digest.chunks_exact(4).take(4) {
            let idx = u16::from_le_bytes([pair[0], pair[1]]) as usize % dim;
            let w = 0.5 + pair[2] as f64 / 510.0;
            v[idx] += w;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl Embedder for HashEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(thumbnail(image, self.grid))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hash_text(text, self.dim()))
    }
}

/// Fixed Gaussian random projection of an image thumbnail.
#[derive(Debug, Clone)]
pub struct RandomProjectionFeatures {
    grid: usize,
    out_dim: usize,
    weights: Vec<f64>,
}

impl RandomProjectionFeatures {
    pub fn new(grid: usize, out_dim: usize, seed: u64) -> Self {
        let in_dim = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            grid,
            out_dim,
            weights,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

impl Default for RandomProjectionFeatures {
    fn default() -> Self {
        Self::new(8, 64, 0x5eed)
    }
}

impl FeatureExtractor for RandomProjectionFeatures {
    fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let t = thumbnail(image, self.grid);
        Ok((0..self.out_dim)
            .map(|o| {
                t.iter()
                    .enumerate()
                    .map(|(i, v)| v * self.weights[i * self.out_dim + o])
                    .sum()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::cosine_similarity;

    #[test]
    fn hash_text_is_deterministic_and_normalized() {
        let a = hash_text("a red car", 64);
        assert_eq!(a, hash_text("A red CAR", 64));
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_embedder_similarity_is_non_negative() {
        let e = HashEmbedder::default();
        let img = Image::from_fn(16, 16, 3, |x, y, c| ((x + 2 * y + c) % 9) as f64 / 9.0);
        let s = cosine_similarity(
            &e.embed_image(&img).unwrap(),
            &e.embed_text("wall").unwrap(),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn thumbnail_of_constant() {
        let t = thumbnail(&Image::filled(10, 7, 3, 0.4), 4);
        assert_eq!(t.len(), 48);
        assert!(t.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn projection_is_seeded() {
        let img = Image::from_fn(8, 8, 3, |x, _, _| x as f64 / 8.0);
        let a = RandomProjectionFeatures::new(4, 5, 1)
            .features(&img)
            .unwrap();
        let b = RandomProjectionFeatures::new(4, 5, 1)
            .features(&img)
            .unwrap();
        let c = RandomProjectionFeatures::new(4, 5, 2)
            .features(&img)
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
