//! Dense floating-point raster used throughout the pipeline.
//!
//! Pixels are stored interleaved (`H × W × C`, row-major) as `f64`. Channel
//! counts are arbitrary: 1 for masks, 3 for colour buffers, 21 for the
//! assembled condition tensor.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn ensure_same_shape(&self, other: &Image, context: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(self.dims(), other.dims(), context));
        }
        if self.channels != other.channels {
            return Err(Error::Shape(format!(
                "{context}: channel count {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn channel(&self, c: usize) -> Image {
        assert!(c < self.channels, "channel {c} out of range");
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Repeats a single-channel image `n` times along the channel axis.
    pub fn replicate(&self, n: usize) -> Image {
        assert_eq!(self.channels, 1, "replicate expects a single-channel image");
        let mut data = Vec::with_capacity(self.data.len() * n);
        for &v in &self.data {
            data.extend(std::iter::repeat_n(v, n));
        }
        Image {
            width: self.width,
            height: self.height,
            channels: n,
            data,
        }
    }

    /// Luminance of an RGB image (single channel images are returned as-is).
    pub fn luminance(&self) -> Image {
        match self.channels {
            1 => self.clone(),
            3 => Image {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self
                    .data
                    .chunks_exact(3)
                    .map(|p| {
                        LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]
                    })
                    .collect(),
            },
            n => panic!("luminance undefined for {n} channels"),
        }
    }

    /// Bilinear resampling with pixel-centre alignment and clamped borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::zeros(width, height, self.channels);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - wx) + self.get(x1, y0, c) * wx;
                    let bot = self.get(x0, y1, c) * (1.0 - wx) + self.get(x1, y1, c) * wx;
                    out.set(x, y, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    /// Translates content by `(dx, dy)`: `out(x, y) = self(x - dx, y - dy)`,
    /// replicating edge pixels where the source falls outside the frame.
    pub fn translate(&self, dx: i64, dy: i64) -> Image {
        let w = self.width as i64;
        let h = self.height as i64;
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            let sx = (x as i64 - dx).clamp(0, w - 1) as usize;
            let sy = (y as i64 - dy).clamp(0, h - 1) as usize;
            self.get(sx, sy, c)
        })
    }

    /// Copies channels `[start, start + n)` into a new image.
    pub fn channel_span(&self, start: usize, n: usize) -> Image {
        assert!(start + n <= self.channels);
        let mut data = Vec::with_capacity(self.pixel_count() * n);
        for p in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&p[start..start + n]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: n,
            data,
        }
    }

    /// Crops the half-open rectangle `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        assert!(x0 < x1 && x1 <= self.width && y0 < y1 && y1 <= self.height);
        Image::from_fn(x1 - x0, y1 - y0, self.channels, |x, y, c| {
            self.get(x0 + x, y0 + y, c)
        })
    }
}

/// Sample encoding of an image file on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    U8,
    U16,
    F32,
}

impl SampleFormat {
    /// Half of one quantization step in normalized units (zero for float).
    pub fn half_step(self) -> f64 {
        match self {
            SampleFormat::U8 => 0.5 / 255.0,
            SampleFormat::U16 => 0.5 / 65535.0,
            SampleFormat::F32 => 0.0,
        }
    }
}

fn from_dynamic(img: DynamicImage) -> (Image, SampleFormat) {
    use DynamicImage as D;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = match img.color().channel_count() {
        1 | 2 => 1,
        _ => 3,
    };
    let sample = match &img {
        D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageRgb8(_) | D::ImageRgba8(_) => {
            SampleFormat::U8
        }
        D::ImageLuma16(_) | D::ImageLumaA16(_) | D::ImageRgb16(_) | D::ImageRgba16(_) => {
            SampleFormat::U16
        }
        _ => SampleFormat::F32,
    };
    let data: Vec<f64> = match (channels, sample) {
        (1, SampleFormat::U8) => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        (1, SampleFormat::U16) => img
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        (1, SampleFormat::F32) => img
            .to_luma32f()
            .into_raw()
            .into_iter()
            .map(f64::from)
            .collect(),
        (_, SampleFormat::U8) => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        (_, SampleFormat::U16) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        (_, SampleFormat::F32) => img
            .to_rgb32f()
            .into_raw()
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    (
        Image {
            width: w,
            height: h,
            channels,
            data,
        },
        sample,
    )
}

/// Reads a PNG or EXR file into a normalized image.
///
/// Integer formats are scaled to `[0, 1]`; float formats are returned as stored.
/// Alpha channels are dropped.
pub fn read_image(path: &Path) -> Result<(Image, SampleFormat)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(from_dynamic(img))
}

/// Decodes PNG bytes (used by the wire protocol).
pub fn decode_png(bytes: &[u8]) -> Result<(Image, SampleFormat)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Decode {
            path: "<memory>".into(),
            message: e.to_string(),
        }
    })?;
    Ok(from_dynamic(img))
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn to_dynamic(img: &Image, format: SampleFormat) -> Result<DynamicImage> {
    let (w, h) = (img.width as u32, img.height as u32);
    let bad = || Error::Shape(format!("cannot encode {} channels", img.channels));
    let out = match (img.channels, format) {
        (1, SampleFormat::U8) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect(),
            )
            .ok_or_else(bad)?,
        ),
        (1, SampleFormat::U16) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(
                w,
                h,
                img.data
                    .iter()
                    .map(|&v| quantize(v, 65535.0) as u16)
                    .collect(),
            )
            .ok_or_else(bad)?,
        ),
        (3, SampleFormat::U8) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect(),
            )
            .ok_or_else(bad)?,
        ),
        (3, SampleFormat::U16) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                w,
                h,
                img.data
                    .iter()
                    .map(|&v| quantize(v, 65535.0) as u16)
                    .collect(),
            )
            .ok_or_else(bad)?,
        ),
        (1, SampleFormat::F32) => {
            let rgb = img.replicate(3);
            return to_dynamic(&rgb, SampleFormat::F32);
        }
        (3, SampleFormat::F32) => DynamicImage::ImageRgb32F(
            ImageBuffer::<Rgb<f32>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| v as f32).collect(),
            )
            .ok_or_else(bad)?,
        ),
        _ => return Err(bad()),
    };
    Ok(out)
}

/// Writes `img` to `path`; PNG for integer formats, OpenEXR for `F32`.
pub fn write_image(img: &Image, path: &Path, format: SampleFormat) -> Result<()> {
    let dynamic = to_dynamic(img, format)?;
    let fmt = match format {
        SampleFormat::F32 => image::ImageFormat::OpenExr,
        _ => image::ImageFormat::Png,
    };
    dynamic.save_with_format(path, fmt).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Encodes an image as PNG bytes at the given integer depth.
pub fn encode_png(img: &Image, format: SampleFormat) -> Result<Vec<u8>> {
    if format == SampleFormat::F32 {
        return Err(Error::Shape("PNG cannot hold float samples".into()));
    }
    let dynamic = to_dynamic(img, format)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_when_same_size() {
        let img = Image::from_fn(4, 3, 2, |x, y, c| (x + 10 * y + 100 * c) as f64);
        assert_eq!(img.resize_bilinear(4, 3), img);
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let img = Image::filled(3, 5, 1, 0.25);
        let up = img.resize_bilinear(12, 20);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn translate_replicates_edges() {
        let img = Image::from_fn(4, 1, 1, |x, _, _| x as f64);
        let t = img.translate(2, 0);
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0]);
        let t = img.translate(-1, 0);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn luminance_weights_sum_to_one() {
        let img = Image::filled(2, 2, 3, 0.7);
        for v in img.luminance().data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn png16_round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let path = dir.path().join("a.png");
        write_image(&img, &path, SampleFormat::U16).unwrap();
        let (back, fmt) = read_image(&path).unwrap();
        assert_eq!(fmt, SampleFormat::U16);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= SampleFormat::U16.half_step() + 1e-12);
        }
    }

    #[test]
    fn exr_round_trip_signed_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 3, 3, |x, y, c| {
            x as f64 * 0.25 - y as f64 * 0.5 + c as f64 * 0.125
        });
        let path = dir.path().join("d.exr");
        write_image(&img, &path, SampleFormat::F32).unwrap();
        let (back, fmt) = read_image(&path).unwrap();
        assert_eq!(fmt, SampleFormat::F32);
        assert_eq!(back.channels(), 3);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
