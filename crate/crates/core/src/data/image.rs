use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Height every image is resized to before entering the encoder.
pub const INPUT_HEIGHT: usize = 32;
/// Width every image is resized to before entering the encoder.
pub const INPUT_WIDTH: usize = 100;

/// A word image: `channels × height × width` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextImage {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    /// Width of the source image before preprocessing.
    pub width_px: usize,
    pub label: Option<String>,
}

impl TextImage {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), channels * height * width, "pixel buffer size mismatch");
        Self {
            channels,
            height,
            width,
            pixels,
            width_px: width,
            label: None,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.pixels[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn same_dims(&self, other: &TextImage) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn clamp(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Builds from a decoded image with 1 (luma) or 3 (RGB) channels.
    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f64> = match channels {
            1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            3 => {
                let rgb = img.to_rgb8();
                let mut planes = vec![0.0; 3 * w * h];
                for (i, p) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        planes[c * w * h + i] = p.0[c] as f64 / 255.0;
                    }
                }
                planes
            }
            n => return Err(Error::Config(format!("unsupported channel count {n} (expected 1 or 3)"))),
        };
        Ok(Self::new(channels, h, w, pixels))
    }

    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        let img = image::open(path)?;
        Self::from_dynamic(&img, channels)
    }

    /// Loads and resizes to the encoder input size.
    pub fn load_preprocessed(path: &Path, channels: usize) -> Result<Self> {
        let img = Self::load(path, channels)?;
        let width_px = img.width;
        let mut out = img.resize(INPUT_HEIGHT, INPUT_WIDTH);
        out.width_px = width_px;
        Ok(out)
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_dynamic(&self) -> DynamicImage {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            let plane = self.height * self.width;
            let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let i = y as usize * self.width + x as usize;
                Rgb([q(self.pixels[i]), q(self.pixels[plane + i]), q(self.pixels[2 * plane + i])])
            });
            DynamicImage::ImageRgb8(img)
        } else {
            let img: GrayImage =
                ImageBuffer::from_fn(w, h, |x, y| Luma([q(self.pixels[y as usize * self.width + x as usize])]));
            DynamicImage::ImageLuma8(img)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear resize with half-pixel centers; aspect ratio is not kept.
    pub fn resize(&self, height: usize, width: usize) -> TextImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = vec![0.0; self.channels * height * width];
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    out[(c * height + y) * width + x] = bilinear(plane, self.height, self.width, fy, fx);
                }
            }
        }
        let mut img = TextImage::new(self.channels, height, width, out);
        img.width_px = self.width_px;
        img.label = self.label.clone();
        img
    }

    /// Sub-image `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> TextImage {
        assert!(top + h <= self.height && left + w <= self.width && h > 0 && w > 0, "crop out of bounds");
        let mut out = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = &self.plane(c)[y * self.width..(y + 1) * self.width];
                out.extend_from_slice(&row[left..left + w]);
            }
        }
        TextImage::new(self.channels, h, w, out)
    }

    /// Replaces the pixels, keeping metadata.
    pub(crate) fn with_pixels(&self, pixels: Vec<f64>) -> TextImage {
        let mut out = TextImage::new(self.channels, self.height, self.width, pixels);
        out.width_px = self.width_px;
        out.label = self.label.clone();
        out
    }

    pub(crate) fn with_dims_of(&self, resized: TextImage) -> TextImage {
        let mut out = resized;
        out.width_px = self.width_px;
        out.label = self.label.clone();
        out
    }
}

/// Bilinear sample of a single plane at a real-valued position, with
/// edge replication outside the image.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let dy = y - y0 as f64;
    let dx = x - x0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - dx) + plane[y0 * w + x1] * dx;
    let bottom = plane[y1 * w + x0] * (1.0 - dx) + plane[y1 * w + x1] * dx;
    top * (1.0 - dy) + bottom * dy
}
