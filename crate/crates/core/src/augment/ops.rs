//! The seven sequence-preserving image operators.
//!
//! Intensities live in `[0, 1]`; the contrast pivot 127 on the 8-bit scale is
//! therefore `127/255`. Every operator keeps the image size and clips to
//! `[0, 1]`.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{bilinear, TextImage};

/// Pivot of the linear contrast map on the unit scale.
pub const CONTRAST_PIVOT: f64 = 127.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    LinearContrast,
    GaussianBlur,
    Sharpen,
    CropVertical,
    CropHorizontal,
    Perspective,
    PiecewiseAffine,
}

/// Closed interval a parameter is drawn uniformly from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn is_valid(&self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

/// An operator with the ranges its parameters are sampled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    /// `pivot + alpha·(v − pivot)`.
    LinearContrast { alpha: Interval },
    /// Gaussian kernel with standard deviation `sigma` pixels.
    GaussianBlur { sigma: Interval },
    /// Blend with a 3×3 sharpened copy: kernel
    /// `(1−alpha)·δ + alpha·[[-1,-1,-1],[-1,8+lightness,-1],[-1,-1,-1]]`.
    Sharpen { alpha: Interval, lightness: Interval },
    /// Top and bottom crop fractions, each drawn independently, then resize back.
    CropVertical { fraction: Interval },
    /// Left and right crop fractions, each drawn independently, then resize back.
    CropHorizontal { fraction: Interval },
    /// Corner jitter `|N(0, s)|` inward (relative units), `s` drawn from `scale`;
    /// the jittered quad is warped back onto the full frame.
    Perspective { scale: Interval },
    /// Every point of a `rows × cols` grid moves by `N(0, s)` (relative units),
    /// `s` drawn from `scale`; piecewise-affine warp with edge padding.
    PiecewiseAffine { scale: Interval, rows: usize, cols: usize },
}

impl AugmentOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugmentOp::LinearContrast { .. } => OpKind::LinearContrast,
            AugmentOp::GaussianBlur { .. } => OpKind::GaussianBlur,
            AugmentOp::Sharpen { .. } => OpKind::Sharpen,
            AugmentOp::CropVertical { .. } => OpKind::CropVertical,
            AugmentOp::CropHorizontal { .. } => OpKind::CropHorizontal,
            AugmentOp::Perspective { .. } => OpKind::Perspective,
            AugmentOp::PiecewiseAffine { .. } => OpKind::PiecewiseAffine,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        let check = |name: &str, i: &Interval, lo: f64, hi: f64| {
            if !i.is_valid() || i.0 < lo || i.1 > hi {
                Err(format!("{:?}: {name} range [{}, {}] must lie within [{lo}, {hi}]", self.kind(), i.0, i.1))
            } else {
                Ok(())
            }
        };
        match self {
            AugmentOp::LinearContrast { alpha } => check("alpha", alpha, 0.0, f64::MAX),
            AugmentOp::GaussianBlur { sigma } => check("sigma", sigma, 0.0, 50.0),
            AugmentOp::Sharpen { alpha, lightness } => {
                check("alpha", alpha, 0.0, 1.0)?;
                check("lightness", lightness, 0.0, f64::MAX)
            }
            AugmentOp::CropVertical { fraction } | AugmentOp::CropHorizontal { fraction } => {
                check("fraction", fraction, 0.0, 0.49)
            }
            AugmentOp::Perspective { scale } => check("scale", scale, 0.0, 0.25),
            AugmentOp::PiecewiseAffine { scale, rows, cols } => {
                if *rows < 2 || *cols < 2 {
                    return Err("piecewise affine grid needs at least 2×2 points".into());
                }
                check("scale", scale, 0.0, 0.25)
            }
        }
    }

    /// Draws concrete parameters.
    pub fn sample(&self, rng: &mut impl Rng) -> BoundOp {
        match self {
            AugmentOp::LinearContrast { alpha } => BoundOp::LinearContrast { alpha: alpha.sample(rng) },
            AugmentOp::GaussianBlur { sigma } => BoundOp::GaussianBlur { sigma: sigma.sample(rng) },
            AugmentOp::Sharpen { alpha, lightness } => BoundOp::Sharpen {
                alpha: alpha.sample(rng),
                lightness: lightness.sample(rng),
            },
            AugmentOp::CropVertical { fraction } => BoundOp::CropVertical {
                top: fraction.sample(rng),
                bottom: fraction.sample(rng),
            },
            AugmentOp::CropHorizontal { fraction } => BoundOp::CropHorizontal {
                left: fraction.sample(rng),
                right: fraction.sample(rng),
            },
            AugmentOp::Perspective { scale } => {
                let sigma = scale.sample(rng);
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
                let mut corners = [(0.0, 0.0); 4];
                for c in &mut corners {
                    *c = (normal.sample(rng).abs(), normal.sample(rng).abs());
                }
                BoundOp::Perspective { sigma, corners }
            }
            AugmentOp::PiecewiseAffine { scale, rows, cols } => {
                let sigma = scale.sample(rng);
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
                let offsets = (0..rows * cols)
                    .map(|_| (normal.sample(rng), normal.sample(rng)))
                    .collect();
                BoundOp::PiecewiseAffine {
                    sigma,
                    rows: *rows,
                    cols: *cols,
                    offsets,
                }
            }
        }
    }
}

/// An operator with concrete parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundOp {
    LinearContrast { alpha: f64 },
    GaussianBlur { sigma: f64 },
    Sharpen { alpha: f64, lightness: f64 },
    CropVertical { top: f64, bottom: f64 },
    CropHorizontal { left: f64, right: f64 },
    /// Inward corner offsets `(dy, dx)` as fractions of height/width, in
    /// order top-left, top-right, bottom-right, bottom-left.
    Perspective { sigma: f64, corners: [(f64, f64); 4] },
    /// Grid-point offsets `(dy, dx)` as fractions of height/width, row-major.
    PiecewiseAffine { sigma: f64, rows: usize, cols: usize, offsets: Vec<(f64, f64)> },
}

impl BoundOp {
    pub fn kind(&self) -> OpKind {
        match self {
            BoundOp::LinearContrast { .. } => OpKind::LinearContrast,
            BoundOp::GaussianBlur { .. } => OpKind::GaussianBlur,
            BoundOp::Sharpen { .. } => OpKind::Sharpen,
            BoundOp::CropVertical { .. } => OpKind::CropVertical,
            BoundOp::CropHorizontal { .. } => OpKind::CropHorizontal,
            BoundOp::Perspective { .. } => OpKind::Perspective,
            BoundOp::PiecewiseAffine { .. } => OpKind::PiecewiseAffine,
        }
    }
}

/// Applies one bound operator. Output has the input's dimensions and lies in `[0, 1]`.
pub fn apply_op(img: &TextImage, op: &BoundOp) -> TextImage {
    let mut out = match op {
        BoundOp::LinearContrast { alpha } => {
            img.with_pixels(img.pixels().iter().map(|&v| alpha * v + (1.0 - alpha) * CONTRAST_PIVOT).collect())
        }
        BoundOp::GaussianBlur { sigma } => gaussian_blur(img, *sigma),
        BoundOp::Sharpen { alpha, lightness } => sharpen(img, *alpha, *lightness),
        BoundOp::CropVertical { top, bottom } => crop_resize(img, (*top, *bottom), (0.0, 0.0)),
        BoundOp::CropHorizontal { left, right } => crop_resize(img, (0.0, 0.0), (*left, *right)),
        BoundOp::Perspective { corners, .. } => perspective(img, corners),
        BoundOp::PiecewiseAffine { rows, cols, offsets, .. } => piecewise_affine(img, *rows, *cols, offsets),
    };
    out.clamp();
    out
}

fn gaussian_blur(img: &TextImage, sigma: f64) -> TextImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.pixels().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                        kv * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    kernel
                        .iter()
                        .enumerate()
                        .map(|(k, kv)| {
                            let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                            kv * tmp[yy * w + x]
                        })
                        .sum(),
                );
            }
        }
    }
    img.with_pixels(out)
}

fn sharpen(img: &TextImage, alpha: f64, lightness: f64) -> TextImage {
    let mut kernel = [[-alpha; 3]; 3];
    kernel[1][1] = (1.0 - alpha) + alpha * (8.0 + lightness);
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.pixels().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    let yy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                    for (kx, kv) in row.iter().enumerate() {
                        let xx = (x as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += kv * plane[yy * w + xx];
                    }
                }
                out.push(acc);
            }
        }
    }
    img.with_pixels(out)
}

fn crop_px(size: usize, a: f64, b: f64) -> (usize, usize) {
    let mut first = (a * size as f64).round() as usize;
    let mut second = (b * size as f64).round() as usize;
    // always leave at least one row/column
    while first + second >= size && (first > 0 || second > 0) {
        if first >= second {
            first -= 1;
        } else {
            second -= 1;
        }
    }
    (first, second)
}

fn crop_resize(img: &TextImage, (top, bottom): (f64, f64), (left, right): (f64, f64)) -> TextImage {
    let (t, b) = crop_px(img.height(), top, bottom);
    let (l, r) = crop_px(img.width(), left, right);
    if t + b + l + r == 0 {
        return img.clone();
    }
    let cropped = img.crop(t, l, img.height() - t - b, img.width() - l - r);
    img.with_dims_of(cropped.resize(img.height(), img.width()))
}

/// Homography taking `from[i]` to `to[i]` (points as `(x, y)`).
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = from[i];
        let (u, v) = to[i];
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let h = a.lu().solve(&rhs)?;
    Some(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

fn perspective(img: &TextImage, corners: &[(f64, f64); 4]) -> TextImage {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (xm, ym) = (w - 1.0, h - 1.0);
    let rect = [(0.0, 0.0), (xm, 0.0), (xm, ym), (0.0, ym)];
    let quad = [
        (corners[0].1 * w, corners[0].0 * h),
        (xm - corners[1].1 * w, corners[1].0 * h),
        (xm - corners[2].1 * w, ym - corners[2].0 * h),
        (corners[3].1 * w, ym - corners[3].0 * h),
    ];
    let Some(m) = homography(&rect, &quad) else {
        return img.clone();
    };
    warp(img, |y, x| {
        let p = m * nalgebra::Vector3::new(x, y, 1.0);
        (p[1] / p[2], p[0] / p[2])
    })
}

fn piecewise_affine(img: &TextImage, rows: usize, cols: usize, offsets: &[(f64, f64)]) -> TextImage {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let (ym, xm) = (h - 1.0, w - 1.0);
    let cell_h = ym / (rows - 1) as f64;
    let cell_w = xm / (cols - 1) as f64;
    // source position of grid point (i, j)
    let src = |i: usize, j: usize| {
        let (dy, dx) = offsets[i * cols + j];
        (i as f64 * cell_h + dy * h, j as f64 * cell_w + dx * w)
    };
    warp(img, |y, x| {
        let i = ((y / cell_h).floor() as usize).min(rows - 2);
        let j = ((x / cell_w).floor() as usize).min(cols - 2);
        let u = (y - i as f64 * cell_h) / cell_h;
        let v = (x - j as f64 * cell_w) / cell_w;
        let (p00, p01, p10, p11) = (src(i, j), src(i, j + 1), src(i + 1, j), src(i + 1, j + 1));
        // split each cell along the anti-diagonal into two triangles
        let lerp3 = |a: (f64, f64), b: (f64, f64), c: (f64, f64), wa: f64, wb: f64, wc: f64| {
            (a.0 * wa + b.0 * wb + c.0 * wc, a.1 * wa + b.1 * wb + c.1 * wc)
        };
        if u + v <= 1.0 {
            lerp3(p00, p10, p01, 1.0 - u - v, u, v)
        } else {
            lerp3(p11, p01, p10, u + v - 1.0, 1.0 - u, 1.0 - v)
        }
    })
}

/// Inverse warp: output pixel `(y, x)` samples the input at `map(y, x)`,
/// replicating edge pixels outside the image.
fn warp(img: &TextImage, map: impl Fn(f64, f64) -> (f64, f64)) -> TextImage {
    let (h, w) = (img.height(), img.width());
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y as f64, x as f64)))
        .map(|(y, x)| map(y, x))
        .collect();
    let mut out = Vec::with_capacity(img.pixels().len());
    for c in 0..img.channels() {
        let plane = img.plane(c);
        out.extend(coords.iter().map(|&(sy, sx)| bilinear(plane, h, w, sy, sx)));
    }
    img.with_pixels(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> TextImage {
        TextImage::new(
            1,
            h,
            w,
            (0..h * w).map(|i| ((i % w) as f64 / w as f64 + (i / w) as f64 / (2.0 * h as f64)) / 1.5).collect(),
        )
    }

    #[test]
    fn contrast_alpha_one_is_identity() {
        let img = gradient(32, 100);
        assert_eq!(apply_op(&img, &BoundOp::LinearContrast { alpha: 1.0 }), img);
    }

    #[test]
    fn contrast_half_on_white_gives_191() {
        let img = TextImage::filled(1, 4, 4, 1.0);
        let out = apply_op(&img, &BoundOp::LinearContrast { alpha: 0.5 });
        assert!(out.pixels().iter().all(|&v| (v - 191.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn zero_crops_are_identity() {
        let img = gradient(32, 100);
        assert_eq!(apply_op(&img, &BoundOp::CropVertical { top: 0.0, bottom: 0.0 }), img);
        assert_eq!(apply_op(&img, &BoundOp::CropHorizontal { left: 0.0, right: 0.0 }), img);
    }

    #[test]
    fn crop_keeps_size_and_changes_content() {
        let img = gradient(32, 100);
        let out = apply_op(&img, &BoundOp::CropVertical { top: 0.4, bottom: 0.4 });
        assert!(out.same_dims(&img));
        assert_ne!(out, img);
    }

    #[test]
    fn blur_and_sharpen_preserve_constants() {
        let img = TextImage::filled(1, 8, 8, 0.3);
        let b = apply_op(&img, &BoundOp::GaussianBlur { sigma: 1.2 });
        assert!(b.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        // sharpen kernel sums to (1-alpha) + alpha*lightness
        let s = apply_op(&img, &BoundOp::Sharpen { alpha: 0.0, lightness: 0.3 });
        assert_eq!(s, img);
        let s = apply_op(&img, &BoundOp::Sharpen { alpha: 0.5, lightness: 0.4 });
        assert!(s.pixels().iter().all(|&v| (v - 0.3 * (0.5 + 0.5 * 0.4)).abs() < 1e-12));
    }

    #[test]
    fn zero_displacement_warps_are_identity() {
        let img = gradient(32, 100);
        let p = apply_op(&img, &BoundOp::Perspective { sigma: 0.0, corners: [(0.0, 0.0); 4] });
        assert!(p.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-9));
        let pw = apply_op(
            &img,
            &BoundOp::PiecewiseAffine { sigma: 0.0, rows: 4, cols: 4, offsets: vec![(0.0, 0.0); 16] },
        );
        assert!(pw.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn homography_maps_corners() {
        let from = [(0.0, 0.0), (9.0, 0.0), (9.0, 4.0), (0.0, 4.0)];
        let to = [(0.3, 0.1), (8.5, 0.2), (8.8, 3.9), (0.1, 3.7)];
        let m = homography(&from, &to).unwrap();
        for (f, t) in from.iter().zip(&to) {
            let p = m * nalgebra::Vector3::new(f.0, f.1, 1.0);
            assert!((p[0] / p[2] - t.0).abs() < 1e-9 && (p[1] / p[2] - t.1).abs() < 1e-9);
        }
    }
}
