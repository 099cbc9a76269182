//! Deterministic synthetic word-image renderer.
//!
//! Glyphs come from a bundled atlas rasterized from the DejaVu font family
//! (see `tools/build_glyph_atlas.py`). Each image draws its own random
//! stream from `(seed, entry index)`, so output does not depend on the order
//! entries are rendered in.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Charset, Manifest, TextImage};
use crate::error::{Error, Result};
use crate::rng;

static ATLAS_BYTES: &[u8] = include_bytes!("../../assets/glyphs.bin");

struct Glyph {
    advance: i32,
    x_off: i32,
    y_off: i32,
    w: usize,
    h: usize,
    coverage: Vec<u8>,
}

pub struct Font {
    pub name: String,
    line_height: usize,
    glyphs: HashMap<char, Glyph>,
}

fn atlas() -> &'static [Font] {
    static FONTS: OnceLock<Vec<Font>> = OnceLock::new();
    FONTS.get_or_init(|| parse_atlas(ATLAS_BYTES).expect("bundled glyph atlas is valid"))
}

fn parse_atlas(bytes: &[u8]) -> Option<Vec<Font>> {
    let mut pos = 0;
    let mut take = |n: usize| -> Option<&[u8]> {
        let s = bytes.get(pos..pos + n)?;
        pos += n;
        Some(s)
    };
    if take(4)? != b"GLYF" || take(1)?[0] != 1 {
        return None;
    }
    let count = take(1)?[0];
    let mut fonts = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = take(1)?[0] as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).ok()?;
        let head = take(3)?;
        let (line_height, glyph_count) = (head[0] as usize, head[2]);
        let mut glyphs = HashMap::new();
        for _ in 0..glyph_count {
            let g = take(6)?;
            let (code, advance, x_off, y_off, w, h) =
                (g[0], g[1] as i32, g[2] as i8 as i32, g[3] as i8 as i32, g[4] as usize, g[5] as usize);
            let coverage = take(w * h)?.to_vec();
            glyphs.insert(
                char::from(code),
                Glyph {
                    advance,
                    x_off,
                    y_off,
                    w,
                    h,
                    coverage,
                },
            );
        }
        fonts.push(Font {
            name,
            line_height,
            glyphs,
        });
    }
    Some(fonts)
}

/// Names of the bundled fonts.
pub fn available_fonts() -> Vec<String> {
    atlas().iter().map(|f| f.name.clone()).collect()
}

fn resolve_fonts(names: &[String], charset: &Charset) -> Result<Vec<&'static Font>> {
    let fonts: Vec<&Font> = if names.is_empty() {
        atlas().iter().collect()
    } else {
        names
            .iter()
            .filter_map(|n| atlas().iter().find(|f| &f.name == n))
            .collect()
    };
    let usable: Vec<&Font> = fonts
        .into_iter()
        .filter(|f| charset.symbols().iter().all(|c| f.glyphs.contains_key(c)))
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no usable font among {names:?} covers the charset (bundled: {:?})",
            available_fonts()
        )));
    }
    Ok(usable)
}

#[derive(Clone, Debug)]
pub struct RenderSpec {
    pub num: usize,
    pub charset: Charset,
    /// Inclusive word-length bounds.
    pub length_range: (usize, usize),
    /// Font names; empty means every bundled font.
    pub fonts: Vec<String>,
    pub seed: u64,
}

impl RenderSpec {
    pub fn new(num: usize, seed: u64) -> Self {
        Self {
            num,
            charset: Charset::alphanumeric(),
            length_range: (3, 8),
            fonts: Vec::new(),
            seed,
        }
    }
}

/// Rasterizes `text` at the atlas resolution: coverage in `[0, 1]`.
fn rasterize(font: &Font, text: &[char], spacing: i32) -> (usize, usize, Vec<f64>) {
    let width: i32 = text
        .iter()
        .map(|c| font.glyphs[c].advance + spacing)
        .sum::<i32>()
        .max(1)
        + 4;
    let (w, h) = (width as usize, font.line_height);
    let mut buf = vec![0.0f64; w * h];
    let mut pen = 2;
    for c in text {
        let g = &font.glyphs[c];
        for gy in 0..g.h {
            for gx in 0..g.w {
                let x = pen + g.x_off + gx as i32;
                let y = g.y_off + gy as i32;
                if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                    continue;
                }
                let v = &mut buf[y as usize * w + x as usize];
                *v = v.max(g.coverage[gy * g.w + gx] as f64 / 255.0);
            }
        }
        pen += g.advance + spacing;
    }
    (w, h, buf)
}

fn render_one(fonts: &[&Font], spec: &RenderSpec, index: usize) -> (String, TextImage) {
    let mut r = rng::stream(rng::mix(spec.seed, index as u64), rng::purpose::RENDER);
    let (lo, hi) = spec.length_range;
    let len = r.random_range(lo..=hi);
    let symbols = spec.charset.symbols();
    let text: Vec<char> = (0..len).map(|_| symbols[r.random_range(0..symbols.len())]).collect();
    let font = fonts[r.random_range(0..fonts.len())];
    let spacing = r.random_range(0..=2);
    let scale = r.random_range(0.75..1.15);
    let (tw, th, coverage) = rasterize(font, &text, spacing);
    let text_img = TextImage::new(1, th, tw, coverage);
    let sw = ((tw as f64 * scale).round() as usize).max(1);
    let sh = ((th as f64 * scale).round() as usize).max(1);
    let scaled = text_img.resize(sh, sw);

    let (ml, mr) = (r.random_range(2..=8), r.random_range(2..=8));
    let (mt, mb) = (r.random_range(1..=4), r.random_range(1..=4));
    let (w, h) = (sw + ml + mr, sh + mt + mb);
    let background = r.random_range(0.7..1.0);
    let ink = r.random_range(0.0..0.35);
    let noise = Normal::new(0.0, r.random_range(0.0..0.03)).expect("valid std");
    let mut pixels = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let cov = if y >= mt && y < mt + sh && x >= ml && x < ml + sw {
                scaled.get(0, y - mt, x - ml)
            } else {
                0.0
            };
            let v = background + (ink - background) * cov + noise.sample(&mut r);
            pixels[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    let mut img = TextImage::new(1, h, w, pixels);
    let label: String = text.into_iter().collect();
    img.label = Some(label.clone());
    (label, img)
}

/// Renders `spec.num` word images as PNGs under `out_dir/images/` and writes
/// `out_dir/labels.tsv`. The output is a pure function of `spec`.
pub fn render_synthetic(out_dir: &Path, spec: &RenderSpec) -> Result<Manifest> {
    if spec.num == 0 {
        return Err(Error::Argument("render count must be at least 1".into()));
    }
    let (lo, hi) = spec.length_range;
    if lo == 0 || lo > hi {
        return Err(Error::Argument(format!("invalid length range ({lo}, {hi})")));
    }
    let fonts = resolve_fonts(&spec.fonts, &spec.charset)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut entries = Vec::with_capacity(spec.num);
    for i in 0..spec.num {
        let (label, img) = render_one(&fonts, spec, i);
        let rel = PathBuf::from("images").join(format!("word_{i:06}.png"));
        img.save_png(&out_dir.join(&rel))?;
        entries.push((rel, label));
    }
    let manifest = Manifest::from_entries(out_dir, entries);
    manifest.write()?;
    Ok(manifest)
}
