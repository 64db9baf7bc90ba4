//! Procedural poster corpus: prompt-named backgrounds, a subject with a small
//! logo mark, glyph text lines, tiny excluded decorations and foreground
//! extension pairs for the detector.

use std::path::Path;

use diffcore::rng::stream_id;
use diffcore::CounterRng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::glyphrep::{self, GlyphBitmap, TextLine, TextSpec};
use crate::image::{luminance, BBox, Mask, PixelRect, Rgb, RgbImage};

pub const FAMILIES: [&str; 5] = ["gradient-h", "gradient-v", "stripes-h", "stripes-v", "blobs"];
pub const PALETTE: [Rgb; 8] = [
    [200, 120, 110],
    [110, 160, 200],
    [120, 180, 120],
    [210, 190, 110],
    [160, 120, 190],
    [90, 110, 140],
    [190, 150, 90],
    [130, 130, 130],
];
pub const VARIANTS: usize = 4;
const COLOR_BASE: usize = FAMILIES.len();
const VARIANT_BASE: usize = COLOR_BASE + PALETTE.len();
pub const PROMPT_VOCAB: usize = VARIANT_BASE + VARIANTS;
/// Prompt layout: `[family, color_a, color_b, variant]`.
pub const PROMPT_LEN: usize = 4;

const SUBJECT_COLORS: [Rgb; 6] = [[220, 40, 40], [40, 70, 200], [30, 150, 60], [240, 140, 20], [140, 40, 160], [20, 160, 170]];
const DARK_TEXT: Rgb = [24, 24, 32];
const LIGHT_TEXT: Rgb = [240, 240, 232];
const PLACE_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub alphabet_size: usize,
    pub font_seed: u64,
    /// Rendered size of one character cell.
    pub glyph_px: usize,
    /// Text boxes start on multiples of this many pixels.
    pub layout_grid: usize,
    pub min_lines: usize,
    pub max_lines: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub subject_area: (f64, f64),
    /// Probability of a tiny flagged decoration.
    pub excluded_rate: f64,
    pub excluded_px: usize,
    /// Probability of an unmasked subject-colored prop attached to the subject.
    pub prop_rate: f64,
    pub with_text: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            alphabet_size: 16,
            font_seed: 0,
            glyph_px: 8,
            layout_grid: 8,
            min_lines: 1,
            max_lines: 3,
            min_chars: 2,
            max_chars: 6,
            subject_area: (0.04, 0.25),
            excluded_rate: 0.3,
            excluded_px: 4,
            prop_rate: 0.0,
            with_text: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glyph_px == 0 || self.glyph_px % glyphrep::LATTICE != 0 || self.excluded_px % glyphrep::LATTICE != 0 {
            return config_err("glyph sizes must be multiples of the glyph lattice");
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars || self.max_chars * self.glyph_px > self.image_size {
            return config_err("character counts must satisfy 1 <= min <= max and fit the image width");
        }
        if self.min_lines > self.max_lines || self.max_lines > glyphrep::MAX_LINES {
            return config_err("line counts out of range");
        }
        if self.alphabet_size == 0 || self.alphabet_size > glyphrep::MAX_ALPHABET {
            return config_err("alphabet_size out of range");
        }
        let (lo, hi) = self.subject_area;
        if !(0.0 < lo && lo <= hi && hi < 1.0) || self.layout_grid == 0 {
            return config_err("subject_area must satisfy 0 < lo <= hi < 1 and layout_grid > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosterSample {
    pub seed: u64,
    pub image: RgbImage,
    /// The given subject mask `M_s`.
    pub subject_mask: Mask,
    pub prompt_tokens: Vec<usize>,
    pub text: TextSpec,
    pub excluded_boxes: Vec<BBox>,
    pub fg_extended: Option<bool>,
    /// Actual foreground when it differs from `M_s` (extensions and props).
    pub true_mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtensionPair {
    pub clean: PosterSample,
    pub extended: PosterSample,
    pub clean_mask: Mask,
    pub extended_mask: Mask,
    pub protrusion: PixelRect,
}

// ---------------------------------------------------------------- background

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub family: usize,
    pub color_a: usize,
    pub color_b: usize,
    pub variant: usize,
}

impl Prompt {
    pub fn tokens(&self) -> Vec<usize> {
        vec![self.family, COLOR_BASE + self.color_a, COLOR_BASE + self.color_b, VARIANT_BASE + self.variant]
    }

    pub fn from_tokens(t: &[usize]) -> Result<Self> {
        let bad = || Error::Input(format!("malformed prompt tokens {t:?}"));
        if t.len() != PROMPT_LEN {
            return Err(bad());
        }
        let sub = |v: usize, base: usize, n: usize| (v >= base && v < base + n).then(|| v - base).ok_or_else(bad);
        Ok(Prompt {
            family: sub(t[0], 0, FAMILIES.len())?,
            color_a: sub(t[1], COLOR_BASE, PALETTE.len())?,
            color_b: sub(t[2], COLOR_BASE, PALETTE.len())?,
            variant: sub(t[3], VARIANT_BASE, VARIANTS)?,
        })
    }

    pub fn describe(&self) -> String {
        format!("{} c{} c{} v{}", FAMILIES[self.family], self.color_a, self.color_b, self.variant)
    }
}

fn mix(a: Rgb, b: Rgb, w: f64) -> Rgb {
    let m = |x: u8, y: u8| (x as f64 * (1.0 - w) + y as f64 * w).round() as u8;
    [m(a[0], b[0]), m(a[1], b[1]), m(a[2], b[2])]
}

/// Background image determined by the prompt alone.
pub fn render_background(prompt_tokens: &[usize], size: usize) -> Result<RgbImage> {
    let p = Prompt::from_tokens(prompt_tokens)?;
    let (a, b) = (PALETTE[p.color_a], PALETTE[p.color_b]);
    let mut img = RgbImage::new(size, size);
    let period = 8 + 4 * p.variant;
    let span = (size.max(2) - 1) as f64;
    let mut rng = CounterRng::derive(0, "blobs", &[p.color_a as u64, p.color_b as u64, p.variant as u64]);
    let blobs: Vec<(f64, f64, f64)> = (0..3 + p.variant)
        .map(|_| (rng.uniform() * size as f64, rng.uniform() * size as f64, size as f64 * (0.1 + 0.15 * rng.uniform())))
        .collect();
    for y in 0..size {
        for x in 0..size {
            let c = match FAMILIES[p.family] {
                "gradient-h" | "gradient-v" => {
                    let u = if p.family == 0 { x } else { y } as f64 / span;
                    let u = if p.variant % 2 == 1 { 1.0 - u } else { u };
                    mix(a, b, u)
                }
                "stripes-h" | "stripes-v" => {
                    let u = if p.family == 2 { y } else { x };
                    if (u / (period / 2)) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                }
                _ => {
                    let inside = blobs.iter().any(|&(cx, cy, r)| {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        dx * dx + dy * dy <= r * r
                    });
                    if inside {
                        b
                    } else {
                        a
                    }
                }
            };
            img.put(x, y, c);
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------- subject

fn ellipse_mask(size: usize, cx: f64, cy: f64, rx: f64, ry: f64, rot: f64) -> Mask {
    let mut m = Mask::new(size, size);
    let (s, c) = rot.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn polygon_mask(size: usize, pts: &[(f64, f64)]) -> Mask {
    let mut m = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let ((xi, yi), (xj, yj)) = (pts[i], pts[j]);
                if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                    inside = !inside;
                }
                j = i;
            }
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn subject_shape(rng: &mut CounterRng, cfg: &SynthConfig) -> Result<Mask> {
    let s = cfg.image_size as f64;
    let (lo, hi) = cfg.subject_area;
    for _ in 0..PLACE_TRIES {
        let area = lo + (hi - lo) * rng.uniform();
        let r = (area * s * s / std::f64::consts::PI).sqrt();
        let aspect = 0.7 + 0.6 * rng.uniform();
        let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
        let reach = rx.max(ry) + 1.0;
        let cx = reach + rng.uniform() * (s - 2.0 * reach).max(0.0);
        let cy = reach + rng.uniform() * (s - 2.0 * reach).max(0.0);
        let m = if rng.bernoulli(0.5) {
            ellipse_mask(cfg.image_size, cx, cy, rx, ry, rng.uniform() * std::f64::consts::PI)
        } else {
            let n = 5 + rng.below(4);
            let phase = rng.uniform() * std::f64::consts::TAU;
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|k| {
                    let ang = phase + k as f64 * std::f64::consts::TAU / n as f64;
                    let rr = r * (0.85 + 0.3 * rng.uniform());
                    (cx + rr * ang.cos(), cy + rr * ang.sin())
                })
                .collect();
            polygon_mask(cfg.image_size, &pts)
        };
        let frac = m.count() as f64 / (s * s);
        if frac >= lo && frac <= hi {
            return Ok(m);
        }
    }
    Err(Error::Runtime("could not draw a subject within the area bounds".into()))
}

fn contrast_text_color(img: &RgbImage, r: &PixelRect) -> (Rgb, f64) {
    let mut best = (DARK_TEXT, -1.0);
    for c in [DARK_TEXT, LIGHT_TEXT] {
        let lc = luminance(c);
        let mut worst = f64::INFINITY;
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                worst = worst.min((luminance(img.get(x, y)) - lc).abs());
            }
        }
        if worst > best.1 {
            best = (c, worst);
        }
    }
    best
}

/// Draw `content` into `r` with `cell` px per character.
fn draw_text(img: &mut RgbImage, glyphs: &[GlyphBitmap], content: &[usize], r: &PixelRect, cell: usize, color: Rgb) {
    for (k, &ch) in content.iter().enumerate() {
        let g = &glyphs[ch];
        for y in 0..cell {
            for x in 0..cell {
                if g.get(x * g.size / cell, y * g.size / cell) {
                    img.put(r.x0 + k * cell + x, r.y0 + y, color);
                }
            }
        }
    }
}

fn place_rect(rng: &mut CounterRng, size: usize, w: usize, h: usize, grid: usize, taken: &[PixelRect]) -> Option<PixelRect> {
    if w > size || h > size {
        return None;
    }
    let (nx, ny) = ((size - w) / grid + 1, (size - h) / grid + 1);
    for _ in 0..PLACE_TRIES {
        let (x0, y0) = (rng.below(nx) * grid, rng.below(ny) * grid);
        let r = PixelRect { x0, y0, x1: x0 + w, y1: y0 + h };
        if taken.iter().all(|t| !t.intersects(&r)) {
            return Some(r);
        }
    }
    None
}

/// Subject-colored shape attached to the subject boundary, outside it. Returns
/// the added pixels and their bounding rectangle.
fn protrusion(rng: &mut CounterRng, subject: &Mask, avoid: &[PixelRect], ratio: (f64, f64)) -> Option<(Mask, PixelRect)> {
    let size = subject.width;
    let sub_area = subject.count() as f64;
    let boundary: Vec<(usize, usize)> = (0..size * size)
        .map(|i| (i % size, i / size))
        .filter(|&(x, y)| {
            subject.get(x, y)
                && [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)]
                    .iter()
                    .any(|&(u, v)| u < size && v < size && !subject.get(u, v))
        })
        .collect();
    if boundary.is_empty() {
        return None;
    }
    let center = subject.bounding_rect()?;
    let (ccx, ccy) = ((center.x0 + center.x1) as f64 / 2.0, (center.y0 + center.y1) as f64 / 2.0);
    for _ in 0..PLACE_TRIES {
        let target = ratio.0 + (ratio.1 - ratio.0) * rng.uniform();
        let (bx, by) = boundary[rng.below(boundary.len())];
        let (dx, dy) = (bx as f64 + 0.5 - ccx, by as f64 + 0.5 - ccy);
        let norm = (dx * dx + dy * dy).sqrt().max(1e-6);
        let want = target * sub_area;
        let r = (want / std::f64::consts::PI).sqrt().max(1.5) * 1.2;
        let (cx, cy) = (bx as f64 + 0.5 + dx / norm * r * 0.8, by as f64 + 0.5 + dy / norm * r * 0.8);
        let lobe = if rng.bernoulli(0.5) {
            ellipse_mask(size, cx, cy, r, r * (0.6 + 0.6 * rng.uniform()), rng.uniform() * std::f64::consts::PI)
        } else {
            let half = r * 0.9;
            let mut m = Mask::new(size, size);
            for y in 0..size {
                for x in 0..size {
                    if (x as f64 + 0.5 - cx).abs() <= half && (y as f64 + 0.5 - cy).abs() <= half {
                        m.set(x, y, true);
                    }
                }
            }
            m
        };
        let mut add = Mask::new(size, size);
        for i in 0..size * size {
            add.data[i] = (lobe.data[i] != 0 && subject.data[i] == 0) as u8;
        }
        let n = add.count() as f64;
        let Some(rect) = add.bounding_rect() else { continue };
        let ratio_ok = n >= ratio.0 * sub_area && n <= ratio.1 * sub_area;
        let touches = boundary.iter().any(|&(x, y)| {
            [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)]
                .iter()
                .any(|&(u, v)| u < size && v < size && add.get(u, v))
        });
        if ratio_ok && touches && avoid.iter().all(|a| !a.intersects(&rect)) {
            return Some((add, rect));
        }
    }
    None
}

struct Layout {
    sample: PosterSample,
    subject_color: Rgb,
    text_rects: Vec<PixelRect>,
}

fn compose(seed: u64, cfg: &SynthConfig, glyphs: &[GlyphBitmap]) -> Result<Layout> {
    let mut rng = CounterRng::derive(seed, "poster", &[]);
    let size = cfg.image_size;
    let color_a = rng.below(PALETTE.len());
    let color_b = (color_a + 1 + rng.below(PALETTE.len() - 1)) % PALETTE.len();
    let prompt = Prompt { family: rng.below(FAMILIES.len()), color_a, color_b, variant: rng.below(VARIANTS) };
    let tokens = prompt.tokens();
    let mut img = render_background(&tokens, size)?;

    let subject = subject_shape(&mut rng, cfg)?;
    let subject_color = SUBJECT_COLORS[rng.below(SUBJECT_COLORS.len())];
    for i in 0..size * size {
        if subject.data[i] != 0 {
            img.put(i % size, i / size, subject_color);
        }
    }
    // logo mark fully inside the subject
    let mark = 2 + rng.below(3);
    let sr = subject.bounding_rect().expect("non-empty subject");
    let mark_color = if luminance(subject_color) > 0.5 { DARK_TEXT } else { LIGHT_TEXT };
    for _ in 0..PLACE_TRIES {
        if sr.width() < mark || sr.height() < mark {
            break;
        }
        let x0 = sr.x0 + rng.below(sr.width() - mark + 1);
        let y0 = sr.y0 + rng.below(sr.height() - mark + 1);
        let inside = (y0..y0 + mark).all(|y| (x0..x0 + mark).all(|x| subject.get(x, y)));
        if inside {
            for y in y0..y0 + mark {
                for x in x0..x0 + mark {
                    img.put(x, y, mark_color);
                }
            }
            break;
        }
    }

    let mut taken = vec![sr.grow(1)];
    let mut lines = Vec::new();
    let mut text_rects = Vec::new();
    if cfg.with_text {
        let n_lines = cfg.min_lines + rng.below(cfg.max_lines - cfg.min_lines + 1);
        for li in 0..n_lines {
            let n = cfg.min_chars + rng.below(cfg.max_chars - cfg.min_chars + 1);
            let content: Vec<usize> = (0..n).map(|_| rng.below(cfg.alphabet_size)).collect();
            let r = place_rect(&mut rng, size, n * cfg.glyph_px, cfg.glyph_px, cfg.layout_grid, &taken)
                .ok_or_else(|| Error::Runtime(format!("seed {seed}: cannot place text line {li}")))?;
            let (color, contrast) = contrast_text_color(&img, &r);
            if contrast < 0.3 {
                return Err(Error::Runtime(format!("seed {seed}: no contrast-safe text color")));
            }
            draw_text(&mut img, glyphs, &content, &r, cfg.glyph_px, color);
            taken.push(r.grow(1));
            text_rects.push(r);
            lines.push(TextLine { content, bbox: BBox::from_pixels(r, size, size) });
        }
    }
    let mut excluded = Vec::new();
    if cfg.with_text && rng.bernoulli(cfg.excluded_rate) {
        let n = 1 + rng.below(2);
        if let Some(r) = place_rect(&mut rng, size, n * cfg.excluded_px, cfg.excluded_px, 1, &taken) {
            let content: Vec<usize> = (0..n).map(|_| rng.below(cfg.alphabet_size)).collect();
            let (color, _) = contrast_text_color(&img, &r);
            draw_text(&mut img, glyphs, &content, &r, cfg.excluded_px, color);
            taken.push(r.grow(1));
            text_rects.push(r);
            excluded.push(BBox::from_pixels(r, size, size));
        }
    }
    Ok(Layout {
        sample: PosterSample {
            seed,
            image: img,
            subject_mask: subject,
            prompt_tokens: tokens,
            text: TextSpec { lines },
            excluded_boxes: excluded,
            fg_extended: None,
            true_mask: None,
        },
        subject_color,
        text_rects,
    })
}

fn paint(img: &mut RgbImage, m: &Mask, c: Rgb) {
    for i in 0..m.data.len() {
        if m.data[i] != 0 {
            img.put(i % m.width, i / m.width, c);
        }
    }
}

pub fn alphabet(cfg: &SynthConfig) -> Result<Vec<GlyphBitmap>> {
    glyphrep::render_alphabet(cfg.alphabet_size, cfg.font_seed, glyphrep::GLYPH_SIZE)
}

pub fn synth_sample(seed: u64, cfg: &SynthConfig) -> Result<PosterSample> {
    cfg.validate()?;
    let glyphs = alphabet(cfg)?;
    let mut lay = compose(seed, cfg, &glyphs)?;
    let mut rng = CounterRng::derive(seed, "prop", &[]);
    if rng.bernoulli(cfg.prop_rate) {
        let s = &mut lay.sample;
        if let Some((add, _)) = protrusion(&mut rng, &s.subject_mask, &lay.text_rects, (0.05, 0.15)) {
            paint(&mut s.image, &add, lay.subject_color);
            s.true_mask = Some(s.subject_mask.union(&add));
        }
    }
    Ok(lay.sample)
}

pub fn synth_extension_pair(seed: u64, cfg: &SynthConfig) -> Result<ExtensionPair> {
    cfg.validate()?;
    let glyphs = alphabet(cfg)?;
    let mut attempt = 0u64;
    loop {
        let s = stream_id("extension", &[seed, attempt]);
        let lay = compose(s, cfg, &glyphs)?;
        let mut rng = CounterRng::derive(s, "protrusion", &[]);
        if let Some((add, rect)) = protrusion(&mut rng, &lay.sample.subject_mask, &lay.text_rects, (0.05, 0.15)) {
            let mut clean = lay.sample;
            clean.fg_extended = Some(false);
            let clean_mask = clean.subject_mask.clone();
            let extended_mask = clean_mask.union(&add);
            let mut extended = clean.clone();
            paint(&mut extended.image, &add, lay.subject_color);
            extended.fg_extended = Some(true);
            extended.true_mask = Some(extended_mask.clone());
            clean.true_mask = Some(clean_mask.clone());
            return Ok(ExtensionPair { clean, extended, clean_mask, extended_mask, protrusion: rect });
        }
        attempt += 1;
        if attempt > 20 {
            return Err(Error::Runtime(format!("seed {seed}: no room for a protrusion")));
        }
    }
}

// ---------------------------------------------------------------- files

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub seed: u64,
    pub prompt_tokens: Vec<usize>,
    pub texts: Vec<TextLine>,
    #[serde(default)]
    pub excluded_boxes: Vec<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fg_extended: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_mask_file: Option<String>,
}

impl Annotation {
    pub fn text_spec(&self) -> TextSpec {
        TextSpec { lines: self.texts.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Index within the pair-generating sequence for extension datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub seed0: u64,
    pub extensions: bool,
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
    /// Seeds that could not be laid out and were skipped.
    #[serde(default)]
    pub rejected: Vec<u64>,
}

pub fn sample_seed(seed0: u64, split: &str, index: u64) -> u64 {
    stream_id(split, &[seed0, index])
}

pub fn write_sample(dir: &Path, id: &str, s: &PosterSample) -> Result<()> {
    s.image.save_png(dir.join(format!("{id}.png")))?;
    s.subject_mask.save_png(dir.join(format!("{id}.mask.png")))?;
    let true_mask_file = match &s.true_mask {
        Some(m) => {
            let f = format!("{id}.true_mask.png");
            m.save_png(dir.join(&f))?;
            Some(f)
        }
        None => None,
    };
    let ann = Annotation {
        seed: s.seed,
        prompt_tokens: s.prompt_tokens.clone(),
        texts: s.text.lines.clone(),
        excluded_boxes: s.excluded_boxes.clone(),
        fg_extended: s.fg_extended,
        true_mask_file,
    };
    crate::image::write_file(dir.join(format!("{id}.json")), &serde_json::to_vec_pretty(&ann)?)
}

/// Write `count` samples (or extension pairs, two files each) to `{out}/{split}/`.
pub fn write_dataset(out: &Path, count: usize, split: &str, seed0: u64, cfg: &SynthConfig, extensions: bool) -> Result<Manifest> {
    use rayon::prelude::*;
    cfg.validate()?;
    let dir = out.join(split);
    std::fs::create_dir_all(&dir)?;
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    let mut index = 0u64;
    while entries.len() < count * if extensions { 2 } else { 1 } {
        let need = if extensions { count - entries.len() / 2 } else { count - entries.len() };
        let seeds: Vec<(u64, u64)> = (index..index + need as u64).map(|i| (i, sample_seed(seed0, split, i))).collect();
        index += need as u64;
        let made: Vec<(u64, u64, Result<Vec<(String, PosterSample)>>)> = seeds
            .par_iter()
            .map(|&(i, s)| {
                let r = if extensions {
                    synth_extension_pair(s, cfg).map(|p| {
                        vec![(format!("{split}-{i:05}-clean"), p.clean), (format!("{split}-{i:05}-ext"), p.extended)]
                    })
                } else {
                    synth_sample(s, cfg).map(|p| vec![(format!("{split}-{i:05}"), p)])
                };
                (i, s, r)
            })
            .collect();
        for (i, s, r) in made {
            match r {
                Ok(items) => {
                    for (id, sample) in items {
                        write_sample(&dir, &id, &sample)?;
                        entries.push(ManifestEntry { id, seed: s, pair: extensions.then_some(i as usize) });
                    }
                }
                Err(Error::Runtime(msg)) => {
                    log::warn!("{msg}; skipping");
                    rejected.push(s);
                }
                Err(e) => return Err(e),
            }
        }
    }
    let manifest = Manifest { split: split.into(), seed0, extensions, config: cfg.clone(), entries, rejected };
    crate::image::write_file(dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Poster sample loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub sample: PosterSample,
}

pub fn load_sample(dir: &Path, id: &str) -> Result<PosterSample> {
    let ann: Annotation = serde_json::from_slice(&std::fs::read(dir.join(format!("{id}.json")))?)?;
    let image = RgbImage::load_png(dir.join(format!("{id}.png")))?;
    let subject_mask = Mask::load_png(dir.join(format!("{id}.mask.png")))?;
    let true_mask = match &ann.true_mask_file {
        Some(f) => Some(Mask::load_png(dir.join(f))?),
        None => None,
    };
    Ok(PosterSample {
        seed: ann.seed,
        image,
        subject_mask,
        prompt_tokens: ann.prompt_tokens.clone(),
        text: ann.text_spec(),
        excluded_boxes: ann.excluded_boxes,
        fg_extended: ann.fg_extended,
        true_mask,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Every sample listed in `{dir}/manifest.json`, in manifest order.
pub fn load_split(dir: &Path) -> Result<Vec<LoadedSample>> {
    use rayon::prelude::*;
    let m = read_manifest(dir)?;
    m.entries
        .par_iter()
        .map(|e| Ok(LoadedSample { id: e.id.clone(), sample: load_sample(dir, &e.id)? }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_png_bytes() {
        let cfg = SynthConfig::default();
        let a = synth_sample(11, &cfg).unwrap();
        let b = synth_sample(11, &cfg).unwrap();
        assert_eq!(a.image.encode_png().unwrap(), b.image.encode_png().unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn subject_area_in_bounds_and_text_outside_subject() {
        let cfg = SynthConfig::default();
        let mut ok = 0;
        for seed in 0..100 {
            let Ok(s) = synth_sample(seed, &cfg) else { continue };
            ok += 1;
            let frac = s.subject_mask.count() as f64 / 4096.0;
            assert!((0.04..=0.25).contains(&frac), "{frac}");
            assert!(!s.text.lines.is_empty() && s.text.lines.len() <= 3);
            let sr = s.subject_mask.bounding_rect().unwrap();
            for l in &s.text.lines {
                let r = l.bbox.to_pixels(64, 64);
                assert!(!r.intersects(&sr));
                assert_eq!(r.x0 % 4, 0);
                assert!((2..=6).contains(&l.content.len()));
            }
            s.text.validate(cfg.alphabet_size).unwrap();
        }
        assert!(ok >= 80, "{ok}");
    }

    #[test]
    fn background_from_tokens_alone() {
        let cfg = SynthConfig { with_text: false, ..SynthConfig::default() };
        let s = synth_sample(5, &cfg).unwrap();
        let bg = render_background(&s.prompt_tokens, 64).unwrap();
        for i in 0..64 * 64 {
            if s.subject_mask.data[i] == 0 {
                assert_eq!(bg.get(i % 64, i / 64), s.image.get(i % 64, i / 64));
            }
        }
        assert!(Prompt::from_tokens(&[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn extension_pairs_are_strict_supersets() {
        let cfg = SynthConfig::default();
        // seeds that fail layout are skipped, as when writing a dataset
        let pairs: Vec<_> = (0..60).filter_map(|seed| synth_extension_pair(seed, &cfg).ok()).take(30).collect();
        assert_eq!(pairs.len(), 30);
        for p in pairs {
            assert!(p.clean_mask.subset_of(&p.extended_mask));
            let added = p.extended_mask.count() - p.clean_mask.count();
            let ratio = added as f64 / p.clean_mask.count() as f64;
            assert!((0.02..=0.15).contains(&ratio), "{ratio}");
            for y in 0..64 {
                for x in 0..64 {
                    if p.clean.image.get(x, y) != p.extended.image.get(x, y) {
                        assert!(p.protrusion.contains(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let m = write_dataset(dir.path(), 6, "train", 3, &cfg, false).unwrap();
        assert_eq!(m.entries.len(), 6);
        let loaded = load_split(&dir.path().join("train")).unwrap();
        for (e, l) in m.entries.iter().zip(&loaded) {
            let fresh = synth_sample(e.seed, &cfg).unwrap();
            assert_eq!(fresh, l.sample);
        }
        let v = write_dataset(dir.path(), 3, "val", 3, &cfg, false).unwrap();
        let train_ids: Vec<_> = m.entries.iter().map(|e| &e.id).collect();
        assert!(v.entries.iter().all(|e| !train_ids.contains(&&e.id)));
        assert!(v.entries.iter().all(|e| m.entries.iter().all(|t| t.seed != e.seed)));
    }
}
