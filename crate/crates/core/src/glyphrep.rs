//! Character-level text conditioning: a procedural glyph font, the glyph
//! feature encoder, the glyph dictionary and token assembly.
//!
//! Every character becomes one token `[r_c | p_rank | p_bbox]` where `r_c` is
//! the pooled glyph feature, `p_rank` a sinusoid of the character's index in
//! its line and `p_bbox` four sinusoids of the line box corners.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{Array, CounterRng, Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::image::BBox;
use crate::nn::{self, Init};

pub const GLYPH_SIZE: usize = 16;
/// Glyph strokes live on a coarse lattice that is upscaled to the bitmap size.
pub const LATTICE: usize = 4;
/// Largest alphabet the procedural font can produce.
pub const MAX_ALPHABET: usize = 64;
pub const FEATURE_DIM: usize = 32;
pub const RANK_DIM: usize = 16;
pub const COORD_DIM: usize = 16;
pub const BBOX_DIM: usize = 4 * COORD_DIM;
pub const TOKEN_DIM: usize = FEATURE_DIM + RANK_DIM + BBOX_DIM;
pub const POS_DIM: usize = RANK_DIM + BBOX_DIM;
/// Box corners are embedded in pixel units of a 64 px canvas so the sinusoid
/// ladder actually varies across the unit interval.
pub const BBOX_SCALE: f64 = 64.0;
pub const MAX_LINES: usize = 7;
pub const MAX_CHARS_PER_LINE: usize = 16;
pub const GLYPH_MAGIC: &[u8; 8] = b"PMGLY001";

/// Correlation ceiling between any two glyph patterns (either polarity).
const MAX_GLYPH_NCC: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphBitmap {
    pub char_id: usize,
    pub size: usize,
    /// Row-major `size x size`, values 0 or 1.
    pub pixels: Vec<u8>,
}

impl GlyphBitmap {
    pub fn lit(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.size + x] != 0
    }
}

/// Lattice cells of one glyph pattern.
fn random_walk(rng: &mut CounterRng) -> [bool; LATTICE * LATTICE] {
    let mut cells = [false; LATTICE * LATTICE];
    let target = 5 + rng.below(5);
    let (mut x, mut y) = (rng.below(LATTICE), rng.below(LATTICE));
    cells[y * LATTICE + x] = true;
    let mut count = 1;
    while count < target {
        match rng.below(4) {
            0 if x + 1 < LATTICE => x += 1,
            1 if x > 0 => x -= 1,
            2 if y + 1 < LATTICE => y += 1,
            3 if y > 0 => y -= 1,
            _ => continue,
        }
        if !cells[y * LATTICE + x] {
            cells[y * LATTICE + x] = true;
            count += 1;
        }
    }
    cells
}

fn pattern_ncc(a: &[bool], b: &[bool]) -> f64 {
    let fa: Vec<f64> = a.iter().map(|&v| v as u8 as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as u8 as f64).collect();
    ncc(&fa, &fb)
}

/// Zero-mean normalized cross-correlation; 0 when either side is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da <= 1e-12 || db <= 1e-12 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

/// Lattice patterns for glyphs `0..count`. Each glyph is drawn in id order and
/// rejected while it correlates too strongly with an earlier one, so the first
/// `k` glyphs do not depend on how many come after them.
fn lattice_patterns(count: usize, font_seed: u64) -> Vec<[bool; LATTICE * LATTICE]> {
    let mut out: Vec<[bool; LATTICE * LATTICE]> = Vec::with_capacity(count);
    for id in 0..count {
        let mut rng = CounterRng::derive(font_seed, "glyph", &[id as u64]);
        let mut ceiling = MAX_GLYPH_NCC;
        let mut tries = 0;
        loop {
            let cand = random_walk(&mut rng);
            let ok = out.iter().all(|p| p != &cand && pattern_ncc(p, &cand).abs() < ceiling);
            if ok {
                out.push(cand);
                break;
            }
            tries += 1;
            if tries % 2000 == 0 {
                ceiling += 0.05;
            }
        }
    }
    out
}

fn upscale(id: usize, cells: &[bool; LATTICE * LATTICE], g: usize) -> GlyphBitmap {
    let mut pixels = vec![0u8; g * g];
    for y in 0..g {
        for x in 0..g {
            pixels[y * g + x] = cells[(y * LATTICE / g) * LATTICE + x * LATTICE / g] as u8;
        }
    }
    GlyphBitmap { char_id: id, size: g, pixels }
}

fn check_size(g: usize) -> Result<()> {
    if g == 0 || g % LATTICE != 0 {
        return input_err(format!("glyph size {g} must be a positive multiple of {LATTICE}"));
    }
    Ok(())
}

/// Bitmap of one character of the procedural font.
pub fn render_char_glyph(char_id: usize, font_seed: u64, g: usize) -> Result<GlyphBitmap> {
    if char_id >= MAX_ALPHABET {
        return input_err(format!("char id {char_id} outside the font (max {MAX_ALPHABET})"));
    }
    check_size(g)?;
    let patterns = lattice_patterns(char_id + 1, font_seed);
    Ok(upscale(char_id, &patterns[char_id], g))
}

/// Bitmaps for ids `0..alphabet_size`.
pub fn render_alphabet(alphabet_size: usize, font_seed: u64, g: usize) -> Result<Vec<GlyphBitmap>> {
    if alphabet_size == 0 || alphabet_size > MAX_ALPHABET {
        return input_err(format!("alphabet size {alphabet_size} must be in 1..={MAX_ALPHABET}"));
    }
    check_size(g)?;
    Ok(lattice_patterns(alphabet_size, font_seed).iter().enumerate().map(|(i, p)| upscale(i, p, g)).collect())
}

// ---------------------------------------------------------------- encoder

pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, seed: u64, dim: usize) -> Result<()> {
    let mut init = Init::new(store, seed, "glyph");
    init.conv("glyph.c1", 3, 1, 16)?;
    init.conv("glyph.c2", 3, 16, 32)?;
    init.conv("glyph.c3", 3, 32, dim)?;
    Ok(())
}

/// Stack bitmaps into an NHWC batch `[K, G, G, 1]`.
pub fn bitmaps_array<T: Scalar>(glyphs: &[GlyphBitmap]) -> Result<Array<T>> {
    let g = glyphs.first().map(|b| b.size).unwrap_or(GLYPH_SIZE);
    let mut data = Vec::with_capacity(glyphs.len() * g * g);
    for b in glyphs {
        if b.size != g || b.pixels.len() != g * g {
            return input_err("glyph bitmaps must share one square size");
        }
        data.extend(b.pixels.iter().map(|&p| T::of(p as f64)));
    }
    Ok(Array::from_vec(&[glyphs.len(), g, g, 1], data)?)
}

/// Final encoder feature map `[K, G/4, G/4, c]` before pooling.
pub fn encoder_feature_map<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
    let h = nn::conv(g, ps, "glyph.c1", x, 1, 1)?;
    let h = g.silu(h)?;
    let h = nn::conv(g, ps, "glyph.c2", h, 2, 1)?;
    let h = g.silu(h)?;
    nn::conv(g, ps, "glyph.c3", h, 2, 1)
}

/// Pooled glyph features `[K, c]`.
pub fn encode_glyphs<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
    let f = encoder_feature_map(g, ps, x)?;
    let s = g.shape(f).to_vec();
    let f = g.reshape(f, &[s[0], s[1] * s[2], s[3]])?;
    let m = g.mean_axis(f, 1)?;
    Ok(g.reshape(m, &[s[0], s[3]])?)
}

/// Feature vector of a single glyph (the dictionary entry).
pub fn encode_char<T: Scalar>(bitmap: &GlyphBitmap, ps: &ParamStore<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let x = g.constant(bitmaps_array(std::slice::from_ref(bitmap))?)?;
    let r = encode_glyphs(&mut g, ps, x)?;
    Ok(g.value(r).data().to_vec())
}

// ---------------------------------------------------------------- dictionary

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphTable {
    pub dim: usize,
    pub entries: BTreeMap<usize, Vec<f32>>,
}

impl GlyphTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&[f32]> {
        self.entries.get(&id).map(|v| v.as_slice()).ok_or_else(|| Error::Input(format!("no glyph for char {id}")))
    }

    /// Rows `0..len` stacked into `[len, dim]`; ids must be contiguous from 0.
    pub fn to_array<T: Scalar>(&self) -> Result<Array<T>> {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for (want, (id, v)) in self.entries.iter().enumerate() {
            if *id != want {
                return input_err("glyph table ids are not contiguous");
            }
            data.extend(v.iter().map(|&x| T::of(x as f64)));
        }
        Ok(Array::from_vec(&[self.len(), self.dim], data)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (4 + 4 * self.dim));
        out.extend_from_slice(GLYPH_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(*id as u32).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("glyph dictionary: {m}"));
        if bytes.len() < 16 || &bytes[..8] != GLYPH_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (count, dim) = (u32_at(8), u32_at(12));
        let rec = 4 + 4 * dim;
        if bytes.len() != 16 + count * rec {
            return Err(bad("truncated or oversized"));
        }
        let mut entries = BTreeMap::new();
        for r in 0..count {
            let base = 16 + r * rec;
            let id = u32_at(base);
            let v = (0..dim)
                .map(|k| f32::from_le_bytes(bytes[base + 4 + 4 * k..base + 8 + 4 * k].try_into().unwrap()))
                .collect();
            if entries.insert(id, v).is_some() {
                return Err(bad("duplicate char id"));
            }
        }
        Ok(GlyphTable { dim, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::image::write_file(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn build_glyph_table(alphabet: &[GlyphBitmap], ps: &ParamStore<f32>) -> Result<GlyphTable> {
    let mut entries = BTreeMap::new();
    let mut dim = 0;
    for b in alphabet {
        let v = encode_char(b, ps)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Runtime(format!("non-finite feature for char {}", b.char_id)));
        }
        dim = v.len();
        if entries.insert(b.char_id, v).is_some() {
            return input_err(format!("duplicate char id {}", b.char_id));
        }
    }
    Ok(GlyphTable { dim, entries })
}

// ---------------------------------------------------------------- tokens

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextLine {
    pub content: Vec<usize>,
    pub bbox: BBox,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextSpec {
    pub lines: Vec<TextLine>,
}

impl TextSpec {
    pub fn validate(&self, alphabet_size: usize) -> Result<()> {
        if self.lines.len() > MAX_LINES {
            return input_err(format!("{} text lines exceed the limit of {MAX_LINES}", self.lines.len()));
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.content.is_empty() || l.content.len() > MAX_CHARS_PER_LINE {
                return input_err(format!("line {i} must hold 1..={MAX_CHARS_PER_LINE} chars"));
            }
            if let Some(c) = l.content.iter().find(|&&c| c >= alphabet_size) {
                return input_err(format!("line {i}: char {c} outside alphabet of {alphabet_size}"));
            }
            if !l.bbox.is_valid() || !l.bbox.within_unit() {
                return input_err(format!("line {i}: bbox {:?} is not a box inside [0,1]", l.bbox));
            }
        }
        Ok(())
    }

    pub fn num_chars(&self) -> usize {
        self.lines.iter().map(|l| l.content.len()).sum()
    }

    /// Char ids in token order (line order, then char order).
    pub fn char_ids(&self) -> Vec<usize> {
        self.lines.iter().flat_map(|l| l.content.iter().copied()).collect()
    }
}

/// How text lines become conditioning tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// One token per character.
    #[default]
    Char,
    /// One token per line carrying the mean glyph feature of the line.
    Line,
}

pub fn sinusoidal_embed(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return input_err(format!("sinusoid dim {dim} must be even"));
    }
    Ok(nn::sinusoid(value, dim))
}

pub fn bbox_embed(b: &BBox) -> Vec<f64> {
    [b.x0, b.y0, b.x1, b.y1].iter().flat_map(|&v| nn::sinusoid(v * BBOX_SCALE, COORD_DIM)).collect()
}

pub fn num_tokens(spec: &TextSpec, rep: Representation) -> usize {
    match rep {
        Representation::Char => spec.num_chars(),
        Representation::Line => spec.lines.len(),
    }
}

/// `[p_rank | p_bbox]` rows `[L, POS_DIM]` for every token.
pub fn position_features<T: Scalar>(spec: &TextSpec, rep: Representation) -> Array<T> {
    let mut data = Vec::new();
    for line in &spec.lines {
        let pb = bbox_embed(&line.bbox);
        let ranks = match rep {
            Representation::Char => line.content.len(),
            Representation::Line => 1,
        };
        for r in 0..ranks {
            data.extend(nn::sinusoid(r as f64, RANK_DIM).into_iter().map(T::of));
            data.extend(pb.iter().map(|&v| T::of(v)));
        }
    }
    let n = data.len() / POS_DIM;
    Array::from_vec(&[n, POS_DIM], data).expect("position rows")
}

/// Row-averaging matrix `[lines, chars]` that pools each line's characters.
fn line_pool_matrix<T: Scalar>(spec: &TextSpec) -> Array<T> {
    let (nl, nc) = (spec.lines.len(), spec.num_chars());
    let mut m = Array::zeros(&[nl, nc]);
    let mut col = 0;
    for (i, l) in spec.lines.iter().enumerate() {
        let w = T::one() / T::of(l.content.len() as f64);
        for _ in &l.content {
            m.data_mut()[i * nc + col] = w;
            col += 1;
        }
    }
    m
}

/// Token rows `[L, c + POS_DIM]` from in-graph glyph features `[K, c]`.
pub fn text_tokens<T: Scalar>(
    g: &mut Graph<T>,
    glyph_features: Var,
    spec: &TextSpec,
    rep: Representation,
) -> Result<Var> {
    let ids = spec.char_ids();
    if ids.is_empty() {
        return input_err("text spec has no characters");
    }
    let k = g.shape(glyph_features)[0];
    if let Some(c) = ids.iter().find(|&&c| c >= k) {
        return input_err(format!("no glyph for char {c}"));
    }
    let mut r = g.embedding(glyph_features, &ids)?;
    if rep == Representation::Line {
        let pool = g.constant(line_pool_matrix(spec))?;
        r = g.matmul(pool, r)?;
    }
    let pos = g.constant(position_features(spec, rep))?;
    Ok(g.concat(&[r, pos], 1)?)
}

/// Token rows `[L, TOKEN_DIM]` from the precomputed dictionary.
pub fn text_representation(spec: &TextSpec, table: &GlyphTable) -> Result<Array<f32>> {
    representation_from_table(spec, table, Representation::Char)
}

/// Line-level baseline tokens: one row per line.
pub fn line_representation(spec: &TextSpec, table: &GlyphTable) -> Result<Array<f32>> {
    representation_from_table(spec, table, Representation::Line)
}

pub fn representation_from_table(spec: &TextSpec, table: &GlyphTable, rep: Representation) -> Result<Array<f32>> {
    for l in &spec.lines {
        if !l.bbox.is_valid() || !l.bbox.within_unit() {
            return input_err(format!("bbox {:?} is not a box inside [0,1]", l.bbox));
        }
        for &c in &l.content {
            table.get(c)?;
        }
    }
    let mut g = Graph::<f32>::new();
    let feats = g.constant(table.to_array()?)?;
    let t = text_tokens(&mut g, feats, spec, rep)?;
    Ok(g.value(t).clone())
}

pub fn init_adapter<T: Scalar>(store: &mut ParamStore<T>, seed: u64, token_dim: usize, width: usize) -> Result<()> {
    let mut init = Init::new(store, seed, "adapter");
    init.linear("adapter.proj", token_dim, width)?;
    init.layer_norm("adapter.ln", width)
}

/// Linear projection to model width followed by layer normalization.
pub fn adapt<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, tokens: Var) -> Result<Var> {
    let din = ps.get("adapter.proj.w")?.shape()[0];
    let have = *g.shape(tokens).last().unwrap_or(&0);
    if have != din {
        return input_err(format!("token dim {have} does not match adapter input {din}"));
    }
    let h = nn::linear(g, ps, "adapter.proj", tokens)?;
    nn::layer_norm_affine(g, ps, "adapter.ln", h)
}
