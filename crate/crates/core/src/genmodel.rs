//! Pixel-space rectified-flow MM-DiT with text-rendering and scene-generation
//! control branches.
//!
//! Images are NHWC in `[-1, 1]`. Patches of `P x P` pixels become tokens; every
//! block runs joint attention over `[context; image]` with per-stream adaLN
//! modulation. Branch blocks are copies of base blocks whose image-stream
//! outputs pass zero-initialized projections and are added to the base.

use std::collections::BTreeMap;

use diffcore::{Array, CounterRng, Graph, ParamStore, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::glyphrep::{self, Representation, TextSpec, POS_DIM};
use crate::image::Mask;
use crate::nn::{self, Init};

/// Smallest time used when converting the clean-image head to a velocity.
pub const MIN_T: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub base_blocks: usize,
    pub scene_blocks: usize,
    pub text_blocks: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
    pub alphabet_size: usize,
    pub font_seed: u64,
    pub glyph_dim: usize,
    pub freeze_glyph_encoder: bool,
    pub representation: Representation,
    pub sampler_steps: usize,
    pub cfg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            patch: 8,
            width: 128,
            heads: 4,
            mlp_ratio: 4,
            base_blocks: 8,
            scene_blocks: 8,
            text_blocks: 4,
            prompt_vocab: crate::datasynth::PROMPT_VOCAB,
            prompt_len: crate::datasynth::PROMPT_LEN,
            alphabet_size: 16,
            font_seed: 0,
            glyph_dim: glyphrep::FEATURE_DIM,
            freeze_glyph_encoder: false,
            representation: Representation::Char,
            sampler_steps: 28,
            cfg_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return config_err(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.scene_blocks != self.base_blocks {
            return config_err("scene_blocks must equal base_blocks");
        }
        if self.text_blocks != self.base_blocks.div_ceil(2) {
            return config_err("text_blocks must equal ceil(base_blocks / 2)");
        }
        if self.heads == 0 || self.width % self.heads != 0 || (self.width / 2) % 2 != 0 {
            return config_err("width must split evenly into heads and sinusoid halves");
        }
        if self.alphabet_size == 0 || self.alphabet_size > glyphrep::MAX_ALPHABET {
            return config_err(format!("alphabet_size must be in 1..={}", glyphrep::MAX_ALPHABET));
        }
        if self.sampler_steps == 0 || self.prompt_len == 0 || self.mlp_ratio == 0 {
            return config_err("sampler_steps, prompt_len and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }

    pub fn token_dim(&self) -> usize {
        self.glyph_dim + POS_DIM
    }
}

// ---------------------------------------------------------------- init

fn init_block<T: Scalar>(init: &mut Init<T>, p: &str, d: usize, r: usize) -> Result<()> {
    for s in ["x", "c"] {
        init.linear_zero(&format!("{p}.{s}.mod"), d, 6 * d)?;
        init.linear(&format!("{p}.{s}.qkv"), d, 3 * d)?;
        init.linear(&format!("{p}.{s}.proj"), d, d)?;
        init.linear(&format!("{p}.{s}.mlp1"), d, r * d)?;
        init.linear(&format!("{p}.{s}.mlp2"), r * d, d)?;
    }
    Ok(())
}

fn init_time<T: Scalar>(init: &mut Init<T>, p: &str, d: usize) -> Result<()> {
    init.linear(&format!("{p}.t_embed.l1"), d, d)?;
    init.linear(&format!("{p}.t_embed.l2"), d, d)
}

/// Fresh parameters for every namespace: base, text, scene, adapter, glyph.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let (d, r, c) = (cfg.width, cfg.mlp_ratio, cfg.channels);
    let mut store = ParamStore::new();
    {
        let mut init = Init::new(&mut store, seed, "base");
        init.linear("base.x_embed", cfg.patch_dim(c), d)?;
        init.normal("base.prompt_embed", &[cfg.prompt_vocab, d], 1.0)?;
        init.normal("base.prompt_pos", &[cfg.prompt_len, d], 0.1)?;
        init.normal("base.null_prompt", &[cfg.prompt_len, d], 1.0)?;
        init_time(&mut init, "base", d)?;
        init.linear("base.y_prompt", d, d)?;
        for i in 0..cfg.base_blocks {
            init_block(&mut init, &format!("base.blocks.{i}"), d, r)?;
        }
        init.linear_zero("base.final.mod", d, 2 * d)?;
        init.normal("base.final.proj.w", &[d, cfg.patch_dim(c)], 0.02)?;
        init.zeros("base.final.proj.b", &[cfg.patch_dim(c)])?;
    }
    {
        let mut init = Init::new(&mut store, seed, "text");
        init.linear("text.x_embed", cfg.patch_dim(c), d)?;
        init_time(&mut init, "text", d)?;
        for j in 0..cfg.text_blocks {
            init_block(&mut init, &format!("text.blocks.{j}"), d, r)?;
            init.linear_zero(&format!("text.zero.{j}"), d, d)?;
        }
    }
    {
        let mut init = Init::new(&mut store, seed, "scene");
        init.linear("scene.x_embed", cfg.patch_dim(2 * c + 1), d)?;
        init_time(&mut init, "scene", d)?;
        init.linear("scene.y_prompt", d, d)?;
        for i in 0..cfg.scene_blocks {
            init_block(&mut init, &format!("scene.blocks.{i}"), d, r)?;
            init.linear_zero(&format!("scene.zero.{i}"), d, d)?;
        }
    }
    glyphrep::init_adapter(&mut store, seed, cfg.token_dim(), d)?;
    glyphrep::init_encoder(&mut store, seed, cfg.glyph_dim)?;
    Ok(store)
}

fn copy_prefix<T: Scalar>(ps: &mut ParamStore<T>, from: &str, to: &str) -> Result<()> {
    let names: Vec<String> = ps.names().filter(|n| n.starts_with(from)).map(String::from).collect();
    for n in names {
        let v = ps.get(&n)?.clone();
        let target = format!("{to}{}", &n[from.len()..]);
        let slot = ps.get_mut(&target)?;
        if slot.shape() != v.shape() {
            return Err(Error::Runtime(format!("cannot copy {n} into {target}: shape mismatch")));
        }
        *slot = v;
    }
    Ok(())
}

/// Initialize both branches from the current base weights. The scene input
/// projection keeps the base rows for the noisy-image channels and zeros for
/// the mask and masked-image channels.
pub fn copy_base_into_branches<T: Scalar>(ps: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<()> {
    for j in 0..cfg.text_blocks {
        copy_prefix(ps, &format!("base.blocks.{j}."), &format!("text.blocks.{j}."))?;
    }
    for i in 0..cfg.scene_blocks {
        copy_prefix(ps, &format!("base.blocks.{i}."), &format!("scene.blocks.{i}."))?;
    }
    for p in ["text", "scene"] {
        copy_prefix(ps, "base.t_embed.", &format!("{p}.t_embed."))?;
    }
    copy_prefix(ps, "base.x_embed.", "text.x_embed.")?;
    copy_prefix(ps, "base.y_prompt.", "scene.y_prompt.")?;

    let c = cfg.channels;
    let cs = 2 * c + 1;
    let d = cfg.width;
    let bw = ps.get("base.x_embed.w")?.clone();
    let mut sw = Array::zeros(&[cfg.patch_dim(cs), d]);
    for pix in 0..cfg.patch * cfg.patch {
        for ch in 0..c {
            let (src, dst) = ((pix * c + ch) * d, (pix * cs + ch) * d);
            sw.data_mut()[dst..dst + d].copy_from_slice(&bw.data()[src..src + d]);
        }
    }
    ps.set("scene.x_embed.w", sw);
    let bb = ps.get("base.x_embed.b")?.clone();
    ps.set("scene.x_embed.b", bb);
    Ok(())
}

// ---------------------------------------------------------------- layout helpers

/// `[B, H, W, C] -> [B, N, P*P*C]`, patch-major with `(py, px, c)` inside a patch.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let r = g.reshape(x, &[b, h / p, p, w / p, p, c])?;
    let r = g.transpose(r, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(r, &[b, (h / p) * (w / p), p * p * c])?)
}

pub fn unpatchify<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let b = s[0];
    let c = s[2] / (p * p);
    let r = g.reshape(x, &[b, h / p, w / p, p, p, c])?;
    let r = g.transpose(r, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(r, &[b, h, w, c])?)
}

/// Fixed 2-D sincos embedding of patch centers in pixel units, `[N, d]`.
pub fn patch_positions<T: Scalar>(cfg: &ModelConfig) -> Array<T> {
    let (n, d, p) = (cfg.grid(), cfg.width, cfg.patch);
    let mut data = Vec::with_capacity(n * n * d);
    for r in 0..n {
        for c in 0..n {
            let center = |i: usize| (i * p) as f64 + p as f64 / 2.0;
            data.extend(nn::sinusoid(center(r), d / 2).into_iter().map(T::of));
            data.extend(nn::sinusoid(center(c), d / 2).into_iter().map(T::of));
        }
    }
    Array::from_vec(&[n * n, d], data).expect("position table")
}

fn time_features<T: Scalar>(t: &[f64], d: usize) -> Array<T> {
    let data = t.iter().flat_map(|&v| nn::sinusoid(v * 1000.0, d)).map(T::of).collect();
    Array::from_vec(&[t.len(), d], data).expect("time features")
}

fn time_embed<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, p: &str, t: &[f64], d: usize) -> Result<Var> {
    let f = g.constant(time_features(t, d))?;
    let h = nn::linear(g, ps, &format!("{p}.t_embed.l1"), f)?;
    let h = g.silu(h)?;
    nn::linear(g, ps, &format!("{p}.t_embed.l2"), h)
}

/// Time embedding plus a projection of the mean prompt token, `[B, d]`.
fn conditioning_vector<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    p: &str,
    t: &[f64],
    prompt: Var,
    d: usize,
) -> Result<Var> {
    let te = time_embed(g, ps, p, t, d)?;
    let pm = g.mean_axis(prompt, 1)?;
    let pe = nn::linear(g, ps, &format!("{p}.y_prompt"), pm)?;
    Ok(g.add(te, pe)?)
}

// ---------------------------------------------------------------- block

struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
}

fn modulation<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, name: &str, sy: Var, d: usize) -> Result<Modulation> {
    let m = nn::linear(g, ps, name, sy)?;
    let b = g.shape(m)[0];
    let m = g.reshape(m, &[b, 1, 6 * d])?;
    let v = g.split(m, 2, &[d; 6])?;
    Ok(Modulation { shift1: v[0], scale1: v[1], gate1: v[2], shift2: v[3], scale2: v[4], gate2: v[5] })
}

fn mlp<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, p: &str, x: Var) -> Result<Var> {
    let h = nn::linear(g, ps, &format!("{p}.mlp1"), x)?;
    let h = g.gelu(h)?;
    nn::linear(g, ps, &format!("{p}.mlp2"), h)
}

/// One MM-DiT block over image tokens `x: [B, N, d]` and context `c: [B, L, d]`
/// conditioned on `y: [B, d]`. `key_mask: [B, 1, 1, L + N]` is added to the
/// attention scores.
fn mmdit_block<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    p: &str,
    x: Var,
    c: Var,
    y: Var,
    key_mask: Option<Var>,
) -> Result<(Var, Var)> {
    let d = cfg.width;
    let eps = T::of(nn::LN_EPS);
    let sy = g.silu(y)?;
    let mx = modulation(g, ps, &format!("{p}.x.mod"), sy, d)?;
    let mc = modulation(g, ps, &format!("{p}.c.mod"), sy, d)?;
    let l = g.shape(c)[1];
    let n = g.shape(x)[1];

    let hx = g.layer_norm(x, eps)?;
    let hx = nn::modulate(g, hx, mx.shift1, mx.scale1)?;
    let hc = g.layer_norm(c, eps)?;
    let hc = nn::modulate(g, hc, mc.shift1, mc.scale1)?;
    let qx = nn::linear(g, ps, &format!("{p}.x.qkv"), hx)?;
    let qc = nn::linear(g, ps, &format!("{p}.c.qkv"), hc)?;
    let qkv = g.concat(&[qc, qx], 1)?;
    let a = nn::multi_head_attention(g, qkv, cfg.heads, key_mask)?;
    let parts = g.split(a, 1, &[l, n])?;

    let streams = [(x, parts[1], &mx, "x"), (c, parts[0], &mc, "c")];
    let mut out = Vec::with_capacity(2);
    for (h, att, m, s) in streams {
        let o = nn::linear(g, ps, &format!("{p}.{s}.proj"), att)?;
        let o = g.mul(o, m.gate1)?;
        let h = g.add(h, o)?;
        let u = g.layer_norm(h, eps)?;
        let u = nn::modulate(g, u, m.shift2, m.scale2)?;
        let u = mlp(g, ps, &format!("{p}.{s}"), u)?;
        let u = g.mul(u, m.gate2)?;
        out.push(g.add(h, u)?);
    }
    Ok((out[0], out[1]))
}

// ---------------------------------------------------------------- conditions

/// Per-sample control inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBundle {
    pub text: TextSpec,
    /// Text condition replaced by zero tokens.
    pub text_dropped: bool,
    pub prompt_ids: Vec<usize>,
    /// Prompt replaced by the null embedding.
    pub prompt_dropped: bool,
    /// Known region `M`: 1 where the scene branch is given the input pixels.
    pub known_mask: Mask,
    /// `image * M` in `[-1, 1]`, `[H, W, C]`.
    pub masked_image: Array<f32>,
}

/// Batched text condition: token layout, validity and drop flags.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub batch: usize,
    pub len: usize,
    /// `[B * L, K]` row-selection / row-averaging matrix over glyph features.
    pub select: Array<f64>,
    /// `[B * L, POS_DIM]` order and box encodings.
    pub pos: Array<f64>,
    /// Token present in the sample.
    pub valid: Vec<bool>,
    /// Sample keeps its text (not dropped).
    pub keep: Vec<bool>,
}

impl TextBatch {
    pub fn new(specs: &[&TextSpec], dropped: &[bool], rep: Representation, alphabet: usize) -> Result<Self> {
        let b = specs.len();
        let len = specs.iter().map(|s| glyphrep::num_tokens(s, rep)).max().unwrap_or(0);
        let mut select = Array::zeros(&[b * len, alphabet]);
        let mut pos = Array::zeros(&[b * len, POS_DIM]);
        let mut valid = vec![false; b * len];
        for (i, spec) in specs.iter().enumerate() {
            let pf = glyphrep::position_features::<f64>(spec, rep);
            let mut row = i * len;
            for line in &spec.lines {
                let groups: Vec<&[usize]> = match rep {
                    Representation::Char => line.content.chunks(1).collect(),
                    Representation::Line => vec![&line.content[..]],
                };
                for grp in groups {
                    for &ch in grp {
                        if ch >= alphabet {
                            return input_err(format!("char {ch} outside alphabet of {alphabet}"));
                        }
                        select.data_mut()[row * alphabet + ch] += 1.0 / grp.len() as f64;
                    }
                    let k = row - i * len;
                    pos.data_mut()[row * POS_DIM..(row + 1) * POS_DIM]
                        .copy_from_slice(&pf.data()[k * POS_DIM..(k + 1) * POS_DIM]);
                    valid[row] = true;
                    row += 1;
                }
            }
        }
        Ok(Self { batch: b, len, select, pos, valid, keep: dropped.iter().map(|d| !d).collect() })
    }

    fn concat(&self, o: &TextBatch) -> Result<TextBatch> {
        if self.len != o.len {
            return input_err("text batches differ in token length");
        }
        let cat = |a: &Array<f64>, b: &Array<f64>| {
            let mut d = a.data().to_vec();
            d.extend_from_slice(b.data());
            Array::from_vec(&[a.shape()[0] + b.shape()[0], a.shape()[1]], d)
        };
        Ok(TextBatch {
            batch: self.batch + o.batch,
            len: self.len,
            select: cat(&self.select, &o.select)?,
            pos: cat(&self.pos, &o.pos)?,
            valid: [self.valid.clone(), o.valid.clone()].concat(),
            keep: [self.keep.clone(), o.keep.clone()].concat(),
        })
    }
}

/// Batched conditions for one velocity evaluation.
#[derive(Clone, Debug)]
pub struct CondBatch {
    pub t: Vec<f64>,
    pub prompt_ids: Vec<Vec<usize>>,
    pub prompt_dropped: Vec<bool>,
    pub text: Option<TextBatch>,
    /// Known mask `[B, H, W, 1]` and masked image `[B, H, W, C]`.
    pub scene: Option<(Array<f64>, Array<f64>)>,
}

fn stack<T: Scalar>(items: &[Array<T>]) -> Result<Array<T>> {
    let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for a in items {
        if a.shape() != first.shape() {
            return input_err("batch items differ in shape");
        }
        data.extend_from_slice(a.data());
    }
    Ok(Array::from_vec(&shape, data)?)
}

pub fn stack_arrays<T: Scalar>(items: &[Array<T>]) -> Result<Array<T>> {
    stack(items)
}

impl CondBatch {
    /// Conditions from bundles; `with_text` / `with_scene` switch the branches on.
    pub fn from_bundles(
        bundles: &[ControlBundle],
        t: Vec<f64>,
        cfg: &ModelConfig,
        with_text: bool,
        with_scene: bool,
    ) -> Result<Self> {
        if bundles.len() != t.len() || bundles.is_empty() {
            return input_err("bundle and time counts differ or are empty");
        }
        let text = if with_text {
            let specs: Vec<&TextSpec> = bundles.iter().map(|b| &b.text).collect();
            let dropped: Vec<bool> = bundles.iter().map(|b| b.text_dropped).collect();
            let tb = TextBatch::new(&specs, &dropped, cfg.representation, cfg.alphabet_size)?;
            (tb.len > 0).then_some(tb)
        } else {
            None
        };
        let scene = if with_scene {
            let masks: Vec<Array<f64>> = bundles.iter().map(|b| b.known_mask.to_array()).collect();
            let imgs: Vec<Array<f64>> = bundles.iter().map(|b| b.masked_image.cast()).collect();
            Some((stack(&masks)?, stack(&imgs)?))
        } else {
            None
        };
        for b in bundles {
            if b.prompt_ids.len() != cfg.prompt_len || b.prompt_ids.iter().any(|&p| p >= cfg.prompt_vocab) {
                return input_err(format!("prompt must be {} ids below {}", cfg.prompt_len, cfg.prompt_vocab));
            }
        }
        Ok(Self {
            t,
            prompt_ids: bundles.iter().map(|b| b.prompt_ids.clone()).collect(),
            prompt_dropped: bundles.iter().map(|b| b.prompt_dropped).collect(),
            text,
            scene,
        })
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }

    pub fn with_time(&self, t: f64) -> Self {
        let mut c = self.clone();
        c.t = vec![t; self.batch()];
        c
    }

    /// Conditional rows followed by unconditional rows (zero text tokens, null prompt).
    pub fn with_uncond(&self) -> Result<Self> {
        let b = self.batch();
        let text = match &self.text {
            Some(tb) => {
                let mut u = tb.clone();
                u.keep = vec![false; b];
                Some(tb.concat(&u)?)
            }
            None => None,
        };
        let scene = match &self.scene {
            Some((m, x)) => {
                let dup = |a: &Array<f64>| -> Result<Array<f64>> {
                    let mut shape = a.shape().to_vec();
                    shape[0] *= 2;
                    Ok(Array::from_vec(&shape, [a.data(), a.data()].concat())?)
                };
                Some((dup(m)?, dup(x)?))
            }
            None => None,
        };
        Ok(Self {
            t: [self.t.clone(), self.t.clone()].concat(),
            prompt_ids: [self.prompt_ids.clone(), self.prompt_ids.clone()].concat(),
            prompt_dropped: [self.prompt_dropped.clone(), vec![true; b]].concat(),
            text,
            scene,
        })
    }
}

fn cast<T: Scalar>(a: &Array<f64>) -> Array<T> {
    a.cast()
}

/// Prompt token stream `[B, prompt_len, d]`; dropped rows use the null embedding.
pub fn prompt_tokens<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, cfg: &ModelConfig, cb: &CondBatch) -> Result<Var> {
    let table = g.param(ps, "base.prompt_embed")?;
    let null = g.param(ps, "base.null_prompt")?;
    let all = g.concat(&[table, null], 0)?;
    let mut ids = Vec::with_capacity(cb.batch() * cfg.prompt_len);
    for (row, &drop) in cb.prompt_ids.iter().zip(&cb.prompt_dropped) {
        for (j, &id) in row.iter().enumerate() {
            ids.push(if drop { cfg.prompt_vocab + j } else { id });
        }
    }
    let e = g.embedding(all, &ids)?;
    let e = g.reshape(e, &[cb.batch(), cfg.prompt_len, cfg.width])?;
    let pos = g.param(ps, "base.prompt_pos")?;
    Ok(g.add(e, pos)?)
}

/// Glyph features `[K, c]` for the configured alphabet, computed by the encoder.
pub fn glyph_features<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, bitmaps: &Array<T>) -> Result<Var> {
    let x = g.constant(bitmaps.clone())?;
    glyphrep::encode_glyphs(g, ps, x)
}

pub fn alphabet_bitmaps<T: Scalar>(cfg: &ModelConfig) -> Result<Array<T>> {
    glyphrep::bitmaps_array(&glyphrep::render_alphabet(cfg.alphabet_size, cfg.font_seed, glyphrep::GLYPH_SIZE)?)
}

/// Adapted text tokens `[B, L, d]` and the matching key mask `[B, 1, 1, L + N]`.
pub fn text_condition<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    tb: &TextBatch,
    feats: Var,
) -> Result<(Var, Var)> {
    let (b, l, d, n) = (tb.batch, tb.len, cfg.width, cfg.num_patches());
    let sel = g.constant(cast(&tb.select))?;
    let r = g.matmul(sel, feats)?;
    let pos = g.constant(cast(&tb.pos))?;
    let tok = g.concat(&[r, pos], 1)?;
    let a = glyphrep::adapt(g, ps, tok)?;
    let a = g.reshape(a, &[b, l, d])?;
    let keep = Array::from_fn(&[b, l, 1], |i| T::of((tb.valid[i] && tb.keep[i / l]) as u8 as f64));
    let keep = g.constant(keep)?;
    let a = g.mul(a, keep)?;
    let mut mask = Array::zeros(&[b, 1, 1, l + n]);
    for i in 0..b {
        for k in 0..l {
            if !tb.valid[i * l + k] {
                mask.data_mut()[i * (l + n) + k] = T::of(-1e9);
            }
        }
    }
    let mask = g.constant(mask)?;
    Ok((a, mask))
}

fn embed_image<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, cfg: &ModelConfig, name: &str, img: Var) -> Result<Var> {
    let p = patchify(g, img, cfg.patch)?;
    let h = nn::linear(g, ps, name, p)?;
    let pos = g.constant(patch_positions(cfg))?;
    Ok(g.add(h, pos)?)
}

/// Base velocity; `residuals[i]` is added to the image stream after block `i`.
pub fn base_forward<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    z: Var,
    t: &[f64],
    prompt: Var,
    residuals: Option<&[Var]>,
) -> Result<Var> {
    if let Some(r) = residuals {
        if r.len() != cfg.base_blocks {
            return input_err(format!("{} residuals for {} base blocks", r.len(), cfg.base_blocks));
        }
    }
    let d = cfg.width;
    let mut x = embed_image(g, ps, cfg, "base.x_embed", z)?;
    let mut c = prompt;
    let y = conditioning_vector(g, ps, "base", t, prompt, d)?;
    for i in 0..cfg.base_blocks {
        let (nx, nc) = mmdit_block(g, ps, cfg, &format!("base.blocks.{i}"), x, c, y, None)?;
        x = nx;
        c = nc;
        if let Some(r) = residuals {
            x = g.add(x, r[i])?;
        }
    }
    let sy = g.silu(y)?;
    let m = nn::linear(g, ps, "base.final.mod", sy)?;
    let m = g.reshape(m, &[t.len(), 1, 2 * d])?;
    let sh = g.split(m, 2, &[d, d])?;
    let h = g.layer_norm(x, T::of(nn::LN_EPS))?;
    let h = nn::modulate(g, h, sh[0], sh[1])?;
    let out = nn::linear(g, ps, "base.final.proj", h)?;
    let x0 = unpatchify(g, out, cfg.patch, cfg.image_size, cfg.image_size)?;
    velocity_from_x0(g, z, x0, t)
}

/// `v = (z - x̂0) / max(t, MIN_T)` per batch row. A patch carries more values
/// than the hidden width, so the head predicts the smooth clean image rather
/// than the full-rank noise.
pub fn velocity_from_x0<T: Scalar>(g: &mut Graph<T>, z: Var, x0: Var, t: &[f64]) -> Result<Var> {
    let inv = Array::from_vec(&[t.len(), 1, 1, 1], t.iter().map(|&t| T::of(1.0 / t.max(MIN_T))).collect())?;
    let inv = g.constant(inv)?;
    let d = g.sub(z, x0)?;
    Ok(g.mul(d, inv)?)
}

/// Residuals from the text branch, one per text block.
pub fn text_render_branch<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    z: Var,
    t: &[f64],
    tokens: Var,
    key_mask: Var,
) -> Result<Vec<Var>> {
    if *g.shape(tokens).last().unwrap_or(&0) != cfg.width {
        return input_err("text tokens must be adapted to model width");
    }
    let mut x = embed_image(g, ps, cfg, "text.x_embed", z)?;
    let mut c = tokens;
    let y = time_embed(g, ps, "text", t, cfg.width)?;
    let mut out = Vec::with_capacity(cfg.text_blocks);
    for j in 0..cfg.text_blocks {
        let (nx, nc) = mmdit_block(g, ps, cfg, &format!("text.blocks.{j}"), x, c, y, Some(key_mask))?;
        x = nx;
        c = nc;
        out.push(nn::linear(g, ps, &format!("text.zero.{j}"), x)?);
    }
    Ok(out)
}

/// Residuals from the scene branch, one per base block.
#[allow(clippy::too_many_arguments)]
pub fn scene_gen_branch<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    z: Var,
    t: &[f64],
    prompt: Var,
    known: &Array<T>,
    masked: &Array<T>,
) -> Result<Vec<Var>> {
    if known.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return input_err("scene mask must be binary");
    }
    let zs = g.shape(z).to_vec();
    let mut ms = zs.clone();
    ms[3] = 1;
    if known.shape() != ms.as_slice() || masked.shape() != zs.as_slice() {
        return input_err(format!("scene inputs {:?}/{:?} do not match {:?}", known.shape(), masked.shape(), zs));
    }
    let m = g.constant(known.clone())?;
    let xm = g.constant(masked.clone())?;
    let inp = g.concat(&[z, m, xm], 3)?;
    let mut x = embed_image(g, ps, cfg, "scene.x_embed", inp)?;
    let mut c = prompt;
    let y = conditioning_vector(g, ps, "scene", t, prompt, cfg.width)?;
    let mut out = Vec::with_capacity(cfg.scene_blocks);
    for i in 0..cfg.scene_blocks {
        let (nx, nc) = mmdit_block(g, ps, cfg, &format!("scene.blocks.{i}"), x, c, y, None)?;
        x = nx;
        c = nc;
        out.push(nn::linear(g, ps, &format!("scene.zero.{i}"), x)?);
    }
    Ok(out)
}

/// 1-indexed text residual feeding base block `i` (1-indexed).
pub fn text_index_for_block(i: usize) -> usize {
    i.div_ceil(2)
}

/// `residual[i] = scene[i] + text[ceil(i/2)]` (1-indexed); either side may be absent.
pub fn merge_residuals<T: Scalar>(
    g: &mut Graph<T>,
    scene: Option<&[Var]>,
    text: Option<&[Var]>,
    base_blocks: usize,
) -> Result<Option<Vec<Var>>> {
    if let Some(s) = scene {
        if s.len() != base_blocks {
            return input_err("scene residual count must equal base_blocks");
        }
    }
    if let Some(t) = text {
        if t.len() < text_index_for_block(base_blocks) {
            return input_err("too few text residuals for the merge rule");
        }
    }
    if scene.is_none() && text.is_none() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(base_blocks);
    for i in 1..=base_blocks {
        let r = match (scene, text) {
            (Some(s), Some(t)) => g.add(s[i - 1], t[text_index_for_block(i) - 1])?,
            (Some(s), None) => s[i - 1],
            (None, Some(t)) => t[text_index_for_block(i) - 1],
            (None, None) => unreachable!(),
        };
        out.push(r);
    }
    Ok(Some(out))
}

/// Full model velocity with whichever branches `cb` enables.
pub fn velocity<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    z: Var,
    cb: &CondBatch,
    glyph_feats: Option<Var>,
) -> Result<Var> {
    let prompt = prompt_tokens(g, ps, cfg, cb)?;
    let text_res = match &cb.text {
        Some(tb) => {
            let feats = glyph_feats.ok_or_else(|| Error::Input("text condition needs glyph features".into()))?;
            let (tok, mask) = text_condition(g, ps, cfg, tb, feats)?;
            Some(text_render_branch(g, ps, cfg, z, &cb.t, tok, mask)?)
        }
        None => None,
    };
    let scene_res = match &cb.scene {
        Some((m, x)) => Some(scene_gen_branch(g, ps, cfg, z, &cb.t, prompt, &cast(m), &cast(x))?),
        None => None,
    };
    let res = merge_residuals(g, scene_res.as_deref(), text_res.as_deref(), cfg.base_blocks)?;
    base_forward(g, ps, cfg, z, &cb.t, prompt, res.as_deref())
}

// ---------------------------------------------------------------- loss and sampling

/// `z_t = (1 - t) x0 + t eps` per batch row.
pub fn interpolate<T: Scalar>(x0: &Array<T>, eps: &Array<T>, t: &[f64]) -> Array<T> {
    let per = x0.len() / t.len();
    let mut out = x0.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let tt = T::of(t[i / per]);
        *o = (T::one() - tt) * *o + tt * eps.data()[i];
    }
    out
}

/// Rectified-flow regression of `eps - x0` at given `t` and noise.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss_at<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    x0: &Array<T>,
    eps: &Array<T>,
    cb: &CondBatch,
    glyph_feats: Option<Var>,
    loss_mask: Option<&Array<T>>,
) -> Result<Var> {
    let zt = g.constant(interpolate(x0, eps, &cb.t))?;
    let v = velocity(g, ps, cfg, zt, cb, glyph_feats)?;
    let mut target = eps.clone();
    for (o, &x) in target.data_mut().iter_mut().zip(x0.data()) {
        *o = *o - x;
    }
    let target = g.constant(target)?;
    Ok(g.mse(v, target, loss_mask)?)
}

/// Flow loss drawing `t ~ U(0,1)` and `eps ~ N(0,1)` per sample from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    cfg: &ModelConfig,
    x0: &Array<T>,
    cb: &CondBatch,
    glyph_feats: Option<Var>,
    loss_mask: Option<&Array<T>>,
    rng: &mut CounterRng,
) -> Result<Var> {
    let b = x0.shape()[0];
    let t: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
    let eps = Array::from_fn(x0.shape(), |_| T::of(rng.normal()));
    let mut cb = cb.clone();
    cb.t = t;
    flow_loss_at(g, ps, cfg, x0, &eps, &cb, glyph_feats, loss_mask)
}

pub fn cfg_combine<T: Scalar>(v_cond: &Array<T>, v_uncond: &Array<T>, scale: f64) -> Result<Array<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return input_err(format!("cfg shapes {:?} vs {:?}", v_cond.shape(), v_uncond.shape()));
    }
    let s = T::of(scale);
    let data = v_cond.data().iter().zip(v_uncond.data()).map(|(&c, &u)| u + s * (c - u)).collect();
    Ok(Array::from_vec(v_cond.shape(), data)?)
}

/// Euler integration from `z` at `t = t_start / steps` down to 0 with
/// `z <- z - v(z, t_i) / steps`. `velocity` gets the state and `t_i`.
pub fn euler<T: Scalar>(
    mut z: Array<T>,
    steps: usize,
    from_step: usize,
    to_step: usize,
    mut velocity: impl FnMut(&Array<T>, f64) -> Result<Array<T>>,
) -> Result<Array<T>> {
    let dt = T::one() / T::of(steps as f64);
    for i in (to_step + 1..=from_step).rev() {
        let v = velocity(&z, i as f64 / steps as f64)?;
        for (o, &vv) in z.data_mut().iter_mut().zip(v.data()) {
            *o = *o - dt * vv;
        }
        if !z.is_finite() {
            return Err(Error::Runtime(format!("non-finite sampler state at step {i}")));
        }
    }
    Ok(z)
}

/// Standard-normal starting noise, one stream per batch row.
pub fn initial_noise<T: Scalar>(cfg: &ModelConfig, seeds: &[u64], label: &str) -> Array<T> {
    let per = cfg.image_size * cfg.image_size * cfg.channels;
    let mut data = Vec::with_capacity(seeds.len() * per);
    for &s in seeds {
        let mut rng = CounterRng::derive(s, label, &[]);
        data.extend((0..per).map(|_| T::of(rng.normal())));
    }
    Array::from_vec(&[seeds.len(), cfg.image_size, cfg.image_size, cfg.channels], data).expect("noise")
}

/// Glyph features as an untracked table for inference.
pub fn glyph_table_array(ps: &ParamStore<f32>, cfg: &ModelConfig) -> Result<Array<f32>> {
    let mut g = Graph::new();
    let f = glyph_features(&mut g, ps, &alphabet_bitmaps(cfg)?)?;
    Ok(g.value(f).clone())
}

/// CFG velocity at one time for the whole batch.
pub fn guided_velocity(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    z: &Array<f32>,
    cb: &CondBatch,
    glyphs: &Array<f32>,
    cfg_scale: f64,
) -> Result<Array<f32>> {
    let mut g = Graph::new();
    let feats = g.constant(glyphs.clone())?;
    if (cfg_scale - 1.0).abs() < f64::EPSILON {
        let zv = g.constant(z.clone())?;
        let v = velocity(&mut g, ps, cfg, zv, cb, Some(feats))?;
        return Ok(g.value(v).clone());
    }
    let both = cb.with_uncond()?;
    let mut zz = z.data().to_vec();
    zz.extend_from_slice(z.data());
    let mut shape = z.shape().to_vec();
    shape[0] *= 2;
    let zv = g.constant(Array::from_vec(&shape, zz)?)?;
    let v = velocity(&mut g, ps, cfg, zv, &both, Some(feats))?;
    let all = g.value(v).data();
    let half = z.len();
    let vc = Array::from_vec(z.shape(), all[..half].to_vec())?;
    let vu = Array::from_vec(z.shape(), all[half..].to_vec())?;
    cfg_combine(&vc, &vu, cfg_scale)
}

/// Sample a batch of images; one noise seed per row. Returns clamped `[B, H, W, C]`.
pub fn sample(
    ps: &ParamStore<f32>,
    cfg: &ModelConfig,
    cb: &CondBatch,
    steps: usize,
    cfg_scale: f64,
    seeds: &[u64],
) -> Result<Array<f32>> {
    if steps == 0 {
        return input_err("sampler needs at least one step");
    }
    if seeds.len() != cb.batch() {
        return input_err("one seed per batch row required");
    }
    let glyphs = glyph_table_array(ps, cfg)?;
    let z = initial_noise(cfg, seeds, "sample-noise");
    let z = euler(z, steps, steps, 0, |z, t| guided_velocity(ps, cfg, z, &cb.with_time(t), &glyphs, cfg_scale))?;
    Ok(z.map(|v| v.clamp(-1.0, 1.0)))
}

/// Small architecture for gradient checks and tests.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 4,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        base_blocks: 3,
        scene_blocks: 3,
        text_blocks: 2,
        prompt_vocab: 6,
        prompt_len: 2,
        alphabet_size: 4,
        glyph_dim: 8,
        ..ModelConfig::default()
    }
}

/// End-to-end finite-difference check of the masked flow loss through every
/// branch, at 64-bit on a small model with all weights perturbed away from
/// their (partly zero) initialisation.
pub fn flow_loss_gradcheck(seed: u64) -> Result<diffcore::gradcheck::GradCheck> {
    use crate::glyphrep::TextLine;
    use crate::image::BBox;
    let cfg = check_config();
    let mut ps = init_model::<f64>(&cfg, seed)?;
    let mut rng = CounterRng::derive(seed, "flow-gradcheck", &[]);
    let names: Vec<String> = ps.names().map(String::from).collect();
    for n in &names {
        for v in ps.get_mut(n)?.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    let s = cfg.image_size;
    let mut known = Mask::new(s, s);
    known.fill_rect(&crate::image::PixelRect { x0: 3, y0: 4, x1: 10, y1: 12 }, true);
    let masked = Array::from_fn(&[s, s, 3], |i| if known.data[i / 3] != 0 { ((i * 7 % 11) as f32 / 5.5) - 1.0 } else { 0.0 });
    let bundle = ControlBundle {
        text: TextSpec {
            lines: vec![
                TextLine { content: vec![1, 2, 3], bbox: BBox::new(0.1, 0.1, 0.7, 0.3) },
                TextLine { content: vec![0], bbox: BBox::new(0.5, 0.6, 0.7, 0.8) },
            ],
        },
        text_dropped: false,
        prompt_ids: vec![1, 4],
        prompt_dropped: false,
        known_mask: known,
        masked_image: masked,
    };
    let cb = CondBatch::from_bundles(&[bundle], vec![0.4], &cfg, true, true)?;
    let x0 = Array::from_fn(&[1, s, s, 3], |_| rng.uniform() * 2.0 - 1.0);
    let eps = Array::from_fn(&[1, s, s, 3], |_| rng.normal());
    let weight = Array::from_fn(&[1, s, s, 1], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
    let bitmaps = alphabet_bitmaps::<f64>(&cfg)?;
    let picks: Vec<(String, usize)> = [
        "base.final.proj.w",
        "base.blocks.0.x.qkv.w",
        "base.prompt_embed",
        "scene.blocks.1.x.mlp1.w",
        "scene.zero.0.w",
        "text.blocks.0.c.mod.w",
        "text.zero.1.w",
        "adapter.proj.w",
        "glyph.c2.w",
    ]
    .iter()
    .flat_map(|n| {
        let len = ps.get(n).map(|a| a.len()).unwrap_or(1);
        [(n.to_string(), (len / 3) % len), (n.to_string(), (2 * len / 3 + 1) % len)]
    })
    .collect();
    let loss = |p: &ParamStore<f64>| -> Result<(f64, BTreeMap<String, Array<f64>>)> {
        let mut g = Graph::new();
        let feats = glyph_features(&mut g, p, &bitmaps)?;
        let l = flow_loss_at(&mut g, p, &cfg, &x0, &eps, &cb, Some(feats), Some(&weight))?;
        let v = g.value(l).item();
        Ok((v, g.backward(l)?.into_named(p)))
    };
    let (_, grads) = loss(&ps)?;
    let analytic: Vec<f64> = picks.iter().map(|(n, k)| grads.get(n).map_or(0.0, |a| a.data()[*k])).collect();
    let point: Vec<f64> = picks.iter().map(|(n, k)| ps.get(n).map(|a| a.data()[*k])).collect::<std::result::Result<_, _>>()?;
    let numeric = diffcore::gradcheck::numeric_gradient(
        |x| {
            let mut q = ps.clone();
            for ((n, k), v) in picks.iter().zip(x) {
                q.get_mut(n)?.data_mut()[*k] = *v;
            }
            loss(&q).map(|r| r.0).map_err(|e| diffcore::Error::Invalid(e.to_string()))
        },
        &point,
        1e-5,
    )?;
    let rel_err = diffcore::gradcheck::relative_error(&analytic, &numeric);
    Ok(diffcore::gradcheck::GradCheck { name: "flow_loss(end-to-end)".into(), rel_err, passed: rel_err < 1e-3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphrep::TextLine;
    use crate::image::BBox;

    pub(crate) fn tiny() -> ModelConfig {
        check_config()
    }

    fn bundle(cfg: &ModelConfig, seed: u64) -> ControlBundle {
        let mut rng = CounterRng::new(seed, 1);
        let s = cfg.image_size;
        let mut known = Mask::new(s, s);
        for y in 4..12 {
            for x in 3..10 {
                known.set(x, y, true);
            }
        }
        let img = Array::from_fn(&[s, s, 3], |i| {
            let p = i / 3;
            if known.get(p % s, p / s) {
                rng.uniform() as f32 * 2.0 - 1.0
            } else {
                0.0
            }
        });
        ControlBundle {
            text: TextSpec {
                lines: vec![
                    TextLine { content: vec![1, 2, 3], bbox: BBox::new(0.1, 0.1, 0.7, 0.3) },
                    TextLine { content: vec![0], bbox: BBox::new(0.5, 0.6, 0.7, 0.8) },
                ],
            },
            text_dropped: false,
            prompt_ids: vec![1, 4],
            prompt_dropped: false,
            known_mask: known,
            masked_image: img,
        }
    }

    fn batch2(cfg: &ModelConfig) -> CondBatch {
        let mut b2 = bundle(cfg, 2);
        b2.text.lines.truncate(1);
        CondBatch::from_bundles(&[bundle(cfg, 1), b2], vec![0.3, 0.8], cfg, true, true).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.text_blocks = 3;
        assert!(c.validate().is_err());
        c = ModelConfig { patch: 7, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Array::from_fn(&[2, 8, 8, 3], |i| i as f32)).unwrap();
        let p = patchify(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(p), &[2, 4, 48]);
        // second patch of row 0 starts at pixel (0, 4)
        assert_eq!(g.value(p).data()[48], (4 * 3) as f32);
        let back = unpatchify(&mut g, p, 4, 8, 8).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn merge_rule_indices() {
        assert_eq!(text_index_for_block(5), 3);
        assert_eq!(text_index_for_block(1), 1);
        assert_eq!(text_index_for_block(2), 1);
        let mut g = Graph::<f64>::new();
        let s: Vec<Var> = (0..4).map(|i| g.constant(Array::full(&[1], i as f64)).unwrap()).collect();
        let t: Vec<Var> = (0..2).map(|i| g.constant(Array::full(&[1], 10.0 * (i + 1) as f64)).unwrap()).collect();
        let m = merge_residuals(&mut g, Some(&s), Some(&t), 4).unwrap().unwrap();
        let got: Vec<f64> = m.iter().map(|&v| g.value(v).item()).collect();
        assert_eq!(got, vec![10.0, 11.0, 22.0, 23.0]);
        let z: Vec<Var> = (0..2).map(|_| g.constant(Array::zeros(&[1])).unwrap()).collect();
        let m = merge_residuals(&mut g, Some(&s), Some(&z), 4).unwrap().unwrap();
        assert_eq!(m.iter().map(|&v| g.value(v).item()).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0, 3.0]);
        assert!(merge_residuals(&mut g, Some(&s[..3]), None, 4).is_err());
    }

    #[test]
    fn fresh_branches_are_neutral() {
        let cfg = tiny();
        let mut ps = init_model::<f32>(&cfg, 5).unwrap();
        // make the base non-trivial so neutrality is not vacuous
        for (n, v) in ps.cast::<f32>().iter() {
            if n.starts_with("base.") && n.ends_with(".mod.w") {
                let mut rng = CounterRng::derive(9, n, &[]);
                ps.set(n, Array::from_fn(v.value.shape(), |_| rng.normal() as f32 * 0.1));
            }
        }
        copy_base_into_branches(&mut ps, &cfg).unwrap();
        let cb = batch2(&cfg);
        let glyphs = glyph_table_array(&ps, &cfg).unwrap();
        let z = initial_noise::<f32>(&cfg, &[1, 2], "t");
        let mut g = Graph::new();
        let zv = g.constant(z.clone()).unwrap();
        let feats = g.constant(glyphs).unwrap();
        let full = velocity(&mut g, &ps, &cfg, zv, &cb, Some(feats)).unwrap();
        let prompt = prompt_tokens(&mut g, &ps, &cfg, &cb).unwrap();
        let base = base_forward(&mut g, &ps, &cfg, zv, &cb.t, prompt, None).unwrap();
        assert_eq!(g.value(full).max_abs_diff(g.value(base)), 0.0);
        assert_eq!(g.shape(full), z.shape());
    }

    #[test]
    fn fresh_residuals_are_zero() {
        let cfg = tiny();
        let ps = init_model::<f64>(&cfg, 1).unwrap();
        let cb = batch2(&cfg);
        let mut g = Graph::new();
        let z = g.constant(initial_noise(&cfg, &[3, 4], "t")).unwrap();
        let prompt = prompt_tokens(&mut g, &ps, &cfg, &cb).unwrap();
        let (m, x) = cb.scene.clone().unwrap();
        let sres = scene_gen_branch(&mut g, &ps, &cfg, z, &cb.t, prompt, &m, &x).unwrap();
        assert_eq!(sres.len(), cfg.scene_blocks);
        let feats = glyph_features(&mut g, &ps, &alphabet_bitmaps(&cfg).unwrap()).unwrap();
        let (tok, mask) = text_condition(&mut g, &ps, &cfg, cb.text.as_ref().unwrap(), feats).unwrap();
        let tres = text_render_branch(&mut g, &ps, &cfg, z, &cb.t, tok, mask).unwrap();
        assert_eq!(tres.len(), cfg.text_blocks);
        for r in sres.iter().chain(&tres) {
            assert!(g.value(*r).data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(ps.get("scene.x_embed.w").unwrap().shape()[0], cfg.patch_dim(7));
    }

    #[test]
    fn scene_branch_rejects_soft_mask() {
        let cfg = tiny();
        let ps = init_model::<f64>(&cfg, 1).unwrap();
        let cb = batch2(&cfg);
        let mut g = Graph::new();
        let z = g.constant(initial_noise(&cfg, &[3, 4], "t")).unwrap();
        let prompt = prompt_tokens(&mut g, &ps, &cfg, &cb).unwrap();
        let (mut m, x) = cb.scene.clone().unwrap();
        m.data_mut()[0] = 0.5;
        assert!(scene_gen_branch(&mut g, &ps, &cfg, z, &cb.t, prompt, &m, &x).is_err());
    }

    #[test]
    fn dropped_text_tokens_are_zero() {
        let cfg = tiny();
        let ps = init_model::<f64>(&cfg, 1).unwrap();
        let mut b = bundle(&cfg, 1);
        b.text_dropped = true;
        let cb = CondBatch::from_bundles(&[b], vec![0.5], &cfg, true, false).unwrap();
        let mut g = Graph::new();
        let feats = glyph_features(&mut g, &ps, &alphabet_bitmaps(&cfg).unwrap()).unwrap();
        let (tok, _) = text_condition(&mut g, &ps, &cfg, cb.text.as_ref().unwrap(), feats).unwrap();
        assert!(g.value(tok).data().iter().all(|&v| v == 0.0));
        let z = g.constant(initial_noise(&cfg, &[3], "t")).unwrap();
        let v = velocity(&mut g, &ps, &cfg, z, &cb, Some(feats)).unwrap();
        assert!(g.value(v).is_finite());
    }

    #[test]
    fn copy_maps_latent_rows() {
        let cfg = tiny();
        let mut ps = init_model::<f32>(&cfg, 2).unwrap();
        copy_base_into_branches(&mut ps, &cfg).unwrap();
        let (bw, sw) = (ps.get("base.x_embed.w").unwrap(), ps.get("scene.x_embed.w").unwrap());
        let d = cfg.width;
        let row = |a: &Array<f32>, r: usize| a.data()[r * d..(r + 1) * d].to_vec();
        // pixel 5, channel 2
        assert_eq!(row(sw, 5 * 7 + 2), row(bw, 5 * 3 + 2));
        assert!(row(sw, 5 * 7 + 4).iter().all(|&v| v == 0.0));
        assert!(ps.bit_equal_prefix(&ps.clone(), "text."));
        assert_eq!(ps.get("text.blocks.1.x.qkv.w").unwrap(), ps.get("base.blocks.1.x.qkv.w").unwrap());
    }

    #[test]
    fn flow_loss_zero_for_true_velocity_and_matches_sum() {
        let x0 = Array::from_fn(&[2, 2, 2, 1], |i| (i as f64 * 0.37).sin());
        let eps = Array::from_fn(&[2, 2, 2, 1], |i| (i as f64 * 1.3).cos());
        let t = [0.0, 0.6];
        let zt = interpolate(&x0, &eps, &t);
        assert_eq!(zt.data()[..4], x0.data()[..4]);
        // z_t - t v recovers x0 along the straight path
        for i in 4..8 {
            let v = eps.data()[i] - x0.data()[i];
            assert!((zt.data()[i] - 0.6 * v - x0.data()[i]).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let target = Array::from_fn(&[2, 2, 2, 1], |i| eps.data()[i] - x0.data()[i]);
        let a = g.constant(target.clone()).unwrap();
        let b = g.constant(target.clone()).unwrap();
        let l0 = g.mse(a, b, None).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let pred = Array::from_fn(&[2, 2, 2, 1], |i| i as f64 * 0.1);
        let p = g.constant(pred.clone()).unwrap();
        let l = g.mse(p, b, None).unwrap();
        let want: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / 8.0;
        assert!((g.value(l).item() - want).abs() < 1e-14);
    }

    #[test]
    fn end_to_end_flow_gradient() {
        let c = flow_loss_gradcheck(7).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn cfg_combine_cases() {
        let c = Array::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let u = Array::from_vec(&[3], vec![0.5, -1.0, 4.0]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&c, &c, 5.0).unwrap(), c);
        assert!(cfg_combine(&c, &Array::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn euler_exact_for_constant_velocity() {
        for steps in [1, 7, 28] {
            let x0 = Array::from_fn(&[4, 4, 3], |i| ((i * 7 % 11) as f64 / 5.5) - 1.0);
            let eps = Array::from_fn(&[4, 4, 3], |i| (i as f64).sin());
            let v = Array::from_fn(&[4, 4, 3], |i| eps.data()[i] - x0.data()[i]);
            let out = euler(eps.clone(), steps, steps, 0, |_, _| Ok(v.clone())).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = tiny();
        let ps = init_model::<f32>(&cfg, 3).unwrap();
        let cb = batch2(&cfg);
        let a = sample(&ps, &cfg, &cb, 3, 5.0, &[1, 2]).unwrap();
        let b = sample(&ps, &cfg, &cb, 3, 5.0, &[1, 2]).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sample(&ps, &cfg, &cb, 0, 5.0, &[1, 2]).is_err());
    }

    #[test]
    fn cfg_scale_one_is_conditional_only() {
        let cfg = tiny();
        let mut ps = init_model::<f32>(&cfg, 3).unwrap();
        copy_base_into_branches(&mut ps, &cfg).unwrap();
        let cb = batch2(&cfg);
        let glyphs = glyph_table_array(&ps, &cfg).unwrap();
        let z = initial_noise::<f32>(&cfg, &[1, 2], "t");
        let guided = guided_velocity(&ps, &cfg, &z, &cb, &glyphs, 1.0).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z).unwrap();
        let f = g.constant(glyphs).unwrap();
        let v = velocity(&mut g, &ps, &cfg, zv, &cb, Some(f)).unwrap();
        assert_eq!(&guided, g.value(v));
    }
}
