//! Layer helpers over the autodiff graph. Parameters are addressed by dotted
//! name prefixes inside a [`ParamStore`].

use diffcore::{Array, CounterRng, Graph, ParamStore, Scalar, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Parameter initializer writing into a store.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: CounterRng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, label: &str) -> Self {
        Self { store, rng: CounterRng::derive(seed, label, &[]) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let rng = &mut self.rng;
        self.store.insert(name, Array::from_fn(shape, |_| T::of(rng.normal() * std)))?;
        Ok(())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Array::zeros(shape))?;
        Ok(())
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Array::ones(shape))?;
        Ok(())
    }

    /// `{name}.w: [din, dout]` with std `1/sqrt(din)` (or zeros), `{name}.b: [dout]` zeros.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.normal(&format!("{name}.w"), &[din, dout], 1.0 / (din as f64).sqrt())?;
        self.zeros(&format!("{name}.b"), &[dout])
    }

    pub fn linear_zero(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        self.zeros(&format!("{name}.w"), &[din, dout])?;
        self.zeros(&format!("{name}.b"), &[dout])
    }

    /// HWIO conv kernel `{name}.w` with He-style std and zero bias.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<()> {
        self.normal(&format!("{name}.w"), &[k, k, cin, cout], (2.0 / (k * k * cin) as f64).sqrt())?;
        self.zeros(&format!("{name}.b"), &[cout])
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.ones(&format!("{name}.g"), &[dim])?;
        self.zeros(&format!("{name}.b"), &[dim])
    }
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    Ok(g.add(y, b)?)
}

pub fn layer_norm_affine<T: Scalar>(g: &mut Graph<T>, ps: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, T::of(LN_EPS))?;
    let gamma = g.param(ps, &format!("{name}.g"))?;
    let beta = g.param(ps, &format!("{name}.b"))?;
    let y = g.mul(n, gamma)?;
    Ok(g.add(y, beta)?)
}

/// `x * (1 + scale) + shift` with `[B, 1, d]` modulation broadcast over tokens.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = g.affine(scale, T::one(), T::one())?;
    let y = g.mul(x, s1)?;
    Ok(g.add(y, shift)?)
}

/// Scaled dot-product attention over `[B, heads, T, dh]`; `mask` is added to the scores.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let scores = g.matmul_bt(q, k)?;
    let mut scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let p = g.softmax(scores)?;
    Ok(g.matmul(p, v)?)
}

/// Multi-head attention from packed `qkv: [B, T, 3d]` to `[B, T, d]`.
pub fn multi_head_attention<T: Scalar>(g: &mut Graph<T>, qkv: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let s = g.shape(qkv).to_vec();
    let (b, t, d) = (s[0], s[1], s[2] / 3);
    let dh = d / heads;
    let r = g.reshape(qkv, &[b, t, 3, heads, dh])?;
    // [3, B, heads, T, dh]
    let r = g.transpose(r, &[2, 0, 3, 1, 4])?;
    let parts = g.split(r, 0, &[1, 1, 1])?;
    let q = g.reshape(parts[0], &[b, heads, t, dh])?;
    let k = g.reshape(parts[1], &[b, heads, t, dh])?;
    let v = g.reshape(parts[2], &[b, heads, t, dh])?;
    let o = attention(g, q, k, v, mask)?;
    let o = g.transpose(o, &[0, 2, 1, 3])?;
    Ok(g.reshape(o, &[b, t, d])?)
}

/// Interleaved sin/cos features over a geometric frequency ladder (base 10000):
/// entry `2i` is `sin(v / 10000^(2i/dim))`, entry `2i+1` the matching cosine.
pub fn sinusoid(value: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        out.push((value * freq).sin());
        out.push((value * freq).cos());
    }
    out
}
