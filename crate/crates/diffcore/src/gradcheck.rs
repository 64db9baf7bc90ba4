//! Central finite-difference checks of the backward rules.
//!
//! The reference gradient is computed from forward evaluations only, so it is
//! independent of every rule in [`Graph::backward`].

use crate::array::Array;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::rng::CounterRng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
    pub passed: bool,
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Central differences of a scalar function at `point`, one coordinate at a time.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, point: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x)?;
        x[i] = x0 - h;
        let fm = f(&x)?;
        x[i] = x0;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

type Builder = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Compare analytic and numeric gradients of `sum(r * build(inputs))` for a fixed
/// random projection `r`, over every input element.
pub fn check_op(name: &str, inputs: &[Array<f64>], build: &Builder, rng: &mut CounterRng) -> Result<GradCheck> {
    let forward = |vals: &[Array<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = vals.iter().map(|a| g.input(a.clone())).collect::<Result<Vec<_>>>()?;
        let y = build(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let with_loss = |vals: &[Array<f64>], proj: &Array<f64>| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let (mut g, vars, y) = forward(vals)?;
        let rv = g.constant(proj.clone())?;
        let prod = g.mul(y, rv)?;
        let loss = g.sum_all(prod)?;
        Ok((g, vars, loss))
    };
    let out_shape = {
        let (g, _, y) = forward(inputs)?;
        g.shape(y).to_vec()
    };
    let proj = Array::from_fn(&out_shape, |_| rng.normal());
    let (g, vars, loss) = with_loss(inputs, &proj)?;
    let grads = g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        analytic.extend(match grads.wrt(*v) {
            Some(a) => a.data().to_vec(),
            None => vec![0.0; inputs[k].len()],
        });
        let f = |x: &[f64]| -> Result<f64> {
            let mut vals = inputs.to_vec();
            vals[k] = Array::from_vec(inputs[k].shape(), x.to_vec())?;
            let (g, _, l) = with_loss(&vals, &proj)?;
            Ok(g.value(l).item())
        };
        numeric.extend(numeric_gradient(f, inputs[k].data(), FD_STEP)?);
    }
    let rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck { name: name.to_string(), rel_err, passed: rel_err < FD_TOLERANCE })
}

fn randn(rng: &mut CounterRng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.normal())
}

/// Values in `[-2, 2]` kept at least 0.05 away from `+-1` (clamp kinks).
fn away_from_kinks(rng: &mut CounterRng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| loop {
        let v = rng.uniform() * 4.0 - 2.0;
        if (v.abs() - 1.0).abs() > 0.05 {
            break v;
        }
    })
}

/// Scaled dot-product attention composed from engine primitives:
/// `q, k, v: [batch, heads, tokens, dh]`, `mask` broadcast onto the scores.
pub fn attention(g: &mut Graph<f64>, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let scores = g.matmul_bt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let p = g.softmax(scores)?;
    g.matmul(p, v)
}

/// Finite-difference check of every primitive on small random shapes (64-bit).
pub fn run_primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = CounterRng::derive(seed, "gradcheck", &[]);
    let mut checks = Vec::new();
    macro_rules! check {
        ($name:expr, [$($inp:expr),*], $build:expr) => {{
            let inputs = vec![$($inp),*];
            checks.push(check_op($name, &inputs, &$build, &mut rng)?);
        }};
    }
    let r = &mut CounterRng::derive(seed, "gradcheck-inputs", &[]);
    check!("matmul", [randn(r, &[2, 3, 4]), randn(r, &[4, 5])], |g: &mut Graph<f64>, v: &[Var]| g.matmul(v[0], v[1]));
    check!("matmul_batched", [randn(r, &[2, 3, 4]), randn(r, &[2, 4, 3])], |g: &mut Graph<f64>, v: &[Var]| g
        .matmul(v[0], v[1]));
    check!("matmul_bt", [randn(r, &[2, 3, 4]), randn(r, &[2, 5, 4])], |g: &mut Graph<f64>, v: &[Var]| g
        .matmul_bt(v[0], v[1]));
    check!("matmul_bt_shared", [randn(r, &[3, 4]), randn(r, &[5, 4])], |g: &mut Graph<f64>, v: &[Var]| g
        .matmul_bt(v[0], v[1]));
    check!("add_broadcast", [randn(r, &[2, 3, 4]), randn(r, &[3, 1])], |g: &mut Graph<f64>, v: &[Var]| g
        .add(v[0], v[1]));
    check!("sub_broadcast", [randn(r, &[2, 1, 4]), randn(r, &[3, 4])], |g: &mut Graph<f64>, v: &[Var]| g
        .sub(v[0], v[1]));
    check!("mul_broadcast", [randn(r, &[2, 3, 4]), randn(r, &[2, 1, 4])], |g: &mut Graph<f64>, v: &[Var]| g
        .mul(v[0], v[1]));
    check!("affine", [randn(r, &[7])], |g: &mut Graph<f64>, v: &[Var]| g.affine(v[0], -1.7, 0.3));
    check!("softmax", [randn(r, &[3, 5])], |g: &mut Graph<f64>, v: &[Var]| g.softmax(v[0]));
    check!("layer_norm", [randn(r, &[4, 6])], |g: &mut Graph<f64>, v: &[Var]| g.layer_norm(v[0], 1e-5));
    check!("silu", [randn(r, &[9])], |g: &mut Graph<f64>, v: &[Var]| g.silu(v[0]));
    check!("gelu", [randn(r, &[9])], |g: &mut Graph<f64>, v: &[Var]| g.gelu(v[0]));
    check!("sigmoid", [randn(r, &[9])], |g: &mut Graph<f64>, v: &[Var]| g.sigmoid(v[0]));
    check!("softplus", [randn(r, &[9])], |g: &mut Graph<f64>, v: &[Var]| g.softplus(v[0]));
    check!("clamp", [away_from_kinks(r, &[12])], |g: &mut Graph<f64>, v: &[Var]| g.clamp(v[0], -1.0, 1.0));
    check!("conv2d_s1_p1", [randn(r, &[2, 5, 5, 2]), randn(r, &[3, 3, 2, 3])], |g: &mut Graph<f64>, v: &[Var]| g
        .conv2d(v[0], v[1], 1, 1));
    check!("conv2d_s2_p1", [randn(r, &[1, 6, 6, 2]), randn(r, &[3, 3, 2, 2])], |g: &mut Graph<f64>, v: &[Var]| g
        .conv2d(v[0], v[1], 2, 1));
    check!("transpose", [randn(r, &[2, 3, 4])], |g: &mut Graph<f64>, v: &[Var]| g.transpose(v[0], &[2, 0, 1]));
    check!("reshape", [randn(r, &[2, 6])], |g: &mut Graph<f64>, v: &[Var]| g.reshape(v[0], &[3, 4]));
    check!("concat", [randn(r, &[2, 2, 3]), randn(r, &[2, 1, 3])], |g: &mut Graph<f64>, v: &[Var]| g
        .concat(&[v[0], v[1]], 1));
    check!("split", [randn(r, &[2, 5])], |g: &mut Graph<f64>, v: &[Var]| {
        let parts = g.split(v[0], 1, &[2, 3])?;
        let a = g.scale(parts[0], 2.0)?;
        g.concat(&[parts[1], a], 1)
    });
    check!("avg_pool2d", [randn(r, &[1, 4, 4, 2])], |g: &mut Graph<f64>, v: &[Var]| g.avg_pool2d(v[0], 2));
    check!("upsample2d", [randn(r, &[1, 2, 3, 2])], |g: &mut Graph<f64>, v: &[Var]| g.upsample2d(v[0], 2));
    check!("mean_axis", [randn(r, &[2, 3, 4])], |g: &mut Graph<f64>, v: &[Var]| g.mean_axis(v[0], 1));
    check!("sum_all", [randn(r, &[2, 3])], |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.sum_all(v[0])?;
        g.reshape(s, &[1])
    });
    check!("embedding", [randn(r, &[5, 3])], |g: &mut Graph<f64>, v: &[Var]| g.embedding(v[0], &[4, 0, 4, 2]));
    check!("gather", [randn(r, &[6])], |g: &mut Graph<f64>, v: &[Var]| g.gather(v[0], vec![5, 1, 1, 0], &[2, 2]));
    check!("mse", [randn(r, &[3, 4]), randn(r, &[3, 4])], |g: &mut Graph<f64>, v: &[Var]| {
        let l = g.mse(v[0], v[1], None)?;
        g.reshape(l, &[1])
    });
    let w = Array::from_fn(&[3, 1], |i| if i == 1 { 0.0 } else { 1.0 });
    check!("mse_weighted", [randn(r, &[3, 4]), randn(r, &[3, 4])], move |g: &mut Graph<f64>, v: &[Var]| {
        let l = g.mse(v[0], v[1], Some(&w))?;
        g.reshape(l, &[1])
    });
    let mask = Array::from_fn(&[1, 1, 1, 4], |i| if i == 3 { -1e9 } else { 0.0 });
    check!(
        "attention",
        [randn(r, &[1, 2, 4, 3]), randn(r, &[1, 2, 4, 3]), randn(r, &[1, 2, 4, 3])],
        move |g: &mut Graph<f64>, v: &[Var]| {
            let m = g.constant(mask.clone())?;
            attention(g, v[0], v[1], v[2], Some(m))
        }
    );
    check!("sum_sigmoid_wx", [randn(r, &[3, 4]), randn(r, &[4, 1])], |g: &mut Graph<f64>, v: &[Var]| {
        let wx = g.matmul(v[0], v[1])?;
        let s = g.sigmoid(wx)?;
        let t = g.sum_all(s)?;
        g.reshape(t, &[1])
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for c in run_primitive_suite(11).unwrap() {
            assert!(c.passed, "{} rel err {}", c.name, c.rel_err);
        }
    }

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    }
}
