//! Raw loops shared by the forward and backward rules.

use crate::array::numel;
use crate::scalar::Scalar;

/// Output shape of numpy-style broadcasting, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `inp` laid over `out`, zero along broadcast axes.
pub fn broadcast_strides(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        let oi = i + rank - inp.len();
        strides[oi] = if inp[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= inp[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
/// Row-wise broadcast walk: calls `f(o, ia, ib, inner)` for every contiguous
/// output row of length `inner` with the strides of the last axis fixed.
fn visit_rows(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let inner = out[rank - 1];
    let mut counter = vec![0usize; rank - 1];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    loop {
        f(o, ia, ib);
        o += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// `f(a, b)` over the broadcast of shapes `sha` and `shb` into `out`.
pub fn zip_broadcast<T: Scalar>(
    out: &[usize],
    sha: &[usize],
    shb: &[usize],
    xa: &[T],
    xb: &[T],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out.iter().product();
    if sha == shb {
        return xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut data = vec![T::zero(); total];
    if total == 0 {
        return data;
    }
    if out.is_empty() {
        data[0] = f(xa[0], xb[0]);
        return data;
    }
    let sa = broadcast_strides(out, sha);
    let sb = broadcast_strides(out, shb);
    let r = out.len() - 1;
    let inner = out[r];
    let (da, db) = (sa[r], sb[r]);
    visit_rows(out, &sa, &sb, |o, ia, ib| {
        let dst = &mut data[o..o + inner];
        match (da, db) {
            (1, 1) => {
                for ((d, &x), &y) in dst.iter_mut().zip(&xa[ia..ia + inner]).zip(&xb[ib..ib + inner]) {
                    *d = f(x, y);
                }
            }
            (1, 0) => {
                let y = xb[ib];
                for (d, &x) in dst.iter_mut().zip(&xa[ia..ia + inner]) {
                    *d = f(x, y);
                }
            }
            (0, 1) => {
                let x = xa[ia];
                for (d, &y) in dst.iter_mut().zip(&xb[ib..ib + inner]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = f(xa[ia + k * da], xb[ib + k * db]);
                }
            }
        }
    });
    data
}

/// Sum `g` (shaped `out`) down to the broadcast source shape `src`.
pub fn reduce_to<T: Scalar>(out: &[usize], src: &[usize], g: &[T]) -> Vec<T> {
    if out == src {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); numel(src)];
    if g.is_empty() {
        return acc;
    }
    if out.is_empty() {
        acc[0] = g[0];
        return acc;
    }
    let s = broadcast_strides(out, src);
    let zeros = vec![0usize; out.len()];
    let r = out.len() - 1;
    let inner = out[r];
    let ds = s[r];
    visit_rows(out, &s, &zeros, |o, ia, _| {
        let row = &g[o..o + inner];
        if ds == 1 {
            for (a, &v) in acc[ia..ia + inner].iter_mut().zip(row) {
                *a = *a + v;
            }
        } else if ds == 0 {
            let mut sum = T::zero();
            for &v in row {
                sum = sum + v;
            }
            acc[ia] = acc[ia] + sum;
        } else {
            for (k, &v) in row.iter().enumerate() {
                acc[ia + k * ds] = acc[ia + k * ds] + v;
            }
        }
    });
    acc
}

pub fn visit2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    loop {
        let (mut xa, mut xb) = (ia, ib);
        for _ in 0..inner {
            f(o, xa, xb);
            o += 1;
            xa += ia_step;
            xb += ib_step;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Permute axes: `out.shape[i] == shape[perm[i]]`.
pub fn transpose<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); data.len()];
    visit2(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = data[i]);
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution over NHWC input with HWIO weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * pl];
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * pl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let pl = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * pl;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] = dx[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `[m,k] @ [k,n]` (optionally with either operand transposed in memory),
/// accumulating into `c` when `accumulate` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    // a is stored [m,k] or, when transposed, [k,m]
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize);
}
