//! Forward kernels and their vector-Jacobian products.
//!
//! These functions know nothing about the tape; [`crate::autograd`] records
//! them and calls the `*_backward` helpers during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive-mask value standing in for negative infinity. Any mask entry at
/// or below this is treated as hidden and its softmax weight is exactly 0.
pub const NEG_SENTINEL: f64 = -1e30;

/// Convolution filter `(kernel, padding, stride, dilation)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub k: usize,
    pub p: usize,
    pub s: usize,
    pub d: usize,
}

impl ConvSpec {
    pub const fn new(k: usize, p: usize, s: usize, d: usize) -> Self {
        Self { k, p, s, d }
    }

    /// Output extent along one axis, or `None` when it would be non-positive.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        if self.s == 0 || self.k == 0 || self.d == 0 {
            return None;
        }
        let span = self.d as i64 * (self.k as i64 - 1) + 1;
        let numer = input as i64 + 2 * self.p as i64 - span;
        if numer < 0 {
            return None;
        }
        Some((numer / self.s as i64 + 1) as usize)
    }
}

/// `C = op(A) * op(B)` where `op` optionally transposes; `A` is stored as
/// `m x k` (or `k x m` when transposed), `B` as `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the row-major (or transposed row-major) layouts of `a`, `b`, `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t(a: &Tensor, a_trans: bool, b: &Tensor, b_trans: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (m, ka) = if a_trans { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if b_trans { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?}{} x {:?}{}",
            a.shape(),
            if a_trans { "^T" } else { "" },
            b.shape(),
            if b_trans { "^T" } else { "" },
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, ka, n, a.data(), a_trans, b.data(), b_trans, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

fn mask_offsets(x: &Tensor, mask: &Tensor) -> Result<usize> {
    let xs = x.shape();
    let ms = mask.shape();
    if ms.len() > xs.len() || xs[xs.len() - ms.len()..] != *ms {
        return Err(Error::dim(format!(
            "mask shape {ms:?} does not broadcast to {xs:?}"
        )));
    }
    Ok(mask.len())
}

/// Softmax over the last axis with an optional additive mask whose shape is
/// a suffix of `x`'s shape.
pub fn softmax_lastdim(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Err(Error::dim("softmax over an empty axis"));
    }
    let mask_len = match mask {
        Some(m) => Some(mask_offsets(x, m)?),
        None => None,
    };
    let mut out = vec![0.0; x.len()];
    for (slice, (xs, ys)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let ms = match (mask, mask_len) {
            (Some(m), Some(len)) => {
                let start = (slice * n) % len;
                Some(&m.data()[start..start + n])
            }
            _ => None,
        };
        let hidden = |j: usize| ms.is_some_and(|m| m[j] <= NEG_SENTINEL);
        let logit = |j: usize| xs[j] + ms.map_or(0.0, |m| m[j]);

        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if !hidden(j) {
                max = max.max(logit(j));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked { slice });
        }
        let mut total = 0.0;
        for (j, y) in ys.iter_mut().enumerate() {
            *y = if hidden(j) { 0.0 } else { (logit(j) - max).exp() };
            total += *y;
        }
        for y in ys.iter_mut() {
            *y /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given softmax output `y` and upstream `dy`, returns `dx`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut dx = vec![0.0; y.len()];
    for ((ys, gs), out) in y
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[j] = ys[j] * (gs[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

/// Normalizes each last-axis slice to zero mean and unit variance. Returns
/// the output and the per-slice `1/sqrt(var + eps)`.
pub fn layer_norm(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = x.last_dim().max(1);
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for (xs, ys) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (y, v) in ys.iter_mut().zip(xs) {
            *y = (v - mean) * r;
        }
        inv_std.push(r);
    }
    (
        Tensor::new(x.shape().to_vec(), out).expect("same shape"),
        inv_std,
    )
}

pub fn layer_norm_backward(y: &Tensor, inv_std: &[f64], dy: &Tensor) -> Tensor {
    let d = y.last_dim().max(1);
    let mut dx = vec![0.0; y.len()];
    for (((ys, gs), out), &r) in y
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.chunks_mut(d))
        .zip(inv_std)
    {
        let mean_g = gs.iter().sum::<f64>() / d as f64;
        let mean_gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / d as f64;
        for j in 0..d {
            out[j] = r * (gs[j] - mean_g - ys[j] * mean_gy);
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_geometry(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<ConvGeom> {
    let (cin, h, wd) = x.dims3()?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != cin || ws[2] != spec.k || ws[3] != spec.k {
        return Err(Error::dim(format!(
            "conv weight {ws:?} incompatible with input channels {cin} and kernel {}",
            spec.k
        )));
    }
    let cout = ws[0];
    if b.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv bias {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    let (oh, ow) = match (spec.output_len(h), spec.output_len(wd)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::dim(format!(
                "conv {spec:?} on {h}x{wd} yields non-positive output"
            )))
        }
    };
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        oh,
        ow,
    })
}

/// Output positions `o` in `[0, out_len)` whose input tap `o*s + off - p`
/// falls inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, off: usize, spec: ConvSpec) -> (usize, usize) {
    let s = spec.s as i64;
    let shift = off as i64 - spec.p as i64;
    // o*s + shift >= 0  and  o*s + shift <= in_len - 1
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi_excl = {
        let top = in_len as i64 - 1 - shift;
        if top < 0 {
            0
        } else {
            top / s + 1
        }
    };
    let lo = lo.clamp(0, out_len as i64) as usize;
    let hi = hi_excl.clamp(0, out_len as i64) as usize;
    (lo, hi.max(lo))
}

/// Zero-padded dilated cross-correlation, `x: [C_in, H, W]`,
/// `w: [C_out, C_in, k, k]`, `b: [C_out]`.
///
/// Each output starts at its bias and accumulates taps in `(c_in, ky, kx)`
/// order, so results match a plain nested-loop evaluation bit for bit.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(x, w, b, spec)?;
    let k = spec.k;
    let opix = g.oh * g.ow;

    // Channels-last scratch so the innermost loop runs over output channels.
    let mut w_cl = vec![0.0; g.cin * k * k * g.cout];
    for co in 0..g.cout {
        for t in 0..g.cin * k * k {
            w_cl[t * g.cout + co] = w.data()[co * g.cin * k * k + t];
        }
    }
    let mut out_cl = vec![0.0; opix * g.cout];
    for px in out_cl.chunks_mut(g.cout) {
        px.copy_from_slice(b.data());
    }
    let xd = x.data();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let acc = &mut out_cl[(oy * g.ow + ox) * g.cout..][..g.cout];
            for ci in 0..g.cin {
                for ky in 0..k {
                    let iy = (oy * spec.s + ky * spec.d) as i64 - spec.p as i64;
                    if iy < 0 || iy >= g.h as i64 {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * spec.s + kx * spec.d) as i64 - spec.p as i64;
                        if ix < 0 || ix >= g.w as i64 {
                            continue;
                        }
                        let xv = xd[(ci * g.h + iy as usize) * g.w + ix as usize];
                        let wrow = &w_cl[((ci * k + ky) * k + kx) * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += wv * xv;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; g.cout * opix];
    for p in 0..opix {
        for co in 0..g.cout {
            out[co * opix + p] = out_cl[p * g.cout + co];
        }
    }
    Tensor::new(vec![g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let b = Tensor::zeros(&[w.shape()[0]]);
    let g = conv_geometry(x, w, &b, spec)?;
    let k = spec.k;
    let opix = g.oh * g.ow;
    if dy.shape() != [g.cout, g.oh, g.ow] {
        return Err(Error::dim("conv upstream gradient shape"));
    }
    let dyd = dy.data();
    let xd = x.data();
    let taps = g.cin * k * k;

    let db: Vec<f64> = dyd.chunks(opix).map(|c| c.iter().sum()).collect();

    // im2col: cols[(ci, ky, kx), (oy, ox)], zero where the tap hits padding.
    let mut cols = vec![0.0; taps * opix];
    for ci in 0..g.cin {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(g.oh, g.h, ky * spec.d, spec);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(g.ow, g.w, kx * spec.d, spec);
                let row = &mut cols[((ci * k + ky) * k + kx) * opix..][..opix];
                for oy in oy0..oy1 {
                    let iy = oy * spec.s + ky * spec.d - spec.p;
                    for ox in ox0..ox1 {
                        let ix = ox * spec.s + kx * spec.d - spec.p;
                        row[oy * g.ow + ox] = xd[(ci * g.h + iy) * g.w + ix];
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; w.len()];
    gemm(g.cout, opix, taps, dyd, false, &cols, true, &mut dw, 0.0);

    let mut dcols = cols;
    gemm(taps, g.cout, opix, w.data(), true, dyd, false, &mut dcols, 0.0);
    let mut dx = vec![0.0; x.len()];
    for ci in 0..g.cin {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(g.oh, g.h, ky * spec.d, spec);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(g.ow, g.w, kx * spec.d, spec);
                let row = &dcols[((ci * k + ky) * k + kx) * opix..][..opix];
                for oy in oy0..oy1 {
                    let iy = oy * spec.s + ky * spec.d - spec.p;
                    for ox in ox0..ox1 {
                        let ix = ox * spec.s + kx * spec.d - spec.p;
                        dx[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::from_vec(db),
    ))
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
