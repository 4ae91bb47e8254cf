//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Everything here works on raw row-major buffers plus shapes; the autograd
//! graph owns shape validation and calls into these once extents are known.

use crate::tensor::{numel, Scalar};

/// Right-aligned numpy broadcasting of two shapes.
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

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every element of `out`,
/// where the input offsets follow the given strides.
pub fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < n {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..rank - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance the outer multi-index
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary_broadcast<T: Scalar>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut res = vec![T::zero(); numel(out)];
    let sa = broadcast_strides(ashape, out);
    let sb = broadcast_strides(bshape, out);
    walk2(out, &sa, &sb, |o, i, j| res[o] = f(a[i], b[j]));
    res
}

/// Sums `grad` (shaped `gshape`) down to `target` along broadcast axes.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], gshape: &[usize], target: &[usize]) -> Vec<T> {
    if gshape == target {
        return grad.to_vec();
    }
    let mut res = vec![T::zero(); numel(target)];
    let st = broadcast_strides(target, gshape);
    let zeros = vec![0; gshape.len()];
    walk2(gshape, &st, &zeros, |o, t, _| res[t] += grad[o]);
    res
}

pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![T::zero(); x.len()];
    walk2(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Plain `[m,k] @ [k,n]` into a fresh buffer.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, false, b, false, &mut c, m, k, n, T::zero());
    c
}

/// `c = beta*c + op(a) @ op(b)` where `op` optionally transposes a row-major
/// operand (`a` is stored `[m,k]`, or `[k,m]` when `ta`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the requested views (asserted above).
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, group: usize, cols: &mut [T]) {
    let n = g.cols();
    let hw_o = g.ho * g.wo;
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &x[((b * g.cin) + c0 + ci) * g.h * g.w..][..g.h * g.w];
                    let dst_b = &mut dst[b * hw_o..(b + 1) * hw_o];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let drow = &mut dst_b[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, group: usize, dx: &mut [T]) {
    let n = g.cols();
    let hw_o = g.ho * g.wo;
    let c0 = group * g.cin_g();
    for ci in 0..g.cin_g() {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &mut dx[((b * g.cin) + c0 + ci) * g.h * g.w..][..g.h * g.w];
                    let src_b = &src[b * hw_o..(b + 1) * hw_o];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src_b[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw_o = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * hw_o];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let (k, n) = (g.k(), g.cols());
        let mut cols = vec![T::zero(); k * n];
        let mut res = vec![T::zero(); g.cout_g() * n];
        for group in 0..g.groups {
            im2col(x, g, group, &mut cols);
            let wg = &w[group * g.cout_g() * k..][..g.cout_g() * k];
            gemm_acc(wg, false, &cols, false, &mut res, g.cout_g(), k, n, T::zero());
            for co in 0..g.cout_g() {
                let c = group * g.cout_g() + co;
                for b in 0..g.batch {
                    out[(b * g.cout + c) * hw_o..][..hw_o]
                        .copy_from_slice(&res[co * n + b * hw_o..][..hw_o]);
                }
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut out[(b * g.cout + c) * hw_o..][..hw_o] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let hw_o = g.ho * g.wo;
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let wk = &w[c * kk..][..kk];
            let dst = &mut out[(b * g.cout + c) * hw_o..][..hw_o];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
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
                            acc += wk[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
}

/// Returns `(dx, dw)`; `db` is the channel-sum of `dy` and left to the caller.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    if g.is_depthwise() {
        return depthwise_backward(x, w, dy, g, need_dx, need_dw);
    }
    let hw_o = g.ho * g.wo;
    let (k, n) = (g.k(), g.cols());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); k * n];
    let mut dyg = vec![T::zero(); g.cout_g() * n];
    for group in 0..g.groups {
        for co in 0..g.cout_g() {
            let c = group * g.cout_g() + co;
            for b in 0..g.batch {
                dyg[co * n + b * hw_o..][..hw_o].copy_from_slice(&dy[(b * g.cout + c) * hw_o..][..hw_o]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, group, &mut cols);
            let dwg = &mut dw[group * g.cout_g() * k..][..g.cout_g() * k];
            gemm_acc(&dyg, false, &cols, true, dwg, g.cout_g(), n, k, T::zero());
        }
        if let Some(dx) = dx.as_mut() {
            let wg = &w[group * g.cout_g() * k..][..g.cout_g() * k];
            gemm_acc(wg, true, &dyg, false, &mut cols, k, g.cout_g(), n, T::zero());
            col2im(&cols, g, group, dx);
        }
    }
    (dx, dw)
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw_o = g.ho * g.wo;
    let kk = g.kh * g.kw;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base = (b * g.cin + c) * g.h * g.w;
            let dyp = &dy[(b * g.cout + c) * hw_o..][..hw_o];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = dyp[oy * g.wo + ox];
                    if d == T::zero() {
                        continue;
                    }
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
                            let xi = base + iy as usize * g.w + ix as usize;
                            let wi = c * kk + ky * g.kw + kx;
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += d * x[xi];
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += d * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Layout for normalizing over a middle axis: index = (o*c + ci)*inner + i.
#[derive(Debug, Clone, Copy)]
pub struct NormLayout {
    pub outer: usize,
    pub c: usize,
    pub inner: usize,
}

/// Returns `(y, mean, rstd)`; statistics are per (outer, inner) position.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    l: NormLayout,
    eps: f64,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(l.outer * l.inner);
    let mut rstds = Vec::with_capacity(l.outer * l.inner);
    let cf = l.c as f64;
    for o in 0..l.outer {
        for i in 0..l.inner {
            let at = |ci: usize| (o * l.c + ci) * l.inner + i;
            let mut sum = 0.0;
            for ci in 0..l.c {
                sum += x[at(ci)].as_f64();
            }
            let mean = sum / cf;
            let mut var = 0.0;
            for ci in 0..l.c {
                let d = x[at(ci)].as_f64() - mean;
                var += d * d;
            }
            var /= cf;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..l.c {
                let xhat = (x[at(ci)].as_f64() - mean) * rstd;
                y[at(ci)] = T::of_f64(xhat * gamma[ci].as_f64() + beta[ci].as_f64());
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (y, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    means: &[f64],
    rstds: &[f64],
    l: NormLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0.0f64; l.c];
    let mut dbeta = vec![0.0f64; l.c];
    let cf = l.c as f64;
    for o in 0..l.outer {
        for i in 0..l.inner {
            let at = |ci: usize| (o * l.c + ci) * l.inner + i;
            let pos = o * l.inner + i;
            let (mean, rstd) = (means[pos], rstds[pos]);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..l.c {
                let xhat = (x[at(ci)].as_f64() - mean) * rstd;
                let d = dy[at(ci)].as_f64();
                dgamma[ci] += d * xhat;
                dbeta[ci] += d;
                let dxhat = d * gamma[ci].as_f64();
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for ci in 0..l.c {
                let xhat = (x[at(ci)].as_f64() - mean) * rstd;
                let dxhat = dy[at(ci)].as_f64() * gamma[ci].as_f64();
                dx[at(ci)] = T::of_f64(rstd * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf));
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::of_f64).collect(),
        dbeta.into_iter().map(T::of_f64).collect(),
    )
}

/// Row-wise softmax over the last axis. With `causal`, the rows are treated as
/// stacked `[rows, k]` matrices and entry `j` of row `i` is masked when `j > i`.
pub fn softmax_rows<T: Scalar>(x: &[T], k: usize, rows_per_mat: usize, causal: bool) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (r, (xr, yr)) in x.chunks(k).zip(y.chunks_mut(k)).enumerate() {
        let limit = if causal { (r % rows_per_mat + 1).min(k) } else { k };
        let max = xr[..limit].iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0;
        for j in 0..limit {
            sum += (xr[j].as_f64() - max).exp();
        }
        for j in 0..limit {
            yr[j] = T::of_f64((xr[j].as_f64() - max).exp() / sum);
        }
    }
    y
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks(k).zip(y.chunks_mut(k)) {
        let max = xr.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = max + xr.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        for (o, v) in yr.iter_mut().zip(xr) {
            *o = T::of_f64(v.as_f64() - lse);
        }
    }
    y
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of_f64(0.5);
    half * x * (T::one() + (x * T::of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of `x Φ(x)` = `Φ(x) + x φ(x)`.
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::of_f64(0.5) * (T::one() + (x * T::of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of_f64(0.5)).exp() * T::of_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g: Vec<f64> = (0..6).map(|v| v as f64).collect();
        // [2,3] -> [3]
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![3.0, 5.0, 7.0]);
        // [2,3] -> [2,1]
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![3.0, 12.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[]), vec![15.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let (y, s) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn transposed_gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // [3,4]
        let c = gemm_nn(&a, &b, 2, 3, 4);
        let (at, _) = permute(&a, &[2, 3], &[1, 0]);
        let (bt, _) = permute(&b, &[3, 4], &[1, 0]);
        let mut c2 = vec![0.0; 8];
        gemm_acc(&at, true, &bt, true, &mut c2, 2, 3, 4, 0.0);
        assert_eq!(c, c2);
    }
}
