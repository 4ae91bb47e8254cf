//! Forward constructors. Each validates shapes, computes the output value and
//! records the op on the tape.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, NormLayout};
use crate::tensor::{numel, Scalar, Tensor};

/// Plan for a batched matmul `[..., m, k] @ [..., k, n]`.
pub(crate) struct MatPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (out, a, b) matrix offsets in units of elements.
    pub pairs: Vec<(usize, usize, usize)>,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatPlan> {
    let fail = || Error::dim("matmul", format!("cannot multiply {a:?} by {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(fail());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(fail());
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    if bb.is_empty() {
        // weight-style rhs: fold every leading axis of `a` into the rows
        let rows = numel(a) / k;
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        return Ok(MatPlan {
            m: rows,
            k,
            n,
            pairs: vec![(0, 0, 0)],
            out_shape,
        });
    }
    let batch = kernels::broadcast_shape(ba, bb).ok_or_else(fail)?;
    let sa = kernels::broadcast_strides(ba, &batch);
    let sb = kernels::broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    kernels::walk2(&batch, &sa, &sb, |o, i, j| pairs.push((o * m * n, i * m * k, j * k * n)));
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatPlan {
        m,
        k,
        n,
        pairs,
        out_shape,
    })
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::dim(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let data = kernels::binary_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), &out, f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(out, data), op, rg))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Broadcasting elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = T::of_f64(c);
        let out = self.value(a).map(|v| v * cv);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Batched matrix product with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = matmul_plan(self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for &(o, ia, ib) in &plan.pairs {
            kernels::gemm_acc(&ta[ia..], false, &tb[ib..], false, &mut out[o..], m, k, n, T::zero());
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul(a, b), rg))
    }

    /// `x @ w (+ b)` for `x: [..., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 2-D convolution over NCHW input with `w: [cout, cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim("conv2d", format!("need 4-D input and kernel, got {xs:?} and {ws:?}")));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups={groups} must divide cin={cin} and cout={cout}"
            )));
        }
        if cin_g != cin / groups {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {ws:?} expects {} input channels per group, input {xs:?} has {}", cin_g, cin / groups),
            ));
        }
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::dim("conv2d", format!("kernel {ws:?} does not fit input {xs:?} with padding {padding}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![batch, cout, geom.ho, geom.wo], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout, eps: f64) -> Result<Var> {
        let c = layout.c;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match {c} normalized channels of {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        let (y, mean, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            layout,
            eps,
        );
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                layout,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let c = *s.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        let layout = NormLayout {
            outer: numel(s) / c,
            c,
            inner: 1,
        };
        self.norm(x, gamma, beta, layout, eps)
    }

    /// Layer normalization over the channel axis of an NCHW map, per pixel.
    pub fn layer_norm_2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dim("layer_norm_2d", format!("need NCHW input, got {s:?}")));
        }
        let layout = NormLayout {
            outer: s[0],
            c: s[1],
            inner: s[2] * s[3],
        };
        self.norm(x, gamma, beta, layout, eps)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(out, op, rg)
    }

    /// Exact GELU, `x * Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let rows = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
        if causal && rows != k {
            return Err(Error::dim("causal_softmax", format!("needs square trailing axes, got {s:?}")));
        }
        let y = kernels::softmax_rows(self.value(x).data(), k, rows, causal);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(s, y), Op::Softmax(x), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over `[..., L, L]` scores where query `i` only sees keys `j <= i`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        let y = kernels::log_softmax_rows(self.value(x).data(), k);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(s, y), Op::LogSoftmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let (data, shape) = kernels::permute(self.value(x).data(), s, perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} input")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = T::of_f64(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v.as_f64();
                }
            }
        }
        let inv = 1.0 / len as f64;
        let mut shape = s.clone();
        shape.remove(axis);
        let data = out.into_iter().map(|v| T::of_f64(v * inv)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanAxis { x, axis }, rg))
    }

    /// Row lookup: `table: [V, D]`, `ids` shaped `id_shape` -> `id_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || numel(id_shape) != ids.len() {
            return Err(Error::dim("embedding", format!("table {ts:?}, ids {} for shape {id_shape:?}", ids.len())));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one position per batch row: `x: [B, L, D]`, `idx[b] < L` -> `[B, D]`.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::dim("select_rows", format!("indices {idx:?} for input {s:?}")));
        }
        let (l, d) = (s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * d);
        for (b, &i) in idx.iter().enumerate() {
            out.extend_from_slice(&src[(b * l + i) * d..][..d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], d], out),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Diagonal of a square `[N, N]` matrix as `[N]`.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::dim("diagonal", format!("needs a square matrix, got {s:?}")));
        }
        let n = s[0];
        let x3 = self.reshape(x, &[n, n, 1])?;
        let idx: Vec<usize> = (0..n).collect();
        let d = self.select_rows(x3, &idx)?;
        self.reshape(d, &[n])
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::dim("l2_normalize", "scalar input"))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (r, (xr, yr)) in src.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let norm = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("row {r} has norm {norm}; cannot normalize")));
            }
            for (o, v) in yr.iter_mut().zip(xr) {
                *o = T::of_f64(v.as_f64() / norm);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::L2Normalize(x), rg))
    }
}
