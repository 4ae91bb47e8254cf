use super::ops::matmul_plan;
use super::{Node, Op, Var};
use crate::kernels;
use crate::tensor::Scalar;

fn accumulate<T: Scalar>(nodes: &[Node<T>], pending: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut pending[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Elementwise `f(g, other)` at the output shape, reduced to `target`'s shape.
fn broadcast_grad<T: Scalar>(
    g: &[T],
    out: &[usize],
    other: &Node<T>,
    target: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let full = kernels::binary_broadcast(g, out, other.value.data(), other.value.shape(), out, f);
    kernels::reduce_to_shape(&full, out, target)
}

pub(super) fn propagate<T: Scalar>(nodes: &[Node<T>], id: usize, g: Vec<T>, pending: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let out = node.value.shape();
    let y = node.value.data();
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let neg = matches!(node.op, Op::Sub(..));
            if rg(*a) {
                let ga = kernels::reduce_to_shape(&g, out, nodes[a.0].value.shape());
                accumulate(nodes, pending, *a, ga);
            }
            if rg(*b) {
                let mut gb = kernels::reduce_to_shape(&g, out, nodes[b.0].value.shape());
                if neg {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, pending, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let ga = broadcast_grad(&g, out, &nodes[b.0], nodes[a.0].value.shape(), |g, b| g * b);
                accumulate(nodes, pending, *a, ga);
            }
            if rg(*b) {
                let gb = broadcast_grad(&g, out, &nodes[a.0], nodes[b.0].value.shape(), |g, a| g * a);
                accumulate(nodes, pending, *b, gb);
            }
        }
        Op::Div(a, b) => {
            if rg(*a) {
                let ga = broadcast_grad(&g, out, &nodes[b.0], nodes[a.0].value.shape(), |g, b| g / b);
                accumulate(nodes, pending, *a, ga);
            }
            if rg(*b) {
                // d(a/b)/db = -y/b
                let gy: Vec<T> = g.iter().zip(y).map(|(&g, &y)| -g * y).collect();
                let gb = broadcast_grad(&gy, out, &nodes[b.0], nodes[b.0].value.shape(), |gy, b| gy / b);
                accumulate(nodes, pending, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            let c = T::of_f64(*c);
            accumulate(nodes, pending, *a, g.into_iter().map(|v| v * c).collect());
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let plan = matmul_plan(va.shape(), vb.shape()).expect("shapes validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if rg(*a) {
                let mut ga = vec![T::zero(); va.numel()];
                for &(o, ia, ib) in &plan.pairs {
                    kernels::gemm_acc(&g[o..], false, &vb.data()[ib..], true, &mut ga[ia..], m, n, k, T::one());
                }
                accumulate(nodes, pending, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); vb.numel()];
                for &(o, ia, ib) in &plan.pairs {
                    kernels::gemm_acc(&va.data()[ia..], true, &g[o..], false, &mut gb[ib..], k, m, n, T::one());
                }
                accumulate(nodes, pending, *b, gb);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (dx, dw) = kernels::conv2d_backward(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                &g,
                geom,
                rg(*x),
                rg(*w),
            );
            if let Some(dx) = dx {
                accumulate(nodes, pending, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, pending, *w, dw);
            }
            if let Some(b) = b.filter(|b| rg(*b)) {
                let hw = geom.ho * geom.wo;
                let mut db = vec![T::zero(); geom.cout];
                for (i, plane) in g.chunks(hw).enumerate() {
                    let mut s = T::zero();
                    for &v in plane {
                        s += v;
                    }
                    db[i % geom.cout] += s;
                }
                accumulate(nodes, pending, b, db);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            layout,
            mean,
            rstd,
        } => {
            let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                nodes[x.0].value.data(),
                nodes[gamma.0].value.data(),
                &g,
                mean,
                rstd,
                *layout,
            );
            accumulate(nodes, pending, *x, dx);
            accumulate(nodes, pending, *gamma, dgamma);
            accumulate(nodes, pending, *beta, dbeta);
        }
        Op::Gelu(x) => {
            let xs = nodes[x.0].value.data();
            let dx = g.iter().zip(xs).map(|(&g, &x)| g * kernels::gelu_grad_scalar(x)).collect();
            accumulate(nodes, pending, *x, dx);
        }
        Op::Sigmoid(x) => {
            let dx = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
            accumulate(nodes, pending, *x, dx);
        }
        Op::Exp(x) => {
            let dx = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
            accumulate(nodes, pending, *x, dx);
        }
        Op::Softmax(x) => {
            let k = *out.last().unwrap_or(&1);
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(dx.chunks_mut(k)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
                let dot = T::of_f64(dot);
                for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(nodes, pending, *x, dx);
        }
        Op::LogSoftmax(x) => {
            let k = *out.last().unwrap_or(&1);
            let mut dx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(dx.chunks_mut(k)) {
                let total = T::of_f64(gr.iter().map(|v| v.as_f64()).sum());
                for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = g - y.exp() * total;
                }
            }
            accumulate(nodes, pending, *x, dx);
        }
        Op::Reshape(x) => accumulate(nodes, pending, *x, g),
        Op::Permute(x, perm) => {
            let inv = kernels::inverse_permutation(perm);
            let (dx, _) = kernels::permute(&g, out, &inv);
            accumulate(nodes, pending, *x, dx);
        }
        Op::SumAll(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, pending, *x, vec![g[0]; n]);
        }
        Op::MeanAxis { x, axis } => {
            let s = nodes[x.0].value.shape();
            let outer: usize = s[..*axis].iter().product();
            let len = s[*axis];
            let inner: usize = s[axis + 1..].iter().product();
            let inv = T::of_f64(1.0 / len as f64);
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            for o in 0..outer {
                let src = &g[o * inner..][..inner];
                for a in 0..len {
                    for (d, &v) in dx[(o * len + a) * inner..][..inner].iter_mut().zip(src) {
                        *d = v * inv;
                    }
                }
            }
            accumulate(nodes, pending, *x, dx);
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            let mut dt = vec![T::zero(); nodes[table.0].value.numel()];
            for (r, &i) in ids.iter().enumerate() {
                for (t, &v) in dt[i * d..][..d].iter_mut().zip(&g[r * d..][..d]) {
                    *t += v;
                }
            }
            accumulate(nodes, pending, *table, dt);
        }
        Op::SelectRows { x, idx } => {
            let s = nodes[x.0].value.shape();
            let (l, d) = (s[1], s[2]);
            let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
            for (b, &i) in idx.iter().enumerate() {
                dx[(b * l + i) * d..][..d].copy_from_slice(&g[b * d..][..d]);
            }
            accumulate(nodes, pending, *x, dx);
        }
        Op::L2Normalize(x) => {
            let k = *out.last().unwrap_or(&1);
            let xs = nodes[x.0].value.data();
            let mut dx = vec![T::zero(); g.len()];
            for (((gr, yr), xr), dr) in g.chunks(k).zip(y.chunks(k)).zip(xs.chunks(k)).zip(dx.chunks_mut(k)) {
                let norm = xr.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
                for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = T::of_f64((g.as_f64() - y.as_f64() * dot) / norm);
                }
            }
            accumulate(nodes, pending, *x, dx);
        }
    }
}
