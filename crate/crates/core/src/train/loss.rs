use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Initial logit scale, ln(1/0.07).
pub fn initial_logit_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Upper bound on the logit scale so that exp(s) <= 100.
pub fn max_logit_scale() -> f64 {
    100.0f64.ln()
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    let d = *t.shape().last().unwrap_or(&1);
    for (r, row) in t.data().chunks(d).enumerate() {
        let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > T::NORM_TOL {
            return Err(Error::Contract(format!(
                "clip_loss needs unit-norm rows; {what} row {r} has norm {n}"
            )));
        }
    }
    Ok(())
}

/// Symmetric contrastive loss over `N` pairs.
///
/// `x`, `y`: `[N, D]` unit-norm rows; `scale`: scalar `s` with logits
/// `exp(s) * x yᵀ`. Returns the mean of the image-to-text and text-to-image
/// cross-entropies against the diagonal.
pub fn clip_loss<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, scale: Var) -> Result<Var> {
    let (xs, ys) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if xs.len() != 2 || xs != ys {
        return Err(Error::dim("clip_loss", format!("x {xs:?} and y {ys:?} must both be [N, D]")));
    }
    if g.value(scale).numel() != 1 {
        return Err(Error::dim("clip_loss", "logit scale must hold one value"));
    }
    check_unit_rows(g.value(x), "x")?;
    check_unit_rows(g.value(y), "y")?;
    let n = xs[0];
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    let s = g.reshape(scale, &[])?;
    let e = g.exp(s);
    let logits = g.mul(sim, e)?;
    let i2t = g.log_softmax(logits)?;
    let i2t = g.diagonal(i2t)?;
    let lt = g.transpose(logits)?;
    let t2i = g.log_softmax(lt)?;
    let t2i = g.diagonal(t2i)?;
    let a = g.sum(i2t);
    let b = g.sum(t2i);
    let total = g.add(a, b)?;
    Ok(g.scale(total, -1.0 / (2.0 * n as f64)))
}

/// Value-only evaluation of [`clip_loss`].
pub fn clip_loss_value<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let s = g.constant(Tensor::scalar(T::of_f64(scale)));
    let l = clip_loss(&mut g, xv, yv, s)?;
    Ok(g.value(l).item().as_f64())
}

/// Row-wise unit normalization of a plain tensor.
pub fn l2_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(v.clone());
    let y = g.l2_normalize(x)?;
    Ok(g.value(y).clone())
}
