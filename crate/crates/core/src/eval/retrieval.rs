use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_unit<T: Scalar>(t: &Tensor<T>, which: &str) -> Result<()> {
    let d = t.shape()[1];
    for (i, r) in t.data().chunks(d).enumerate() {
        let n = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > T::NORM_TOL {
            return Err(Error::Contract(format!("{which} row {i} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Recall@k in both directions for paired unit rows `x[i] <-> y[i]`.
///
/// A query's rank is the number of candidates scoring strictly higher than
/// its partner, so ties are resolved in the partner's favor.
pub fn retrieval_recall_at_k<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, k: usize) -> Result<(f64, f64)> {
    if x.rank() != 2 || x.shape() != y.shape() {
        return Err(Error::dim("retrieval_recall_at_k", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if k == 0 || k > n {
        return Err(Error::Contract(format!("recall@{k} needs 1 <= k <= N = {n}")));
    }
    check_unit(x, "x")?;
    check_unit(y, "y")?;
    let (xs, ys) = (x.data(), y.data());
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(p, q)| p.as_f64() * q.as_f64()).sum::<f64>();
    let s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&xs[i * d..(i + 1) * d], &ys[j * d..(j + 1) * d])).collect()).collect();
    let mut i2t = 0;
    let mut t2i = 0;
    for i in 0..n {
        if (0..n).filter(|&j| s[i][j] > s[i][i]).count() < k {
            i2t += 1;
        }
        if (0..n).filter(|&j| s[j][i] > s[i][i]).count() < k {
            t2i += 1;
        }
    }
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}
