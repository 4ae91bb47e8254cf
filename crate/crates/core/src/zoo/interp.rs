use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::model::{layout, ModelGraph};

const CUBIC_A: f64 = -0.75;

fn cubic_weights(t: f64) -> [f64; 4] {
    let near = |x: f64| ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resampling matrix `[n_out, n_in]` for 1-D bicubic interpolation with
/// half-pixel centers and clamped borders.
fn resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let w = cubic_weights(src - base);
        for (k, wk) in w.iter().enumerate() {
            let i = (base as i64 - 1 + k as i64).clamp(0, n_in as i64 - 1) as usize;
            m[o * n_in + i] += wk;
        }
    }
    m
}

/// Bicubic resize of a `[g*g, D]` grid of vectors to `[n*n, D]`.
pub fn resize_grid<T: Scalar>(pos: &Tensor<T>, g: usize, n: usize) -> Result<Tensor<T>> {
    let s = pos.shape();
    if s.len() != 2 || s[0] != g * g {
        return Err(Error::dim("interpolate_pos_embed", format!("expects [{}, D], got {s:?}", g * g)));
    }
    let d = s[1];
    let r = resample_matrix(g, n);
    let src = pos.data();
    // rows first: [g, g, D] -> [n, g, D]
    let mut tmp = vec![0.0f64; n * g * d];
    for o in 0..n {
        for i in 0..g {
            let w = r[o * g + i];
            if w == 0.0 {
                continue;
            }
            for j in 0..g {
                let (dst, sr) = ((o * g + j) * d, (i * g + j) * d);
                for c in 0..d {
                    tmp[dst + c] += w * src[sr + c].as_f64();
                }
            }
        }
    }
    let mut out = vec![0.0f64; n * n * d];
    for y in 0..n {
        for o in 0..n {
            for j in 0..g {
                let w = r[o * g + j];
                if w == 0.0 {
                    continue;
                }
                let (dst, sr) = ((y * n + o) * d, (y * g + j) * d);
                for c in 0..d {
                    out[dst + c] += w * tmp[sr + c];
                }
            }
        }
    }
    Tensor::new(vec![n * n, d], out.into_iter().map(T::of_f64).collect())
}

/// Rebuilds the positional embedding for `new_size` inputs; every other
/// tensor is copied unchanged.
pub fn interpolate_pos_embed<T: Scalar>(model: &ModelGraph<T>, new_size: usize) -> Result<ModelGraph<T>> {
    if !model.arch.is_image() {
        return Err(Error::Contract("interpolate_pos_embed needs an image tower".into()));
    }
    if new_size == model.input_size {
        return Ok(model.clone());
    }
    // validates divisibility and yields the new grid
    let mods = layout(&model.arch, new_size)?;
    let new_len = mods
        .iter()
        .find(|m| m.name == "pos_embed")
        .map(|m| m.specs[0].shape[0])
        .ok_or_else(|| Error::Contract("tower has no positional embedding".into()))?;
    let old = model.params.get("pos_embed")?;
    let g = (old.shape()[0] as f64).sqrt().round() as usize;
    let n = (new_len as f64).sqrt().round() as usize;
    let resized = resize_grid(old, g, n)?;
    let mut out = model.clone();
    out.input_size = new_size;
    out.params.replace("pos_embed", resized)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for t in [0.0, 0.1, 0.5, 0.93] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn same_size_matrix_is_identity() {
        let m = resample_matrix(5, 5);
        for o in 0..5 {
            for i in 0..5 {
                assert_eq!(m[o * 5 + i], if o == i { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn matches_reference_bicubic() {
        // 4x4 grid of i^1.5 resized to 6x6 by torch.nn.functional.interpolate
        // (mode="bicubic", align_corners=False), float64
        let want = [
            -0.764820693122, -0.446753920621, 0.389135055533, 1.376304587262, 3.076536837829, 4.234109434328,
            2.456943792572, 3.377052420781, 5.095430025801, 6.581289729686, 8.915873935311, 10.434482077901,
            10.158947336331, 11.870322855954, 14.770815402992, 16.956341804939, 20.194639953844, 22.23411401781,
            18.661760325614, 20.688009350472, 24.095160744591, 26.631178447472, 30.342886241978, 32.664940046524,
            33.039991146853, 35.459662707065, 39.497447036809, 42.466362428435, 46.766041670167, 49.440082426505,
            42.746137298605, 45.381438667548, 49.766076803856, 52.974579134453, 57.601940895418, 60.472991072218,
        ];
        let pos = Tensor::<f64>::from_fn(vec![16, 1], |i| (i as f64).powf(1.5));
        let out = resize_grid(&pos, 4, 6).unwrap();
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
