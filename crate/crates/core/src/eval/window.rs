use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{Arch, ModelGraph};

/// Input pixels per output token along one side.
pub fn token_stride(arch: &Arch) -> Result<usize> {
    match arch {
        Arch::Vitamin(v) => Ok(v.output_stride()),
        Arch::Vit(v) => Ok(v.patch),
        Arch::Text(_) => Err(Error::Contract("text towers have no token grid".into())),
    }
}

/// Dense frozen features for an image larger than the pretraining size.
///
/// The image is cut into non-overlapping `window`×`window` tiles, each tile's
/// final-LN token grid is computed with the tower as trained (positional
/// embedding applied per tile), and the grids are stitched row-major into a
/// `[B, (H/s)·(W/s), D]` map where `s` is the token stride.
pub fn sliding_window_extract<T: Scalar>(model: &ModelGraph<T>, image: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let s = token_stride(&model.arch)?;
    let sh = image.shape();
    if sh.len() != 4 || sh[1] != 3 {
        return Err(Error::dim("sliding_window_extract", format!("expects [B, 3, H, W], got {sh:?}")));
    }
    let (b, h, w) = (sh[0], sh[2], sh[3]);
    if window == 0 || window % s != 0 {
        return Err(Error::dim(
            "sliding_window_extract",
            format!("window {window} is not a multiple of the token stride {s}"),
        ));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::dim(
            "sliding_window_extract",
            format!(
                "{h}x{w} does not tile by {window}; pad to {}x{}",
                h.div_ceil(window) * window,
                w.div_ceil(window) * window
            ),
        ));
    }
    if model.input_size != window {
        return Err(Error::Contract(format!(
            "window {window} differs from the tower's input size {}; use the pretraining size or interpolate_pos_embed",
            model.input_size
        )));
    }
    if h == window && w == window {
        return model.tokens_of(image);
    }
    let g = window / s;
    let (gh, gw) = (h / s, w / s);
    let d = match &model.arch {
        Arch::Vitamin(v) => v.width(),
        Arch::Vit(v) => v.width,
        Arch::Text(_) => unreachable!(),
    };
    let mut out = vec![T::zero(); b * gh * gw * d];
    let src = image.data();
    for ty in 0..h / window {
        for tx in 0..w / window {
            let mut crop = Vec::with_capacity(b * 3 * window * window);
            for bi in 0..b {
                for c in 0..3 {
                    for y in 0..window {
                        let at = ((bi * 3 + c) * h + ty * window + y) * w + tx * window;
                        crop.extend_from_slice(&src[at..at + window]);
                    }
                }
            }
            let tok = model.tokens_of(&Tensor::new(vec![b, 3, window, window], crop)?)?;
            let td = tok.data();
            for bi in 0..b {
                for r in 0..g {
                    for c in 0..g {
                        let from = ((bi * g + r) * g + c) * d;
                        let to = ((bi * gh + ty * g + r) * gw + tx * g + c) * d;
                        out[to..to + d].copy_from_slice(&td[from..from + d]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, d], out)
}
