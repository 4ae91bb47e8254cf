use serde::{Deserialize, Serialize};

use super::{join, Bound, Ctx, Init, ParamSpec, BN_EPS, LN_EPS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn conv_specs(out: &mut Vec<ParamSpec>, p: &str, cout: usize, cin_g: usize, k: usize, bias: bool) {
    out.push(ParamSpec::new(join(p, "weight"), vec![cout, cin_g, k, k], Init::FanIn(cin_g * k * k)));
    if bias {
        out.push(ParamSpec::new(join(p, "bias"), vec![cout], Init::Zeros));
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, p: &str, c: usize) {
    out.push(ParamSpec::new(join(p, "weight"), vec![c], Init::Ones));
    out.push(ParamSpec::new(join(p, "bias"), vec![c], Init::Zeros));
}

fn bn_specs(out: &mut Vec<ParamSpec>, p: &str, c: usize) {
    norm_specs(out, p, c);
    out.push(ParamSpec::buffer(join(p, "running_mean"), vec![c], Init::Zeros));
    out.push(ParamSpec::buffer(join(p, "running_var"), vec![c], Init::Ones));
}

fn linear_specs(out: &mut Vec<ParamSpec>, p: &str, din: usize, dout: usize, bias: bool) {
    out.push(ParamSpec::new(join(p, "weight"), vec![din, dout], Init::FanIn(din)));
    if bias {
        out.push(ParamSpec::new(join(p, "bias"), vec![dout], Init::Zeros));
    }
}

#[allow(clippy::too_many_arguments)]
fn conv<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    p: &str,
    x: Var,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: bool,
) -> Result<Var> {
    let w = b.var(&join(p, "weight"))?;
    let bias = if bias { Some(b.var(&join(p, "bias"))?) } else { None };
    g.conv2d(x, w, bias, stride, pad, groups)
}

fn ln2d<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
    let (w, bias) = (b.var(&join(p, "weight"))?, b.var(&join(p, "bias"))?);
    g.layer_norm_2d(x, w, bias, LN_EPS)
}

fn ln<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
    let (w, bias) = (b.var(&join(p, "weight"))?, b.var(&join(p, "bias"))?);
    g.layer_norm(x, w, bias, LN_EPS)
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var, bias: bool) -> Result<Var> {
    let w = b.var(&join(p, "weight"))?;
    let bias = if bias { Some(b.var(&join(p, "bias"))?) } else { None };
    g.linear(x, w, bias)
}

/// Inference-mode batch norm over NCHW using stored running statistics.
fn bn<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    let mean = g.value(b.var(&join(p, "running_mean"))?).clone();
    let var = g.value(b.var(&join(p, "running_var"))?).clone();
    let inv = var.map(|v| T::one() / (v + T::of_f64(BN_EPS)).sqrt());
    let mean = g.constant(mean.reshape(vec![c, 1, 1])?);
    let inv = g.constant(inv.reshape(vec![c, 1, 1])?);
    let gamma = b.var(&join(p, "weight"))?;
    let gamma = g.reshape(gamma, &[c, 1, 1])?;
    let beta = b.var(&join(p, "bias"))?;
    let beta = g.reshape(beta, &[c, 1, 1])?;
    let h = g.sub(x, mean)?;
    let h = g.mul(h, inv)?;
    let h = g.mul(h, gamma)?;
    g.add(h, beta)
}

fn conv_macs(k: usize, cin_g: usize, cout: usize, ho: usize, wo: usize) -> u64 {
    (k * k * cin_g * cout * ho * wo) as u64
}

fn expect_channels<T: Scalar>(g: &Graph<T>, x: Var, c: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != c {
        return Err(Error::dim(op, format!("expects [B, {c}, H, W], got {s:?}")));
    }
    Ok(())
}

/// Two 3×3 convolutions (stride 2 then 1), each followed by channel LN and GELU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub cin: usize,
    pub cout: usize,
}

impl Stem {
    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        conv_specs(out, &join(p, "conv1"), self.cout, self.cin, 3, true);
        norm_specs(out, &join(p, "norm1"), self.cout);
        conv_specs(out, &join(p, "conv2"), self.cout, self.cout, 3, true);
        norm_specs(out, &join(p, "norm2"), self.cout);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
        expect_channels(g, x, self.cin, "conv_stem")?;
        let s = g.shape(x);
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim("conv_stem", format!("spatial extents must be even, got {s:?}")));
        }
        let h = conv(g, b, &join(p, "conv1"), x, 2, 1, 1, true)?;
        let h = ln2d(g, b, &join(p, "norm1"), h)?;
        let h = g.gelu(h);
        let h = conv(g, b, &join(p, "conv2"), h, 1, 1, 1, true)?;
        let h = ln2d(g, b, &join(p, "norm2"), h)?;
        Ok(g.gelu(h))
    }

    /// MACs and output extent for a square `hw` input.
    pub fn macs(&self, hw: usize) -> (u64, usize) {
        let ho = hw / 2;
        (
            conv_macs(3, self.cin, self.cout, ho, ho) + conv_macs(3, self.cout, self.cout, ho, ho),
            ho,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MbConvNorm {
    /// Single leading layer norm, biased convolutions.
    Ln,
    /// Batch norm after each convolution.
    Bn,
    /// Batch norm plus a squeeze-excitation gate after the depthwise conv.
    BnSe,
}

/// Inverted bottleneck: 1×1 expand, 3×3 depthwise, 1×1 project.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbConv {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub expansion: usize,
    pub norm: MbConvNorm,
}

impl MbConv {
    pub fn mid(&self) -> usize {
        self.cout * self.expansion
    }

    pub fn has_shortcut(&self) -> bool {
        self.stride == 2 || self.cin != self.cout
    }

    fn se_width(&self) -> usize {
        (self.mid() / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("MBConv stride must be 1 or 2, got {}", self.stride)));
        }
        if self.expansion == 0 || self.cin == 0 || self.cout == 0 {
            return Err(Error::Config("MBConv widths must be positive".into()));
        }
        Ok(())
    }

    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        let (mid, ln) = (self.mid(), self.norm == MbConvNorm::Ln);
        if ln {
            norm_specs(out, &join(p, "norm"), self.cin);
        }
        conv_specs(out, &join(p, "expand"), mid, self.cin, 1, ln);
        if !ln {
            bn_specs(out, &join(p, "bn1"), mid);
        }
        conv_specs(out, &join(p, "dwconv"), mid, 1, 3, ln);
        if !ln {
            bn_specs(out, &join(p, "bn2"), mid);
        }
        if self.norm == MbConvNorm::BnSe {
            let rd = self.se_width();
            linear_specs(out, &join(p, "se.reduce"), mid, rd, true);
            linear_specs(out, &join(p, "se.expand"), rd, mid, true);
        }
        conv_specs(out, &join(p, "project"), self.cout, mid, 1, ln);
        if !ln {
            bn_specs(out, &join(p, "bn3"), self.cout);
        }
        if self.has_shortcut() {
            conv_specs(out, &join(p, "shortcut"), self.cout, self.cin, 1, true);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        p: &str,
        x: Var,
        ctx: &mut Ctx,
        drop: f64,
    ) -> Result<Var> {
        self.validate()?;
        expect_channels(g, x, self.cin, "mbconv")?;
        let (mid, ln) = (self.mid(), self.norm == MbConvNorm::Ln);
        let mut h = if ln { ln2d(g, b, &join(p, "norm"), x)? } else { x };
        h = conv(g, b, &join(p, "expand"), h, 1, 0, 1, ln)?;
        if !ln {
            h = bn(g, b, &join(p, "bn1"), h)?;
        }
        h = g.gelu(h);
        h = conv(g, b, &join(p, "dwconv"), h, self.stride, 1, mid, ln)?;
        if !ln {
            h = bn(g, b, &join(p, "bn2"), h)?;
        }
        h = g.gelu(h);
        if self.norm == MbConvNorm::BnSe {
            h = self.squeeze_excite(g, b, p, h)?;
        }
        h = conv(g, b, &join(p, "project"), h, 1, 0, 1, ln)?;
        if !ln {
            h = bn(g, b, &join(p, "bn3"), h)?;
        }
        let h = ctx.drop_path(g, h, drop)?;
        let skip = if self.has_shortcut() {
            conv(g, b, &join(p, "shortcut"), x, self.stride, 0, 1, true)?
        } else {
            x
        };
        g.add(skip, h)
    }

    fn squeeze_excite<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let z = linear(g, b, &join(p, "se.reduce"), pooled, true)?;
        let z = g.gelu(z);
        let z = linear(g, b, &join(p, "se.expand"), z, true)?;
        let gate = g.sigmoid(z);
        let gate = g.reshape(gate, &[s[0], s[1], 1, 1])?;
        g.mul(h, gate)
    }

    pub fn macs(&self, hw: usize) -> (u64, usize) {
        let mid = self.mid();
        let ho = hw / self.stride;
        let mut m = conv_macs(1, self.cin, mid, hw, hw) + conv_macs(3, 1, mid, ho, ho) + conv_macs(1, mid, self.cout, ho, ho);
        if self.norm == MbConvNorm::BnSe {
            m += 2 * (mid * self.se_width()) as u64;
        }
        if self.has_shortcut() {
            m += conv_macs(1, self.cin, self.cout, ho, ho);
        }
        (m, ho)
    }
}

/// 7×7 depthwise, channel LN, 4× pointwise MLP, layer scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvNeXtBlock {
    pub channels: usize,
}

impl ConvNeXtBlock {
    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        let c = self.channels;
        conv_specs(out, &join(p, "dwconv"), c, 1, 7, true);
        norm_specs(out, &join(p, "norm"), c);
        conv_specs(out, &join(p, "fc1"), 4 * c, c, 1, true);
        conv_specs(out, &join(p, "fc2"), c, 4 * c, 1, true);
        out.push(ParamSpec::new(join(p, "layer_scale"), vec![c], Init::Const(1e-6)));
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        p: &str,
        x: Var,
        ctx: &mut Ctx,
        drop: f64,
    ) -> Result<Var> {
        let c = self.channels;
        expect_channels(g, x, c, "convnext_block")?;
        let h = conv(g, b, &join(p, "dwconv"), x, 1, 3, c, true)?;
        let h = ln2d(g, b, &join(p, "norm"), h)?;
        let h = conv(g, b, &join(p, "fc1"), h, 1, 0, 1, true)?;
        let h = g.gelu(h);
        let h = conv(g, b, &join(p, "fc2"), h, 1, 0, 1, true)?;
        let ls = b.var(&join(p, "layer_scale"))?;
        let ls = g.reshape(ls, &[c, 1, 1])?;
        let h = g.mul(h, ls)?;
        let h = ctx.drop_path(g, h, drop)?;
        g.add(x, h)
    }

    pub fn macs(&self, hw: usize) -> u64 {
        let c = self.channels;
        conv_macs(7, 1, c, hw, hw) + 2 * conv_macs(1, c, 4 * c, hw, hw)
    }
}

/// Channel LN followed by a 2×2 stride-2 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Downsample {
    pub cin: usize,
    pub cout: usize,
}

impl Downsample {
    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        norm_specs(out, &join(p, "norm"), self.cin);
        conv_specs(out, &join(p, "conv"), self.cout, self.cin, 2, true);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
        expect_channels(g, x, self.cin, "downsample")?;
        let h = ln2d(g, b, &join(p, "norm"), x)?;
        conv(g, b, &join(p, "conv"), h, 2, 0, 1, true)
    }

    pub fn macs(&self, hw: usize) -> (u64, usize) {
        let ho = hw / 2;
        (conv_macs(2, self.cin, self.cout, ho, ho), ho)
    }
}

/// Channel LN followed by a stride-2 convolution into the token width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patchify {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Patchify {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        norm_specs(out, &join(p, "norm"), self.cin);
        conv_specs(out, &join(p, "conv"), self.cout, self.cin, self.kernel, true);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
        expect_channels(g, x, self.cin, "patchify")?;
        let h = ln2d(g, b, &join(p, "norm"), x)?;
        conv(g, b, &join(p, "conv"), h, 2, self.pad(), 1, true)
    }

    pub fn macs(&self, hw: usize) -> (u64, usize) {
        let ho = (hw + 2 * self.pad() - self.kernel) / 2 + 1;
        (conv_macs(self.kernel, self.cin, self.cout, ho, ho), ho)
    }
}

/// Multi-head softmax attention with biased Q, K, V and output projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

impl Attention {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        for n in ["q", "k", "v", "o"] {
            linear_specs(out, &join(p, n), self.dim, self.dim, true);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
        self.validate()?;
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim("attention", format!("expects [B, L, {}], got {s:?}", self.dim)));
        }
        let (bsz, l, h) = (s[0], s[1], self.heads);
        let dh = self.dim / h;
        let split = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let t = linear(g, b, &join(p, name), x, true)?;
            let t = g.reshape(t, &[bsz, l, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = split(g, "q")?;
        let k = split(g, "k")?;
        let v = split(g, "v")?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = if self.causal {
            g.causal_softmax(scores)?
        } else {
            g.softmax(scores)?
        };
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bsz, l, self.dim])?;
        linear(g, b, &join(p, "o"), ctx, true)
    }

    /// Projection MACs only; the score and value products are not counted.
    pub fn macs(&self, tokens: usize) -> u64 {
        (4 * self.dim * self.dim * tokens) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnKind {
    /// `W_out (gelu(x W_gate) * (x W_value))`.
    GeGlu,
    /// `W_2 gelu(x W_1)`.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub dim: usize,
    pub hidden: usize,
    pub kind: FfnKind,
}

impl Ffn {
    /// Default hidden width: 2d for GeGLU, 4d for the plain MLP.
    pub fn standard(dim: usize, kind: FfnKind) -> Self {
        let hidden = match kind {
            FfnKind::GeGlu => 2 * dim,
            FfnKind::Mlp => 4 * dim,
        };
        Ffn { dim, hidden, kind }
    }

    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        match self.kind {
            FfnKind::GeGlu => {
                linear_specs(out, &join(p, "gate"), self.dim, self.hidden, true);
                linear_specs(out, &join(p, "value"), self.dim, self.hidden, true);
                linear_specs(out, &join(p, "out"), self.hidden, self.dim, true);
            }
            FfnKind::Mlp => {
                linear_specs(out, &join(p, "fc1"), self.dim, self.hidden, true);
                linear_specs(out, &join(p, "fc2"), self.hidden, self.dim, true);
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
        match self.kind {
            FfnKind::GeGlu => {
                let gate = linear(g, b, &join(p, "gate"), x, true)?;
                let gate = g.gelu(gate);
                let value = linear(g, b, &join(p, "value"), x, true)?;
                let h = g.mul(gate, value)?;
                linear(g, b, &join(p, "out"), h, true)
            }
            FfnKind::Mlp => {
                let h = linear(g, b, &join(p, "fc1"), x, true)?;
                let h = g.gelu(h);
                linear(g, b, &join(p, "fc2"), h, true)
            }
        }
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        let per = self.dim * self.hidden * tokens;
        match self.kind {
            FfnKind::GeGlu => 3 * per as u64,
            FfnKind::Mlp => 2 * per as u64,
        }
    }
}

/// Pre-norm transformer block: attention then FFN, each residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn: Attention,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn new(dim: usize, heads: usize, kind: FfnKind, causal: bool) -> Self {
        TransformerBlock {
            attn: Attention { dim, heads, causal },
            ffn: Ffn::standard(dim, kind),
        }
    }

    pub fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        let d = self.attn.dim;
        norm_specs(out, &join(p, "norm1"), d);
        self.attn.specs(&join(p, "attn"), out);
        norm_specs(out, &join(p, "norm2"), d);
        self.ffn.specs(&join(p, "ffn"), out);
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        p: &str,
        x: Var,
        ctx: &mut Ctx,
        drop: f64,
    ) -> Result<Var> {
        let h = ln(g, b, &join(p, "norm1"), x)?;
        let h = self.attn.forward(g, b, &join(p, "attn"), h)?;
        let h = ctx.drop_path(g, h, drop)?;
        let u = g.add(x, h)?;
        let h = ln(g, b, &join(p, "norm2"), u)?;
        let h = self.ffn.forward(g, b, &join(p, "ffn"), h)?;
        let h = ctx.drop_path(g, h, drop)?;
        g.add(u, h)
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        self.attn.macs(tokens) + self.ffn.macs(tokens)
    }
}

/// Final LN over tokens `[B, L, d]`.
pub(crate) fn token_norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var) -> Result<Var> {
    ln(g, b, p, x)
}

pub(crate) fn norm_param_specs(out: &mut Vec<ParamSpec>, p: &str, c: usize) {
    norm_specs(out, p, c)
}

pub(crate) fn conv_param_specs(out: &mut Vec<ParamSpec>, p: &str, cout: usize, cin: usize, k: usize) {
    conv_specs(out, p, cout, cin, k, true)
}

pub(crate) fn conv_forward<T: Scalar>(g: &mut Graph<T>, b: &Bound, p: &str, x: Var, stride: usize) -> Result<Var> {
    conv(g, b, p, x, stride, 0, 1, true)
}
