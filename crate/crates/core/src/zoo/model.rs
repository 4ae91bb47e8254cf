use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    conv_forward, conv_param_specs, drop_path_schedule, join, linear, norm_param_specs,
    token_norm, Bound, ConvNeXtBlock, Ctx, Downsample, FfnKind, Init, MbConv, MbConvNorm, ParamSpec, ParamStore,
    Patchify, Stem, TransformerBlock,
};
use crate::tensor::{Scalar, Tensor};

use super::spec::{Arch, ConvBlockKind, TextSpec, VariantSpec, VitSpec};

/// One named unit of a tower with its parameters and MACs at the layout's
/// input size.
#[derive(Debug, Clone)]
pub struct Module {
    pub name: String,
    pub specs: Vec<ParamSpec>,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum ConvUnit {
    Mb(MbConv),
    Cnx(ConvNeXtBlock),
    Down(Downsample),
}

impl ConvUnit {
    fn specs(&self, p: &str, out: &mut Vec<ParamSpec>) {
        match self {
            ConvUnit::Mb(b) => b.specs(p, out),
            ConvUnit::Cnx(b) => b.specs(p, out),
            ConvUnit::Down(b) => b.specs(p, out),
        }
    }

    fn macs(&self, hw: usize) -> (u64, usize) {
        match self {
            ConvUnit::Mb(b) => b.macs(hw),
            ConvUnit::Cnx(b) => (b.macs(hw), hw),
            ConvUnit::Down(b) => b.macs(hw),
        }
    }
}

/// Concrete blocks of a hybrid tower, shared by layout and forward.
#[derive(Debug, Clone)]
pub(crate) struct HybridPlan {
    stem: Stem,
    /// (name, unit) for both convolutional stages.
    conv: Vec<(String, ConvUnit)>,
    patchify: Patchify,
    tokens: Vec<TransformerBlock>,
}

impl HybridPlan {
    fn new(v: &VariantSpec) -> Result<Self> {
        v.validate()?;
        let c0 = v.stem_channels;
        let stem = Stem { cin: 3, cout: c0 };
        let mut conv = Vec::new();
        let mut cin = c0;
        for s in 0..2 {
            let cout = v.stage_channels[s];
            let norm = match v.conv_block {
                ConvBlockKind::MbconvLn => Some(MbConvNorm::Ln),
                ConvBlockKind::MbconvBn => Some(MbConvNorm::Bn),
                ConvBlockKind::MbconvBnSe => Some(MbConvNorm::BnSe),
                ConvBlockKind::Convnext => None,
            };
            let stage = format!("stage{}", s + 1);
            match norm {
                Some(norm) => {
                    for i in 0..v.stage_depths[s] {
                        let (ci, stride) = if i == 0 { (cin, 2) } else { (cout, 1) };
                        let m = MbConv {
                            cin: ci,
                            cout,
                            stride,
                            expansion: v.expansion,
                            norm,
                        };
                        conv.push((format!("{stage}.block{i}"), ConvUnit::Mb(m)));
                    }
                }
                None => {
                    conv.push((format!("{stage}.downsample"), ConvUnit::Down(Downsample { cin, cout })));
                    for i in 0..v.stage_depths[s] {
                        conv.push((format!("{stage}.block{i}"), ConvUnit::Cnx(ConvNeXtBlock { channels: cout })));
                    }
                }
            }
            cin = cout;
        }
        let d = v.width();
        let patchify = Patchify {
            cin,
            cout: d,
            kernel: v.patchify_kernel,
        };
        let tokens = (0..v.stage_depths[2])
            .map(|_| TransformerBlock::new(d, v.heads, v.token_block, false))
            .collect();
        Ok(HybridPlan {
            stem,
            conv,
            patchify,
            tokens,
        })
    }

    fn residual_blocks(&self) -> usize {
        self.conv.iter().filter(|(_, u)| !matches!(u, ConvUnit::Down(_))).count() + self.tokens.len()
    }
}

fn grid_of(arch: &Arch, input_size: usize) -> Result<usize> {
    let m = arch.input_multiple();
    if input_size == 0 || input_size % m != 0 {
        return Err(Error::dim(
            "input_geometry",
            format!("input size {input_size} is not divisible by {m} for {}", arch.name()),
        ));
    }
    Ok(input_size / m)
}

fn module(name: impl Into<String>, macs: u64, f: impl FnOnce(&str, &mut Vec<ParamSpec>)) -> Module {
    let name = name.into();
    let mut specs = Vec::new();
    f(&name, &mut specs);
    Module { name, specs, macs }
}

fn token_tail(mods: &mut Vec<Module>, d: usize, embed: usize) {
    mods.push(module("norm", 0, |p, o| norm_param_specs(o, p, d)));
    mods.push(module("head", (d * embed) as u64, |p, o| {
        o.push(ParamSpec::new(join(p, "weight"), vec![d, embed], Init::FanIn(d)))
    }));
}

/// Structural description of a tower at `input_size` (image side length, or
/// context length for text). Needs no parameter storage.
pub fn layout(arch: &Arch, input_size: usize) -> Result<Vec<Module>> {
    arch.validate()?;
    let mut mods = Vec::new();
    match arch {
        Arch::Vitamin(v) => {
            grid_of(arch, input_size)?;
            let plan = HybridPlan::new(v)?;
            let (m, mut hw) = plan.stem.macs(input_size);
            mods.push(module("stem", m, |p, o| plan.stem.specs(p, o)));
            for (name, u) in &plan.conv {
                let (m, ho) = u.macs(hw);
                hw = ho;
                mods.push(module(name.as_str(), m, |p, o| u.specs(p, o)));
            }
            let (m, hw) = plan.patchify.macs(hw);
            mods.push(module("patchify", m, |p, o| plan.patchify.specs(p, o)));
            let (l, d) = (hw * hw, v.width());
            mods.push(module("pos_embed", 0, |p, o| {
                o.push(ParamSpec::new(p.to_string(), vec![l, d], Init::Normal(0.02)))
            }));
            for (i, b) in plan.tokens.iter().enumerate() {
                mods.push(module(format!("stage3.block{i}"), b.macs(l), |p, o| b.specs(p, o)));
            }
            token_tail(&mut mods, d, v.embed_dim);
        }
        Arch::Vit(v) => {
            let gs = grid_of(arch, input_size)?;
            let (l, d) = (gs * gs, v.width);
            let m = (v.patch * v.patch * 3 * d * l) as u64;
            mods.push(module("patch_embed", m, |p, o| conv_param_specs(o, p, d, 3, v.patch)));
            mods.push(module("pos_embed", 0, |p, o| {
                o.push(ParamSpec::new(p.to_string(), vec![l, d], Init::Normal(0.02)))
            }));
            let b = TransformerBlock::new(d, v.heads, FfnKind::Mlp, false);
            for i in 0..v.depth {
                mods.push(module(format!("blocks.block{i}"), b.macs(l), |p, o| b.specs(p, o)));
            }
            token_tail(&mut mods, d, v.embed_dim);
        }
        Arch::Text(t) => {
            if input_size != t.context {
                return Err(Error::dim(
                    "input_geometry",
                    format!("text tower context is {}, got {input_size}", t.context),
                ));
            }
            let (l, d) = (t.context, t.width);
            mods.push(module("token_embed", 0, |p, o| {
                o.push(ParamSpec::new(p.to_string(), vec![t.vocab, d], Init::Normal(0.02)))
            }));
            mods.push(module("pos_embed", 0, |p, o| {
                o.push(ParamSpec::new(p.to_string(), vec![l, d], Init::Normal(0.01)))
            }));
            let b = TransformerBlock::new(d, t.heads, FfnKind::Mlp, true);
            for i in 0..t.depth {
                mods.push(module(format!("blocks.block{i}"), b.macs(l), |p, o| b.specs(p, o)));
            }
            token_tail(&mut mods, d, t.embed_dim);
        }
    }
    Ok(mods)
}

/// Native input size of an arch: 224 for image towers, the context length
/// for text.
pub fn default_input(arch: &Arch) -> usize {
    match arch {
        Arch::Text(t) => t.context,
        _ => 224,
    }
}

/// A built tower: architecture, input geometry and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Scalar> {
    pub arch: Arch,
    pub input_size: usize,
    pub params: ParamStore<T>,
}

pub fn build<T: Scalar>(arch: &Arch, input_size: usize, seed: u64) -> Result<ModelGraph<T>> {
    let specs: Vec<ParamSpec> = layout(arch, input_size)?.into_iter().flat_map(|m| m.specs).collect();
    Ok(ModelGraph {
        arch: arch.clone(),
        input_size,
        params: ParamStore::from_specs(&specs, seed)?,
    })
}

pub fn build_vitamin<T: Scalar>(v: &VariantSpec, input_size: usize, seed: u64) -> Result<ModelGraph<T>> {
    build(&Arch::Vitamin(v.clone()), input_size, seed)
}

pub fn build_vit<T: Scalar>(v: &VitSpec, input_size: usize, seed: u64) -> Result<ModelGraph<T>> {
    build(&Arch::Vit(v.clone()), input_size, seed)
}

pub fn build_text_encoder<T: Scalar>(t: &TextSpec, seed: u64) -> Result<ModelGraph<T>> {
    build(&Arch::Text(t.clone()), t.context, seed)
}

fn to_tokens<T: Scalar>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let h = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(h, &[0, 2, 1])
}

/// Index of the end-of-text token (the highest id) in each row.
pub fn eot_positions(ids: &[usize], context: usize) -> Vec<usize> {
    ids.chunks(context)
        .map(|row| {
            let mut best = 0;
            for (i, &t) in row.iter().enumerate() {
                if t > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl<T: Scalar> ModelGraph<T> {
    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    pub fn layout(&self) -> Result<Vec<Module>> {
        layout(&self.arch, self.input_size)
    }

    fn check_image(&self, g: &Graph<T>, x: Var) -> Result<()> {
        if !self.arch.is_image() {
            return Err(Error::Contract(format!("{} is not an image tower", self.arch.name())));
        }
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim("image_forward", format!("expects [B, 3, S, S], got {s:?}")));
        }
        if s[2] != self.input_size || s[3] != self.input_size {
            return Err(Error::dim(
                "image_forward",
                format!(
                    "input is {}x{} but the positional embedding is laid out for {}x{}; call interpolate_pos_embed first",
                    s[2], s[3], self.input_size, self.input_size
                ),
            ));
        }
        Ok(())
    }

    /// Final-LN token grid `[B, L, D]` (before pooling).
    pub fn image_tokens(&self, g: &mut Graph<T>, b: &Bound, x: Var, ctx: &mut Ctx) -> Result<Var> {
        self.check_image(g, x)?;
        let h = match &self.arch {
            Arch::Vitamin(v) => {
                let plan = HybridPlan::new(v)?;
                let rates = drop_path_schedule(ctx.drop_path, plan.residual_blocks());
                let mut k = 0;
                let mut h = plan.stem.forward(g, b, "stem", x)?;
                for (name, u) in &plan.conv {
                    h = match u {
                        ConvUnit::Mb(m) => {
                            k += 1;
                            m.forward(g, b, name, h, ctx, rates[k - 1])?
                        }
                        ConvUnit::Cnx(c) => {
                            k += 1;
                            c.forward(g, b, name, h, ctx, rates[k - 1])?
                        }
                        ConvUnit::Down(d) => d.forward(g, b, name, h)?,
                    };
                }
                h = plan.patchify.forward(g, b, "patchify", h)?;
                h = to_tokens(g, h)?;
                let pos = b.var("pos_embed")?;
                h = g.add(h, pos)?;
                for (i, blk) in plan.tokens.iter().enumerate() {
                    h = blk.forward(g, b, &format!("stage3.block{i}"), h, ctx, rates[k + i])?;
                }
                h
            }
            Arch::Vit(v) => {
                let rates = drop_path_schedule(ctx.drop_path, v.depth);
                let mut h = conv_forward(g, b, "patch_embed", x, v.patch)?;
                h = to_tokens(g, h)?;
                let pos = b.var("pos_embed")?;
                h = g.add(h, pos)?;
                let blk = TransformerBlock::new(v.width, v.heads, FfnKind::Mlp, false);
                for (i, r) in rates.iter().enumerate() {
                    h = blk.forward(g, b, &format!("blocks.block{i}"), h, ctx, *r)?;
                }
                h
            }
            Arch::Text(_) => unreachable!(),
        };
        token_norm(g, b, "norm", h)
    }

    /// Un-normalized image embedding `[B, embed_dim]`.
    pub fn image_forward(&self, g: &mut Graph<T>, b: &Bound, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.image_tokens(g, b, x, ctx)?;
        let h = g.mean_axis(h, 1)?;
        linear(g, b, "head", h, false)
    }

    /// Un-normalized text embedding `[B, embed_dim]` from `[B, context]` ids,
    /// read at each row's end-of-text position.
    pub fn text_forward(&self, g: &mut Graph<T>, b: &Bound, ids: &[usize], ctx: &mut Ctx) -> Result<Var> {
        let Arch::Text(t) = &self.arch else {
            return Err(Error::Contract(format!("{} is not a text tower", self.arch.name())));
        };
        if ids.is_empty() || ids.len() % t.context != 0 {
            return Err(Error::dim(
                "text_forward",
                format!("{} token ids do not form rows of context {}", ids.len(), t.context),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.vocab) {
            return Err(Error::dim("text_forward", format!("token id {bad} outside vocab {}", t.vocab)));
        }
        let n = ids.len() / t.context;
        let table = b.var("token_embed")?;
        let mut h = g.embedding(table, ids, &[n, t.context])?;
        let pos = b.var("pos_embed")?;
        h = g.add(h, pos)?;
        let rates = drop_path_schedule(ctx.drop_path, t.depth);
        let blk = TransformerBlock::new(t.width, t.heads, FfnKind::Mlp, true);
        for (i, r) in rates.iter().enumerate() {
            h = blk.forward(g, b, &format!("blocks.block{i}"), h, ctx, *r)?;
        }
        h = token_norm(g, b, "norm", h)?;
        let h = g.select_rows(h, &eot_positions(ids, t.context))?;
        linear(g, b, "head", h, false)
    }

    /// Eval-mode image embeddings as a plain tensor.
    pub fn embed_images(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.image_forward(&mut g, &b, xv, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode token grid `[B, L, D]` as a plain tensor.
    pub fn tokens_of(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.image_tokens(&mut g, &b, xv, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode text embeddings as a plain tensor.
    pub fn embed_text(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.text_forward(&mut g, &b, ids, &mut Ctx::eval())?;
        Ok(g.value(out).clone())
    }
}
