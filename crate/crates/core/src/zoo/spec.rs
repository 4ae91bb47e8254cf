use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FfnKind;

/// Nearest multiple of 32, ties rounding down.
pub fn round_channels(x: f64) -> Result<usize> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Contract(format!("round_channels needs a positive value, got {x}")));
    }
    let q = x / 32.0;
    let lo = q.floor();
    let r = if q - lo > 0.5 { lo + 1.0 } else { lo };
    Ok((r as usize) * 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvBlockKind {
    MbconvLn,
    MbconvBn,
    MbconvBnSe,
    Convnext,
}

fn default_strides() -> [usize; 4] {
    [2, 2, 2, 2]
}
fn default_expansion() -> usize {
    4
}
fn default_patchify_kernel() -> usize {
    3
}
fn default_conv_block() -> ConvBlockKind {
    ConvBlockKind::MbconvLn
}
fn default_token_block() -> FfnKind {
    FfnKind::GeGlu
}

/// Hybrid tower description: conv stem, two convolutional stages, a
/// transformer stage, pooled head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub stem_channels: usize,
    pub stage_depths: [usize; 3],
    pub stage_channels: [usize; 3],
    pub heads: usize,
    pub embed_dim: usize,
    /// Stem, stage 1, stage 2 and patchify strides.
    #[serde(default = "default_strides")]
    pub strides: [usize; 4],
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_patchify_kernel")]
    pub patchify_kernel: usize,
    #[serde(default = "default_conv_block")]
    pub conv_block: ConvBlockKind,
    #[serde(default = "default_token_block")]
    pub token_block: FfnKind,
}

impl VariantSpec {
    /// Family member from its stage-3 width: channels (C, 2C, 6C) with
    /// C = round_channels(width / 6).
    pub fn family(name: &str, width: usize, depth: usize, heads: usize, embed_dim: usize) -> Result<Self> {
        let c = round_channels(width as f64 / 6.0)?;
        Ok(VariantSpec {
            name: name.to_string(),
            stem_channels: c,
            stage_depths: [2, 4, depth],
            stage_channels: [c, 2 * c, width],
            heads,
            embed_dim,
            strides: default_strides(),
            expansion: default_expansion(),
            patchify_kernel: default_patchify_kernel(),
            conv_block: default_conv_block(),
            token_block: default_token_block(),
        })
    }

    /// `vitamin-s|b|l|xl` (the `vitamin-` prefix and case are optional).
    pub fn named(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let key = key.strip_prefix("vitamin-").unwrap_or(&key);
        match key {
            "s" => Self::family("vitamin-s", 384, 14, 6, 384),
            "b" => Self::family("vitamin-b", 768, 14, 12, 512),
            "l" => Self::family("vitamin-l", 1024, 31, 16, 768),
            "xl" => Self::family("vitamin-xl", 1152, 32, 18, 1152),
            _ => Err(Error::Config(format!("unknown ViTamin variant {name:?} (expected s, b, l or xl)"))),
        }
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn width(&self) -> usize {
        self.stage_channels[2]
    }

    /// True when the channels follow (C, 2C, W) with C = round32(W/6).
    pub fn follows_scaling_rule(&self) -> bool {
        let [c1, c2, c3] = self.stage_channels;
        round_channels(c3 as f64 / 6.0).ok() == Some(c1) && c2 == 2 * c1 && self.stem_channels == c1
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides != [2, 2, 2, 2] {
            return Err(Error::Config(format!(
                "{}: only strides [2, 2, 2, 2] (output stride 16) are supported, got {:?}",
                self.name, self.strides
            )));
        }
        let dims = [self.stem_channels, self.embed_dim, self.expansion]
            .into_iter()
            .chain(self.stage_channels)
            .chain(self.stage_depths[..2].iter().copied());
        if dims.into_iter().any(|d| d == 0) {
            return Err(Error::Config(format!(
                "{}: widths and conv-stage depths must be positive",
                self.name
            )));
        }
        if self.heads == 0 || self.width() % self.heads != 0 {
            return Err(Error::Config(format!(
                "{}: width {} is not divisible by {} heads",
                self.name,
                self.width(),
                self.heads
            )));
        }
        if self.patchify_kernel != 2 && self.patchify_kernel != 3 {
            return Err(Error::Config(format!("{}: patchify kernel must be 2 or 3", self.name)));
        }
        Ok(())
    }
}

/// Plain patch-embedding transformer tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    pub name: String,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl VitSpec {
    /// `vit-b/16`, `vit-l/14` and friends.
    pub fn named(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let (size, patch) = key
            .strip_prefix("vit-")
            .and_then(|r| r.split_once('/'))
            .ok_or_else(|| Error::Config(format!("unknown ViT variant {name:?}")))?;
        let patch: usize = patch
            .parse()
            .map_err(|_| Error::Config(format!("bad patch size in {name:?}")))?;
        let (width, depth, heads, embed_dim) = match size {
            "s" => (384, 12, 6, 384),
            "b" => (768, 12, 12, 512),
            "l" => (1024, 24, 16, 768),
            _ => return Err(Error::Config(format!("unknown ViT variant {name:?}"))),
        };
        Ok(VitSpec {
            name: key.clone(),
            patch,
            width,
            depth,
            heads,
            embed_dim,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!("{}: sizes must be positive", self.name)));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{}: width {} is not divisible by {} heads",
                self.name, self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Causal transformer over token ids; features taken at the end-of-text
/// position (the highest id in each row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextSpec {
    pub vocab: usize,
    pub context: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl TextSpec {
    /// Standard 49408-token, 77-position tower.
    pub fn standard(width: usize, depth: usize, embed_dim: usize) -> Self {
        TextSpec {
            vocab: 49408,
            context: 77,
            width,
            depth,
            heads: (width / 64).max(1),
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.context == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("text tower sizes must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Any tower the zoo can build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    Vitamin(VariantSpec),
    Vit(VitSpec),
    Text(TextSpec),
}

impl Arch {
    pub fn name(&self) -> String {
        match self {
            Arch::Vitamin(v) => v.name.clone(),
            Arch::Vit(v) => v.name.clone(),
            Arch::Text(t) => format!("text-{}x{}", t.depth, t.width),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Arch::Vitamin(v) => v.embed_dim,
            Arch::Vit(v) => v.embed_dim,
            Arch::Text(t) => t.embed_dim,
        }
    }

    pub fn is_image(&self) -> bool {
        !matches!(self, Arch::Text(_))
    }

    /// Input spatial granularity: 16 for hybrids, the patch size for ViTs.
    pub fn input_multiple(&self) -> usize {
        match self {
            Arch::Vitamin(v) => v.output_stride(),
            Arch::Vit(v) => v.patch,
            Arch::Text(_) => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::Vitamin(v) => v.validate(),
            Arch::Vit(v) => v.validate(),
            Arch::Text(t) => t.validate(),
        }
    }

    /// Resolves `vitamin-*`, `vit-*/*` and `text-<depth>x<width>` names.
    pub fn named(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        if key.starts_with("vit-") {
            return VitSpec::named(&key).map(Arch::Vit);
        }
        if let Some(rest) = key.strip_prefix("text-") {
            let (d, w) = rest
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("unknown text tower {name:?} (use text-<depth>x<width>)")))?;
            let depth = d.parse().map_err(|_| Error::Config(format!("bad depth in {name:?}")))?;
            let width: usize = w.parse().map_err(|_| Error::Config(format!("bad width in {name:?}")))?;
            return Ok(Arch::Text(TextSpec::standard(width, depth, width)));
        }
        VariantSpec::named(&key).map(Arch::Vitamin)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let a: Arch = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        a.validate()?;
        Ok(a)
    }
}
