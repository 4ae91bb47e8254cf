use std::path::Path;

use indexmap::IndexMap;

use super::optim::OptimizerState;
use super::step::{ClipModel, TrainState};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{build, Arch, ModelGraph};

pub const FORMAT_VERSION: &str = "1";

fn arch_json(a: &Arch) -> Result<String> {
    serde_json::to_string(a).map_err(|e| Error::Parse(e.to_string()))
}

fn parse_arch(c: &Container, key: &str) -> Result<Arch> {
    serde_json::from_str(c.require_meta(key)?).map_err(|e| Error::integrity(format!("meta:{key}"), e.to_string()))
}

fn parse_num<N: std::str::FromStr>(c: &Container, key: &str) -> Result<N> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| Error::integrity(format!("meta:{key}"), "not a number"))
}

fn write_opt<T: Scalar>(c: &mut Container, tag: &str, st: &OptimizerState<T>) {
    c.set_meta(&format!("opt_{tag}_step"), st.step);
    for (k, t) in &st.m {
        c.insert(&format!("opt/{tag}/m/{k}"), t);
    }
    for (k, t) in &st.v {
        c.insert(&format!("opt/{tag}/v/{k}"), t);
    }
}

fn read_opt<T: Scalar>(c: &Container, tag: &str, store: &ParamStore<T>) -> Result<OptimizerState<T>> {
    let mut st = OptimizerState {
        step: parse_num(c, &format!("opt_{tag}_step"))?,
        m: IndexMap::new(),
        v: IndexMap::new(),
    };
    let (pm, pv) = (format!("opt/{tag}/m/"), format!("opt/{tag}/v/"));
    for key in c.tensors.keys() {
        let (dst, name) = if let Some(n) = key.strip_prefix(&pm) {
            (&mut st.m, n)
        } else if let Some(n) = key.strip_prefix(&pv) {
            (&mut st.v, n)
        } else {
            continue;
        };
        let t: Tensor<T> = c.get(key)?;
        match store.param(name) {
            Some(p) if p.value.shape() == t.shape() => {}
            _ => return Err(Error::integrity(key.as_str(), "moment does not match any parameter")),
        }
        dst.insert(name.to_string(), t);
    }
    Ok(st)
}

fn frozen_names<T: Scalar>(s: &ParamStore<T>) -> bool {
    s.iter().any(|(_, p)| p.frozen && !p.buffer)
}

/// Serializes towers, logit scale, optimizer moments and counters.
pub fn checkpoint_container<T: Scalar>(st: &TrainState<T>, config_digest: &str) -> Result<Container> {
    let m = &st.model;
    let mut c = Container::new();
    c.set_meta("format_version", FORMAT_VERSION);
    c.set_meta("step", st.step);
    c.set_meta("config_digest", config_digest);
    c.set_meta("dtype", T::DTYPE);
    c.set_meta("image_arch", arch_json(&m.image.arch)?);
    c.set_meta("image_input_size", m.image.input_size);
    c.set_meta("text_arch", arch_json(&m.text.arch)?);
    c.set_meta("image_digest", m.image.params.digest(""));
    c.set_meta("text_digest", m.text.params.digest(""));
    c.set_meta("image_frozen", frozen_names(&m.image.params));
    c.set_meta("text_frozen", frozen_names(&m.text.params));
    m.image.params.write_to(&mut c, "image/");
    m.text.params.write_to(&mut c, "text/");
    m.scale.write_to(&mut c, "");
    write_opt(&mut c, "image", &st.opt_image);
    write_opt(&mut c, "text", &st.opt_text);
    write_opt(&mut c, "scale", &st.opt_scale);
    Ok(c)
}

pub fn save_checkpoint<T: Scalar>(st: &TrainState<T>, config_digest: &str, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_container(st, config_digest)?.save(path)
}

/// A loaded checkpoint: training state plus the run's config digest.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub state: TrainState<T>,
    pub config_digest: String,
}

fn load_tower<T: Scalar>(c: &Container, arch_key: &str, size: usize, prefix: &str, digest_key: &str) -> Result<ModelGraph<T>> {
    let arch = parse_arch(c, arch_key)?;
    let mut g: ModelGraph<T> = build(&arch, size, 0)?;
    g.params.read_from(c, prefix)?;
    let want = c.require_meta(digest_key)?;
    if g.params.digest("") != want {
        return Err(Error::integrity(
            format!("meta:{digest_key}"),
            "tower digest does not match its stored tensors",
        ));
    }
    Ok(g)
}

pub fn checkpoint_from_container<T: Scalar>(c: &Container) -> Result<Checkpoint<T>> {
    let v = c.require_meta("format_version")?;
    if v != FORMAT_VERSION {
        return Err(Error::integrity("meta:format_version", format!("unsupported version {v}")));
    }
    let image = load_tower(c, "image_arch", parse_num(c, "image_input_size")?, "image/", "image_digest")?;
    let text_arch = parse_arch(c, "text_arch")?;
    let ctx = match &text_arch {
        Arch::Text(t) => t.context,
        _ => return Err(Error::integrity("meta:text_arch", "not a text tower")),
    };
    let text = load_tower(c, "text_arch", ctx, "text/", "text_digest")?;
    let mut model = ClipModel {
        image,
        text,
        scale: ClipModel::<T>::new_scale()?,
    };
    model.scale.read_from(c, "")?;
    if c.require_meta("image_frozen")? == "true" {
        model.image.params.set_frozen("", true);
    }
    if c.require_meta("text_frozen")? == "true" {
        model.text.params.set_frozen("", true);
    }
    let state = TrainState {
        opt_image: read_opt(c, "image", &model.image.params)?,
        opt_text: read_opt(c, "text", &model.text.params)?,
        opt_scale: read_opt(c, "scale", &model.scale)?,
        step: parse_num(c, "step")?,
        model,
    };
    Ok(Checkpoint {
        state,
        config_digest: c.require_meta("config_digest")?.to_string(),
    })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    checkpoint_from_container(&Container::load(path)?)
}

/// Fresh image tower paired with the frozen text tower of a pretrained
/// checkpoint. The logit scale starts at its initial value and trains.
pub fn ltt_init<T: Scalar>(image: ModelGraph<T>, text_ckpt: &Checkpoint<T>) -> Result<TrainState<T>> {
    let text = text_ckpt.state.model.text.clone();
    if image.embed_dim() != text.embed_dim() {
        return Err(Error::Config(format!(
            "embed_dim mismatch: image tower {} vs checkpoint text tower {}",
            image.embed_dim(),
            text.embed_dim()
        )));
    }
    let mut model = ClipModel {
        image,
        text,
        scale: ClipModel::<T>::new_scale()?,
    };
    model.text.params.set_frozen("", true);
    Ok(TrainState::new(model))
}
