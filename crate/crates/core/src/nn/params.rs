use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::container::{digest_tensors, Container, RawTensor};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Shape and initializer of one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Non-trainable state (e.g. batch-norm running statistics).
    pub buffer: bool,
}

impl ParamSpec {
    pub fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name,
            shape,
            init,
            buffer: false,
        }
    }

    pub fn buffer(name: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name,
            shape,
            init,
            buffer: true,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn materialize<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Ones => Tensor::ones(self.shape.clone()),
            Init::Const(v) => Tensor::full(self.shape.clone(), T::of_f64(v)),
            Init::Normal(std) => Tensor::randn(self.shape.clone(), std, rng),
            Init::FanIn(fan_in) => Tensor::randn(self.shape.clone(), 1.0 / (fan_in.max(1) as f64).sqrt(), rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    /// Frozen tensors enter the graph as constants and are skipped by the
    /// optimizer.
    pub frozen: bool,
    pub buffer: bool,
}

/// Named tensors of one model, in definition order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Initializes every spec from one seeded stream, in order.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for s in specs {
            let value = s.materialize(&mut rng);
            store.insert_param(&s.name, value, s.buffer)?;
        }
        Ok(store)
    }

    fn insert_param(&mut self, name: &str, value: Tensor<T>, buffer: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                frozen: buffer,
                buffer,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_param",
                format!("{name} is {:?}, got {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces a tensor allowing a new shape (used by positional resampling).
    pub(crate) fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        p.value = value;
        Ok(())
    }

    /// Freezes (or unfreezes) every tensor whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) && !p.buffer {
                p.frozen = frozen;
            }
        }
    }

    /// Trainable element count (buffers excluded, frozen tensors included).
    pub fn num_elements(&self) -> u64 {
        self.params.values().filter(|p| !p.buffer).map(|p| p.value.numel() as u64).sum()
    }

    /// Adds every tensor to the graph: trainable ones as tracked leaves,
    /// frozen ones and buffers as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if p.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.param(p.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Writes every tensor into `c` as `{prefix}{name}`.
    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        for (k, p) in &self.params {
            c.insert(&format!("{prefix}{k}"), &p.value);
        }
    }

    /// Overwrites every tensor from `c` entries `{prefix}{name}`; all must be
    /// present with matching shapes.
    pub fn read_from(&mut self, c: &Container, prefix: &str) -> Result<()> {
        for (k, p) in self.params.iter_mut() {
            let key = format!("{prefix}{k}");
            let t: Tensor<T> = c.get(&key)?;
            if t.shape() != p.value.shape() {
                return Err(Error::integrity(
                    key,
                    format!("stored shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }

    /// Content digest of tensors under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let raws: Vec<(&str, RawTensor)> = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, p)| (k.as_str(), RawTensor::from_tensor(&p.value)))
            .collect();
        digest_tensors(raws.iter().map(|(k, r)| (*k, r)))
    }
}

/// Parameter name to graph variable map for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
