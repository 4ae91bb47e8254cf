//! Python bindings: `import vitamin`.
//!
//! Tensors cross the boundary as `vitamin.Tensor` (float64, row-major).
//! Errors map to `ValueError`, `ArithmeticError` (numeric) or `OSError`.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitamin_core::autograd::grad_check;
use vitamin_core::eval::evaluate_task;
use vitamin_core::train::{
    clip_loss_value, l2_normalize as normalize_rows, load_checkpoint, save_checkpoint, task_for, train_step,
    Split, SynthTask, TrainConfig, TrainState,
};
use vitamin_core::zoo::{self, Arch, ModelGraph};
use vitamin_core::{Error, Graph, Tensor as CoreTensor, Var};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for vitamin_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense float64 tensor.
#[pyclass(name = "Tensor", module = "vitamin", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: CoreTensor<f64>,
}

impl From<CoreTensor<f64>> for PyTensor {
    fn from(inner: CoreTensor<f64>) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(CoreTensor::new(shape, data).py()?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        CoreTensor::zeros(shape).into()
    }

    /// Gaussian entries from a seeded ChaCha8 stream.
    #[staticmethod]
    #[pyo3(signature = (shape, std=1.0, seed=0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        CoreTensor::randn(shape, std, &mut rng(seed)).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.clone().reshape(shape).py()?.into())
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Runs `f` on constants in a fresh graph and returns the value.
fn eval_op(inputs: &[&PyTensor], f: impl FnOnce(&mut Graph<f64>, &[Var]) -> vitamin_core::Result<Var>) -> PyResult<PyTensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.inner.clone())).collect();
    let out = f(&mut g, &vars).py()?;
    Ok(g.value(out).clone().into())
}

#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    eval_op(&[a, b], |g, v| g.matmul(v[0], v[1]))
}

#[pyfunction]
fn gelu(x: &PyTensor) -> PyResult<PyTensor> {
    eval_op(&[x], |g, v| Ok(g.gelu(v[0])))
}

/// Softmax over the last axis.
#[pyfunction]
fn softmax(x: &PyTensor) -> PyResult<PyTensor> {
    eval_op(&[x], |g, v| g.softmax(v[0]))
}

#[pyfunction]
#[pyo3(signature = (x, gamma, beta, eps=1e-6))]
fn layer_norm(x: &PyTensor, gamma: &PyTensor, beta: &PyTensor, eps: f64) -> PyResult<PyTensor> {
    eval_op(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], eps))
}

/// NCHW input, OIHW kernel.
#[pyfunction]
#[pyo3(signature = (x, w, bias=None, stride=1, padding=0, groups=1))]
fn conv2d(
    x: &PyTensor,
    w: &PyTensor,
    bias: Option<&PyTensor>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> PyResult<PyTensor> {
    let mut ins = vec![x, w];
    ins.extend(bias);
    eval_op(&ins, |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding, groups))
}

#[pyfunction]
fn l2_normalize(x: &PyTensor) -> PyResult<PyTensor> {
    Ok(normalize_rows(&x.inner).py()?.into())
}

/// Symmetric contrastive loss of two row-normalized embedding sets.
#[pyfunction]
fn clip_loss(x: &PyTensor, y: &PyTensor, scale: f64) -> PyResult<f64> {
    clip_loss_value(&x.inner, &y.inner, scale).py()
}

/// Gradient of `sum(w * matmul(a, b))` for a seeded random `w`, as
/// `(value, grad_a, grad_b)`.
#[pyfunction]
fn matmul_grad(a: &PyTensor, b: &PyTensor, seed: u64) -> PyResult<(PyTensor, PyTensor, PyTensor)> {
    let mut g = Graph::new();
    let (va, vb) = (g.param(a.inner.clone()), g.param(b.inner.clone()));
    let y = g.matmul(va, vb).py()?;
    let w = g.constant(CoreTensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed)));
    let prod = g.mul(y, w).py()?;
    let loss = g.sum(prod);
    g.backward(loss).py()?;
    let value = g.value(y).clone();
    let ga = g.take_grad(va).expect("a is tracked");
    let gb = g.take_grad(vb).expect("b is tracked");
    Ok((value.into(), ga.into(), gb.into()))
}

/// Worst relative error of analytic vs central-difference gradients for a
/// named op on seeded random inputs.
#[pyfunction]
#[pyo3(signature = (op, shapes, seed=0, eps=1e-6))]
fn gradcheck(op: &str, shapes: Vec<Vec<usize>>, seed: u64, eps: f64) -> PyResult<f64> {
    let mut rng = rng(seed);
    let inputs: Vec<CoreTensor<f64>> = shapes.into_iter().map(|s| CoreTensor::randn(s, 1.0, &mut rng)).collect();
    let op = op.to_string();
    let report = grad_check(
        |g, v| match op.as_str() {
            "matmul" => g.matmul(v[0], v[1]),
            "gelu" => Ok(g.gelu(v[0])),
            "softmax" => g.softmax(v[0]),
            "layer_norm" => g.layer_norm(v[0], v[1], v[2], 1e-6),
            "l2_normalize" => g.l2_normalize(v[0]),
            other => Err(Error::Config(format!("no gradcheck for op {other:?}"))),
        },
        &inputs,
        eps,
        1e-8,
        seed,
    )
    .py()?;
    Ok(report.max_rel_err())
}

/// Per-module parameter and MAC counts as a dict.
#[pyfunction]
#[pyo3(signature = (variant, input_size=None))]
fn analyze<'py>(py: Python<'py>, variant: &str, input_size: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let arch = Arch::named(variant).py()?;
    let input = input_size.unwrap_or_else(|| zoo::default_input(&arch));
    let r = zoo::analyze(&arch, input).py()?;
    let d = PyDict::new(py);
    d.set_item("model", &r.model)?;
    d.set_item("input_size", r.input_size)?;
    d.set_item("total_params", r.total_params)?;
    d.set_item("total_macs", r.total_macs)?;
    let modules: Vec<(String, u64, u64)> = r.modules.iter().map(|m| (m.module.clone(), m.params, m.macs)).collect();
    d.set_item("modules", modules)?;
    Ok(d)
}

/// An image or text tower built from a registry name.
#[pyclass(name = "Tower", module = "vitamin", unsendable)]
pub struct PyTower {
    model: ModelGraph<f64>,
}

#[pymethods]
impl PyTower {
    #[new]
    #[pyo3(signature = (variant, input_size=None, seed=0))]
    fn new(variant: &str, input_size: Option<usize>, seed: u64) -> PyResult<Self> {
        let arch = Arch::named(variant).py()?;
        let input = input_size.unwrap_or_else(|| zoo::default_input(&arch));
        Ok(PyTower {
            model: zoo::build(&arch, input, seed).py()?,
        })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.model.embed_dim()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.model.input_size
    }

    fn param_count(&self) -> usize {
        self.model.params.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// `[B, 3, S, S]` images to `[B, embed_dim]` embeddings.
    fn embed_images(&self, images: &PyTensor) -> PyResult<PyTensor> {
        Ok(self.model.embed_images(&images.inner).py()?.into())
    }

    /// Final-normed tokens `[B, N, D]` before pooling.
    fn tokens(&self, images: &PyTensor) -> PyResult<PyTensor> {
        Ok(self.model.tokens_of(&images.inner).py()?.into())
    }

    /// Flat `[B * context]` token ids to `[B, embed_dim]` embeddings.
    fn embed_text(&self, ids: Vec<usize>) -> PyResult<PyTensor> {
        Ok(self.model.embed_text(&ids).py()?.into())
    }
}

/// Step-by-step training on the synthetic task, driven from a TOML config.
#[pyclass(name = "Trainer", module = "vitamin", unsendable)]
pub struct PyTrainer {
    cfg: TrainConfig,
    task: SynthTask,
    state: TrainState<f64>,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config_toml: &str) -> PyResult<Self> {
        let cfg = TrainConfig::from_toml(config_toml).py()?;
        let task = task_for(&cfg).py()?;
        let state = vitamin_core::train::initial_state(&cfg).py()?;
        Ok(PyTrainer { cfg, task, state })
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.cfg.total_steps()
    }

    #[getter]
    fn logit_scale(&self) -> f64 {
        self.state.model.logit_scale()
    }

    /// One optimizer step on the next training batch.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let bs = self.cfg.batch_size;
        let batch = self.task.batch::<f64>(Split::Train, self.state.step * bs as u64, bs).py()?;
        let s = train_step(&mut self.state, &batch, &self.cfg).py()?;
        let d = PyDict::new(py);
        d.set_item("step", s.step)?;
        d.set_item("lr", s.lr)?;
        d.set_item("loss", s.loss)?;
        d.set_item("grad_norm", s.grad_norm)?;
        Ok(d)
    }

    /// Eval loss, zero-shot accuracy and R@1 on the synthetic task.
    fn evaluate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = evaluate_task(&self.state.model, &self.task, &self.cfg.eval, self.cfg.batch_size).py()?;
        let d = PyDict::new(py);
        d.set_item("eval_loss", m.eval_loss)?;
        d.set_item("zero_shot_acc", m.zero_shot_acc)?;
        d.set_item("r_at_1", m.r_at_1)?;
        Ok(d)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.state, &self.cfg.digest().py()?, path).py()
    }

    /// Restores a checkpoint written under the same config.
    fn load(&mut self, path: &str) -> PyResult<()> {
        let ck = load_checkpoint::<f64>(path).py()?;
        if ck.config_digest != self.cfg.digest().py()? {
            return Err(PyValueError::new_err(format!("{path} was written by a different config")));
        }
        self.state = ck.state;
        Ok(())
    }
}

#[pymodule]
fn vitamin(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTower>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(matmul_grad, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    Ok(())
}
