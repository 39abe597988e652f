//! Python bindings: tensors, run configs, the network, and the dataset /
//! training / evaluation / gradient-check entry points.
//!
//! Validation failures raise `ValueError`; anything else raises `RuntimeError`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lsunet::gradcheck::suite::{run_suite, Scope};
use lsunet::io::{load_checkpoint, read_tensor_file, write_tensor_file};
use lsunet::train::{config_sidecar, evaluate as evaluate_net, EpochReport, RunPaths};
use lsunet::{load_config, AwlState, Dataset, Pooling, Split, SynthOptions, Trainer};

fn py_err(e: lsunet::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

trait IntoPyResult<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for lsunet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn dims4(dims: &[usize]) -> PyResult<[usize; 4]> {
    dims.try_into().map_err(|_| PyValueError::new_err(format!("expected 4 dims (N, C, H, W), got {}", dims.len())))
}

fn parse_split(split: Option<&str>) -> PyResult<Option<Split>> {
    match split {
        None | Some("all") => Ok(None),
        Some("train") => Ok(Some(Split::Train)),
        Some("eval") => Ok(Some(Split::Eval)),
        Some(other) => Err(PyValueError::new_err(format!("unknown split {other:?}; use train, eval or all"))),
    }
}

/// Dense NCHW float32 tensor.
#[pyclass(name = "Tensor", module = "pylsunet")]
struct PyTensor(lsunet::Tensor<f32>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        lsunet::Tensor::from_vec(dims4(&dims)?, data).py().map(Self)
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> PyResult<Self> {
        Ok(Self(lsunet::Tensor::zeros(dims4(&dims)?)))
    }

    /// Reads a tensor file.
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        read_tensor_file(path).py().map(Self)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_tensor_file(path, &self.0).py()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.0.dims().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.0.dims())
    }
}

/// Run configuration; construct from a JSON object string (missing fields take defaults).
#[pyclass(name = "RunConfig", module = "pylsunet")]
struct PyRunConfig(lsunet::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        lsunet::RunConfig::from_json(json).py().map(Self)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_config(path).py().map(Self)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.0.epochs
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.0.lr
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.0.batch_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    #[getter]
    fn stage_widths(&self) -> Vec<usize> {
        self.0.stage_widths.to_vec()
    }

    #[getter]
    fn disable_awl(&self) -> bool {
        self.0.disable_awl
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.0.to_json().replace('\n', ""))
    }
}

/// The six-output segmentation network.
#[pyclass(name = "Network", module = "pylsunet")]
struct PyNetwork(lsunet::Network);

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyRunConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.0.clone()).unwrap_or_default();
        lsunet::Network::build(&cfg.network()).py().map(Self)
    }

    /// Loads a checkpoint, building the network from its `<ckpt>.json` sidecar.
    #[staticmethod]
    fn load(ckpt: &str) -> PyResult<Self> {
        let cfg = load_config(config_sidecar(ckpt)).py()?;
        let mut net = lsunet::Network::build(&cfg.network()).py()?;
        load_checkpoint(ckpt, &mut net, &mut AwlState::new(cfg.disable_awl)).py()?;
        Ok(Self(net))
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// `(params, flops)` for one forward pass at `dims`.
    fn count_params_flops(&self, dims: Vec<usize>) -> PyResult<(usize, u64)> {
        self.0.count_params_flops(dims4(&dims)?).py()
    }

    /// Eval-mode logits, finest resolution first.
    fn predict(&mut self, x: &PyTensor) -> PyResult<Vec<PyTensor>> {
        Ok(self.0.predict(&x.0).py()?.into_iter().map(PyTensor).collect())
    }
}

/// Writes a synthetic dataset; returns `(train, eval)` sample counts.
#[pyfunction]
#[pyo3(signature = (out, n = 50, size = 64, classes = 1, channels = 3, seed = 0))]
fn synth(out: &str, n: usize, size: usize, classes: usize, channels: usize, seed: u64) -> PyResult<(usize, usize)> {
    let m = lsunet::synth_generate(out, &SynthOptions { n, size, classes, channels, seed }).py()?;
    Ok((m.count(Split::Train), m.count(Split::Eval)))
}

fn report_dict<'py>(py: Python<'py>, r: &EpochReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("lr", r.lr)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("eval_miou", r.eval.miou)?;
    d.set_item("eval_dsc", r.eval.dsc)?;
    d.set_item("sigma", r.sigma.clone())?;
    Ok(d)
}

/// Trains on the dataset's train split and evaluates each epoch on its eval
/// split. With `out`, checkpoints, run.tsv and the config sidecar are written
/// next to that path. Returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (config, data, out = None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    data: &str,
    out: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let train = Dataset::load(data, Some(Split::Train)).py()?;
    let eval = Dataset::load(data, Some(Split::Eval)).py()?;
    let paths = out.map(RunPaths::for_checkpoint);
    let mut trainer = Trainer::new(&config.0).py()?;
    trainer.run(&train, &eval, paths.as_ref(), |_| {}).py()?;
    trainer.history().iter().map(|r| report_dict(py, r)).collect()
}

/// Scores a checkpoint on a split (`"train"`, `"eval"` or `"all"`); returns
/// `{"pooled": (miou, dsc), "per_image": (miou, dsc), "images": n}`.
#[pyfunction]
#[pyo3(signature = (ckpt, data, split = None))]
fn evaluate<'py>(py: Python<'py>, ckpt: &str, data: &str, split: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load_config(config_sidecar(ckpt)).py()?;
    let mut net = PyNetwork::load(ckpt)?.0;
    let data = Dataset::load(data, parse_split(split)?).py()?;
    let acc = evaluate_net(&mut net, &data, cfg.batch_size, cfg.label_mode).py()?;
    let d = PyDict::new(py);
    for (key, pooling) in [("pooled", Pooling::Dataset), ("per_image", Pooling::PerImage)] {
        let s = acc.scores(pooling).py()?;
        d.set_item(key, (s.miou, s.dsc))?;
    }
    d.set_item("images", acc.images())?;
    Ok(d)
}

/// Runs a gradient-check suite (`"op"`, `"block"` or `"network"`); returns
/// `(name, max_rel_error, passed)` per case.
#[pyfunction]
#[pyo3(signature = (scope = "op", seed = 0))]
fn gradcheck(scope: &str, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let scope = match scope {
        "op" => Scope::Op,
        "block" => Scope::Block,
        "network" => Scope::Network,
        other => return Err(PyValueError::new_err(format!("unknown scope {other:?}"))),
    };
    let results = run_suite(scope, seed, &scope.options()).py()?;
    Ok(results.into_iter().map(|r| (r.name, r.report.max_rel_error, r.report.passed())).collect())
}

#[pymodule]
fn pylsunet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
