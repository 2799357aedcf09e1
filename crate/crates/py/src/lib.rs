//! Python bindings for the body/boundary fusion segmentation core.
//!
//! Masks cross the boundary as nested lists of 0/1 rows; images as flat
//! channel-major lists of length `3 * height * width`.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dbfnet::metrics::{self, ThresholdSweep};
use dbfnet::network::{DbfNet, ModelConfig};
use dbfnet::{BinaryMask, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn mask_from_rows(rows: Vec<Vec<u8>>) -> PyResult<BinaryMask> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows must all have the same length"));
    }
    let pixels = rows.into_iter().flatten().map(|v| u8::from(v != 0)).collect();
    BinaryMask::new(h, w, pixels).map_err(to_py)
}

fn mask_to_rows(m: &BinaryMask) -> Vec<Vec<u8>> {
    m.pixels().chunks(m.width().max(1)).map(<[u8]>::to_vec).collect()
}

/// Splits a mask into `(body, boundary)` masks; boundary pixels lie within
/// `alpha` (Euclidean) of the background.
#[pyfunction]
#[pyo3(signature = (mask, alpha = 1.0))]
fn split_labels(mask: Vec<Vec<u8>>, alpha: f64) -> PyResult<(Vec<Vec<u8>>, Vec<Vec<u8>>)> {
    let labels = dbfnet::labelgen::split_labels(&mask_from_rows(mask)?, alpha).map_err(to_py)?;
    Ok((mask_to_rows(&labels.body), mask_to_rows(&labels.bound)))
}

#[pyfunction]
fn dsc(pred: Vec<Vec<u8>>, target: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::dsc(&mask_from_rows(pred)?, &mask_from_rows(target)?).map_err(to_py)
}

/// Symmetric Hausdorff distance between mask boundaries, in pixels unless
/// `spacing = (dy, dx)` is given.
#[pyfunction]
#[pyo3(signature = (pred, target, spacing = None))]
fn hausdorff(pred: Vec<Vec<u8>>, target: Vec<Vec<u8>>, spacing: Option<(f64, f64)>) -> PyResult<f64> {
    metrics::hausdorff(&mask_from_rows(pred)?, &mask_from_rows(target)?, spacing).map_err(to_py)
}

/// Pooled-pixel `(map, auc)` of probability maps against masks.
#[pyfunction]
#[pyo3(signature = (probs, targets, thresholds = 200))]
fn map_auc(probs: Vec<Vec<f64>>, targets: Vec<Vec<Vec<u8>>>, thresholds: usize) -> PyResult<(f64, f64)> {
    let targets = targets.into_iter().map(mask_from_rows).collect::<PyResult<Vec<_>>>()?;
    let c = metrics::pr_roc(&probs, &targets, &ThresholdSweep::Uniform(thresholds)).map_err(to_py)?;
    Ok((c.map, c.auc))
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, lr0 = 0.001, power = 0.9))]
fn lr_schedule(step: usize, total_steps: usize, lr0: f64, power: f64) -> PyResult<f64> {
    dbfnet::train::lr_schedule(step, total_steps, lr0, power).map_err(to_py)
}

fn model_config(width_divisor: usize, ffs_count: usize, use_ffm: bool) -> ModelConfig {
    let mut cfg = ModelConfig::default().slimmed(width_divisor);
    cfg.ffs.count = ffs_count;
    cfg.ffs.use_ffm = use_ffm;
    cfg
}

#[pyfunction]
#[pyo3(signature = (width_divisor = 1, ffs_count = 2, use_ffm = true))]
fn count_parameters(width_divisor: usize, ffs_count: usize, use_ffm: bool) -> PyResult<usize> {
    dbfnet::network::count_parameters(&model_config(width_divisor, ffs_count, use_ffm)).map_err(to_py)
}

/// Writes `n` synthetic image/mask pairs under `out_dir`; returns their ids.
#[pyfunction]
#[pyo3(signature = (out_dir, n = 8, height = 128, width = 128, seed = 0))]
fn synth_generate(out_dir: PathBuf, n: usize, height: usize, width: usize, seed: u64) -> PyResult<Vec<String>> {
    Ok(dbfnet::data::synth_generate(&out_dir, n, [height, width], seed).map_err(to_py)?.ids)
}

/// Trains from a TOML config file and returns the per-step losses.
#[pyfunction]
fn train(py: Python<'_>, config_path: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = dbfnet::train::TrainConfig::from_toml_file(&config_path).map_err(to_py)?;
    let outcome = py.detach(|| dbfnet::train::train(&cfg)).map_err(to_py)?;
    Ok(outcome.run_log.losses())
}

#[pyclass(unsendable)]
struct Model {
    net: DbfNet,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (width_divisor = 1, ffs_count = 2, use_ffm = true, seed = 0))]
    fn new(width_divisor: usize, ffs_count: usize, use_ffm: bool, seed: u64) -> PyResult<Self> {
        let net = DbfNet::new(&model_config(width_divisor, ffs_count, use_ffm), DType::F32, seed).map_err(to_py)?;
        Ok(Self { net })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ckpt = dbfnet::train::Checkpoint::load(&checkpoint).map_err(to_py)?;
        let net = ckpt.build_model(DType::F32).map_err(to_py)?;
        Ok(Self { net })
    }

    fn num_parameters(&self) -> usize {
        self.net.num_parameters()
    }

    fn lambdas(&self) -> PyResult<Vec<f64>> {
        self.net.lambda_values().map_err(to_py)
    }

    /// Eval-mode foreground probabilities for one image, flattened row-major.
    fn predict(&self, image: Vec<f32>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        if image.len() != 3 * height * width {
            return Err(PyValueError::new_err(format!(
                "image has {} values, expected 3*{height}*{width}",
                image.len()
            )));
        }
        let x = Tensor::from_vec(image, (1, 3, height, width), &Device::Cpu).map_err(tensor_err)?;
        let out = self.net.forward(&x, false).map_err(to_py)?;
        let probs = dbfnet::losses::sigmoid(&out.final_logits).map_err(to_py)?;
        probs.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(tensor_err)
    }

    /// Shapes `(final, [(level, h, w), ...])` of a forward pass at the given size.
    fn output_shapes(&self, height: usize, width: usize) -> PyResult<(Vec<usize>, Vec<(usize, usize, usize)>)> {
        let x = Tensor::zeros((1, 3, height, width), DType::F32, &Device::Cpu).map_err(tensor_err)?;
        let out = self.net.forward(&x, false).map_err(to_py)?;
        let sup = out
            .supervision
            .iter()
            .filter_map(|s| s.body_logits.as_ref().or(s.bound_logits.as_ref()).map(|t| (s.level, t.dims())))
            .map(|(l, d)| (l, d[2], d[3]))
            .collect();
        Ok((out.final_logits.dims().to_vec(), sup))
    }
}

#[pymodule]
fn dbfnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(split_labels, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(map_auc, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(count_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
