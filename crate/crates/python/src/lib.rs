//! Python bindings: the quantizers, the cost model and exported-model inference.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use syq_core::training::generate_synthetic;
use syq_core::{ActQuantConfig, LayerShape, QuantMode, QuantizedModel, ScalingMethod, SyqError, Tensor4};

fn to_py(e: SyqError) -> PyErr {
    match e {
        SyqError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<QuantMode> {
    match mode {
        "binary" => Ok(QuantMode::Binary),
        "ternary" => Ok(QuantMode::Ternary),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'binary' or 'ternary', got {other:?}"
        ))),
    }
}

/// Returns `(codes, eta)` for a flat weight list.
#[pyfunction]
fn quantize_weights(weights: Vec<f64>, mode: &str) -> PyResult<(Vec<i8>, f64)> {
    let eta = syq_core::compute_threshold(&weights, parse_mode(mode)?).map_err(to_py)?;
    let mq = syq_core::quantize_weights(&weights, eta).map_err(to_py)?;
    Ok((mq.q, eta))
}

#[pyfunction]
#[pyo3(signature = (x, bits, frac_bits=None))]
fn quantize_activation(x: Vec<f64>, bits: u8, frac_bits: Option<u8>) -> PyResult<Vec<f64>> {
    let cfg = ActQuantConfig::new(bits, frac_bits.unwrap_or(bits)).map_err(to_py)?;
    Ok(syq_core::quantize_activation(&x, &cfg))
}

/// `(scalars, ops)` for one convolution layer.
#[pyfunction]
fn complexity_report(k: usize, i: usize, n: usize, f: usize, method: &str) -> PyResult<(u64, u64)> {
    let shape = LayerShape::conv(k, i, n, f).map_err(to_py)?;
    let method: ScalingMethod = method.parse().map_err(to_py)?;
    let r = syq_core::complexity_report(&shape, method).map_err(to_py)?;
    Ok((r.scalars, r.ops))
}

/// A model exported by `syq train` or `syq export`.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: QuantizedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: QuantizedModel::load(path.as_ref()).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: QuantizedModel::from_bytes(data).map_err(to_py)?,
        })
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        self.inner.to_bytes().map_err(to_py)
    }

    #[getter]
    fn input_dims(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.inner.input_dims();
        (c, h, w)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    /// Class index per image; `pixels` holds `count` images back to back, values in `[0, 1]`.
    fn predict(&self, pixels: Vec<f64>, count: usize) -> PyResult<Vec<usize>> {
        let [c, h, w] = self.inner.input_dims();
        let batch = Tensor4::new([count, c, h, w], pixels).map_err(to_py)?;
        self.inner.predict(&batch).map_err(to_py)
    }

    fn predict_logits(&self, pixels: Vec<f64>, count: usize) -> PyResult<Vec<Vec<f64>>> {
        let [c, h, w] = self.inner.input_dims();
        let batch = Tensor4::new([count, c, h, w], pixels).map_err(to_py)?;
        let logits = self.inner.predict_logits(&batch).map_err(to_py)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).to_vec()).collect())
    }
}

/// `(pixels, labels)` of the seeded 16×16 blob task.
#[pyfunction]
fn synthetic(seed: u64, classes: usize, count: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let d = generate_synthetic(seed, classes, count).map_err(to_py)?;
    Ok((d.images.into_vec(), d.labels))
}

#[pymodule]
fn syq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_activation, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_report, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
