//! Python bindings over the core engine: model building/inference, the
//! gradient-check suite, verification metrics, and synthetic data.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use seid_core::error::SeidError;
use seid_core::metrics;
use seid_core::model::{build_model, ArchitectureConfig, Model};
use seid_core::suite;
use seid_core::tensor::Tensor;
use seid_core::train;

fn py_err(e: SeidError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A built network with eval-mode inference.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

fn batch_tensor(images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Tensor> {
    Tensor::from_dims(&[n, c, h, w], images).map_err(py_err)
}

#[pymethods]
impl PyModel {
    /// Rows of (name, filter, output_size, param_count).
    fn describe(&self) -> Vec<(String, String, String, usize)> {
        self.inner
            .describe()
            .into_iter()
            .map(|r| (r.name, r.filter, r.output, r.param_count))
            .collect()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn feature_width(&self) -> usize {
        self.inner.cfg.feature_width()
    }

    fn num_classes(&self) -> usize {
        self.inner.cfg.num_classes
    }

    fn config_text(&self) -> String {
        self.inner.cfg.to_text()
    }

    /// Softmax probabilities, flattened row-major (n x num_classes).
    fn classify(&self, images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Vec<f64>> {
        let batch = batch_tensor(images, n, c, h, w)?;
        Ok(self.inner.classify_forward(&batch).map_err(py_err)?.data)
    }

    /// Penultimate features, flattened row-major (n x feature_width).
    fn extract(&self, images: Vec<f64>, n: usize, c: usize, h: usize, w: usize) -> PyResult<Vec<f64>> {
        let batch = batch_tensor(images, n, c, h, w)?;
        Ok(self.inner.extract_features(&batch).map_err(py_err)?.data)
    }
}

/// Build a model from config text (key=value lines).
#[pyfunction]
fn build(config_text: &str) -> PyResult<PyModel> {
    let cfg = ArchitectureConfig::parse(config_text).map_err(py_err)?;
    Ok(PyModel {
        inner: build_model(&cfg).map_err(py_err)?,
    })
}

/// The scaled-down preset used by the acceptance experiments.
#[pyfunction]
fn desk_model(seed: u64) -> PyResult<PyModel> {
    let cfg = ArchitectureConfig::desk_preset(seed);
    Ok(PyModel {
        inner: build_model(&cfg).map_err(py_err)?,
    })
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_similarity(&a, &b).map_err(py_err)
}

/// Returns (tar, threshold, achieved_far, small_sample).
#[pyfunction]
fn tar_at_far(
    genuine: Vec<f64>,
    impostor: Vec<f64>,
    far_target: f64,
) -> PyResult<(f64, f64, f64, bool)> {
    let r = metrics::tar_at_far(&metrics::ScoreSet { genuine, impostor }, far_target)
        .map_err(py_err)?;
    Ok((r.tar, r.threshold, r.achieved_far, r.small_sample))
}

/// Returns (accuracy, mean_threshold).
#[pyfunction]
fn verification_accuracy(
    genuine: Vec<f64>,
    impostor: Vec<f64>,
    folds: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let r = metrics::verification_accuracy(&metrics::ScoreSet { genuine, impostor }, folds, seed)
        .map_err(py_err)?;
    Ok((r.accuracy, r.mean_threshold))
}

/// (far, tar) points.
#[pyfunction]
fn roc_curve(genuine: Vec<f64>, impostor: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    metrics::roc_curve(&metrics::ScoreSet { genuine, impostor }).map_err(py_err)
}

#[pyfunction]
fn roc_auc(points: Vec<(f64, f64)>) -> f64 {
    metrics::roc_auc(&points)
}

/// Run one named gradient check; returns (max_rel_error, pass).
#[pyfunction]
fn grad_check(component: &str, step: f64, tolerance: f64) -> PyResult<(f64, bool)> {
    let reports = suite::run_suite(Some(component), step, tolerance).map_err(py_err)?;
    let r = &reports[0].report;
    Ok((r.max_rel_error, r.pass))
}

#[pyfunction]
fn grad_check_components() -> Vec<&'static str> {
    suite::component_names()
}

/// Returns (flat images n*c*size*size, labels, channels).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn synthetic_faces(
    num_classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    degrade: bool,
    seed: u64,
) -> (Vec<f64>, Vec<usize>, usize) {
    let ds = train::generate_synthetic_faces(num_classes, per_class, size, noise, degrade, seed);
    let channels = ds.images.shape.dims()[1];
    (ds.images.data, ds.labels, channels)
}

#[pymodule]
fn seid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(build, m)?)?;
    m.add_function(wrap_pyfunction!(desk_model, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(tar_at_far, m)?)?;
    m.add_function(wrap_pyfunction!(verification_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_components, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_faces, m)?)?;
    Ok(())
}
