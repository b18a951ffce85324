//! Python bindings: artifacts, losses, detection and patch evaluation.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ldp_core::artifact::Artifact;
use ldp_core::autoencoder::AEParams;
use ldp_core::detector::{generate_synthetic_dataset, DetectorParams, GridConfig, PersonDetector};
use ldp_core::evaluation::{self, EvalConfig};
use ldp_core::patch::{self, PatchLatentParams, PrintColorSet, TransformConfig};
use ldp_core::{BBox, ImageTensor, LatentTensor, LdpError, RandomSource, ScoredBox};

fn err(e: LdpError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// RGB image in `[0, 1]`, stored row-major as `[y][x][c]`.
#[pyclass(name = "Image", module = "ldp", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: ImageTensor,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: ImageTensor::new(height, width, data).map_err(err)? })
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self { inner: ImageTensor::filled(height, width, rgb) }
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        self.inner.save_png(path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

#[pyclass(name = "Detector", module = "ldp")]
pub struct PyDetector {
    inner: DetectorParams,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let art = Artifact::load(path).map_err(err)?;
        Ok(Self { inner: DetectorParams::from_artifact(&art).map_err(err)? })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.input_size()
    }

    /// Person boxes `(cx, cy, w, h, score)` above `thresh`, after suppression.
    #[pyo3(signature = (image, thresh = 0.5))]
    fn person_boxes(&self, image: &PyImage, thresh: f64) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
        let boxes = self.inner.person_boxes(&image.inner, thresh).map_err(err)?;
        Ok(boxes.iter().map(|s| (s.bbox.cx, s.bbox.cy, s.bbox.w, s.bbox.h, s.score)).collect())
    }

    fn max_person_confidence(&self, image: &PyImage) -> PyResult<f64> {
        self.inner.max_person_confidence(&image.inner).map_err(err)
    }

    /// Mean over the batch of the per-image maximum person confidence.
    fn detection_loss(&self, images: Vec<PyImage>) -> PyResult<f64> {
        let batch: Vec<ImageTensor> = images.into_iter().map(|i| i.inner).collect();
        ldp_core::detector::detection_loss(&self.inner, &batch).map_err(err)
    }
}

#[pyclass(name = "Autoencoder", module = "ldp")]
pub struct PyAutoencoder {
    inner: AEParams,
}

#[pymethods]
impl PyAutoencoder {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let art = Artifact::load(path).map_err(err)?;
        Ok(Self { inner: AEParams::from_artifact(&art).map_err(err)? })
    }

    /// Latent shape as `(height, width, depth)`.
    #[getter]
    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.latent_shape();
        (s.height, s.width, s.depth)
    }

    /// Flat latent in `[y][x][d]` order.
    fn encode(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        Ok(self.inner.encode(&image.inner).map_err(err)?.data().to_vec())
    }

    fn decode(&self, latent: Vec<f64>) -> PyResult<PyImage> {
        let (h, w, d) = self.latent_shape();
        let z = LatentTensor::new(h, w, d, latent).map_err(err)?;
        Ok(PyImage { inner: self.inner.decode(&z).map_err(err)? })
    }

    fn reconstruction_mse(&self, images: Vec<PyImage>) -> PyResult<f64> {
        let xs: Vec<ImageTensor> = images.into_iter().map(|i| i.inner).collect();
        self.inner.reconstruction_mse(&xs).map_err(err)
    }
}

/// Kind of the artifact stored at `path`.
#[pyfunction]
fn artifact_kind(path: &str) -> PyResult<String> {
    Ok(Artifact::load(path).map_err(err)?.kind)
}

#[pyfunction]
fn load_patch(path: &str) -> PyResult<PyImage> {
    let art = Artifact::load(path).map_err(err)?;
    Ok(PyImage { inner: patch::patch_from_artifact(&art).map_err(err)? })
}

#[pyfunction]
fn tv_loss(image: &PyImage) -> PyResult<f64> {
    patch::tv_loss(&image.inner).map_err(err)
}

/// Non-printability against `palette`, or the built-in palette when omitted.
#[pyfunction]
#[pyo3(signature = (image, palette = None))]
fn nps_loss(image: &PyImage, palette: Option<Vec<[f64; 3]>>) -> PyResult<f64> {
    let set = match palette {
        Some(c) => PrintColorSet::new(c).map_err(err)?,
        None => PrintColorSet::default_palette(),
    };
    patch::nps_loss(&image.inner, &set).map_err(err)
}

/// KL divergence of a diagonal Gaussian from the standard normal.
#[pyfunction]
fn kl_loss(mu: Vec<f64>, log_sigma: Vec<f64>) -> PyResult<f64> {
    let n = mu.len();
    let p = PatchLatentParams::new(
        LatentTensor::new(1, 1, n, mu).map_err(err)?,
        LatentTensor::new(1, 1, n, log_sigma).map_err(err)?,
    )
    .map_err(err)?;
    Ok(patch::kl_loss(&p))
}

/// Average precision from per-image ground-truth boxes `(cx, cy, w, h)` and
/// predictions `(cx, cy, w, h, score)`.
#[pyfunction]
#[pyo3(signature = (ground_truth, predictions, iou = 0.5))]
fn compute_ap(
    ground_truth: Vec<Vec<(f64, f64, f64, f64)>>,
    predictions: Vec<Vec<(f64, f64, f64, f64, f64)>>,
    iou: f64,
) -> PyResult<f64> {
    let gt: Vec<Vec<BBox>> = ground_truth
        .into_iter()
        .map(|v| v.into_iter().map(|(cx, cy, w, h)| BBox { cx, cy, w, h }).collect())
        .collect();
    let preds: Vec<Vec<ScoredBox>> = predictions
        .into_iter()
        .map(|v| v.into_iter().map(|(cx, cy, w, h, score)| ScoredBox { bbox: BBox { cx, cy, w, h }, score }).collect())
        .collect();
    evaluation::compute_ap(&gt, &preds, iou).map_err(err)
}

/// Synthetic scenes as `(image, [(class, cx, cy, w, h), ...])` pairs.
#[pyfunction]
#[pyo3(signature = (n, seed, image_size = 64))]
fn synthetic_scenes(n: usize, seed: u64, image_size: usize) -> PyResult<Vec<(PyImage, Vec<(usize, f64, f64, f64, f64)>)>> {
    let cfg = GridConfig { image_size, ..GridConfig::default() };
    cfg.validate().map_err(err)?;
    let scenes = generate_synthetic_dataset(n, &cfg, &RandomSource::new(seed)).map_err(err)?;
    Ok(scenes
        .into_iter()
        .map(|s| {
            let objs = s.objects.iter().map(|o| (o.class, o.bbox.cx, o.bbox.cy, o.bbox.w, o.bbox.h)).collect();
            (PyImage { inner: s.image }, objs)
        })
        .collect())
}

/// Clean versus patched mAP, ASR and mean confidences with default placement
/// and thresholds.
#[pyfunction]
#[pyo3(signature = (detector, patch, images, seed = 0))]
fn evaluate_patch<'py>(
    py: Python<'py>,
    detector: &PyDetector,
    patch: &PyImage,
    images: Vec<PyImage>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let xs: Vec<ImageTensor> = images.into_iter().map(|i| i.inner).collect();
    let report = evaluation::evaluate_patch(
        "python",
        "python",
        &detector.inner,
        &xs,
        &patch.inner,
        &TransformConfig::default(),
        &EvalConfig::default(),
        &RandomSource::new(seed),
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("clean_map", report.clean_map)?;
    d.set_item("patched_map", report.patched_map)?;
    d.set_item("asr", report.asr)?;
    d.set_item("mean_clean_conf", report.mean_clean_conf())?;
    d.set_item("mean_patched_conf", report.mean_patched_conf())?;
    d.set_item("images", report.clean_max_conf.len())?;
    Ok(d)
}

#[pymodule]
fn ldp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyAutoencoder>()?;
    m.add_function(wrap_pyfunction!(artifact_kind, m)?)?;
    m.add_function(wrap_pyfunction!(load_patch, m)?)?;
    m.add_function(wrap_pyfunction!(tv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nps_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ap, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_patch, m)?)?;
    Ok(())
}
