//! Python bindings. Images and masks cross the boundary as row-major `bytes`
//! together with their width and height.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use tipseg::augment::{pipeline_traced, AugmentConfig, Preset, RngStream};
use tipseg::config::RunConfig;
use tipseg::imgdata::{GrayImage, LabelMask, Sample, SynthConfig};
use tipseg::lossmetrics::{confusion, metrics as micro_metrics, otsu_level_from_histogram, JACCARD_EPS};
use tipseg::model::{load_weights, save_weights, stats_table, ModelSpec};
use tipseg::tensor::Tensor;
use tipseg::trainer;

fn py_err(e: tipseg::Error) -> PyErr {
    match e {
        tipseg::Error::Missing(_) => PyFileNotFoundError::new_err(e.to_string()),
        tipseg::Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn gray(values: &[u8], width: usize, height: usize) -> PyResult<GrayImage> {
    GrayImage::new(width, height, values.to_vec()).map_err(py_err)
}

fn mask(labels: &[u8], width: usize, height: usize) -> PyResult<LabelMask> {
    LabelMask::new(width, height, labels.to_vec()).map_err(py_err)
}

fn synth_config(high_contrast: bool) -> SynthConfig {
    if high_contrast {
        SynthConfig::high_contrast()
    } else {
        SynthConfig::default()
    }
}

/// A segmentation network built from a named preset or loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: tipseg::model::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (preset = "desk", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let spec = ModelSpec::preset(preset).map_err(py_err)?;
        let inner = tipseg::model::Model::build(&spec, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_weights(&path, None).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_weights(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> u64 {
        self.inner.num_params()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.spec.input_size
    }

    #[getter]
    fn in_channels(&self) -> usize {
        self.inner.spec.backbone.in_channels
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec.num_classes
    }

    /// Raw logits for a batch of equally sized images: `(shape, values)`.
    fn forward(&self, images: Vec<Vec<u8>>, width: usize, height: usize) -> PyResult<((usize, usize, usize, usize), Vec<f32>)> {
        let imgs = images
            .iter()
            .map(|v| gray(v, width, height))
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        let x = trainer::to_input(&refs, self.inner.spec.backbone.in_channels).map_err(py_err)?;
        let y = self.inner.forward(&x).map_err(py_err)?;
        let [n, c, h, w] = y.shape();
        Ok(((n, c, h, w), y.data().to_vec()))
    }

    /// Label mask at the image's own resolution.
    fn predict<'py>(&self, py: Python<'py>, image: &[u8], width: usize, height: usize) -> PyResult<Bound<'py, PyBytes>> {
        let img = gray(image, width, height)?;
        let m = trainer::predict(&self.inner, &img).map_err(py_err)?;
        Ok(PyBytes::new(py, m.labels()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_size={}, in_channels={}, params={})",
            self.inner.spec.input_size,
            self.inner.spec.backbone.in_channels,
            self.inner.num_params()
        )
    }
}

/// One rendered synthetic hand: `(image, mask, width, height)`.
#[pyfunction]
#[pyo3(signature = (index, high_contrast = false))]
fn synth_sample<'py>(py: Python<'py>, index: u64, high_contrast: bool) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>, usize, usize)> {
    let s = tipseg::imgdata::synth_sample(&synth_config(high_contrast), index).map_err(py_err)?;
    Ok((
        PyBytes::new(py, s.image.values()),
        PyBytes::new(py, s.mask.labels()),
        s.width(),
        s.height(),
    ))
}

/// Writes a synthetic dataset directory and returns the split sizes.
#[pyfunction]
#[pyo3(signature = (out, n_train, n_val, n_test, high_contrast = false))]
fn gen_data(out: PathBuf, n_train: usize, n_val: usize, n_test: usize, high_contrast: bool) -> PyResult<(usize, usize, usize)> {
    let split = tipseg::imgdata::synth_dataset(&synth_config(high_contrast), n_train, n_val, n_test, &out)
        .map_err(py_err)?;
    Ok((split.train.len(), split.val.len(), split.test.len()))
}

/// Paired augmentation: `(image, mask, width, height, applied_ops)`.
#[pyfunction]
#[pyo3(signature = (image, labels, width, height, preset = "full", seed = 0, stream = 0))]
#[allow(clippy::too_many_arguments)]
fn augment<'py>(
    py: Python<'py>,
    image: &[u8],
    labels: &[u8],
    width: usize,
    height: usize,
    preset: &str,
    seed: u64,
    stream: u64,
) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyBytes>, usize, usize, Vec<String>)> {
    let preset: Preset = preset.parse().map_err(py_err)?;
    let sample = Sample::new("py", gray(image, width, height)?, mask(labels, width, height)?).map_err(py_err)?;
    let cfg = AugmentConfig::from_preset(preset);
    let (out, trace) = pipeline_traced(&sample, &cfg, &mut RngStream::new(seed, stream));
    let applied = trace.applied.iter().map(|op| format!("{op:?}").to_lowercase()).collect();
    Ok((
        PyBytes::new(py, out.image.values()),
        PyBytes::new(py, out.mask.labels()),
        out.width(),
        out.height(),
        applied,
    ))
}

/// Micro-averaged metrics of one predicted mask against the truth.
#[pyfunction]
#[pyo3(signature = (pred, truth, width, height, classes = 9))]
fn metrics<'py>(py: Python<'py>, pred: &[u8], truth: &[u8], width: usize, height: usize, classes: usize) -> PyResult<Bound<'py, PyDict>> {
    let totals = confusion(&mask(pred, width, height)?, &mask(truth, width, height)?, classes).map_err(py_err)?;
    let r = micro_metrics(&totals);
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f1", r.f1)?;
    d.set_item("f2", r.f2)?;
    d.set_item("miou", r.miou)?;
    d.set_item("per_class_iou", r.per_class_iou)?;
    Ok(d)
}

/// Soft Jaccard loss of class probabilities `(N, C, H, W)` against label masks.
#[pyfunction]
fn soft_jaccard_loss(probs: Vec<f32>, shape: (usize, usize, usize, usize), masks: Vec<Vec<u8>>) -> PyResult<f64> {
    let (n, c, h, w) = shape;
    let probs = Tensor::from_vec([n, c, h, w], probs).map_err(py_err)?;
    let targets = masks
        .iter()
        .map(|m| LabelMask::with_classes(w, h, m.clone(), c).map_err(py_err))
        .collect::<PyResult<Vec<_>>>()?;
    tipseg::lossmetrics::soft_jaccard_loss(&probs, &targets, JACCARD_EPS).map_err(py_err)
}

/// Otsu level of a 256-bin histogram.
#[pyfunction]
fn otsu_level(histogram: Vec<u64>) -> PyResult<u8> {
    let hist: [u64; 256] = histogram
        .try_into()
        .map_err(|_| PyValueError::new_err("histogram must have 256 bins"))?;
    otsu_level_from_histogram(&hist).map_err(py_err)
}

/// Parameter and MAC counts per model part, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (models = None))]
fn model_stats<'py>(py: Python<'py>, models: Option<Vec<String>>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let names = models.unwrap_or_else(|| {
        ["resnext101_32x48d", "resnet34", "resnet50", "resnet101"]
            .map(String::from)
            .to_vec()
    });
    let specs = names
        .into_iter()
        .map(|n| ModelSpec::preset(&n).map(|s| (n, s)).map_err(py_err))
        .collect::<PyResult<Vec<_>>>()?;
    stats_table(&specs)
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("model", &r.model)?;
            d.set_item("part", r.part.as_str())?;
            d.set_item("params", r.params)?;
            d.set_item("macs", r.macs)?;
            d.set_item("flops_batch8", r.flops_batch8)?;
            Ok(d)
        })
        .collect()
}

/// Trains from a TOML run configuration and returns a summary dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    let outcome = tipseg::run::train_run(&cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("run_dir", outcome.run_dir.display().to_string())?;
    d.set_item(
        "train_loss",
        outcome.history.records.iter().map(|r| r.train_loss).collect::<Vec<_>>(),
    )?;
    d.set_item("test_miou", outcome.test.as_ref().map(|t| t.report.miou))?;
    Ok(d)
}

#[pymodule]
fn tipseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(soft_jaccard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(otsu_level, m)?)?;
    m.add_function(wrap_pyfunction!(model_stats, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("NUM_CLASSES", tipseg::NUM_CLASSES)?;
    Ok(())
}
