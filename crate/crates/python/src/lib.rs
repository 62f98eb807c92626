//! Python bindings for affectfuse.
//!
//! Structured results (reports, configs, attributions) cross the boundary as
//! plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use affectfuse::attrib::{region_attribution, ImportanceMethod};
use affectfuse::data::{self, Dataset as CoreDataset, MultimodalSample, Split, SyntheticConfig, DISTRIBUTION_TOL};
use affectfuse::eval::{self, EvalReport};
use affectfuse::losses::{self, EmotionDistribution, KlDirection};
use affectfuse::models::{load_checkpoint, save_checkpoint};
use affectfuse::optim::ScheduleConfig;
use affectfuse::train::{self, RunConfig};
use affectfuse::{Error, ErrorKind, Family, Model as CoreModel, Tape, Tensor};

create_exception!(
    affectfuse_py,
    InvariantError,
    PyValueError,
    "A data or model invariant did not hold."
);

fn py_err(e: Error) -> PyErr {
    match (&e, e.kind()) {
        (Error::Io(_), _) => PyIOError::new_err(e.to_string()),
        (_, ErrorKind::Invariant) => InvariantError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `base` with the keys of `patch` laid over it, nested objects merged.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let mut value = serde_json::to_value(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(p) = patch {
        merge(&mut value, from_py(p.as_any())?);
    }
    serde_json::from_value(value).map_err(|e| PyValueError::new_err(format!("configuration error: {e}")))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn sample_dict<'py>(py: Python<'py>, s: &MultimodalSample) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::json!({
        "sample_id": s.sample_id,
        "caption": s.caption,
        "caption_token_ids": s.caption_token_ids,
        "label": s.label,
        "distribution": s.distribution.as_slice(),
        "split": s.split,
        "region_dim": s.region_dim,
        "region_boxes": s.region_boxes,
        "region_scores": s.region_scores,
        "flags": s.flags,
    });
    to_py(py, &value)
}

/// A loaded or generated multimodal dataset.
#[pyclass(frozen, module = "affectfuse_py")]
struct Dataset {
    inner: CoreDataset,
}

impl Dataset {
    fn get(&self, sample_id: &str) -> PyResult<&MultimodalSample> {
        self.inner
            .find(sample_id)
            .ok_or_else(|| PyKeyError::new_err(format!("no sample `{sample_id}`")))
    }

    fn samples(&self, split: Option<&str>) -> PyResult<Vec<&MultimodalSample>> {
        match split {
            None => Ok(self.inner.samples.iter().collect()),
            Some(s) => Ok(self.inner.split(parse::<Split>(s)?)),
        }
    }
}

#[pymethods]
impl Dataset {
    /// Load a manifest; the blob path defaults to the one named in its header.
    #[staticmethod]
    #[pyo3(signature = (manifest, blob=None))]
    fn load(manifest: PathBuf, blob: Option<PathBuf>) -> PyResult<Self> {
        let inner = match blob {
            Some(b) => data::load_dataset(&manifest, &b),
            None => data::load_dataset_auto(&manifest),
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Generate the synthetic task. `config` overrides generator settings.
    #[staticmethod]
    #[pyo3(signature = (seed=0, num_samples=2000, config=None))]
    fn synthetic(seed: u64, num_samples: usize, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg: SyntheticConfig = overlay(&SyntheticConfig::default(), config)?;
        cfg.num_samples = num_samples;
        let inner = data::generate_synthetic(seed, &cfg).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, manifest: PathBuf, blob: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &manifest, &blob).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        let s = self.inner.split_sizes();
        format!("Dataset(train={}, val={}, test={})", s.train, s.val, s.test)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.header)
    }

    fn split_sizes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.split_sizes())
    }

    #[pyo3(signature = (split=None))]
    fn sample_ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        Ok(self.samples(split)?.iter().map(|s| s.sample_id.clone()).collect())
    }

    fn sample<'py>(&self, py: Python<'py>, sample_id: &str) -> PyResult<Bound<'py, PyAny>> {
        sample_dict(py, self.get(sample_id)?)
    }

    /// Region features of a sample as a list of rows.
    fn region_features(&self, sample_id: &str) -> PyResult<Vec<Vec<f64>>> {
        let s = self.get(sample_id)?;
        Ok(s.region_features
            .chunks(s.region_dim.max(1))
            .map(<[f64]>::to_vec)
            .collect())
    }
}

/// A classifier of one model family.
#[pyclass(frozen, module = "affectfuse_py")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Freshly initialised model. `config` overrides the default settings of
    /// the family.
    #[new]
    #[pyo3(signature = (family="early_fusion_avg", seed=0, config=None))]
    fn new(family: &str, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let base = RunConfig::desk(parse::<Family>(family)?).model;
        let cfg = overlay(&base, config)?;
        Ok(Self {
            inner: CoreModel::new(cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::from_checkpoint_bytes(data).map_err(py_err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_checkpoint_bytes().map_err(py_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(family={:?}, parameters={})",
            self.inner.family().as_str(),
            self.inner.params().num_scalars()
        )
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family().as_str()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// `(w1, w2)` for late-fusion models, `None` otherwise.
    #[getter]
    fn fusion_weights(&self) -> Option<(f64, f64)> {
        self.inner.fusion_weights()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    fn predict_proba(&self, dataset: &Dataset, sample_id: &str) -> PyResult<Vec<f64>> {
        self.inner.predict_proba(dataset.get(sample_id)?).map_err(py_err)
    }

    #[pyo3(signature = (dataset, split="test"))]
    fn predict(&self, py: Python<'_>, dataset: &Dataset, split: Option<&str>) -> PyResult<Vec<usize>> {
        let samples = dataset.samples(split)?;
        py.detach(|| eval::predict_all(&self.inner, &samples)).map_err(py_err)
    }

    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, split: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let samples = dataset.samples(split)?;
        let report = py
            .detach(|| eval::evaluate(&self.inner, &samples, dataset.inner.class_names()))
            .map_err(py_err)?;
        to_py(py, &report)
    }

    /// Region importance for `class_index` (default: the predicted class).
    #[pyo3(signature = (dataset, sample_id, class_index=None, method="gradient_norm"))]
    fn attribute<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        sample_id: &str,
        class_index: Option<usize>,
        method: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let sample = dataset.get(sample_id)?;
        let method: ImportanceMethod = parse(method)?;
        let class = match class_index {
            Some(c) => c,
            None => self.inner.predict(sample).map_err(py_err)?,
        };
        let report = region_attribution(&self.inner, sample, class, method).map_err(py_err)?;
        to_py(py, &report)
    }
}

/// The default run configuration for a family, as a dict.
#[pyfunction]
#[pyo3(signature = (family="early_fusion_avg"))]
fn default_run_config<'py>(py: Python<'py>, family: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &RunConfig::desk(parse::<Family>(family)?))
}

/// Train on the dataset's train split. Returns the model and the metrics log.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, family="early_fusion_avg"))]
fn train_model<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<&Bound<'py, PyDict>>,
    family: &str,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = overlay(&RunConfig::desk(parse::<Family>(family)?), config)?;
    cfg.validate().map_err(py_err)?;
    cfg.check_compatible(&dataset.inner).map_err(py_err)?;
    let outcome = py.detach(|| train::train(&dataset.inner, &cfg)).map_err(py_err)?;
    let records = to_py(py, &outcome.records)?;
    Ok((Model { inner: outcome.model }, records))
}

/// Learning rate after linear warm-up and linear decay.
#[pyfunction]
fn lr_at(step: u64, peak_lr: f64, warmup_steps: u64, total_steps: u64) -> PyResult<f64> {
    let s = ScheduleConfig {
        peak_lr,
        warmup_steps,
        total_steps,
    };
    s.validate().map_err(py_err)?;
    Ok(s.lr_at(step))
}

#[pyfunction]
fn smoothed_target(true_class: usize, eps: f64, num_classes: usize) -> PyResult<Vec<f64>> {
    losses::smoothed_target(true_class, eps, num_classes).map_err(py_err)
}

fn value_and_grad(
    logits: Vec<f64>,
    f: impl for<'t> FnOnce(affectfuse::Var<'t>) -> affectfuse::Result<affectfuse::Var<'t>>,
) -> PyResult<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let n = logits.len();
    let x = tape.input(&Tensor::new([n], logits).map_err(py_err)?);
    let loss = f(x).map_err(py_err)?;
    let grads = tape.gradients(loss).map_err(py_err)?;
    let g = grads.wrt(x).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    Ok((loss.item(), g))
}

/// Label-smoothed cross-entropy and its gradient with respect to the logits.
#[pyfunction]
fn label_smoothed_ce(logits: Vec<f64>, true_class: usize, eps: f64) -> PyResult<(f64, Vec<f64>)> {
    let n = logits.len();
    value_and_grad(logits, |x| losses::label_smoothed_ce(x, true_class, eps, n))
}

/// KL divergence to an annotator distribution and its logit gradient.
#[pyfunction]
#[pyo3(signature = (logits, target, direction="target_to_prediction"))]
fn kl_to_annotator(logits: Vec<f64>, target: Vec<f64>, direction: &str) -> PyResult<(f64, Vec<f64>)> {
    let direction: KlDirection = serde_json::from_value(Value::String(direction.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown KL direction `{direction}`")))?;
    let target = EmotionDistribution::new(target, DISTRIBUTION_TOL).map_err(py_err)?;
    value_and_grad(logits, |x| losses::kl_to_annotator(x, &target, direction))
}

/// Accuracy, per-class scores, macro-F1 and confusion matrix.
#[pyfunction]
fn classification_report<'py>(
    py: Python<'py>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    class_names: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = EvalReport::from_predictions(&truth, &predicted, &class_names).map_err(py_err)?;
    to_py(py, &report)
}

#[pymodule]
fn affectfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("InvariantError", m.py().get_type::<InvariantError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(default_run_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_target, m)?)?;
    m.add_function(wrap_pyfunction!(label_smoothed_ce, m)?)?;
    m.add_function(wrap_pyfunction!(kl_to_annotator, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    Ok(())
}
