//! Python bindings for the LOCO-OOD benchmark engine.
//!
//! The extension module `loco_ood_py` exposes the dataset format, the
//! extractor, the individual statistics and the full benchmark run. Build
//! with `cargo build -p loco-ood-python --release`; `python/smoke_test.py`
//! locates the resulting cdylib and exercises it.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use loco_ood::data::{self, EpochedDataset, OodGeometry, SynthConfig, SynthMode};
use loco_ood::metrics;
use loco_ood::nnkit::{self, ExtractorConfig, ExtractorModel, ForwardMode, TrainSchedule};
use loco_ood::scorers;
use loco_ood::seed::rng_from;
use loco_ood_cli::{cmd_run, load_config};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Labeled multichannel trial tensor with class names and sampling metadata.
#[pyclass]
#[derive(Clone)]
struct Dataset {
    inner: EpochedDataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn subject(&self) -> String {
        self.inner.subject.clone()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    #[getter]
    fn n_trials(&self) -> usize {
        self.inner.n_trials
    }

    #[getter]
    fn n_channels(&self) -> usize {
        self.inner.n_channels
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples
    }

    #[getter]
    fn sampling_rate_hz(&self) -> f64 {
        self.inner.sampling_rate_hz
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    /// Trial `i` flattened channel-major, as float64 features.
    fn trial(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.n_trials {
            return Err(PyValueError::new_err(format!("trial {i} out of range")));
        }
        Ok(self.inner.trial_features(i))
    }

    /// Write the dataset directory (manifest.json, epochs.f32, labels.u32).
    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, Path::new(path)).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Dataset> {
        Ok(Dataset { inner: data::load_dataset(Path::new(path)).map_err(value_err)? })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(subject={:?}, trials={}, channels={}, samples={}, classes={})",
            self.inner.subject,
            self.inner.n_trials,
            self.inner.n_channels,
            self.inner.n_samples,
            self.inner.class_names.len()
        )
    }
}

/// Generate one synthetic subject with controllable class separability.
#[pyfunction]
#[pyo3(signature = (subject, mode = "gaussian_clusters", n_classes = 4,
    trials_per_class = 100, n_channels = 4, n_samples = 8,
    class_separation = 4.0, noise_std = 1.0, ood_geometry = "far",
    sampling_rate_hz = 128.0, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth_dataset(
    subject: &str,
    mode: &str,
    n_classes: usize,
    trials_per_class: usize,
    n_channels: usize,
    n_samples: usize,
    class_separation: f64,
    noise_std: f64,
    ood_geometry: &str,
    sampling_rate_hz: f64,
    seed: u64,
) -> PyResult<Dataset> {
    let mode = match mode {
        "gaussian_clusters" => SynthMode::GaussianClusters,
        "oscillatory" => SynthMode::Oscillatory,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let ood_geometry = match ood_geometry {
        "far" => OodGeometry::Far,
        "overlapping" => OodGeometry::Overlapping,
        other => return Err(PyValueError::new_err(format!("unknown geometry {other:?}"))),
    };
    let cfg = SynthConfig {
        mode,
        n_classes,
        trials_per_class,
        n_channels,
        n_samples,
        class_separation,
        noise_std,
        ood_geometry,
        sampling_rate_hz,
        seed,
    };
    Ok(Dataset { inner: data::generate_synthetic(&cfg, subject).map_err(value_err)? })
}

/// Trained feed-forward extractor with dropout and a spectral-normalized
/// penultimate layer.
#[pyclass]
struct Extractor {
    model: ExtractorModel,
}

#[pymethods]
impl Extractor {
    /// Deterministic forward pass: (logits, embedding).
    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let out = self.model.forward(&x, ForwardMode::Deterministic).map_err(value_err)?;
        Ok((out.logits, out.embedding))
    }

    /// Stochastic forward pass with dropout active, seeded for replay.
    fn forward_stochastic(&self, x: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let mut rng = rng_from(seed);
        let out = self.model.forward(&x, ForwardMode::Stochastic(&mut rng)).map_err(value_err)?;
        Ok((out.logits, out.embedding))
    }

    #[getter]
    fn epochs_trained(&self) -> usize {
        self.model.training_log.len()
    }

    #[getter]
    fn best_val_loss(&self) -> f64 {
        self.model.training_log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }
}

/// Train an extractor on labeled feature vectors.
#[pyfunction]
#[pyo3(signature = (train_x, train_y, val_x, val_y, n_classes,
    hidden_dim = 64, embed_dim = 32, dropout_p = 0.25, seed = 0,
    max_epochs = 200))]
#[allow(clippy::too_many_arguments)]
fn train_extractor(
    train_x: Vec<Vec<f64>>,
    train_y: Vec<usize>,
    val_x: Vec<Vec<f64>>,
    val_y: Vec<usize>,
    n_classes: usize,
    hidden_dim: usize,
    embed_dim: usize,
    dropout_p: f64,
    seed: u64,
    max_epochs: usize,
) -> PyResult<Extractor> {
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(PyValueError::new_err("features and labels must have equal lengths"));
    }
    let input_dim = train_x.first().map(|x| x.len()).unwrap_or(0);
    let cfg = ExtractorConfig {
        input_dim,
        hidden_dim,
        embed_dim,
        n_classes,
        dropout_p,
        seed,
        schedule: TrainSchedule { max_epochs, ..Default::default() },
    };
    let train: Vec<(Vec<f64>, usize)> = train_x.into_iter().zip(train_y).collect();
    let val: Vec<(Vec<f64>, usize)> = val_x.into_iter().zip(val_y).collect();
    let model = nnkit::train_extractor(&train, &val, &cfg).map_err(value_err)?;
    Ok(Extractor { model })
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    nnkit::softmax(&logits).map_err(value_err)
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    nnkit::entropy(&p).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (logits, temperature = 1.0))]
fn energy_score(logits: Vec<f64>, temperature: f64) -> PyResult<f64> {
    scorers::score_energy(&logits, temperature).map_err(value_err)
}

/// AUROC with OOD as the positive class (ties count one half).
#[pyfunction]
fn auroc(scores: Vec<f64>, is_ood: Vec<bool>) -> PyResult<f64> {
    if scores.len() != is_ood.len() {
        return Err(PyValueError::new_err("scores and flags must have equal lengths"));
    }
    let samples: Vec<metrics::ScoredSample> = scores
        .into_iter()
        .zip(is_ood)
        .map(|(score, is_ood)| metrics::ScoredSample { score, is_ood })
        .collect();
    metrics::auroc(&samples).map_err(value_err)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = metrics::spearman(&x, &y).map_err(value_err)?;
    Ok((t.statistic, t.p_value))
}

#[pyfunction]
fn wilcoxon_signed_rank(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = metrics::wilcoxon_signed_rank(&a, &b).map_err(value_err)?;
    Ok((t.statistic, t.p_value))
}

#[pyfunction]
fn kruskal_wallis(groups: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let t = metrics::kruskal_wallis(&groups).map_err(value_err)?;
    Ok((t.statistic, t.p_value))
}

#[pyfunction]
fn mann_whitney_u(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let t = metrics::mann_whitney_u(&a, &b).map_err(value_err)?;
    Ok((t.statistic, t.p_value))
}

#[pyfunction]
fn holm_correction(p_values: Vec<f64>) -> PyResult<Vec<f64>> {
    metrics::holm_correction(&p_values).map_err(value_err)
}

/// Run the full benchmark from a TOML config file; returns the paths of
/// results.csv and summary.json.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, data_dirs = Vec::new(), jobs = None, seed = None))]
fn run_benchmark(
    config_path: &str,
    out_dir: &str,
    data_dirs: Vec<String>,
    jobs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(String, String)> {
    let cfg = load_config(Path::new(config_path)).map_err(value_err)?;
    let data: Vec<PathBuf> = data_dirs.into_iter().map(PathBuf::from).collect();
    let artifacts = cmd_run(&cfg, &data, Path::new(out_dir), jobs, seed)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((
        artifacts.results_csv.display().to_string(),
        artifacts.summary_json.display().to_string(),
    ))
}

#[pymodule]
fn loco_ood_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Extractor>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_extractor, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(energy_score, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(kruskal_wallis, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney_u, m)?)?;
    m.add_function(wrap_pyfunction!(holm_correction, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
