//! Epoched trial datasets: synthetic generation and the on-disk format.
//!
//! A dataset is one subject's worth of labeled multichannel trials. On disk a
//! dataset is a directory with `manifest.json`, `epochs.f32` (IEEE-754
//! binary32, little-endian, row-major trial×channel×sample) and `labels.u32`
//! (unsigned 32-bit little-endian). Real EEG is expected to arrive already
//! epoched and bandpass-filtered; this crate does no signal preprocessing.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("unsupported format version {found} (expected 1)")]
    FormatVersion { found: u32 },
    #[error("unsupported {field} {found:?}")]
    UnsupportedFormat { field: &'static str, found: String },
    #[error("{file}: size mismatch, expected {expected} bytes, found {found}")]
    SizeMismatch { file: &'static str, expected: u64, found: u64 },
    #[error("label {label} at trial {index} out of range for {n_classes} classes")]
    LabelOutOfRange { index: usize, label: u32, n_classes: usize },
    #[error("dataset validation failed: {0}")]
    Validation(String),
    #[error("infeasible synthetic geometry: {0}")]
    InfeasibleGeometry(String),
}

/// Labeled multichannel trial tensor with class names and sampling metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochedDataset {
    pub subject: String,
    pub class_names: Vec<String>,
    /// Row-major `[n_trials × n_channels × n_samples]`.
    pub epochs: Vec<f32>,
    pub labels: Vec<u32>,
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub sampling_rate_hz: f64,
}

impl EpochedDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Flattened feature dimension seen by the extractor.
    pub fn feature_dim(&self) -> usize {
        self.n_channels * self.n_samples
    }

    /// Trial `i` flattened channel-major to an `f64` feature vector.
    pub fn trial_features(&self, i: usize) -> Vec<f64> {
        let d = self.feature_dim();
        self.epochs[i * d..(i + 1) * d].iter().map(|&v| f64::from(v)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let expect = self.n_trials * self.n_channels * self.n_samples;
        if self.epochs.len() != expect {
            return Err(DataError::Validation(format!(
                "epoch tensor has {} values, expected {}",
                self.epochs.len(),
                expect
            )));
        }
        if self.labels.len() != self.n_trials {
            return Err(DataError::Validation(format!(
                "{} labels for {} trials",
                self.labels.len(),
                self.n_trials
            )));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(DataError::Validation("sampling rate must be positive".into()));
        }
        let n_classes = self.n_classes();
        for (index, &label) in self.labels.iter().enumerate() {
            if label as usize >= n_classes {
                return Err(DataError::LabelOutOfRange { index, label, n_classes });
            }
        }
        if self.epochs.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Validation("non-finite value in epoch tensor".into()));
        }
        for (c, &count) in self.class_counts().iter().enumerate() {
            if count == 0 {
                return Err(DataError::Validation(format!(
                    "class {:?} has no trials",
                    self.class_names[c]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    GaussianClusters,
    Oscillatory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodGeometry {
    /// Last class placed at twice the pairwise spacing from the class centroid.
    Far,
    /// Last class distributed identically to class 0 (chance-level control).
    Overlapping,
}

/// Synthetic dataset shape and separability controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    /// Cluster-mean spacing in within-class std units, or oscillation
    /// amplitude contrast in noise-std units.
    pub class_separation: f64,
    pub noise_std: f64,
    pub ood_geometry: OodGeometry,
    pub sampling_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: SynthMode::GaussianClusters,
            n_classes: 4,
            trials_per_class: 100,
            n_channels: 4,
            n_samples: 8,
            class_separation: 4.0,
            noise_std: 1.0,
            ood_geometry: OodGeometry::Far,
            sampling_rate_hz: 128.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_classes < 2 {
            return Err(DataError::Validation("need at least 2 classes".into()));
        }
        if self.trials_per_class < 8 {
            return Err(DataError::Validation(
                "trials_per_class must be at least 8 for split feasibility".into(),
            ));
        }
        if self.n_channels == 0 || self.n_samples == 0 {
            return Err(DataError::Validation("channels and samples must be positive".into()));
        }
        if self.class_separation < 0.0 {
            return Err(DataError::Validation("class_separation must be nonnegative".into()));
        }
        if !(self.noise_std > 0.0) {
            return Err(DataError::Validation("noise_std must be positive".into()));
        }
        if !(self.sampling_rate_hz > 0.0) {
            return Err(DataError::Validation("sampling_rate_hz must be positive".into()));
        }
        let d = self.n_channels * self.n_samples;
        match self.mode {
            SynthMode::GaussianClusters => {
                if self.n_classes > d + 1 {
                    return Err(DataError::InfeasibleGeometry(format!(
                        "{} equidistant classes do not fit in {} feature dimensions",
                        self.n_classes, d
                    )));
                }
            }
            SynthMode::Oscillatory => {
                if self.n_channels < self.n_classes {
                    return Err(DataError::InfeasibleGeometry(format!(
                        "oscillatory mode needs n_channels >= n_classes ({} < {})",
                        self.n_channels, self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Class means on a regular simplex: columns of the (n−1)×n Helmert basis,
/// scaled so every pairwise distance equals `spacing`. Centered at the origin.
fn simplex_means(n_classes: usize, dim: usize, spacing: f64) -> Vec<Vec<f64>> {
    // Helmert row k: k+1 ones, then −(k+1), normalized. Columns are the
    // vertex coordinates; pairwise distances come out as √2 before scaling.
    let mut means = vec![vec![0.0; dim]; n_classes];
    for k in 0..n_classes.saturating_sub(1) {
        let norm = (((k + 1) * (k + 2)) as f64).sqrt();
        for (i, mean) in means.iter_mut().enumerate() {
            let h = if i <= k {
                1.0 / norm
            } else if i == k + 1 {
                -((k + 1) as f64) / norm
            } else {
                0.0
            };
            mean[k] = h * spacing / std::f64::consts::SQRT_2;
        }
    }
    means
}

/// Generate one synthetic subject with controllable class separability.
pub fn generate_synthetic(cfg: &SynthConfig, subject: &str) -> Result<EpochedDataset, DataError> {
    cfg.validate()?;
    let d = cfg.n_channels * cfg.n_samples;
    let n_trials = cfg.n_classes * cfg.trials_per_class;
    let mut rng = rng_from(cfg.seed);
    let mut epochs = Vec::with_capacity(n_trials * d);
    let mut labels = Vec::with_capacity(n_trials);

    match cfg.mode {
        SynthMode::GaussianClusters => {
            let spacing = cfg.class_separation * cfg.noise_std;
            let mut means = simplex_means(cfg.n_classes, d, spacing);
            let last = cfg.n_classes - 1;
            match cfg.ood_geometry {
                OodGeometry::Far => {
                    // Push the last class out to radius 2·spacing from the
                    // simplex centroid (the origin), keeping its direction.
                    let norm = crate::linalg::l2_norm(&means[last]);
                    if norm > 0.0 {
                        let scale = 2.0 * spacing / norm;
                        for v in &mut means[last] {
                            *v *= scale;
                        }
                    }
                }
                OodGeometry::Overlapping => {
                    means[last] = means[0].clone();
                }
            }
            for (c, mean) in means.iter().enumerate() {
                for _ in 0..cfg.trials_per_class {
                    for j in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        epochs.push((mean[j] + cfg.noise_std * z) as f32);
                    }
                    labels.push(c as u32);
                }
            }
        }
        SynthMode::Oscillatory => {
            // Class c rides frequency 8+4c Hz on the channels congruent to c
            // (mod n_classes), at amplitude separation·noise_std.
            let last = cfg.n_classes - 1;
            for c in 0..cfg.n_classes {
                let source = match cfg.ood_geometry {
                    OodGeometry::Overlapping if c == last => 0,
                    _ => c,
                };
                let freq = 8.0 + 4.0 * source as f64;
                let mut amp = cfg.class_separation * cfg.noise_std;
                if matches!(cfg.ood_geometry, OodGeometry::Far) && c == last {
                    amp *= 2.0;
                }
                for _ in 0..cfg.trials_per_class {
                    for ch in 0..cfg.n_channels {
                        let active = ch % cfg.n_classes == source;
                        for s in 0..cfg.n_samples {
                            let t = s as f64 / cfg.sampling_rate_hz;
                            let z: f64 = rng.sample(StandardNormal);
                            let mut v = cfg.noise_std * z;
                            if active {
                                v += amp * (2.0 * std::f64::consts::PI * freq * t).sin();
                            }
                            epochs.push(v as f32);
                        }
                    }
                    labels.push(c as u32);
                }
            }
        }
    }

    let ds = EpochedDataset {
        subject: subject.to_string(),
        class_names: (0..cfg.n_classes).map(|c| format!("class_{c}")).collect(),
        epochs,
        labels,
        n_trials,
        n_channels: cfg.n_channels,
        n_samples: cfg.n_samples,
        sampling_rate_hz: cfg.sampling_rate_hz,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    subject: String,
    class_names: Vec<String>,
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    sampling_rate_hz: f64,
    epochs_file: String,
    labels_file: String,
    dtype: String,
    layout: String,
}

const DTYPE: &str = "f32le";
const LAYOUT: &str = "trial,channel,sample";

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Write a dataset directory (`manifest.json`, `epochs.f32`, `labels.u32`).
pub fn save_dataset(ds: &EpochedDataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let manifest = Manifest {
        format_version: 1,
        subject: ds.subject.clone(),
        class_names: ds.class_names.clone(),
        n_trials: ds.n_trials,
        n_channels: ds.n_channels,
        n_samples: ds.n_samples,
        sampling_rate_hz: ds.sampling_rate_hz,
        epochs_file: "epochs.f32".into(),
        labels_file: "labels.u32".into(),
        dtype: DTYPE.into(),
        layout: LAYOUT.into(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::ManifestParse(e.to_string()))?;
    fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;

    let mut bytes = Vec::with_capacity(ds.epochs.len() * 4);
    for v in &ds.epochs {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let epochs_path = dir.join("epochs.f32");
    fs::write(&epochs_path, bytes).map_err(|e| io_err(&epochs_path, e))?;

    let mut bytes = Vec::with_capacity(ds.labels.len() * 4);
    for v in &ds.labels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let labels_path = dir.join("labels.u32");
    fs::write(&labels_path, bytes).map_err(|e| io_err(&labels_path, e))?;
    Ok(())
}

/// Load a dataset directory, validating shape consistency bit for bit.
pub fn load_dataset(dir: &Path) -> Result<EpochedDataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let mut raw = String::new();
    fs::File::open(&manifest_path)
        .map_err(|e| io_err(&manifest_path, e))?
        .read_to_string(&mut raw)
        .map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&raw).map_err(|e| DataError::ManifestParse(e.to_string()))?;

    if manifest.format_version != 1 {
        return Err(DataError::FormatVersion { found: manifest.format_version });
    }
    if manifest.dtype != DTYPE {
        return Err(DataError::UnsupportedFormat { field: "dtype", found: manifest.dtype });
    }
    if manifest.layout != LAYOUT {
        return Err(DataError::UnsupportedFormat { field: "layout", found: manifest.layout });
    }

    let epochs_path = dir.join(&manifest.epochs_file);
    let epoch_bytes = fs::read(&epochs_path).map_err(|e| io_err(&epochs_path, e))?;
    let expected = (manifest.n_trials * manifest.n_channels * manifest.n_samples * 4) as u64;
    if epoch_bytes.len() as u64 != expected {
        return Err(DataError::SizeMismatch {
            file: "epochs.f32",
            expected,
            found: epoch_bytes.len() as u64,
        });
    }
    let epochs: Vec<f32> = epoch_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels_path = dir.join(&manifest.labels_file);
    let label_bytes = fs::read(&labels_path).map_err(|e| io_err(&labels_path, e))?;
    let expected = (manifest.n_trials * 4) as u64;
    if label_bytes.len() as u64 != expected {
        return Err(DataError::SizeMismatch {
            file: "labels.u32",
            expected,
            found: label_bytes.len() as u64,
        });
    }
    let labels: Vec<u32> = label_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let n_classes = manifest.class_names.len();
    for (index, &label) in labels.iter().enumerate() {
        if label as usize >= n_classes {
            return Err(DataError::LabelOutOfRange { index, label, n_classes });
        }
    }

    let ds = EpochedDataset {
        subject: manifest.subject,
        class_names: manifest.class_names,
        epochs,
        labels,
        n_trials: manifest.n_trials,
        n_channels: manifest.n_channels,
        n_samples: manifest.n_samples,
        sampling_rate_hz: manifest.sampling_rate_hz,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l2_norm;

    fn small_cfg() -> SynthConfig {
        SynthConfig { trials_per_class: 10, n_channels: 2, n_samples: 4, ..Default::default() }
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg, "s0").unwrap();
        let b = generate_synthetic(&cfg, "s0").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10, 10]);
    }

    #[test]
    fn simplex_means_are_equidistant() {
        let means = simplex_means(4, 8, 3.0);
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d - 3.0).abs() < 1e-12, "pair ({i},{j}) at distance {d}");
            }
        }
    }

    #[test]
    fn far_geometry_pushes_last_class_out() {
        let means = {
            let mut m = simplex_means(4, 8, 2.0);
            let norm = l2_norm(&m[3]);
            let scale = 2.0 * 2.0 / norm;
            for v in &mut m[3] {
                *v *= scale;
            }
            m
        };
        assert!((l2_norm(&means[3]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn empirical_means_converge_to_configured_means() {
        let cfg = SynthConfig {
            trials_per_class: 500,
            n_channels: 2,
            n_samples: 4,
            class_separation: 3.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, "s0").unwrap();
        let d = ds.feature_dim();
        let means = {
            let mut m = simplex_means(4, d, 3.0);
            let norm = l2_norm(&m[3]);
            let scale = 2.0 * 3.0 / norm;
            for v in &mut m[3] {
                *v *= scale;
            }
            m
        };
        for c in 0..4 {
            let mut emp = vec![0.0; d];
            let mut n = 0.0;
            for i in 0..ds.n_trials {
                if ds.labels[i] as usize == c {
                    for (j, v) in ds.trial_features(i).iter().enumerate() {
                        emp[j] += v;
                    }
                    n += 1.0;
                }
            }
            let diff: f64 = emp
                .iter()
                .zip(&means[c])
                .map(|(e, m)| (e / n - m) * (e / n - m))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 0.2 * cfg.noise_std, "class {c} mean off by {diff}");
        }
    }

    #[test]
    fn overlapping_geometry_duplicates_class_zero_mean() {
        let cfg = SynthConfig {
            ood_geometry: OodGeometry::Overlapping,
            trials_per_class: 500,
            n_channels: 2,
            n_samples: 4,
            class_separation: 6.0,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, "s0").unwrap();
        let d = ds.feature_dim();
        let mut mean0 = vec![0.0; d];
        let mut mean3 = vec![0.0; d];
        for i in 0..ds.n_trials {
            let f = ds.trial_features(i);
            match ds.labels[i] {
                0 => axpy_test(&mut mean0, &f),
                3 => axpy_test(&mut mean3, &f),
                _ => {}
            }
        }
        let diff: f64 = mean0
            .iter()
            .zip(&mean3)
            .map(|(a, b)| ((a - b) / 500.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 0.5, "overlapping means should coincide, diff {diff}");
    }

    fn axpy_test(acc: &mut [f64], x: &[f64]) {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
    }

    #[test]
    fn infeasible_cluster_geometry_is_rejected() {
        let cfg = SynthConfig {
            n_classes: 10,
            n_channels: 1,
            n_samples: 4,
            trials_per_class: 10,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, "s0"),
            Err(DataError::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn oscillatory_mode_generates_and_validates() {
        let cfg = SynthConfig {
            mode: SynthMode::Oscillatory,
            n_channels: 4,
            n_samples: 16,
            trials_per_class: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, "s0").unwrap();
        assert_eq!(ds.n_trials, 32);
        ds.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), "s7").unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        // byte equality of the payload files under a re-save
        let again = dir.path().join("copy");
        save_dataset(&back, &again).unwrap();
        for f in ["manifest.json", "epochs.f32", "labels.u32"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn truncated_epochs_file_is_a_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), "s0").unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("epochs.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::SizeMismatch { file: "epochs.f32", .. })
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic(&small_cfg(), "s0").unwrap();
        ds.labels[0] = ds.n_classes() as u32;
        // bypass save-side validation by writing the label file directly
        ds.labels[0] = 0;
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("labels.u32");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(&(ds.n_classes() as u32).to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::LabelOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg(), "s0").unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let raw = fs::read_to_string(&path).unwrap();
        fs::write(&path, raw.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::FormatVersion { found: 2 })));
    }
}
