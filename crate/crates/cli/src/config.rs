//! Run configuration: a flat TOML file with `[experiment]`, an optional data
//! source (`[synth]` or `[data]`) and `[output]`. Unknown keys are hard
//! errors so typos cannot silently change a scientific run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use loco_ood::data::{OodGeometry, SynthConfig, SynthMode};
use loco_ood::harness::ExperimentConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

/// Synthetic data source: `n_subjects` datasets generated with consecutive
/// seeds starting at `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_subjects: usize,
    pub mode: SynthMode,
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub ood_geometry: OodGeometry,
    pub sampling_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SynthConfig::default();
        SynthSection {
            n_subjects: 4,
            mode: base.mode,
            n_classes: base.n_classes,
            trials_per_class: base.trials_per_class,
            n_channels: base.n_channels,
            n_samples: base.n_samples,
            class_separation: base.class_separation,
            noise_std: base.noise_std,
            ood_geometry: base.ood_geometry,
            sampling_rate_hz: base.sampling_rate_hz,
            seed: base.seed,
        }
    }
}

impl SynthSection {
    pub fn subject_config(&self, subject_index: usize) -> SynthConfig {
        SynthConfig {
            mode: self.mode,
            n_classes: self.n_classes,
            trials_per_class: self.trials_per_class,
            n_channels: self.n_channels,
            n_samples: self.n_samples,
            class_separation: self.class_separation,
            noise_std: self.noise_std,
            ood_geometry: self.ood_geometry,
            sampling_rate_hz: self.sampling_rate_hz,
            seed: self.seed + subject_index as u64,
        }
    }

    pub fn subject_name(&self, subject_index: usize) -> String {
        format!("s{subject_index:02}")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub format: Option<ReportFormat>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub synth: Option<SynthSection>,
    pub data: Option<DataSection>,
    pub output: OutputSection,
}

/// Where trial data comes from: generated in memory or loaded from disk.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SynthSection),
    Paths(Vec<PathBuf>),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment.validate().map_err(CliError::from)?;
        if self.synth.is_some() && self.data.as_ref().is_some_and(|d| !d.paths.is_empty()) {
            return Err(CliError::Config(
                "configure exactly one data source: [synth] or [data], not both".into(),
            ));
        }
        if let Some(synth) = &self.synth {
            if synth.n_subjects == 0 {
                return Err(CliError::Config("synth.n_subjects must be at least 1".into()));
            }
            synth.subject_config(0).validate().map_err(CliError::from)?;
        }
        Ok(())
    }

    /// Resolve the data source; explicit `--data` paths win over the config.
    pub fn data_source(&self, cli_paths: &[PathBuf]) -> Result<DataSource, CliError> {
        if !cli_paths.is_empty() {
            return Ok(DataSource::Paths(cli_paths.to_vec()));
        }
        if let Some(d) = &self.data {
            if !d.paths.is_empty() {
                return Ok(DataSource::Paths(d.paths.clone()));
            }
        }
        if let Some(s) = &self.synth {
            return Ok(DataSource::Synthetic(s.clone()));
        }
        Err(CliError::Config(
            "no data source: add a [synth] or [data] section, or pass --data".into(),
        ))
    }

    pub fn output_dir(&self, cli_out: Option<&Path>) -> Result<PathBuf, CliError> {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set output.dir".into()))
    }

    pub fn report_format(&self, cli_format: Option<ReportFormat>) -> ReportFormat {
        cli_format.or(self.output.format).unwrap_or(ReportFormat::Md)
    }
}

/// Parse and validate a TOML run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = toml::from_str(&raw)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
