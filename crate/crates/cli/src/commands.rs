//! The four CLI operations: synth, run, tune, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use loco_ood::data::{generate_synthetic, load_dataset, save_dataset, EpochedDataset};
use loco_ood::harness::{run_experiment, FirstSubjectTuner, Method, RunOutcome};
use loco_ood::scorers::DuqHyperparams;

use crate::config::{DataSource, ReportFormat, RunConfig};
use crate::report::{
    build_summary, by_class_table, compare_id_classes_table, compare_react_table,
    overview_table, read_results_csv, render, write_results_csv, write_summary_json, Table,
};
use crate::CliError;

/// Materialize the configured data source.
pub fn load_datasets(source: &DataSource) -> Result<Vec<EpochedDataset>, CliError> {
    match source {
        DataSource::Synthetic(synth) => (0..synth.n_subjects)
            .map(|i| {
                generate_synthetic(&synth.subject_config(i), &synth.subject_name(i))
                    .map_err(CliError::from)
            })
            .collect(),
        DataSource::Paths(paths) => {
            paths.iter().map(|p| load_dataset(p).map_err(CliError::from)).collect()
        }
    }
}

/// Generate one dataset directory per synthetic subject.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("synth needs a [synth] section".into()))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let mut dirs = Vec::new();
    for i in 0..synth.n_subjects {
        let dataset = generate_synthetic(&synth.subject_config(i), &synth.subject_name(i))?;
        let dir = out_dir.join(synth.subject_name(i));
        save_dataset(&dataset, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub outcome: RunOutcome,
}

/// Run the experiment and write `results.csv` + `summary.json`.
pub fn cmd_run(
    cfg: &RunConfig,
    cli_data: &[PathBuf],
    out_dir: &Path,
    jobs: Option<usize>,
    seed_override: Option<u64>,
) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    let datasets = load_datasets(&cfg.data_source(cli_data)?)?;
    let mut experiment = cfg.experiment.clone();
    if let Some(seed) = seed_override {
        experiment.master_seed = seed;
    }
    let outcome = run_experiment(&experiment, &datasets, jobs)?;

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let results_csv = out_dir.join("results.csv");
    write_results_csv(&results_csv, &outcome.rows)?;
    let summary = build_summary(&outcome.rows, &outcome.failures, experiment.master_seed);
    let summary_json = out_dir.join("summary.json");
    write_summary_json(&summary_json, &summary)?;
    Ok(RunArtifacts { results_csv, summary_json, outcome })
}

#[derive(Debug, Serialize)]
struct TunedEntry {
    ood_class: String,
    id_classes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dknn_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duq: Option<DuqHyperparams>,
}

/// First-subject tuning only; writes `tuned.json` with one entry per
/// (OOD class, ID classes) combination.
pub fn cmd_tune(
    cfg: &RunConfig,
    cli_data: &[PathBuf],
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let tune_dknn = cfg.experiment.methods.contains(&Method::Dknn);
    let tune_duq = cfg.experiment.methods.contains(&Method::Duq);
    if !tune_dknn && !tune_duq {
        return Err(CliError::Config(
            "tune needs dknn or duq among the configured methods".into(),
        ));
    }
    let datasets = load_datasets(&cfg.data_source(cli_data)?)?;
    let first = datasets
        .first()
        .ok_or_else(|| CliError::Data("no datasets supplied".into()))?;
    first.validate().map_err(CliError::from)?;

    let n_classes = first.n_classes();
    let combos = loco_ood::harness::class_combinations(n_classes, cfg.experiment.id_class_mode)?;
    let mut tuned = BTreeMap::new();
    for (ood, ids) in combos {
        let tuner = FirstSubjectTuner::new(first, &ids, ood, &cfg.experiment)?;
        let entry = TunedEntry {
            ood_class: first.class_names[ood].clone(),
            id_classes: ids.iter().map(|&c| first.class_names[c].clone()).collect(),
            dknn_k: if tune_dknn { Some(tuner.tune_dknn_k(&cfg.experiment)?) } else { None },
            duq: if tune_duq { Some(tuner.tune_duq(&cfg.experiment)?) } else { None },
        };
        let key = format!(
            "ood={} ids={}",
            entry.ood_class,
            entry.id_classes.join("+")
        );
        tuned.insert(key, entry);
    }

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let path = out_dir.join("tuned.json");
    let json = serde_json::to_string_pretty(&tuned)
        .map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(&path, json + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[derive(Debug, Default, Clone)]
pub struct ReportFlags {
    pub compare_react: bool,
    pub by_class: bool,
    pub compare_id_classes: Option<PathBuf>,
}

/// Render report tables from a results file.
pub fn cmd_report(
    results_path: &Path,
    format: ReportFormat,
    flags: &ReportFlags,
) -> Result<String, CliError> {
    let rows = read_results_csv(results_path)?;
    let mut tables: Vec<Table> = vec![overview_table(&rows)];
    if flags.compare_react {
        tables.push(compare_react_table(&rows)?);
    }
    if flags.by_class {
        tables.extend(by_class_table(&rows)?);
    }
    if let Some(other_path) = &flags.compare_id_classes {
        let other = read_results_csv(other_path)?;
        tables.push(compare_id_classes_table(&rows, &other)?);
    }
    Ok(render(&tables, format))
}
