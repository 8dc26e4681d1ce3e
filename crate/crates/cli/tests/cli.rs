//! Command-level tests: determinism of artifacts, report fixtures, error
//! paths and exit codes.

use std::fs;
use std::path::Path;

use loco_ood::harness::{ExperimentConfig, ExtractorSettings, Method};
use loco_ood::nnkit::TrainSchedule;
use loco_ood::scorers::ScorerConfig;
use loco_ood_cli::config::{RunConfig, SynthSection};
use loco_ood_cli::{cmd_report, cmd_run, cmd_synth, cmd_tune, CliError, ReportFlags, ReportFormat};

fn small_config(methods: Vec<Method>, react: bool) -> RunConfig {
    RunConfig {
        experiment: ExperimentConfig {
            methods,
            react,
            extractor: ExtractorSettings {
                hidden_dim: 10,
                embed_dim: 5,
                dropout_p: 0.2,
                schedule: TrainSchedule { max_epochs: 12, ..Default::default() },
            },
            scorer: ScorerConfig { mc_passes: 5, ensemble_size: 2, ..Default::default() },
            duq_trials: 1,
            master_seed: 7,
            ..Default::default()
        },
        synth: Some(SynthSection {
            n_subjects: 2,
            trials_per_class: 16,
            n_channels: 2,
            n_samples: 2,
            class_separation: 6.0,
            seed: 11,
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                entries.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn synth_reruns_are_byte_identical() {
    let cfg = small_config(vec![Method::Softmax], false);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let dirs_a = cmd_synth(&cfg, a.path()).unwrap();
    let dirs_b = cmd_synth(&cfg, b.path()).unwrap();
    assert_eq!(dirs_a.len(), 2);
    assert_eq!(dirs_b.len(), 2);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn run_on_saved_datasets_matches_in_memory_synth() {
    let cfg = small_config(vec![Method::Softmax, Method::Energy], false);
    let synth_dir = tempfile::tempdir().unwrap();
    let dirs = cmd_synth(&cfg, synth_dir.path()).unwrap();

    let out_mem = tempfile::tempdir().unwrap();
    let out_disk = tempfile::tempdir().unwrap();
    let mem = cmd_run(&cfg, &[], out_mem.path(), Some(1), None).unwrap();
    let disk = cmd_run(&cfg, &dirs, out_disk.path(), Some(1), None).unwrap();
    // f32 storage is the native precision, so the round trip is exact
    assert_eq!(
        fs::read(&mem.results_csv).unwrap(),
        fs::read(&disk.results_csv).unwrap()
    );
}

#[test]
fn react_run_doubles_rows_and_reports_pairs() {
    let base = small_config(vec![Method::Softmax, Method::Energy], false);
    let with_react = small_config(vec![Method::Softmax, Method::Energy], true);
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let a = cmd_run(&base, &[], out_a.path(), None, None).unwrap();
    let b = cmd_run(&with_react, &[], out_b.path(), None, None).unwrap();
    assert_eq!(b.outcome.rows.len(), 2 * a.outcome.rows.len());

    let report = cmd_report(
        &b.results_csv,
        ReportFormat::Md,
        &ReportFlags { compare_react: true, ..Default::default() },
    )
    .unwrap();
    assert!(report.contains("ReAct comparison"), "{report}");
}

#[test]
fn seed_override_changes_results() {
    let cfg = small_config(vec![Method::Softmax], false);
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    let a = cmd_run(&cfg, &[], out_a.path(), None, None).unwrap();
    let b = cmd_run(&cfg, &[], out_b.path(), None, Some(999)).unwrap();
    assert_ne!(
        fs::read(&a.results_csv).unwrap(),
        fs::read(&b.results_csv).unwrap()
    );
}

#[test]
fn tune_writes_one_entry_per_combination() {
    let mut cfg = small_config(vec![Method::Dknn], false);
    cfg.synth.as_mut().unwrap().n_subjects = 1;
    let out = tempfile::tempdir().unwrap();
    let path = cmd_tune(&cfg, &[], out.path()).unwrap();
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let map = parsed.as_object().unwrap();
    assert_eq!(map.len(), 4, "one entry per OOD class");
    for entry in map.values() {
        assert!(entry["dknn_k"].as_u64().unwrap() >= 1);
    }
}

#[test]
fn tune_without_tuned_methods_is_a_config_error() {
    let cfg = small_config(vec![Method::Softmax], false);
    let out = tempfile::tempdir().unwrap();
    match cmd_tune(&cfg, &[], out.path()) {
        Err(e @ CliError::Config(_)) => assert_eq!(e.exit_code(), 2),
        other => panic!("expected config error, got {other:?}"),
    }
}

fn write_fixture(path: &Path, rows: &[(&str, &str, &str, bool, f64, f64)]) {
    let mut out = String::from("subject,ood_class,id_classes,method,react,auroc,on_task_auroc,seed\n");
    for (subject, ood, method, react, auroc, on_task) in rows {
        out.push_str(&format!(
            "{subject},{ood},a+b+c,{method},{react},{auroc},{on_task},1\n"
        ));
    }
    fs::write(path, out).unwrap();
}

#[test]
fn report_median_iqr_matches_spreadsheet_oracle() {
    // 20 rows with AUROC k/20; the spreadsheet oracle gives median 0.525,
    // q25 = 0.2875, q75 = 0.7625, IQR = 0.475 (linear-interpolation quartiles)
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    let rows: Vec<(String, f64)> =
        (1..=20).map(|k| (format!("s{k:02}"), k as f64 / 20.0)).collect();
    let fixture: Vec<(&str, &str, &str, bool, f64, f64)> = rows
        .iter()
        .map(|(s, a)| (s.as_str(), "c0", "softmax", false, *a, 0.9))
        .collect();
    write_fixture(&path, &fixture);
    let report =
        cmd_report(&path, ReportFormat::Md, &ReportFlags::default()).unwrap();
    assert!(report.contains("| softmax | false | 20 | 0.5250 | 0.4750 |"), "{report}");
}

#[test]
fn report_single_method_renders_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    write_fixture(
        &path,
        &[
            ("s01", "c0", "energy", false, 0.7, 0.9),
            ("s02", "c0", "energy", false, 0.8, 0.9),
        ],
    );
    let report = cmd_report(&path, ReportFormat::Csv, &ReportFlags::default()).unwrap();
    let data_lines: Vec<&str> =
        report.lines().filter(|l| l.starts_with("energy")).collect();
    assert_eq!(data_lines.len(), 1);
}

#[test]
fn identical_react_columns_give_p_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    let mut fixture = Vec::new();
    let subjects: Vec<String> = (0..6).map(|i| format!("s{i:02}")).collect();
    for s in &subjects {
        fixture.push((s.as_str(), "c0", "softmax", false, 0.7, 0.9));
        fixture.push((s.as_str(), "c0", "softmax", true, 0.7, 0.9));
    }
    write_fixture(&path, &fixture);
    let report = cmd_report(
        &path,
        ReportFormat::Json,
        &ReportFlags { compare_react: true, ..Default::default() },
    )
    .unwrap();
    let doc: serde_json::Value = serde_json::from_str(&report).unwrap();
    let table = doc
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["title"].as_str().unwrap().contains("ReAct"))
        .unwrap();
    assert_eq!(table["rows"][0]["p_react"].as_str().unwrap(), "1.0000");
}

#[test]
fn compare_id_classes_uses_second_file() {
    let dir = tempfile::tempdir().unwrap();
    let three = dir.path().join("three.csv");
    let two = dir.path().join("two.csv");
    let mk = |base: f64| -> Vec<(String, f64)> {
        (0..8).map(|i| (format!("s{i:02}"), base + i as f64 * 0.01)).collect()
    };
    let rows3 = mk(0.60);
    let rows2 = mk(0.80);
    let fixture3: Vec<(&str, &str, &str, bool, f64, f64)> =
        rows3.iter().map(|(s, a)| (s.as_str(), "c0", "softmax", false, *a, 0.9)).collect();
    let fixture2: Vec<(&str, &str, &str, bool, f64, f64)> =
        rows2.iter().map(|(s, a)| (s.as_str(), "c0", "softmax", false, *a, 0.9)).collect();
    write_fixture(&three, &fixture3);
    write_fixture(&two, &fixture2);
    let report = cmd_report(
        &three,
        ReportFormat::Md,
        &ReportFlags { compare_id_classes: Some(two), ..Default::default() },
    )
    .unwrap();
    assert!(report.contains("Mann-Whitney"), "{report}");
    // complete dominance: U = 0
    assert!(report.contains("| softmax | 8 | 8 | 0.0000 |"), "{report}");
}

#[test]
fn malformed_csv_row_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    fs::write(
        &path,
        "subject,ood_class,id_classes,method,react,auroc,on_task_auroc,seed\n\
         s01,c0,a+b,softmax,false,0.7,0.9,1\n\
         s02,c0,a+b,softmax,false,not_a_number,0.9,1\n",
    )
    .unwrap();
    match cmd_report(&path, ReportFormat::Md, &ReportFlags::default()) {
        Err(e @ CliError::Data(_)) => {
            assert!(e.to_string().contains("line 3"), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn total_run_failure_maps_to_exit_code_four() {
    // make every cell fail: 2 trials per class is below the stratified
    // split's minimum of 3, so every cell errors and the run as a whole fails
    let cfg = small_config(vec![Method::Softmax], false);
    let datasets =
        loco_ood_cli::commands::load_datasets(&cfg.data_source(&[]).unwrap()).unwrap();
    let source = &datasets[0];
    let d = source.feature_dim();
    let mut keep: Vec<usize> = Vec::new();
    for class in 0..4u32 {
        keep.extend(
            source
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .take(2)
                .map(|(i, _)| i),
        );
    }
    keep.sort_unstable();
    let mut tiny = source.clone();
    tiny.epochs = keep.iter().flat_map(|&i| source.epochs[i * d..(i + 1) * d].to_vec()).collect();
    tiny.labels = keep.iter().map(|&i| source.labels[i]).collect();
    tiny.n_trials = keep.len();
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("tiny");
    loco_ood::data::save_dataset(&tiny, &data_dir).unwrap();
    let out = tempfile::tempdir().unwrap();
    match cmd_run(&cfg, &[data_dir], out.path(), None, None) {
        Err(e @ CliError::RunFailure(_)) => assert_eq!(e.exit_code(), 4),
        other => panic!("expected run failure, got {other:?}"),
    }
}
