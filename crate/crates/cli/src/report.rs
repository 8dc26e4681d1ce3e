//! Results file I/O, run summaries and rendered report tables.
//!
//! `results.csv` carries one row per (cell × method × react) with the fixed
//! header below; every summary statistic is recomputable from that file
//! alone. Rendered reports show per-method medians and IQRs, plus the
//! comparison tests (ReAct Wilcoxon, per-class Kruskal–Wallis, ID-class-count
//! Mann–Whitney) with a Holm column whenever several tests appear together.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use loco_ood::harness::{CellFailure, ResultRow};
use loco_ood::metrics::{
    holm_correction, kruskal_wallis, mann_whitney_u, median_iqr, spearman, wilcoxon_signed_rank,
};

use crate::config::ReportFormat;
use crate::CliError;

pub const RESULTS_HEADER: [&str; 8] = [
    "subject",
    "ood_class",
    "id_classes",
    "method",
    "react",
    "auroc",
    "on_task_auroc",
    "seed",
];

/// One parsed results.csv row.
#[derive(Debug, Clone)]
pub struct LoadedRow {
    pub subject: String,
    pub ood_class: String,
    pub id_classes: String,
    pub method: String,
    pub react: bool,
    pub auroc: f64,
    pub on_task_auroc: f64,
    pub seed: u64,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_record(RESULTS_HEADER)
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in rows {
        writer
            .write_record([
                r.subject.as_str(),
                r.ood_class.as_str(),
                &r.id_classes.join("+"),
                r.method.name(),
                if r.react { "true" } else { "false" },
                &format!("{}", r.auroc),
                &format!("{}", r.on_task_auroc),
                &format!("{}", r.seed),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<LoadedRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let parse_err = |line: u64, what: &str| {
        CliError::Data(format!("{}: line {line}: {what}", path.display()))
    };
    let headers = reader.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    if headers.iter().ne(RESULTS_HEADER) {
        return Err(CliError::Data(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != RESULTS_HEADER.len() {
            return Err(parse_err(line, "wrong field count"));
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let react = match field(4) {
            "true" => true,
            "false" => false,
            other => return Err(parse_err(line, &format!("bad react flag {other:?}"))),
        };
        let float = |i: usize, name: &str| -> Result<f64, CliError> {
            field(i)
                .parse::<f64>()
                .map_err(|_| parse_err(line, &format!("bad {name} {:?}", field(i))))
        };
        rows.push(LoadedRow {
            subject: field(0).to_string(),
            ood_class: field(1).to_string(),
            id_classes: field(2).to_string(),
            method: field(3).to_string(),
            react,
            auroc: float(5, "auroc")?,
            on_task_auroc: float(6, "on_task_auroc")?,
            seed: field(7)
                .parse::<u64>()
                .map_err(|_| parse_err(line, &format!("bad seed {:?}", field(7))))?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no result rows", path.display())));
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct ClassSummary {
    pub n: usize,
    pub median: f64,
}

#[derive(Debug, Serialize)]
pub struct SpearmanSummary {
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize)]
pub struct GroupSummary {
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
    pub median_on_task: f64,
    pub per_ood_class: BTreeMap<String, ClassSummary>,
    /// Spearman correlation between on-task and OOD AUROC; `null` when the
    /// correlation is undefined (constant input or too few cells).
    pub spearman_on_task: Option<SpearmanSummary>,
}

#[derive(Debug, Serialize)]
pub struct FailureSummary {
    pub subject: String,
    pub ood_class: String,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub master_seed: u64,
    pub n_rows: usize,
    pub methods: BTreeMap<String, BTreeMap<String, GroupSummary>>,
    pub failures: Vec<FailureSummary>,
}

fn group_summary(rows: &[&ResultRow]) -> GroupSummary {
    let aurocs: Vec<f64> = rows.iter().map(|r| r.auroc).collect();
    let on_task: Vec<f64> = rows.iter().map(|r| r.on_task_auroc).collect();
    let (median, iqr) = median_iqr(&aurocs);
    let (median_on_task, _) = median_iqr(&on_task);
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        per_class.entry(r.ood_class.clone()).or_default().push(r.auroc);
    }
    let per_ood_class = per_class
        .into_iter()
        .map(|(name, vals)| {
            let (median, _) = median_iqr(&vals);
            (name, ClassSummary { n: vals.len(), median })
        })
        .collect();
    let spearman_on_task = spearman(&on_task, &aurocs)
        .ok()
        .map(|t| SpearmanSummary { rho: t.statistic, p_value: t.p_value });
    GroupSummary { n: rows.len(), median, iqr, median_on_task, per_ood_class, spearman_on_task }
}

pub fn build_summary(
    rows: &[ResultRow],
    failures: &[CellFailure],
    master_seed: u64,
) -> Summary {
    let mut methods: BTreeMap<String, BTreeMap<String, GroupSummary>> = BTreeMap::new();
    let mut groups: BTreeMap<(String, bool), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.name().to_string(), r.react)).or_default().push(r);
    }
    for ((method, react), group) in groups {
        methods
            .entry(method)
            .or_default()
            .insert(if react { "react_on" } else { "react_off" }.to_string(), group_summary(&group));
    }
    Summary {
        master_seed,
        n_rows: rows.len(),
        methods,
        failures: failures
            .iter()
            .map(|f| FailureSummary {
                subject: f.subject.clone(),
                ood_class: f.ood_class.clone(),
                error: f.error.clone(),
            })
            .collect(),
    }
}

/// A rendered report section.
#[derive(Debug)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt_stat(v: f64) -> String {
    format!("{v:.4}")
}

pub fn fmt_p(p: f64) -> String {
    if p != 0.0 && p < 1e-3 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

/// Per-(method, react) median/IQR overview.
pub fn overview_table(rows: &[LoadedRow]) -> Table {
    let mut groups: BTreeMap<(String, bool), Vec<&LoadedRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.react)).or_default().push(r);
    }
    let table_rows = groups
        .into_iter()
        .map(|((method, react), group)| {
            let aurocs: Vec<f64> = group.iter().map(|r| r.auroc).collect();
            let on_task: Vec<f64> = group.iter().map(|r| r.on_task_auroc).collect();
            let (median, iqr) = median_iqr(&aurocs);
            let (median_on_task, _) = median_iqr(&on_task);
            let corr = spearman(&on_task, &aurocs).ok();
            vec![
                method,
                react.to_string(),
                group.len().to_string(),
                fmt_stat(median),
                fmt_stat(iqr),
                fmt_stat(median_on_task),
                corr.as_ref().map_or("n/a".into(), |c| fmt_stat(c.statistic)),
                corr.as_ref().map_or("n/a".into(), |c| fmt_p(c.p_value)),
            ]
        })
        .collect();
    Table {
        title: "OOD detection per method".into(),
        columns: vec![
            "method".into(),
            "react".into(),
            "n".into(),
            "median".into(),
            "iqr".into(),
            "on_task_auroc".into(),
            "rho_correlation".into(),
            "p_correlation".into(),
        ],
        rows: table_rows,
    }
}

fn methods_in(rows: &[LoadedRow]) -> Vec<String> {
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods.sort();
    methods
}

/// Paired Wilcoxon per method between react=false and react=true rows.
pub fn compare_react_table(rows: &[LoadedRow]) -> Result<Table, CliError> {
    let mut table_rows = Vec::new();
    let mut p_values = Vec::new();
    for method in methods_in(rows) {
        let mut off: BTreeMap<(String, String, String), f64> = BTreeMap::new();
        let mut on: BTreeMap<(String, String, String), f64> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.method == method) {
            let key = (r.subject.clone(), r.ood_class.clone(), r.id_classes.clone());
            if r.react {
                on.insert(key, r.auroc);
            } else {
                off.insert(key, r.auroc);
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (key, &v_off) in &off {
            if let Some(&v_on) = on.get(key) {
                a.push(v_off);
                b.push(v_on);
            }
        }
        if a.is_empty() {
            continue;
        }
        let t = wilcoxon_signed_rank(&b, &a)
            .map_err(|e| CliError::Data(format!("react comparison for {method}: {e}")))?;
        p_values.push(t.p_value);
        table_rows.push(vec![
            method,
            a.len().to_string(),
            fmt_stat(t.statistic),
            fmt_p(t.p_value),
        ]);
    }
    if table_rows.is_empty() {
        return Err(CliError::Data(
            "no paired react on/off rows; run with react enabled first".into(),
        ));
    }
    let adjusted = holm_correction(&p_values).map_err(|e| CliError::Data(e.to_string()))?;
    for (row, adj) in table_rows.iter_mut().zip(adjusted) {
        row.push(fmt_p(adj));
    }
    Ok(Table {
        title: "ReAct comparison (Wilcoxon signed-rank)".into(),
        columns: vec![
            "method".into(),
            "n_pairs".into(),
            "W".into(),
            "p_react".into(),
            "p_holm".into(),
        ],
        rows: table_rows,
    })
}

fn base_rows(rows: &[LoadedRow]) -> Vec<&LoadedRow> {
    let non_react: Vec<&LoadedRow> = rows.iter().filter(|r| !r.react).collect();
    if non_react.is_empty() {
        rows.iter().collect()
    } else {
        non_react
    }
}

/// Kruskal–Wallis across OOD classes (pooled over methods and subjects),
/// plus per-class medians.
pub fn by_class_table(rows: &[LoadedRow]) -> Result<Vec<Table>, CliError> {
    let pool = base_rows(rows);
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &pool {
        per_class.entry(r.ood_class.clone()).or_default().push(r.auroc);
    }
    if per_class.len() < 2 {
        return Err(CliError::Data("need at least 2 OOD classes for --by-class".into()));
    }
    let class_rows = per_class
        .iter()
        .map(|(name, vals)| {
            let (median, iqr) = median_iqr(vals);
            vec![name.clone(), vals.len().to_string(), fmt_stat(median), fmt_stat(iqr)]
        })
        .collect();
    let groups: Vec<Vec<f64>> = per_class.into_values().collect();
    let t = kruskal_wallis(&groups).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(vec![
        Table {
            title: "Per-OOD-class AUROC".into(),
            columns: vec!["ood_class".into(), "n".into(), "median".into(), "iqr".into()],
            rows: class_rows,
        },
        Table {
            title: "Class effect (Kruskal-Wallis)".into(),
            columns: vec!["H".into(), "p".into()],
            rows: vec![vec![fmt_stat(t.statistic), fmt_p(t.p_value)]],
        },
    ])
}

/// Mann–Whitney per method between two results files (e.g. 3-ID-class run
/// vs 2-ID-class run).
pub fn compare_id_classes_table(
    rows: &[LoadedRow],
    other: &[LoadedRow],
) -> Result<Table, CliError> {
    let here = base_rows(rows);
    let there = base_rows(other);
    let mut table_rows = Vec::new();
    let mut p_values = Vec::new();
    for method in methods_in(rows) {
        let a: Vec<f64> =
            here.iter().filter(|r| r.method == method).map(|r| r.auroc).collect();
        let b: Vec<f64> =
            there.iter().filter(|r| r.method == method).map(|r| r.auroc).collect();
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let t = mann_whitney_u(&a, &b)
            .map_err(|e| CliError::Data(format!("id-class comparison for {method}: {e}")))?;
        p_values.push(t.p_value);
        table_rows.push(vec![
            method,
            a.len().to_string(),
            b.len().to_string(),
            fmt_stat(t.statistic),
            fmt_p(t.p_value),
        ]);
    }
    if table_rows.is_empty() {
        return Err(CliError::Data("no overlapping methods between the two files".into()));
    }
    let adjusted = holm_correction(&p_values).map_err(|e| CliError::Data(e.to_string()))?;
    for (row, adj) in table_rows.iter_mut().zip(adjusted) {
        row.push(fmt_p(adj));
    }
    Ok(Table {
        title: "ID-class-count comparison (Mann-Whitney U)".into(),
        columns: vec![
            "method".into(),
            "n_here".into(),
            "n_other".into(),
            "U".into(),
            "p".into(),
            "p_holm".into(),
        ],
        rows: table_rows,
    })
}

pub fn render(tables: &[Table], format: ReportFormat) -> String {
    match format {
        ReportFormat::Md => {
            let mut out = String::new();
            for t in tables {
                out.push_str(&format!("## {}\n\n", t.title));
                out.push_str(&format!("| {} |\n", t.columns.join(" | ")));
                out.push_str(&format!(
                    "|{}|\n",
                    t.columns.iter().map(|_| " --- ").collect::<Vec<_>>().join("|")
                ));
                for row in &t.rows {
                    out.push_str(&format!("| {} |\n", row.join(" | ")));
                }
                out.push('\n');
            }
            out
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            for t in tables {
                out.push_str(&format!("# {}\n", t.title));
                out.push_str(&t.columns.join(","));
                out.push('\n');
                for row in &t.rows {
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
            }
            out
        }
        ReportFormat::Json => {
            let mut doc = Vec::new();
            for t in tables {
                let rows: Vec<BTreeMap<String, String>> = t
                    .rows
                    .iter()
                    .map(|row| {
                        t.columns.iter().cloned().zip(row.iter().cloned()).collect()
                    })
                    .collect();
                let mut obj = BTreeMap::new();
                obj.insert("title".to_string(), serde_json::json!(t.title));
                obj.insert("rows".to_string(), serde_json::json!(rows));
                doc.push(obj);
            }
            let mut s = serde_json::to_string_pretty(&doc).expect("table serialization");
            s.push('\n');
            s
        }
    }
}

pub fn write_summary_json(path: &Path, summary: &Summary) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, json + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}
