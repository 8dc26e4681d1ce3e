//! Experiment execution: rotate every class as OOD for every retained
//! subject, score with every enabled method (with and without ReAct when
//! enabled), and collect one row per combination.
//!
//! Cells run on a worker pool; each cell's seed depends only on the
//! experiment coordinates, so the emitted rows are identical for any worker
//! count and any subset of other cells.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::EpochedDataset;
use crate::metrics::{auroc, MetricError, ScoredSample};
use crate::nnkit::{softmax, train_extractor, ExtractorModel, ForwardMode, ForwardOutput};
use crate::scorers::{
    ensemble_mean_probs, fit_ddu, fit_dknn, fit_duq_head, react_fit, score_ddu, score_dknn,
    score_duq, score_energy, score_ensemble, score_mc_dropout, score_softmax, DuqHead, Pipeline,
    ReactState,
};
use crate::seed::{rng_from, stable_hash};

use super::tune::{duq_fit_seed, member_seed};
use super::{
    build_loco_cell, cell_seed, ExperimentConfig, FirstSubjectTuner, HarnessError, IdClassMode,
    LocoCell, Method, ResultRow, TunedParams, TAG_MC,
};

/// A cell that errored; recorded and skipped.
#[derive(Debug, Clone)]
pub struct CellFailure {
    pub subject: String,
    pub ood_class: String,
    pub id_classes: Vec<String>,
    pub error: String,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// All (ood_class, id_classes) combinations for the mode.
pub fn class_combinations(
    n_classes: usize,
    mode: IdClassMode,
) -> Result<Vec<(usize, Vec<usize>)>, HarnessError> {
    match mode {
        IdClassMode::Three => {
            if n_classes < 3 {
                return Err(HarnessError::Config(format!(
                    "all-but-one mode needs at least 3 classes, got {n_classes}"
                )));
            }
            Ok((0..n_classes)
                .map(|ood| (ood, (0..n_classes).filter(|&c| c != ood).collect()))
                .collect())
        }
        IdClassMode::Two => {
            if n_classes < 4 {
                return Err(HarnessError::Config(format!(
                    "all-but-two mode needs at least 4 classes, got {n_classes}"
                )));
            }
            let mut combos = Vec::new();
            for ood in 0..n_classes {
                for dropped in 0..n_classes {
                    if dropped == ood {
                        continue;
                    }
                    let ids: Vec<usize> =
                        (0..n_classes).filter(|&c| c != ood && c != dropped).collect();
                    combos.push((ood, ids));
                }
            }
            Ok(combos)
        }
    }
}

fn check_dataset_consistency(datasets: &[EpochedDataset]) -> Result<(), HarnessError> {
    let first = &datasets[0];
    for ds in &datasets[1..] {
        if ds.class_names != first.class_names {
            return Err(HarnessError::DatasetMismatch(format!(
                "subject {} has different class names",
                ds.subject
            )));
        }
        if ds.n_channels != first.n_channels || ds.n_samples != first.n_samples {
            return Err(HarnessError::DatasetMismatch(format!(
                "subject {} has shape {}×{}, expected {}×{}",
                ds.subject, ds.n_channels, ds.n_samples, first.n_channels, first.n_samples
            )));
        }
    }
    Ok(())
}

/// Run the full experiment. `jobs` bounds the worker pool (`None`: available
/// parallelism). Per-cell failures are recorded and skipped; the run fails
/// only if every cell fails.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    datasets: &[EpochedDataset],
    jobs: Option<usize>,
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(HarnessError::Config("no datasets supplied".into()));
    }
    for ds in datasets {
        ds.validate()?;
    }
    check_dataset_consistency(datasets)?;
    let combos = class_combinations(datasets[0].n_classes(), cfg.id_class_mode)?;
    if cfg.any_tuned() && datasets.len() < 2 {
        return Err(HarnessError::NeedTuningSubject);
    }
    let retained: Vec<&EpochedDataset> = if cfg.exclude_first() {
        datasets.iter().skip(1).collect()
    } else {
        datasets.iter().collect()
    };
    if retained.is_empty() {
        return Err(HarnessError::Config("no subjects retained for scoring".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;

    // first-subject tuning, one entry per class combination
    let tuned: BTreeMap<(usize, Vec<usize>), Result<TunedParams, String>> = if cfg.any_tuned() {
        pool.install(|| {
            combos
                .par_iter()
                .map(|(ood, ids)| {
                    let result = tune_combination(&datasets[0], ids, *ood, cfg)
                        .map_err(|e| e.to_string());
                    ((*ood, ids.clone()), result)
                })
                .collect()
        })
    } else {
        combos.iter().map(|(ood, ids)| ((*ood, ids.clone()), Ok(TunedParams::none()))).collect()
    };

    let specs: Vec<(&EpochedDataset, &(usize, Vec<usize>))> = retained
        .iter()
        .flat_map(|ds| combos.iter().map(move |combo| (*ds, combo)))
        .collect();

    let results: Vec<Result<Vec<ResultRow>, CellFailure>> = pool.install(|| {
        specs
            .par_iter()
            .map(|(ds, (ood, ids))| {
                let names = |list: &[usize]| -> Vec<String> {
                    list.iter().map(|&c| ds.class_names[c].clone()).collect()
                };
                let fail = |error: String| CellFailure {
                    subject: ds.subject.clone(),
                    ood_class: ds.class_names[*ood].clone(),
                    id_classes: names(ids),
                    error,
                };
                match &tuned[&(*ood, ids.clone())] {
                    Err(e) => Err(fail(format!("tuning failed: {e}"))),
                    Ok(params) => {
                        run_cell(ds, ids, *ood, cfg, params).map_err(|e| fail(e.to_string()))
                    }
                }
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(mut cell_rows) => rows.append(&mut cell_rows),
            Err(f) => failures.push(f),
        }
    }
    if rows.is_empty() {
        return Err(HarnessError::AllCellsFailed(failures.len()));
    }
    rows.sort_by(|a, b| {
        (&a.subject, a.ood_class_index, a.method.name(), a.react).cmp(&(
            &b.subject,
            b.ood_class_index,
            b.method.name(),
            b.react,
        ))
    });
    Ok(RunOutcome { rows, failures })
}

fn tune_combination(
    first: &EpochedDataset,
    id_classes: &[usize],
    ood_class: usize,
    cfg: &ExperimentConfig,
) -> Result<TunedParams, HarnessError> {
    let tuner = FirstSubjectTuner::new(first, id_classes, ood_class, cfg)?;
    let dknn_k = if cfg.methods.contains(&Method::Dknn) {
        Some(tuner.tune_dknn_k(cfg)?)
    } else {
        None
    };
    let duq = if cfg.methods.contains(&Method::Duq) {
        Some(tuner.tune_duq(cfg)?)
    } else {
        None
    };
    Ok(TunedParams { dknn_k, duq })
}

fn run_cell(
    dataset: &EpochedDataset,
    id_classes: &[usize],
    ood_class: usize,
    cfg: &ExperimentConfig,
    tuned: &TunedParams,
) -> Result<Vec<ResultRow>, HarnessError> {
    let seed = cell_seed(cfg.master_seed, &dataset.subject, ood_class, id_classes);
    let cell = build_loco_cell(dataset, id_classes, ood_class, seed)?;
    let input_dim = cell.train[0].0.len();
    let n_id = id_classes.len();

    let n_members = if cfg.methods.contains(&Method::DeepEnsemble) {
        cfg.scorer.ensemble_size
    } else {
        1
    };
    let models: Vec<ExtractorModel> = (0..n_members)
        .map(|i| {
            let ext_cfg = cfg.extractor.config(input_dim, n_id, member_seed(seed, i));
            train_extractor(&cell.train, &cell.val, &ext_cfg)
        })
        .collect::<Result<_, _>>()?;

    let id_names: Vec<String> =
        id_classes.iter().map(|&c| dataset.class_names[c].clone()).collect();
    let mut rows = Vec::new();
    let react_modes: &[bool] = if cfg.react { &[false, true] } else { &[false] };
    for &react in react_modes {
        rows.extend(score_cell(
            &cell,
            cfg,
            tuned,
            &models,
            react,
            &dataset.class_names[ood_class],
            &id_names,
        )?);
    }
    Ok(rows)
}

fn deterministic_features(
    pipe: &Pipeline,
    xs: impl Iterator<Item = impl AsRef<[f64]>>,
) -> Result<Vec<ForwardOutput>, HarnessError> {
    xs.map(|x| Ok(pipe.features(x.as_ref(), ForwardMode::Deterministic)?)).collect()
}

/// Macro one-vs-rest AUROC over per-class score vectors; classes missing a
/// positive or negative are skipped.
fn macro_ovr_auroc(
    per_class_scores: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<f64, HarnessError> {
    let mut per_class = Vec::new();
    for class in 0..n_classes {
        let positives = labels.iter().filter(|&&l| l == class).count();
        if positives == 0 || positives == labels.len() {
            continue;
        }
        let samples: Vec<ScoredSample> = per_class_scores
            .iter()
            .zip(labels)
            .map(|(scores, &l)| ScoredSample { score: scores[class], is_ood: l == class })
            .collect();
        per_class.push(auroc(&samples)?);
    }
    if per_class.is_empty() {
        return Err(HarnessError::Metric(MetricError::SingleClass));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn score_cell(
    cell: &LocoCell,
    cfg: &ExperimentConfig,
    tuned: &TunedParams,
    models: &[ExtractorModel],
    react: bool,
    ood_name: &str,
    id_names: &[String],
) -> Result<Vec<ResultRow>, HarnessError> {
    let n_id = cell.id_classes.len();

    // ReAct clamps are fitted per member on that member's raw ID training
    // activations; fitted scorers then consume clamped embeddings throughout.
    let react_states: Vec<Option<ReactState>> = if react {
        models
            .iter()
            .map(|m| {
                let raw: Result<Vec<Vec<f64>>, HarnessError> = cell
                    .train
                    .iter()
                    .map(|(x, _)| Ok(m.forward(x, ForwardMode::Deterministic)?.embedding))
                    .collect();
                Ok(Some(react_fit(&raw?, cfg.scorer.react_percentile)?))
            })
            .collect::<Result<_, HarnessError>>()?
    } else {
        vec![None; models.len()]
    };
    let pipes: Vec<Pipeline> = models
        .iter()
        .zip(&react_states)
        .map(|(model, state)| Pipeline { model, react: state.as_ref() })
        .collect();
    let pipe0 = pipes[0];

    let train_feats = deterministic_features(&pipe0, cell.train.iter().map(|(x, _)| x))?;
    let train_embeddings: Vec<Vec<f64>> =
        train_feats.iter().map(|f| f.embedding.clone()).collect();
    let train_labels: Vec<usize> = cell.train.iter().map(|(_, y)| *y).collect();
    let id_feats = deterministic_features(&pipe0, cell.id_test.iter().map(|(x, _)| x))?;
    let ood_feats = deterministic_features(&pipe0, cell.ood_test.iter())?;
    let id_labels: Vec<usize> = cell.id_test.iter().map(|(_, y)| *y).collect();

    // member-0 deterministic probabilities drive on-task AUROC for every
    // method without its own trainable readout
    let base_probs: Vec<Vec<f64>> = id_feats
        .iter()
        .map(|f| softmax(&f.logits).map_err(HarnessError::Nn))
        .collect::<Result<_, _>>()?;
    let base_on_task = macro_ovr_auroc(&base_probs, &id_labels, n_id)?;

    // all test feature vectors in scoring order: ID test then OOD test
    let test_xs: Vec<&Vec<f64>> = cell
        .id_test
        .iter()
        .map(|(x, _)| x)
        .chain(cell.ood_test.iter())
        .collect();
    let test_feats: Vec<&ForwardOutput> = id_feats.iter().chain(ood_feats.iter()).collect();
    let flags: Vec<bool> = (0..test_xs.len()).map(|i| i >= cell.id_test.len()).collect();

    let mut duq_head: Option<DuqHead> = None;
    let mut rows = Vec::new();

    for &method in &cfg.methods {
        let started = Instant::now();
        let scores: Vec<f64> = match method {
            Method::Softmax => test_feats
                .iter()
                .map(|f| score_softmax(&f.logits, cfg.scorer.softmax_baseline))
                .collect::<Result<_, _>>()?,
            Method::Energy => test_feats
                .iter()
                .map(|f| score_energy(&f.logits, cfg.scorer.energy_temperature))
                .collect::<Result<_, _>>()?,
            Method::McDropout => test_xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = rng_from(stable_hash(&[cell.seed, TAG_MC, i as u64]));
                    score_mc_dropout(&pipe0, x, cfg.scorer.mc_passes, &mut rng)
                })
                .collect::<Result<_, _>>()?,
            Method::DeepEnsemble => test_xs
                .iter()
                .map(|x| score_ensemble(&pipes, x))
                .collect::<Result<_, _>>()?,
            Method::Ddu => {
                let gda = fit_ddu(&train_embeddings, &train_labels, n_id)?;
                test_feats
                    .iter()
                    .map(|f| score_ddu(&gda, &f.embedding))
                    .collect::<Result<_, _>>()?
            }
            Method::Duq => {
                let hp = tuned.duq.as_ref().ok_or_else(|| {
                    HarnessError::Config("duq enabled without tuned hyperparameters".into())
                })?;
                let train_pairs: Vec<(Vec<f64>, usize)> = train_embeddings
                    .iter()
                    .cloned()
                    .zip(train_labels.iter().copied())
                    .collect();
                let val_feats =
                    deterministic_features(&pipe0, cell.val.iter().map(|(x, _)| x))?;
                let val_pairs: Vec<(Vec<f64>, usize)> = val_feats
                    .iter()
                    .map(|f| f.embedding.clone())
                    .zip(cell.val.iter().map(|(_, y)| *y))
                    .collect();
                let head = fit_duq_head(
                    &train_pairs,
                    &val_pairs,
                    n_id,
                    hp,
                    &cfg.extractor.schedule,
                    duq_fit_seed(cell.seed),
                )?;
                let scores = test_feats
                    .iter()
                    .map(|f| score_duq(&head, &f.embedding))
                    .collect::<Result<_, _>>()?;
                duq_head = Some(head);
                scores
            }
            Method::Dknn => {
                let k = tuned.dknn_k.ok_or_else(|| {
                    HarnessError::Config("dknn enabled without a tuned k".into())
                })?;
                let index = fit_dknn(&train_embeddings, k.min(train_embeddings.len()))?;
                test_feats
                    .iter()
                    .map(|f| score_dknn(&index, &f.embedding))
                    .collect::<Result<_, _>>()?
            }
        };

        let samples: Vec<ScoredSample> = scores
            .iter()
            .zip(&flags)
            .map(|(&score, &is_ood)| ScoredSample { score, is_ood })
            .collect();
        let cell_auroc = auroc(&samples)?;

        let on_task = match method {
            Method::DeepEnsemble => {
                let probs: Vec<Vec<f64>> = cell
                    .id_test
                    .iter()
                    .map(|(x, _)| ensemble_mean_probs(&pipes, x))
                    .collect::<Result<_, _>>()?;
                macro_ovr_auroc(&probs, &id_labels, n_id)?
            }
            Method::Duq => {
                // the DUQ head is its own trainable readout: classify by
                // kernel similarity
                let head = duq_head.as_ref().expect("head fitted in the scoring arm");
                let kernels: Vec<Vec<f64>> = id_feats
                    .iter()
                    .map(|f| head.kernels(&f.embedding))
                    .collect::<Result<_, _>>()?;
                macro_ovr_auroc(&kernels, &id_labels, n_id)?
            }
            _ => base_on_task,
        };

        rows.push(ResultRow {
            subject: cell.subject.clone(),
            ood_class: ood_name.to_string(),
            ood_class_index: cell.ood_class,
            id_classes: id_names.to_vec(),
            method,
            react,
            auroc: cell_auroc,
            on_task_auroc: on_task,
            seed: cell.seed,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
