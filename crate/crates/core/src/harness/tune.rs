//! First-subject hyperparameter tuning.
//!
//! The distance-based methods tune on the dataset's first subject, per
//! held-out class combination: d-KNN sweeps k up to the mean number of
//! training points per class, DUQ runs a seeded random search over the
//! published space. Tuned values are reused for every other subject, and the
//! first subject is excluded from scoring.

use crate::data::EpochedDataset;
use crate::metrics::{auroc, ScoredSample};
use crate::nnkit::{train_extractor, ExtractorModel, ForwardMode};
use crate::scorers::{fit_dknn, fit_duq_head, score_duq, DuqHyperparams};
use crate::seed::{rng_from, stable_hash};

use super::{
    build_loco_cell, cell_seed, ExperimentConfig, HarnessError, LocoCell, TAG_DUQ_FIT,
    TAG_DUQ_SEARCH, TAG_MEMBER,
};

pub(crate) fn member_seed(cell: u64, member: usize) -> u64 {
    stable_hash(&[cell, TAG_MEMBER, member as u64])
}

pub(crate) fn duq_fit_seed(cell: u64) -> u64 {
    stable_hash(&[cell, TAG_DUQ_FIT])
}

fn duq_trial_seed(cell: u64, trial: usize) -> u64 {
    stable_hash(&[cell, TAG_DUQ_FIT, trial as u64])
}

/// Hyperparameters selected on the first subject for one class combination.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedParams {
    pub dknn_k: Option<usize>,
    pub duq: Option<DuqHyperparams>,
}

impl TunedParams {
    pub fn none() -> Self {
        TunedParams { dknn_k: None, duq: None }
    }
}

/// Subject-0 cell with a trained extractor and cached embeddings, ready to
/// evaluate candidate hyperparameters.
pub struct FirstSubjectTuner {
    cell: LocoCell,
    train_pairs: Vec<(Vec<f64>, usize)>,
    val_pairs: Vec<(Vec<f64>, usize)>,
    test_embeddings: Vec<Vec<f64>>,
    test_flags: Vec<bool>,
}

impl FirstSubjectTuner {
    pub fn new(
        first_subject: &EpochedDataset,
        id_classes: &[usize],
        ood_class: usize,
        cfg: &ExperimentConfig,
    ) -> Result<Self, HarnessError> {
        let seed = cell_seed(cfg.master_seed, &first_subject.subject, ood_class, id_classes);
        let cell = build_loco_cell(first_subject, id_classes, ood_class, seed)?;
        let ext_cfg = cfg.extractor.config(
            cell.train[0].0.len(),
            id_classes.len(),
            member_seed(seed, 0),
        );
        let model = train_extractor(&cell.train, &cell.val, &ext_cfg)?;

        let embed = |model: &ExtractorModel, x: &[f64]| -> Result<Vec<f64>, HarnessError> {
            Ok(model.forward(x, ForwardMode::Deterministic)?.embedding)
        };
        let mut train_pairs = Vec::with_capacity(cell.train.len());
        for (x, y) in &cell.train {
            train_pairs.push((embed(&model, x)?, *y));
        }
        let mut val_pairs = Vec::with_capacity(cell.val.len());
        for (x, y) in &cell.val {
            val_pairs.push((embed(&model, x)?, *y));
        }
        let mut test_embeddings = Vec::new();
        let mut test_flags = Vec::new();
        for (x, _) in &cell.id_test {
            test_embeddings.push(embed(&model, x)?);
            test_flags.push(false);
        }
        for x in &cell.ood_test {
            test_embeddings.push(embed(&model, x)?);
            test_flags.push(true);
        }
        Ok(FirstSubjectTuner { cell, train_pairs, val_pairs, test_embeddings, test_flags })
    }

    pub fn cell(&self) -> &LocoCell {
        &self.cell
    }

    /// Largest k the sweep may use: the mean number of training points per
    /// ID class (or the configured cap), bounded by the index size.
    pub fn dknn_k_max(&self, cfg: &ExperimentConfig) -> usize {
        let per_class_mean = self.cell.train.len() / self.cell.id_classes.len();
        cfg.dknn_k_max
            .unwrap_or(per_class_mean)
            .clamp(1, self.train_pairs.len())
    }

    /// Sweep k in 1..=k_max, return the arg-max-AUROC k (ties toward
    /// smaller k).
    pub fn tune_dknn_k(&self, cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
        let k_max = self.dknn_k_max(cfg);
        let train_embeddings: Vec<Vec<f64>> =
            self.train_pairs.iter().map(|(z, _)| z.clone()).collect();
        let index = fit_dknn(&train_embeddings, 1)?;
        let distance_lists: Vec<Vec<f64>> = self
            .test_embeddings
            .iter()
            .map(|z| index.sorted_distances(z))
            .collect::<Result<_, _>>()?;

        let mut best_k = 1;
        let mut best_auroc = f64::NEG_INFINITY;
        for k in 1..=k_max {
            let samples: Vec<ScoredSample> = distance_lists
                .iter()
                .zip(&self.test_flags)
                .map(|(d, &is_ood)| ScoredSample { score: d[k - 1], is_ood })
                .collect();
            let a = auroc(&samples)?;
            if a > best_auroc {
                best_auroc = a;
                best_k = k;
            }
        }
        Ok(best_k)
    }

    /// Seeded random search over the DUQ space; returns the point with the
    /// best test AUROC (ties toward the earlier trial). Failing trials are
    /// collected; if every trial fails the error carries the first one.
    pub fn tune_duq(&self, cfg: &ExperimentConfig) -> Result<DuqHyperparams, HarnessError> {
        let mut rng = rng_from(stable_hash(&[self.cell.seed, TAG_DUQ_SEARCH]));
        let n_classes = self.cell.id_classes.len();
        let mut best: Option<(f64, DuqHyperparams)> = None;
        let mut first_error: Option<String> = None;

        for trial in 0..cfg.duq_trials {
            // sample up front so the candidate sequence is independent of
            // fit outcomes
            let hp = cfg.duq_search.sample(&mut rng);
            let fitted = fit_duq_head(
                &self.train_pairs,
                &self.val_pairs,
                n_classes,
                &hp,
                &cfg.extractor.schedule,
                duq_trial_seed(self.cell.seed, trial),
            );
            match fitted {
                Ok(head) => {
                    let samples: Vec<ScoredSample> = self
                        .test_embeddings
                        .iter()
                        .zip(&self.test_flags)
                        .map(|(z, &is_ood)| {
                            score_duq(&head, z).map(|score| ScoredSample { score, is_ood })
                        })
                        .collect::<Result<_, _>>()?;
                    let a = auroc(&samples)?;
                    if best.as_ref().map_or(true, |(b, _)| a > *b) {
                        best = Some((a, hp));
                    }
                }
                Err(e) => {
                    first_error.get_or_insert_with(|| format!("trial {trial}: {e}"));
                }
            }
        }
        best.map(|(_, hp)| hp).ok_or_else(|| HarnessError::TuningFailed {
            trials: cfg.duq_trials,
            first: first_error.unwrap_or_else(|| "no trials ran".into()),
        })
    }
}

/// Convenience wrapper: tune k on the first subject for one combination.
pub fn tune_dknn_k(
    first_subject: &EpochedDataset,
    id_classes: &[usize],
    ood_class: usize,
    cfg: &ExperimentConfig,
) -> Result<usize, HarnessError> {
    FirstSubjectTuner::new(first_subject, id_classes, ood_class, cfg)?.tune_dknn_k(cfg)
}

/// Convenience wrapper: random-search DUQ hyperparameters on the first
/// subject for one combination.
pub fn tune_duq(
    first_subject: &EpochedDataset,
    id_classes: &[usize],
    ood_class: usize,
    cfg: &ExperimentConfig,
) -> Result<DuqHyperparams, HarnessError> {
    FirstSubjectTuner::new(first_subject, id_classes, ood_class, cfg)?.tune_duq(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::harness::ExtractorSettings;
    use crate::nnkit::TrainSchedule;

    fn fast_cfg() -> ExperimentConfig {
        ExperimentConfig {
            extractor: ExtractorSettings {
                hidden_dim: 16,
                embed_dim: 8,
                dropout_p: 0.2,
                schedule: TrainSchedule::default(),
            },
            duq_trials: 2,
            master_seed: 11,
            ..Default::default()
        }
    }

    fn far_dataset() -> EpochedDataset {
        let cfg = SynthConfig {
            trials_per_class: 40,
            n_channels: 2,
            n_samples: 2,
            class_separation: 10.0,
            seed: 3,
            ..Default::default()
        };
        generate_synthetic(&cfg, "s0").unwrap()
    }

    #[test]
    fn far_ood_cell_tunes_k_to_one_by_tiebreak() {
        let ds = far_dataset();
        let cfg = fast_cfg();
        let tuner = FirstSubjectTuner::new(&ds, &[0, 1, 2], 3, &cfg).unwrap();
        // mean training points per class: 90 / 3
        assert_eq!(tuner.dknn_k_max(&cfg), 30);
        // every k separates the far class perfectly, so the tie-break wins
        assert_eq!(tuner.tune_dknn_k(&cfg).unwrap(), 1);
    }

    #[test]
    fn singleton_grid_returns_one() {
        let ds = far_dataset();
        let cfg = ExperimentConfig { dknn_k_max: Some(1), ..fast_cfg() };
        assert_eq!(tune_dknn_k(&ds, &[0, 1, 2], 3, &cfg).unwrap(), 1);
    }

    #[test]
    fn duq_search_is_deterministic_and_in_bounds() {
        let ds = far_dataset();
        let cfg = fast_cfg();
        let a = tune_duq(&ds, &[0, 1, 2], 3, &cfg).unwrap();
        let b = tune_duq(&ds, &[0, 1, 2], 3, &cfg).unwrap();
        assert_eq!(a, b);
        assert!((1e-3..=1e-1).contains(&(1.0 - a.gamma)));
        assert!([32, 64, 128, 256].contains(&a.centroid_size));
        assert!((1e-5..=5e-2).contains(&a.gradient_penalty));
    }

    #[test]
    fn single_trial_returns_the_sampled_point() {
        let ds = far_dataset();
        let cfg = ExperimentConfig { duq_trials: 1, ..fast_cfg() };
        let tuner = FirstSubjectTuner::new(&ds, &[0, 1, 2], 3, &cfg).unwrap();
        let tuned = tuner.tune_duq(&cfg).unwrap();
        let expected = cfg
            .duq_search
            .sample(&mut rng_from(stable_hash(&[tuner.cell().seed, TAG_DUQ_SEARCH])));
        assert_eq!(tuned, expected);
    }
}
