//! Leave-one-class-out experiment harness.
//!
//! One experiment cell is a (subject, OOD-class) pair: the subject's trials
//! of the retained ID classes are split 75/10/15 (stratified), the extractor
//! is trained on the train split, fitted scorers see only train-split
//! embeddings, and the test set mixes the held-out ID trials with an equal
//! number of OOD-class trials. Cell seeds are stable hashes of the experiment
//! coordinates so results are schedule-independent.

mod run;
mod tune;

pub use run::{class_combinations, run_experiment, CellFailure, RunOutcome};
pub use tune::{tune_dknn_k, tune_duq, FirstSubjectTuner, TunedParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, EpochedDataset};
use crate::metrics::MetricError;
use crate::nnkit::{ExtractorConfig, NnError, TrainSchedule};
use crate::scorers::{DuqHyperparams, ScoreError, ScorerConfig};
use crate::seed::{mix, mix_bytes, rng_from, stable_hash};

use rand::seq::SliceRandom;

pub(crate) const TAG_SPLIT: u64 = 0x5350;
pub(crate) const TAG_OOD_PICK: u64 = 0x4f50;
pub(crate) const TAG_ID_TRIM: u64 = 0x4954;
pub(crate) const TAG_MEMBER: u64 = 0x4d42;
pub(crate) const TAG_DUQ_FIT: u64 = 0x4446;
pub(crate) const TAG_DUQ_SEARCH: u64 = 0x4453;
pub(crate) const TAG_MC: u64 = 0x4d43;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("class {class} has {got} trials; the stratified split needs at least 3")]
    ClassTooSmall { class: String, got: usize },
    #[error("split fractions must be positive and sum to 1")]
    BadFractions,
    #[error("OOD class {0} has no trials")]
    OodClassEmpty(String),
    #[error("tuned methods need at least 2 subjects (the first is consumed by tuning)")]
    NeedTuningSubject,
    #[error("datasets disagree: {0}")]
    DatasetMismatch(String),
    #[error("DUQ tuning failed: all {trials} trials errored; first: {first}")]
    TuningFailed { trials: usize, first: String },
    #[error("all {0} cells failed")]
    AllCellsFailed(usize),
}

/// The seven scoring methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Softmax,
    McDropout,
    DeepEnsemble,
    Energy,
    Ddu,
    Duq,
    Dknn,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Softmax,
        Method::McDropout,
        Method::DeepEnsemble,
        Method::Energy,
        Method::Ddu,
        Method::Duq,
        Method::Dknn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Softmax => "softmax",
            Method::McDropout => "mc_dropout",
            Method::DeepEnsemble => "deep_ensemble",
            Method::Energy => "energy",
            Method::Ddu => "ddu",
            Method::Duq => "duq",
            Method::Dknn => "dknn",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Methods whose hyperparameters come from first-subject tuning.
    pub fn is_tuned(&self) -> bool {
        matches!(self, Method::Duq | Method::Dknn)
    }
}

/// How many ID classes each cell retains: all-but-one (3 for four-class
/// data) or all-but-two (2), rotating the dropped class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum IdClassMode {
    Three,
    Two,
}

impl TryFrom<usize> for IdClassMode {
    type Error = String;

    fn try_from(v: usize) -> Result<Self, String> {
        match v {
            3 => Ok(IdClassMode::Three),
            2 => Ok(IdClassMode::Two),
            other => Err(format!("id_class_mode must be 3 or 2, got {other}")),
        }
    }
}

impl From<IdClassMode> for usize {
    fn from(m: IdClassMode) -> usize {
        match m {
            IdClassMode::Three => 3,
            IdClassMode::Two => 2,
        }
    }
}

/// Extractor shape applied to every cell; input width, class count and seed
/// are derived per cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSettings {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub dropout_p: f64,
    pub schedule: TrainSchedule,
}

impl Default for ExtractorSettings {
    fn default() -> Self {
        ExtractorSettings {
            hidden_dim: 64,
            embed_dim: 32,
            dropout_p: 0.25,
            schedule: TrainSchedule::default(),
        }
    }
}

impl ExtractorSettings {
    pub fn config(&self, input_dim: usize, n_classes: usize, seed: u64) -> ExtractorConfig {
        ExtractorConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            n_classes,
            dropout_p: self.dropout_p,
            seed,
            schedule: self.schedule.clone(),
        }
    }
}

/// Random-search space for the DUQ head. The bounds are part of the
/// benchmark protocol and are validated, not tunable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuqSearchSpace {
    pub one_minus_gamma: (f64, f64),
    pub centroid_sizes: Vec<usize>,
    pub penalty: (f64, f64),
}

impl Default for DuqSearchSpace {
    fn default() -> Self {
        DuqSearchSpace {
            one_minus_gamma: (1e-3, 1e-1),
            centroid_sizes: vec![32, 64, 128, 256],
            penalty: (1e-5, 5e-2),
        }
    }
}

impl DuqSearchSpace {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if *self != DuqSearchSpace::default() {
            return Err(HarnessError::Config(
                "duq_search bounds must match the published search space \
                 (one_minus_gamma [1e-3, 1e-1], centroid sizes {32, 64, 128, 256}, \
                 penalty [1e-5, 5e-2])"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Log-uniform continuous coordinates, uniform categorical centroid size.
    pub fn sample(&self, rng: &mut rand_chacha::ChaCha8Rng) -> DuqHyperparams {
        use rand::Rng;
        let log_uniform = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
            (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
        };
        let one_minus_gamma = log_uniform(rng, self.one_minus_gamma);
        let centroid_size = self.centroid_sizes[rng.random_range(0..self.centroid_sizes.len())];
        let penalty = log_uniform(rng, self.penalty);
        DuqHyperparams { gamma: 1.0 - one_minus_gamma, centroid_size, gradient_penalty: penalty }
    }
}

/// Full experiment description; one run covers every retained subject and
/// every OOD-class rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub react: bool,
    pub scorer: ScorerConfig,
    pub extractor: ExtractorSettings,
    /// Cap for the d-KNN k sweep; `None` applies the mean-training-points-
    /// per-class rule.
    pub dknn_k_max: Option<usize>,
    pub duq_trials: usize,
    pub duq_search: DuqSearchSpace,
    pub id_class_mode: IdClassMode,
    /// `None`: excluded exactly when a tuned method runs.
    pub exclude_first_subject: Option<bool>,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            methods: Method::ALL.to_vec(),
            react: false,
            scorer: ScorerConfig::default(),
            extractor: ExtractorSettings::default(),
            dknn_k_max: None,
            duq_trials: 30,
            duq_search: DuqSearchSpace::default(),
            id_class_mode: IdClassMode::Three,
            exclude_first_subject: None,
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() {
            return Err(HarnessError::Config("methods must not be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(HarnessError::Config(format!("duplicate method {}", m.name())));
            }
        }
        self.scorer.validate()?;
        if self.extractor.hidden_dim == 0 || self.extractor.embed_dim == 0 {
            return Err(HarnessError::Config("extractor dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.extractor.dropout_p) {
            return Err(HarnessError::Config("dropout_p must lie in [0, 1)".into()));
        }
        self.extractor.schedule.validate()?;
        if self.duq_trials == 0 {
            return Err(HarnessError::Config("duq_trials must be at least 1".into()));
        }
        self.duq_search.validate()?;
        Ok(())
    }

    pub fn any_tuned(&self) -> bool {
        self.methods.iter().any(Method::is_tuned)
    }

    pub fn exclude_first(&self) -> bool {
        self.any_tuned() || self.exclude_first_subject.unwrap_or(false)
    }
}

/// One emitted observation: a (cell × method × react) AUROC pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub subject: String,
    pub ood_class: String,
    pub ood_class_index: usize,
    pub id_classes: Vec<String>,
    pub method: Method,
    pub react: bool,
    pub auroc: f64,
    pub on_task_auroc: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Per-feature z-score parameters fitted on the training split only.
/// Features whose training std falls below 1e-8 are zeroed outright.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Normalizer {
        let n = rows.len() as f64;
        let dim = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let std = (s / n).sqrt();
                if std < STD_FLOOR {
                    0.0
                } else {
                    1.0 / std
                }
            })
            .collect();
        Normalizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

/// One (subject, OOD-class) experiment unit with normalized splits.
#[derive(Debug, Clone)]
pub struct LocoCell {
    pub subject: String,
    /// Retained class indices in the original dataset, in training order;
    /// cell-local labels are positions in this list.
    pub id_classes: Vec<usize>,
    pub ood_class: usize,
    pub train: Vec<(Vec<f64>, usize)>,
    pub val: Vec<(Vec<f64>, usize)>,
    pub id_test: Vec<(Vec<f64>, usize)>,
    pub ood_test: Vec<Vec<f64>>,
    pub normalizer: Normalizer,
    pub seed: u64,
    /// Original dataset trial indices per split (diagnostics and tests).
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub id_test_indices: Vec<usize>,
    pub ood_test_indices: Vec<usize>,
}

/// Stable per-cell seed from the experiment coordinates.
pub fn cell_seed(master_seed: u64, subject: &str, ood_class: usize, id_classes: &[usize]) -> u64 {
    let mut words = vec![master_seed, mix_bytes(0, subject.as_bytes()), ood_class as u64];
    words.extend(id_classes.iter().map(|&c| c as u64));
    stable_hash(&words)
}

/// Largest-remainder apportionment of `n` items over the fractions; ties go
/// to the earlier fraction.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let quota = fractions[i] * n as f64;
        counts[i] = quota.floor() as usize;
        remainders[i] = (quota - quota.floor(), i);
        assigned += counts[i];
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for r in remainders.iter().take(n - assigned) {
        counts[r.1] += 1;
    }
    counts
}

/// Stratified (train, val, test) index partition by largest-remainder
/// apportionment per class and seeded within-class shuffles.
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), HarnessError> {
    if fractions.iter().any(|&f| f <= 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HarnessError::BadFractions);
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(HarnessError::Config(format!("label {l} out of range")));
        }
        per_class[l].push(i);
    }
    let mut rng = rng_from(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (class, mut indices) in per_class.into_iter().enumerate() {
        if indices.len() < 3 {
            return Err(HarnessError::ClassTooSmall {
                class: format!("class {class}"),
                got: indices.len(),
            });
        }
        let counts = apportion(indices.len(), fractions);
        indices.shuffle(&mut rng);
        let (a, rest) = indices.split_at(counts[0]);
        let (b, c) = rest.split_at(counts[1]);
        train.extend_from_slice(a);
        val.extend_from_slice(b);
        test.extend_from_slice(c);
    }
    Ok((train, val, test))
}

/// Build one experiment cell: split the ID pool, draw the OOD test trials
/// (1:1 with the ID test), fit the z-score normalizer on train only and
/// apply it to all four sets.
pub fn build_loco_cell(
    dataset: &EpochedDataset,
    id_classes: &[usize],
    ood_class: usize,
    seed: u64,
) -> Result<LocoCell, HarnessError> {
    dataset.validate()?;
    let n_classes = dataset.n_classes();
    if id_classes.len() < 2 {
        return Err(HarnessError::Config("need at least 2 ID classes".into()));
    }
    if ood_class >= n_classes {
        return Err(HarnessError::Config(format!("ood class {ood_class} out of range")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &c in id_classes {
        if c >= n_classes {
            return Err(HarnessError::Config(format!("id class {c} out of range")));
        }
        if c == ood_class {
            return Err(HarnessError::Config("ood class listed as an ID class".into()));
        }
        if !seen.insert(c) {
            return Err(HarnessError::Config(format!("duplicate id class {c}")));
        }
    }

    // ID pool with cell-local labels
    let mut pool_indices = Vec::new();
    let mut pool_labels = Vec::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        if let Some(pos) = id_classes.iter().position(|&c| c == l as usize) {
            pool_indices.push(i);
            pool_labels.push(pos);
        }
    }
    let (train_p, val_p, test_p) = stratified_split(
        &pool_labels,
        id_classes.len(),
        [0.75, 0.10, 0.15],
        mix(seed, TAG_SPLIT),
    )
    .map_err(|e| match e {
        HarnessError::ClassTooSmall { class, got } => {
            let idx: usize = class
                .strip_prefix("class ")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            HarnessError::ClassTooSmall {
                class: dataset.class_names[id_classes[idx]].clone(),
                got,
            }
        }
        other => other,
    })?;

    let mut train_indices: Vec<usize> = train_p.iter().map(|&p| pool_indices[p]).collect();
    let mut val_indices: Vec<usize> = val_p.iter().map(|&p| pool_indices[p]).collect();
    let mut id_test_indices: Vec<usize> = test_p.iter().map(|&p| pool_indices[p]).collect();

    // OOD pool: draw |id_test| trials without replacement, or downsample the
    // ID test side when the OOD class is smaller (keeps the 1:1 ratio)
    let mut ood_pool: Vec<usize> = (0..dataset.n_trials)
        .filter(|&i| dataset.labels[i] as usize == ood_class)
        .collect();
    if ood_pool.is_empty() {
        return Err(HarnessError::OodClassEmpty(dataset.class_names[ood_class].clone()));
    }
    let mut ood_test_indices: Vec<usize> = if ood_pool.len() >= id_test_indices.len() {
        ood_pool.shuffle(&mut rng_from(mix(seed, TAG_OOD_PICK)));
        ood_pool.truncate(id_test_indices.len());
        ood_pool
    } else {
        id_test_indices.shuffle(&mut rng_from(mix(seed, TAG_ID_TRIM)));
        id_test_indices.truncate(ood_pool.len());
        ood_pool
    };

    // splits hold sorted trial indices; ordering inside a split carries no
    // information and sorting keeps reruns byte-comparable
    train_indices.sort_unstable();
    val_indices.sort_unstable();
    id_test_indices.sort_unstable();
    ood_test_indices.sort_unstable();
    let label_of = |i: usize| -> usize {
        id_classes.iter().position(|&c| c == dataset.labels[i] as usize).unwrap()
    };
    let train_labels: Vec<usize> = train_indices.iter().map(|&i| label_of(i)).collect();
    let val_labels: Vec<usize> = val_indices.iter().map(|&i| label_of(i)).collect();
    let id_test_labels: Vec<usize> = id_test_indices.iter().map(|&i| label_of(i)).collect();

    let raw_features =
        |indices: &[usize]| -> Vec<Vec<f64>> { indices.iter().map(|&i| dataset.trial_features(i)).collect() };
    let train_raw = raw_features(&train_indices);
    let normalizer = Normalizer::fit(&train_raw);

    let normalized = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter().map(|r| normalizer.apply(&r)).collect()
    };
    let train_x = normalized(train_raw);
    let val_x = normalized(raw_features(&val_indices));
    let id_test_x = normalized(raw_features(&id_test_indices));
    let ood_test = normalized(raw_features(&ood_test_indices));

    Ok(LocoCell {
        subject: dataset.subject.clone(),
        id_classes: id_classes.to_vec(),
        ood_class,
        train: train_x.into_iter().zip(train_labels).collect(),
        val: val_x.into_iter().zip(val_labels).collect(),
        id_test: id_test_x.into_iter().zip(id_test_labels).collect(),
        ood_test,
        normalizer,
        seed,
        train_indices,
        val_indices,
        id_test_indices,
        ood_test_indices,
    })
}
