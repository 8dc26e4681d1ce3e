//! Leave-one-class-out out-of-distribution detection benchmark engine.
//!
//! The crate trains a small dropout classifier per (subject, held-out-class)
//! experiment cell, scores the held-out class with seven uncertainty-based
//! OOD detectors (optionally after ReAct activation clamping), and evaluates
//! the results with rank statistics. Everything is deterministic under a
//! single master seed: cell seeds are stable hashes of the experiment
//! coordinates, so results do not depend on scheduling or worker count.
//!
//! Module map:
//! - [`data`]: synthetic dataset generation and the on-disk epoched format.
//! - [`nnkit`]: the feed-forward extractor (analytic gradients, Adam,
//!   spectral-normalized penultimate layer, early stopping).
//! - [`scorers`]: the seven OOD scoring methods plus ReAct.
//! - [`metrics`]: AUROC and nonparametric tests.
//! - [`harness`]: cell construction, first-subject tuning, experiment runs.

pub mod data;
pub mod diagnostics;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod nnkit;
pub mod scorers;
pub mod seed;

pub use data::{generate_synthetic, load_dataset, save_dataset, EpochedDataset, SynthConfig};
pub use harness::{
    build_loco_cell, run_experiment, stratified_split, ExperimentConfig, LocoCell, Method,
    ResultRow, RunOutcome,
};
pub use metrics::{auroc, holm_correction, kruskal_wallis, mann_whitney_u, spearman,
    wilcoxon_signed_rank, ScoredSample, TestResult};
pub use nnkit::{entropy, softmax, train_extractor, ExtractorConfig, ExtractorModel,
    ForwardMode, ForwardOutput};
pub use scorers::{
    fit_ddu, fit_dknn, fit_duq_head, react_fit, score_ddu, score_dknn, score_duq,
    score_energy, score_ensemble, score_mc_dropout, score_softmax, DknnIndex, DuqHead,
    DuqHyperparams, GdaModel, Pipeline, ReactState, ScorerConfig, SoftmaxBaseline,
};
