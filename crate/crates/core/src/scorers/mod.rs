//! The seven OOD scoring methods plus ReAct activation clamping.
//!
//! Every scorer follows one sign convention: higher score means more likely
//! out-of-distribution. Fitted scorer states (GDA, DUQ head, d-KNN index,
//! ReAct clamp) are immutable after fitting; `score_*` functions are pure.
//!
//! [`Pipeline`] bundles a model with an optional [`ReactState`]. When ReAct
//! is active the penultimate embedding is clamped element-wise and logits are
//! recomputed through the final layer before any logit-based scoring, so the
//! clamp reaches every method.

mod dknn;
mod duq;
mod gda;
mod react;

pub use dknn::{fit_dknn, score_dknn, DknnIndex};
pub use duq::{fit_duq_head, score_duq, DuqHead, DuqHyperparams};
pub use gda::{fit_ddu, score_ddu, GdaModel};
pub use react::{react_fit, ReactState};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkit::{entropy, softmax, ExtractorModel, ForwardMode, ForwardOutput, NnError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid scorer configuration: {0}")]
    Config(String),
    #[error("vector has length {got}, expected {want}")]
    Dimension { got: usize, want: usize },
    #[error("class {class} has {got} samples, need at least {min}")]
    ClassTooSmall { class: usize, got: usize, min: usize },
    #[error("covariance for class {class} is not positive definite at any jitter level")]
    CovarianceSingular { class: usize },
    #[error("ensemble members have mismatched architectures")]
    ArchitectureMismatch,
    #[error("empty fit set")]
    EmptyFit,
    #[error("head training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
}

/// Statistic used by the softmax baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxBaseline {
    Entropy,
    OneMinusMax,
}

/// Shared scorer settings; defaults follow the benchmark protocol
/// (50 MC passes, 5 ensemble members, unit energy temperature, 90th
/// percentile ReAct clamp).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub mc_passes: usize,
    pub ensemble_size: usize,
    pub energy_temperature: f64,
    pub dknn_k: usize,
    pub react_percentile: f64,
    pub softmax_baseline: SoftmaxBaseline,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            mc_passes: 50,
            ensemble_size: 5,
            energy_temperature: 1.0,
            dknn_k: 10,
            react_percentile: 90.0,
            softmax_baseline: SoftmaxBaseline::Entropy,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.mc_passes == 0 {
            return Err(ScoreError::Config("mc_passes must be at least 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(ScoreError::Config("ensemble_size must be at least 1".into()));
        }
        if !(self.energy_temperature > 0.0) {
            return Err(ScoreError::Config("energy_temperature must be positive".into()));
        }
        if self.dknn_k == 0 {
            return Err(ScoreError::Config("dknn_k must be at least 1".into()));
        }
        if !(self.react_percentile > 0.0 && self.react_percentile <= 100.0) {
            return Err(ScoreError::Config("react_percentile must lie in (0, 100]".into()));
        }
        Ok(())
    }
}

/// A model plus optional ReAct clamp; the feature source for all scorers.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub model: &'a ExtractorModel,
    pub react: Option<&'a ReactState>,
}

impl<'a> Pipeline<'a> {
    pub fn plain(model: &'a ExtractorModel) -> Self {
        Pipeline { model, react: None }
    }

    pub fn with_react(model: &'a ExtractorModel, react: &'a ReactState) -> Self {
        Pipeline { model, react: Some(react) }
    }

    /// Embedding and logits for `x`; with ReAct the embedding is clamped and
    /// the logits recomputed from the clamped embedding.
    pub fn features(&self, x: &[f64], mode: ForwardMode) -> Result<ForwardOutput, ScoreError> {
        let out = self.model.forward(x, mode)?;
        Ok(match self.react {
            None => out,
            Some(state) => {
                let embedding = state.apply(&out.embedding);
                let logits = self.model.logits_from_embedding(&embedding);
                ForwardOutput { logits, embedding }
            }
        })
    }
}

/// Mean of probability vectors. Identical inputs short-circuit to the first
/// vector so degenerate averages (zero dropout, identical ensemble members)
/// reproduce the single-model score bit for bit.
fn mean_probs(all: &[Vec<f64>]) -> Vec<f64> {
    debug_assert!(!all.is_empty());
    if all.iter().all(|p| p == &all[0]) {
        return all[0].clone();
    }
    let n = all[0].len();
    let mut acc = vec![0.0; n];
    for p in all {
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let scale = 1.0 / all.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    acc
}

/// Softmax baseline: predictive entropy (default) or one minus max.
pub fn score_softmax(logits: &[f64], baseline: SoftmaxBaseline) -> Result<f64, ScoreError> {
    let p = softmax(logits)?;
    Ok(match baseline {
        SoftmaxBaseline::Entropy => entropy(&p)?,
        SoftmaxBaseline::OneMinusMax => 1.0 - p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Energy score: −T · log Σ exp(logit / T), max-shifted. Higher for OOD.
pub fn score_energy(logits: &[f64], temperature: f64) -> Result<f64, ScoreError> {
    if !(temperature > 0.0) {
        return Err(ScoreError::Config("temperature must be positive".into()));
    }
    if logits.is_empty() {
        return Err(ScoreError::Nn(NnError::EmptyVector));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::Nn(NnError::NonFiniteInput));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| ((l - max) / temperature).exp()).sum();
    Ok(-max - temperature * sum.ln())
}

/// MC Dropout: entropy of the mean softmax over `passes` stochastic passes.
pub fn score_mc_dropout(
    pipe: &Pipeline,
    x: &[f64],
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, ScoreError> {
    let probs = mc_mean_probs(pipe, x, passes, rng)?;
    Ok(entropy(&probs)?)
}

/// Mean softmax over stochastic passes (also the MC on-task probabilities).
pub fn mc_mean_probs(
    pipe: &Pipeline,
    x: &[f64],
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, ScoreError> {
    if passes == 0 {
        return Err(ScoreError::Config("mc_passes must be at least 1".into()));
    }
    let mut all = Vec::with_capacity(passes);
    for _ in 0..passes {
        let out = pipe.features(x, ForwardMode::Stochastic(rng))?;
        all.push(softmax(&out.logits)?);
    }
    Ok(mean_probs(&all))
}

/// Deep Ensemble: entropy of the mean softmax over deterministic passes of
/// the member models.
pub fn score_ensemble(pipes: &[Pipeline], x: &[f64]) -> Result<f64, ScoreError> {
    let probs = ensemble_mean_probs(pipes, x)?;
    Ok(entropy(&probs)?)
}

/// Mean member softmax (also the ensemble on-task probabilities).
pub fn ensemble_mean_probs(pipes: &[Pipeline], x: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if pipes.is_empty() {
        return Err(ScoreError::Config("ensemble needs at least 1 member".into()));
    }
    let arch = pipes[0].model.architecture();
    if pipes.iter().any(|p| p.model.architecture() != arch) {
        return Err(ScoreError::ArchitectureMismatch);
    }
    let mut all = Vec::with_capacity(pipes.len());
    for pipe in pipes {
        let out = pipe.features(x, ForwardMode::Deterministic)?;
        all.push(softmax(&out.logits)?);
    }
    Ok(mean_probs(&all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::ExtractorConfig;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn model(seed: u64, dropout_p: f64) -> ExtractorModel {
        let cfg = ExtractorConfig {
            input_dim: 4,
            hidden_dim: 6,
            embed_dim: 5,
            n_classes: 3,
            dropout_p,
            seed,
            ..Default::default()
        };
        ExtractorModel::init(&cfg, &mut rng_from(seed)).unwrap()
    }

    #[test]
    fn softmax_baseline_known_values() {
        let s = score_softmax(&[0.0, 0.0, 0.0], SoftmaxBaseline::Entropy).unwrap();
        assert_relative_eq!(s, 3.0f64.ln(), epsilon = 1e-12);
        let s = score_softmax(&[50.0, 0.0], SoftmaxBaseline::Entropy).unwrap();
        assert!(s < 1e-12, "near point mass, got {s}");
        // entropy of softmax([1,2,3]) recomputed with an independent
        // high-precision evaluation: 0.8323955818399389
        let s = score_softmax(&[1.0, 2.0, 3.0], SoftmaxBaseline::Entropy).unwrap();
        assert_relative_eq!(s, 0.8323955818399389, epsilon = 1e-10);
        let s = score_softmax(&[0.0, 0.0], SoftmaxBaseline::OneMinusMax).unwrap();
        assert_relative_eq!(s, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn energy_known_values() {
        assert_relative_eq!(
            score_energy(&[0.0, 0.0], 1.0).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            score_energy(&[1000.0, 1000.0], 1.0).unwrap(),
            -1000.0 - std::f64::consts::LN_2,
            epsilon = 1e-9
        );
        // −ln(e¹⁰ + 1) evaluated at high precision
        assert_relative_eq!(
            score_energy(&[10.0, 0.0], 1.0).unwrap(),
            -10.000045398899218,
            epsilon = 1e-6
        );
        assert!(score_energy(&[1.0], 0.0).is_err());
    }

    #[test]
    fn energy_shift_rule() {
        let mut rng = rng_from(3);
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let a = rng.random::<f64>() * 10.0 - 5.0;
            let shifted: Vec<f64> = v.iter().map(|x| x + a).collect();
            let e0 = score_energy(&v, 1.0).unwrap();
            let e1 = score_energy(&shifted, 1.0).unwrap();
            assert!((e1 - (e0 - a)).abs() < 1e-9, "shift rule violated: {e0} {e1} {a}");
        }
    }

    #[test]
    fn mc_dropout_with_zero_dropout_equals_softmax_entropy() {
        let m = model(4, 0.0);
        let pipe = Pipeline::plain(&m);
        let x = [0.3, -0.2, 0.8, 0.1];
        let logits = m.forward(&x, ForwardMode::Deterministic).unwrap().logits;
        let direct = score_softmax(&logits, SoftmaxBaseline::Entropy).unwrap();
        for passes in [1, 7, 50] {
            let mc = score_mc_dropout(&pipe, &x, passes, &mut rng_from(11)).unwrap();
            assert_eq!(mc, direct, "T = {passes}");
        }
    }

    #[test]
    fn mc_dropout_single_pass_is_one_stochastic_entropy() {
        let m = model(6, 0.5);
        let pipe = Pipeline::plain(&m);
        let x = [0.3, -0.2, 0.8, 0.1];
        let mc = score_mc_dropout(&pipe, &x, 1, &mut rng_from(21)).unwrap();
        let out = m.forward(&x, ForwardMode::Stochastic(&mut rng_from(21))).unwrap();
        let p = softmax(&out.logits).unwrap();
        assert_eq!(mc, entropy(&p).unwrap());
    }

    #[test]
    fn mc_dropout_matches_replayed_mean_of_recorded_passes() {
        // oracle: record the 50 probability vectors by replaying the rng
        // stream, average them independently, take the entropy
        let m = model(8, 0.33);
        let pipe = Pipeline::plain(&m);
        let x = [1.2, -0.7, 0.4, 0.9];
        let score = score_mc_dropout(&pipe, &x, 50, &mut rng_from(77)).unwrap();

        let mut rng = rng_from(77);
        let mut acc = vec![0.0; 3];
        for _ in 0..50 {
            let out = m.forward(&x, ForwardMode::Stochastic(&mut rng)).unwrap();
            let p = softmax(&out.logits).unwrap();
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= 50.0;
        }
        let expected = entropy(&acc).unwrap();
        assert_relative_eq!(score, expected, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_of_identical_members_equals_softmax() {
        let m = model(9, 0.2);
        let pipes = vec![Pipeline::plain(&m); 5];
        let x = [0.3, -0.2, 0.8, 0.1];
        let logits = m.forward(&x, ForwardMode::Deterministic).unwrap().logits;
        let direct = score_softmax(&logits, SoftmaxBaseline::Entropy).unwrap();
        assert_eq!(score_ensemble(&pipes, &x).unwrap(), direct);
    }

    #[test]
    fn ensemble_opposed_point_masses_give_ln_two() {
        // two members whose final biases force probabilities ≈ [1,0] / [0,1]
        let mut a = model(10, 0.0);
        let mut b = model(10, 0.0);
        a.w1.data.fill(0.0);
        b.w1.data.fill(0.0);
        a.b3 = vec![60.0, 0.0, -60.0];
        b.b3 = vec![0.0, 60.0, -60.0];
        let x = [0.0; 4];
        let pa = softmax(&a.forward(&x, ForwardMode::Deterministic).unwrap().logits).unwrap();
        assert!(pa[0] > 1.0 - 1e-12);
        let pipes = [Pipeline::plain(&a), Pipeline::plain(&b)];
        let s = score_ensemble(&pipes, &x).unwrap();
        assert_relative_eq!(s, std::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn ensemble_matches_member_export_oracle() {
        let models: Vec<ExtractorModel> = (0..5).map(|i| model(20 + i, 0.0)).collect();
        let pipes: Vec<Pipeline> = models.iter().map(Pipeline::plain).collect();
        let x = [0.5, 0.1, -0.3, 0.2];
        let score = score_ensemble(&pipes, &x).unwrap();

        let mut acc = vec![0.0; 3];
        for m in &models {
            let p = softmax(&m.forward(&x, ForwardMode::Deterministic).unwrap().logits).unwrap();
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= 5.0;
        }
        assert_relative_eq!(score, entropy(&acc).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn ensemble_rejects_mismatched_architectures() {
        let a = model(1, 0.0);
        let cfg = ExtractorConfig {
            input_dim: 4,
            hidden_dim: 6,
            embed_dim: 7, // differs
            n_classes: 3,
            dropout_p: 0.0,
            seed: 2,
            ..Default::default()
        };
        let b = ExtractorModel::init(&cfg, &mut rng_from(2)).unwrap();
        let pipes = [Pipeline::plain(&a), Pipeline::plain(&b)];
        assert!(matches!(
            score_ensemble(&pipes, &[0.0; 4]),
            Err(ScoreError::ArchitectureMismatch)
        ));
    }

    #[test]
    fn react_with_infinite_clamp_is_bitwise_noop() {
        let m = model(30, 0.4);
        let unbounded = ReactState::unbounded();
        let plain = Pipeline::plain(&m);
        let clamped = Pipeline::with_react(&m, &unbounded);
        let x = [0.4, -1.0, 2.0, 0.3];

        let a = plain.features(&x, ForwardMode::Deterministic).unwrap();
        let b = clamped.features(&x, ForwardMode::Deterministic).unwrap();
        assert_eq!(a, b);

        let sa = score_mc_dropout(&plain, &x, 13, &mut rng_from(5)).unwrap();
        let sb = score_mc_dropout(&clamped, &x, 13, &mut rng_from(5)).unwrap();
        assert_eq!(sa.to_bits(), sb.to_bits());
    }
}
