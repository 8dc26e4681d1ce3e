//! Feed-forward extractor with dropout and a spectral-normalized penultimate
//! layer.
//!
//! Architecture: flatten → linear(hidden) → relu → dropout →
//! spectral-normalized linear(embed) → relu → linear(logits). The post-relu
//! embed activations are the "penultimate embedding" consumed by the density
//! and distance scorers and by ReAct, so they are nonnegative by construction.
//!
//! Dropout is inverted: stochastic passes zero each hidden unit with
//! probability `dropout_p` and scale survivors by 1/(1−p), so deterministic
//! inference is the identity on surviving paths.

mod train;

pub use train::{train_extractor, TrainSchedule};
pub(crate) use train::{batch_loss_and_grads, AdamTensor, Grads, PlateauAction, PlateauSchedule};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, l2_norm, Mat};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, expected {want}")]
    InputShape { got: usize, want: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("empty vector")]
    EmptyVector,
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty {which} split")]
    EmptySplit { which: &'static str },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
}

/// Extractor dimensions, dropout rate and training schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub schedule: TrainSchedule,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_dim: 1,
            hidden_dim: 64,
            embed_dim: 32,
            n_classes: 2,
            dropout_p: 0.25,
            seed: 0,
            schedule: TrainSchedule::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(NnError::Config("all dimensions must be at least 1".into()));
        }
        if self.n_classes < 2 {
            return Err(NnError::Config("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(NnError::Config("dropout_p must lie in [0, 1)".into()));
        }
        self.schedule.validate()
    }
}

/// Logits plus the post-activation penultimate embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// Inference mode: deterministic (dropout is the identity) or stochastic
/// (dropout active, driven by a caller-owned rng).
pub enum ForwardMode<'a> {
    Deterministic,
    Stochastic(&'a mut ChaCha8Rng),
}

/// Power-iteration state for the penultimate weight's top singular value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

/// Trained (or freshly initialized) extractor. Immutable after training and
/// safe to share across threads; stochastic passes take an external rng.
#[derive(Debug, Clone)]
pub struct ExtractorModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// Raw penultimate weight; the effective weight is `w2 / spectral.sigma`.
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Mat,
    pub b3: Vec<f64>,
    pub spectral: SpectralState,
    pub training_log: Vec<EpochLog>,
}

pub(crate) struct ForwardTrace {
    pub a1: Vec<f64>,
    pub dropped: Vec<f64>,
    pub a2: Vec<f64>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ExtractorModel {
    /// Seeded He-normal initialization; spectral vectors settled with a few
    /// power iterations so even untrained forwards honour the norm bound.
    pub fn init(cfg: &ExtractorConfig, rng: &mut ChaCha8Rng) -> Result<Self, NnError> {
        cfg.validate()?;
        let mut normal_mat = |rows: usize, cols: usize, fan_in: usize| {
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut m = Mat::zeros(rows, cols);
            for v in &mut m.data {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * scale;
            }
            m
        };
        let w1 = normal_mat(cfg.hidden_dim, cfg.input_dim, cfg.input_dim);
        let w2 = normal_mat(cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim);
        let w3 = normal_mat(cfg.n_classes, cfg.embed_dim, cfg.embed_dim);
        let mut u: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..cfg.hidden_dim).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        normalize(&mut v);
        let sigma = power_iterate(&w2, &mut u, &mut v, 20);
        Ok(ExtractorModel {
            input_dim: cfg.input_dim,
            hidden_dim: cfg.hidden_dim,
            embed_dim: cfg.embed_dim,
            n_classes: cfg.n_classes,
            dropout_p: cfg.dropout_p,
            w1,
            b1: vec![0.0; cfg.hidden_dim],
            w2,
            b2: vec![0.0; cfg.embed_dim],
            w3,
            b3: vec![0.0; cfg.n_classes],
            spectral: SpectralState { u, v, sigma },
            training_log: Vec::new(),
        })
    }

    /// Forward pass. Stochastic mode zeroes each hidden unit independently
    /// with probability `dropout_p`, scaling survivors by 1/(1−p).
    pub fn forward(&self, x: &[f64], mode: ForwardMode) -> Result<ForwardOutput, NnError> {
        if x.len() != self.input_dim {
            return Err(NnError::InputShape { got: x.len(), want: self.input_dim });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        let scales = match mode {
            ForwardMode::Deterministic => None,
            ForwardMode::Stochastic(rng) => Some(self.sample_dropout_scales(rng)),
        };
        let trace = self.forward_trace(x, scales.as_deref(), self.inv_sigma());
        Ok(ForwardOutput { logits: trace.logits, embedding: trace.z })
    }

    /// Per-hidden-unit inverted-dropout scale factors (0 or 1/(1−p)).
    pub(crate) fn sample_dropout_scales(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let keep_scale = 1.0 / (1.0 - self.dropout_p);
        (0..self.hidden_dim)
            .map(|_| if rng.random::<f64>() < self.dropout_p { 0.0 } else { keep_scale })
            .collect()
    }

    pub(crate) fn forward_trace(
        &self,
        x: &[f64],
        drop_scales: Option<&[f64]>,
        inv_sigma: f64,
    ) -> ForwardTrace {
        let mut a1 = self.w1.matvec(x);
        for (a, b) in a1.iter_mut().zip(&self.b1) {
            *a += b;
        }
        let mut dropped: Vec<f64> = a1.iter().map(|&a| a.max(0.0)).collect();
        if let Some(scales) = drop_scales {
            for (h, s) in dropped.iter_mut().zip(scales) {
                *h *= s;
            }
        }
        let mut a2 = self.w2.matvec(&dropped);
        for (a, b) in a2.iter_mut().zip(&self.b2) {
            *a = *a * inv_sigma + b;
        }
        let z: Vec<f64> = a2.iter().map(|&a| a.max(0.0)).collect();
        let logits = self.logits_from_embedding(&z);
        ForwardTrace { a1, dropped, a2, z, logits }
    }

    /// Final linear layer only; used to recompute logits after ReAct clamping.
    pub fn logits_from_embedding(&self, z: &[f64]) -> Vec<f64> {
        let mut logits = self.w3.matvec(z);
        for (l, b) in logits.iter_mut().zip(&self.b3) {
            *l += b;
        }
        logits
    }

    /// 1/σ with the current power-iteration estimate (guarded near zero).
    pub(crate) fn inv_sigma(&self) -> f64 {
        1.0 / self.spectral.sigma.max(1e-12)
    }

    /// Recompute σ = uᵀ W₂ v from frozen power vectors; used so gradient
    /// checks and forwards agree on the same value.
    pub(crate) fn sigma_from_vectors(&self) -> f64 {
        dot(&self.spectral.u, &self.w2.matvec(&self.spectral.v))
    }

    pub fn architecture(&self) -> (usize, usize, usize, usize) {
        (self.input_dim, self.hidden_dim, self.embed_dim, self.n_classes)
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 1e-24 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Run `iters` power iterations on `w`, updating `u`, `v` in place, and
/// return the singular-value estimate uᵀ W v.
pub fn power_iterate(w: &Mat, u: &mut Vec<f64>, v: &mut Vec<f64>, iters: usize) -> f64 {
    for _ in 0..iters {
        let mut nv = w.matvec_t(u);
        normalize(&mut nv);
        *v = nv;
        let mut nu = w.matvec(v);
        normalize(&mut nu);
        *u = nu;
    }
    dot(u, &w.matvec(v))
}

/// Numerically stable softmax (max-subtracted). Entries sum to 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.is_empty() {
        return Err(NnError::EmptyVector);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats, with 0·ln 0 := 0.
pub fn entropy(p: &[f64]) -> Result<f64, NnError> {
    if p.is_empty() {
        return Err(NnError::EmptyVector);
    }
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(NnError::InvalidProbability("negative or non-finite entry".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NnError::InvalidProbability(format!("entries sum to {sum}, not 1")));
    }
    let h: f64 = p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum();
    Ok(h.max(0.0))
}
