//! Extractor training: Adam on shuffled mini-batches, validation-loss early
//! stopping with learning-rate halving, one spectral-norm power iteration per
//! optimisation step, best-validation weights restored at the end.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{power_iterate, ExtractorConfig, ExtractorModel, NnError};
use crate::linalg::{axpy, Mat};
use crate::seed::rng_from;

/// Optimisation schedule shared by the extractor and the DUQ head.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub es_patience: usize,
    pub lr_patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            es_patience: 20,
            lr_patience: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.learning_rate > 0.0) {
            return Err(NnError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NnError::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.es_patience == 0 || self.lr_patience == 0 {
            return Err(NnError::Config("patience values must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NnError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(NnError::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients mirroring the extractor's parameter tensors.
pub(crate) struct Grads {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Mat,
    pub b3: Vec<f64>,
}

impl Grads {
    fn zeros_like(m: &ExtractorModel) -> Self {
        Grads {
            w1: Mat::zeros(m.w1.rows, m.w1.cols),
            b1: vec![0.0; m.b1.len()],
            w2: Mat::zeros(m.w2.rows, m.w2.cols),
            b2: vec![0.0; m.b2.len()],
            w3: Mat::zeros(m.w3.rows, m.w3.cols),
            b3: vec![0.0; m.b3.len()],
        }
    }
}

/// Numerically stable softmax for training internals; propagates non-finite
/// values instead of erroring so divergence surfaces as a non-finite loss.
fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy over a batch plus exact gradients.
///
/// The spectral scale σ = uᵀ W₂ v is recomputed from the frozen power vectors
/// so the gradient of the normalization (including the −⟨G, W₂/σ⟩ u vᵀ term)
/// matches finite differences of this same function.
pub(crate) fn batch_loss_and_grads(
    model: &ExtractorModel,
    xs: &[&[f64]],
    ys: &[usize],
    drop_scales: Option<&[Vec<f64>]>,
) -> (f64, Grads) {
    let batch = xs.len();
    debug_assert_eq!(batch, ys.len());
    let sigma = model.sigma_from_vectors();
    let inv_sigma = 1.0 / sigma.max(1e-12);

    let mut grads = Grads::zeros_like(model);
    let mut g2sn = Mat::zeros(model.w2.rows, model.w2.cols);
    let mut loss = 0.0;

    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let scales = drop_scales.map(|m| m[i].as_slice());
        let trace = model.forward_trace(x, scales, inv_sigma);
        let p = softmax_raw(&trace.logits);
        loss += -p[y].ln();

        // d loss / d logits = p − onehot(y)
        let mut dlogits = p;
        dlogits[y] -= 1.0;

        grads.w3.add_outer(1.0, &dlogits, &trace.z);
        axpy(&mut grads.b3, 1.0, &dlogits);
        let dz = model.w3.matvec_t(&dlogits);

        let da2: Vec<f64> =
            dz.iter().zip(&trace.a2).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect();
        g2sn.add_outer(1.0, &da2, &trace.dropped);
        axpy(&mut grads.b2, 1.0, &da2);

        let mut dh = model.w2.matvec_t(&da2);
        for v in &mut dh {
            *v *= inv_sigma;
        }
        if let Some(s) = scales {
            for (v, &sc) in dh.iter_mut().zip(s) {
                *v *= sc;
            }
        }
        let da1: Vec<f64> =
            dh.iter().zip(&trace.a1).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect();
        grads.w1.add_outer(1.0, &da1, x);
        axpy(&mut grads.b1, 1.0, &da1);
    }

    // Chain rule through W₂/σ with σ = uᵀ W₂ v (u, v frozen):
    //   dL/dW₂ = (G − ⟨G, W₂/σ⟩ u vᵀ) / σ
    let coupling = g2sn.frob_dot(&model.w2) * inv_sigma;
    grads.w2 = g2sn;
    grads.w2.add_outer(-coupling, &model.spectral.u, &model.spectral.v);
    for v in &mut grads.w2.data {
        *v *= inv_sigma;
    }

    let scale = 1.0 / batch as f64;
    loss *= scale;
    for tensor in [
        &mut grads.w1.data,
        &mut grads.b1,
        &mut grads.w2.data,
        &mut grads.b2,
        &mut grads.w3.data,
        &mut grads.b3,
    ] {
        for v in tensor.iter_mut() {
            *v *= scale;
        }
    }
    (loss, grads)
}

pub(crate) struct AdamTensor {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamTensor {
    pub(crate) fn new(len: usize) -> Self {
        AdamTensor { m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub(crate) fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        sched: &TrainSchedule,
        t: u64,
    ) {
        let b1 = sched.adam_beta1;
        let b2 = sched.adam_beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + sched.adam_eps);
        }
    }
}

pub(crate) struct Adam {
    t: u64,
    tensors: Vec<AdamTensor>,
}

impl Adam {
    pub(crate) fn new(model: &ExtractorModel) -> Self {
        Adam {
            t: 0,
            tensors: vec![
                AdamTensor::new(model.w1.data.len()),
                AdamTensor::new(model.b1.len()),
                AdamTensor::new(model.w2.data.len()),
                AdamTensor::new(model.b2.len()),
                AdamTensor::new(model.w3.data.len()),
                AdamTensor::new(model.b3.len()),
            ],
        }
    }

    pub(crate) fn step(
        &mut self,
        model: &mut ExtractorModel,
        grads: &Grads,
        lr: f64,
        sched: &TrainSchedule,
    ) {
        self.t += 1;
        let t = self.t;
        self.tensors[0].step(&mut model.w1.data, &grads.w1.data, lr, sched, t);
        self.tensors[1].step(&mut model.b1, &grads.b1, lr, sched, t);
        self.tensors[2].step(&mut model.w2.data, &grads.w2.data, lr, sched, t);
        self.tensors[3].step(&mut model.b2, &grads.b2, lr, sched, t);
        self.tensors[4].step(&mut model.w3.data, &grads.w3.data, lr, sched, t);
        self.tensors[5].step(&mut model.b3, &grads.b3, lr, sched, t);
    }
}

pub(crate) enum PlateauAction {
    Improved,
    Continue,
    HalveLr,
    Stop,
}

/// Early-stopping and learning-rate plateau bookkeeping. Counters reset on
/// improvement; the lr counter also resets after each halving.
pub(crate) struct PlateauSchedule {
    best: f64,
    since_improve: usize,
    since_lr: usize,
    es_patience: usize,
    lr_patience: usize,
}

impl PlateauSchedule {
    pub(crate) fn new(es_patience: usize, lr_patience: usize) -> Self {
        PlateauSchedule {
            best: f64::INFINITY,
            since_improve: 0,
            since_lr: 0,
            es_patience,
            lr_patience,
        }
    }

    #[cfg(test)]
    pub(crate) fn best(&self) -> f64 {
        self.best
    }

    pub(crate) fn observe(&mut self, val_loss: f64) -> PlateauAction {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_improve = 0;
            self.since_lr = 0;
            return PlateauAction::Improved;
        }
        self.since_improve += 1;
        self.since_lr += 1;
        if self.since_improve >= self.es_patience {
            PlateauAction::Stop
        } else if self.since_lr >= self.lr_patience {
            self.since_lr = 0;
            PlateauAction::HalveLr
        } else {
            PlateauAction::Continue
        }
    }
}

fn validate_samples(
    samples: &[(Vec<f64>, usize)],
    which: &'static str,
    cfg: &ExtractorConfig,
) -> Result<(), NnError> {
    if samples.is_empty() {
        return Err(NnError::EmptySplit { which });
    }
    for (x, y) in samples {
        if x.len() != cfg.input_dim {
            return Err(NnError::InputShape { got: x.len(), want: cfg.input_dim });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        if *y >= cfg.n_classes {
            return Err(NnError::Config(format!(
                "label {y} out of range for {} classes",
                cfg.n_classes
            )));
        }
    }
    Ok(())
}

fn mean_ce(model: &ExtractorModel, samples: &[(Vec<f64>, usize)]) -> f64 {
    let inv_sigma = model.inv_sigma();
    let mut loss = 0.0;
    for (x, y) in samples {
        let trace = model.forward_trace(x, None, inv_sigma);
        let p = softmax_raw(&trace.logits);
        loss += -p[*y].ln();
    }
    loss / samples.len() as f64
}

/// Train the extractor on shuffled mini-batches, minimizing mean
/// cross-entropy with Adam. Returns the weights of the epoch with minimum
/// validation loss.
pub fn train_extractor(
    train: &[(Vec<f64>, usize)],
    val: &[(Vec<f64>, usize)],
    cfg: &ExtractorConfig,
) -> Result<ExtractorModel, NnError> {
    cfg.validate()?;
    validate_samples(train, "train", cfg)?;
    validate_samples(val, "validation", cfg)?;

    let sched = &cfg.schedule;
    let mut rng = rng_from(cfg.seed);
    let mut model = ExtractorModel::init(cfg, &mut rng)?;
    let mut adam = Adam::new(&model);
    let mut plateau = PlateauSchedule::new(sched.es_patience, sched.lr_patience);
    let mut lr = sched.learning_rate;
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=sched.max_epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in indices.chunks(sched.batch_size) {
            let sigma =
                power_iterate(&model.w2, &mut model.spectral.u, &mut model.spectral.v, 1);
            model.spectral.sigma = sigma;

            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train[i].0.as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let masks: Option<Vec<Vec<f64>>> = if cfg.dropout_p > 0.0 {
                Some(chunk.iter().map(|_| model.sample_dropout_scales(&mut rng)).collect())
            } else {
                None
            };
            let (loss, grads) = batch_loss_and_grads(&model, &xs, &ys, masks.as_deref());
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            adam.step(&mut model, &grads, lr, sched);
            epoch_loss += loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = mean_ce(&model, val);
        if !val_loss.is_finite() {
            return Err(NnError::Diverged { epoch });
        }
        log.push(EpochLogEntry { epoch, train_loss, val_loss, lr });

        match plateau.observe(val_loss) {
            PlateauAction::Improved => {
                best = model.clone();
            }
            PlateauAction::HalveLr => lr *= 0.5,
            PlateauAction::Stop => break,
            PlateauAction::Continue => {}
        }
    }

    let mut result = best;
    result.training_log = log
        .into_iter()
        .map(|e| super::EpochLog {
            epoch: e.epoch,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
            learning_rate: e.lr,
        })
        .collect();
    // Converge the spectral estimate on the restored weights so the stored
    // effective weight meets the unit-norm bound.
    let sigma = power_iterate(
        &result.w2,
        &mut result.spectral.u,
        &mut result.spectral.v,
        200,
    );
    result.spectral.sigma = sigma;
    Ok(result)
}

struct EpochLogEntry {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    lr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::ForwardMode;
    use crate::seed::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_cfg() -> ExtractorConfig {
        ExtractorConfig {
            input_dim: 5,
            hidden_dim: 6,
            embed_dim: 4,
            n_classes: 3,
            dropout_p: 0.4,
            seed: 21,
            ..Default::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences_deterministic() {
        let check = crate::diagnostics::extractor_gradient_check(21, false);
        assert!(
            check.worst_rel_error < 1e-5,
            "worst relative error {}",
            check.worst_rel_error
        );
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout_mask() {
        let check = crate::diagnostics::extractor_gradient_check(21, true);
        assert!(
            check.worst_rel_error < 1e-5,
            "worst relative error {}",
            check.worst_rel_error
        );
    }

    #[test]
    fn plateau_stops_after_patience_exhausted() {
        // strictly increasing validation loss from the start: stop at
        // epoch 1 + es_patience
        let mut sched = PlateauSchedule::new(20, 5);
        let mut epochs = 0;
        for e in 1..=1000 {
            epochs = e;
            if matches!(sched.observe(1.0 + e as f64 * 0.1), PlateauAction::Stop) {
                break;
            }
        }
        assert_eq!(epochs, 21);
    }

    #[test]
    fn plateau_halves_between_improvements() {
        let mut sched = PlateauSchedule::new(20, 5);
        assert!(matches!(sched.observe(1.0), PlateauAction::Improved));
        let mut halvings = 0;
        for _ in 0..19 {
            if matches!(sched.observe(2.0), PlateauAction::HalveLr) {
                halvings += 1;
            }
        }
        assert_eq!(halvings, 3); // at 5, 10, 15 epochs without improvement
        assert!(matches!(sched.observe(2.0), PlateauAction::Stop));
        assert_eq!(sched.best(), 1.0);
    }

    fn separable_toy(seed: u64) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
        // two 2-D gaussian clusters 10 units apart, 100 points each
        let mut rng = rng_from(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { [-5.0, 0.0] } else { [5.0, 0.0] };
            for i in 0..100 {
                let x = vec![
                    center[0] + rng.sample::<f64, _>(StandardNormal),
                    center[1] + rng.sample::<f64, _>(StandardNormal),
                ];
                if i < 80 {
                    train.push((x, class));
                } else {
                    val.push((x, class));
                }
            }
        }
        (train, val)
    }

    #[test]
    fn linearly_separable_toy_reaches_high_accuracy() {
        let (train, val) = separable_toy(5);
        let cfg = ExtractorConfig {
            input_dim: 2,
            hidden_dim: 16,
            embed_dim: 8,
            n_classes: 2,
            dropout_p: 0.1,
            seed: 1,
            schedule: TrainSchedule { max_epochs: 60, ..Default::default() },
        };
        let model = train_extractor(&train, &val, &cfg).unwrap();
        let correct = train
            .iter()
            .filter(|(x, y)| {
                let out = model.forward(x, ForwardMode::Deterministic).unwrap();
                let pred = out
                    .logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                pred == *y
            })
            .count();
        let acc = correct as f64 / train.len() as f64;
        assert!(acc >= 0.95, "train accuracy {acc}");
        // best-epoch weights restored: stored val loss minimum matches log
        let min_val =
            model.training_log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(min_val.is_finite());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (train, val) = separable_toy(9);
        let cfg = ExtractorConfig {
            input_dim: 2,
            hidden_dim: 8,
            embed_dim: 4,
            n_classes: 2,
            dropout_p: 0.25,
            seed: 33,
            schedule: TrainSchedule { max_epochs: 12, ..Default::default() },
        };
        let a = train_extractor(&train, &val, &cfg).unwrap();
        let b = train_extractor(&train, &val, &cfg).unwrap();
        let bits = |m: &ExtractorModel| -> Vec<u64> {
            m.w1.data
                .iter()
                .chain(&m.b1)
                .chain(&m.w2.data)
                .chain(&m.b2)
                .chain(&m.w3.data)
                .chain(&m.b3)
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn spectral_norm_bound_holds_after_training() {
        let (train, val) = separable_toy(13);
        let cfg = ExtractorConfig {
            input_dim: 2,
            hidden_dim: 10,
            embed_dim: 6,
            n_classes: 2,
            dropout_p: 0.0,
            seed: 2,
            schedule: TrainSchedule { max_epochs: 30, ..Default::default() },
        };
        let model = train_extractor(&train, &val, &cfg).unwrap();
        let na = nalgebra::DMatrix::from_row_slice(
            model.w2.rows,
            model.w2.cols,
            &model.w2.data,
        );
        let top = na.svd(false, false).singular_values[0];
        let effective = top / model.spectral.sigma;
        assert!(effective <= 1.0 + 1e-3, "effective top singular value {effective}");
        assert!(effective >= 1.0 - 1e-3, "estimate should be tight, got {effective}");
    }

    #[test]
    fn conflicting_labels_with_huge_lr_diverge() {
        let train = vec![
            (vec![1000.0, -1000.0], 0),
            (vec![1000.0, -1000.0], 1),
            (vec![-1000.0, 1000.0], 0),
            (vec![-1000.0, 1000.0], 1),
        ];
        let cfg = ExtractorConfig {
            input_dim: 2,
            hidden_dim: 4,
            embed_dim: 4,
            n_classes: 2,
            dropout_p: 0.0,
            seed: 0,
            schedule: TrainSchedule {
                learning_rate: 1e12,
                max_epochs: 50,
                ..Default::default()
            },
        };
        match train_extractor(&train, &train, &cfg) {
            Err(NnError::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_splits_are_configuration_errors() {
        let cfg = tiny_cfg();
        let sample = vec![(vec![0.0; 5], 0usize)];
        assert!(matches!(
            train_extractor(&[], &sample, &cfg),
            Err(NnError::EmptySplit { which: "train" })
        ));
        assert!(matches!(
            train_extractor(&sample, &[], &cfg),
            Err(NnError::EmptySplit { which: "validation" })
        ));
    }
}
