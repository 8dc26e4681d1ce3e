//! Deterministic Uncertainty Quantification: a per-class RBF head trained on
//! frozen embeddings.
//!
//! Class kernels K_c(z) = exp(−‖W_c z − e_c‖² / (2·m·σ_c²)) with m the
//! centroid size and a learnable per-class length scale σ_c (stored as
//! log σ). Centroids e_c = m_c / N_c are exponential moving averages of the
//! projected embeddings and are treated as constants by the loss. The loss is
//! the summed one-vs-all binary cross-entropy plus a two-sided gradient
//! penalty on ∇_z Σ_c K_c(z) with target norm 1.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ScoreError;
use crate::linalg::{dot, Mat};
use crate::nnkit::{AdamTensor, PlateauAction, PlateauSchedule, TrainSchedule};
use crate::seed::rng_from;

const SIGMA_INIT: f64 = 0.1;
const SIGMA_FLOOR: f64 = 1e-4;
const BCE_EPS: f64 = 1e-12;

/// Search-space coordinates for one DUQ fit. `gamma` is the EMA factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuqHyperparams {
    pub gamma: f64,
    pub centroid_size: usize,
    pub gradient_penalty: f64,
}

impl DuqHyperparams {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ScoreError::Config("gamma must lie in (0, 1]".into()));
        }
        if self.centroid_size == 0 {
            return Err(ScoreError::Config("centroid_size must be at least 1".into()));
        }
        if !(self.gradient_penalty >= 0.0 && self.gradient_penalty.is_finite()) {
            return Err(ScoreError::Config("gradient_penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Fitted (or initialized) DUQ head.
#[derive(Debug, Clone)]
pub struct DuqHead {
    pub hp: DuqHyperparams,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Per-class projection, centroid_size × embed_dim.
    pub weights: Vec<Mat>,
    /// Per-class log σ; σ is clamped at 1e-4 from below during training.
    pub log_sigmas: Vec<f64>,
    /// EMA sample counts N_c.
    pub ema_counts: Vec<f64>,
    /// EMA projected-embedding sums m_c; centroid e_c = m_c / N_c.
    pub ema_sums: Vec<Vec<f64>>,
    /// Number of times the σ floor clamp fired during training.
    pub sigma_clamp_warnings: usize,
}

pub(crate) struct DuqGrads {
    weights: Vec<Mat>,
    log_sigmas: Vec<f64>,
}

impl DuqGrads {
    pub(crate) fn weight(&self, class: usize) -> &[f64] {
        &self.weights[class].data
    }

    pub(crate) fn log_sigma(&self, class: usize) -> f64 {
        self.log_sigmas[class]
    }
}

impl DuqHead {
    pub fn new(
        embed_dim: usize,
        n_classes: usize,
        hp: &DuqHyperparams,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self, ScoreError> {
        hp.validate()?;
        if embed_dim == 0 {
            return Err(ScoreError::Config("embed_dim must be at least 1".into()));
        }
        if n_classes < 2 {
            return Err(ScoreError::Config("need at least 2 classes".into()));
        }
        let scale = (1.0 / embed_dim as f64).sqrt();
        let weights = (0..n_classes)
            .map(|_| {
                let mut w = Mat::zeros(hp.centroid_size, embed_dim);
                for v in &mut w.data {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z * scale;
                }
                w
            })
            .collect();
        let ema_sums = (0..n_classes)
            .map(|_| {
                (0..hp.centroid_size)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.05)
                    .collect()
            })
            .collect();
        Ok(DuqHead {
            hp: hp.clone(),
            embed_dim,
            n_classes,
            weights,
            log_sigmas: vec![SIGMA_INIT.ln(); n_classes],
            ema_counts: vec![1.0; n_classes],
            ema_sums,
            sigma_clamp_warnings: 0,
        })
    }

    pub fn centroid(&self, class: usize) -> Vec<f64> {
        self.ema_sums[class].iter().map(|m| m / self.ema_counts[class]).collect()
    }

    /// 2·m·σ_c² appears as the kernel denominator; this is m·σ_c².
    fn length_scale(&self, class: usize) -> f64 {
        self.hp.centroid_size as f64 * (2.0 * self.log_sigmas[class]).exp()
    }

    /// Kernel values K_c(z) for every class; each lies in (0, 1].
    pub fn kernels(&self, z: &[f64]) -> Result<Vec<f64>, ScoreError> {
        if z.len() != self.embed_dim {
            return Err(ScoreError::Dimension { got: z.len(), want: self.embed_dim });
        }
        Ok((0..self.n_classes)
            .map(|c| {
                let e = self.centroid(c);
                let r: Vec<f64> =
                    self.weights[c].matvec(z).iter().zip(&e).map(|(a, b)| a - b).collect();
                (-dot(&r, &r) / (2.0 * self.length_scale(c))).exp()
            })
            .collect())
    }

    /// One EMA step over a batch: N_c ← γN_c + (1−γ)|batch_c| and
    /// m_c ← γm_c + (1−γ)·Σ W_c z_i over the batch members of class c.
    pub fn ema_update(&mut self, embeddings: &[&[f64]], labels: &[usize]) {
        let gamma = self.hp.gamma;
        for c in 0..self.n_classes {
            let mut count = 0.0;
            let mut sum = vec![0.0; self.hp.centroid_size];
            for (&z, &y) in embeddings.iter().zip(labels) {
                if y == c {
                    count += 1.0;
                    for (s, v) in sum.iter_mut().zip(self.weights[c].matvec(z)) {
                        *s += v;
                    }
                }
            }
            self.ema_counts[c] = gamma * self.ema_counts[c] + (1.0 - gamma) * count;
            for (m, s) in self.ema_sums[c].iter_mut().zip(sum) {
                *m = gamma * *m + (1.0 - gamma) * s;
            }
        }
    }

    /// Mean loss over a batch (summed one-vs-all BCE plus gradient penalty)
    /// with exact gradients for W_c and log σ_c. Centroids are constants.
    pub(crate) fn loss_and_grads(&self, zs: &[&[f64]], ys: &[usize]) -> (f64, DuqGrads) {
        let batch = zs.len();
        let lambda = self.hp.gradient_penalty;
        let centroids: Vec<Vec<f64>> = (0..self.n_classes).map(|c| self.centroid(c)).collect();
        let scales: Vec<f64> = (0..self.n_classes).map(|c| self.length_scale(c)).collect();

        let mut loss = 0.0;
        let mut grads = DuqGrads {
            weights: self
                .weights
                .iter()
                .map(|w| Mat::zeros(w.rows, w.cols))
                .collect(),
            log_sigmas: vec![0.0; self.n_classes],
        };

        for (&z, &y) in zs.iter().zip(ys) {
            // per-class forward pieces
            let mut rs = Vec::with_capacity(self.n_classes);
            let mut ds = Vec::with_capacity(self.n_classes);
            let mut ks = Vec::with_capacity(self.n_classes);
            let mut wt_rs = Vec::with_capacity(self.n_classes);
            for c in 0..self.n_classes {
                let r: Vec<f64> = self.weights[c]
                    .matvec(z)
                    .iter()
                    .zip(&centroids[c])
                    .map(|(a, b)| a - b)
                    .collect();
                let d = dot(&r, &r);
                let k = (-d / (2.0 * scales[c])).exp();
                wt_rs.push(self.weights[c].matvec_t(&r));
                rs.push(r);
                ds.push(d);
                ks.push(k);
            }

            // ∇_z Σ_c K_c  =  Σ_c −(K_c/s_c)·W_cᵀ r_c
            let mut g = vec![0.0; self.embed_dim];
            for c in 0..self.n_classes {
                let alpha = ks[c] / scales[c];
                for (gj, wj) in g.iter_mut().zip(&wt_rs[c]) {
                    *gj -= alpha * wj;
                }
            }
            let g_norm_sq = dot(&g, &g);
            loss += lambda * (g_norm_sq - 1.0) * (g_norm_sq - 1.0);
            let penalty_factor = 4.0 * lambda * (g_norm_sq - 1.0);

            for c in 0..self.n_classes {
                let (k, d, s) = (ks[c], ds[c], scales[c]);
                let target = if y == c { 1.0 } else { 0.0 };
                let k_clamped = k.clamp(BCE_EPS, 1.0 - BCE_EPS);
                loss += -(target * k_clamped.ln() + (1.0 - target) * (1.0 - k_clamped).ln());

                // BCE gradient through K (zero where the clamp is active)
                let dloss_dk = if k > BCE_EPS && k < 1.0 - BCE_EPS {
                    -target / k_clamped + (1.0 - target) / (1.0 - k_clamped)
                } else {
                    0.0
                };
                if dloss_dk != 0.0 {
                    // dK/dW = −(K/s)·r zᵀ, dK/dlogσ = K·D/s
                    grads.weights[c].add_outer(-dloss_dk * k / s, &rs[c], z);
                    grads.log_sigmas[c] += dloss_dk * k * d / s;
                }

                if penalty_factor != 0.0 {
                    let alpha = k / s;
                    let wg = self.weights[c].matvec(&g);
                    let g_wt_r = dot(&wg, &rs[c]); // gᵀ W_cᵀ r_c
                    // d‖g‖²/dW_c contracted with g (see module docs):
                    //   (K/s²)(gᵀWᵀr)·r zᵀ − (K/s)·r gᵀ − (K/s)·(W g) zᵀ
                    grads.weights[c].add_outer(penalty_factor * k / (s * s) * g_wt_r, &rs[c], z);
                    grads.weights[c].add_outer(-penalty_factor * alpha, &rs[c], &g);
                    grads.weights[c].add_outer(-penalty_factor * alpha, &wg, z);
                    // dg_c/dlogσ = −K(D−2s)/s²·Wᵀr, contracted with g
                    grads.log_sigmas[c] +=
                        penalty_factor * (-k * (d - 2.0 * s) / (s * s)) * g_wt_r;
                }
            }
        }

        let scale = 1.0 / batch as f64;
        loss *= scale;
        for w in &mut grads.weights {
            for v in &mut w.data {
                *v *= scale;
            }
        }
        for v in &mut grads.log_sigmas {
            *v *= scale;
        }
        (loss, grads)
    }
}

fn validate_embeddings(
    samples: &[(Vec<f64>, usize)],
    which: &'static str,
    embed_dim: usize,
    n_classes: usize,
) -> Result<(), ScoreError> {
    if samples.is_empty() {
        return Err(ScoreError::Config(format!("empty {which} set")));
    }
    for (z, y) in samples {
        if z.len() != embed_dim {
            return Err(ScoreError::Dimension { got: z.len(), want: embed_dim });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ScoreError::Config("non-finite embedding".into()));
        }
        if *y >= n_classes {
            return Err(ScoreError::Config(format!("label {y} out of range")));
        }
    }
    Ok(())
}

/// Train a DUQ head on frozen embeddings with the shared plateau schedule
/// (Adam, lr halving, early stopping, best-validation weights restored).
pub fn fit_duq_head(
    train: &[(Vec<f64>, usize)],
    val: &[(Vec<f64>, usize)],
    n_classes: usize,
    hp: &DuqHyperparams,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<DuqHead, ScoreError> {
    schedule.validate().map_err(ScoreError::Nn)?;
    if train.is_empty() {
        return Err(ScoreError::EmptyFit);
    }
    let embed_dim = train[0].0.len();
    validate_embeddings(train, "train", embed_dim, n_classes)?;
    validate_embeddings(val, "validation", embed_dim, n_classes)?;

    let mut rng = rng_from(seed);
    let mut head = DuqHead::new(embed_dim, n_classes, hp, &mut rng)?;
    let mut adam: Vec<AdamTensor> = head
        .weights
        .iter()
        .map(|w| AdamTensor::new(w.data.len()))
        .chain(std::iter::once(AdamTensor::new(n_classes)))
        .collect();
    let mut t = 0u64;
    let mut lr = schedule.learning_rate;
    let mut plateau = PlateauSchedule::new(schedule.es_patience, schedule.lr_patience);
    let mut best = head.clone();
    let mut warnings = 0usize;
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let sigma_floor_log = SIGMA_FLOOR.ln();

    for epoch in 1..=schedule.max_epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(schedule.batch_size) {
            let zs: Vec<&[f64]> = chunk.iter().map(|&i| train[i].0.as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let (loss, grads) = head.loss_and_grads(&zs, &ys);
            if !loss.is_finite() {
                return Err(ScoreError::Diverged { epoch });
            }
            t += 1;
            for (c, g) in grads.weights.iter().enumerate() {
                adam[c].step(&mut head.weights[c].data, &g.data, lr, schedule, t);
            }
            let last = adam.len() - 1;
            adam[last].step(&mut head.log_sigmas, &grads.log_sigmas, lr, schedule, t);
            for l in &mut head.log_sigmas {
                if *l < sigma_floor_log {
                    *l = sigma_floor_log;
                    warnings += 1;
                }
            }
            head.ema_update(&zs, &ys);
        }

        let val_zs: Vec<&[f64]> = val.iter().map(|(z, _)| z.as_slice()).collect();
        let val_ys: Vec<usize> = val.iter().map(|(_, y)| *y).collect();
        let (val_loss, _) = head.loss_and_grads(&val_zs, &val_ys);
        if !val_loss.is_finite() {
            return Err(ScoreError::Diverged { epoch });
        }
        match plateau.observe(val_loss) {
            PlateauAction::Improved => best = head.clone(),
            PlateauAction::HalveLr => lr *= 0.5,
            PlateauAction::Stop => break,
            PlateauAction::Continue => {}
        }
    }

    best.sigma_clamp_warnings = warnings;
    Ok(best)
}

/// DUQ score: −max_c K_c(z). Higher ⇒ more OOD; range [−1, 0).
pub fn score_duq(head: &DuqHead, z: &[f64]) -> Result<f64, ScoreError> {
    let kernels = head.kernels(z)?;
    Ok(-kernels.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn hp(gamma: f64, penalty: f64) -> DuqHyperparams {
        DuqHyperparams { gamma, centroid_size: 6, gradient_penalty: penalty }
    }

    fn random_head(seed: u64, penalty: f64) -> DuqHead {
        let mut head = DuqHead::new(4, 3, &hp(0.99, penalty), &mut rng_from(seed)).unwrap();
        // widen the length scales so kernels sit in a healthy range
        head.log_sigmas = vec![0.6f64.ln(); 3];
        head
    }

    fn random_embeddings(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rng_from(seed);
        let zs = (0..n)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let ys = (0..n).map(|_| rng.random_range(0..3)).collect();
        (zs, ys)
    }

    #[test]
    fn gamma_one_freezes_centroids() {
        let mut head = DuqHead::new(4, 3, &hp(1.0, 0.0), &mut rng_from(1)).unwrap();
        let before: Vec<Vec<f64>> = (0..3).map(|c| head.centroid(c)).collect();
        let (zs, ys) = random_embeddings(10, 2);
        let refs: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
        head.ema_update(&refs, &ys);
        head.ema_update(&refs, &ys);
        let after: Vec<Vec<f64>> = (0..3).map(|c| head.centroid(c)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_ema_step_matches_hand_arithmetic() {
        let mut head = DuqHead::new(2, 2, &hp(0.999, 0.0), &mut rng_from(3)).unwrap();
        head.weights[0] = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.5, -0.5],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
        ]);
        let n0 = head.ema_counts[0];
        let m0 = head.ema_sums[0].clone();
        let z1 = vec![1.0, 2.0];
        let z2 = vec![-1.0, 0.5];
        head.ema_update(&[&z1, &z2], &[0, 0]);

        let n_expect = 0.999 * n0 + 0.001 * 2.0;
        assert_relative_eq!(head.ema_counts[0], n_expect, epsilon = 1e-15);
        let wz1 = head.weights[0].matvec(&z1);
        let wz2 = head.weights[0].matvec(&z2);
        for j in 0..6 {
            let m_expect = 0.999 * m0[j] + 0.001 * (wz1[j] + wz2[j]);
            assert_relative_eq!(head.ema_sums[0][j], m_expect, epsilon = 1e-15);
            assert_relative_eq!(head.centroid(0)[j], m_expect / n_expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let check = crate::diagnostics::duq_gradient_check(7, 0.0);
        assert!(
            check.worst_rel_error < 1e-5,
            "worst relative error {}",
            check.worst_rel_error
        );
    }

    #[test]
    fn gradient_penalty_gradients_match_finite_differences() {
        let check = crate::diagnostics::duq_gradient_check(7, 0.03);
        assert!(
            check.worst_rel_error < 1e-5,
            "worst relative error {}",
            check.worst_rel_error
        );
    }

    #[test]
    fn kernels_are_bounded() {
        let head = random_head(5, 0.0);
        let mut rng = rng_from(6);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            for k in head.kernels(&z).unwrap() {
                assert!(k > 0.0 && k <= 1.0, "kernel {k} out of (0, 1]");
            }
        }
    }

    #[test]
    fn zero_distance_scores_minus_one() {
        let mut head = random_head(9, 0.0);
        let z = vec![0.3, -0.4, 1.0, 0.2];
        let wz = head.weights[1].matvec(&z);
        head.ema_counts[1] = 1.0;
        head.ema_sums[1] = wz;
        assert_relative_eq!(score_duq(&head, &z).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn unit_exponent_scores_minus_inv_e() {
        let mut head = random_head(13, 0.0);
        let z = vec![0.1, 0.5, -0.2, 0.8];
        // place the class-2 centroid at distance² = 2·m·σ² from W z and make
        // the other classes hopeless
        let s2 = head.length_scale(2); // m·σ²
        let mut target = head.weights[2].matvec(&z);
        target[0] += (2.0 * s2).sqrt();
        head.ema_counts[2] = 1.0;
        head.ema_sums[2] = target;
        for c in [0usize, 1] {
            head.ema_counts[c] = 1.0;
            head.ema_sums[c] = vec![1e6; 6];
        }
        assert_relative_eq!(score_duq(&head, &z).unwrap(), -(-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn kernel_matches_direct_formula_oracle() {
        let head = random_head(17, 0.0);
        let mut rng = rng_from(18);
        for _ in 0..30 {
            let z: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let kernels = head.kernels(&z).unwrap();
            for c in 0..3 {
                // independent recomputation from the published formula
                let w = &head.weights[c];
                let mut dist_sq = 0.0;
                for row in 0..w.rows {
                    let mut proj = 0.0;
                    for col in 0..w.cols {
                        proj += w.get(row, col) * z[col];
                    }
                    let e = head.ema_sums[c][row] / head.ema_counts[c];
                    dist_sq += (proj - e) * (proj - e);
                }
                let sigma = head.log_sigmas[c].exp();
                let expected =
                    (-dist_sq / (2.0 * head.hp.centroid_size as f64 * sigma * sigma)).exp();
                assert!((kernels[c] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fit_separates_far_embeddings() {
        // two tight clusters; a far query should score higher (more OOD)
        let mut rng = rng_from(23);
        let mut train = Vec::new();
        for class in 0..2usize {
            let center = if class == 0 { [-2.0, 0.0] } else { [2.0, 0.0] };
            for _ in 0..40 {
                train.push((
                    vec![
                        center[0] + 0.3 * rng.sample::<f64, _>(StandardNormal),
                        center[1] + 0.3 * rng.sample::<f64, _>(StandardNormal),
                    ],
                    class,
                ));
            }
        }
        let val = train.split_off(60);
        let schedule = TrainSchedule { max_epochs: 60, ..Default::default() };
        let head = fit_duq_head(
            &train,
            &val,
            2,
            &DuqHyperparams { gamma: 0.99, centroid_size: 8, gradient_penalty: 1e-4 },
            &schedule,
            99,
        )
        .unwrap();
        let id_score = score_duq(&head, &[-2.0, 0.0]).unwrap();
        let ood_score = score_duq(&head, &[12.0, 9.0]).unwrap();
        assert!(
            ood_score > id_score,
            "far point should score higher: ood {ood_score} vs id {id_score}"
        );
    }

    #[test]
    fn invalid_hyperparams_are_rejected() {
        let mut rng = rng_from(0);
        assert!(DuqHead::new(4, 3, &hp(0.0, 0.0), &mut rng).is_err());
        assert!(DuqHead::new(4, 3, &hp(1.2, 0.0), &mut rng).is_err());
        assert!(DuqHead::new(4, 3, &hp(0.9, -1.0), &mut rng).is_err());
        assert!(DuqHead::new(0, 3, &hp(0.9, 0.0), &mut rng).is_err());
    }
}
