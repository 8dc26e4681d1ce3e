//! Self-check routines: central finite-difference verification of the
//! analytic gradients, for the extractor and for the DUQ head.
//!
//! The numeric route differentiates the same loss evaluation the trainer
//! uses, so it is independent of the hand-derived backward pass it checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nnkit::{batch_loss_and_grads, ExtractorConfig, ExtractorModel, Grads};
use crate::scorers::{DuqHead, DuqHyperparams};
use crate::seed::rng_from;

const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub worst_rel_error: f64,
    pub n_params: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn extractor_tensor<'a>(model: &'a mut ExtractorModel, tensor: usize) -> &'a mut [f64] {
    match tensor {
        0 => &mut model.w1.data,
        1 => &mut model.b1,
        2 => &mut model.w2.data,
        3 => &mut model.b2,
        4 => &mut model.w3.data,
        _ => &mut model.b3,
    }
}

fn extractor_grad<'a>(grads: &'a Grads, tensor: usize) -> &'a [f64] {
    match tensor {
        0 => &grads.w1.data,
        1 => &grads.b1,
        2 => &grads.w2.data,
        3 => &grads.b2,
        4 => &grads.w3.data,
        _ => &grads.b3,
    }
}

/// Compare the extractor's analytic cross-entropy gradients against central
/// finite differences on a random small model (dims ≤ 8). `with_dropout_mask`
/// checks the training path with a fixed sampled mask.
pub fn extractor_gradient_check(seed: u64, with_dropout_mask: bool) -> GradientCheck {
    let cfg = ExtractorConfig {
        input_dim: 5,
        hidden_dim: 6,
        embed_dim: 4,
        n_classes: 3,
        dropout_p: if with_dropout_mask { 0.4 } else { 0.0 },
        seed,
        ..Default::default()
    };
    let mut rng = rng_from(seed);
    let mut model = ExtractorModel::init(&cfg, &mut rng).expect("valid config");
    // random biases keep pre-activations away from the relu kinks, where
    // central differences would straddle the nondifferentiable point
    for b in [&mut model.b1, &mut model.b2, &mut model.b3] {
        for v in b.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.3;
        }
    }
    let batch = 6;
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..cfg.input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ys: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let masks: Option<Vec<Vec<f64>>> = if with_dropout_mask {
        Some((0..batch).map(|_| model.sample_dropout_scales(&mut rng)).collect())
    } else {
        None
    };
    let xrefs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let (_, analytic) = batch_loss_and_grads(&model, &xrefs, &ys, masks.as_deref());

    let mut worst: f64 = 0.0;
    let mut n_params = 0;
    for tensor in 0..6 {
        for i in 0..extractor_tensor(&mut model, tensor).len() {
            let orig = extractor_tensor(&mut model, tensor)[i];
            extractor_tensor(&mut model, tensor)[i] = orig + FD_STEP;
            let plus = batch_loss_and_grads(&model, &xrefs, &ys, masks.as_deref()).0;
            extractor_tensor(&mut model, tensor)[i] = orig - FD_STEP;
            let minus = batch_loss_and_grads(&model, &xrefs, &ys, masks.as_deref()).0;
            extractor_tensor(&mut model, tensor)[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(extractor_grad(&analytic, tensor)[i], numeric));
            n_params += 1;
        }
    }
    GradientCheck { worst_rel_error: worst, n_params }
}

/// Compare the DUQ head's analytic gradients (binary cross-entropy plus the
/// gradient penalty) against central finite differences on a random small
/// head.
pub fn duq_gradient_check(seed: u64, gradient_penalty: f64) -> GradientCheck {
    let hp = DuqHyperparams { gamma: 0.99, centroid_size: 6, gradient_penalty };
    let mut rng = rng_from(seed);
    let mut head = DuqHead::new(4, 3, &hp, &mut rng).expect("valid head");
    // widen the length scales so kernels sit in a healthy range
    head.log_sigmas = vec![0.6f64.ln(); 3];

    let batch = 5;
    let zs: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let ys: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let refs: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
    let (_, analytic) = head.loss_and_grads(&refs, &ys);

    let mut worst: f64 = 0.0;
    let mut n_params = 0;
    for c in 0..head.n_classes {
        for i in 0..head.weights[c].data.len() {
            let orig = head.weights[c].data[i];
            head.weights[c].data[i] = orig + FD_STEP;
            let plus = head.loss_and_grads(&refs, &ys).0;
            head.weights[c].data[i] = orig - FD_STEP;
            let minus = head.loss_and_grads(&refs, &ys).0;
            head.weights[c].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.weight(c)[i], numeric));
            n_params += 1;
        }
        let orig = head.log_sigmas[c];
        head.log_sigmas[c] = orig + FD_STEP;
        let plus = head.loss_and_grads(&refs, &ys).0;
        head.log_sigmas[c] = orig - FD_STEP;
        let minus = head.loss_and_grads(&refs, &ys).0;
        head.log_sigmas[c] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic.log_sigma(c), numeric));
        n_params += 1;
    }
    GradientCheck { worst_rel_error: worst, n_params }
}
