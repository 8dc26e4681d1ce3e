//! Gaussian discriminant density scoring (DDU).
//!
//! One Gaussian per class with class-specific covariance, fitted on the
//! penultimate-layer embeddings of the training split. The OOD score is the
//! negative log of the mixture density Σ πc N(z; μc, Σc), evaluated through
//! Cholesky solves and log-sum-exp.

use super::ScoreError;
use crate::linalg::{cholesky, dot, forward_solve, Mat};

/// Jitter ladder in units of the mean covariance diagonal.
const JITTER_LEVELS: [f64; 9] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

/// Per-class Gaussian model with Cholesky factors and class priors.
#[derive(Debug, Clone)]
pub struct GdaModel {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
    /// Largest absolute jitter added to any class covariance.
    pub jitter_used: f64,
    chols: Vec<Mat>,
    log_dets: Vec<f64>,
}

impl GdaModel {
    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    /// Log density of the class-`c` Gaussian at `z`.
    fn class_log_density(&self, c: usize, z: &[f64]) -> f64 {
        let d = self.dim as f64;
        let diff: Vec<f64> = z.iter().zip(&self.means[c]).map(|(a, b)| a - b).collect();
        let y = forward_solve(&self.chols[c], &diff);
        let quad = dot(&y, &y);
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_dets[c] + quad)
    }
}

/// Fit per-class means, sample covariances (n−1 denominator) and priors.
/// Covariances get the smallest jitter from the ladder that makes the
/// Cholesky factorization succeed.
pub fn fit_ddu(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<GdaModel, ScoreError> {
    if embeddings.is_empty() {
        return Err(ScoreError::EmptyFit);
    }
    if embeddings.len() != labels.len() {
        return Err(ScoreError::Config(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if n_classes == 0 {
        return Err(ScoreError::Config("need at least one class".into()));
    }
    let dim = embeddings[0].len();
    for z in embeddings {
        if z.len() != dim {
            return Err(ScoreError::Dimension { got: z.len(), want: dim });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ScoreError::Config("non-finite embedding".into()));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(ScoreError::Config(format!("label {bad} out of range")));
    }

    let n_total = embeddings.len() as f64;
    let mut means = Vec::with_capacity(n_classes);
    let mut priors = Vec::with_capacity(n_classes);
    let mut chols = Vec::with_capacity(n_classes);
    let mut log_dets = Vec::with_capacity(n_classes);
    let mut jitter_used: f64 = 0.0;

    for class in 0..n_classes {
        let members: Vec<&Vec<f64>> =
            embeddings.iter().zip(labels).filter(|(_, &l)| l == class).map(|(z, _)| z).collect();
        let n = members.len();
        if n < 2 {
            return Err(ScoreError::ClassTooSmall { class, got: n, min: 2 });
        }

        let mut mean = vec![0.0; dim];
        for z in &members {
            for (m, &v) in mean.iter_mut().zip(z.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }

        let mut cov = Mat::zeros(dim, dim);
        for z in &members {
            let diff: Vec<f64> = z.iter().zip(&mean).map(|(a, b)| a - b).collect();
            cov.add_outer(1.0 / (n - 1) as f64, &diff, &diff);
        }

        let mean_diag =
            (0..dim).map(|i| cov.get(i, i)).sum::<f64>() / dim as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

        let mut fitted = None;
        for &level in &JITTER_LEVELS {
            let jitter = level * scale;
            let mut candidate = cov.clone();
            for i in 0..dim {
                let v = candidate.get(i, i) + jitter;
                candidate.set(i, i, v);
            }
            if let Some(l) = cholesky(&candidate) {
                fitted = Some((l, jitter));
                break;
            }
        }
        let (chol, jitter) =
            fitted.ok_or(ScoreError::CovarianceSingular { class })?;
        jitter_used = jitter_used.max(jitter);
        let log_det = 2.0 * (0..dim).map(|i| chol.get(i, i).ln()).sum::<f64>();

        means.push(mean);
        priors.push(n as f64 / n_total);
        chols.push(chol);
        log_dets.push(log_det);
    }

    Ok(GdaModel { dim, means, priors, jitter_used, chols, log_dets })
}

/// Negative log mixture density: −log Σc πc N(z; μc, Σc). Higher ⇒ more OOD.
pub fn score_ddu(gda: &GdaModel, z: &[f64]) -> Result<f64, ScoreError> {
    if z.len() != gda.dim {
        return Err(ScoreError::Dimension { got: z.len(), want: gda.dim });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::Config("non-finite embedding".into()));
    }
    let terms: Vec<f64> = (0..gda.n_classes())
        .map(|c| gda.priors[c].ln() + gda.class_log_density(c, z))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // all components underflow; the score is +inf-like but keep it finite
        return Ok(f64::MAX.sqrt());
    }
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(-lse)
}
