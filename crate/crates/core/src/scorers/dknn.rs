//! Deep k-nearest-neighbour scoring on L2-normalized embeddings.
//!
//! Training embeddings are stored unit-normalized; the score of a query is
//! the Euclidean distance from its normalized embedding to the k-th nearest
//! stored vector. Zero-norm embeddings stay the zero vector.

use super::ScoreError;
use crate::linalg::l2_norm;

#[derive(Debug, Clone)]
pub struct DknnIndex {
    vectors: Vec<Vec<f64>>,
    pub k: usize,
    dim: usize,
}

fn unit_or_zero(z: &[f64]) -> Vec<f64> {
    let norm = l2_norm(z);
    if norm > 0.0 {
        z.iter().map(|&v| v / norm).collect()
    } else {
        vec![0.0; z.len()]
    }
}

/// Store unit-normalized training embeddings. `k` must lie in
/// `1..=embeddings.len()`.
pub fn fit_dknn(embeddings: &[Vec<f64>], k: usize) -> Result<DknnIndex, ScoreError> {
    if embeddings.is_empty() {
        return Err(ScoreError::EmptyFit);
    }
    if k == 0 || k > embeddings.len() {
        return Err(ScoreError::Config(format!(
            "k = {k} out of range for {} stored vectors",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut vectors = Vec::with_capacity(embeddings.len());
    for z in embeddings {
        if z.len() != dim {
            return Err(ScoreError::Dimension { got: z.len(), want: dim });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ScoreError::Config("non-finite embedding".into()));
        }
        vectors.push(unit_or_zero(z));
    }
    Ok(DknnIndex { vectors, k, dim })
}

impl DknnIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distances from the normalized query to every stored vector, ascending.
    /// Index `k−1` is the k-th-neighbour score; useful for sweeping k.
    pub fn sorted_distances(&self, z: &[f64]) -> Result<Vec<f64>, ScoreError> {
        if z.len() != self.dim {
            return Err(ScoreError::Dimension { got: z.len(), want: self.dim });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ScoreError::Config("non-finite embedding".into()));
        }
        let q = unit_or_zero(z);
        let mut dists: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| {
                v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(dists)
    }
}

/// Distance to the k-th nearest stored vector. Higher ⇒ more OOD.
pub fn score_dknn(index: &DknnIndex, z: &[f64]) -> Result<f64, ScoreError> {
    Ok(index.sorted_distances(z)?[index.k - 1])
}
