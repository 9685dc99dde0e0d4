use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, symmetric_eigen};
use crate::model::PosteriorSampleSet;

/// Relative eigen-gap below which the top direction is treated as arbitrary.
pub const TIE_TOLERANCE: f64 = 1e-9;
const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Per-characteristic weights for the supervised statics loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyVector {
    /// Non-negative, mean one.
    pub w: Vec<f64>,
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    pub gamma: f64,
    /// Set when the top eigenvalue was tied (or the matrix was zero) and `w`
    /// fell back to uniform.
    pub tied: bool,
}

impl PenaltyVector {
    pub fn uniform(d: usize) -> Self {
        PenaltyVector {
            w: vec![1.0; d],
            eigenvalue: 0.0,
            eigenvector: vec![0.0; d],
            gamma: 0.0,
            tied: true,
        }
    }
}

/// Weights from the principal eigenvector of `sigma`: `|v|` scaled to mean
/// one, then blended with uniform weights as `(1 − γ)·1 + γ·ŵ`.
pub fn ubl_penalty_vector(sigma: &[Vec<f64>], gamma: f64) -> Result<PenaltyVector> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::arg(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let eig = symmetric_eigen(sigma)?;
    let asym = asymmetry(sigma);
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::arg(format!("uncertainty matrix is not symmetric (max |a_ij − a_ji| = {asym:e})")));
    }
    let d = sigma.len();
    let lmax = eig.values[0];
    let v = eig.vectors[0].clone();
    let tied = lmax.abs() == 0.0 || (d > 1 && (lmax - eig.values[1]) < TIE_TOLERANCE * lmax.abs());
    let w = if tied {
        vec![1.0; d]
    } else {
        let abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        let mean = abs.iter().sum::<f64>() / d as f64;
        abs.iter().map(|a| (1.0 - gamma) + gamma * a / mean).collect()
    };
    Ok(PenaltyVector {
        w,
        eigenvalue: lmax,
        eigenvector: v,
        gamma,
        tied,
    })
}

/// Spread of window-level static predictions around their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalUncertainty {
    /// Per-characteristic population standard deviation across windows.
    pub unc: Vec<f64>,
    pub n_windows: usize,
}

impl TemporalUncertainty {
    pub fn mean(&self) -> f64 {
        self.unc.iter().sum::<f64>() / self.unc.len().max(1) as f64
    }
}

/// `unc_j = sqrt((1/n) Σ_k (ẑ_kj − z̄_j)²)` over `n` windows.
pub fn temporal_uncertainty(window_predictions: &[Vec<f64>], mean_prediction: &[f64]) -> Result<TemporalUncertainty> {
    let n = window_predictions.len();
    if n == 0 {
        return Err(Error::arg("temporal uncertainty needs at least one window"));
    }
    let d = mean_prediction.len();
    if let Some(r) = window_predictions.iter().find(|r| r.len() != d) {
        return Err(Error::Shape {
            op: "temporal_uncertainty",
            left: (n, r.len()),
            right: (1, d),
        });
    }
    let unc = (0..d)
        .map(|j| {
            let ss: f64 = window_predictions.iter().map(|r| (r[j] - mean_prediction[j]).powi(2)).sum();
            (ss / n as f64).sqrt()
        })
        .collect();
    Ok(TemporalUncertainty { unc, n_windows: n })
}

/// Entrywise average of the per-basin posterior covariances.
pub fn epistemic_uncertainty_matrix(sample_sets: &[PosteriorSampleSet]) -> Result<Vec<Vec<f64>>> {
    let first = sample_sets
        .first()
        .ok_or_else(|| Error::arg("epistemic uncertainty matrix over no basins"))?;
    let d = first.dim();
    let mut acc = vec![vec![0.0; d]; d];
    for s in sample_sets {
        if s.n_draws() < 2 {
            return Err(Error::arg("every posterior needs at least 2 draws"));
        }
        if s.dim() != d {
            return Err(Error::Shape {
                op: "epistemic_uncertainty_matrix",
                left: (d, d),
                right: (s.dim(), s.dim()),
            });
        }
        for (a, c) in acc.iter_mut().zip(&s.cov) {
            for (x, y) in a.iter_mut().zip(c) {
                *x += y;
            }
        }
    }
    let k = sample_sets.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= k);
    Ok(acc)
}
