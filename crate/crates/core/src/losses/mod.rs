//! Training objectives.
//!
//! The graph-level functions here return differentiable nodes; the plain
//! `f64` helpers cover the pieces that are evaluated outside training
//! (temporal uncertainty, the uncertainty matrix and the penalty vector).

mod ubl;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, NORM_EPS};
use crate::error::{Error, Result};

pub use ubl::{
    epistemic_uncertainty_matrix, temporal_uncertainty, ubl_penalty_vector, PenaltyVector, TemporalUncertainty,
    TIE_TOLERANCE,
};

/// Coefficients of the composite objective and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Reconstruction.
    pub lambda1: f64,
    /// Contrastive.
    pub lambda2: f64,
    /// Pseudo-inverse (supervised statics).
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.3,
            lambda3: 1.0,
            tau: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::arg(format!("loss coefficients must be non-negative, got {l:?}")));
        }
        if l.iter().all(|&x| x == 0.0) {
            return Err(Error::arg("at least one loss coefficient must be positive"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::arg(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Mean over sequences of per-sequence MSE. `recon` and `target` hold one
/// `B × C` node per time step; every sequence in the batch has the same
/// length so the mean of sequence MSEs equals the mean over all entries.
pub fn reconstruction_loss(g: &mut Graph, recon: &[Var], target: &[Var]) -> Result<Var> {
    if recon.is_empty() {
        return Err(Error::arg("reconstruction loss over an empty batch"));
    }
    if recon.len() != target.len() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            left: (recon.len(), 0),
            right: (target.len(), 0),
        });
    }
    let (b, c) = g.shape(recon[0]);
    let mut sums = Vec::with_capacity(recon.len());
    for (&r, &t) in recon.iter().zip(target) {
        let d = g.sub(r, t)?;
        let sq = g.square(d);
        sums.push(g.sum(sq));
    }
    let all = g.concat_rows(&sums)?;
    let total = g.sum(all);
    Ok(g.scale(total, 1.0 / (recon.len() * b * c) as f64))
}

/// Cosine similarity with a flag for the degenerate case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub value: f64,
    /// Set when either vector's norm is below [`NORM_EPS`]; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<Similarity> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: (1, u.len()),
            right: (1, v.len()),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        return Ok(Similarity {
            value: 0.0,
            degenerate: true,
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(Similarity {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// NT-Xent contrastive loss. `embeddings` is `2N × d` with anchors in rows
/// `0..N` and their positives in rows `N..2N`. Every row acts as an anchor
/// once; its positive is the paired row and its candidates are all other
/// rows. The result is the mean of the `2N` terms
/// `−log(exp(sim(a, p)/τ) / Σ_{c ≠ a} exp(sim(a, c)/τ))`.
pub fn contrastive_loss(g: &mut Graph, embeddings: Var, tau: f64) -> Result<Var> {
    let (rows, _) = g.shape(embeddings);
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::arg(format!("contrastive loss needs 2N ≥ 2 embeddings, got {rows}")));
    }
    if !(tau > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let n = rows / 2;
    let unit = g.normalize_rows(embeddings);
    let sim = g.matmul_t(unit, unit)?;
    let logits = g.scale(sim, 1.0 / tau);
    let mut not_self = vec![true; rows * rows];
    let mut positive = Tensor::zeros(rows, rows);
    for i in 0..rows {
        not_self[i * rows + i] = false;
        let p = if i < n { i + n } else { i - n };
        positive.set(i, p, 1.0);
    }
    let lse = g.masked_logsumexp_rows(logits, not_self)?;
    let pos_mask = g.constant(positive);
    let pos = g.mul(logits, pos_mask)?;
    let pos = g.sum_cols(pos);
    let terms = g.sub(lse, pos)?;
    Ok(g.mean(terms))
}

/// Supervised statics loss `(1/N) Σ_i (1/D_z) Σ_j w_j (z_ij − ẑ_ij)²` over the
/// rows that have targets. `weights = None` is the unweighted form. Returns
/// `None` when no row is labeled.
pub fn pseudo_inverse_loss(
    g: &mut Graph,
    z_hat: Var,
    targets: &[Option<Vec<f64>>],
    weights: Option<&[f64]>,
) -> Result<Option<Var>> {
    let (b, d) = g.shape(z_hat);
    if targets.len() != b {
        return Err(Error::Shape {
            op: "pseudo_inverse_loss",
            left: (b, d),
            right: (targets.len(), d),
        });
    }
    if let Some(w) = weights {
        if w.len() != d {
            return Err(Error::Shape {
                op: "pseudo_inverse_loss weights",
                left: (1, d),
                right: (1, w.len()),
            });
        }
    }
    let labeled = targets.iter().filter(|t| t.is_some()).count();
    if labeled == 0 {
        return Ok(None);
    }
    let mut target = Tensor::zeros(b, d);
    let mut scale = Tensor::zeros(b, d);
    let norm = 1.0 / (labeled * d) as f64;
    for (i, t) in targets.iter().enumerate() {
        if let Some(z) = t {
            if z.len() != d {
                return Err(Error::Shape {
                    op: "pseudo_inverse_loss target",
                    left: (1, d),
                    right: (1, z.len()),
                });
            }
            for j in 0..d {
                target.set(i, j, z[j]);
                scale.set(i, j, norm * weights.map_or(1.0, |w| w[j]));
            }
        }
    }
    let tv = g.constant(target);
    let sv = g.constant(scale);
    let diff = g.sub(z_hat, tv)?;
    let sq = g.square(diff);
    let weighted = g.mul(sq, sv)?;
    Ok(Some(g.sum(weighted)))
}

/// Values of the three objective components for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub rec: f64,
    pub cont: f64,
    pub inv: f64,
}

/// `λ₁·L_Rec + λ₂·L_Cont + λ₃·L_Inv`, rejecting non-finite components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("reconstruction", c.rec), ("contrastive", c.cont), ("pseudo-inverse", c.inv)] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                component: format!("{name} loss"),
                epoch: 0,
            });
        }
    }
    Ok(w.lambda1 * c.rec + w.lambda2 * c.cont + w.lambda3 * c.inv)
}

/// Graph form of [`total_loss`]; absent components contribute nothing.
pub fn total_loss_graph(
    g: &mut Graph,
    rec: Option<Var>,
    cont: Option<Var>,
    inv: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (v, lam) in [(rec, w.lambda1), (cont, w.lambda2), (inv, w.lambda3)] {
        if let Some(v) = v {
            if lam == 0.0 {
                continue;
            }
            let s = g.scale(v, lam);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

/// `F = kl_weight · KL + data`.
pub fn variational_free_energy(data: f64, kl: f64, kl_weight: f64) -> Result<f64> {
    if kl < 0.0 {
        return Err(Error::Contract(format!("KL must be non-negative, got {kl}")));
    }
    Ok(kl_weight * kl + data)
}

pub fn variational_free_energy_graph(g: &mut Graph, data: Var, kl: Option<Var>, kl_weight: f64) -> Result<Var> {
    match kl {
        Some(k) => {
            if g.value(k).item() < 0.0 {
                return Err(Error::Contract("KL must be non-negative".into()));
            }
            let s = g.scale(k, kl_weight);
            g.add(data, s)
        }
        None => Ok(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn reconstruction_examples() {
        let mut g = Graph::new();
        let s: Vec<Var> = (0..2).map(|_| g.constant(Tensor::zeros(2, 1))).collect();
        let r: Vec<Var> = (0..2).map(|_| g.constant(Tensor::full(2, 1, 1.0))).collect();
        let l = reconstruction_loss(&mut g, &r, &s).unwrap();
        assert_eq!(value(&g, l), 1.0);
        let l0 = reconstruction_loss(&mut g, &s, &s).unwrap();
        assert_eq!(value(&g, l0), 0.0);
        assert!(reconstruction_loss(&mut g, &[], &[]).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().value, 0.0);
        assert!((cosine_similarity(&[1.0, -2.0], &[-1.0, 2.0]).unwrap().value + 1.0).abs() < 1e-15);
        let d = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(d.degenerate && d.value == 0.0);
    }

    fn contrastive(rows: Vec<Vec<f64>>, tau: f64) -> f64 {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = contrastive_loss(&mut g, e, tau).unwrap();
        value(&g, l)
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        assert!(contrastive(vec![vec![1.0, 0.3], vec![-0.2, 1.0]], 0.5).abs() < 1e-15);
    }

    #[test]
    fn contrastive_orthogonal_is_ln3() {
        let eye = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        assert!((contrastive(eye, 1.0) - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn contrastive_decreases_as_positive_aligns() {
        let base = |t: f64| vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![t.cos(), t.sin(), 0.5], vec![0.0, 0.2, 1.0]];
        assert!(contrastive(base(0.2), 0.5) < contrastive(base(0.8), 0.5));
    }

    #[test]
    fn contrastive_rejects_empty_or_odd() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(3, 2));
        assert!(contrastive_loss(&mut g, e, 1.0).is_err());
    }

    fn inv(zhat: Vec<Vec<f64>>, z: Vec<Option<Vec<f64>>>, w: Option<&[f64]>) -> Option<f64> {
        let mut g = Graph::new();
        let zh = g.constant(Tensor::from_rows(&zhat).unwrap());
        pseudo_inverse_loss(&mut g, zh, &z, w).unwrap().map(|v| value(&g, v))
    }

    #[test]
    fn pseudo_inverse_examples() {
        assert_eq!(inv(vec![vec![0.0, 0.0]], vec![Some(vec![1.0, 1.0])], None), Some(1.0));
        assert_eq!(inv(vec![vec![1.0, 2.0]], vec![Some(vec![1.0, 2.0])], None), Some(0.0));
        assert_eq!(inv(vec![vec![0.0, 0.0]], vec![Some(vec![1.0, 1.0])], Some(&[2.0, 0.0])), Some(1.0));
        assert_eq!(inv(vec![vec![0.0, 0.0]], vec![None], None), None);
        // unlabeled rows do not dilute the mean
        assert_eq!(
            inv(vec![vec![0.0, 0.0], vec![9.0, 9.0]], vec![Some(vec![1.0, 1.0]), None], None),
            Some(1.0)
        );
        let a = inv(vec![vec![0.5, -1.0]], vec![Some(vec![0.0, 0.0])], None).unwrap();
        let b = inv(vec![vec![1.0, -2.0]], vec![Some(vec![0.0, 0.0])], None).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-15);
        let ones = inv(vec![vec![0.5, -1.0]], vec![Some(vec![0.0, 0.0])], Some(&[1.0, 1.0])).unwrap();
        assert_eq!(ones, a);
    }

    #[test]
    fn total_and_free_energy() {
        let w = LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 1.0,
        };
        let c = LossComponents {
            rec: 0.2,
            cont: 0.3,
            inv: 0.5,
        };
        assert!((total_loss(&c, &w).unwrap() - 1.0).abs() < 1e-15);
        let only_rec = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..w
        };
        assert_eq!(total_loss(&c, &only_rec).unwrap(), 0.2);
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let bad = LossComponents { cont: f64::NAN, ..c };
        assert!(total_loss(&bad, &w).unwrap_err().to_string().contains("contrastive"));

        assert_eq!(variational_free_energy(3.0, 0.0, 0.7).unwrap(), 3.0);
        assert_eq!(variational_free_energy(3.0, 2.0, 1.0).unwrap(), 5.0);
        assert!(variational_free_energy(3.0, -1.0, 1.0).is_err());
        // B batches at weight 1/B add up to one full KL
        let b = 7;
        let per_batch: f64 = (0..b).map(|_| variational_free_energy(0.0, 2.5, 1.0 / b as f64).unwrap()).sum();
        assert!((per_batch - 2.5).abs() < 1e-14);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, tau: 1.0 }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, ..Default::default() }.validate().is_err());
    }
}
