//! Dense symmetric eigen-decomposition by the cyclic Jacobi method.

use crate::error::{Error, Result};

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// `vectors[k]` belongs to `values[k]`.
    pub vectors: Vec<Vec<f64>>,
}

/// Largest absolute difference between `a[i][j]` and `a[j][i]`.
pub fn asymmetry(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[i][j] - a[j][i]).abs());
        }
    }
    worst
}

fn check_square(a: &[Vec<f64>]) -> Result<usize> {
    let n = a.len();
    if n == 0 {
        return Err(Error::arg("empty matrix"));
    }
    if let Some(r) = a.iter().find(|r| r.len() != n) {
        return Err(Error::Shape {
            op: "symmetric_eigen",
            left: (n, n),
            right: (1, r.len()),
        });
    }
    if a.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::arg("matrix has non-finite entries"));
    }
    Ok(n)
}

/// Full eigen-decomposition of a symmetric matrix. Only the upper triangle's
/// symmetric part `(A + Aᵀ)/2` is used.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<SymmetricEigen> {
    let n = check_square(a)?;
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (a[i][j] + a[j][i])).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();

    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[i][j] * m[i][j])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = m[p][q];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (mkp, mkq) = (m[k][p], m[k][q]);
                        m[k][p] = c * mkp - s * mkq;
                        m[k][q] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let (mpk, mqk) = (m[p][k], m[q][k]);
                        m[p][k] = c * mpk - s * mqk;
                        m[q][k] = s * mpk + c * mqk;
                    }
                    for row in v.iter_mut() {
                        let (vkp, vkq) = (row[p], row[q]);
                        row[p] = c * vkp - s * vkq;
                        row[q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    Ok(SymmetricEigen {
        values: order.iter().map(|&k| m[k][k]).collect(),
        vectors: order.iter().map(|&k| (0..n).map(|i| v[i][k]).collect()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_two_by_two() {
        let e = symmetric_eigen(&[vec![4.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(e.values, vec![4.0, 1.0]);
        assert!((e.vectors[0][0].abs() - 1.0).abs() < 1e-15);

        let e = symmetric_eigen(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[0][0].abs() - r).abs() < 1e-14);
        assert!((e.vectors[0][1].abs() - r).abs() < 1e-14);
    }

    #[test]
    fn reconstructs_random_matrix() {
        let n = 6;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| ((i * 7 + j * 3) % 5) as f64 + if i == j { 2.0 } else { 0.0 }).collect())
            .collect();
        let sym: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[i][j] + a[j][i]).collect()).collect();
        let e = symmetric_eigen(&sym).unwrap();
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.values[k] * e.vectors[k][i] * e.vectors[k][j]).sum();
                assert!((r - sym[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_ragged_input() {
        assert!(symmetric_eigen(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(symmetric_eigen(&[]).is_err());
    }
}
