use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monte-Carlo draws of a static-characteristic prediction with their
/// summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSampleSet {
    /// `S` draws, each of length `D_z`.
    pub draws: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Per-dimension sample standard deviation (divisor `S − 1`).
    pub std: Vec<f64>,
    /// `D_z × D_z` sample covariance (divisor `S − 1`), row-major.
    pub cov: Vec<Vec<f64>>,
}

impl PosteriorSampleSet {
    pub fn from_draws(draws: Vec<Vec<f64>>) -> Result<Self> {
        let s = draws.len();
        if s < 2 {
            return Err(Error::arg(format!("need at least 2 draws, got {s}")));
        }
        let d = draws[0].len();
        if draws.iter().any(|x| x.len() != d) {
            return Err(Error::arg("draws have differing lengths"));
        }
        let mut mean = vec![0.0; d];
        for x in &draws {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= s as f64);
        let mut cov = vec![vec![0.0; d]; d];
        for x in &draws {
            for i in 0..d {
                let di = x[i] - mean[i];
                for j in i..d {
                    cov[i][j] += di * (x[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= (s - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let std = (0..d).map(|i| cov[i][i].max(0.0).sqrt()).collect();
        Ok(PosteriorSampleSet { draws, mean, std, cov })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_draw_covariance() {
        let p = PosteriorSampleSet::from_draws(vec![vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(p.mean, vec![1.0, 0.0]);
        assert_eq!(p.cov, vec![vec![2.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(p.std[1], 0.0);
    }

    #[test]
    fn identical_draws_have_zero_spread() {
        let p = PosteriorSampleSet::from_draws(vec![vec![1.5, -2.0]; 5]).unwrap();
        assert!(p.std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_draw_rejected() {
        assert!(PosteriorSampleSet::from_draws(vec![vec![1.0]]).is_err());
    }
}
