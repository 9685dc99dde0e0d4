//! Gaussian weight posterior trained with Bayes by Backprop.
//!
//! Each weight has a mean `μ` and a raw scale `ρ`; its standard deviation is
//! `softplus(ρ) = ln(1 + e^ρ)`, which keeps it positive while staying
//! differentiable. A draw is `w = μ + softplus(ρ) ⊙ ε` with `ε ~ N(0, 1)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lstm::uniform;
use crate::autodiff::{softplus, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters of a variational linear layer `in → out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayerParams {
    pub input_size: usize,
    pub output_size: usize,
    pub mu_w: ParamId,
    pub rho_w: ParamId,
    pub mu_b: ParamId,
    pub rho_b: ParamId,
    /// Standard deviation of the zero-mean Gaussian prior.
    pub prior_std: f64,
}

/// Standard-normal noise for one draw of a variational layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNoise {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerNoise {
    pub fn zeros(input: usize, output: usize) -> Self {
        LayerNoise {
            w: Tensor::zeros(input, output),
            b: Tensor::zeros(1, output),
        }
    }

    pub fn sample<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut draw = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
        };
        LayerNoise {
            w: draw(input, output),
            b: draw(1, output),
        }
    }
}

impl VariationalLayerParams {
    /// `μ` uniform in `±1/√in`, `ρ` constant.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        output_size: usize,
        prior_std: f64,
        rho_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        let mu_w = store.add(format!("{prefix}.mu_w"), uniform(rng, input_size, output_size, bound));
        let rho_w = store.add(format!("{prefix}.rho_w"), Tensor::full(input_size, output_size, rho_init));
        let mu_b = store.add(format!("{prefix}.mu_b"), uniform(rng, 1, output_size, bound));
        let rho_b = store.add(format!("{prefix}.rho_b"), Tensor::full(1, output_size, rho_init));
        VariationalLayerParams {
            input_size,
            output_size,
            mu_w,
            rho_w,
            mu_b,
            rho_b,
            prior_std,
        }
    }

    /// Applies the layer to `x` (`B × in`) with one weight draw shared across
    /// the batch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, noise: &LayerNoise) -> Result<Var> {
        let w = sample_on_graph(g, store, self.mu_w, self.rho_w, &noise.w)?;
        let b = sample_on_graph(g, store, self.mu_b, self.rho_b, &noise.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Closed-form KL to the prior as a differentiable graph node.
    pub fn kl_on_graph(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let a = kl_term_on_graph(g, store, self.mu_w, self.rho_w, self.prior_std)?;
        let b = kl_term_on_graph(g, store, self.mu_b, self.rho_b, self.prior_std)?;
        g.add(a, b)
    }

    /// Closed-form KL to the prior.
    pub fn kl(&self, store: &ParamStore) -> f64 {
        let term = |mu: ParamId, rho: ParamId| -> f64 {
            store
                .value(mu)
                .data()
                .iter()
                .zip(store.value(rho).data())
                .map(|(&m, &r)| gaussian_kl(m, softplus(r), self.prior_std))
                .sum()
        };
        term(self.mu_w, self.rho_w) + term(self.mu_b, self.rho_b)
    }

    pub fn weight_std(&self, store: &ParamStore) -> Tensor {
        store.value(self.rho_w).map(softplus)
    }

    pub fn bias_std(&self, store: &ParamStore) -> Tensor {
        store.value(self.rho_b).map(softplus)
    }
}

/// `KL(N(μ, σ_q²) ‖ N(0, σ_p²)) = ln(σ_p/σ_q) + (σ_q² + μ²)/(2σ_p²) − ½`.
pub fn gaussian_kl(mu: f64, sigma_q: f64, sigma_prior: f64) -> f64 {
    (sigma_prior / sigma_q).ln() + (sigma_q * sigma_q + mu * mu) / (2.0 * sigma_prior * sigma_prior) - 0.5
}

/// Summed KL of elementwise-independent Gaussians `N(μ, softplus(ρ)²)` to
/// the prior `N(0, σ_p²)`.
pub fn kl_variational_prior(mu: &Tensor, rho: &Tensor, prior_std: f64) -> Result<f64> {
    if mu.shape() != rho.shape() {
        return Err(Error::Shape {
            op: "kl_variational_prior",
            left: mu.shape(),
            right: rho.shape(),
        });
    }
    if prior_std <= 0.0 {
        return Err(Error::arg(format!("prior std must be positive, got {prior_std}")));
    }
    Ok(mu
        .data()
        .iter()
        .zip(rho.data())
        .map(|(&m, &r)| gaussian_kl(m, softplus(r), prior_std))
        .sum())
}

/// `w = μ + softplus(ρ) ⊙ ε`.
pub fn sample_variational_weights(mu: &Tensor, rho: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != rho.shape() || mu.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "sample_variational_weights",
            left: mu.shape(),
            right: eps.shape(),
        });
    }
    let mut w = mu.clone();
    for ((w, &r), &e) in w.data_mut().iter_mut().zip(rho.data()).zip(eps.data()) {
        *w += softplus(r) * e;
    }
    Ok(w)
}

fn sample_on_graph(g: &mut Graph, store: &ParamStore, mu: ParamId, rho: ParamId, eps: &Tensor) -> Result<Var> {
    let m = g.param(mu, store.value(mu));
    let r = g.param(rho, store.value(rho));
    let sd = g.softplus(r);
    let e = g.constant(eps.clone());
    let scaled = g.mul(sd, e)?;
    g.add(m, scaled)
}

fn kl_term_on_graph(g: &mut Graph, store: &ParamStore, mu: ParamId, rho: ParamId, prior_std: f64) -> Result<Var> {
    let m = g.param(mu, store.value(mu));
    let r = g.param(rho, store.value(rho));
    let sq = g.softplus(r);
    let log_sq = g.log(sq);
    let var_q = g.square(sq);
    let mu2 = g.square(m);
    let num = g.add(var_q, mu2)?;
    let quad = g.scale(num, 1.0 / (2.0 * prior_std * prior_std));
    let diff = g.sub(quad, log_sq)?;
    let n = g.shape(m).0 * g.shape(m).1;
    let total = g.sum(diff);
    Ok(g.add_scalar(total, n as f64 * (prior_std.ln() - 0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Inverse of softplus, for constructing ρ with a given σ_q.
    fn rho_for(sigma: f64) -> f64 {
        sigma.exp_m1().ln()
    }

    #[test]
    fn kl_worked_examples() {
        let one = |mu: f64, sq: f64, sp: f64| {
            kl_variational_prior(&Tensor::scalar(mu), &Tensor::scalar(rho_for(sq)), sp).unwrap()
        };
        assert!(one(0.0, 0.1, 0.1).abs() < 1e-14);
        assert!((one(1.0, 1.0, 1.0) - 0.5).abs() < 1e-14);
        let expected = (0.5f64).ln() + 4.0 / 2.0 - 0.5;
        assert!((one(0.0, 2.0, 1.0) - expected).abs() < 1e-14);
        assert!((expected - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_bad_prior() {
        assert!(kl_variational_prior(&Tensor::scalar(0.0), &Tensor::scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mu = Tensor::row(&[0.5, -1.0]);
        let rho = Tensor::row(&[0.0, 0.0]);
        assert_eq!(sample_variational_weights(&mu, &rho, &Tensor::zeros(1, 2)).unwrap(), mu);
        let w = sample_variational_weights(&mu, &rho, &Tensor::full(1, 2, 1.0)).unwrap();
        assert!((w.data()[0] - (0.5 + std::f64::consts::LN_2)).abs() < 1e-15);
        assert!(sample_variational_weights(&mu, &rho, &Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn empirical_mean_of_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = Tensor::row(&[0.2, -0.4, 1.5]);
        let rho = Tensor::row(&[-1.0, 0.0, 0.5]);
        let n = 10_000;
        let mut acc = Tensor::zeros(1, 3);
        for _ in 0..n {
            let eps = LayerNoise::sample(1, 3, &mut rng).w;
            acc.add_assign(&sample_variational_weights(&mu, &rho, &eps).unwrap());
        }
        acc.scale_in_place(1.0 / n as f64);
        for k in 0..3 {
            let tol = 3.0 * softplus(rho.data()[k]) / 100.0;
            assert!((acc.data()[k] - mu.data()[k]).abs() < tol, "dim {k}");
        }
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = VariationalLayerParams::init(&mut store, "v", 4, 3, 0.1, -3.0, &mut rng);
        let mut g = Graph::new();
        let kl = layer.kl_on_graph(&mut g, &store).unwrap();
        assert!((g.value(kl).item() - layer.kl(&store)).abs() < 1e-10);
    }
}
