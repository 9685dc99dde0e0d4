use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Activation of the candidate gate `g_t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateActivation {
    /// Standard LSTM.
    #[default]
    Tanh,
    /// Sigmoid on all four gates, as the printed gate equations read.
    Sigmoid,
}

/// Parameter handles of one LSTM layer.
///
/// Gate matrices are stored as `(D_in + H) × H` so that a batch of
/// concatenated `[x_t; h_{t-1}]` rows multiplies them from the left; this is
/// the transpose of the `H × (D_in + H)` textbook layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_g: ParamId,
    pub w_o: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_g: ParamId,
    pub b_o: ParamId,
    pub candidate: CandidateActivation,
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

impl LstmParams {
    /// Registers the eight tensors in `store`, initialised uniformly in
    /// `±1/√(D_in + H)`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        candidate: CandidateActivation,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = input_size + hidden_size;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), uniform(rng, fan_in, hidden_size, bound));
        let (w_i, w_f, w_g, w_o) = (w("w_i"), w("w_f"), w("w_g"), w("w_o"));
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), uniform(rng, 1, hidden_size, bound));
        let (b_i, b_f, b_g, b_o) = (b("b_i"), b("b_f"), b("b_g"), b("b_o"));
        LstmParams {
            input_size,
            hidden_size,
            w_i,
            w_f,
            w_g,
            w_o,
            b_i,
            b_f,
            b_g,
            b_o,
            candidate,
        }
    }

    /// Places the layer's parameters on `g` once per forward pass.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<BoundLstm> {
        let ws: Vec<Var> = [self.w_i, self.w_f, self.w_g, self.w_o]
            .iter()
            .map(|&id| g.param(id, store.value(id)))
            .collect();
        let bs: Vec<Var> = [self.b_i, self.b_f, self.b_g, self.b_o]
            .iter()
            .map(|&id| g.param(id, store.value(id)))
            .collect();
        Ok(BoundLstm {
            weights: g.concat_cols(&ws)?,
            bias: g.concat_cols(&bs)?,
            input_size: self.input_size,
            hidden: self.hidden_size,
            candidate: self.candidate,
        })
    }
}

/// An LSTM layer whose parameters live on a particular graph. The four gate
/// matrices are fused column-wise into one `(D_in + H) × 4H` node.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    weights: Var,
    bias: Var,
    input_size: usize,
    hidden: usize,
    candidate: CandidateActivation,
}

impl BoundLstm {
    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// One step for a batch: `x` is `B × D_in`, `h_prev` and `c_prev` are
    /// `B × H`. Returns `(h_t, c_t)`.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (b, d) = g.shape(x);
        if d != self.input_size || g.shape(h_prev) != (b, self.hidden) || g.shape(c_prev) != (b, self.hidden) {
            return Err(Error::Shape {
                op: "lstm_cell_step",
                left: (b, d),
                right: g.shape(h_prev),
            });
        }
        let hs = self.hidden;
        let xh = g.concat_cols(&[x, h_prev])?;
        let pre = g.matmul(xh, self.weights)?;
        let pre = g.add_row(pre, self.bias)?;
        let gate = |g: &mut Graph, k: usize| g.slice_cols(pre, k * hs, (k + 1) * hs);
        let (pi, pf, pg, po) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
        let i = g.sigmoid(pi);
        let f = g.sigmoid(pf);
        let cand = match self.candidate {
            CandidateActivation::Tanh => g.tanh(pg),
            CandidateActivation::Sigmoid => g.sigmoid(pg),
        };
        let o = g.sigmoid(po);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs over `steps` (each `B × D_in`) from zero state, returning every
    /// hidden state and the final cell state.
    pub fn run(&self, g: &mut Graph, steps: &[Var], reverse: bool) -> Result<(Vec<Var>, Var)> {
        let b = steps
            .first()
            .map(|&s| g.shape(s).0)
            .ok_or_else(|| Error::arg("LSTM over an empty sequence"))?;
        let mut h = g.constant(Tensor::zeros(b, self.hidden));
        let mut c = g.constant(Tensor::zeros(b, self.hidden));
        let mut hs = Vec::with_capacity(steps.len());
        let order: Box<dyn Iterator<Item = &Var>> = if reverse {
            Box::new(steps.iter().rev())
        } else {
            Box::new(steps.iter())
        };
        for &x in order {
            (h, c) = self.step(g, x, h, c)?;
            hs.push(h);
        }
        Ok((hs, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(hidden: usize, input: usize) -> (ParamStore, LstmParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(&mut store, "l", input, hidden, CandidateActivation::Tanh, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        (store, p)
    }

    #[test]
    fn zero_everything_stays_zero() {
        let (store, p) = zeroed(3, 2);
        let mut g = Graph::new();
        let l = p.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::zeros(1, 2));
        let h0 = g.constant(Tensor::zeros(1, 3));
        let c0 = g.constant(Tensor::zeros(1, 3));
        let (h, c) = l.step(&mut g, x, h0, c0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_unit_cell_state() {
        let (store, p) = zeroed(1, 1);
        let mut g = Graph::new();
        let l = p.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::zeros(1, 1));
        let h0 = g.constant(Tensor::zeros(1, 1));
        let c0 = g.constant(Tensor::scalar(1.0));
        let (h, c) = l.step(&mut g, x, h0, c0).unwrap();
        assert_eq!(g.value(c).item(), 0.5);
        let expected = 0.5 * 0.5f64.tanh();
        assert!((g.value(h).item() - expected).abs() < 1e-15);
        assert!((expected - 0.231059).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let (store, p) = zeroed(3, 2);
        let mut g = Graph::new();
        let l = p.bind(&mut g, &store).unwrap();
        let x = g.constant(Tensor::zeros(1, 4));
        let h0 = g.constant(Tensor::zeros(1, 3));
        assert!(matches!(l.step(&mut g, x, h0, h0), Err(Error::Shape { .. })));
    }

    #[test]
    fn hidden_norm_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::init(&mut store, "l", 3, 4, CandidateActivation::Tanh, &mut rng);
        let x = uniform(&mut rng, 2, 3, 1.0);
        let h0 = uniform(&mut rng, 2, 4, 0.5);
        let c0 = uniform(&mut rng, 2, 4, 0.5);
        let loss = |store: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let l = p.bind(&mut g, store).unwrap();
            let (xv, hv, cv) = (g.constant(x.clone()), g.constant(h0.clone()), g.constant(c0.clone()));
            let (h, _) = l.step(&mut g, xv, hv, cv).unwrap();
            let sq = g.square(h);
            let s = g.sum(sq);
            (g.value(s).item(), grads.then(|| g.backward(s).unwrap()))
        };
        let (_, grads) = loss(&store, true);
        let res = check_gradients(&mut store, &grads.unwrap(), &[p.w_f], 1e-4, 1e-6, |s| loss(s, false).0);
        assert!(res.max_rel_error < 1e-6, "{res:?}");
        assert_eq!(res.checked, 7 * 4);
    }
}
