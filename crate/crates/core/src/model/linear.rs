use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lstm::uniform;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Dense layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input_size: usize,
    pub output_size: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, prefix: &str, input_size: usize, output_size: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), uniform(rng, input_size, output_size, bound));
        let b = store.add(format!("{prefix}.b"), uniform(rng, 1, output_size, bound));
        Linear {
            input_size,
            output_size,
            w,
            b,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var) {
        (g.param(self.w, store.value(self.w)), g.param(self.b, store.value(self.b)))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = self.bind(g, store);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Graph-free evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.w))?;
        let b = store.value(self.b).data();
        let c = y.cols();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        Ok(y)
    }
}
