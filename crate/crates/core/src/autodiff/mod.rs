//! Reverse-mode differentiation over dense `f64` matrices.

pub mod check;
mod graph;
mod params;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var, NORM_EPS};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::check::{central_difference, relative_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn primitive_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let sp = g.softplus(z);
        assert_eq!(g.value(s).item(), 0.5);
        assert!((g.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.tanh(x);
        let (_, vars) = g.backward_all(y).unwrap();
        assert_eq!(vars[0].1.item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(id, store.value(id));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(id).unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates_exactly() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[0.3, -0.7, 1.1]));
        let mut g = Graph::new();
        let w = g.param(id, store.value(id));
        let t = g.tanh(w);
        let s = g.square(t);
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        store.accumulate(&grads);
        let once = store.grad(id).clone();
        store.accumulate(&g.backward(y).unwrap());
        let twice = store.grad(id);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
    }

    #[test]
    fn normalize_rows_degenerate_row_is_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = g.normalize_rows(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }

    /// Builds a scalar from two inputs with one primitive, differentiates, and
    /// compares every input entry against central differences.
    fn check_primitive(name: &str, build: impl Fn(&mut Graph, Var, Var) -> Var, sa: (usize, usize), sb: (usize, usize), positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut a = random(&mut rng, sa.0, sa.1);
        let mut b = random(&mut rng, sb.0, sb.1);
        if positive {
            a = a.map(|x| x.abs() + 0.5);
            b = b.map(|x| x.abs() + 0.5);
        }
        let eval = |a: &Tensor, b: &Tensor| -> f64 {
            let mut g = Graph::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            let out = build(&mut g, va, vb);
            let w = g.constant(weights(g.shape(out)));
            let p = g.mul(out, w).unwrap();
            let s = g.sum(p);
            g.value(s).item()
        };
        let mut g = Graph::new();
        let va = g.variable(a.clone());
        let vb = g.variable(b.clone());
        let out = build(&mut g, va, vb);
        let w = g.constant(weights(g.shape(out)));
        let p = g.mul(out, w).unwrap();
        let s = g.sum(p);
        let (_, vars) = g.backward_all(s).unwrap();
        let grad_of = |v: Var| vars.iter().find(|(x, _)| *x == v).map(|(_, t)| t.clone());
        let ga = grad_of(va).unwrap();
        let gb = grad_of(vb).unwrap();
        for k in 0..a.len() {
            let n = central_difference(
                |x| {
                    let mut a2 = a.clone();
                    a2.data_mut()[k] = x;
                    eval(&a2, &b)
                },
                a.data()[k],
                1e-4,
            );
            let e = relative_error(ga.data()[k], n, 1e-6);
            assert!(e < 1e-7, "{name}: d/da[{k}] analytic {} numeric {n}", ga.data()[k]);
        }
        for k in 0..b.len() {
            let n = central_difference(
                |x| {
                    let mut b2 = b.clone();
                    b2.data_mut()[k] = x;
                    eval(&a, &b2)
                },
                b.data()[k],
                1e-4,
            );
            let e = relative_error(gb.data()[k], n, 1e-6);
            assert!(e < 1e-7, "{name}: d/db[{k}] analytic {} numeric {n}", gb.data()[k]);
        }
    }

    fn weights((r, c): (usize, usize)) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap()
    }

    #[test]
    fn primitives_match_finite_differences() {
        check_primitive("matmul", |g, a, b| g.matmul(a, b).unwrap(), (3, 4), (4, 2), false);
        check_primitive("matmul_t", |g, a, b| g.matmul_t(a, b).unwrap(), (3, 4), (2, 4), false);
        check_primitive("add", |g, a, b| g.add(a, b).unwrap(), (2, 3), (2, 3), false);
        check_primitive("sub", |g, a, b| g.sub(a, b).unwrap(), (2, 3), (2, 3), false);
        check_primitive("add_row", |g, a, b| g.add_row(a, b).unwrap(), (3, 4), (1, 4), false);
        check_primitive("mul", |g, a, b| g.mul(a, b).unwrap(), (2, 3), (2, 3), false);
        check_primitive("scale", |g, a, b| { let s = g.scale(a, -2.5); g.add(s, b).unwrap() }, (2, 2), (2, 2), false);
        check_primitive("add_scalar", |g, a, b| { let s = g.add_scalar(a, 4.0); g.mul(s, b).unwrap() }, (2, 2), (2, 2), false);
        check_primitive("sigmoid", |g, a, b| { let s = g.sigmoid(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("tanh", |g, a, b| { let s = g.tanh(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("relu", |g, a, b| { let s = g.relu(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("softplus", |g, a, b| { let s = g.softplus(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("square", |g, a, b| { let s = g.square(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("sqrt", |g, a, b| { let s = g.sqrt(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), true);
        check_primitive("log", |g, a, b| { let s = g.log(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), true);
        check_primitive("exp", |g, a, b| { let s = g.exp(a); g.mul(s, b).unwrap() }, (2, 3), (2, 3), false);
        check_primitive("concat_cols", |g, a, b| g.concat_cols(&[a, b]).unwrap(), (2, 3), (2, 1), false);
        check_primitive("concat_rows", |g, a, b| g.concat_rows(&[a, b]).unwrap(), (2, 3), (1, 3), false);
        check_primitive("slice_cols", |g, a, b| { let s = g.slice_cols(a, 1, 3).unwrap(); g.mul(s, b).unwrap() }, (2, 4), (2, 2), false);
        check_primitive("slice_rows", |g, a, b| { let s = g.slice_rows(a, 1, 2).unwrap(); g.mul(s, b).unwrap() }, (3, 2), (1, 2), false);
        check_primitive("mean", |g, a, b| { let m = g.mean(a); let s = g.sum(b); g.mul(m, s).unwrap() }, (2, 3), (1, 2), false);
        check_primitive("sum_cols", |g, a, b| { let s = g.sum_cols(a); g.mul(s, b).unwrap() }, (3, 4), (3, 1), false);
        check_primitive("normalize_rows", |g, a, b| { let s = g.normalize_rows(a); g.mul(s, b).unwrap() }, (3, 4), (3, 4), false);
        check_primitive(
            "masked_logsumexp_rows",
            |g, a, b| {
                let mask = (0..9).map(|i| i % 4 != 0).collect();
                let s = g.masked_logsumexp_rows(a, mask).unwrap();
                g.mul(s, b).unwrap()
            },
            (3, 3),
            (3, 1),
            false,
        );
    }
}
