use crate::error::{NeuralError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// Bias-corrected Adam with a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(NeuralError::InvalidArgument {
                op: "adam_step",
                detail: format!("state tracks {} params, store has {}", self.first.len(), store.len()),
            });
        }
        if store.iter().any(|(_, p)| !p.grad.is_finite()) {
            return Err(NeuralError::NonFiniteValue { op: "adam_step" });
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), mi), vi) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(NeuralError::NonFiniteValue { op: "adam_step" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(0.75);
        let mut adam = AdamState::new(&store, 5e-4);
        for _ in 0..10 {
            store.zero_grad();
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data()[0], 0.75);
    }

    #[test]
    fn one_step_on_square_matches_closed_form() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4
        // x <- 1 - 0.5 * 2 / (2 + 1e-8)
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, 0.5);
        store.zero_grad();
        store.accumulate(&[Some(Tensor::scalar(2.0))]).unwrap();
        adam.step(&mut store).unwrap();
        let expect = 1.0 - 0.5 * 2.0 / (2.0 + 1e-8);
        assert!((store.value(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn converges_on_convex_bowl() {
        // f(x, y) = (x - 1)^2 + 3 (y + 2)^2
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![4.0, 3.0]).unwrap()).unwrap();
        let mut adam = AdamState::new(&store, 0.05);
        let loss = |p: &[f64]| (p[0] - 1.0).powi(2) + 3.0 * (p[1] + 2.0).powi(2);
        for _ in 0..500 {
            let p = store.value(id).data().to_vec();
            let g = vec![2.0 * (p[0] - 1.0), 6.0 * (p[1] + 2.0)];
            store.zero_grad();
            store.accumulate(&[Some(Tensor::new(&[2], g).unwrap())]).unwrap();
            adam.step(&mut store).unwrap();
        }
        assert!(loss(store.value(id).data()) < 1e-6, "{}", loss(store.value(id).data()));
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let (mut store, _) = single(1.0);
        let mut adam = AdamState::new(&store, 0.1);
        store.accumulate(&[Some(Tensor::scalar(f64::NAN))]).unwrap();
        assert_eq!(
            adam.step(&mut store),
            Err(NeuralError::NonFiniteValue { op: "adam_step" })
        );
    }
}
