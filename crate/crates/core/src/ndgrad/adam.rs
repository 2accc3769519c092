use serde::{Deserialize, Serialize};

use super::{GradError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and step count for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with per-tensor state, so tensors registered mid-run start from a
/// fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    pub fn state(&self) -> &[Moments] {
        &self.state
    }

    pub(crate) fn from_state(config: AdamConfig, state: Vec<Moments>) -> Self {
        Self { config, state }
    }

    /// Applies one update to every parameter tensor of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), GradError> {
        self.step_active(params, grads, &vec![true; grads.len()])
    }

    /// Updates only tensors with `active[i]`; the others keep their values
    /// and moments, as if they had no gradient at all.
    pub fn step_active(&mut self, params: &mut ParamStore, grads: &[Tensor], active: &[bool]) -> Result<(), GradError> {
        if grads.len() != params.len() || active.len() != params.len() {
            return Err(GradError::Invalid {
                op: "adam_step",
                msg: format!(
                    "{} gradients and {} flags for {} parameters",
                    grads.len(),
                    active.len(),
                    params.len()
                ),
            });
        }
        while self.state.len() < params.len() {
            let n = params.tensor(self.state.len()).len();
            self.state.push(Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (idx, grad) in grads.iter().enumerate() {
            if !active[idx] {
                continue;
            }
            let param = params.tensor_mut(idx);
            if param.shape() != grad.shape() {
                return Err(GradError::Shape {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let st = &mut self.state[idx];
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for ((p, g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Graph;

    fn single(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.push("x", Tensor::scalar(value));
        store
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = single(1.5);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.tensor(0).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut store = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.002 / (1.0 + 1e-8);
        assert!((store.tensor(0).item() - expected).abs() < 1e-15);
        assert_eq!(adam.state()[0].t, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = single(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            let mut g = Graph::new();
            let x = g.leaf(store.tensor(0).clone());
            let y = g.square(x).unwrap();
            let grad = g.backward(y).unwrap().wrt(x);
            adam.step(&mut store, &[grad]).unwrap();
        }
        assert!(store.tensor(0).item().abs() < 1.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut store, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn inactive_tensors_keep_value_and_moments() {
        let mut store = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let (value, moments) = (store.tensor(0).item(), adam.state()[0].clone());
        adam.step_active(&mut store, &[Tensor::scalar(0.0)], &[false]).unwrap();
        assert_eq!(store.tensor(0).item(), value);
        assert_eq!(adam.state()[0], moments);
    }
}
