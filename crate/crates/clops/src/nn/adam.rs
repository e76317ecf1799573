//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Tensor;
use super::NnError;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// First/second moment accumulators for every network parameter plus the
/// shared step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<(Tensor, Tensor)>,
    v: Vec<(Tensor, Tensor)>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        Self::with_hyperparams(net, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
    }

    pub fn with_hyperparams(net: &Network, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = |n: &Network| {
            n.layers
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weights.shape().to_vec()),
                        Tensor::zeros(l.bias.shape().to_vec()),
                    )
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(net),
            v: zeros(net),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter in place. The step counter
/// advances exactly once per call.
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    if lr <= 0.0 {
        return Err(NnError::InvalidConfig("learning rate must be positive".into()));
    }
    if grads.layers.len() != net.layers.len() {
        return Err(NnError::ShapeMismatch {
            context: "adam_step",
            expected: vec![net.layers.len()],
            actual: vec![grads.layers.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (idx, (gw, gb)) in grads.layers.iter().enumerate() {
        let layer = &mut net.layers[idx];
        if gw.shape() != layer.weights.shape() || gb.shape() != layer.bias.shape() {
            return Err(NnError::ShapeMismatch {
                context: "adam_step gradient",
                expected: layer.weights.shape().to_vec(),
                actual: gw.shape().to_vec(),
            });
        }
        update_tensor(
            layer.weights.data_mut(),
            gw.data(),
            state.m[idx].0.data_mut(),
            state.v[idx].0.data_mut(),
            state.beta1,
            state.beta2,
            state.epsilon,
            lr,
            bc1,
            bc2,
        );
        update_tensor(
            layer.bias.data_mut(),
            gb.data(),
            state.m[idx].1.data_mut(),
            state.v[idx].1.data_mut(),
            state.beta1,
            state.beta2,
            state.epsilon,
            lr,
            bc1,
            bc2,
        );
        layer.weights.check_finite("adam update")?;
        layer.bias.check_finite("adam update")?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One Adam update of a lone scalar parameter; used for the per-instance
/// loss coefficients, which carry their own moments.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub step: u64,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, step: 0 }
    }

    pub fn update(&mut self, param: &mut f64, grad: f64, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        self.m = DEFAULT_BETA1 * self.m + (1.0 - DEFAULT_BETA1) * grad;
        self.v = DEFAULT_BETA2 * self.v + (1.0 - DEFAULT_BETA2) * grad * grad;
        let m_hat = self.m / (1.0 - DEFAULT_BETA1.powi(t));
        let v_hat = self.v / (1.0 - DEFAULT_BETA2.powi(t));
        *param -= lr * m_hat / (v_hat.sqrt() + DEFAULT_EPSILON);
    }
}

impl Default for ScalarAdam {
    fn default() -> Self {
        Self::new()
    }
}
