use super::{KernelError, Param, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step_count: u64,
}

/// Adam with bias correction and no weight decay. States are matched to
/// parameters by position.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[&Param<T>]) -> Self {
        let states = params
            .iter()
            .map(|p| AdamState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step_count: 0,
            })
            .collect();
        Self { config, states }
    }

    /// Updates every trainable parameter from its gradient. Gradients are
    /// left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<(), KernelError> {
        for (index, p) in params.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let state = self.states.get(index).ok_or(KernelError::MissingState { index })?;
            if state.m.shape() != p.value.shape() {
                return Err(KernelError::StateShape {
                    index,
                    state: state.m.shape().to_vec(),
                    param: p.value.shape().to_vec(),
                });
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (p, state) in params.iter_mut().zip(self.states.iter_mut()) {
            if !p.trainable {
                continue;
            }
            state.step_count += 1;
            let t = state.step_count as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let grads = p.grad.data();
            let values = p.value.data_mut();
            let ms = state.m.data_mut();
            let vs = state.v.data_mut();
            for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(ms).zip(vs) {
                let g = g.f64();
                let m_new = beta1 * m.f64() + (1.0 - beta1) * g;
                let v_new = beta2 * v.f64() + (1.0 - beta2) * g * g;
                *m = T::of(m_new);
                *v = T::of(v_new);
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *w = T::of(w.f64() - update);
            }
        }
        Ok(())
    }
}
