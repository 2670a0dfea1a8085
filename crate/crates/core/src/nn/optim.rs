use super::network::Network;
use super::tensor::{Real, Tensor};

pub trait Optimizer<T: Real> {
    /// Applies accumulated gradients to every unfrozen parameter and resets
    /// all gradient accumulators.
    fn step(&mut self, net: &mut Network<T>);

    fn steps_taken(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Rebuilds an optimizer from persisted state.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    fn ensure_moments(&mut self, net: &Network<T>) {
        if self.first.is_empty() {
            self.first = net.params().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, net: &mut Network<T>) {
        self.ensure_moments(net);
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);

        let mut idx = 0;
        for layer in net.layers_mut() {
            let frozen = layer.is_frozen();
            for (param, grad) in layer.params_and_grads() {
                if !frozen {
                    let m = self.first[idx].data_mut();
                    let v = self.second[idx].data_mut();
                    for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        let g = g.as_f64();
                        let m_new = beta1 * mi.as_f64() + (1.0 - beta1) * g;
                        let v_new = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
                        *mi = T::from_f64(m_new);
                        *vi = T::from_f64(v_new);
                        let update = lr * (m_new / correct1) / ((v_new / correct2).sqrt() + epsilon);
                        *p = T::from_f64(p.as_f64() - update);
                    }
                }
                grad.fill(T::zero());
                idx += 1;
            }
        }
        net.invalidate();
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f32> {
    pub config: SgdConfig,
    step: u64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            step: 0,
            velocity: Vec::new(),
        }
    }

    pub fn from_parts(config: SgdConfig, step: u64, velocity: Vec<Tensor<T>>) -> Self {
        Self { config, step, velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, net: &mut Network<T>) {
        if self.velocity.is_empty() {
            self.velocity = net.params().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        self.step += 1;
        let lr = T::from_f64(self.config.lr);
        let momentum = T::from_f64(self.config.momentum);
        let mut idx = 0;
        for layer in net.layers_mut() {
            let frozen = layer.is_frozen();
            for (param, grad) in layer.params_and_grads() {
                if !frozen {
                    let vel = self.velocity[idx].data_mut();
                    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                        *v = momentum * *v - lr * g;
                        *p += *v;
                    }
                }
                grad.fill(T::zero());
                idx += 1;
            }
        }
        net.invalidate();
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}
