use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::network::Weights;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Learning rate as a function of progress through training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the final step.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Adam with bias correction. Tensors named in `frozen` are never touched.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    config: AdamConfig,
    m: Weights<S>,
    v: Weights<S>,
    steps: i32,
    frozen: HashSet<String>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &Weights<S>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            frozen: HashSet::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn step(&mut self, params: &mut Weights<S>, grads: &Weights<S>) {
        self.steps += 1;
        let c = self.config;
        if c.learning_rate == 0.0 {
            return;
        }
        let b1 = S::lit(c.beta1);
        let b2 = S::lit(c.beta2);
        let one = S::one();
        let bc1 = S::lit(1.0 - c.beta1.powi(self.steps));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.steps));
        let lr = S::lit(c.learning_rate);
        let eps = S::lit(c.epsilon);
        let grads = grads.named_tensors();
        let ms = self.m.named_tensors_mut();
        let vs = self.v.named_tensors_mut();
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
            .named_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(ms)
            .zip(vs)
        {
            if self.frozen.contains(&name) {
                continue;
            }
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
