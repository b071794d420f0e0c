use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use super::Params;
use crate::{Error, Result, Scalar};

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
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with a constant learning rate. Moment buffers follow the tensor
/// order of the parameter set it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<T>>,
    second: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T> + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<ArrayD<T>> = params
            .tensors()
            .into_iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params<T> + ?Sized>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let lr_t = T::lit(c.learning_rate / (1.0 - c.beta1.powf(t)));
        let bc2 = T::lit((1.0 - c.beta2.powf(t)).sqrt());
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.epsilon));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let grads = grads.tensors();
        for (((_, p), (_, g)), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= lr_t * *m / (v.sqrt() / bc2 + eps);
            });
        }
    }

    /// Moment buffers as named tensors (`m.<i>`, `v.<i>`) for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let m = self.first.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t.view()));
        let v = self
            .second
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("v.{i}"), t.view()));
        m.chain(v).collect()
    }

    pub fn state_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let m = self
            .first
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("m.{i}"), t.view_mut()));
        let v = self
            .second
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (format!("v.{i}"), t.view_mut()));
        m.chain(v).collect()
    }

    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    pub fn check_compatible<P: Params<T> + ?Sized>(&self, params: &P) -> Result<()> {
        let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if shapes.len() != self.first.len() || shapes.iter().zip(&self.first).any(|(s, m)| s.as_slice() != m.shape()) {
            return Err(Error::Incompatible("optimizer state does not match parameters".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::array;

    #[test]
    fn first_step_moves_each_parameter_by_learning_rate() {
        let mut p = Dense {
            weight: array![[1.0f64, -1.0]],
            bias: None,
        };
        let g = Dense {
            weight: array![[0.3, -7.0]],
            bias: None,
        };
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g);
        assert!((p.weight[[0, 0]] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((p.weight[[0, 1]] - (-1.0 + 1e-4)).abs() < 1e-9);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Dense {
            weight: array![[3.0f64, -2.0]],
            bias: None,
        };
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(&p, cfg);
        for _ in 0..2000 {
            let g = Dense {
                weight: p.weight.mapv(|w| 2.0 * w),
                bias: None,
            };
            opt.step(&mut p, &g);
        }
        assert!(p.weight.iter().all(|w| w.abs() < 1e-2));
    }
}
