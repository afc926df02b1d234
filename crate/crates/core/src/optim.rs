//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment state plus the shared step counter.
pub struct Adam {
    pub config: AdamConfig,
    step_count: usize,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl Adam {
    /// State sized for `params`; moments start at zero.
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Adam {
        Adam {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// One update over `params`, reading each tensor's accumulated gradient.
    /// Parameters without a gradient this step are left untouched (their
    /// moments still decay consistently on the next seen gradient).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::msg(format!(
                "adam state for {} params, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (i, p) in params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            if grad.len() != self.first_moment[i].len() {
                return Err(Error::msg(format!(
                    "adam moment {} has {} elements, gradient has {}",
                    i,
                    self.first_moment[i].len(),
                    grad.len()
                )));
            }
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let mut data = p.data_mut();
            for j in 0..grad.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }

    /// Flat snapshot for checkpointing: (step_count, moments interleaved
    /// first/second per parameter).
    pub fn state(&self) -> (usize, Vec<Vec<f32>>) {
        let mut blobs = Vec::with_capacity(self.first_moment.len() * 2);
        for (m, v) in self.first_moment.iter().zip(&self.second_moment) {
            blobs.push(m.clone());
            blobs.push(v.clone());
        }
        (self.step_count, blobs)
    }

    pub fn restore(&mut self, step_count: usize, blobs: &[Vec<f32>]) -> Result<()> {
        if blobs.len() != self.first_moment.len() * 2 {
            return Err(Error::msg(format!(
                "adam restore: expected {} moment blobs, got {}",
                self.first_moment.len() * 2,
                blobs.len()
            )));
        }
        for (i, pair) in blobs.chunks(2).enumerate() {
            if pair[0].len() != self.first_moment[i].len() {
                return Err(Error::msg("adam restore: moment size mismatch"));
            }
            self.first_moment[i] = pair[0].clone();
            self.second_moment[i] = pair[1].clone();
        }
        self.step_count = step_count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[p.clone()]);
        p.zero_grad();
        // no backward ran: no grad, so no update
        opt.step(&[p.clone()]).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = Tensor::param(&[2], vec![0.5, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[p.clone()]);
        // constant gradient via a linear loss: d(sum(2x))/dx = 2
        let loss = p.scale(2.0).sum_all();
        loss.backward().unwrap();
        opt.step(&[p.clone()]).unwrap();
        // after bias correction the first step is ~ lr * sign(g)
        let lr = opt.config.learning_rate;
        assert!((p.to_vec()[0] - (0.5 - lr)).abs() < 1e-6);
        assert!((p.to_vec()[1] - (-0.5 - lr)).abs() < 1e-6);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let p = Tensor::param(&[4], vec![2.0, -3.0, 1.5, 0.7]).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &[p.clone()],
        );
        let mut losses = Vec::new();
        for _ in 0..100 {
            p.zero_grad();
            let loss = p.mul(&p).unwrap().sum_all();
            losses.push(loss.item().unwrap());
            loss.backward().unwrap();
            opt.step(&[p.clone()]).unwrap();
        }
        // strict decrease over any 10-step window
        for w in losses.windows(11) {
            assert!(w[10] < w[0], "loss not decreasing: {} -> {}", w[0], w[10]);
        }
    }
}
