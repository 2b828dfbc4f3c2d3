//! Adam with a two-phase learning rate, Polyak parameter averaging and the
//! training step.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{HeadTarget, Network};
use crate::tensor::Tensor;

pub const BASE_LEARNING_RATE: f64 = 3e-4;

/// Full rate for the first half of training, half of it afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Schedule { base_lr, total_steps }
    }

    pub fn phase(&self, step: u64) -> u8 {
        if 2 * step < self.total_steps {
            0
        } else {
            1
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.phase(step) == 0 {
            self.base_lr
        } else {
            self.base_lr / 2.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let step = lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

/// Exponential moving average of parameters whose mixing rate never falls
/// below the uniform running-mean rate `1/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyak {
    pub decay: f64,
    pub count: u64,
    pub shadow: Vec<f32>,
}

impl Polyak {
    pub fn new(params: &[f32], decay: f64) -> Self {
        Polyak { decay, count: 0, shadow: params.to_vec() }
    }

    pub fn update(&mut self, params: &[f32]) {
        self.count += 1;
        let rate = (1.0 - self.decay).max(1.0 / self.count as f64);
        for (s, &p) in self.shadow.iter_mut().zip(params) {
            *s = (*s as f64 + rate * (p as f64 - *s as f64)) as f32;
        }
    }
}

/// One training example: input stack, lead and optional per-head targets.
pub struct Example<'a> {
    pub input: &'a Tensor<f32>,
    pub lead_min: u32,
    pub targets: Vec<Option<HeadTarget<'a>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub rejected: bool,
}

pub struct Trainer {
    pub schedule: Schedule,
    pub adam: Adam,
    pub polyak: Polyak,
    pub head_weights: Vec<f64>,
    pub step: u64,
    grad: Vec<f32>,
}

impl Trainer {
    pub fn new(net: &Network, params: &[f32], schedule: Schedule, polyak_decay: f64, head_weights: Vec<f64>) -> Self {
        Trainer {
            schedule,
            adam: Adam::new(params.len()),
            polyak: Polyak::new(params, polyak_decay),
            head_weights,
            step: 0,
            grad: vec![0.0; net.param_count()],
        }
    }

    /// Mean loss over the batch, one Adam update and a Polyak update. A
    /// non-finite loss or gradient leaves every state untouched.
    pub fn train_step(&mut self, net: &Network, params: &mut [f32], batch: &[Example<'_>]) -> Result<StepMetrics> {
        self.grad.fill(0.0);
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut loss = 0.0;
        for ex in batch {
            loss += scale
                * net.loss_and_grad(params, ex.input, ex.lead_min, &ex.targets, &self.head_weights, scale, &mut self.grad)?;
        }
        let lr = self.schedule.lr(self.step);
        let finite = loss.is_finite() && self.grad.iter().all(|g| g.is_finite());
        if !finite {
            return Ok(StepMetrics { step: self.step, loss, lr, rejected: true });
        }
        self.adam.update(params, &self.grad, lr);
        self.polyak.update(params);
        let m = StepMetrics { step: self.step, loss, lr, rejected: false };
        self.step += 1;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_at_midpoint() {
        let s = Schedule::new(BASE_LEARNING_RATE, 1000);
        assert_eq!(s.lr(0), 3e-4);
        assert_eq!(s.lr(499), 3e-4);
        assert_eq!(s.lr(500), 1.5e-4);
        assert_eq!(s.lr(999), 1.5e-4);
        assert_eq!(Schedule::new(BASE_LEARNING_RATE, 7).lr(3), 3e-4);
        assert_eq!(Schedule::new(BASE_LEARNING_RATE, 7).lr(4), 1.5e-4);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0f32, -2.0, 0.5];
        adam.update(&mut p, &[0.1, -0.1, 0.2], 1e-3);
        let after = p.clone();
        let (m, v) = (adam.m.clone(), adam.v.clone());
        adam.update(&mut p, &[0.0; 3], 1e-3);
        // moments shrink by their decay factors; the step follows m̂ only
        for i in 0..3 {
            assert!((adam.m[i] - 0.9 * m[i]).abs() < 1e-9);
            assert!((adam.v[i] - (0.999 * v[i] as f64) as f32).abs() < 1e-9);
        }
        let mut fresh = Adam::new(3);
        let mut q = after.clone();
        fresh.update(&mut q, &[0.0; 3], 1e-3);
        assert_eq!(q, after);
        assert!(fresh.m.iter().chain(&fresh.v).all(|&x| x == 0.0));
    }

    #[test]
    fn polyak_limits() {
        let p0 = vec![0.0f32; 2];
        let mut raw = Polyak::new(&p0, 0.0);
        let mut mean = Polyak::new(&p0, 1.0);
        let seq = [[1.0f32, 2.0], [3.0, -2.0], [5.0, 9.0]];
        for (i, p) in seq.iter().enumerate() {
            raw.update(p);
            mean.update(p);
            assert_eq!(raw.shadow, p.to_vec());
            let n = (i + 1) as f32;
            for k in 0..2 {
                let want: f32 = seq[..=i].iter().map(|q| q[k]).sum::<f32>() / n;
                assert!((mean.shadow[k] - want).abs() < 1e-6);
            }
        }
    }

    /// Independent scalar Adam on f(x) = Σ aᵢ (xᵢ - cᵢ)², with parameters
    /// and moments stored at single precision.
    fn reference_bowl(x0: &[f64], a: &[f64], c: &[f64], steps: usize, lr: f64) -> Vec<f64> {
        let f = |v: f64| v as f32 as f64;
        let mut x: Vec<f64> = x0.iter().map(|&v| f(v)).collect();
        let mut m = vec![0.0; x.len()];
        let mut v = vec![0.0; x.len()];
        let mut losses = Vec::new();
        for t in 1..=steps {
            let mut loss = 0.0;
            for i in 0..x.len() {
                let d = x[i] - c[i];
                loss += a[i] * d * d;
                let g = f(2.0 * a[i] * d);
                let (mf, vf) = (0.9 * m[i] + 0.1 * g, 0.999 * v[i] + 0.001 * g * g);
                m[i] = f(mf);
                v[i] = f(vf);
                let mh = mf / (1.0 - 0.9f64.powi(t as i32));
                let vh = vf / (1.0 - 0.999f64.powi(t as i32));
                x[i] = f(x[i] - lr * mh / (vh.sqrt() + 1e-8));
            }
            losses.push(loss);
        }
        losses
    }

    #[test]
    fn quadratic_bowl_converges() {
        let a = [1.0, 3.0, 0.5, 2.0];
        let c = [0.3, -0.2, 0.1, 0.0];
        let x0 = [0.3 + 0.03, -0.2 - 0.025, 0.1 + 0.02, 0.03];
        let steps = 200;
        let mut x: Vec<f32> = x0.iter().map(|&v| v as f32).collect();
        let mut adam = Adam::new(4);
        let mut losses = Vec::new();
        for _ in 0..steps {
            let mut loss = 0.0;
            let g: Vec<f32> = (0..4)
                .map(|i| {
                    let d = x[i] as f64 - c[i];
                    loss += a[i] * d * d;
                    (2.0 * a[i] * d) as f32
                })
                .collect();
            losses.push(loss);
            adam.update(&mut x, &g, BASE_LEARNING_RATE);
        }
        let reference = reference_bowl(&x0, &a, &c, steps, BASE_LEARNING_RATE);
        for (l, r) in losses.iter().zip(&reference) {
            assert!((l - r).abs() <= 1e-5 * r.max(1e-6), "{l} vs {r}");
        }
        let warmup = 10;
        for w in losses[warmup..].windows(2) {
            assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
        }
        assert!(losses[steps - 1] < 0.01 * losses[0], "final {} initial {}", losses[steps - 1], losses[0]);
    }
}
