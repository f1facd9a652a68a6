//! SGD with Nesterov momentum, Adam, and the two learning-rate schedules.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

/// Per-parameter optimizer state. Auxiliary buffers are allocated lazily on
/// the first step so the optimizer can be built before the parameter shapes
/// are known.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    pub lr: F,
    pub momentum: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step_count: u64,
    velocity: Vec<Vec<F>>,
    first_moment: Vec<Vec<F>>,
    second_moment: Vec<Vec<F>>,
}

impl<F: Float> Optimizer<F> {
    pub fn sgd_nesterov(lr: F, momentum: F) -> Result<Self> {
        if lr <= F::zero() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(Optimizer {
            kind: OptimizerKind::SgdNesterov,
            lr,
            momentum,
            beta1: F::zero(),
            beta2: F::zero(),
            eps: F::zero(),
            step_count: 0,
            velocity: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    /// Adam with betas (0.9, 0.999) and eps 1e-8.
    pub fn adam(lr: F) -> Result<Self> {
        if lr <= F::zero() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            momentum: F::zero(),
            beta1: F::from(0.9).unwrap(),
            beta2: F::from(0.999).unwrap(),
            eps: F::from(1e-8).unwrap(),
            step_count: 0,
            velocity: Vec::new(),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    fn ensure_buffers(bufs: &mut Vec<Vec<F>>, params: &[&mut Tensor<F>]) {
        if bufs.is_empty() {
            *bufs = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        }
    }

    /// Applies one update in place. `grads[i]` must match `params[i]` in
    /// length; gradients for an entire parameter may be absent (treated as
    /// zero) when a parameter did not participate in the loss.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<Vec<F>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Shape(
                        "gradient length does not match parameter".into(),
                    ));
                }
            }
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::SgdNesterov => {
                Self::ensure_buffers(&mut self.velocity, params);
                let (mu, lr) = (self.momentum, self.lr);
                for (i, p) in params.iter_mut().enumerate() {
                    let v = &mut self.velocity[i];
                    let zero = vec![F::zero(); p.len()];
                    let g = grads[i].as_deref().unwrap_or(&zero);
                    for j in 0..p.data.len() {
                        // v <- mu*v - lr*g ; p <- p + mu*v - lr*g
                        v[j] = mu * v[j] - lr * g[j];
                        p.data[j] = p.data[j] + mu * v[j] - lr * g[j];
                    }
                }
            }
            OptimizerKind::Adam => {
                Self::ensure_buffers(&mut self.first_moment, params);
                Self::ensure_buffers(&mut self.second_moment, params);
                let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
                let t = F::from(self.step_count).unwrap();
                let c1 = F::one() - b1.powf(t);
                let c2 = F::one() - b2.powf(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    let zero = vec![F::zero(); p.len()];
                    let g = grads[i].as_deref().unwrap_or(&zero);
                    for j in 0..p.data.len() {
                        m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        p.data[j] = p.data[j] - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// `0.5 * lr0 * (1 + cos(pi*t/t_max))`, floor at 0.
    CosineAnnealing { t_max: u64 },
    /// `lr0 * (1 - t/t_total)^exponent`.
    Poly { t_total: u64, exponent: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, lr0: f64, t: u64) -> Result<f64> {
        if lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        match *self {
            LrSchedule::CosineAnnealing { t_max } => {
                if t > t_max {
                    return Err(Error::Config(format!("t={t} exceeds t_max={t_max}")));
                }
                let phase = std::f64::consts::PI * t as f64 / t_max as f64;
                Ok(0.5 * lr0 * (1.0 + phase.cos()))
            }
            LrSchedule::Poly { t_total, exponent } => {
                if t > t_total {
                    return Err(Error::Config(format!("t={t} exceeds t_total={t_total}")));
                }
                Ok(lr0 * (1.0 - t as f64 / t_total as f64).powf(exponent))
            }
        }
    }
}
