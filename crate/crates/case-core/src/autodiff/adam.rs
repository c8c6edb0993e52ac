use std::rc::Rc;

use crate::autodiff::tensor::Tensor;
use crate::error::{CaseError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When false (default) the decay term is added to the gradient before
    /// the moment updates (classic L2 coupling); when true it is applied as a
    /// separate multiplicative shrink after the Adam step.
    pub decoupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
        }
    }
}

/// Adam with bias correction. Optimizer state is kept per parameter tensor in
/// the order of the first `step` call; later calls must pass the same list.
pub struct Adam<F: Scalar> {
    cfg: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Rc<Tensor<F>>], grads: &[Tensor<F>]) -> Result<()> {
        assert_eq!(
            params.len(),
            grads.len(),
            "adam: {} params but {} grads",
            params.len(),
            grads.len()
        );
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "adam: parameter list changed size");
        self.t += 1;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one_m_b1 = F::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let lr = F::from_f64(self.cfg.lr);
        let wd = F::from_f64(self.cfg.weight_decay);
        // Bias corrections in f64 regardless of compute type.
        let inv_bc1 = F::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let inv_bc2 = F::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let shrink = F::from_f64(1.0 - self.cfg.lr * self.cfg.weight_decay);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(
                p.shape(),
                g.shape(),
                "adam: param {} shape {:?} vs grad shape {:?}",
                i,
                p.shape(),
                g.shape()
            );
            if !g.is_all_finite() {
                return Err(CaseError::Training(format!(
                    "non-finite gradient for parameter {i} of shape {:?}",
                    g.shape()
                )));
            }
            let theta = Rc::make_mut(p);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((th, &gv), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g_eff = if self.cfg.decoupled_weight_decay {
                    gv
                } else {
                    gv + wd * *th
                };
                *mi = b1 * *mi + one_m_b1 * g_eff;
                *vi = b2 * *vi + one_m_b2 * g_eff * g_eff;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *th -= lr * mhat / (vhat.sqrt() + eps);
                if self.cfg.decoupled_weight_decay {
                    *th *= shrink;
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient list, in f64.
pub fn global_grad_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so the global norm does not exceed `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}
