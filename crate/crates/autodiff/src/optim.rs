//! AdamW with decoupled weight decay.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient. Moment buffers are
    /// allocated on the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "adamw",
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(shape_err("adamw", "parameter count changed between steps"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("adamw", format!("param {:?}, grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let wd = T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::new(&[2], vec![1.0f64, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let g = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(&mut p, &g).unwrap();
        // m_hat / sqrt(v_hat) = 1 on the first step.
        let want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].data()[0] - want).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay() {
        let mut p = vec![Tensor::scalar(1.0f64)];
        let g = vec![Tensor::scalar(0.0)];
        let mut opt = AdamW::new(1e-3, 0.01);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data()[0], 1.0 - 0.001 * 0.01 * 1.0);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        assert!(AdamW::new(1e-3, 0.0).step(&mut p, &g).is_err());
    }
}
