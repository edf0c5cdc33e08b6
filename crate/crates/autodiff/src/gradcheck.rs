//! Central finite-difference verification of backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients that are
/// (nearly) zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Worst relative error per input, in argument order.
    pub max_rel_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of every input against central differences
/// with step `h`.
///
/// `build` maps the input leaves to an output of any shape; the checked scalar
/// is the output contracted with a fixed pseudo-random weight tensor, so every
/// output element contributes.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, tolerance: f64, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let shape = g.shape(out).to_vec();
        let data = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&shape, data)?
    };
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let w = g.input(weights.clone());
        let p = g.mul(out, w)?;
        let l = g.sum(p);
        Ok(g.scalar(l))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = g.input(weights.clone());
    let p = g.mul(out, w)?;
    let l = g.sum(p);
    g.backward(l)?;

    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut worst: f64 = 0.0;
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[j] = x0 - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
        max_rel_err.push(worst);
    }
    Ok(GradcheckReport {
        max_rel_err,
        tolerance,
    })
}
