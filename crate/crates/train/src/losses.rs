//! The five-term objective. Every term sums over pixels or samples and
//! averages over the batch.

use std::sync::Arc;

use pact_autodiff::{Graph, LinearMap, Real, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mdc: f64,
    pub mic: f64,
    pub ei: f64,
    pub dwt: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mdc: 3.0,
            mic: 13.0,
            ei: 6.0,
            dwt: 0.002,
            tv: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(TrainError::InvalidConfig(format!("loss weight {n} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("mdc", self.mdc), ("mic", self.mic), ("ei", self.ei), ("dwt", self.dwt), ("tv", self.tv)]
    }
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mdc: f64,
    pub mic: f64,
    pub ei: f64,
    pub dwt: f64,
    pub tv: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [("mdc", self.mdc), ("mic", self.mic), ("ei", self.ei), ("dwt", self.dwt), ("tv", self.tv)]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named().iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// `w_mdc L_mdc + w_mic L_mic + w_ei L_ei + w_dwt L_dwt + w_tv L_tv`,
/// accumulated in that order.
pub fn loss_total(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if let Some(term) = c.non_finite() {
        return Err(TrainError::NonFiniteLoss { term, epoch: 0, batch: 0 });
    }
    Ok(w.mdc * c.mdc + w.mic * c.mic + w.ei * c.ei + w.dwt * c.dwt + w.tv * c.tv)
}

fn batch_of<T: Real>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v)[0]
}

fn batch_mean<T: Real>(g: &mut Graph<T>, total: Var, batch: usize) -> Var {
    g.scale(total, T::lit(1.0 / batch as f64))
}

/// `|ps1 - ps2|_1 + |p1 - ps1|_1 + |p1 - ps2|_1`.
pub fn loss_mic<T: Real>(g: &mut Graph<T>, p1: Var, ps1: Var, ps2: Var) -> Result<Var> {
    let b = batch_of(g, p1);
    let d0 = g.sub(ps1, ps2)?;
    let d1 = g.sub(p1, ps1)?;
    let d2 = g.sub(p1, ps2)?;
    let (l0, l1, l2) = (g.l1(d0), g.l1(d1), g.l1(d2));
    let s = g.add(l0, l1)?;
    let s = g.add(s, l2)?;
    Ok(batch_mean(g, s, b))
}

/// `|A ps1 - y|^2 + |A ps2 - y|^2 + |A p1 - y|^2` against the full `y`.
pub fn loss_mdc<T: Real>(
    g: &mut Graph<T>,
    a: &Arc<dyn LinearMap<T>>,
    p1: Var,
    ps1: Var,
    ps2: Var,
    y: Var,
) -> Result<Var> {
    let b = batch_of(g, p1);
    let mut total = None;
    for p in [ps1, ps2, p1] {
        let ap = g.linear(p, a.clone(), false)?;
        let r = g.sub(ap, y)?;
        let term = g.sumsq(r);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(batch_mean(g, total.unwrap(), b))
}

/// `|p2 - p3|^2`.
pub fn loss_ei<T: Real>(g: &mut Graph<T>, p2: Var, p3: Var) -> Result<Var> {
    let b = batch_of(g, p2);
    let d = g.sub(p2, p3)?;
    let s = g.sumsq(d);
    Ok(batch_mean(g, s, b))
}

/// Sum of `|T p|_1` over a batch that stacks several image sets, divided by
/// the per-set batch size `b`.
pub fn loss_l1_transform<T: Real>(g: &mut Graph<T>, t: &Arc<dyn LinearMap<T>>, images: Var, b: usize) -> Result<Var> {
    let c = g.linear(images, t.clone(), false)?;
    let s = g.l1(c);
    Ok(batch_mean(g, s, b))
}

/// Graph handles of the five terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mdc: Var,
    pub mic: Var,
    pub ei: Var,
    pub dwt: Var,
    pub tv: Var,
}

impl LossVars {
    pub fn total<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Result<Var> {
        let terms = [(self.mdc, w.mdc), (self.mic, w.mic), (self.ei, w.ei), (self.dwt, w.dwt), (self.tv, w.tv)];
        let mut acc = g.scale(terms[0].0, T::lit(terms[0].1));
        for &(v, wt) in &terms[1..] {
            let s = g.scale(v, T::lit(wt));
            acc = g.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossComponents {
        let f = |v: Var| g.scalar(v).to_f64().unwrap_or(f64::NAN);
        LossComponents {
            mdc: f(self.mdc),
            mic: f(self.mic),
            ei: f(self.ei),
            dwt: f(self.dwt),
            tv: f(self.tv),
        }
    }
}
