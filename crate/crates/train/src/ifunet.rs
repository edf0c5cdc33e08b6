//! IFUnet: a Unet whose skip connections pass through Inceptionformer blocks.
//!
//! Encoder level `l` runs two 3x3 conv + GELU layers at `base * 2^l`
//! channels, then a 2x2 max pool. The decoder upsamples (nearest, then a
//! 3x3 conv), concatenates the transformed skip and runs two more convs. A
//! final 1x1 conv produces one channel.

use std::collections::BTreeMap;

use pact_autodiff::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IFUnetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Channel shares of the pooled-conv, conv and attention branches.
    pub split: [f64; 3],
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Pooling inside the mixer's pooled branches.
    #[serde(default = "default_pool")]
    pub mixer_pool: PoolKind,
}

fn default_pool() -> PoolKind {
    PoolKind::Avg
}

impl Default for IFUnetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl IFUnetConfig {
    pub fn desk() -> Self {
        Self {
            depth: 3,
            base_channels: 16,
            split: [0.25, 0.25, 0.5],
            heads: 2,
            ffn_expansion: 4,
            mixer_pool: PoolKind::Avg,
        }
    }

    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            heads: 1,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.ffn_expansion == 0 || self.heads == 0 {
            return bad("base_channels, ffn_expansion and heads must be positive".into());
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.split));
        }
        for l in 0..self.depth {
            let (a, b, c) = split_sizes(self.channels(l), self.split);
            if a == 0 || b == 0 || c == 0 {
                return bad(format!("level {l}: split ({a}, {b}, {c}) leaves an empty branch"));
            }
            if c % self.heads != 0 {
                return Err(TrainError::IndivisibleHeads {
                    channels: c,
                    heads: self.heads,
                });
            }
        }
        Ok(())
    }

    /// Shapes of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let mut cin = 1;
        for l in 0..self.depth {
            let c = self.channels(l);
            conv(format!("enc{l}.conv1"), c, cin, 3);
            conv(format!("enc{l}.conv2"), c, c, 3);
            cin = c;
        }
        let cb = self.channels(self.depth);
        conv("bottleneck.conv1".into(), cb, cin, 3);
        conv("bottleneck.conv2".into(), cb, cb, 3);
        let mut below = cb;
        for l in (0..self.depth).rev() {
            let c = self.channels(l);
            conv(format!("dec{l}.up"), c, below, 3);
            conv(format!("dec{l}.conv1"), c, 2 * c, 3);
            conv(format!("dec{l}.conv2"), c, c, 3);
            below = c;
        }
        conv("head".into(), 1, self.base_channels, 1);
        for l in 0..self.depth {
            out.extend(block_param_shapes(&format!("skip{l}"), self.channels(l), self));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Channel split: floor for the first two groups, remainder to attention.
pub fn split_sizes(c: usize, split: [f64; 3]) -> (usize, usize, usize) {
    let a = (split[0] * c as f64).floor() as usize;
    let b = (split[1] * c as f64).floor() as usize;
    (a, b, c.saturating_sub(a + b))
}

fn block_param_shapes(prefix: &str, c: usize, cfg: &IFUnetConfig) -> Vec<(String, Vec<usize>)> {
    let (cp, cc, ca) = split_sizes(c, cfg.split);
    let e = cfg.ffn_expansion * c;
    let mut v = Vec::new();
    let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
        v.push((format!("{prefix}.{name}.w"), vec![cout, cin, k, k]));
        v.push((format!("{prefix}.{name}.b"), vec![cout]));
    };
    conv("mixer.pool_conv", cp, cp, 3);
    conv("mixer.conv1", cc, cc, 1);
    conv("mixer.conv3", cc, cc, 3);
    conv("mixer.q", ca, ca, 1);
    conv("mixer.k", ca, ca, 1);
    conv("mixer.v", ca, ca, 1);
    conv("mixer.attn_out", ca, ca, 1);
    conv("mixer.fuse3", c, c, 3);
    conv("mixer.fuse1", c, c, 1);
    conv("ffn.fc1", e, c, 1);
    conv("ffn.fc2", c, e, 1);
    for ln in ["ln1", "ln2"] {
        v.push((format!("{prefix}.{ln}.gamma"), vec![c]));
        v.push((format!("{prefix}.{ln}.beta"), vec![c]));
    }
    v
}

/// Named parameter tensors in the order of [`IFUnetConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct IFUnetParams<T: Real> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases and
/// norm offsets, unit norm gains.
pub fn init_params<T: Real>(cfg: &IFUnetConfig, seed: u64) -> Result<IFUnetParams<T>> {
    cfg.validate()?;
    let mut rng = pact_core::rng::seeded(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in cfg.param_shapes() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, T::one())
        } else if name.ends_with(".w") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::new(&shape, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect())?
        } else {
            Tensor::zeros(&shape)
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(IFUnetParams { names, tensors })
}

impl<T: Real> IFUnetParams<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> IFUnetParams<U> {
        IFUnetParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Checks names and shapes against `cfg`.
    pub fn check(&self, cfg: &IFUnetConfig) -> Result<()> {
        let shapes = cfg.param_shapes();
        if shapes.len() != self.names.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} parameters, config needs {}",
                self.names.len(),
                shapes.len()
            )));
        }
        for ((name, shape), (n, t)) in shapes.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), g.param(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a parameter set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs names with existing graph nodes, e.g. leaves created by a
    /// gradient check.
    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TrainError::Checkpoint(format!("missing parameter {name}")))
    }

    /// Handles in the parameter order of `params`.
    pub fn ordered<T: Real>(&self, params: &IFUnetParams<T>) -> Vec<Var> {
        params.names.iter().map(|n| self.vars[n]).collect()
    }
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b))?)
}

fn pool<T: Real>(g: &mut Graph<T>, kind: PoolKind, x: Var) -> Result<Var> {
    Ok(match kind {
        PoolKind::Avg => g.avgpool2d(x)?,
        PoolKind::Max => g.maxpool2d(x)?,
    })
}

/// Multi-head self-attention over the spatial positions of `x: [B, C, h, w]`.
fn attention<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = c / heads;
    let n = h * w;
    let q = conv(g, p, &format!("{prefix}.q"), x)?;
    let k = conv(g, p, &format!("{prefix}.k"), x)?;
    let v = conv(g, p, &format!("{prefix}.v"), x)?;
    let q = g.reshape(q, &[b * heads, d, n])?;
    let k = g.reshape(k, &[b * heads, d, n])?;
    let v = g.reshape(v, &[b * heads, d, n])?;
    let scores = g.bmm(q, k, true, false, T::lit(1.0 / (d as f64).sqrt()))?;
    let probs = g.softmax(scores);
    let mixed = g.bmm(v, probs, false, true, T::one())?;
    let mixed = g.reshape(mixed, &[b, c, h, w])?;
    conv(g, p, &format!("{prefix}.attn_out"), mixed)
}

/// Three-branch channel mixer; spatial shape is preserved.
pub fn inception_mixer<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    cfg: &IFUnetConfig,
    x: Var,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(TrainError::BadShape(format!("mixer input {s:?} needs even spatial size")));
    }
    let (cp, cc, ca) = split_sizes(s[1], cfg.split);
    if cp == 0 || cc == 0 || ca == 0 {
        return Err(TrainError::BadShape(format!("{} channels split into ({cp}, {cc}, {ca})", s[1])));
    }
    if ca % cfg.heads != 0 {
        return Err(TrainError::IndivisibleHeads {
            channels: ca,
            heads: cfg.heads,
        });
    }
    let x1 = g.split(x, 0, cp)?;
    let x2 = g.split(x, cp, cc)?;
    let x3 = g.split(x, cp + cc, ca)?;

    let z1 = pool(g, cfg.mixer_pool, x1)?;
    let z1 = conv(g, p, &format!("{prefix}.pool_conv"), z1)?;
    let z1 = g.gelu(z1);
    let z1 = g.upsample2d(z1)?;

    let z2 = conv(g, p, &format!("{prefix}.conv1"), x2)?;
    let z2 = conv(g, p, &format!("{prefix}.conv3"), z2)?;
    let z2 = g.gelu(z2);

    let z3 = pool(g, cfg.mixer_pool, x3)?;
    let z3 = attention(g, p, prefix, cfg.heads, z3)?;
    let z3 = g.upsample2d(z3)?;

    let zcat = g.concat(&[z1, z2, z3])?;
    let local = conv(g, p, &format!("{prefix}.fuse3"), zcat)?;
    let fused = g.add(zcat, local)?;
    conv(g, p, &format!("{prefix}.fuse1"), fused)
}

/// `y = x + Mixer(LN(x))`, then `y + FFN(LN(y))`.
pub fn inceptionformer_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    cfg: &IFUnetConfig,
    x: Var,
) -> Result<Var> {
    let n1 = g.layernorm(x, p.var(&format!("{prefix}.ln1.gamma"))?, p.var(&format!("{prefix}.ln1.beta"))?)?;
    let m = inception_mixer(g, p, &format!("{prefix}.mixer"), cfg, n1)?;
    let y = g.add(x, m)?;
    let n2 = g.layernorm(y, p.var(&format!("{prefix}.ln2.gamma"))?, p.var(&format!("{prefix}.ln2.beta"))?)?;
    let f = conv(g, p, &format!("{prefix}.ffn.fc1"), n2)?;
    let f = g.gelu(f);
    let f = conv(g, p, &format!("{prefix}.ffn.fc2"), f)?;
    Ok(g.add(y, f)?)
}

/// Runs the network on `x: [B, 1, N, N]`. When `trace` is given, the output
/// of every stage is appended to it, labelled.
pub fn forward_traced<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &IFUnetConfig,
    x: Var,
    mut trace: Option<&mut Vec<(String, Var)>>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let step = 1usize << cfg.depth;
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] || s[2] == 0 || s[2] % step != 0 {
        return Err(TrainError::BadShape(format!(
            "network input {s:?} must be [B, 1, N, N] with N divisible by {step}"
        )));
    }
    let mut record = |name: String, v: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((name, v));
        }
    };
    let mut h = x;
    let mut skips = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let a = conv(g, p, &format!("enc{l}.conv1"), h)?;
        let a = g.gelu(a);
        let a = conv(g, p, &format!("enc{l}.conv2"), a)?;
        let a = g.gelu(a);
        record(format!("enc{l}"), a);
        let sk = inceptionformer_block(g, p, &format!("skip{l}"), cfg, a)?;
        record(format!("skip{l}"), sk);
        skips.push(sk);
        h = g.maxpool2d(a)?;
    }
    let b = conv(g, p, "bottleneck.conv1", h)?;
    let b = g.gelu(b);
    let b = conv(g, p, "bottleneck.conv2", b)?;
    h = g.gelu(b);
    record("bottleneck".into(), h);
    for l in (0..cfg.depth).rev() {
        let u = g.upsample2d(h)?;
        let u = conv(g, p, &format!("dec{l}.up"), u)?;
        let u = g.gelu(u);
        let cat = g.concat(&[u, skips[l]])?;
        let a = conv(g, p, &format!("dec{l}.conv1"), cat)?;
        let a = g.gelu(a);
        let a = conv(g, p, &format!("dec{l}.conv2"), a)?;
        h = g.gelu(a);
        record(format!("dec{l}"), h);
    }
    let out = conv(g, p, "head", h)?;
    record("head".into(), out);
    Ok(out)
}

pub fn forward<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &IFUnetConfig, x: Var) -> Result<Var> {
    forward_traced(g, p, cfg, x, None)
}

/// Forward pass without gradients.
pub fn predict<T: Real>(params: &IFUnetParams<T>, cfg: &IFUnetConfig, x: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind_frozen(params, &mut g);
    let xv = g.input(x);
    let out = forward(&mut g, &bound, cfg, xv)?;
    Ok(g.value(out).clone())
}

fn bind_frozen<T: Real>(params: &IFUnetParams<T>, g: &mut Graph<T>) -> Bound {
    let vars = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), g.input(t.clone())))
        .collect();
    Bound { vars }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(13, [0.25, 0.25, 0.5]), (3, 3, 7));
        assert_eq!(split_sizes(12, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), (4, 4, 4));
    }

    #[test]
    fn config_validation() {
        assert!(IFUnetConfig::desk().validate().is_ok());
        assert!(IFUnetConfig::tiny().validate().is_ok());
        let shallow = IFUnetConfig {
            depth: 1,
            ..IFUnetConfig::tiny()
        };
        assert!(matches!(shallow.validate(), Err(TrainError::InvalidConfig(_))));
        let heads = IFUnetConfig {
            heads: 3,
            ..IFUnetConfig::tiny()
        };
        assert!(matches!(heads.validate(), Err(TrainError::IndivisibleHeads { .. })));
        let sums = IFUnetConfig {
            split: [0.25, 0.25, 0.4],
            ..IFUnetConfig::tiny()
        };
        assert!(sums.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a: IFUnetParams<f32> = init_params(&IFUnetConfig::tiny(), 3).unwrap();
        let b: IFUnetParams<f32> = init_params(&IFUnetConfig::tiny(), 3).unwrap();
        assert_eq!(a, b);
        for (n, t) in a.names.iter().zip(&a.tensors) {
            if n.ends_with(".b") || n.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{n}");
            }
            if n.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{n}");
            }
        }
        let c: IFUnetParams<f32> = init_params(&IFUnetConfig::tiny(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique() {
        let shapes = IFUnetConfig::desk().param_shapes();
        let set: std::collections::BTreeSet<_> = shapes.iter().map(|(n, _)| n).collect();
        assert_eq!(set.len(), shapes.len());
    }

    #[test]
    fn forward_rejects_bad_sizes() {
        let cfg = IFUnetConfig::tiny();
        let p: IFUnetParams<f64> = init_params(&cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 10, 10]);
        assert!(matches!(predict(&p, &cfg, x), Err(TrainError::BadShape(_))));
    }
}
