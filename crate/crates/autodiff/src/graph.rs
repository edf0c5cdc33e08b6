use std::sync::Arc;

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, ConvShape};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear operator applied item-by-item along the batch axis.
///
/// Used to splice physics operators (projection, backprojection, wavelet and
/// gradient transforms, rotations) into a graph. The backward rule is the
/// adjoint, so implementors must keep `apply` and `apply_adjoint` exactly
/// transposed.
pub trait LinearMap<T: Real>: Send + Sync {
    /// Per-item input shape.
    fn in_shape(&self) -> Vec<usize>;
    /// Per-item output shape.
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T], y: &mut [T]);
    fn apply_adjoint(&self, y: &[T], x: &mut [T]);
    fn name(&self) -> &'static str {
        "linear"
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    ChannelBias(Var, Var),
    Sum(Var),
    Mean(Var),
    L1(Var),
    SumSq(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: T,
        dims: (usize, usize, usize, usize),
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AvgPool2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Concat(Vec<Var>),
    Split {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        map: Arc<dyn LinearMap<T>>,
        adjoint: bool,
    },
    ScaleItems(Var, Vec<T>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Tape of tensor operations. Build forward values with the op methods,
/// then call [`Graph::backward`] once on a scalar loss.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .ok_or_else(|| shape_err(op, format!("expected 4-d input, got {:?}", self.shape(v))))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Adds a per-channel bias `b` (shape `[C]`) along axis 1 of `x`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(shape_err(
                "add_channel_bias",
                format!("x {:?}, bias {:?}", shape, self.shape(b)),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % shape[1]];
        }
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(value, Op::ChannelBias(x, b), tracked))
    }

    /// Copy of `a` cut from the graph: no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.input(value)
    }

    // ---- reductions --------------------------------------------------------

    fn reduce(&mut self, a: Var, op: Op<T>, f: impl Fn(&[T]) -> T) -> Var {
        let v = f(self.value(a).data());
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(v), op, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Sum(a), |d| d.iter().copied().sum())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Mean(a), |d| {
            d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap()
        })
    }

    /// Sum of absolute values.
    pub fn l1(&mut self, a: Var) -> Var {
        self.reduce(a, Op::L1(a), |d| d.iter().map(|x| x.abs()).sum())
    }

    /// Sum of squares.
    pub fn sumsq(&mut self, a: Var) -> Var {
        self.reduce(a, Op::SumSq(a), |d| d.iter().map(|&x| x * x).sum())
    }

    // ---- dense products ----------------------------------------------------

    /// 2-d matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false, false, T::one())?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched product `alpha · op(a) · op(b)` over 3-d tensors `[G, rows, cols]`.
    /// `ta`/`tb` transpose the trailing two axes of the respective operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err(
                "bmm",
                format!("inner dims differ: {:?}{} x {:?}{}", sa, if ta { "^T" } else { "" }, sb, if tb { "^T" } else { "" }),
            ));
        }
        let g = sa[0];
        let mut out = vec![T::zero(); g * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..g {
                kernels::gemm(
                    ta,
                    tb,
                    m,
                    n,
                    k,
                    alpha,
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(&[g, m, n], out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                alpha,
                dims: (g, m, n, k),
            },
            tracked,
        ))
    }

    // ---- convolution and resampling ----------------------------------------

    /// Stride-1 convolution with "same" zero padding. `w` is `[Cout, Cin, kh, kw]`
    /// with odd kernel sizes; `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, cin, h, wd] = self.dims4("conv2d", x)?;
        let [cout, wcin, kh, kw] = self.dims4("conv2d", w)?;
        if wcin != cin || kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} outputs", self.shape(b), cout)));
            }
        }
        let s = ConvShape {
            batch,
            cin,
            cout,
            h,
            w: wd,
            kh,
            kw,
        };
        let mut out = vec![T::zero(); batch * cout * h * wd];
        kernels::conv2d_forward(
            &s,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor::new(&[batch, cout, h, wd], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b }, tracked))
    }

    fn even_dims(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let d = self.dims4(op, x)?;
        if d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(shape_err(op, format!("spatial dims must be even, got {:?}", d)));
        }
        Ok(d)
    }

    pub fn avgpool2d(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.even_dims("avgpool2d", x)?;
        let mut out = vec![T::zero(); b * c * h * w / 4];
        kernels::avgpool2(b * c, h, w, self.value(x).data(), &mut out);
        let value = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), tracked))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.even_dims("maxpool2d", x)?;
        let n = b * c * h * w / 4;
        let mut out = vec![T::zero(); n];
        let mut argmax = vec![0usize; n];
        kernels::maxpool2(b * c, h, w, self.value(x).data(), &mut out, &mut argmax);
        let value = Tensor::new(&[b, c, h / 2, w / 2], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, tracked))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("upsample2d", x)?;
        let mut out = vec![T::zero(); b * c * h * w * 4];
        kernels::upsample2(b * c, h, w, self.value(x).data(), &mut out);
        let value = Tensor::new(&[b, c, 2 * h, 2 * w], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Upsample2(x), tracked))
    }

    // ---- normalization -----------------------------------------------------

    /// Layer normalization across channels at every (batch, position) of a
    /// `[B, C, H, W]` tensor, followed by a learned per-channel affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4("layernorm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layernorm",
                format!("affine {:?}/{:?} for {} channels", self.shape(gamma), self.shape(beta), c),
            ));
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); b * hw];
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            let mut mean = vec![T::zero(); hw];
            for ci in 0..c {
                kernels::axpy(T::one(), &xd[base + ci * hw..base + (ci + 1) * hw], &mut mean);
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            let mut var = vec![T::zero(); hw];
            for ci in 0..c {
                let row = &xd[base + ci * hw..base + (ci + 1) * hw];
                for p in 0..hw {
                    let d = row[p] - mean[p];
                    var[p] += d * d;
                }
            }
            let rs = &mut rstd[bi * hw..(bi + 1) * hw];
            for p in 0..hw {
                rs[p] = T::one() / (var[p] * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let off = base + ci * hw;
                for p in 0..hw {
                    let xh = (xd[off + p] - mean[p]) * rs[p];
                    xhat[off + p] = xh;
                    out[off + p] = xh * g[ci] + bt[ci];
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let tracked = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Softmax(x), tracked)
    }

    // ---- layout ------------------------------------------------------------

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", format!("rank of {:?} < 2", first)));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            channels += s[1];
        }
        let inner: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(first[0] * channels * inner);
        for b in 0..first[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracked))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn split(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(shape_err("split", format!("{}..{} of {:?}", start, start + len, s)));
        }
        let inner: usize = s[2..].iter().product();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        let d = self.value(x).data();
        for b in 0..s[0] {
            let off = (b * s[1] + start) * inner;
            out.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Split { x, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    // ---- external linear operators -----------------------------------------

    /// Applies `map` (or its adjoint) to every batch item of `x`.
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap<T>>, adjoint: bool) -> Result<Var> {
        let (ishape, oshape) = if adjoint {
            (map.out_shape(), map.in_shape())
        } else {
            (map.in_shape(), map.out_shape())
        };
        let s = self.shape(x).to_vec();
        let in_len: usize = ishape.iter().product();
        let out_len: usize = oshape.iter().product();
        if s.len() < 2 || s[1..].iter().product::<usize>() != in_len {
            return Err(shape_err(
                map.name(),
                format!("input {:?}, operator expects [B, {:?}]", s, ishape),
            ));
        }
        let mut out = vec![T::zero(); s[0] * out_len];
        let d = self.value(x).data();
        for b in 0..s[0] {
            let src = &d[b * in_len..(b + 1) * in_len];
            let dst = &mut out[b * out_len..(b + 1) * out_len];
            if adjoint {
                map.apply_adjoint(src, dst);
            } else {
                map.apply(src, dst);
            }
        }
        let mut shape = vec![s[0]];
        shape.extend(oshape);
        let value = Tensor::new(&shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Linear { x, map, adjoint }, tracked))
    }

    /// Multiplies batch item `b` by the constant `factors[b]`.
    pub fn scale_items(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if factors.len() != s[0] {
            return Err(shape_err("scale_items", format!("{} factors for {:?}", factors.len(), s)));
        }
        let inner = self.value(x).len() / s[0];
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= factors[i / inner];
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::ScaleItems(x, factors), tracked))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients land on every tracked
    /// node reachable from the loss; others keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, t) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.tracked {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => node.grad = Some(t),
                }
            }
        }
        if cfg!(debug_assertions) {
            for (i, n) in self.nodes.iter().enumerate() {
                if let Some(g) = &n.grad {
                    if !g.is_finite() && n.value.is_finite() {
                        return Err(AutodiffError::NonFiniteGradient(i));
                    }
                }
            }
        }
        Ok(())
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v), data).expect("gradient shape follows value shape")
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let gd = g.data();
        let val = |v: Var| self.value(v).data();
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let ga = gd.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Abs(a) => {
                let ga = gd.iter().zip(val(*a)).map(|(&g, &x)| g * sign(x)).collect();
                vec![(*a, self.like(*a, ga))]
            }
            Op::Relu(a) => {
                let ga = gd
                    .iter()
                    .zip(val(*a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, self.like(*a, ga))]
            }
            Op::Gelu(a) => {
                let ga = gd.iter().zip(val(*a)).map(|(&g, &x)| g * gelu_grad(x)).collect();
                vec![(*a, self.like(*a, ga))]
            }
            Op::ChannelBias(x, b) => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let mut gb = vec![T::zero(); s[1]];
                for (j, chunk) in gd.chunks(inner).enumerate() {
                    gb[j % s[1]] += chunk.iter().copied().sum::<T>();
                }
                vec![(*x, g.clone()), (*b, self.like(*b, gb))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), gd[0]))],
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len()).unwrap();
                vec![(*a, Tensor::full(self.shape(*a), gd[0] / n))]
            }
            Op::L1(a) => vec![(*a, self.value(*a).map(|x| gd[0] * sign(x)))],
            Op::SumSq(a) => {
                let two = T::lit(2.0) * gd[0];
                vec![(*a, self.value(*a).map(|x| two * x))]
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                alpha,
                dims: (gcount, m, n, k),
            } => {
                let (m, n, k) = (*m, *n, *k);
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![T::zero(); da.len()];
                let mut gbv = vec![T::zero(); db.len()];
                for q in 0..*gcount {
                    let gq = &gd[q * m * n..(q + 1) * m * n];
                    let aq = &da[q * m * k..(q + 1) * m * k];
                    let bq = &db[q * k * n..(q + 1) * k * n];
                    let gaq = &mut ga[q * m * k..(q + 1) * m * k];
                    if *ta {
                        // stored k x m: dA = op(B) · dC^T
                        kernels::gemm(*tb, true, k, m, n, *alpha, bq, gq, gaq);
                    } else {
                        kernels::gemm(false, !*tb, m, k, n, *alpha, gq, bq, gaq);
                    }
                    let gbq = &mut gbv[q * k * n..(q + 1) * k * n];
                    if *tb {
                        // stored n x k: dB = dC^T · op(A)
                        kernels::gemm(true, *ta, n, k, m, *alpha, gq, aq, gbq);
                    } else {
                        kernels::gemm(!*ta, false, k, n, m, *alpha, aq, gq, gbq);
                    }
                }
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gbv))]
            }
            Op::Conv2d { x, w, b } => {
                let [batch, cin, h, wd] = self.value(*x).dims4().unwrap();
                let [cout, _, kh, kw] = self.value(*w).dims4().unwrap();
                let s = ConvShape {
                    batch,
                    cin,
                    cout,
                    h,
                    w: wd,
                    kh,
                    kw,
                };
                let want_x = self.nodes[x.0].tracked;
                let want_w = self.nodes[w.0].tracked;
                let want_b = b.map(|b| self.nodes[b.0].tracked).unwrap_or(false);
                let mut gx = if want_x { vec![T::zero(); val(*x).len()] } else { vec![] };
                let mut gw = if want_w { vec![T::zero(); val(*w).len()] } else { vec![] };
                let mut gbv = if want_b { vec![T::zero(); cout] } else { vec![] };
                kernels::conv2d_backward(
                    &s,
                    val(*x),
                    val(*w),
                    gd,
                    want_x.then_some(&mut gx[..]),
                    want_w.then_some(&mut gw[..]),
                    want_b.then_some(&mut gbv[..]),
                );
                let mut out = Vec::new();
                if want_x {
                    out.push((*x, self.like(*x, gx)));
                }
                if want_w {
                    out.push((*w, self.like(*w, gw)));
                }
                if let (Some(b), true) = (b, want_b) {
                    out.push((*b, self.like(*b, gbv)));
                }
                out
            }
            Op::AvgPool2(x) => {
                let [bb, c, h, w] = self.value(*x).dims4().unwrap();
                let mut gx = vec![T::zero(); bb * c * h * w];
                let up_shape = (bb * c, h / 2, w / 2);
                kernels::upsample2(up_shape.0, up_shape.1, up_shape.2, gd, &mut gx);
                let q = T::lit(0.25);
                gx.iter_mut().for_each(|v| *v *= q);
                vec![(*x, self.like(*x, gx))]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); val(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += gd[o];
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::Upsample2(x) => {
                let [bb, c, h, w] = self.value(*x).dims4().unwrap();
                let ow = 2 * w;
                let mut gx = vec![T::zero(); bb * c * h * w];
                for p in 0..bb * c {
                    let go = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for ii in 0..h {
                        for jj in 0..w {
                            let r0 = 2 * ii * ow + 2 * jj;
                            gx[p * h * w + ii * w + jj] = (go[r0] + go[r0 + 1]) + (go[r0 + ow] + go[r0 + ow + 1]);
                        }
                    }
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let [bb, c, h, w] = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let gam = val(*gamma);
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); bb * c * hw];
                let inv_c = T::one() / T::from_usize(c).unwrap();
                for bi in 0..bb {
                    let base = bi * c * hw;
                    let mut s1 = vec![T::zero(); hw];
                    let mut s2 = vec![T::zero(); hw];
                    for ci in 0..c {
                        let off = base + ci * hw;
                        let mut acc_g = T::zero();
                        let mut acc_b = T::zero();
                        for p in 0..hw {
                            let gy = gd[off + p];
                            let xh = xhat[off + p];
                            acc_g += gy * xh;
                            acc_b += gy;
                            let gxh = gy * gam[ci];
                            s1[p] += gxh;
                            s2[p] += gxh * xh;
                        }
                        gg[ci] += acc_g;
                        gbeta[ci] += acc_b;
                    }
                    let rs = &rstd[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let off = base + ci * hw;
                        for p in 0..hw {
                            let gxh = gd[off + p] * gam[ci];
                            gx[off + p] = rs[p] * (gxh - inv_c * s1[p] - xhat[off + p] * inv_c * s2[p]);
                        }
                    }
                }
                vec![
                    (*x, self.like(*x, gx)),
                    (*gamma, self.like(*gamma, gg)),
                    (*beta, self.like(*beta, gbeta)),
                ]
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let n = *self.shape(*x).last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in gd.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::Concat(parts) => {
                let shape = g.shape();
                let inner: usize = shape[2..].iter().product();
                let total_c = shape[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut c0 = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(self.value(p).len());
                    for b in 0..shape[0] {
                        let off = (b * total_c + c0) * inner;
                        gp.extend_from_slice(&gd[off..off + c * inner]);
                    }
                    out.push((p, self.like(p, gp)));
                    c0 += c;
                }
                out
            }
            Op::Split { x, start } => {
                let s = self.shape(*x);
                let inner: usize = s[2..].iter().product();
                let len = g.shape()[1];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for b in 0..s[0] {
                    let off = (b * s[1] + start) * inner;
                    gx[off..off + len * inner].copy_from_slice(&gd[b * len * inner..(b + 1) * len * inner]);
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::Reshape(x) => vec![(*x, self.like(*x, gd.to_vec()))],
            Op::Linear { x, map, adjoint } => {
                let s = self.shape(*x);
                let in_len = self.value(*x).len() / s[0];
                let out_len = gd.len() / s[0];
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for b in 0..s[0] {
                    let src = &gd[b * out_len..(b + 1) * out_len];
                    let dst = &mut gx[b * in_len..(b + 1) * in_len];
                    if *adjoint {
                        map.apply(src, dst);
                    } else {
                        map.apply_adjoint(src, dst);
                    }
                }
                vec![(*x, self.like(*x, gx))]
            }
            Op::ScaleItems(x, f) => {
                let inner = gd.len() / f.len();
                let gx = gd.iter().enumerate().map(|(j, &v)| v * f[j / inner]).collect();
                vec![(*x, self.like(*x, gx))]
            }
        }
    }
}
