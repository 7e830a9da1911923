//! Reverse-mode tape.
//!
//! Each op appends a node holding its output value and whatever the backward
//! pass needs. Nodes only ever reference earlier nodes, so a single reverse
//! sweep from the loss visits everything in topological order.

use std::sync::Arc;

use super::kernels;
use super::{PoolIndices, Real, Result, Shape, Tensor, TensorError, BN_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target of a softmax cross-entropy.
#[derive(Clone, Debug)]
pub enum CeTarget<T> {
    /// One class id per `(n, h, w)` pixel.
    Labels(Vec<usize>),
    /// A per-pixel distribution shaped like the logits.
    Soft(Tensor<T>),
}

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Current batch statistics (training mode).
    Batch,
    /// Stored running statistics (evaluation mode).
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        input: Var,
        indices: Arc<PoolIndices>,
    },
    Unpool {
        input: Var,
        indices: Arc<PoolIndices>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat(Var, Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SampleNorm(Var),
    Berhu {
        residual: Var,
        argmax: Vec<usize>,
        c: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        target: CeTarget<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{a}"),
            got: format!("{b}"),
        });
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a `(1,1,1,1)` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn zip_op(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op_name, va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.map_op(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        self.map_op(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_op(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map_op(
            x,
            |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_op(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_op(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_usize(v.len().max(1)).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Euclidean norm of each batch sample, shaped `(n,1,1,1)`.
    pub fn sample_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape().n();
        let norms = (0..n)
            .map(|i| v.sample(i).iter().map(|&e| e * e).sum::<T>().sqrt())
            .collect();
        let out = Tensor::from_vec(Shape::new(n, 1, 1, 1), norms).expect("norm shape");
        let rg = self.rg(x);
        self.push(out, Op::SampleNorm(x), rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, pad)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, s: usize) -> Result<(Var, Arc<PoolIndices>)> {
        let (out, idx) = kernels::maxpool_forward(self.value(input), k, s)?;
        let indices = Arc::new(idx);
        let rg = self.rg(input);
        let v = self.push(
            out,
            Op::MaxPool {
                input,
                indices: indices.clone(),
            },
            rg,
        );
        Ok((v, indices))
    }

    pub fn unpool(&mut self, input: Var, indices: &Arc<PoolIndices>, out_hw: (usize, usize)) -> Result<Var> {
        same_shape("unpool", indices.shape(), self.shape(input))?;
        let out = kernels::scatter(self.value(input).data(), indices, out_hw)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::Unpool {
                input,
                indices: indices.clone(),
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_forward(self.value(input), factor)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Upsample { input, factor }, rg))
    }

    /// Batch normalization over `(n, h, w)` per channel followed by a
    /// per-channel affine map. In batch mode the returned moments are the
    /// batch mean and unbiased variance, for the caller's running update.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats<T>,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let x = self.value(input);
        let s = x.shape();
        let c = s.c();
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    expected: format!("{c} affine parameters"),
                    got: format!("{}", self.shape(p)),
                });
            }
        }
        let eps = T::lit(BN_EPS);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let (mean, var) = kernels::channel_moments(x);
                let count = s.n() * s.plane();
                let unbiased = if count > 1 {
                    let k = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                    var.iter().map(|&v| v * k).collect()
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::ShapeMismatch {
                        op: "batch_norm",
                        expected: format!("{c} running statistics"),
                        got: format!("{}", mean.len()),
                    });
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let plane = s.plane();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        let planes = x.data().chunks(plane).zip(xhat.chunks_mut(plane)).zip(out.chunks_mut(plane));
        for (j, ((src, hs), os)) in planes.enumerate() {
            let ch = j % c;
            let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
            for ((&v, h), o) in src.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                *h = (v - m) * is;
                *o = *h * gc + bc;
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let out = Tensor::from_vec(s, out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: moments.is_some(),
            },
            rg,
        );
        Ok((v, moments))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: format!("({},*,{},{})", sa.n(), sa.h(), sa.w()),
                got: format!("{sb}"),
            });
        }
        let out_shape = sa.with_c(sa.c() + sb.c());
        let mut data = Vec::with_capacity(out_shape.numel());
        for i in 0..sa.n() {
            data.extend_from_slice(self.value(a).sample(i));
            data.extend_from_slice(self.value(b).sample(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out_shape, data)?, Op::Concat(a, b), rg))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let probs = softmax_channels(self.value(x));
        let rg = self.rg(x);
        self.push(probs, Op::Softmax(x), rg)
    }

    /// Per-sample mean of the reverse Huber penalty of `residual`, shaped
    /// `(n,1,1,1)`. The threshold is one fifth of the sample's largest
    /// absolute residual; an all-zero sample contributes zero.
    pub fn berhu(&mut self, residual: Var) -> Var {
        let r = self.value(residual);
        let n = r.shape().n();
        let len = r.shape().sample_len();
        let five = T::lit(5.0);
        let two = T::lit(2.0);
        let mut argmax = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let s = r.sample(i);
            let (mut m, mut mi) = (T::zero(), 0);
            for (j, &v) in s.iter().enumerate() {
                if v.abs() > m {
                    m = v.abs();
                    mi = j;
                }
            }
            let c = m / five;
            let total: T = if c > T::zero() {
                s.iter()
                    .map(|&v| {
                        let a = v.abs();
                        if a <= c {
                            a
                        } else {
                            (v * v + c * c) / (two * c)
                        }
                    })
                    .sum()
            } else {
                T::zero()
            };
            argmax.push(mi);
            cs.push(c);
            vals.push(total / T::from_usize(len.max(1)).unwrap());
        }
        let out = Tensor::from_vec(Shape::new(n, 1, 1, 1), vals).expect("berhu shape");
        let rg = self.rg(residual);
        self.push(out, Op::Berhu { residual, argmax, c: cs }, rg)
    }

    /// Mean over all pixels of the cross-entropy between `softmax(logits)`
    /// and `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: CeTarget<T>) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        let (k, plane) = (s.c(), s.plane());
        match &target {
            CeTarget::Labels(labels) => {
                if labels.len() != s.n() * plane {
                    return Err(TensorError::ShapeMismatch {
                        op: "cross_entropy",
                        expected: format!("{} labels", s.n() * plane),
                        got: format!("{}", labels.len()),
                    });
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(TensorError::InvalidArgument {
                        op: "cross_entropy",
                        msg: format!("label {bad} outside [0, {k})"),
                    });
                }
            }
            CeTarget::Soft(t) => same_shape("cross_entropy", s, t.shape())?,
        }
        let log_probs = log_softmax_channels(x);
        let total: T = match &target {
            CeTarget::Labels(labels) => labels
                .iter()
                .enumerate()
                .map(|(p, &l)| -log_probs.data()[((p / plane) * k + l) * plane + p % plane])
                .sum(),
            CeTarget::Soft(t) => t
                .data()
                .iter()
                .zip(log_probs.data())
                .filter(|(&q, _)| q != T::zero())
                .map(|(&q, &lp)| -q * lp)
                .sum(),
        };
        let probs = log_probs.map(|v| v.exp());
        let count = T::from_usize((s.n() * plane).max(1)).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::SoftmaxCe {
                logits,
                probs: probs.into_data(),
                target,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Contributions from multiple consumers are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|&v| v * *k).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::LeakyRelu(x, slope) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v > T::zero() { d } else { d * *slope })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
            ),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(out).map(|(&d, &y)| d * (T::one() - y * y)).collect(),
            ),
            Op::Square(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(&d, &v)| d * T::lit(2.0) * v).collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / T::from_usize(n.max(1)).unwrap(); n]);
            }
            Op::SampleNorm(x) => {
                let v = &self.nodes[x.0].value;
                let len = v.shape().sample_len();
                let mut d = Vec::with_capacity(v.len());
                for i in 0..v.shape().n() {
                    let norm = out[i];
                    for &e in v.sample(i) {
                        d.push(if norm > T::zero() { g[i] * e / norm } else { T::zero() });
                    }
                }
                debug_assert_eq!(d.len(), len * v.shape().n());
                acc(*x, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let cg = kernels::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    *stride,
                    *pad,
                    [self.rg(*input), self.rg(*weight), self.rg(*bias)],
                )?;
                if let Some(d) = cg.input {
                    acc(*input, d);
                }
                if let Some(d) = cg.weight {
                    acc(*weight, d);
                }
                if let Some(d) = cg.bias {
                    acc(*bias, d);
                }
            }
            Op::MaxPool { input, indices } => {
                let s = self.shape(*input);
                let d = kernels::scatter(g, indices, (s.h(), s.w()))?;
                acc(*input, d.into_data());
            }
            Op::Unpool { input, indices } => {
                let s = node.value.shape();
                acc(*input, kernels::gather(g, (s.h(), s.w()), indices));
            }
            Op::Upsample { input, factor } => {
                acc(*input, kernels::upsample_backward(g, self.shape(*input), *factor));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (c, plane) = (s.c(), s.plane());
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (j, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = j % c;
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for (&gv, &xv) in gc.iter().zip(xc) {
                        sg += gv;
                        sgx += gv * xv;
                    }
                    sum_g[ch] += sg;
                    sum_gx[ch] += sgx;
                }
                if self.rg(*input) {
                    let gam = val(*gamma);
                    let m = T::from_usize(s.n() * plane).unwrap();
                    let mut d = vec![T::zero(); g.len()];
                    let planes = g.chunks(plane).zip(xhat.chunks(plane)).zip(d.chunks_mut(plane));
                    for (j, ((gc, xc), dc)) in planes.enumerate() {
                        let ch = j % c;
                        let k = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                            for ((&gv, &xv), o) in gc.iter().zip(xc).zip(dc.iter_mut()) {
                                *o = k * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (&gv, o) in gc.iter().zip(dc.iter_mut()) {
                                *o = k * gv;
                            }
                        }
                    }
                    acc(*input, d);
                }
                acc(*gamma, sum_gx);
                acc(*beta, sum_g);
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.sample_len(), sb.sample_len());
                let mut da = Vec::with_capacity(sa.numel());
                let mut db = Vec::with_capacity(sb.numel());
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmax(x) => {
                let s = node.value.shape();
                let (k, plane) = (s.c(), s.plane());
                let mut d = vec![T::zero(); g.len()];
                for i in 0..s.n() {
                    let base = i * k * plane;
                    for px in 0..plane {
                        let dot: T = (0..k)
                            .map(|ch| g[base + ch * plane + px] * out[base + ch * plane + px])
                            .sum();
                        for ch in 0..k {
                            let at = base + ch * plane + px;
                            d[at] = out[at] * (g[at] - dot);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Berhu { residual, argmax, c } => {
                let r = &self.nodes[residual.0].value;
                let len = r.shape().sample_len();
                let inv_len = T::one() / T::from_usize(len.max(1)).unwrap();
                let two = T::lit(2.0);
                let fifth = T::lit(0.2);
                let mut d = Vec::with_capacity(r.len());
                for i in 0..r.shape().n() {
                    let ci = c[i];
                    let s = r.sample(i);
                    let scale = g[i] * inv_len;
                    if ci <= T::zero() {
                        d.extend(std::iter::repeat(T::zero()).take(len));
                        continue;
                    }
                    let mut dc = T::zero();
                    for &v in s {
                        let a = v.abs();
                        if a <= ci {
                            d.push(scale * v.signum() * T::from_u8((v != T::zero()) as u8).unwrap());
                        } else {
                            d.push(scale * v / ci);
                            dc += (ci * ci - v * v) / (two * ci * ci);
                        }
                    }
                    // c depends on the largest |r| through the max selection.
                    let m = argmax[i];
                    let start = d.len() - len;
                    d[start + m] += scale * dc * fifth * s[m].signum();
                }
                acc(*residual, d);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                target,
            } => {
                let s = self.shape(*logits);
                let (k, plane) = (s.c(), s.plane());
                let count = T::from_usize((s.n() * plane).max(1)).unwrap();
                let scale = g[0] / count;
                let mut d = vec![T::zero(); probs.len()];
                match target {
                    CeTarget::Labels(labels) => {
                        for (at, dv) in d.iter_mut().enumerate() {
                            *dv = probs[at] * scale;
                        }
                        for (p, &l) in labels.iter().enumerate() {
                            let (i, px) = (p / plane, p % plane);
                            d[(i * k + l) * plane + px] -= scale;
                        }
                    }
                    CeTarget::Soft(t) => {
                        let q = t.data();
                        for i in 0..s.n() {
                            for px in 0..plane {
                                let base = i * k * plane + px;
                                let mass: T = (0..k).map(|ch| q[base + ch * plane]).sum();
                                for ch in 0..k {
                                    let at = base + ch * plane;
                                    d[at] = scale * (probs[at] * mass - q[at]);
                                }
                            }
                        }
                    }
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn log_softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (k, plane) = (s.c(), s.plane());
    let mut out = vec![T::zero(); x.len()];
    for i in 0..s.n() {
        let src = x.sample(i);
        let base = i * k * plane;
        for px in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..k {
                m = m.max(src[ch * plane + px]);
            }
            let lse = (0..k).map(|ch| (src[ch * plane + px] - m).exp()).sum::<T>().ln() + m;
            for ch in 0..k {
                out[base + ch * plane + px] = src[ch * plane + px] - lse;
            }
        }
    }
    Tensor::from_vec(s, out).expect("log_softmax shape")
}

pub(crate) fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (k, plane) = (s.c(), s.plane());
    let mut out = vec![T::zero(); x.len()];
    for i in 0..s.n() {
        let src = x.sample(i);
        let base = i * k * plane;
        for px in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..k {
                m = m.max(src[ch * plane + px]);
            }
            let mut z = T::zero();
            for ch in 0..k {
                let e = (src[ch * plane + px] - m).exp();
                out[base + ch * plane + px] = e;
                z += e;
            }
            for ch in 0..k {
                out[base + ch * plane + px] = out[base + ch * plane + px] / z;
            }
        }
    }
    Tensor::from_vec(s, out).expect("softmax shape")
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
