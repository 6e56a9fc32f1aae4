//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is also a valid topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates vector-Jacobian products into the
//! parents of each node. A graph is meant to live for exactly one
//! forward/backward pass and is confined to the thread that built it.

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvSpec, Walk};
use crate::ops::correlation::{CorrGeom, CorrSpec};
use crate::ops::labels::Labels;
use crate::ops::norm::{self, BnStats};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    LogCosh,
    Scale,
}

#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Var(Var),
    Scalar(T),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L1,
    L2Squared,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Abs(Var),
    LogCosh(Var),
    LeakyRelu(Var, T),
    Reduce(Var, ReduceKind),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        walk: Walk,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        walk: Walk,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Correlation {
        a: Var,
        b: Var,
        spec: CorrSpec,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        offset: usize,
    },
    Pad {
        x: Var,
        pads: [(usize, usize); 3],
    },
    ChannelMean(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn log_cosh<T: Real>(x: T) -> T {
    // |x| + log(1 + e^{-2|x|}) - log 2, stable for large |x|
    let a = x.abs();
    let two = T::one() + T::one();
    a + (-two * a).exp().ln_1p() - two.ln()
}

fn sign0<T: Real>(x: T) -> T {
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
        Graph {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        check_same(self.shape(a), self.shape(b), what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.shape(a), self.shape(b), "div")?;
        if self.data(b).iter().any(|v| v.is_zero()) {
            return Err(Error::Numerics("division by exact zero".into()));
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn log_cosh(&mut self, a: Var) -> Var {
        self.unary(a, log_cosh, Op::LogCosh(a))
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x >= T::zero() { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Generic elementwise dispatcher. Binary kinds accept a [`Var`] or a
    /// scalar as the second operand; unary kinds ignore it.
    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Operand<T>) -> Result<Var> {
        use ElementwiseOp::*;
        match (kind, b) {
            (Add, Operand::Var(b)) => self.add(a, b),
            (Sub, Operand::Var(b)) => self.sub(a, b),
            (Mul, Operand::Var(b)) => self.mul(a, b),
            (Div, Operand::Var(b)) => self.div(a, b),
            (Add, Operand::Scalar(s)) => Ok(self.add_scalar(a, s)),
            (Sub, Operand::Scalar(s)) => Ok(self.add_scalar(a, -s)),
            (Mul | Scale, Operand::Scalar(s)) => Ok(self.scale(a, s)),
            (Div, Operand::Scalar(s)) => {
                if s.is_zero() {
                    return Err(Error::Numerics("division by exact zero".into()));
                }
                Ok(self.scale(a, T::one() / s))
            }
            (Abs, _) => Ok(self.abs(a)),
            (LogCosh, _) => Ok(self.log_cosh(a)),
            (k, b) => Err(Error::shape(format!("operand {b:?} invalid for {k:?}"))),
        }
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var) -> Result<Var> {
        let data = self.data(a);
        if data.is_empty() {
            return Err(Error::shape("reduce of empty tensor"));
        }
        let v = match kind {
            ReduceKind::Sum => data.iter().copied().sum::<T>(),
            ReduceKind::Mean => data.iter().copied().sum::<T>() / T::from_usize(data.len()).unwrap(),
            ReduceKind::L1 => data.iter().map(|x| x.abs()).sum::<T>(),
            ReduceKind::L2Squared => data.iter().map(|&x| x * x).sum::<T>(),
        };
        Ok(self.push(Tensor::scalar(v), Op::Reduce(a, kind), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a)
    }

    fn conv_input_extents(&self, x: Var, channels: usize, what: &str) -> Result<[usize; 3]> {
        match *self.shape(x) {
            [1, c, d, h, w] if c == channels => Ok([d, h, w]),
            ref s => Err(Error::shape(format!(
                "{what} expects input (1,{channels},d,h,w), got {s:?}"
            ))),
        }
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            check_same(self.shape(b), &[channels], "bias")?;
        }
        Ok(())
    }

    /// Zero-padded cross-correlation of a batch-1 volume.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let input = self.conv_input_extents(x, spec.in_channels, "conv3d")?;
        check_same(self.shape(w), &spec.weight_shape(), "conv3d weight")?;
        self.check_bias(b, spec.out_channels)?;
        let walk = Walk::conv(spec, input)?;
        let vol: usize = walk.narrow.iter().product();
        let mut out = vec![T::zero(); walk.narrow_len()];
        if let Some(b) = b {
            conv::broadcast_bias(self.data(b), vol, &mut out);
        }
        conv::gather(&walk, self.data(x), self.data(w), &mut out);
        let [d, h, ww] = walk.narrow;
        let value = Tensor::new(vec![1, spec.out_channels, d, h, ww], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, walk }, &parents))
    }

    /// Transposed convolution (adjoint of [`Graph::conv3d`] w.r.t. its input).
    pub fn transposed_conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let input = self.conv_input_extents(x, spec.in_channels, "transposed_conv3d")?;
        check_same(self.shape(w), &spec.transposed_weight_shape(), "transposed_conv3d weight")?;
        self.check_bias(b, spec.out_channels)?;
        let walk = Walk::transposed(spec, input)?;
        let vol: usize = walk.wide.iter().product();
        let mut out = vec![T::zero(); walk.wide_len()];
        if let Some(b) = b {
            conv::broadcast_bias(self.data(b), vol, &mut out);
        }
        conv::scatter(&walk, self.data(x), self.data(w), &mut out);
        let [d, h, ww] = walk.wide;
        let value = Tensor::new(vec![1, spec.out_channels, d, h, ww], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose { x, w, b, walk }, &parents))
    }

    /// Batch normalization over the spatial extent of each channel. In
    /// training mode the batch statistics normalize the input and are folded
    /// into `state`; in evaluation mode `state` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnStats<T>,
        training: bool,
        eps: T,
    ) -> Result<Var> {
        let c = match *self.shape(x) {
            [1, c, _, _, _] => c,
            ref s => return Err(Error::shape(format!("batch_norm expects (1,C,d,h,w), got {s:?}"))),
        };
        check_same(self.shape(gamma), &[c], "batch_norm gamma")?;
        check_same(self.shape(beta), &[c], "batch_norm beta")?;
        if state.mean.len() != c || state.var.len() != c {
            return Err(Error::shape(format!(
                "batch_norm running stats hold {} channels, input has {c}",
                state.mean.len()
            )));
        }
        let (mean, var) = if training {
            let (m, v) = norm::channel_moments(self.data(x), c);
            state.update(&m, &v);
            (m, v)
        } else {
            (state.mean.clone(), state.var.clone())
        };
        let inv_std = norm::inv_std(&var, eps);
        let xhat = norm::normalize(self.data(x), &mean, &inv_std);
        let out = norm::affine(&xhat, self.data(gamma), self.data(beta));
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        ))
    }

    /// In-plane correlation cost volume, `(1, (2D+1)^2, d, h, w)`.
    pub fn correlation3d(&mut self, a: Var, b: Var, spec: CorrSpec) -> Result<Var> {
        let geom = CorrGeom::new(self.shape(a), self.shape(b), spec)?;
        let out = geom.forward(self.data(a), self.data(b));
        let [d, h, w] = geom.extents;
        let value = Tensor::new(vec![1, spec.out_channels(), d, h, w], out)?;
        Ok(self.push(value, Op::Correlation { a, b, spec }, &[a, b]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_channels(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` of a batch-1 map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).channel_slice(start, len)?;
        let offset = start * self.shape(x)[2..].iter().product::<usize>();
        Ok(self.push(value, Op::Narrow { x, offset }, &[x]))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_leading(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).leading_slice(start, len)?;
        let offset = start * self.shape(x)[1..].iter().product::<usize>();
        Ok(self.push(value, Op::Narrow { x, offset }, &[x]))
    }

    /// Zero padding of the three spatial axes, `(before, after)` per axis.
    pub fn pad(&mut self, x: Var, pads: [(usize, usize); 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let out_ext = [
            d + pads[0].0 + pads[0].1,
            h + pads[1].0 + pads[1].1,
            w + pads[2].0 + pads[2].1,
        ];
        let mut out = vec![T::zero(); n * c * out_ext.iter().product::<usize>()];
        for_each_pad_row([n * c, d, h, w], out_ext, pads, |src, dst| {
            out[dst..dst + w].copy_from_slice(&self.data(x)[src..src + w]);
        });
        let value = Tensor::new(vec![n, c, out_ext[0], out_ext[1], out_ext[2]], out)?;
        Ok(self.push(value, Op::Pad { x, pads }, &[x]))
    }

    /// Mean over the channel axis, `(1, C, ...) -> (1, 1, ...)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if n != 1 {
            return Err(Error::shape("channel_mean expects batch 1"));
        }
        let vol = d * h * w;
        let inv = T::one() / T::from_usize(c).unwrap();
        let src = self.data(x);
        let mut out = vec![T::zero(); vol];
        for ch in src.chunks(vol) {
            for (o, &v) in out.iter_mut().zip(ch) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let value = Tensor::new(vec![1, 1, d, h, w], out)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean voxelwise negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let [n, c, d, h, w] = self.value(logits).dims5()?;
        if n != 1 || [d, h, w] != labels.extents() {
            return Err(Error::shape(format!(
                "cross_entropy logits {:?} vs labels {:?}",
                self.shape(logits),
                labels.extents()
            )));
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= c) {
            return Err(Error::data(format!("label {bad} out of range for {c} classes")));
        }
        let vol = d * h * w;
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for v in 0..vol {
            let max = (0..c).map(|k| src[k * vol + v]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..c {
                let e = (src[k * vol + v] - max).exp();
                probs[k * vol + v] = e;
                z += e;
            }
            for k in 0..c {
                probs[k * vol + v] = probs[k * vol + v] / z;
            }
            let l = labels.data()[v] as usize;
            total += z.ln() + max - src[l * vol + v];
        }
        let loss = total / T::from_usize(vol).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients of every leaf
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Graph::backward`], additionally keeping the gradients of the
    /// listed intermediate values.
    pub fn backward_retaining(&mut self, loss: Var, retain: &[Var]) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut keep: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || retain.contains(&Var(i)) {
                keep[i] = Some(Tensor::new(node.value.shape().to_vec(), g.clone())?);
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads: keep })
    }

    /// Allow another backward pass on the same tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let data = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(data(*b)).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(data(*a)).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (data(*a), data(*b));
                if wants(*a) {
                    acc(*a, g.iter().zip(y).map(|(&g, &y)| g / y).collect());
                }
                if wants(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(x.iter().zip(y))
                            .map(|(&g, (&x, &y))| -g * x / (y * y))
                            .collect(),
                    );
                }
            }
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Scale(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::Abs(a) => acc(*a, g.iter().zip(data(*a)).map(|(&g, &x)| g * sign0(x)).collect()),
            Op::LogCosh(a) => acc(*a, g.iter().zip(data(*a)).map(|(&g, &x)| g * x.tanh()).collect()),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.iter()
                    .zip(data(*a))
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            g * *slope
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            ),
            Op::Reduce(a, kind) => {
                let g0 = g[0];
                let x = data(*a);
                let delta = match kind {
                    ReduceKind::Sum => vec![g0; x.len()],
                    ReduceKind::Mean => vec![g0 / T::from_usize(x.len()).unwrap(); x.len()],
                    ReduceKind::L1 => x.iter().map(|&v| g0 * sign0(v)).collect(),
                    ReduceKind::L2Squared => {
                        let two = T::one() + T::one();
                        x.iter().map(|&v| g0 * two * v).collect()
                    }
                };
                acc(*a, delta);
            }
            Op::Conv { x, w, b, walk } => {
                if wants(*x) {
                    let mut gx = vec![T::zero(); walk.wide_len()];
                    conv::scatter(walk, g, data(*w), &mut gx);
                    acc(*x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); walk.weight_len()];
                    conv::correlate(walk, g, data(*x), &mut gw);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, conv::channel_sums(g, walk.narrow.iter().product()));
                    }
                }
            }
            Op::ConvTranspose { x, w, b, walk } => {
                if wants(*x) {
                    let mut gx = vec![T::zero(); walk.narrow_len()];
                    conv::gather(walk, g, data(*w), &mut gx);
                    acc(*x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); walk.weight_len()];
                    conv::correlate(walk, data(*x), g, &mut gw);
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        acc(*b, conv::channel_sums(g, walk.wide.iter().product()));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let len = g.len() / c;
                let n = T::from_usize(len).unwrap();
                let gam = data(*gamma);
                let mut g_gamma = Vec::with_capacity(c);
                let mut g_beta = Vec::with_capacity(c);
                let mut gx = Vec::with_capacity(g.len());
                for ch in 0..c {
                    let gy = &g[ch * len..(ch + 1) * len];
                    let xh = &xhat[ch * len..(ch + 1) * len];
                    let sum_gy: T = gy.iter().copied().sum();
                    let sum_gy_xh: T = gy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    g_gamma.push(sum_gy_xh);
                    g_beta.push(sum_gy);
                    let k = gam[ch] * inv_std[ch];
                    if *training {
                        let mean_gy = sum_gy / n;
                        let mean_gy_xh = sum_gy_xh / n;
                        gx.extend(
                            gy.iter()
                                .zip(xh)
                                .map(|(&a, &b)| k * (a - mean_gy - b * mean_gy_xh)),
                        );
                    } else {
                        gx.extend(gy.iter().map(|&a| k * a));
                    }
                }
                if wants(*x) {
                    acc(*x, gx);
                }
                acc(*gamma, g_gamma);
                acc(*beta, g_beta);
            }
            Op::Correlation { a, b, spec } => {
                let geom = CorrGeom::new(nodes[a.0].value.shape(), nodes[b.0].value.shape(), *spec)
                    .expect("shapes validated in forward");
                let mut ga = wants(*a).then(|| vec![T::zero(); data(*a).len()]);
                let mut gb = wants(*b).then(|| vec![T::zero(); data(*b).len()]);
                geom.backward(data(*a), data(*b), g, ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    acc(*a, ga);
                }
                if let Some(gb) = gb {
                    acc(*b, gb);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = data(p).len();
                    acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Narrow { x, offset } => {
                let mut gx = vec![T::zero(); data(*x).len()];
                gx[*offset..*offset + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Pad { x, pads } => {
                let s = nodes[x.0].value.shape();
                let [n, c, d, h, w] = [s[0], s[1], s[2], s[3], s[4]];
                let out = node.value.shape();
                let mut gx = vec![T::zero(); data(*x).len()];
                for_each_pad_row([n * c, d, h, w], [out[2], out[3], out[4]], *pads, |src, dst| {
                    gx[src..src + w].copy_from_slice(&g[dst..dst + w]);
                });
                acc(*x, gx);
            }
            Op::ChannelMean(x) => {
                let c = nodes[x.0].value.shape()[1];
                let inv = T::one() / T::from_usize(c).unwrap();
                let mut gx = Vec::with_capacity(g.len() * c);
                for _ in 0..c {
                    gx.extend(g.iter().map(|&v| v * inv));
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let vol = labels.len();
                let scale = g[0] / T::from_usize(vol).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (v, &l) in labels.iter().enumerate() {
                    gl[l as usize * vol + v] -= scale;
                }
                acc(*logits, gl);
            }
        }
    }
}

/// Visit every source row of a padded copy: (source offset, destination offset).
fn for_each_pad_row(
    src: [usize; 4],
    out: [usize; 3],
    pads: [(usize, usize); 3],
    mut f: impl FnMut(usize, usize),
) {
    let [planes, d, h, w] = src;
    for p in 0..planes {
        for z in 0..d {
            for y in 0..h {
                let s = ((p * d + z) * h + y) * w;
                let t = ((p * out[0] + z + pads[0].0) * out[1] + y + pads[1].0) * out[2] + pads[2].0;
                f(s, t);
            }
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Numerics("finite difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let two = T::one() + T::one();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerics(format!("non-finite function value probing element {i}")));
        }
        grad.push((plus - minus) / (two * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error between an analytic and a numeric gradient:
/// `max|a - n| / max(max|a|, max|n|, 1e-12)`.
pub fn relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> Result<f64> {
    let diff = crate::tensor::max_abs_diff(analytic, numeric)?;
    let scale = analytic
        .max_abs()
        .to_f64_lossy()
        .max(numeric.max_abs().to_f64_lossy())
        .max(1e-12);
    Ok(diff / scale)
}
