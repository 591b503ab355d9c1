//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs do not require gradients are stored as plain constants, so running
//! a frozen sub-network through a graph costs no tape memory beyond its
//! activations. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into the leaves.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Prelu {
        x: Var,
        alpha: Var,
        channels: usize,
        inner: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        dims: (usize, usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        d: usize,
    },
    SwapLast2 {
        x: Var,
        outer: usize,
        a: usize,
        b: usize,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    ScaleChannels {
        x: Var,
        s: Var,
        t: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Per-row log-sum-exp of the attention scores, `[B, H, T]`.
        lse: Vec<f64>,
        dims: (usize, usize, usize),
    },
    WeightedTimeSum {
        alpha: Var,
        a: Var,
        dims: (usize, usize, usize),
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        d: usize,
    },
    SupCon {
        z: Var,
        coef: Vec<f64>,
        n: usize,
        d: usize,
        tau: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// A recording of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn inner_size(shape: &[usize], axis: usize) -> usize {
    shape[axis + 1..].iter().product()
}

fn outer_size(shape: &[usize], axis: usize) -> usize {
    shape[..axis].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves that require gradients receive them on backward.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Binds a stored parameter into the graph. Each parameter is bound at
    /// most once, so every use aliases the same node. Frozen parameters are
    /// bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.input(p.value.clone(), !p.frozen);
        self.bound.insert(id, v);
        v
    }

    /// Adds the gradients of every bound, unfrozen parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.bound {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if let Some(g) = &self.nodes[v.0].grad {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |a| 1.0 / (1.0 + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Parametric ReLU with one slope per entry of `axis`.
    pub fn prelu(&mut self, x: Var, alpha: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(alpha).numel() != shape[axis] {
            return Err(Error::shape(
                "prelu",
                format!("input {shape:?}, axis {axis}, alpha {:?}", self.shape(alpha)),
            ));
        }
        let channels = shape[axis];
        let inner = inner_size(&shape, axis);
        let a = self.value(alpha).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[(i / inner) % channels] * v })
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Prelu { x, alpha, channels, inner }, &[x, alpha]))
    }

    /// 1-D cross-correlation. `x` is `[B, C_in, T]`, `w` is `[C_out, C_in, K]`,
    /// `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            ));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::shape("conv1d", format!("bias {:?} for {} filters", self.shape(b), ws[0])));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be at least 1"));
        }
        if ws[2] > xs[2] + 2 * padding {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {} wider than padded input {}", ws[2], xs[2] + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            t: xs[2],
            cout: ws[0],
            k: ws[2],
            stride,
            pad: padding,
        };
        let y = kernels::conv1d_forward(geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(vec![geom.batch, geom.cout, geom.t_out()], y)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, geom }, &[x, w, b]))
    }

    /// Non-overlapping max pooling with ceiling output length; the trailing
    /// partial window pools over the samples it has.
    pub fn maxpool1d_ceil(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("maxpool1d", format!("expected [B, C, T], got {s:?}")));
        }
        if window == 0 {
            return Err(Error::invalid("maxpool1d", "window must be at least 1"));
        }
        let t = s[2];
        if t == 0 {
            return Err(Error::invalid("maxpool1d", "empty temporal axis"));
        }
        let t_out = t.div_ceil(window);
        let rows = s[0] * s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows * t_out);
        let mut argmax = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            let row = &xd[r * t..(r + 1) * t];
            for j in 0..t_out {
                let lo = j * window;
                let hi = (lo + window).min(t);
                let mut best = lo;
                for i in lo + 1..hi {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(r * t + best);
            }
        }
        let tensor = Tensor::new(vec![s[0], s[1], t_out], out)?;
        Ok(self.push(tensor, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Training-mode batch norm over batch and time of `[B, C, T]`.
    pub fn batchnorm1d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.value(gamma).numel() != s[1] || self.value(beta).numel() != s[1] {
            return Err(Error::shape("batchnorm1d", format!("input {s:?}")));
        }
        let (bsz, c, t) = (s[0], s[1], s[2]);
        let n = bsz * t;
        if n < 2 {
            return Err(Error::invalid("batchnorm1d", "training mode needs at least two values per channel"));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..bsz {
            for ch in 0..c {
                let row = &xd[(b * c + ch) * t..(b * c + ch + 1) * t];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for b in 0..bsz {
            for ch in 0..c {
                let row = &xd[(b * c + ch) * t..(b * c + ch + 1) * t];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for i in base..base + t {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v / (n - 1) as f64).collect(),
        };
        let tensor = Tensor::new(s, out)?;
        let op = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            dims: (bsz, c, t),
        };
        Ok((self.push(tensor, op, &[x, gamma, beta]), stats))
    }

    /// Evaluation-mode batch norm using fixed running statistics.
    pub fn batchnorm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || running_mean.len() != s[1] || running_var.len() != s[1] || self.value(gamma).numel() != s[1] {
            return Err(Error::shape("batchnorm1d", format!("input {s:?}")));
        }
        let (bsz, c, t) = (s[0], s[1], s[2]);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for i in base..base + t {
                    out[i] = g[ch] * (xd[i] - running_mean[ch]) * inv_std[ch] + be[ch];
                }
            }
        }
        let tensor = Tensor::new(s, out)?;
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
            dims: (bsz, c, t),
        };
        Ok(self.push(tensor, op, &[x, gamma, beta]))
    }

    /// Affine map over the last axis: `x·w + b` with `w` of shape
    /// `[D_in, D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::shape("linear", format!("bias {:?} for {dout} outputs", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(rows, din, dout, self.value(x).data(), din, 1, self.value(w).data(), dout, 1, 1.0, &mut out, dout, 1);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let tensor = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(tensor, Op::Linear { x, w, b, rows, din, dout }, &inputs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = (outer_size(&s, axis), s[axis], inner_size(&s, axis));
        let mut out = self.value(x).data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = out[(o * len + j) * inner + i];
                }
                kernels::softmax_row(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[(o * len + j) * inner + i] = *b;
                }
            }
        }
        let tensor = Tensor::new(s, out)?;
        Ok(self.push(tensor, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if d < 2 || self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", format!("input {s:?}")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + be[j];
            }
        }
        let tensor = Tensor::new(s, out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            d,
        };
        Ok(self.push(tensor, op, &[x, gamma, beta]))
    }

    /// Swaps the last two axes (`[.., A, B] -> [.., B, A]`).
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("swap_last2", format!("{s:?}")));
        }
        let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = outer_size(&s, s.len() - 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            let src = &xd[o * a * b..(o + 1) * a * b];
            let dst = &mut out[o * a * b..(o + 1) * a * b];
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let tensor = Tensor::new(shape, out)?;
        Ok(self.push(tensor, Op::SwapLast2 { x, outer, a, b }, &[x]))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} for shape {s:?}")));
        }
        let (outer, len, inner) = (outer_size(&s, axis), s[axis], inner_size(&s, axis));
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xd[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        let tensor = Tensor::new(shape, out)?;
        Ok(self.push(tensor, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Multiplies each `[B, C, T]` channel row by the matching `[B, C]` gate.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() != 3 || ss != xs[..2] {
            return Err(Error::shape("scale_channels", format!("input {xs:?}, gates {ss:?}")));
        }
        let t = xs[2];
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(t.max(1))
            .zip(sd)
            .flat_map(|(row, g)| row.iter().map(move |v| v * g))
            .collect();
        let tensor = Tensor::new(xs, data)?;
        Ok(self.push(tensor, Op::ScaleChannels { x, s, t }, &[x, s]))
    }

    /// Multi-head scaled dot-product self-attention core over `[B, T, D]`
    /// projections; returns the concatenated head outputs `[B, T, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention", format!("q {s:?}, k {:?}, v {:?}", self.shape(k), self.shape(v))));
        }
        let (bsz, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("model dim {d} not divisible by {heads} heads")));
        }
        let mut lse = vec![0.0; bsz * heads * t];
        let mut out = vec![0.0; bsz * t * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..bsz {
            let r = b * t * d..(b + 1) * t * d;
            kernels::attention_forward(
                &qd[r.clone()],
                &kd[r.clone()],
                &vd[r.clone()],
                t,
                d,
                heads,
                &mut lse[b * heads * t..(b + 1) * heads * t],
                &mut out[r],
            );
        }
        let tensor = Tensor::new(s, out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            lse,
            dims: (bsz, t, d),
        };
        Ok(self.push(tensor, op, &[q, k, v]))
    }

    /// `out[b] = Σ_t alpha[b, t] · a[b, t, :]`
    pub fn weighted_time_sum(&mut self, alpha: Var, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || self.shape(alpha) != &sa[..2] {
            return Err(Error::shape("weighted_time_sum", format!("alpha {:?}, values {sa:?}", self.shape(alpha))));
        }
        let (bsz, t, d) = (sa[0], sa[1], sa[2]);
        let al = self.value(alpha).data();
        let ad = self.value(a).data();
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            for ti in 0..t {
                kernels::axpy(&mut out[b * d..(b + 1) * d], al[b * t + ti], &ad[(b * t + ti) * d..(b * t + ti + 1) * d]);
            }
        }
        let tensor = Tensor::new(vec![bsz, d], out)?;
        Ok(self.push(tensor, Op::WeightedTimeSum { alpha, a, dims: (bsz, t, d) }, &[alpha, a]))
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize", format!("expected [N, D], got {s:?}")));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = vec![0.0; xd.len()];
        for (r, row) in xd.chunks_exact(d).enumerate() {
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid("l2_normalize", format!("row {r} has norm {n}")));
            }
            norms.push(n);
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let tensor = Tensor::new(s, out)?;
        Ok(self.push(tensor, Op::L2Normalize { x, norms, d }, &[x]))
    }

    /// Supervised contrastive loss over unit embeddings `z` (`[N, D]`).
    ///
    /// For each anchor n with positives P(n) (same label, excluding n):
    /// `-1/|P(n)| Σ_{m∈P(n)} log( exp(z_n·z_m/τ) / Σ_{a≠n} exp(z_n·z_a/τ) )`,
    /// summed over anchors. Anchors without positives contribute nothing;
    /// their count is returned alongside the loss.
    pub fn supcon_loss(&mut self, z: Var, labels: &[usize], tau: f64) -> Result<(Var, usize)> {
        if !(tau > 0.0) {
            return Err(Error::invalid("supcon_loss", format!("temperature must be positive, got {tau}")));
        }
        let s = self.shape(z).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("supcon_loss", format!("embeddings {s:?}, {} labels", labels.len())));
        }
        let (n, d) = (s[0], s[1]);
        if n < 2 {
            return Err(Error::invalid("supcon_loss", "need at least two samples"));
        }
        let zd = self.value(z).data();
        let mut sim = vec![0.0; n * n];
        kernels::gemm(n, d, n, zd, d, 1, zd, 1, d, 0.0, &mut sim, n, 1);
        sim.iter_mut().for_each(|v| *v /= tau);
        // coef[n, a]: dL/dsim[n, a]
        let mut coef = vec![0.0; n * n];
        let mut loss = 0.0;
        let mut skipped = 0;
        for i in 0..n {
            let positives = (0..n).filter(|&m| m != i && labels[m] == labels[i]).count();
            if positives == 0 {
                skipped += 1;
                continue;
            }
            let row = &sim[i * n..(i + 1) * n];
            let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
            let lse = max + denom.ln();
            let inv_p = 1.0 / positives as f64;
            for a in 0..n {
                if a == i {
                    continue;
                }
                let q = (row[a] - lse).exp();
                let c = &mut coef[i * n + a];
                *c = q;
                if labels[a] == labels[i] {
                    loss -= inv_p * (row[a] - lse);
                    *c -= inv_p;
                }
            }
        }
        let op = Op::SupCon { z, coef, n, d, tau };
        Ok((self.push(Tensor::scalar(loss), op, &[z]), skipped))
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let classes = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            classes,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::shape("dropout", format!("mask of {} for {:?}", mask.len(), v.shape())));
        }
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let tensor = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(tensor, Op::Dropout { x, mask }, &[x]))
    }

    /// Back-propagates from a scalar `loss`, adding ∂loss/∂leaf into every
    /// leaf that requires gradients. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated gradient buffer for an input.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if needs(v) {
                        kernels::axpy(slot(grads, nodes, v), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    kernels::axpy(slot(grads, nodes, *a), 1.0, g);
                }
                if needs(*b) {
                    kernels::axpy(slot(grads, nodes, *b), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let vb = val(*b);
                    let ga = slot(grads, nodes, *a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * vb[j];
                    }
                }
                if needs(*b) {
                    let va = val(*a);
                    let gb = slot(grads, nodes, *b);
                    for j in 0..g.len() {
                        gb[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, c) => kernels::axpy(slot(grads, nodes, *x), *c, g),
            Op::SumAll(x) => slot(grads, nodes, *x).iter_mut().for_each(|v| *v += g[0]),
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.numel() as f64;
                slot(grads, nodes, *x).iter_mut().for_each(|v| *v += g[0] / n);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * (1.0 - out[j] * out[j]);
                }
            }
            Op::Reshape(x) => kernels::axpy(slot(grads, nodes, *x), 1.0, g),
            Op::Prelu { x, alpha, channels, inner } => {
                let xv = val(*x);
                let av = val(*alpha);
                let ch = |j: usize| (j / inner) % channels;
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    for j in 0..g.len() {
                        gx[j] += if xv[j] >= 0.0 { g[j] } else { av[ch(j)] * g[j] };
                    }
                }
                if needs(*alpha) {
                    let ga = slot(grads, nodes, *alpha);
                    for j in 0..g.len() {
                        if xv[j] < 0.0 {
                            ga[ch(j)] += g[j] * xv[j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut dx = needs(*x).then(|| vec![0.0; nodes[x.0].value.numel()]);
                let mut dw = needs(*w).then(|| vec![0.0; nodes[w.0].value.numel()]);
                let mut db = needs(*b).then(|| vec![0.0; nodes[b.0].value.numel()]);
                kernels::conv1d_backward(*geom, val(*x), val(*w), g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        kernels::axpy(slot(grads, nodes, v), 1.0, &d);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = slot(grads, nodes, *x);
                for (j, &src) in argmax.iter().enumerate() {
                    gx[src] += g[j];
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                dims: (bsz, c, t),
            } => {
                let (bsz, c, t) = (*bsz, *c, *t);
                let n = (bsz * t) as f64;
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * t;
                        for j in base..base + t {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * t;
                            let k = gv[ch] * inv_std[ch] / n;
                            for j in base..base + t {
                                gx[j] += k * (n * g[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    kernels::axpy(slot(grads, nodes, *gamma), 1.0, &sum_dy_xhat);
                }
                if needs(*beta) {
                    kernels::axpy(slot(grads, nodes, *beta), 1.0, &sum_dy);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                dims: (bsz, c, t),
            } => {
                let (bsz, c, t) = (*bsz, *c, *t);
                let xv = val(*x);
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let base = (b * c + ch) * t;
                        for j in base..base + t {
                            sum_dy[ch] += g[j];
                            sum_dy_xhat[ch] += g[j] * (xv[j] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    for b in 0..bsz {
                        for ch in 0..c {
                            let base = (b * c + ch) * t;
                            for j in base..base + t {
                                gx[j] += g[j] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    kernels::axpy(slot(grads, nodes, *gamma), 1.0, &sum_dy_xhat);
                }
                if needs(*beta) {
                    kernels::axpy(slot(grads, nodes, *beta), 1.0, &sum_dy);
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if needs(*x) {
                    let wv = val(*w);
                    let gx = slot(grads, nodes, *x);
                    kernels::gemm(rows, dout, din, g, dout, 1, wv, 1, dout, 1.0, gx, din, 1);
                }
                if needs(*w) {
                    let xv = val(*x);
                    let gw = slot(grads, nodes, *w);
                    kernels::gemm(din, rows, dout, xv, 1, din, g, dout, 1, 1.0, gw, dout, 1);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let gb = slot(grads, nodes, *b);
                        for row in g.chunks_exact(dout) {
                            kernels::axpy(gb, 1.0, row);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let gx = slot(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| out[idx(j)] * g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += out[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                d,
            } => {
                let d = *d;
                let gv = val(*gamma);
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = kernels::dot(&dxhat, hr);
                        for j in 0..d {
                            gx[r * d + j] += inv / d as f64 * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
                if needs(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for gr in g.chunks_exact(d) {
                        kernels::axpy(gb, 1.0, gr);
                    }
                }
            }
            Op::SwapLast2 { x, outer, a, b } => {
                let (a, b) = (*a, *b);
                let gx = slot(grads, nodes, *x);
                for o in 0..*outer {
                    for i in 0..a {
                        for j in 0..b {
                            gx[o * a * b + i * b + j] += g[o * a * b + j * a + i];
                        }
                    }
                }
            }
            Op::MeanAxis { x, outer, len, inner } => {
                let (len, inner) = (*len, *inner);
                let gx = slot(grads, nodes, *x);
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..len {
                        kernels::axpy(&mut gx[(o * len + j) * inner..(o * len + j + 1) * inner], 1.0 / len as f64, src);
                    }
                }
            }
            Op::ScaleChannels { x, s, t } => {
                let t = *t;
                let sv = val(*s);
                if needs(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (r, gate) in sv.iter().enumerate() {
                        kernels::axpy(&mut gx[r * t..(r + 1) * t], *gate, &g[r * t..(r + 1) * t]);
                    }
                }
                if needs(*s) {
                    let xv = val(*x);
                    let gs = slot(grads, nodes, *s);
                    for (r, gsr) in gs.iter_mut().enumerate() {
                        *gsr += kernels::dot(&g[r * t..(r + 1) * t], &xv[r * t..(r + 1) * t]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                lse,
                dims: (bsz, t, d),
            } => {
                let (t, d, heads) = (*t, *d, *heads);
                let n = t * d;
                let mut dq = vec![0.0; bsz * n];
                let mut dk = vec![0.0; bsz * n];
                let mut dv = vec![0.0; bsz * n];
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                for b in 0..*bsz {
                    let r = b * n..(b + 1) * n;
                    kernels::attention_backward(
                        &qv[r.clone()],
                        &kv[r.clone()],
                        &vv[r.clone()],
                        &lse[b * heads * t..(b + 1) * heads * t],
                        &g[r.clone()],
                        t,
                        d,
                        heads,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                for (var, dvar) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        kernels::axpy(slot(grads, nodes, var), 1.0, &dvar);
                    }
                }
            }
            Op::WeightedTimeSum {
                alpha,
                a,
                dims: (bsz, t, d),
            } => {
                let (bsz, t, d) = (*bsz, *t, *d);
                let av = val(*a);
                let alv = val(*alpha);
                if needs(*alpha) {
                    let gal = slot(grads, nodes, *alpha);
                    for b in 0..bsz {
                        for ti in 0..t {
                            gal[b * t + ti] += kernels::dot(&g[b * d..(b + 1) * d], &av[(b * t + ti) * d..(b * t + ti + 1) * d]);
                        }
                    }
                }
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    for b in 0..bsz {
                        for ti in 0..t {
                            kernels::axpy(&mut ga[(b * t + ti) * d..(b * t + ti + 1) * d], alv[b * t + ti], &g[b * d..(b + 1) * d]);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms, d } => {
                let d = *d;
                let gx = slot(grads, nodes, *x);
                for (r, n) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let yg = kernels::dot(y, gr);
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - y[j] * yg) / n;
                    }
                }
            }
            Op::SupCon { z, coef, n, d, tau } => {
                let (n, d) = (*n, *d);
                let zv = val(*z);
                // sim = z zᵀ / τ, so dz = (C + Cᵀ) z / τ, scaled by upstream.
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = (coef[i * n + j] + coef[j * n + i]) * g[0] / tau;
                    }
                }
                let gz = slot(grads, nodes, *z);
                kernels::gemm(n, n, d, &sym, n, 1, zv, d, 1, 1.0, gz, d, 1);
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
            } => {
                let c = *classes;
                let scale = g[0] / labels.len() as f64;
                let gl = slot(grads, nodes, *logits);
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, nodes, *x);
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_box_kernel_with_padding() {
        // Sliding-window sums with zero padding: [0+1+2, 1+2+3, 2+3+0].
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0; 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv_full_width_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3000]));
        let w = g.constant(Tensor::zeros(&[64, 1, 3]));
        let b = g.constant(Tensor::zeros(&[64]));
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 3000]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = g.conv1d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn maxpool_trailing_partial_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 6], vec![1.0, 3.0, 2.0, 5.0, 4.0, 9.0]).unwrap());
        let y = g.maxpool1d_ceil(x, 5).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 9.0]);
    }

    #[test]
    fn maxpool_table_lengths() {
        let mut g = Graph::new();
        let mut x = g.constant(Tensor::zeros(&[1, 1, 3000]));
        let mut lens = vec![];
        for _ in 0..4 {
            x = g.maxpool1d_ceil(x, 5).unwrap();
            lens.push(g.shape(x)[2]);
        }
        assert_eq!(lens, vec![600, 120, 24, 5]);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 3], vec![2.0, 2.0, 1.0]).unwrap(), true);
        let y = g.maxpool1d_ceil(x, 3).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_empty() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 0]));
        assert!(g.maxpool1d_ceil(x, 5).is_err());
    }

    #[test]
    fn batchnorm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batchnorm1d_train(x, gamma, beta, 0.0).unwrap();
        close(g.value(y).data(), &[-1.0, 1.0], 1e-12);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn batchnorm_eval_ignores_batch() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let a = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 3.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 100.0]).unwrap());
        let ya = g.batchnorm1d_eval(a, gamma, beta, &[1.0], &[4.0], 0.0).unwrap();
        let yb = g.batchnorm1d_eval(b, gamma, beta, &[1.0], &[4.0], 0.0).unwrap();
        assert_eq!(g.value(ya).data()[0], g.value(yb).data()[0]);
        assert_eq!(g.value(ya).data()[1], 1.0);
    }

    #[test]
    fn prelu_piecewise() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![-4.0, 0.0, 2.0]).unwrap());
        let a = g.constant(Tensor::full(&[1], 0.25));
        let y = g.prelu(x, a, 1).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.0, 2.0]);
        let zero = g.constant(Tensor::zeros(&[1]));
        let r = g.prelu(x, zero, 1).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_dot_product() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        close(g.value(y).data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15);
        let z = g.constant(Tensor::zeros(&[2]));
        let yz = g.softmax(z, 0).unwrap();
        assert_eq!(g.value(yz).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(Tensor::full(&[1, 3], 7.0));
        let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let d = g.value(y).data();
        let mean = d.iter().sum::<f64>() / 3.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // accumulation on repeated backward
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.1]).unwrap(), true);
        let y = g.softmax(x, 0).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        store.get_mut(id).frozen = true;
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input(Tensor::scalar(3.0), true);
        let y = g.mul(w, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(w).is_none());
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.get(id).grad, vec![0.0]);
    }
}
