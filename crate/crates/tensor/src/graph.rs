//! Tape of recorded ops and the reverse sweep over it.
//!
//! Nodes are appended in execution order, so the node index is already a
//! topological order; `backward` walks it in reverse exactly once.

use crate::conv::{self, ConvGeom};
use crate::error::{Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;
use crate::Float;

/// Momentum used for running-statistics updates.
pub const BN_MOMENTUM: Float = 0.1;
/// Variance guard inside batch normalization.
pub const BN_EPS: Float = 1e-5;
/// Norm guard inside L2 normalization.
pub const L2_EPS: Float = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    StopGradient,
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Option<Vec<Float>> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<Float>, inv_std: Vec<Float>, training: bool },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMul { lhs: Var, rhs: Var },
    Transpose { input: Var },
    Relu { input: Var },
    GlobalAvgPool { input: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape { input: Var },
    Add { lhs: Var, rhs: Var },
    Sub { lhs: Var, rhs: Var },
    Mul { lhs: Var, rhs: Var },
    Scale { input: Var, factor: Float },
    Sum { input: Var },
    Mean { input: Var },
    L2Normalize { input: Var, axis: usize, norms: Vec<Float> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<Float> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel moments of one training-mode normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<Float>,
    /// Unbiased estimate, as folded into running statistics.
    pub var: Vec<Float>,
}

/// Exponential moving averages used by normalization in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn update(&mut self, batch: &BatchMoments) {
        let m = BN_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last `backward` target w.r.t. `v`, if `v` takes part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    /// Identity forward; blocks every gradient in the reverse sweep.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.nodes.push(Node { value, op: Op::StopGradient, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation of an NCHW input with an OIKK (square) kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", lhs: xs.clone(), rhs: ws.clone() };
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(mismatch());
        }
        let (k, h, w) = (ws[2], xs[2], xs[3]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w,
            o: ws[0],
            k,
            stride,
            pad: padding,
            ho: (h + 2 * padding - k) / stride + 1,
            wo: (w + 2 * padding - k) / stride + 1,
        };
        let fwd = conv::forward(&geom, self.value(input).data(), self.value(weight).data());
        let cols = if self.any_grad(&[input, weight]) { fwd.saved_cols } else { None };
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], fwd.out)?;
        self.push("conv2d", value, Op::Conv2d { input, weight, geom, cols }, &[input, weight])
    }

    /// Training-mode normalization over every axis except channel axis 1.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: Float) -> Result<(Var, BatchMoments)> {
        let (n, c, inner) = self.norm_geometry(input, gamma, beta)?;
        let m = n * inner;
        if m <= 1 {
            return Err(TensorError::DegenerateBatch { op: "batch_norm", count: m });
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * inner..][..inner].iter().sum::<Float>();
            }
            mean[ch] = s / m as Float;
            let mut s2 = 0.0;
            for b in 0..n {
                for &v in &x[(b * c + ch) * inner..][..inner] {
                    let d = v - mean[ch];
                    s2 += d * d;
                }
            }
            var[ch] = s2 / m as Float;
        }
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let moments =
            BatchMoments { var: var.iter().map(|v| v * m as Float / (m - 1) as Float).collect(), mean: mean.clone() };
        let out = self.normalize(input, gamma, beta, &mean, &inv_std, true, (n, c, inner))?;
        Ok((out, moments))
    }

    /// Eval-mode normalization with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        eps: Float,
    ) -> Result<Var> {
        let geom = self.norm_geometry(input, gamma, beta)?;
        if stats.mean.len() != geom.1 || stats.var.len() != geom.1 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(input).to_vec(),
                rhs: vec![stats.mean.len()],
            });
        }
        let inv_std: Vec<Float> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(input, gamma, beta, &stats.mean, &inv_std, false, geom)
    }

    /// Normalization that also folds batch moments into `stats` when training.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
        eps: Float,
    ) -> Result<Var> {
        if training {
            let (out, moments) = self.batch_norm_train(input, gamma, beta, eps)?;
            stats.update(&moments);
            Ok(out)
        } else {
            self.batch_norm_eval(input, gamma, beta, stats, eps)
        }
    }

    fn norm_geometry(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(input);
        if xs.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                msg: format!("input of shape {xs:?} has no channel axis"),
            });
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: xs.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[Float],
        inv_std: &[Float],
        training: bool,
        (n, c, inner): (usize, usize, usize),
    ) -> Result<Var> {
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let needs = self.any_grad(&[input, gamma, beta]);
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: if needs { xhat } else { Vec::new() },
                inv_std: inv_std.to_vec(),
                training,
            },
            &[input, gamma, beta],
        )
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(TensorError::ShapeMismatch { op: "linear", lhs: ws, rhs: self.shape(b).to_vec() });
            }
        }
        let mut out = match bias {
            Some(b) => {
                let bv = self.value(b).data();
                let mut o = Vec::with_capacity(n * dout);
                for _ in 0..n {
                    o.extend_from_slice(bv);
                }
                o
            }
            None => vec![0.0; n * dout],
        };
        gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            Layout::row_major(din),
            self.value(weight).data(),
            Layout::transposed(din),
            1.0,
            &mut out,
            Layout::row_major(dout),
        );
        let value = Tensor::new(vec![n, dout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { input, weight, bias }, &inputs)
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.shape(lhs).to_vec();
        let b = self.shape(rhs).to_vec();
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a, rhs: b });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(lhs).data(),
            Layout::row_major(k),
            self.value(rhs).data(),
            Layout::row_major(n),
            0.0,
            &mut out,
            Layout::row_major(n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { lhs, rhs }, &[lhs, rhs])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got shape {s:?}"),
            });
        }
        let value = transpose2(self.value(input).data(), s[0], s[1]);
        let value = Tensor::new(vec![s[1], s[0]], value)?;
        self.push("transpose", value, Op::Transpose { input }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("relu", value, Op::Relu { input }, &[input])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                msg: format!("expected NCHW input, got shape {s:?}"),
            });
        }
        let hw = s[2] * s[3];
        let out = self.value(input).data().chunks(hw).map(|p| p.iter().sum::<Float>() / hw as Float).collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { input }, &[input])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() });
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * s[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { input, axis, start }, &[input])
    }

    /// Splits `input` along `axis` into pieces of the given extents.
    pub fn split(&mut self, input: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(input, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push("reshape", value, Op::Reshape { input }, &[input])
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        lhs: Var,
        rhs: Var,
        f: impl Fn(Float, Float) -> Float,
    ) -> Result<Tensor> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch { op: name, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.zip_with("add", lhs, rhs, |a, b| a + b)?;
        self.push("add", value, Op::Add { lhs, rhs }, &[lhs, rhs])
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.zip_with("sub", lhs, rhs, |a, b| a - b)?;
        self.push("sub", value, Op::Sub { lhs, rhs }, &[lhs, rhs])
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value = self.zip_with("mul", lhs, rhs, |a, b| a * b)?;
        self.push("mul", value, Op::Mul { lhs, rhs }, &[lhs, rhs])
    }

    pub fn scale(&mut self, input: Var, factor: Float) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: Float = self.value(input).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.data().iter().sum::<Float>() / x.numel() as Float;
        self.push("mean", Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    /// Scales every slice along `axis` to unit Euclidean norm, `x / (‖x‖ + eps)`.
    pub fn l2_normalize(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let x = self.value(input).data();
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let n = (0..len).map(|j| x[idx(j)] * x[idx(j)]).sum::<Float>().sqrt();
                norms[o * inner + i] = n;
                let d = n + L2_EPS;
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] / d;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        self.push("l2_normalize", value, Op::L2Normalize { input, axis, norms }, &[input])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits {s:?} incompatible with {} targets", targets.len()),
            });
        }
        let (n, k) = (s[0], s[1]);
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x[r * k..][..k];
            let mx = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let z: Float = row.iter().map(|v| (v - mx).exp()).sum();
            for (p, v) in probs[r * k..][..k].iter_mut().zip(row) {
                *p = (v - mx).exp() / z;
            }
            loss += z.ln() + mx - row[targets[r]];
        }
        let value = Tensor::scalar(loss / n as Float);
        self.push("cross_entropy", value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Afterwards every node that depends on a gradient-requiring leaf holds
    /// its gradient; leaves that require a gradient but do not reach the loss
    /// hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(ls.shape()));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        match &nodes[id].op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d { input, weight, geom, cols } => {
                let (dx, dw) = conv::backward(geom, val(*input).data(), val(*weight).data(), cols.as_deref(), gd);
                acc(*input, Tensor::new(val(*input).shape().to_vec(), dx)?);
                acc(*weight, Tensor::new(val(*weight).shape().to_vec(), dw)?);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let xs = val(*input).shape();
                let (n, c, inner) = (xs[0], xs[1], xs[2..].iter().product::<usize>());
                let m = (n * inner) as Float;
                let gm = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let k = gm[ch] * inv_std[ch];
                            for i in off..off + inner {
                                dx[i] = if *training {
                                    k / m * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    acc(*input, Tensor::new(xs.to_vec(), dx)?);
                }
                acc(*gamma, Tensor::new(vec![c], sum_gx)?);
                acc(*beta, Tensor::new(vec![c], sum_g)?);
            }
            Op::Linear { input, weight, bias } => {
                let xs = val(*input).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = val(*weight).shape()[0];
                if nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        gd,
                        Layout::row_major(dout),
                        val(*weight).data(),
                        Layout::row_major(din),
                        0.0,
                        &mut dx,
                        Layout::row_major(din),
                    );
                    acc(*input, Tensor::new(vec![n, din], dx)?);
                }
                if nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        gd,
                        Layout::transposed(dout),
                        val(*input).data(),
                        Layout::row_major(din),
                        0.0,
                        &mut dw,
                        Layout::row_major(din),
                    );
                    acc(*weight, Tensor::new(vec![dout, din], dw)?);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if nodes[lhs.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        Layout::row_major(n),
                        b.data(),
                        Layout::transposed(n),
                        0.0,
                        &mut da,
                        Layout::row_major(k),
                    );
                    acc(*lhs, Tensor::new(vec![m, k], da)?);
                }
                if nodes[rhs.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        Layout::transposed(k),
                        gd,
                        Layout::row_major(n),
                        0.0,
                        &mut db,
                        Layout::row_major(n),
                    );
                    acc(*rhs, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose { input } => {
                let s = g.shape();
                acc(*input, Tensor::new(vec![s[1], s[0]], transpose2(gd, s[0], s[1]))?);
            }
            Op::Relu { input } => {
                let x = val(*input);
                let dx = x.data().iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::GlobalAvgPool { input } => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(s.iter().product());
                for &v in gd {
                    dx.extend(std::iter::repeat_n(v / hw as Float, hw));
                }
                acc(*input, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Concat { inputs, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut parts: Vec<Vec<Float>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        part.extend_from_slice(&gd[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (part, v) in parts.into_iter().zip(inputs) {
                    acc(*v, Tensor::new(val(*v).shape().to_vec(), part)?);
                }
            }
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let len = g.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![0.0; val(*input).numel()];
                for o in 0..outer {
                    dx[(o * s[*axis] + start) * inner..][..len * inner]
                        .copy_from_slice(&gd[o * len * inner..][..len * inner]);
                }
                acc(*input, Tensor::new(s.to_vec(), dx)?);
            }
            Op::Reshape { input } => {
                acc(*input, g.reshape(val(*input).shape())?);
            }
            Op::Add { lhs, rhs } => {
                acc(*lhs, g.clone());
                acc(*rhs, g.clone());
            }
            Op::Sub { lhs, rhs } => {
                acc(*lhs, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                acc(*rhs, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let da = gd.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                acc(*lhs, Tensor::new(a.shape().to_vec(), da)?);
                acc(*rhs, Tensor::new(b.shape().to_vec(), db)?);
            }
            Op::Scale { input, factor } => {
                let dx = gd.iter().map(|v| v * factor).collect();
                acc(*input, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Sum { input } => {
                acc(*input, Tensor::full(val(*input).shape(), gd[0]));
            }
            Op::Mean { input } => {
                let x = val(*input);
                acc(*input, Tensor::full(x.shape(), gd[0] / x.numel() as Float));
            }
            Op::L2Normalize { input, axis, norms } => {
                let x = val(*input);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let xd = x.data();
                let mut dx = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let n = norms[o * inner + i];
                        let d = n + L2_EPS;
                        let dot: Float = (0..len).map(|j| gd[idx(j)] * xd[idx(j)]).sum();
                        let k = if n > 0.0 { dot / (d * d * n) } else { 0.0 };
                        for j in 0..len {
                            dx[idx(j)] = gd[idx(j)] / d - xd[idx(j)] * k;
                        }
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = val(*logits).shape();
                let (n, k) = (s[0], s[1]);
                let scale = gd[0] / n as Float;
                let mut dx: Vec<Float> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * k + t] -= scale;
                }
                acc(*logits, Tensor::new(s.to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

fn transpose2(x: &[Float], rows: usize, cols: usize) -> Vec<Float> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}
