//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends one node. Nodes are stored in recording order, so
//! walking the tape backwards from the loss is a valid topological order and
//! each node pushes its gradient contribution to its inputs exactly once.

use std::fmt;

use crate::error::{EdmaeError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Upsample,
    AvgPool2,
    Concat,
    Relu,
    Sigmoid,
    Linear,
    GlobalAvgPool,
    Add,
    Scale,
    Sum,
    Mse,
    SoftmaxFocal,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::Upsample,
        OpKind::AvgPool2,
        OpKind::Concat,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Linear,
        OpKind::GlobalAvgPool,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mse,
        OpKind::SoftmaxFocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Upsample => "upsample",
            OpKind::AvgPool2 => "avg_pool2",
            OpKind::Concat => "concat_channels",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Linear => "linear",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mse => "mse_loss",
            OpKind::SoftmaxFocal => "softmax_focal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    AvgPool2 { x: Var },
    Concat { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: T },
    Sum { x: Var },
    Mse { a: Var, b: Var, mask: Option<Vec<bool>>, count: usize },
    SoftmaxFocal { logits: Var, targets: Vec<usize>, gamma: f64, alpha: f64 },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::AvgPool2 { .. } => OpKind::AvgPool2,
            Op::Concat { .. } => OpKind::Concat,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Linear { .. } => OpKind::Linear,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mse { .. } => OpKind::Mse,
            Op::SoftmaxFocal { .. } => OpKind::SoftmaxFocal,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The computation tape.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales the backward rule of `kind` by 1.5. Only meant for exercising
    /// the gradient checker's failure path.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Sign pattern of every relu input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|v| *v > T::zero()));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !all_finite(value.data()) {
            return Err(EdmaeError::NonFinite(format!(
                "{} produced a non-finite value",
                op.kind()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node_from(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        self.push(value, op)
    }

    /// Records a leaf; it requires a gradient iff the tensor says so.
    pub fn input(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.set_grad(None);
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.input(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.input(t.with_requires_grad(false))
    }

    /// Stop-gradient barrier: a fresh leaf carrying `v`'s value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [f, kc, kh, kw] = self.value(w).dims4()?;
        if kc != c {
            return Err(EdmaeError::Dimension(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if self.value(b).numel() != f {
            return Err(EdmaeError::Dimension(format!(
                "conv2d bias has {} entries for {f} filters",
                self.value(b).numel()
            )));
        }
        if stride == 0 {
            return Err(EdmaeError::Dimension("conv2d stride must be at least 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(EdmaeError::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let geom = ConvGeom { n, c, h, w: wd, f, kh, kw, stride, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        if n == 0 || f == 0 || oh == 0 || ow == 0 {
            return Err(EdmaeError::Dimension("conv2d output would be empty".into()));
        }
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.node_from(vec![n, f, oh, ow], out, &[x, w, b], Op::Conv2d { x, w, b, geom })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if factor == 0 {
            return Err(EdmaeError::Config("upsample factor must be positive".into()));
        }
        let out = kernels::upsample_forward(n * c, h, w, factor, self.value(x).data());
        self.node_from(vec![n, c, h * factor, w * factor], out, &[x], Op::Upsample { x, factor })
    }

    /// Learned upsampling: nearest-neighbour ×`factor` followed by a
    /// same-padded convolution.
    pub fn transposed_upsample(&mut self, x: Var, factor: usize, kernel: Var, bias: Var) -> Result<Var> {
        if factor != 2 && factor != 4 {
            return Err(EdmaeError::Config(format!(
                "upsample factor {factor} unsupported (expected 2 or 4)"
            )));
        }
        let [_, _, kh, kw] = self.value(kernel).dims4()?;
        if kh % 2 == 0 || kw != kh {
            return Err(EdmaeError::Dimension(format!(
                "learned upsampling needs an odd square kernel, got {kh}x{kw}"
            )));
        }
        let up = self.upsample(x, factor)?;
        self.conv2d(up, kernel, bias, 1, kh / 2)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(EdmaeError::Dimension(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let out = kernels::avg_pool2_forward(n * c, h, w, self.value(x).data());
        self.node_from(vec![n, c, h / 2, w / 2], out, &[x], Op::AvgPool2 { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(EdmaeError::Dimension(format!(
                "concat_channels batch/spatial mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = h * w;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&ad[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bd[i * cb * plane..(i + 1) * cb * plane]);
        }
        self.node_from(vec![n, ca + cb, h, w], out, &[a, b], Op::Concat { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.max(T::zero())).collect();
        self.node_from(t.shape().to_vec(), out, &[x], Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| T::one() / (T::one() + (-*v).exp())).collect();
        self.node_from(t.shape().to_vec(), out, &[x], Op::Sigmoid { x })
    }

    /// `x[N,D] · w[O,D]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (&[n, d], &[o, wd]) = (xs, ws) else {
            return Err(EdmaeError::Dimension(format!("linear expects [N,D] and [O,D], got {xs:?}, {ws:?}")));
        };
        if d != wd || self.value(b).numel() != o {
            return Err(EdmaeError::Dimension(format!(
                "linear shapes incompatible: x {xs:?}, w {ws:?}, b {:?}",
                self.value(b).shape()
            )));
        }
        let out = kernels::linear_forward(n, d, o, self.value(x).data(), self.value(w).data(), self.value(b).data());
        self.node_from(vec![n, o], out, &[x, w, b], Op::Linear { x, w, b })
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = T::one() / T::from_f64_lossy((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.node_from(vec![n, c], out, &[x], Op::GlobalAvgPool { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(EdmaeError::Dimension(format!(
                "add shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        self.node_from(self.value(a).shape().to_vec(), out, &[a, b], Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| *v * s).collect();
        self.node_from(self.value(x).shape().to_vec(), out, &[x], Op::Scale { x, s })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.node_from(vec![1], vec![s], &[x], Op::Sum { x })
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mse_impl(a, b, None)
    }

    /// Mean squared error restricted to positions where `mask` is true. An
    /// empty mask yields a loss of exactly zero.
    pub fn masked_mse_loss(&mut self, a: Var, b: Var, mask: Vec<bool>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(EdmaeError::Dimension(format!(
                "mask has {} entries for {} elements",
                mask.len(),
                self.value(a).numel()
            )));
        }
        self.mse_impl(a, b, Some(mask))
    }

    fn mse_impl(&mut self, a: Var, b: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(EdmaeError::Dimension(format!(
                "mse shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (count, sq) = match &mask {
            None => (ad.len(), ad.iter().zip(bd).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>()),
            Some(m) => (
                m.iter().filter(|f| **f).count(),
                ad.iter()
                    .zip(bd)
                    .zip(m)
                    .filter(|(_, f)| **f)
                    .map(|((x, y), _)| (*x - *y) * (*x - *y))
                    .sum::<T>(),
            ),
        };
        let loss = if count == 0 { T::zero() } else { sq / T::from_f64_lossy(count as f64) };
        self.node_from(vec![1], vec![loss], &[a, b], Op::Mse { a, b, mask, count })
    }

    /// Mean softmax cross-entropy over axis 1 of `[N, K, ...]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.softmax_focal(logits, targets, 0.0, 1.0)
    }

    /// Mean focal loss `-α(1-p_t)^γ log p_t` over axis 1 of `[N, K, ...]`,
    /// with `p_t` the softmax probability of the target class clamped at
    /// 1e-7 from below.
    pub fn softmax_focal(&mut self, logits: Var, targets: &[usize], gamma: f64, alpha: f64) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 {
            return Err(EdmaeError::Dimension(format!("class axis missing in logits {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if targets.len() != n * s {
            return Err(EdmaeError::Label(format!(
                "{} targets for {} prediction sites",
                targets.len(),
                n * s
            )));
        }
        if let Some(bad) = targets.iter().find(|t| **t >= k) {
            return Err(EdmaeError::Label(format!("class index {bad} out of range for {k} classes")));
        }
        let (loss, _) = kernels::softmax_focal(n, k, s, self.value(logits).data(), targets, gamma, alpha, None);
        self.node_from(
            vec![1],
            vec![loss],
            &[logits],
            Op::SoftmaxFocal { logits, targets: targets.to_vec(), gamma, alpha },
        )
    }

    /// Populates gradients of every tensor reachable from `loss` that
    /// requires one. Previous gradients on the tape are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(EdmaeError::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(EdmaeError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![T::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(gout) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let kind = self.nodes[i].op.kind();
            let contribs = self.input_grads(i, &gout);
            self.nodes[i].value.set_grad(Some(gout));
            let mut contribs = contribs?;
            if self.fault == Some(kind) {
                let k = T::from_f64_lossy(1.5);
                for (_, g) in &mut contribs {
                    g.iter_mut().for_each(|v| *v *= k);
                }
            }
            for (v, g) in contribs {
                if !self.requires_grad(v) {
                    continue;
                }
                if !all_finite(&g) {
                    return Err(EdmaeError::NonFinite(format!("gradient through {kind}")));
                }
                let t = &mut self.nodes[v.0].value;
                match t.take_grad() {
                    None => t.set_grad(Some(g)),
                    Some(mut acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                        t.set_grad(Some(acc));
                    }
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, gout: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.value(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_params = rg(*w) || rg(*b);
                let g = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), gout, rg(*x), need_params);
                if let Some(gx) = g.x {
                    out.push((*x, gx));
                }
                if let (Some(gw), Some(gb)) = (g.w, g.b) {
                    out.push((*w, gw));
                    out.push((*b, gb));
                }
            }
            Op::Upsample { x, factor } => {
                let [n, c, h, w] = val(*x).dims4()?;
                out.push((*x, kernels::upsample_backward(n * c, h, w, *factor, gout)));
            }
            Op::AvgPool2 { x } => {
                let [n, c, h, w] = val(*x).dims4()?;
                out.push((*x, kernels::avg_pool2_backward(n * c, h, w, gout)));
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = val(*a).dims4()?;
                let cb = val(*b).shape()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in gout.chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&s[..ca * plane]);
                    gb.extend_from_slice(&s[ca * plane..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Relu { x } => {
                let g = val(*x)
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                out.push((*x, g));
            }
            Op::Sigmoid { x } => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| *g * *y * (T::one() - *y))
                    .collect();
                out.push((*x, g));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[0];
                let (gx, gw, gb) = kernels::linear_backward(n, d, o, val(*x).data(), val(*w).data(), gout);
                out.push((*x, gx));
                out.push((*w, gw));
                out.push((*b, gb));
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = val(*x).dims4()?;
                let inv = T::one() / T::from_f64_lossy((h * w) as f64);
                let g = gout.iter().flat_map(|g| std::iter::repeat_n(*g * inv, h * w)).collect();
                out.push((*x, g));
            }
            Op::Add { a, b } => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Scale { x, s } => {
                out.push((*x, gout.iter().map(|g| *g * *s).collect()));
            }
            Op::Sum { x } => {
                out.push((*x, vec![gout[0]; val(*x).numel()]));
            }
            Op::Mse { a, b, mask, count } => {
                let n = val(*a).numel();
                let mut ga = vec![T::zero(); n];
                if *count > 0 {
                    let k = T::from_f64_lossy(2.0) * gout[0] / T::from_f64_lossy(*count as f64);
                    for (j, (x, y)) in val(*a).data().iter().zip(val(*b).data()).enumerate() {
                        if mask.as_ref().is_none_or(|m| m[j]) {
                            ga[j] = k * (*x - *y);
                        }
                    }
                }
                let gb = ga.iter().map(|v| -*v).collect();
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::SoftmaxFocal { logits, targets, gamma, alpha } => {
                let shape = val(*logits).shape();
                let (n, k) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let (_, g) = kernels::softmax_focal(
                    n,
                    k,
                    s,
                    val(*logits).data(),
                    targets,
                    *gamma,
                    *alpha,
                    Some(gout[0]),
                );
                out.push((*logits, g.expect("gradient requested")));
            }
        }
        Ok(out)
    }
}

/// Branch-free scan: `v - v` is zero for finite values and NaN otherwise.
fn all_finite<T: Scalar>(data: &[T]) -> bool {
    let mut acc = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += *v - *v;
        }
    }
    let mut total = tail.iter().fold(T::zero(), |a, v| a + (*v - *v));
    for a in acc {
        total += a;
    }
    total == T::zero()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 5, 5])).unwrap();
        let w = g.param(Tensor::full(&[1, 2, 3, 3], 0.7)).unwrap();
        let b = g.param(t(&[1], &[0.5])).unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let img = Tensor::from_fn(&[2, 1, 4, 4], |i| (i as f32 * 0.37).sin());
        let x = g.constant(img.clone()).unwrap();
        let w = g.param(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let b = g.param(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert!(g.value(y).max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let b = g.param(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(EdmaeError::Dimension(_))));
        let w5 = g.param(Tensor::zeros(&[1, 2, 5, 5])).unwrap();
        assert!(matches!(g.conv2d(x, w5, b, 1, 0), Err(EdmaeError::Dimension(_))));
        let w3 = g.param(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        assert!(matches!(g.conv2d(x, w3, b, 0, 0), Err(EdmaeError::Dimension(_))));
    }

    #[test]
    fn output_shape_follows_stride_and_padding() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 9, 8])).unwrap();
        let w = g.param(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
        let b = g.param(Tensor::zeros(&[3])).unwrap();
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 5, 4]);
    }

    #[test]
    fn transposed_upsample_nearest_with_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = g.param(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        let b = g.param(Tensor::zeros(&[1])).unwrap();
        let y = g.transposed_upsample(x, 2, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        assert_eq!(&g.value(y).data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert!(matches!(g.transposed_upsample(x, 3, w, b), Err(EdmaeError::Config(_))));

        let z = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let bias = g.param(t(&[1], &[0.25])).unwrap();
        let yz = g.transposed_upsample(z, 4, w, bias).unwrap();
        assert_eq!(g.value(yz).shape(), &[1, 1, 8, 8]);
        assert!(g.value(yz).data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn avg_pool_values_and_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[0.0, 0.0, 2.0, 2.0])).unwrap();
        let y = g.avg_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 3.5)).unwrap();
        let yc = g.avg_pool2(c).unwrap();
        assert!(g.value(yc).data().iter().all(|v| *v == 3.5));
        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4])).unwrap();
        assert!(matches!(g.avg_pool2(odd), Err(EdmaeError::Dimension(_))));
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let b = g.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);

        let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32)).unwrap();
        let empty = g.constant(Tensor::zeros(&[2, 0, 2, 2])).unwrap();
        let same = g.concat_channels(x, empty).unwrap();
        assert_eq!(g.value(same), g.value(x));

        let bad = g.constant(Tensor::zeros(&[1, 1, 4, 5])).unwrap();
        assert!(matches!(g.concat_channels(a, bad), Err(EdmaeError::Dimension(_))));
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let b = g.constant(t(&[2], &[2.0, 0.0])).unwrap();
        let l = g.mse_loss(a, b).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l0 = g.mse_loss(a, a).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        let lm = g.masked_mse_loss(a, b, vec![false, false]).unwrap();
        assert_eq!(g.value(lm).item(), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.softmax_cross_entropy(z, &[0, 3]), Err(EdmaeError::Label(_))));
        let l = g.softmax_cross_entropy(z, &[0, 2]).unwrap();
        assert!((g.value(l).item() - 3f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_respects_stop_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = g.param(t(&[2], &[0.0, 1.0])).unwrap();
        let blocked = g.detach(c).unwrap();
        let l = g.mse_loss(x, blocked).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_some());
        assert!(g.grad(blocked).is_none());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_usage_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(EdmaeError::Usage(_))));
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(t(&[1], &[f32::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(EdmaeError::NonFinite(_))));
    }
}
