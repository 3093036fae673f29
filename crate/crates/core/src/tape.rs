//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! context to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in exact reverse recording order. Leaf tensors flagged with
//! `requires_grad` accumulate gradients across backward calls until
//! [`Tape::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Upsample2x(Var),
    AvgPoolSpatial(Var),
    MatMul(Var, Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    CosineSim {
        a: Var,
        b: Var,
        degenerate: bool,
    },
    NegSqDist {
        keys: Var,
        query: Var,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    CrossEntropy {
        probs: Var,
        /// Per-element multiplier of `-1/p` in the gradient (zero where unselected).
        coeff: Rc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    degenerate_cosines: usize,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables a finiteness check on every op output.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine similarities evaluated on a zero-norm operand.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    /// Records an input tensor. Gradients flow to it iff it `requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu(x), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data(x)[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, data, Op::Narrow { input: x, axis, start }, &[x])
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).detach();
        self.constant(t)
    }

    /// Concatenates tensors of equal rank along `axis`; other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    fn nchw(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
        }
    }

    /// 2-D convolution: `[N,C,H,W] * [O,C,kh,kw] (+ [O]) -> [N,O,H',W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.nchw("conv2d", input)?;
        let [o, wc, kh, kw] = self.nchw("conv2d", weight)?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (axis 1) {c} vs weight channels (axis 1) {wc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w} (axes 2,3)"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} output channels", self.shape(b)),
                ));
            }
        }
        let g = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let data = kernels::conv2d_forward(
            self.data(input),
            n,
            &g,
            self.data(weight),
            o,
            bias.map(|b| self.data(b)),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            vec![n, o, g.out_h(), g.out_w()],
            data,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Group normalisation with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", "affine parameters must be [C]"));
        }
        let (data, stats) = kernels::group_norm_forward(
            self.data(x),
            n,
            c,
            h * w,
            groups,
            self.data(gamma),
            self.data(beta),
        );
        self.push(
            vec![n, c, h, w],
            data,
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Bilinear 2x spatial upsampling of `[N,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("upsample2x", x)?;
        let data = kernels::upsample2x_forward(self.data(x), n * c, h, w);
        self.push(vec![n, c, 2 * h, 2 * w], data, Op::Upsample2x(x), &[x])
    }

    /// Spatial mean of `[N,C,H,W]`, giving `[N,C]`.
    pub fn avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw("avg_pool_spatial", x)?;
        let hw = h * w;
        let data = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(vec![n, c], data, Op::AvgPoolSpatial(x), &[x])
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let data = kernels::softmax_forward(self.data(x), outer, len, inner);
        self.push(shape, data, Op::Softmax { input: x, axis }, &[x])
    }

    /// Cosine similarity of two equally sized tensors viewed as flat vectors.
    ///
    /// A zero-norm operand yields 0 with zero gradient, and bumps
    /// [`Tape::degenerate_cosines`].
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let dot: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
        let na2 = da.iter().map(|x| x * x).sum::<f64>();
        let nb2 = db.iter().map(|x| x * x).sum::<f64>();
        let degenerate = na2 == 0.0 || nb2 == 0.0;
        let sim = if degenerate {
            self.degenerate_cosines += 1;
            log::warn!("cosine similarity on a zero-norm vector; using 0");
            0.0
        } else {
            // sqrt(na2 * nb2) is exactly na2 when a == b, so sim(a, a) == 1.
            let mut norm = (na2 * nb2).sqrt();
            if !norm.is_normal() {
                norm = na2.sqrt() * nb2.sqrt();
            }
            (dot / norm).clamp(-1.0, 1.0)
        };
        self.push(Vec::new(), vec![sim], Op::CosineSim { a, b, degenerate }, &[a, b])
    }

    /// Pairwise negative squared Euclidean distances between the columns of
    /// `keys: [D,P]` and `query: [D,Q]`, giving `[P,Q]`.
    pub fn neg_sq_dist(&mut self, keys: Var, query: Var) -> Result<Var> {
        let (d, p, q) = match (self.shape(keys), self.shape(query)) {
            (&[d, p], &[d2, q]) if d == d2 => (d, p, q),
            (sk, sq) => {
                return Err(Error::shape("neg_sq_dist", format!("{sk:?} vs {sq:?}")));
            }
        };
        let (kd, qd) = (self.data(keys), self.data(query));
        let mut out = vec![0.0; p * q];
        kernels::gemm(p, d, q, kd, true, qd, false, 0.0, &mut out);
        let mut kn = vec![0.0; p];
        let mut qn = vec![0.0; q];
        for di in 0..d {
            for (pi, n) in kn.iter_mut().enumerate() {
                *n += kd[di * p + pi] * kd[di * p + pi];
            }
            for (qi, n) in qn.iter_mut().enumerate() {
                *n += qd[di * q + qi] * qd[di * q + qi];
            }
        }
        for (pi, row) in out.chunks_mut(q).enumerate() {
            for (qi, v) in row.iter_mut().enumerate() {
                *v = (2.0 * *v - kn[pi] - qn[qi]).min(0.0);
            }
        }
        self.push(vec![p, q], out, Op::NegSqDist { keys, query }, &[keys, query])
    }

    /// Per-frame cross entropy of two-class probabilities `[N,2,H,W]` against
    /// a foreground mask `[N,1,H,W]`, restricted to pixels whose true-class
    /// probability is below `eta`. Each frame's loss is the mean over its
    /// selected pixels (0 if none); the result is the mean over frames.
    pub fn bootstrapped_ce(&mut self, probs: Var, target: &Tensor, eta: f64) -> Result<Var> {
        let [n, c, h, w] = self.nchw("bootstrapped_ce", probs)?;
        if c != 2 || target.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "bootstrapped_ce",
                format!("probs {:?} vs target {:?}", self.shape(probs), target.shape()),
            ));
        }
        let hw = h * w;
        let pd = self.data(probs);
        let td = target.data();
        let mut coeff = vec![0.0; pd.len()];
        let mut total = 0.0;
        for f in 0..n {
            let mut picked: Vec<usize> = Vec::new();
            let mut loss = 0.0;
            for i in 0..hw {
                let class = usize::from(td[f * hw + i] >= 0.5);
                let idx = (f * 2 + class) * hw + i;
                let p = pd[idx];
                if p < eta {
                    loss -= p.max(f64::MIN_POSITIVE).ln();
                    picked.push(idx);
                }
            }
            if !picked.is_empty() {
                let k = picked.len() as f64;
                total += loss / k;
                for idx in picked {
                    coeff[idx] = 1.0 / (k * n as f64);
                }
            }
        }
        let coeff = Rc::new(coeff);
        self.push(
            Vec::new(),
            vec![total / n as f64],
            Op::CrossEntropy { probs, coeff },
            &[probs],
        )
    }

    /// Mean cross entropy over all pixels of `[N,2,H,W]` probabilities against
    /// a soft foreground target `[N,1,H,W]` with values in [0,1].
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let [n, c, h, w] = self.nchw("cross_entropy", probs)?;
        if c != 2 || target.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "cross_entropy",
                format!("probs {:?} vs target {:?}", self.shape(probs), target.shape()),
            ));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let pd = self.data(probs);
        let mut coeff = vec![0.0; pd.len()];
        let mut loss = 0.0;
        for f in 0..n {
            for i in 0..hw {
                let t = target.data()[f * hw + i];
                for (class, weight) in [(0, 1.0 - t), (1, t)] {
                    let idx = (f * 2 + class) * hw + i;
                    if weight != 0.0 {
                        loss -= weight * pd[idx].max(f64::MIN_POSITIVE).ln();
                        coeff[idx] = weight / count;
                    }
                }
            }
        }
        let coeff = Rc::new(coeff);
        self.push(
            Vec::new(),
            vec![loss / count],
            Op::CrossEntropy { probs, coeff },
            &[probs],
        )
    }

    /// Runs the reverse pass from a scalar `loss`, accumulating gradients into
    /// every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.grad_slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / y;
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for (((d, g), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= g * x / (y * y);
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g);
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(d) = self.grad_slot(grads, *x) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.grad_slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::Narrow { input, axis, start } => {
                let full_shape = self.shape(*input);
                let (outer, full, inner) = outer_inner(full_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(d) = self.grad_slot(grads, *input) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        d[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = outer_inner(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(d) = self.grad_slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..][..len];
                            d[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += len;
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(d) = self.grad_slot(grads, *x) {
                    kernels::upsample2x_backward(g, planes, h, w, d);
                }
            }
            Op::AvgPoolSpatial(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                if let Some(d) = self.grad_slot(grads, *x) {
                    for (plane, gv) in d.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv / hw as f64);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(d) = self.grad_slot(grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv, true, 1.0, d);
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    kernels::gemm(k, m, n, av, true, g, false, 1.0, d);
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = outer_inner(node.value.shape(), *axis);
                if let Some(d) = self.grad_slot(grads, *input) {
                    kernels::softmax_backward(node.value.data(), g, outer, len, inner, d);
                }
            }
            Op::CosineSim { a, b, degenerate } => {
                if *degenerate {
                    return;
                }
                let (av, bv) = (self.data(*a), self.data(*b));
                let na2: f64 = av.iter().map(|x| x * x).sum();
                let nb2: f64 = bv.iter().map(|x| x * x).sum();
                let inv = 1.0 / (na2.sqrt() * nb2.sqrt());
                let s = node.value.data()[0];
                let gs = g[0];
                if let Some(d) = self.grad_slot(grads, *a) {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d += gs * (y * inv - s * x / na2);
                    }
                }
                if let Some(d) = self.grad_slot(grads, *b) {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d += gs * (x * inv - s * y / nb2);
                    }
                }
            }
            Op::NegSqDist { keys, query } => {
                let (d, p) = (self.shape(*keys)[0], self.shape(*keys)[1]);
                let q = self.shape(*query)[1];
                let (kd, qd) = (self.data(*keys), self.data(*query));
                let dg: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
                if let Some(dk) = self.grad_slot(grads, *keys) {
                    // dK = Q dG^T - 2 K diag(row sums of g)
                    kernels::gemm(d, q, p, qd, false, &dg, true, 1.0, dk);
                    let rows: Vec<f64> = g.chunks(q).map(|r| r.iter().sum()).collect();
                    for di in 0..d {
                        for pi in 0..p {
                            dk[di * p + pi] -= 2.0 * kd[di * p + pi] * rows[pi];
                        }
                    }
                }
                if let Some(dq) = self.grad_slot(grads, *query) {
                    // dQ = K dG - 2 Q diag(column sums of g)
                    kernels::gemm(d, p, q, kd, false, &dg, false, 1.0, dq);
                    let mut cols = vec![0.0; q];
                    for row in g.chunks(q) {
                        cols.iter_mut().zip(row).for_each(|(c, v)| *c += v);
                    }
                    for di in 0..d {
                        for qi in 0..q {
                            dq[di * q + qi] -= 2.0 * qd[di * q + qi] * cols[qi];
                        }
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let s = self.shape(*input);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let xv = self.data(*input);
                let gv = self.data(*gamma).to_vec();
                let mut dx = self.needs(*input).then(|| vec![0.0; xv.len()]);
                let mut dgamma = self.needs(*gamma).then(|| vec![0.0; c]);
                let mut dbeta = self.needs(*beta).then(|| vec![0.0; c]);
                kernels::group_norm_backward(
                    xv,
                    g,
                    n,
                    c,
                    hw,
                    *groups,
                    &gv,
                    stats,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                for (v, delta) in [(*input, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if let (Some(delta), Some(d)) = (delta, self.grad_slot(grads, v)) {
                        d.iter_mut().zip(&delta).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let [n, c, h, w] = self.nchw("conv2d", *input).expect("recorded shape");
                let ws = self.shape(*weight);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let geom = ConvGeometry {
                    channels: c,
                    height: h,
                    width: w,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: *stride,
                    padding: *padding,
                };
                let mut dx = self.needs(*input).then(|| vec![0.0; n * c * h * w]);
                let mut dw = self.needs(*weight).then(|| vec![0.0; o * c * kh * kw]);
                let mut db = bias
                    .filter(|b| self.needs(*b))
                    .map(|_| vec![0.0; o]);
                kernels::conv2d_backward(
                    self.data(*input),
                    n,
                    &geom,
                    self.data(*weight),
                    o,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                let mut pending = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    pending.push((*b, db));
                }
                for (v, delta) in pending {
                    if let (Some(delta), Some(d)) = (delta, self.grad_slot(grads, v)) {
                        d.iter_mut().zip(&delta).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::CrossEntropy { probs, coeff } => {
                let pv = self.data(*probs);
                if let Some(d) = self.grad_slot(grads, *probs) {
                    for ((d, c), p) in d.iter_mut().zip(coeff.iter()).zip(pv) {
                        if *c != 0.0 {
                            *d -= g[0] * c / p.max(f64::MIN_POSITIVE);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad(true));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1., 2.]));
        let y = tape.leaf(t(&[2], &[3., 4.]).with_grad(true));
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.data(y), data.as_slice());
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(t(&[3, 2, 3, 3], &[0.7; 54]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 2, 2]);
        assert!(tape.data(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![3, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        let big = tape.constant(Tensor::zeros(vec![1, 2, 7, 7]));
        assert!(tape.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[0.3; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.data(y), &[0.25; 4]);
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2], &[0.0, 1.0]));
        let v = tape.constant(t(&[3], &[0.3, -2.0, 5.0]));
        let ab = tape.cosine_sim(a, b).unwrap();
        let vv = tape.cosine_sim(v, v).unwrap();
        assert_eq!(tape.data(ab), &[0.0]);
        assert!((tape.data(vv)[0] - 1.0).abs() < 1e-15);
        assert_eq!(tape.degenerate_cosines(), 0);

        let z = tape.leaf(Tensor::zeros(vec![2]).with_grad(true));
        let zs = tape.cosine_sim(z, a).unwrap();
        assert_eq!(tape.data(zs), &[0.0]);
        assert_eq!(tape.degenerate_cosines(), 1);
        tape.backward(zs).unwrap();
        assert!(tape.grad(z).map_or(true, |g| g.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn finite_checks_catch_overflow() {
        let mut tape = Tape::new().with_finite_checks(true);
        let a = tape.constant(t(&[1], &[1.0]));
        let z = tape.constant(t(&[1], &[0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::NonFinite(_))));
        let mut lax = Tape::new();
        let a = lax.constant(t(&[1], &[1.0]));
        let z = lax.constant(t(&[1], &[0.0]));
        assert!(lax.div(a, z).is_ok());
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(tape.data(c), &[1., 3., 4., 2., 5., 6.]);
    }
}
