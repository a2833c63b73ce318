//! Reverse-mode differentiation over a linear recording.
//!
//! Every operation appends one node to the [`Tape`]; a node's inputs always
//! have smaller indices, so walking indices downwards from the loss is a
//! reverse topological order. Gradients for leaves accumulate into the leaf's
//! `grad` slot across calls to [`Tape::backward`]; call
//! [`Tape::zero_grad`] to reset. Intermediate gradients are rebuilt from
//! scratch on every call.

use super::kernels::{self, Patch};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Abs,
    Neg,
    Log,
}

/// Stride / padding for a square-kernel convolution. `out_pad` only applies
/// to transpose convolutions and must be smaller than `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

/// Per-channel batch statistics from a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Neg(Var),
    Log(Var),
    MulScalarVar {
        x: Var,
        s: Var,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum {
        x: Var,
        reduced: Vec<bool>,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        patch: Patch,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        patch: Patch,
        in_channels: usize,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Bce {
        p: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    last_order: Vec<usize>,
}

/// Probability clamp used by binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

/// Mean binary cross-entropy of `probs` against a constant `target` label.
pub fn bce(probs: &[f64], target: f64) -> f64 {
    let n = probs.len() as f64;
    let total: f64 = probs
        .iter()
        .map(|&p| {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            target * pc.ln() + (1.0 - target) * (1.0 - pc).ln()
        })
        .sum();
    -total / n
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let spatial: usize = shape[2..].iter().product();
    (n, c, spatial)
}

fn reduce_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    // Output strides for kept axes, zero for reduced.
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() {
        vec![1]
    } else {
        out_shape
    };
    (out_shape, map)
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
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

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Node indices visited by the most recent backward pass, in visit order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_order
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.ensure_finite(op_name)?;
        t.requires_grad = needs;
        self.nodes.push(Node { value: t, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- elementwise ------------------------------------------------------

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Contract(format!("{kind:?} needs two operands")));
        match kind {
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Sub => self.sub(a, need_b()?),
            ElementwiseKind::Mul => self.mul(a, need_b()?),
            ElementwiseKind::Scale(s) => self.scale(a, s),
            ElementwiseKind::Abs => self.abs(a),
            ElementwiseKind::Neg => self.neg(a),
            ElementwiseKind::Log => self.log(a),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, self.shape(a).to_vec(), data, op, needs)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(name, self.shape(a).to_vec(), data, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `x · s` where `s` is a one-element tensor (e.g. a learnable gain).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(
                "mul_scalar_var",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        self.push("mul_scalar_var", self.shape(x).to_vec(), data, Op::MulScalarVar { x, s }, needs)
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), needs)
    }

    /// Batched product of `[B,M,K]` and `[B,K,N]`; `ta`/`tb` read the
    /// corresponding operand as stored transposed (`[B,K,M]` / `[B,N,K]`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::dim("batch_matmul", format!("{sa:?} (t={ta}) x {sb:?} (t={tb})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(err());
        }
        let batch = sa[0];
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ab = &self.data(a)[bi * m * k..(bi + 1) * m * k];
            let bb = &self.data(b)[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            match (ta, tb) {
                (false, false) => kernels::gemm_acc(ab, bb, ob, m, k, n),
                (true, false) => kernels::gemm_tn_acc(ab, bb, ob, m, k, n),
                (false, true) => kernels::gemm_nt_acc(ab, bb, ob, m, k, n),
                (true, true) => {
                    let at = kernels::transpose(ab, k, m);
                    kernels::gemm_nt_acc(&at, bb, ob, m, k, n)
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, ta, tb, batch, m, k, n },
            needs,
        )
    }

    /// Sums over `axes`, or over everything when `axes` is `None`.
    /// Reduced axes are dropped; a full reduction yields shape `[1]`.
    pub fn reduce_sum(&mut self, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![axes.is_none(); shape.len()];
        if let Some(axes) = axes {
            for &ax in axes {
                if ax >= shape.len() {
                    return Err(Error::dim(
                        "reduce_sum",
                        format!("axis {ax} invalid for shape {shape:?}"),
                    ));
                }
                reduced[ax] = true;
            }
        }
        let (out_shape, map) = reduce_map(&shape, &reduced);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &o) in self.data(x).iter().zip(&map) {
            out[o] += v;
        }
        let needs = self.needs(x);
        self.push("reduce_sum", out_shape, out, Op::Sum { x, reduced }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce_sum(x, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        self.push("reshape", shape, data, Op::Reshape(x), needs)
    }

    // ---- convolution ------------------------------------------------------

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::dim(
                    op,
                    format!("bias shape {:?}, expected [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    fn add_bias_planes(&self, out: &mut [f64], b: Option<Var>, n: usize, c: usize, plane: usize) {
        if let Some(b) = b {
            let bias = self.data(b);
            for ni in 0..n {
                for (ci, &bv) in bias.iter().enumerate().take(c) {
                    let off = (ni * c + ci) * plane;
                    out[off..off + plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }

    /// Cross-correlation of `x [N,C,H,W]` with `w [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight {sw:?} expects {}", sx[1], sw[1]),
            ));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (oc, k) = (sw[0], sw[2]);
        if geom.stride == 0 || h + 2 * geom.pad < k || wd + 2 * geom.pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} too large for {h}x{wd} with pad {}", geom.pad),
            ));
        }
        self.check_bias("conv2d", b, oc)?;
        let patch = Patch {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride: geom.stride,
            pad: geom.pad,
            out_h: (h + 2 * geom.pad - k) / geom.stride + 1,
            out_w: (wd + 2 * geom.pad - k) / geom.stride + 1,
        };
        let (rows, cols_n) = (patch.col_rows(), patch.col_cols());
        let mut out = vec![0.0; n * oc * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        for ni in 0..n {
            kernels::im2col(&self.data(x)[ni * c * h * wd..(ni + 1) * c * h * wd], &patch, &mut cols);
            kernels::gemm_acc(
                self.data(w),
                &cols,
                &mut out[ni * oc * cols_n..(ni + 1) * oc * cols_n],
                oc,
                rows,
                cols_n,
            );
        }
        self.add_bias_planes(&mut out, b, n, oc, cols_n);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            vec![n, oc, patch.out_h, patch.out_w],
            out,
            Op::Conv2d { x, w, b, patch, out_channels: oc },
            needs,
        )
    }

    /// Transpose convolution of `x [N,Cin,H,W]` with `w [Cin,Cout,k,k]`;
    /// the adjoint of `conv2d` with the same weight and geometry.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input {sx:?}, weight {sw:?}"),
            ));
        }
        if sx[1] != sw[0] {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input has {} channels, weight {sw:?} expects {}", sx[1], sw[0]),
            ));
        }
        if geom.stride == 0 || geom.out_pad >= geom.stride {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("output padding {} must be below stride {}", geom.out_pad, geom.stride),
            ));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[1], sw[2]);
        let full_h = (h - 1) * geom.stride + k + geom.out_pad;
        let full_w = (wd - 1) * geom.stride + k + geom.out_pad;
        if full_h <= 2 * geom.pad || full_w <= 2 * geom.pad {
            return Err(Error::dim("conv2d_transpose", "padding exceeds output size"));
        }
        let patch = Patch {
            channels: cout,
            height: full_h - 2 * geom.pad,
            width: full_w - 2 * geom.pad,
            kernel: k,
            stride: geom.stride,
            pad: geom.pad,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols_n) = (patch.col_rows(), patch.col_cols());
        let plane = patch.height * patch.width;
        let mut out = vec![0.0; n * cout * plane];
        let mut cols = vec![0.0; rows * cols_n];
        for ni in 0..n {
            cols.iter_mut().for_each(|v| *v = 0.0);
            kernels::gemm_tn_acc(
                self.data(w),
                &self.data(x)[ni * cin * cols_n..(ni + 1) * cin * cols_n],
                &mut cols,
                rows,
                cin,
                cols_n,
            );
            kernels::col2im_acc(&cols, &patch, &mut out[ni * cout * plane..(ni + 1) * cout * plane]);
        }
        self.check_bias("conv2d_transpose", b, cout)?;
        self.add_bias_planes(&mut out, b, n, cout, plane);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d_transpose",
            vec![n, cout, patch.height, patch.width],
            out,
            Op::ConvTranspose2d { x, w, b, patch, in_channels: cin },
            needs,
        )
    }

    /// Adds `b [C]` along axis 1 of `x [N,C,...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("input {sx:?}, bias {:?}", self.shape(b)),
            ));
        }
        let (n, c, plane) = channel_layout(&sx);
        let mut out = self.data(x).to_vec();
        self.add_bias_planes(&mut out, Some(b), n, c, plane);
        let needs = self.needs(x) || self.needs(b);
        self.push("add_channel_bias", sx, out, Op::AddChannelBias { x, b }, needs)
    }

    // ---- activations ------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            |v| if v > 0.0 { v } else { alpha * v },
            Op::LeakyRelu(x, alpha),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for {shape:?}")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let needs = self.needs(x);
        self.push("softmax", shape, out, Op::Softmax { x, axis }, needs)
    }

    // ---- pooling / structure ----------------------------------------------

    /// Max pooling with window `k`, `stride`, and implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || stride == 0 || sx[2] + 2 * pad < k || sx[3] + 2 * pad < k || pad >= k {
            return Err(Error::dim(
                "max_pool2d",
                format!("input {sx:?}, window {k}, pad {pad}"),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let src = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..k {
                        let r = (i * stride + di) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let cc = (j * stride + dj) as isize - pad as isize;
                            if cc < 0 || cc >= w as isize {
                                continue;
                            }
                            let idx = base + r as usize * w + cc as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * oh + i) * ow + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        self.push("max_pool2d", vec![n, c, oh, ow], out, Op::MaxPool { x, argmax }, needs)
    }

    /// Non-overlapping `k×k` average pooling; H and W must be multiples of k.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || !sx[2].is_multiple_of(k) || !sx[3].is_multiple_of(k) {
            return Err(Error::dim("avg_pool2d", format!("input {sx:?}, window {k}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    out[(plane * oh + i / k) * ow + j / k] += src[(plane * h + i) * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        let needs = self.needs(x);
        self.push("avg_pool2d", vec![n, c, oh, ow], out, Op::AvgPool { x, k }, needs)
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::dim("concat_channels", format!("rank of {s0:?} below 2")));
        }
        let mut total_c = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::dim("concat_channels", format!("{s0:?} vs {s:?}")));
            }
            total_c += s[1];
        }
        let n = s0[0];
        let plane: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(n * total_c * plane);
        for ni in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[ni * c * plane..(ni + 1) * c * plane]);
            }
        }
        let mut shape = s0;
        shape[1] = total_c;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push("concat_channels", shape, out, Op::Concat { inputs: inputs.to_vec() }, needs)
    }

    // ---- normalisation ----------------------------------------------------

    fn check_norm_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::dim("batchnorm", format!("input {sx:?}")));
        }
        let (n, c, plane) = channel_layout(sx);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(
                "batchnorm",
                format!(
                    "{c} channels, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, plane))
    }

    fn normalise(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let (n, c, plane) = channel_layout(self.shape(x));
        let src = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for p in off..off + plane {
                    xhat[p] = (src[p] - mean[ci]) * inv_std[ci];
                    out[p] = g[ci] * xhat[p] + bt[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "batchnorm",
            shape,
            out,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            needs,
        )
    }

    /// Train-mode batch norm over axis 1 using batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, plane) = self.check_norm_params(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::Contract(
                "train-mode batch norm needs a batch of at least 2".into(),
            ));
        }
        let count = n * plane;
        let src = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                mean[ci] += src[off..off + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                var[ci] += src[off..off + plane]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalise(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, _) = self.check_norm_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim(
                "batchnorm",
                format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
            ));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalise(x, gamma, beta, mean, inv_std, false)
    }

    // ---- losses -----------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `p` against `target`.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        let value = bce(self.data(p), target);
        let needs = self.needs(p);
        self.push("bce", vec![1], vec![value], Op::Bce { p, target }, needs)
    }

    // ---- backward ---------------------------------------------------------

    /// Differentiates the scalar `loss` with respect to every reachable leaf
    /// that requires a gradient, accumulating into the leaves' grad slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        self.last_order.clear();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.last_order.push(i);
            if let Op::Leaf = self.nodes[i].op {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of leaf {i}, element {bad}")));
                }
                let node = &mut self.nodes[i].value;
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let gv = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    add_into(grads, *a, gv);
                }
                if self.needs(*b) {
                    let gv = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    add_into(grads, *b, gv);
                }
            }
            Op::Scale(a, s) => add_into(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(grads, *a, g.to_vec()),
            Op::Abs(a) => {
                let gv = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(grads, *a, gv);
            }
            Op::Neg(a) => add_into(grads, *a, g.iter().map(|v| -v).collect()),
            Op::Log(a) => {
                let gv = g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                add_into(grads, *a, gv);
            }
            Op::MulScalarVar { x, s } => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    add_into(grads, *x, g.iter().map(|v| v * sv).collect());
                }
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(self.data(*x)).map(|(g, x)| g * x).sum();
                    add_into(grads, *s, vec![ds]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::gemm_nt_acc(g, self.data(*b), da, m, n, k);
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::gemm_tn_acc(self.data(*a), g, db, k, m, n);
                }
            }
            &Op::BatchMatMul { a, b, ta, tb, batch, m, k, n } => {
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let a_st = &self.data(a)[bi * m * k..(bi + 1) * m * k];
                    let b_st = &self.data(b)[bi * k * n..(bi + 1) * k * n];
                    let a_eff = if ta { kernels::transpose(a_st, k, m) } else { a_st.to_vec() };
                    let b_eff = if tb { kernels::transpose(b_st, n, k) } else { b_st.to_vec() };
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        kernels::gemm_nt_acc(gb, &b_eff, &mut da, m, n, k);
                        let da = if ta { kernels::transpose(&da, m, k) } else { da };
                        let dst = &mut slot(grads, a, batch * m * k)[bi * m * k..(bi + 1) * m * k];
                        dst.iter_mut().zip(&da).for_each(|(d, v)| *d += v);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        kernels::gemm_tn_acc(&a_eff, gb, &mut db, k, m, n);
                        let db = if tb { kernels::transpose(&db, k, n) } else { db };
                        let dst = &mut slot(grads, b, batch * k * n)[bi * k * n..(bi + 1) * k * n];
                        dst.iter_mut().zip(&db).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sum { x, reduced } => {
                let (_, map) = reduce_map(self.shape(*x), reduced);
                add_into(grads, *x, map.iter().map(|&o| g[o]).collect());
            }
            Op::Conv2d { x, w, b, patch, out_channels } => {
                let (oc, rows, ncols) = (*out_channels, patch.col_rows(), patch.col_cols());
                let n = self.shape(*x)[0];
                let in_len = patch.channels * patch.height * patch.width;
                let mut cols = vec![0.0; rows * ncols];
                let mut dcols = vec![0.0; rows * ncols];
                for ni in 0..n {
                    let gn = &g[ni * oc * ncols..(ni + 1) * oc * ncols];
                    if self.needs(*w) {
                        kernels::im2col(&self.data(*x)[ni * in_len..(ni + 1) * in_len], patch, &mut cols);
                        let dw = slot(grads, *w, oc * rows);
                        kernels::gemm_nt_acc(gn, &cols, dw, oc, ncols, rows);
                    }
                    if self.needs(*x) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn_acc(self.data(*w), gn, &mut dcols, rows, oc, ncols);
                        let dx = &mut slot(grads, *x, n * in_len)[ni * in_len..(ni + 1) * in_len];
                        kernels::col2im_acc(&dcols, patch, dx);
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = channel_sums(g, n, oc, ncols);
                        add_into(grads, *b, db);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, patch, in_channels } => {
                let (cin, rows, ncols) = (*in_channels, patch.col_rows(), patch.col_cols());
                let n = self.shape(*x)[0];
                let plane = patch.height * patch.width;
                let out_len = patch.channels * plane;
                let mut dcols = vec![0.0; rows * ncols];
                for ni in 0..n {
                    kernels::im2col(&g[ni * out_len..(ni + 1) * out_len], patch, &mut dcols);
                    if self.needs(*x) {
                        let dx = &mut slot(grads, *x, n * cin * ncols)[ni * cin * ncols..(ni + 1) * cin * ncols];
                        kernels::gemm_acc(self.data(*w), &dcols, dx, cin, rows, ncols);
                    }
                    if self.needs(*w) {
                        let xn = &self.data(*x)[ni * cin * ncols..(ni + 1) * cin * ncols];
                        let dw = slot(grads, *w, cin * rows);
                        kernels::gemm_nt_acc(xn, &dcols, dw, cin, ncols, rows);
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = channel_sums(g, n, patch.channels, plane);
                        add_into(grads, *b, db);
                    }
                }
            }
            Op::AddChannelBias { x, b } => {
                if self.needs(*x) {
                    add_into(grads, *x, g.to_vec());
                }
                if self.needs(*b) {
                    let (n, c, plane) = channel_layout(self.shape(*x));
                    add_into(grads, *b, channel_sums(g, n, c, plane));
                }
            }
            Op::Relu(x) => {
                let gv = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(grads, *x, gv);
            }
            Op::LeakyRelu(x, alpha) => {
                let gv = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { alpha * g })
                    .collect();
                add_into(grads, *x, gv);
            }
            Op::Tanh(x) => {
                let gv = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_into(grads, *x, gv);
            }
            Op::Sigmoid(x) => {
                let gv = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                add_into(grads, *x, gv);
            }
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let dx = slot(grads, *x, self.value(*x).len());
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
            }
            Op::AvgPool { x, k } => {
                let sx = self.shape(*x);
                let (h, w) = (sx[2], sx[3]);
                let (oh, ow) = (h / k, w / k);
                let planes = sx[0] * sx[1];
                let norm = 1.0 / (k * k) as f64;
                let dx = slot(grads, *x, planes * h * w);
                for plane in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            dx[(plane * h + i) * w + j] += g[(plane * oh + i / k) * ow + j / k] * norm;
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let n = out.shape()[0];
                let plane: usize = out.shape()[2..].iter().product();
                let total_c = out.shape()[1];
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.needs(v) {
                        let dv = slot(grads, v, n * c * plane);
                        for ni in 0..n {
                            let src = &g[(ni * total_c + c_off) * plane..(ni * total_c + c_off + c) * plane];
                            dv[ni * c * plane..(ni + 1) * c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    c_off += c;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, plane) = channel_layout(self.shape(*x));
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for p in off..off + plane {
                            dgamma[ci] += g[p] * xhat[p];
                            dbeta[ci] += g[p];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * plane) as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            for p in off..off + plane {
                                dx[p] = if *train {
                                    // dxhat = g·γ; Σdxhat = γ·dβ, Σdxhat·xhat = γ·dγ
                                    gam[ci] * inv_std[ci] / m
                                        * (m * g[p] - dbeta[ci] - xhat[p] * dgamma[ci])
                                } else {
                                    g[p] * gam[ci] * inv_std[ci]
                                };
                            }
                        }
                    }
                    add_into(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    add_into(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    add_into(grads, *beta, dbeta);
                }
            }
            Op::Bce { p, target } => {
                let probs = self.data(*p);
                let n = probs.len() as f64;
                let gv = probs
                    .iter()
                    .map(|&pv| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -g[0] * (target / pv - (1.0 - target) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                add_into(grads, *p, gv);
            }
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let off = (ni * c + ci) * plane;
            *o += g[off..off + plane].iter().sum::<f64>();
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
