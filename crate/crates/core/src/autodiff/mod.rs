//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes. Every op evaluates eagerly and
//! records its parents, so node ids are already a topological order and the
//! backward sweep is a single reverse pass. Graphs are meant to be built fresh
//! for every forward evaluation.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use kernels::ConvDims;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Neg,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Square,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    AddScalar(Var),
    MulScalar(Var, Float),
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    MatMul(Var, Var),
    Sum { input: Var, axes: Vec<usize> },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Squeeze(Var),
    Unsqueeze(Var),
    Diag(Var),
    ExpandChannels(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Exp => x.map(Float::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                x.map(Float::ln)
            }
            Unary::Neg => x.map(|v| -v),
            Unary::Sigmoid => x.map(kernels::sigmoid),
            Unary::LogSigmoid => x.map(kernels::log_sigmoid),
            Unary::Tanh => x.map(Float::tanh),
            Unary::Square => x.map(|v| v * v),
            Unary::Relu => x.map(|v| v.max(0.0)),
        };
        self.push(out, Op::Unary(kind, a), &[a], &format!("{kind:?}").to_lowercase())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    /// `log(sigmoid(a))`, evaluated without underflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (nx, ny) = (x.len(), y.len());
        if x.shape() != y.shape() && nx != 1 && ny != 1 {
            return Err(Error::shape(format!("{kind:?}: {:?} vs {:?}", x.shape(), y.shape())));
        }
        if let Binary::Div = kind {
            if y.data().contains(&0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        let f = |p: Float, q: Float| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Div => p / q,
        };
        let out = if nx == ny {
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
            )?
        } else if ny == 1 {
            let q = y.item();
            x.map(|p| f(p, q))
        } else {
            let p = x.item();
            y.map(|q| f(p, q))
        };
        self.push(
            out,
            Op::Binary(kind, a, b),
            &[a, b],
            &format!("{kind:?}").to_lowercase(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: Float) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: Float) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::MulScalar(a, c), &[a], "mul_scalar")
    }

    // ---- linear ------------------------------------------------------

    /// Same-size cross-correlation: `input [C_in,H,W]`, `kernel
    /// [C_out,C_in,k,k]` with `k` in {1, 3}, `padding == k/2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let d = self.conv_dims(input, kernel)?;
        if padding != d.k / 2 {
            return Err(Error::invalid(format!(
                "conv2d: padding {padding} does not preserve size for a {0}x{0} kernel",
                d.k
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d.c_out] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} for {} output channels",
                    self.shape(b),
                    d.c_out
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let out = Tensor::new(vec![d.c_out, d.h, d.w], out)?;
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        self.push(out, Op::Conv2d { input, kernel, bias }, &parents, "conv2d")
    }

    fn conv_dims(&self, input: Var, kernel: Var) -> Result<ConvDims> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ks = self.shape(kernel);
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(Error::shape(format!("conv2d: kernel shape {ks:?}")));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::invalid(format!("conv2d: unsupported kernel {kh}x{kw}")));
        }
        Ok(ConvDims {
            c_in,
            c_out,
            h,
            w,
            k: kh,
        })
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k1], &[k2, n]) = (sa, sb) else {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        };
        if k1 != k2 {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k1,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    // ---- reductions --------------------------------------------------

    /// Sum over `axes`; reducing every axis yields shape `[1]`.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::invalid(format!("sum: axis {bad} for shape {shape:?}")));
        }
        let (out_shape, map) = reduction_map(&shape, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(a).data().iter().zip(&map) {
            out[o] += v;
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(out, Op::Sum { input: a, axes }, &[a], "sum")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let total = self.value(a).len();
        let s = self.sum(a, axes)?;
        let count = total / self.value(s).len();
        self.mul_scalar(s, 1.0 / count as Float)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    /// `sum(a * a)` over every element.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        self.sum_all(sq)
    }

    // ---- data movement -----------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        self.push(out, Op::ConcatChannels(parts.to_vec()), parts, "concat")
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).channel_slice(start, len)?;
        self.push(out, Op::SliceChannels { input: a, start }, &[a], "slice")
    }

    /// Space-to-channel: `[C,H,W] -> [4C,H/2,W/2]`.
    pub fn squeeze(&mut self, a: Var) -> Result<Var> {
        let out = squeeze_tensor(self.value(a))?;
        self.push(out, Op::Squeeze(a), &[a], "squeeze")
    }

    /// Channel-to-space: `[4C,H,W] -> [C,2H,2W]`.
    pub fn unsqueeze(&mut self, a: Var) -> Result<Var> {
        let out = unsqueeze_tensor(self.value(a))?;
        self.push(out, Op::Unsqueeze(a), &[a], "unsqueeze")
    }

    /// Vector `[n]` to diagonal matrix `[n,n]`.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let [n] = v.shape()[..] else {
            return Err(Error::shape(format!("diag: expected a vector, got {:?}", v.shape())));
        };
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &x) in v.data().iter().enumerate() {
            out.data_mut()[i * n + i] = x;
        }
        self.push(out, Op::Diag(a), &[a], "diag")
    }

    /// Per-channel vector `[C]` repeated over an `h x w` plane.
    pub fn expand_channels(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let v = self.value(a);
        let [c] = v.shape()[..] else {
            return Err(Error::shape(format!("expand_channels: {:?}", v.shape())));
        };
        let mut data = Vec::with_capacity(c * h * w);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, h * w));
        }
        self.push(Tensor::new(vec![c, h, w], data)?, Op::ExpandChannels(a), &[a], "expand")
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let d: Vec<Float> = match kind {
                    Unary::Exp => zip3(g, y, |g, y| g * y),
                    Unary::Log => zip3(g, x, |g, x| g / x),
                    Unary::Neg => g.data().iter().map(|v| -v).collect(),
                    Unary::Sigmoid => zip3(g, y, |g, y| g * y * (1.0 - y)),
                    Unary::LogSigmoid => zip3(g, x, |g, x| g * kernels::sigmoid(-x)),
                    Unary::Tanh => zip3(g, y, |g, y| g * (1.0 - y * y)),
                    Unary::Square => zip3(g, x, |g, x| 2.0 * g * x),
                    Unary::Relu => zip3(g, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                };
                acc(*a, Tensor::new(x.shape().to_vec(), d).expect("unary grad"));
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                let n = y.len();
                let at = |t: &Tensor, k: usize| if t.len() == 1 { t.data()[0] } else { t.data()[k] };
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for k in 0..n {
                    let gv = g.data()[k];
                    let (p, q) = (at(xa, k), at(xb, k));
                    let (da, db) = match kind {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * q, gv * p),
                        Binary::Div => (gv / q, -gv * p / (q * q)),
                    };
                    ga[k] = da;
                    gb[k] = db;
                }
                let fold = |grad: Vec<Float>, like: &Tensor| {
                    if like.len() == 1 && n != 1 {
                        Tensor::new(like.shape().to_vec(), vec![grad.iter().sum()]).unwrap()
                    } else {
                        Tensor::new(like.shape().to_vec(), grad).unwrap()
                    }
                };
                acc(*a, fold(ga, xa));
                acc(*b, fold(gb, xb));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MulScalar(a, c) => acc(*a, g.scale(*c)),
            Op::Conv2d { input, kernel, bias } => {
                let d = self.conv_dims(*input, *kernel).expect("conv dims");
                let (gx, gk, gb) =
                    kernels::conv2d_backward(self.value(*input).data(), self.value(*kernel).data(), g.data(), &d);
                acc(*input, Tensor::new(self.shape(*input).to_vec(), gx).unwrap());
                acc(*kernel, Tensor::new(self.shape(*kernel).to_vec(), gk).unwrap());
                if let Some(b) = bias {
                    acc(*b, Tensor::new(vec![d.c_out], gb).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, self.value(*b).data(), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::gemm(k, m, n, self.value(*a).data(), true, g.data(), false, 0.0, &mut gb);
                acc(*a, Tensor::new(vec![m, k], ga).unwrap());
                acc(*b, Tensor::new(vec![k, n], gb).unwrap());
            }
            Op::Sum { input, axes } => {
                let shape = self.shape(*input);
                let (_, map) = reduction_map(shape, axes);
                let data = map.iter().map(|&o| g.data()[o]).collect();
                acc(*input, Tensor::new(shape.to_vec(), data).unwrap());
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a)).unwrap()),
            Op::ConcatChannels(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[0];
                    acc(p, g.channel_slice(start, c).unwrap());
                    start += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let shape = self.shape(*input);
                let plane = shape[1] * shape[2];
                let mut full = Tensor::zeros(shape);
                full.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                acc(*input, full);
            }
            Op::Squeeze(a) => acc(*a, unsqueeze_tensor(g).unwrap()),
            Op::Unsqueeze(a) => acc(*a, squeeze_tensor(g).unwrap()),
            Op::Diag(a) => {
                let n = self.shape(*a)[0];
                let d = (0..n).map(|k| g.data()[k * n + k]).collect();
                acc(*a, Tensor::new(vec![n], d).unwrap());
            }
            Op::ExpandChannels(a) => {
                let c = self.shape(*a)[0];
                let plane = g.len() / c;
                let d = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                acc(*a, Tensor::new(vec![c], d).unwrap());
            }
        }
    }
}

fn zip3(g: &Tensor, x: &Tensor, f: impl Fn(Float, Float) -> Float) -> Vec<Float> {
    g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect()
}

/// Output shape of reducing `axes`, and for each input element (row-major)
/// the flat index of the output element it contributes to.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    if out_shape.is_empty() {
        return (vec![1], vec![0; n]);
    }
    // Stride of each input axis inside the output (0 for reduced axes).
    let mut out_strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            out_strides[i] = s;
            s *= shape[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// `[C,H,W] -> [4C,H/2,W/2]`; errors on odd spatial size.
pub fn squeeze_tensor(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze: odd spatial size {h}x{w}")));
    }
    Tensor::new(vec![4 * c, h / 2, w / 2], kernels::squeeze(x.data(), c, h, w))
}

/// `[4C,H,W] -> [C,2H,2W]`.
pub fn unsqueeze_tensor(x: &Tensor) -> Result<Tensor> {
    let (c4, h, w) = x.chw()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!("unsqueeze: {c4} channels not divisible by 4")));
    }
    Tensor::new(
        vec![c4 / 4, 2 * h, 2 * w],
        kernels::unsqueeze(x.data(), c4 / 4, 2 * h, 2 * w),
    )
}
