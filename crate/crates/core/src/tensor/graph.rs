//! Define-by-run tape. Every operation appends a node holding its value and
//! enough bookkeeping to run the reverse pass.

use super::kernels::{self, gemm};
use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Names of the closed set of differentiable operations.
pub const OP_NAMES: [&str; 18] = [
    "matmul",
    "conv2d",
    "conv2d_1x1",
    "linear",
    "add",
    "mul",
    "scale",
    "softmax",
    "leaky_relu",
    "upsample2x",
    "mean",
    "sum",
    "l2_normalize",
    "concat",
    "sort_lastaxis",
    "cosine_similarity",
    "box_filter_3x3",
    "index_select",
];

pub const LEAKY_SLOPE: f64 = 0.2;

/// An operation name plus its attributes, for name-driven dispatch through
/// [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpSpec {
    Matmul,
    Conv2d { stride: usize },
    Conv1x1,
    Linear { bias: bool },
    Add,
    Mul,
    Scale(f64),
    Softmax,
    LeakyRelu,
    Upsample2x,
    Mean { axes: Vec<usize>, keepdim: bool },
    Sum { axes: Vec<usize>, keepdim: bool },
    L2Normalize { eps: f64 },
    Concat { axis: usize },
    SortLastAxis,
    CosineSimilarity,
    BoxFilter3x3,
    IndexSelect { axis: usize, indices: Vec<usize> },
}

impl OpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OpSpec::Matmul => "matmul",
            OpSpec::Conv2d { .. } => "conv2d",
            OpSpec::Conv1x1 => "conv2d_1x1",
            OpSpec::Linear { .. } => "linear",
            OpSpec::Add => "add",
            OpSpec::Mul => "mul",
            OpSpec::Scale(_) => "scale",
            OpSpec::Softmax => "softmax",
            OpSpec::LeakyRelu => "leaky_relu",
            OpSpec::Upsample2x => "upsample2x",
            OpSpec::Mean { .. } => "mean",
            OpSpec::Sum { .. } => "sum",
            OpSpec::L2Normalize { .. } => "l2_normalize",
            OpSpec::Concat { .. } => "concat",
            OpSpec::SortLastAxis => "sort_lastaxis",
            OpSpec::CosineSimilarity => "cosine_similarity",
            OpSpec::BoxFilter3x3 => "box_filter_3x3",
            OpSpec::IndexSelect { .. } => "index_select",
        }
    }
}

enum Op {
    Leaf,
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, a_batched: bool, b_batched: bool },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Conv2d { x: Var, w: Var, stride: usize, per_sample: bool },
    Conv1x1 { x: Var, w: Var, per_sample: bool },
    Add { a: Var, b: Var, oa: Option<Vec<usize>>, ob: Option<Vec<usize>> },
    Mul { a: Var, b: Var, oa: Option<Vec<usize>>, ob: Option<Vec<usize>> },
    Scale { a: Var, c: f64 },
    Softmax { a: Var },
    LeakyRelu { a: Var },
    Upsample2x { a: Var },
    Reduce { a: Var, offsets: Vec<usize>, scale: f64 },
    L2Normalize { a: Var, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Sort { a: Var, perm: Vec<usize> },
    Cosine { a: Var, b: Var },
    BoxFilter { a: Var },
    Reshape { a: Var },
    Transpose { a: Var, ax0: usize, ax1: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    tracked: bool,
}

/// Reverse-mode gradients of one scalar with respect to the graph's leaves.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

const COS_EPS: f64 = 1e-8;

fn permute_swap<T: Scalar>(data: &[T], shape: &[usize], ax0: usize, ax1: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let in_strides = kernels::strides(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(ax0, ax1);
    let rank = shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let out = if keepdim {
        kept.clone()
    } else {
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
    };
    (kept, out)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<T>, op: Op, tracked: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output at flat index {pos} of shape {shape:?}"),
            ));
        }
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Inserts a tensor as a leaf. Tracked when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Inserts an untracked leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Inserts a tracked leaf regardless of the tensor's flag.
    pub fn variable(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("variable", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, v: T) -> Result<Var> {
        self.constant(&Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.node(v).tracked
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Dispatches an operation by name and attributes.
    pub fn apply(&mut self, spec: &OpSpec, inputs: &[Var]) -> Result<Var> {
        let arity = match spec {
            OpSpec::Matmul
            | OpSpec::Conv2d { .. }
            | OpSpec::Conv1x1
            | OpSpec::Add
            | OpSpec::Mul
            | OpSpec::CosineSimilarity => 2,
            OpSpec::Linear { bias: true } => 3,
            OpSpec::Linear { bias: false } => 2,
            OpSpec::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        ensure!(
            inputs.len() == arity,
            spec.name(),
            "expected {} inputs, got {}",
            arity,
            inputs.len()
        );
        match spec {
            OpSpec::Matmul => self.matmul(inputs[0], inputs[1]),
            OpSpec::Conv2d { stride } => self.conv2d(inputs[0], inputs[1], *stride),
            OpSpec::Conv1x1 => self.conv2d_1x1(inputs[0], inputs[1]),
            OpSpec::Linear { bias } => {
                self.linear(inputs[0], inputs[1], if *bias { Some(inputs[2]) } else { None })
            }
            OpSpec::Add => self.add(inputs[0], inputs[1]),
            OpSpec::Mul => self.mul(inputs[0], inputs[1]),
            OpSpec::Scale(c) => self.scale(inputs[0], *c),
            OpSpec::Softmax => self.softmax(inputs[0]),
            OpSpec::LeakyRelu => self.leaky_relu(inputs[0]),
            OpSpec::Upsample2x => self.upsample2x(inputs[0]),
            OpSpec::Mean { axes, keepdim } => self.mean(inputs[0], axes, *keepdim),
            OpSpec::Sum { axes, keepdim } => self.sum(inputs[0], axes, *keepdim),
            OpSpec::L2Normalize { eps } => self.l2_normalize(inputs[0], *eps),
            OpSpec::Concat { axis } => self.concat(inputs, *axis),
            OpSpec::SortLastAxis => self.sort_lastaxis(inputs[0]).map(|(v, _)| v),
            OpSpec::CosineSimilarity => self.cosine_similarity(inputs[0], inputs[1]),
            OpSpec::BoxFilter3x3 => self.box_filter_3x3(inputs[0]),
            OpSpec::IndexSelect { axis, indices } => self.index_select(inputs[0], *axis, indices),
        }
    }

    /// Batched matrix product over the last two axes. Leading batch axes
    /// must agree, or one operand may be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure!(sa.len() >= 2 && sb.len() >= 2, "matmul", "operands need rank ≥ 2, got {:?} and {:?}", sa, sb);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        ensure!(k == k2, "matmul", "inner extents differ: {:?} × {:?}", sa, sb);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch_shape = match (ba.is_empty(), bb.is_empty()) {
            (true, _) => bb.to_vec(),
            (false, true) => ba.to_vec(),
            (false, false) => {
                ensure!(ba == bb, "matmul", "batch extents differ: {:?} × {:?}", sa, sb);
                ba.to_vec()
            }
        };
        let batch: usize = batch_shape.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                gemm(m, k, n, &av[ao..ao + m * k], false, &bv[bo..bo + k * n], false, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let tracked = self.tracked(&[a, b]);
        self.push("matmul", shape, out, Op::Matmul { a, b, batch, m, k, n, a_batched, b_batched }, tracked)
    }

    /// `x · wᵀ + bias` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure!(sw.len() == 2, "linear", "weight must be [out, in], got {:?}", sw);
        ensure!(!sx.is_empty() && sx[sx.len() - 1] == sw[1], "linear", "input {:?} does not end in {}", sx, sw[1]);
        let (out_f, inp) = (sw[0], sw[1]);
        let rows = sx.iter().product::<usize>() / inp;
        if let Some(b) = bias {
            ensure!(self.shape(b) == [out_f], "linear", "bias {:?} must be [{}]", self.shape(b), out_f);
        }
        let mut out = vec![T::zero(); rows * out_f];
        gemm(rows, inp, out_f, &self.node(x).value, false, &self.node(w).value, true, T::zero(), &mut out);
        if let Some(b) = bias {
            let bv = &self.node(b).value;
            for row in out.chunks_mut(out_f) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_f;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        self.push("linear", shape, out, Op::Linear { x, w, b: bias, rows, inp, out: out_f }, tracked)
    }

    /// 3×3 convolution with padding 1. `x` is `[B, Ci, H, W]`; `w` is either
    /// a shared `[Co, Ci, 3, 3]` kernel or per-sample `[B, Co, Ci, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure!(stride == 1 || stride == 2, "conv2d", "stride must be 1 or 2, got {}", stride);
        ensure!(sx.len() == 4, "conv2d", "input must be [B, C, H, W], got {:?}", sx);
        let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (per_sample, co, wci, kh, kw) = match sw.len() {
            4 => (false, sw[0], sw[1], sw[2], sw[3]),
            5 => {
                ensure!(sw[0] == bsz, "conv2d", "per-sample kernel batch {} vs input batch {}", sw[0], bsz);
                (true, sw[1], sw[2], sw[3], sw[4])
            }
            _ => return Err(Error::contract("conv2d", format!("kernel must be rank 4 or 5, got {sw:?}"))),
        };
        ensure!(kh == 3 && kw == 3, "conv2d", "kernel must be 3×3, got {}×{}", kh, kw);
        ensure!(wci == ci, "conv2d", "kernel expects {} input channels, input {:?} has {}", wci, sx, ci);
        ensure!(h > 0 && wd > 0, "conv2d", "empty spatial extent {:?}", sx);
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let plane = ho * wo;
        let kdim = ci * 9;
        let mut cols = vec![T::zero(); kdim * plane];
        let mut out = vec![T::zero(); bsz * co * plane];
        {
            let xv = &self.node(x).value;
            let wv = &self.node(w).value;
            for b in 0..bsz {
                kernels::im2col3x3(&xv[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, stride, &mut cols);
                let wo_ = if per_sample { b * co * kdim } else { 0 };
                gemm(co, kdim, plane, &wv[wo_..wo_ + co * kdim], false, &cols, false, T::zero(), &mut out[b * co * plane..(b + 1) * co * plane]);
            }
        }
        let tracked = self.tracked(&[x, w]);
        self.push("conv2d", vec![bsz, co, ho, wo], out, Op::Conv2d { x, w, stride, per_sample }, tracked)
    }

    /// Pointwise convolution. `w` is `[Co, Ci]` or per-sample `[B, Co, Ci]`.
    pub fn conv2d_1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        ensure!(sx.len() == 4, "conv2d_1x1", "input must be [B, C, H, W], got {:?}", sx);
        let (bsz, ci, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        let (per_sample, co, wci) = match sw.len() {
            2 => (false, sw[0], sw[1]),
            3 => {
                ensure!(sw[0] == bsz, "conv2d_1x1", "per-sample kernel batch {} vs input batch {}", sw[0], bsz);
                (true, sw[1], sw[2])
            }
            _ => return Err(Error::contract("conv2d_1x1", format!("kernel must be rank 2 or 3, got {sw:?}"))),
        };
        ensure!(wci == ci, "conv2d_1x1", "kernel expects {} input channels, input has {}", wci, ci);
        let mut out = vec![T::zero(); bsz * co * plane];
        {
            let xv = &self.node(x).value;
            let wv = &self.node(w).value;
            for b in 0..bsz {
                let wo = if per_sample { b * co * ci } else { 0 };
                gemm(co, ci, plane, &wv[wo..wo + co * ci], false, &xv[b * ci * plane..(b + 1) * ci * plane], false, T::zero(), &mut out[b * co * plane..(b + 1) * co * plane]);
            }
        }
        let tracked = self.tracked(&[x, w]);
        self.push("conv2d_1x1", vec![bsz, co, sx[2], sx[3]], out, Op::Conv1x1 { x, w, per_sample }, tracked)
    }

    fn broadcast_binary(&mut self, name: &str, a: Var, b: Var) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), None, None));
        }
        let out = kernels::broadcast_shape(sa, sb)
            .ok_or_else(|| Error::contract(name, format!("shapes {sa:?} and {sb:?} do not broadcast")))?;
        let oa = (sa != out.as_slice()).then(|| kernels::broadcast_offsets(sa, &out));
        let ob = (sb != out.as_slice()).then(|| kernels::broadcast_offsets(sb, &out));
        Ok((out, oa, ob))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, oa, ob) = self.broadcast_binary("add", a, b)?;
        let n: usize = shape.iter().product();
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let out: Vec<T> = (0..n)
            .map(|i| {
                let x = av[oa.as_ref().map_or(i, |o| o[i])];
                let y = bv[ob.as_ref().map_or(i, |o| o[i])];
                x + y
            })
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push("add", shape, out, Op::Add { a, b, oa, ob }, tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, oa, ob) = self.broadcast_binary("mul", a, b)?;
        let n: usize = shape.iter().product();
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let out: Vec<T> = (0..n)
            .map(|i| {
                let x = av[oa.as_ref().map_or(i, |o| o[i])];
                let y = bv[ob.as_ref().map_or(i, |o| o[i])];
                x * y
            })
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push("mul", shape, out, Op::Mul { a, b, oa, ob }, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cs = T::from_f64(c);
        let out = self.node(a).value.iter().map(|&v| v * cs).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push("scale", shape, out, Op::Scale { a, c }, tracked)
    }

    /// `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(!shape.is_empty(), "softmax", "scalar input");
        let d = *shape.last().unwrap();
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let tracked = self.tracked(&[a]);
        self.push("softmax", shape, out, Op::Softmax { a }, tracked)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let out = self.node(a).value.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push("leaky_relu", shape, out, Op::LeakyRelu { a }, tracked)
    }

    /// Bilinear 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(s.len() >= 2, "upsample2x", "need spatial axes, got {:?}", s);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        ensure!(h > 0 && w > 0, "upsample2x", "empty spatial extent {:?}", s);
        let planes = s[..s.len() - 2].iter().product();
        let out = kernels::upsample2x(&self.node(a).value, planes, h, w);
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let tracked = self.tracked(&[a]);
        self.push("upsample2x", shape, out, Op::Upsample2x { a }, tracked)
    }

    fn reduce(&mut self, name: &str, a: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        for &ax in axes {
            ensure!(ax < s.len(), name, "axis {} out of range for {:?}", ax, s);
        }
        let (kept, out_shape) = reduced_shape(&s, axes, keepdim);
        let offsets = kernels::broadcast_offsets(&kept, &s);
        let count: usize = axes.iter().map(|&ax| s[ax]).product::<usize>().max(1);
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut out = vec![T::zero(); kept.iter().product()];
        for (v, &o) in self.node(a).value.iter().zip(&offsets) {
            out[o] = out[o] + *v;
        }
        if mean {
            let sc = T::from_f64(scale);
            out.iter_mut().for_each(|v| *v = *v * sc);
        }
        let tracked = self.tracked(&[a]);
        self.push(name, out_shape, out, Op::Reduce { a, offsets, scale }, tracked)
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce("sum", a, axes, keepdim, false)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce("mean", a, axes, keepdim, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(self.shape(a) == self.shape(b), "mse", "shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// `x / sqrt(sum(x²) + eps)` along the last axis.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        ensure!(!shape.is_empty(), "l2_normalize", "scalar input");
        let d = *shape.last().unwrap();
        let e = T::from_f64(eps);
        let mut out = self.node(a).value.clone();
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + e).sqrt();
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let tracked = self.tracked(&[a]);
        self.push("l2_normalize", shape, out, Op::L2Normalize { a, eps }, tracked)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat", "no inputs");
        let first = self.shape(parts[0]).to_vec();
        ensure!(axis < first.len(), "concat", "axis {} out of range for {:?}", axis, first);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s.len() == first.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat",
                "shape {:?} incompatible with {:?} along axis {}",
                s,
                first,
                axis
            );
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let v = &self.node(p).value;
                out.extend_from_slice(&v[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked(parts);
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec(), axis }, tracked)
    }

    /// Ascending sort along the last axis, ties broken by original index.
    /// Returns sorted values and, per row, the source index of each slot.
    pub fn sort_lastaxis(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(a).to_vec();
        ensure!(!shape.is_empty(), "sort_lastaxis", "scalar input");
        let d = *shape.last().unwrap();
        let v = &self.node(a).value;
        let mut perm = Vec::with_capacity(v.len());
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(d.max(1)) {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).expect("finite values").then(i.cmp(&j)));
            out.extend(idx.iter().map(|&i| row[i]));
            perm.extend_from_slice(&idx);
        }
        let tracked = self.tracked(&[a]);
        let var = self.push("sort_lastaxis", shape, out, Op::Sort { a, perm: perm.clone() }, tracked)?;
        Ok((var, perm))
    }

    /// Cosine similarity along the last axis; drops that axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        ensure!(sa == self.shape(b), "cosine_similarity", "shapes {:?} and {:?} differ", sa, self.shape(b));
        ensure!(!sa.is_empty(), "cosine_similarity", "scalar input");
        let d = *sa.last().unwrap();
        let eps = T::from_f64(COS_EPS);
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let out: Vec<T> = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| {
                let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                let na = x.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
                let nb = y.iter().map(|&q| q * q).sum::<T>().sqrt().max(eps);
                dot / (na * nb)
            })
            .collect();
        let tracked = self.tracked(&[a, b]);
        self.push("cosine_similarity", sa[..sa.len() - 1].to_vec(), out, Op::Cosine { a, b }, tracked)
    }

    /// Zero-padded 3×3 neighborhood sum over the last two axes.
    pub fn box_filter_3x3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(s.len() >= 2, "box_filter_3x3", "need spatial axes, got {:?}", s);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let out = kernels::box3x3(&self.node(a).value, planes, h, w);
        let tracked = self.tracked(&[a]);
        self.push("box_filter_3x3", s, out, Op::BoxFilter { a }, tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure!(n == self.node(a).value.len(), "reshape", "cannot view {:?} as {:?}", self.shape(a), shape);
        let out = self.node(a).value.clone();
        let tracked = self.tracked(&[a]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, tracked)
    }

    /// Swaps two axes (materialized).
    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(ax0 < s.len() && ax1 < s.len(), "transpose", "axes ({}, {}) out of range for {:?}", ax0, ax1, s);
        let (out, shape) = permute_swap(&self.node(a).value, &s, ax0, ax1);
        let tracked = self.tracked(&[a]);
        self.push("transpose", shape, out, Op::Transpose { a, ax0, ax1 }, tracked)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "narrow", "axis {} out of range for {:?}", axis, s);
        ensure!(start + len <= s[axis], "narrow", "range {}..{} exceeds extent {}", start, start + len, s[axis]);
        let (outer, ext, inner) = kernels::split_axis(&s, axis);
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let tracked = self.tracked(&[a]);
        self.push("narrow", shape, out, Op::Narrow { a, axis, start }, tracked)
    }

    /// Gathers entries along `axis` at the given indices (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "index_select", "axis {} out of range for {:?}", axis, s);
        ensure!(indices.iter().all(|&i| i < s[axis]), "index_select", "index out of range for extent {}", s[axis]);
        let (outer, ext, inner) = kernels::split_axis(&s, axis);
        let v = &self.node(a).value;
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * ext + i) * inner;
                out.extend_from_slice(&v[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = indices.len();
        let tracked = self.tracked(&[a]);
        self.push("index_select", shape, out, Op::IndexSelect { a, axis, indices: indices.to_vec() }, tracked)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.node(loss).value.len() == 1,
            "backward",
            "loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, batch, m, k, n, a_batched, b_batched } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if self.is_tracked(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    for i in 0..*batch {
                        let ao = if *a_batched { i * m * k } else { 0 };
                        let bo = if *b_batched { i * k * n } else { 0 };
                        let beta = if *a_batched || i == 0 { T::zero() } else { T::one() };
                        gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], false, &bv[bo..bo + k * n], true, beta, &mut da[ao..ao + m * k]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.is_tracked(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for i in 0..*batch {
                        let ao = if *a_batched { i * m * k } else { 0 };
                        let bo = if *b_batched { i * k * n } else { 0 };
                        let beta = if *b_batched || i == 0 { T::zero() } else { T::one() };
                        gemm(k, m, n, &av[ao..ao + m * k], true, &g[i * m * n..(i + 1) * m * n], false, beta, &mut db[bo..bo + k * n]);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b, rows, inp, out } => {
                let (rows, inp, out) = (*rows, *inp, *out);
                if self.is_tracked(*x) {
                    let mut dx = vec![T::zero(); rows * inp];
                    gemm(rows, out, inp, g, false, &self.node(*w).value, false, T::zero(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(out, rows, inp, g, true, &self.node(*x).value, false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.is_tracked(*b) {
                        let mut db = vec![T::zero(); out];
                        for row in g.chunks(out) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Conv2d { x, w, stride, per_sample } => {
                let sx = self.shape(*x);
                let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = node.shape[1];
                let plane = node.shape[2] * node.shape[3];
                let kdim = ci * 9;
                let xv = &self.node(*x).value;
                let wv = &self.node(*w).value;
                let (tx, tw) = (self.is_tracked(*x), self.is_tracked(*w));
                let mut dx = if tx { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if tw { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); kdim * plane];
                let mut dcols = vec![T::zero(); kdim * plane];
                for b in 0..bsz {
                    let gb = &g[b * co * plane..(b + 1) * co * plane];
                    let wo = if *per_sample { b * co * kdim } else { 0 };
                    if tw {
                        kernels::im2col3x3(&xv[b * ci * h * wd..(b + 1) * ci * h * wd], ci, h, wd, *stride, &mut cols);
                        let beta = if *per_sample || b == 0 { T::zero() } else { T::one() };
                        gemm(co, plane, kdim, gb, false, &cols, true, beta, &mut dw[wo..wo + co * kdim]);
                    }
                    if tx {
                        gemm(kdim, co, plane, &wv[wo..wo + co * kdim], true, gb, false, T::zero(), &mut dcols);
                        kernels::col2im3x3(&dcols, ci, h, wd, *stride, &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd]);
                    }
                }
                if tx {
                    self.accumulate(grads, *x, dx);
                }
                if tw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Conv1x1 { x, w, per_sample } => {
                let sx = self.shape(*x);
                let (bsz, ci, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let co = node.shape[1];
                let xv = &self.node(*x).value;
                let wv = &self.node(*w).value;
                let (tx, tw) = (self.is_tracked(*x), self.is_tracked(*w));
                let mut dx = if tx { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if tw { vec![T::zero(); wv.len()] } else { Vec::new() };
                for b in 0..bsz {
                    let gb = &g[b * co * plane..(b + 1) * co * plane];
                    let wo = if *per_sample { b * co * ci } else { 0 };
                    let xb = &xv[b * ci * plane..(b + 1) * ci * plane];
                    if tw {
                        let beta = if *per_sample || b == 0 { T::zero() } else { T::one() };
                        gemm(co, plane, ci, gb, false, xb, true, beta, &mut dw[wo..wo + co * ci]);
                    }
                    if tx {
                        gemm(ci, co, plane, &wv[wo..wo + co * ci], true, gb, false, T::zero(), &mut dx[b * ci * plane..(b + 1) * ci * plane]);
                    }
                }
                if tx {
                    self.accumulate(grads, *x, dx);
                }
                if tw {
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::Add { a, b, oa, ob } => {
                if self.is_tracked(*a) {
                    let n = self.node(*a).value.len();
                    let d = match oa {
                        Some(o) => kernels::reduce_broadcast(g, o, n),
                        None => g.to_vec(),
                    };
                    self.accumulate(grads, *a, d);
                }
                if self.is_tracked(*b) {
                    let n = self.node(*b).value.len();
                    let d = match ob {
                        Some(o) => kernels::reduce_broadcast(g, o, n),
                        None => g.to_vec(),
                    };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Mul { a, b, oa, ob } => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                let at = |i: usize| av[oa.as_ref().map_or(i, |o| o[i])];
                let bt = |i: usize| bv[ob.as_ref().map_or(i, |o| o[i])];
                if self.is_tracked(*a) {
                    let full: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * bt(i)).collect();
                    let d = match oa {
                        Some(o) => kernels::reduce_broadcast(&full, o, av.len()),
                        None => full,
                    };
                    self.accumulate(grads, *a, d);
                }
                if self.is_tracked(*b) {
                    let full: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * at(i)).collect();
                    let d = match ob {
                        Some(o) => kernels::reduce_broadcast(&full, o, bv.len()),
                        None => full,
                    };
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale { a, c } => {
                let cs = T::from_f64(*c);
                self.accumulate(grads, *a, g.iter().map(|&v| v * cs).collect());
            }
            Op::Softmax { a } => {
                let d = *node.shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((y, gr), out) in node.value.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LeakyRelu { a } => {
                let slope = T::from_f64(LEAKY_SLOPE);
                let xv = &self.node(*a).value;
                let dx = xv.iter().zip(g).map(|(&x, &gv)| if x > T::zero() { gv } else { gv * slope }).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Upsample2x { a } => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = s[..s.len() - 2].iter().product();
                self.accumulate(grads, *a, kernels::upsample2x_backward(g, planes, h, w));
            }
            Op::Reduce { a, offsets, scale } => {
                let sc = T::from_f64(*scale);
                let dx = offsets.iter().map(|&o| g[o] * sc).collect();
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize { a, eps } => {
                let d = *node.shape.last().unwrap();
                let e = T::from_f64(*eps);
                let xv = &self.node(*a).value;
                let mut dx = vec![T::zero(); g.len()];
                for (((x, y), gr), out) in xv.chunks(d).zip(node.value.chunks(d)).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let n = (x.iter().map(|&v| v * v).sum::<T>() + e).sqrt();
                    let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.is_tracked(p) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += ext;
                }
            }
            Op::Sort { a, perm } => {
                let d = *node.shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for (r, (gr, pr)) in g.chunks(d).zip(perm.chunks(d)).enumerate() {
                    for (&gv, &src) in gr.iter().zip(pr) {
                        dx[r * d + src] = dx[r * d + src] + gv;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Cosine { a, b } => {
                let sa = self.shape(*a);
                let d = *sa.last().unwrap();
                let eps = T::from_f64(COS_EPS);
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (r, ((x, y), &gv)) in av.chunks(d).zip(bv.chunks(d)).zip(g).enumerate() {
                    let na_raw = x.iter().map(|&p| p * p).sum::<T>().sqrt();
                    let nb_raw = y.iter().map(|&q| q * q).sum::<T>().sqrt();
                    let (na, nb) = (na_raw.max(eps), nb_raw.max(eps));
                    let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                    let cos = dot / (na * nb);
                    let ca = if na_raw > eps { cos / (na * na) } else { T::zero() };
                    let cb = if nb_raw > eps { cos / (nb * nb) } else { T::zero() };
                    for i in 0..d {
                        da[r * d + i] = gv * (y[i] / (na * nb) - ca * x[i]);
                        db[r * d + i] = gv * (x[i] / (na * nb) - cb * y[i]);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::BoxFilter { a } => {
                let s = &node.shape;
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = s[..s.len() - 2].iter().product();
                self.accumulate(grads, *a, kernels::box3x3(g, planes, h, w));
            }
            Op::Reshape { a } => self.accumulate(grads, *a, g.to_vec()),
            Op::Transpose { a, ax0, ax1 } => {
                let (back, _) = permute_swap(g, &node.shape, *ax0, *ax1);
                self.accumulate(grads, *a, back);
            }
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, ext, inner) = kernels::split_axis(sa, *axis);
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); self.node(*a).value.len()];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::IndexSelect { a, axis, indices } => {
                let sa = self.shape(*a);
                let (outer, ext, inner) = kernels::split_axis(sa, *axis);
                let mut dx = vec![T::zero(); self.node(*a).value.len()];
                let mut src = 0;
                for o in 0..outer {
                    for &i in indices {
                        let base = (o * ext + i) * inner;
                        for j in 0..inner {
                            dx[base + j] = dx[base + j] + g[src + j];
                        }
                        src += inner;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_center_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let mut rng = crate::tensor::Rng::new(3);
        let x = Tensor::<f64>::randn(vec![1, 2, 5, 4], 1.0, &mut rng);
        let mut k = vec![0.0; 2 * 2 * 9];
        for c in 0..2 {
            k[(c * 2 + c) * 9 + 4] = 1.0;
        }
        let xv = g.constant(&x).unwrap();
        let kv = g.constant(&t(&[2, 2, 3, 3], &k)).unwrap();
        let y = g.conv2d(xv, kv, 1).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn sort_returns_permutation() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[3], &[3.0, 1.0, 2.0])).unwrap();
        let (y, perm) = g.sort_lastaxis(x).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0]);
        assert_eq!(perm, vec![1, 2, 0]);
    }

    #[test]
    fn sort_ties_are_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[4], &[2.0, 1.0, 2.0, 1.0])).unwrap();
        let (_, perm) = g.sort_lastaxis(x).unwrap();
        assert_eq!(perm, vec![1, 3, 0, 2]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum_all(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn cosine_self_gradient_vanishes() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[4], &[0.3, -1.2, 2.0, 0.5])).unwrap();
        let c = g.cosine_similarity(x, x).unwrap();
        assert!((g.item(c) - 1.0).abs() < 1e-12);
        let grads = g.backward(c).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sort_gradient_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(&t(&[5], &[0.4, -1.0, 3.0, 2.0, 0.0])).unwrap();
        let (s, _) = g.sort_lastaxis(x).unwrap();
        let l = g.sum_all(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.is_contract());
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(&[1], &[1e308])).unwrap();
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backward(a).unwrap_err().is_contract());
    }

    #[test]
    fn l2_normalize_unit_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(&[2, 3], &[1.0, 2.0, 2.0, -3.0, 0.0, 4.0])).unwrap();
        let y = g.l2_normalize(a, 0.0).unwrap();
        for row in g.value(y).chunks(3) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>())).unwrap();
        let b = g.transpose(a, 0, 2).unwrap();
        assert_eq!(g.shape(b), &[2, 3, 2]);
        assert_eq!(g.value(b)[1], 6.0);
        let c = g.transpose(b, 0, 2).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }
}
