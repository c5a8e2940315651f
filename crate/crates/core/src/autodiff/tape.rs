use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::numel;
use super::{AutodiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Names of every primitive the tape understands.
pub const CATALOG: [&str; 19] = [
    "matmul",
    "conv2d",
    "deconv2d",
    "add",
    "mul",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "reshape",
    "permute",
    "concat",
    "slice",
    "reduce_mean",
    "reduce_sum",
    "sqrt",
    "div",
    "neg",
    "broadcast",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Batched matrix product `[.., m, k] x [.., k, n]` with equal batch dims.
    Matmul,
    /// Cross-correlation of `[N, C, H, W]` with kernel `[O, C, kh, kw]`.
    Conv2d { stride: usize, pad: usize },
    /// Adjoint of `Conv2d`: `[N, Ci, H, W]` with kernel `[Ci, Co, kh, kw]`.
    Deconv2d { stride: usize, pad: usize },
    Add,
    Mul,
    Relu,
    Gelu,
    Softmax { axis: usize },
    /// Normalization without affine parameters.
    LayerNorm { axis: usize, eps: f64 },
    Reshape { shape: Vec<usize> },
    Permute { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Removes `axis`.
    ReduceMean { axis: usize },
    /// Removes `axis`.
    ReduceSum { axis: usize },
    Sqrt,
    Div,
    Neg,
    /// Expands size-1 dims to `shape` (same rank).
    Broadcast { shape: Vec<usize> },
}

/// Loosely typed attribute record for name-based dispatch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub eps: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub perm: Option<Vec<usize>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Deconv2d { .. } => "deconv2d",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Permute { .. } => "permute",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::ReduceMean { .. } => "reduce_mean",
            Primitive::ReduceSum { .. } => "reduce_sum",
            Primitive::Sqrt => "sqrt",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Broadcast { .. } => "broadcast",
        }
    }

    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Self, AutodiffError> {
        let missing = |attr: &'static str| AutodiffError::MissingAttribute {
            primitive: name.to_string(),
            attr,
        };
        let axis = || attrs.axis.ok_or_else(|| missing("axis"));
        Ok(match name {
            "matmul" => Primitive::Matmul,
            "conv2d" => Primitive::Conv2d {
                stride: attrs.stride.unwrap_or(1),
                pad: attrs.pad.unwrap_or(0),
            },
            "deconv2d" => Primitive::Deconv2d {
                stride: attrs.stride.unwrap_or(1),
                pad: attrs.pad.unwrap_or(0),
            },
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "relu" => Primitive::Relu,
            "gelu" => Primitive::Gelu,
            "softmax" => Primitive::Softmax { axis: axis()? },
            "layer_norm" => Primitive::LayerNorm {
                axis: axis()?,
                eps: attrs.eps.unwrap_or(LAYER_NORM_EPS),
            },
            "reshape" => Primitive::Reshape {
                shape: attrs.shape.clone().ok_or_else(|| missing("shape"))?,
            },
            "permute" => Primitive::Permute {
                perm: attrs.perm.clone().ok_or_else(|| missing("perm"))?,
            },
            "concat" => Primitive::Concat { axis: axis()? },
            "slice" => Primitive::Slice {
                axis: axis()?,
                start: attrs.start.ok_or_else(|| missing("start"))?,
                end: attrs.end.ok_or_else(|| missing("end"))?,
            },
            "reduce_mean" => Primitive::ReduceMean { axis: axis()? },
            "reduce_sum" => Primitive::ReduceSum { axis: axis()? },
            "sqrt" => Primitive::Sqrt,
            "div" => Primitive::Div,
            "neg" => Primitive::Neg,
            "broadcast" => Primitive::Broadcast {
                shape: attrs.shape.clone().ok_or_else(|| missing("shape"))?,
            },
            other => return Err(AutodiffError::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Saved {
    None,
    InvStd(Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    inputs: Vec<usize>,
    op: Option<Primitive>,
    requires_grad: bool,
    saved: Saved,
    finite: bool,
}

/// Append-only record of primitive applications. Nodes are stored in
/// creation order, which is a topological order of the graph.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(primitive: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { primitive, detail }
}

fn check_axis(primitive: &'static str, shape: &[usize], axis: usize) -> Result<(), AutodiffError> {
    if axis >= shape.len() {
        return Err(mismatch(
            primitive,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: corrupts the backward rule of the named primitive.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: &'static str) {
        self.fault = Some(primitive);
    }

    fn push_leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.values().to_vec(),
            inputs: Vec::new(),
            op: None,
            requires_grad,
            saved: Saved::None,
            finite: tensor.values().iter().all(|v| v.is_finite()),
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf, tracking gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor, tensor.requires_grad())
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor, true)
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor, false)
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("recorded shapes are consistent")
            .with_requires_grad(n.requires_grad)
    }

    /// First recorded value containing NaN or infinity, with the primitive
    /// that produced it (`"leaf"` for inputs).
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.finite)
            .map(|i| (i, self.nodes[i].op.as_ref().map_or("leaf", Primitive::name)))
    }

    /// Applies a catalog primitive by name.
    pub fn primitive_forward(
        &mut self,
        name: &str,
        inputs: &[Var],
        attrs: &Attrs,
    ) -> Result<Var, AutodiffError> {
        let prim = Primitive::from_name(name, attrs)?;
        self.apply(prim, inputs)
    }

    /// Applies `prim` to `inputs`, recording the node for differentiation
    /// when any input tracks gradients.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, AutodiffError> {
        for v in inputs {
            if v.tape != self.id {
                return Err(AutodiffError::ForeignVariable);
            }
        }
        let name = prim.name();
        let arity = match prim {
            Primitive::Matmul
            | Primitive::Conv2d { .. }
            | Primitive::Deconv2d { .. }
            | Primitive::Add
            | Primitive::Mul
            | Primitive::Div => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(AutodiffError::Arity {
                    primitive: name,
                    expected: n,
                    found: inputs.len(),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::Arity {
                    primitive: name,
                    expected: 1,
                    found: 0,
                })
            }
            _ => {}
        }
        let (shape, value, saved) = self.compute(&prim, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let finite = value.iter().all(|x| x.is_finite());
        // division and square roots may leave the domain; everything else
        // only turns finite inputs into non-finite values by overflowing
        if !finite
            && !matches!(prim, Primitive::Div | Primitive::Sqrt)
            && inputs.iter().all(|v| self.nodes[v.index].finite)
        {
            return Err(AutodiffError::NonFiniteOutput { primitive: name, node: self.nodes.len() });
        }
        self.nodes.push(Node {
            shape,
            value,
            inputs: inputs.iter().map(|v| v.index).collect(),
            op: Some(prim),
            requires_grad,
            saved,
            finite,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn compute(
        &self,
        prim: &Primitive,
        inputs: &[Var],
    ) -> Result<(Vec<usize>, Vec<f64>, Saved), AutodiffError> {
        let name = prim.name();
        let x = &self.nodes[inputs[0].index];
        let unary = |f: &dyn Fn(f64) -> f64| x.value.iter().map(|&v| f(v)).collect::<Vec<_>>();
        let same_shape = || -> Result<&Node, AutodiffError> {
            let y = &self.nodes[inputs[1].index];
            if x.shape != y.shape {
                return Err(mismatch(
                    name,
                    format!("operands {:?} and {:?} differ", x.shape, y.shape),
                ));
            }
            Ok(y)
        };
        let out = match prim {
            Primitive::Matmul => {
                let b = &self.nodes[inputs[1].index];
                let (batch, m, k, n) = matmul_dims(&x.shape, &b.shape)?;
                let mut out = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    kernels::gemm_nn(
                        &x.value[bi * m * k..][..m * k],
                        &b.value[bi * k * n..][..k * n],
                        &mut out[bi * m * n..][..m * n],
                        m,
                        k,
                        n,
                    );
                }
                let mut shape = x.shape.clone();
                *shape.last_mut().unwrap() = n;
                (shape, out, Saved::None)
            }
            Primitive::Conv2d { stride, pad } => {
                let w = &self.nodes[inputs[1].index];
                let (batch, g, out_ch) = conv_geom(&x.shape, &w.shape, *stride, *pad)?;
                let ckk = g.cols_rows();
                let l = g.cols_len();
                let in_len = g.channels * g.height * g.width;
                let mut cols = vec![0.0; ckk * l];
                let mut out = vec![0.0; batch * out_ch * l];
                for n in 0..batch {
                    kernels::im2col(&x.value[n * in_len..][..in_len], &g, &mut cols);
                    kernels::gemm_nn(
                        &w.value,
                        &cols,
                        &mut out[n * out_ch * l..][..out_ch * l],
                        out_ch,
                        ckk,
                        l,
                    );
                }
                (vec![batch, out_ch, g.out_h, g.out_w], out, Saved::None)
            }
            Primitive::Deconv2d { stride, pad } => {
                let w = &self.nodes[inputs[1].index];
                let (batch, g, in_ch) = deconv_geom(&x.shape, &w.shape, *stride, *pad)?;
                let ckk = g.cols_rows();
                let l = g.cols_len();
                let out_len = g.channels * g.height * g.width;
                let mut cols = vec![0.0; ckk * l];
                let mut out = vec![0.0; batch * out_len];
                for n in 0..batch {
                    cols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn(&w.value, &x.value[n * in_ch * l..][..in_ch * l], &mut cols, ckk, in_ch, l);
                    kernels::col2im_add(&cols, &g, &mut out[n * out_len..][..out_len]);
                }
                (vec![batch, g.channels, g.height, g.width], out, Saved::None)
            }
            Primitive::Add => {
                let y = same_shape()?;
                let v = x.value.iter().zip(&y.value).map(|(a, b)| a + b).collect();
                (x.shape.clone(), v, Saved::None)
            }
            Primitive::Mul => {
                let y = same_shape()?;
                let v = x.value.iter().zip(&y.value).map(|(a, b)| a * b).collect();
                (x.shape.clone(), v, Saved::None)
            }
            Primitive::Div => {
                let y = same_shape()?;
                let v = x.value.iter().zip(&y.value).map(|(a, b)| a / b).collect();
                (x.shape.clone(), v, Saved::None)
            }
            Primitive::Relu => (x.shape.clone(), unary(&|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }), Saved::None),
            Primitive::Gelu => (x.shape.clone(), unary(&kernels::gelu), Saved::None),
            Primitive::Sqrt => (x.shape.clone(), unary(&f64::sqrt), Saved::None),
            Primitive::Neg => (x.shape.clone(), unary(&|v| -v), Saved::None),
            Primitive::Softmax { axis } => {
                check_axis(name, &x.shape, *axis)?;
                let (outer, n, inner) = kernels::axis_split(&x.shape, *axis);
                let mut out = vec![0.0; x.value.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let max = (0..n).map(|k| x.value[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for k in 0..n {
                            let e = (x.value[at(k)] - max).exp();
                            out[at(k)] = e;
                            sum += e;
                        }
                        for k in 0..n {
                            out[at(k)] /= sum;
                        }
                    }
                }
                (x.shape.clone(), out, Saved::None)
            }
            Primitive::LayerNorm { axis, eps } => {
                check_axis(name, &x.shape, *axis)?;
                let (outer, n, inner) = kernels::axis_split(&x.shape, *axis);
                let mut out = vec![0.0; x.value.len()];
                let mut inv_std = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let mean = (0..n).map(|k| x.value[at(k)]).sum::<f64>() / n as f64;
                        let var = (0..n)
                            .map(|k| {
                                let d = x.value[at(k)] - mean;
                                d * d
                            })
                            .sum::<f64>()
                            / n as f64;
                        let s = 1.0 / (var + eps).sqrt();
                        inv_std[o * inner + i] = s;
                        for k in 0..n {
                            out[at(k)] = (x.value[at(k)] - mean) * s;
                        }
                    }
                }
                (x.shape.clone(), out, Saved::InvStd(inv_std))
            }
            Primitive::Reshape { shape } => {
                if shape.iter().any(|&d| d == 0) || numel(shape) != x.value.len() {
                    return Err(mismatch(
                        name,
                        format!("cannot reshape {:?} into {:?}", x.shape, shape),
                    ));
                }
                (shape.clone(), x.value.clone(), Saved::None)
            }
            Primitive::Permute { perm } => {
                let mut seen = vec![false; x.shape.len()];
                if perm.len() != x.shape.len()
                    || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
                {
                    return Err(mismatch(
                        name,
                        format!("{perm:?} is not a permutation of rank {}", x.shape.len()),
                    ));
                }
                let shape = perm.iter().map(|&p| x.shape[p]).collect();
                (shape, kernels::permute(&x.value, &x.shape, perm), Saved::None)
            }
            Primitive::Concat { axis } => {
                check_axis(name, &x.shape, *axis)?;
                let mut total = 0;
                for v in inputs {
                    let s = &self.nodes[v.index].shape;
                    let compatible = s.len() == x.shape.len()
                        && s.iter()
                            .zip(&x.shape)
                            .enumerate()
                            .all(|(d, (a, b))| d == *axis || a == b);
                    if !compatible {
                        return Err(mismatch(
                            name,
                            format!("{s:?} incompatible with {:?} along axis {axis}", x.shape),
                        ));
                    }
                    total += s[*axis];
                }
                let mut shape = x.shape.clone();
                shape[*axis] = total;
                let (outer, _, inner) = kernels::axis_split(&x.shape, *axis);
                let mut out = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for v in inputs {
                        let node = &self.nodes[v.index];
                        let chunk = node.shape[*axis] * inner;
                        out.extend_from_slice(&node.value[o * chunk..(o + 1) * chunk]);
                    }
                }
                (shape, out, Saved::None)
            }
            Primitive::Slice { axis, start, end } => {
                check_axis(name, &x.shape, *axis)?;
                if start >= end || *end > x.shape[*axis] {
                    return Err(mismatch(
                        name,
                        format!("range {start}..{end} invalid for extent {}", x.shape[*axis]),
                    ));
                }
                let (outer, n, inner) = kernels::axis_split(&x.shape, *axis);
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    out.extend_from_slice(&x.value[(o * n + start) * inner..(o * n + end) * inner]);
                }
                let mut shape = x.shape.clone();
                shape[*axis] = end - start;
                (shape, out, Saved::None)
            }
            Primitive::ReduceMean { axis } | Primitive::ReduceSum { axis } => {
                check_axis(name, &x.shape, *axis)?;
                let (outer, n, inner) = kernels::axis_split(&x.shape, *axis);
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    let base = o * n * inner;
                    out.extend_from_slice(&x.value[base..base + inner]);
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for k in 1..n {
                        for (d, s) in dst.iter_mut().zip(&x.value[base + k * inner..base + (k + 1) * inner]) {
                            *d += s;
                        }
                    }
                    if matches!(prim, Primitive::ReduceMean { .. }) {
                        dst.iter_mut().for_each(|d| *d /= n as f64);
                    }
                }
                let mut shape = x.shape.clone();
                shape.remove(*axis);
                (shape, out, Saved::None)
            }
            Primitive::Broadcast { shape } => {
                let ok = shape.len() == x.shape.len()
                    && shape.iter().zip(&x.shape).all(|(&t, &s)| s == t || (s == 1 && t > 0));
                if !ok {
                    return Err(mismatch(
                        name,
                        format!("cannot broadcast {:?} to {:?}", x.shape, shape),
                    ));
                }
                let out_strides = kernels::strides(shape);
                let in_strides = kernels::strides(&x.shape);
                let out = (0..numel(shape))
                    .map(|flat| {
                        let mut src = 0;
                        for d in 0..shape.len() {
                            let i = (flat / out_strides[d]) % shape[d];
                            if x.shape[d] != 1 {
                                src += i * in_strides[d];
                            }
                        }
                        x.value[src]
                    })
                    .collect();
                (shape.clone(), out, Saved::None)
            }
        };
        Ok(out)
    }

    /// Reverse sweep from the scalar `loss`, returning gradients for every
    /// recorded value that tracks them.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedLoss);
        }
        let root = &self.nodes[loss.index];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root.requires_grad {
            grads[loss.index] = Some(vec![1.0]);
        }
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, idx: usize, op: &Primitive, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let inputs = &node.inputs;
        let input = |k: usize| &self.nodes[inputs[k]];
        let faulty = self.fault == Some(op.name());
        let mut acc = |k: usize, f: &mut dyn FnMut(&mut [f64])| {
            let i = inputs[k];
            if !self.nodes[i].requires_grad {
                return;
            }
            let len = self.nodes[i].value.len();
            let buf = grads[i].get_or_insert_with(|| vec![0.0; len]);
            if faulty {
                let mut tmp = vec![0.0; len];
                f(&mut tmp);
                for (b, t) in buf.iter_mut().zip(tmp) {
                    *b += 1.5 * t + 1e-3;
                }
            } else {
                f(buf);
            }
        };
        match op {
            Primitive::Matmul => {
                let a = input(0);
                let b = input(1);
                let (batch, m, k, n) = matmul_dims(&a.shape, &b.shape).expect("validated");
                acc(0, &mut |da| {
                    for bi in 0..batch {
                        kernels::gemm_nt(&g[bi * m * n..][..m * n], &b.value[bi * k * n..][..k * n], &mut da[bi * m * k..][..m * k], m, n, k);
                    }
                });
                acc(1, &mut |db| {
                    for bi in 0..batch {
                        kernels::gemm_tn(&a.value[bi * m * k..][..m * k], &g[bi * m * n..][..m * n], &mut db[bi * k * n..][..k * n], k, m, n);
                    }
                });
            }
            Primitive::Conv2d { stride, pad } => {
                let x = input(0);
                let w = input(1);
                let (batch, geom, out_ch) = conv_geom(&x.shape, &w.shape, *stride, *pad).expect("validated");
                let ckk = geom.cols_rows();
                let l = geom.cols_len();
                let in_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; ckk * l];
                acc(1, &mut |dw| {
                    for n in 0..batch {
                        kernels::im2col(&x.value[n * in_len..][..in_len], &geom, &mut cols);
                        kernels::gemm_nt(&g[n * out_ch * l..][..out_ch * l], &cols, dw, out_ch, l, ckk);
                    }
                });
                acc(0, &mut |dx| {
                    for n in 0..batch {
                        cols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(&w.value, &g[n * out_ch * l..][..out_ch * l], &mut cols, ckk, out_ch, l);
                        kernels::col2im_add(&cols, &geom, &mut dx[n * in_len..][..in_len]);
                    }
                });
            }
            Primitive::Deconv2d { stride, pad } => {
                let x = input(0);
                let w = input(1);
                let (batch, geom, in_ch) = deconv_geom(&x.shape, &w.shape, *stride, *pad).expect("validated");
                let ckk = geom.cols_rows();
                let l = geom.cols_len();
                let out_len = geom.channels * geom.height * geom.width;
                let mut cols_all = vec![0.0; batch * ckk * l];
                for n in 0..batch {
                    kernels::im2col(&g[n * out_len..][..out_len], &geom, &mut cols_all[n * ckk * l..][..ckk * l]);
                }
                acc(0, &mut |dx| {
                    for n in 0..batch {
                        kernels::gemm_nn(&w.value, &cols_all[n * ckk * l..][..ckk * l], &mut dx[n * in_ch * l..][..in_ch * l], in_ch, ckk, l);
                    }
                });
                acc(1, &mut |dw| {
                    for n in 0..batch {
                        kernels::gemm_nt(&x.value[n * in_ch * l..][..in_ch * l], &cols_all[n * ckk * l..][..ckk * l], dw, in_ch, l, ckk);
                    }
                });
            }
            Primitive::Add => {
                acc(0, &mut |d| add_into(d, g));
                acc(1, &mut |d| add_into(d, g));
            }
            Primitive::Mul => {
                let a = &input(0).value;
                let b = &input(1).value;
                acc(0, &mut |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(b) {
                        *d += g * b;
                    }
                });
                acc(1, &mut |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(a) {
                        *d += g * a;
                    }
                });
            }
            Primitive::Div => {
                let a = &input(0).value;
                let b = &input(1).value;
                acc(0, &mut |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(b) {
                        *d += g / b;
                    }
                });
                acc(1, &mut |d| {
                    for (((d, g), a), b) in d.iter_mut().zip(g).zip(a).zip(b) {
                        *d -= g * a / (b * b);
                    }
                });
            }
            Primitive::Relu => {
                let x = &input(0).value;
                acc(0, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Primitive::Gelu => {
                let x = &input(0).value;
                acc(0, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * kernels::gelu_grad(x);
                    }
                });
            }
            Primitive::Sqrt => {
                let y = &node.value;
                acc(0, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += 0.5 * g / y;
                    }
                });
            }
            Primitive::Neg => acc(0, &mut |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d -= g;
                }
            }),
            Primitive::Softmax { axis } => {
                let y = &node.value;
                let (outer, n, inner) = kernels::axis_split(&node.shape, *axis);
                acc(0, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Primitive::LayerNorm { axis, .. } => {
                let y = &node.value;
                let Saved::InvStd(inv_std) = &node.saved else {
                    unreachable!("layer_norm saves its scale")
                };
                let (outer, n, inner) = kernels::axis_split(&node.shape, *axis);
                acc(0, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let mean_g = (0..n).map(|k| g[at(k)]).sum::<f64>() / n as f64;
                            let mean_gy = (0..n).map(|k| g[at(k)] * y[at(k)]).sum::<f64>() / n as f64;
                            let s = inv_std[o * inner + i];
                            for k in 0..n {
                                d[at(k)] += s * (g[at(k)] - mean_g - y[at(k)] * mean_gy);
                            }
                        }
                    }
                });
            }
            Primitive::Reshape { .. } => acc(0, &mut |d| add_into(d, g)),
            Primitive::Permute { perm } => {
                let back = kernels::permute(g, &node.shape, &kernels::inverse_perm(perm));
                acc(0, &mut |d| add_into(d, &back));
            }
            Primitive::Concat { axis } => {
                let (outer, _, inner) = kernels::axis_split(&node.shape, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for k in 0..inputs.len() {
                    let extent = input(k).shape[*axis];
                    acc(k, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + extent) * inner];
                            add_into(&mut d[o * extent * inner..(o + 1) * extent * inner], src);
                        }
                    });
                    offset += extent;
                }
            }
            Primitive::Slice { axis, start, end } => {
                let (outer, n, inner) = kernels::axis_split(&input(0).shape, *axis);
                let width = (end - start) * inner;
                acc(0, &mut |d| {
                    for o in 0..outer {
                        add_into(&mut d[(o * n + start) * inner..][..width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            Primitive::ReduceMean { axis } | Primitive::ReduceSum { axis } => {
                let (outer, n, inner) = kernels::axis_split(&input(0).shape, *axis);
                let scale = if matches!(op, Primitive::ReduceMean { .. }) { 1.0 / n as f64 } else { 1.0 };
                acc(0, &mut |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..n {
                            for (d, s) in d[(o * n + k) * inner..][..inner].iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                });
            }
            Primitive::Broadcast { shape } => {
                let x_shape = &input(0).shape;
                let out_strides = kernels::strides(shape);
                let in_strides = kernels::strides(x_shape);
                acc(0, &mut |d| {
                    for (flat, gv) in g.iter().enumerate() {
                        let mut src = 0;
                        for dim in 0..shape.len() {
                            if x_shape[dim] != 1 {
                                src += ((flat / out_strides[dim]) % shape[dim]) * in_strides[dim];
                            }
                        }
                        d[src] += gv;
                    }
                });
            }
        }
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Matmul, &[a, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w])
    }
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Deconv2d { stride, pad }, &[x, w])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn gelu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Gelu, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Sqrt, &[x])
    }
    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Neg, &[x])
    }
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Softmax { axis }, &[x])
    }
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::LayerNorm { axis, eps: LAYER_NORM_EPS }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Permute { perm: perm.to_vec() }, &[x])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Slice { axis, start, end }, &[x])
    }
    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::ReduceMean { axis }, &[x])
    }
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(Primitive::ReduceSum { axis }, &[x])
    }
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(Primitive::Broadcast { shape: shape.to_vec() }, &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.shape(x).iter().product::<usize>();
        let flat = self.reshape(x, &[n])?;
        self.reduce_sum(flat, 0)
    }

    /// Mean of all elements as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.shape(x).iter().product::<usize>();
        let flat = self.reshape(x, &[n])?;
        self.reduce_mean(flat, 0)
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, AutodiffError> {
        let c = self.constant(&Tensor::full(&self.shape(x).to_vec(), factor));
        self.mul(x, c)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize), AutodiffError> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(mismatch("matmul", format!("ranks of {a:?} and {b:?} unsupported")));
    }
    let r = a.len();
    if a[..r - 2] != b[..r - 2] {
        return Err(mismatch("matmul", format!("batch dims of {a:?} and {b:?} differ")));
    }
    if a[r - 1] != b[r - 2] {
        return Err(mismatch(
            "matmul",
            format!("inner dims {} and {} differ ({a:?} x {b:?})", a[r - 1], b[r - 2]),
        ));
    }
    Ok((numel(&a[..r - 2]), a[r - 2], a[r - 1], b[r - 1]))
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, ConvGeom, usize), AutodiffError> {
    if x.len() != 4 || w.len() != 4 {
        return Err(mismatch("conv2d", format!("expected rank-4 input and kernel, got {x:?} and {w:?}")));
    }
    if x[1] != w[1] {
        return Err(mismatch("conv2d", format!("input channels {} vs kernel channels {}", x[1], w[1])));
    }
    if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(mismatch(
            "conv2d",
            format!("kernel {}x{} stride {stride} pad {pad} does not fit input {}x{}", w[2], w[3], x[2], x[3]),
        ));
    }
    let g = ConvGeom {
        channels: x[1],
        height: x[2],
        width: x[3],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: (x[2] + 2 * pad - w[2]) / stride + 1,
        out_w: (x[3] + 2 * pad - w[3]) / stride + 1,
    };
    Ok((x[0], g, w[0]))
}

/// Geometry of the convolution whose input-adjoint is this deconvolution:
/// the conv "input" is the deconv output.
fn deconv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, ConvGeom, usize), AutodiffError> {
    if x.len() != 4 || w.len() != 4 {
        return Err(mismatch("deconv2d", format!("expected rank-4 input and kernel, got {x:?} and {w:?}")));
    }
    if x[1] != w[0] {
        return Err(mismatch("deconv2d", format!("input channels {} vs kernel input channels {}", x[1], w[0])));
    }
    let out_h = ((x[2] - 1) * stride + w[2]) as isize - 2 * pad as isize;
    let out_w = ((x[3] - 1) * stride + w[3]) as isize - 2 * pad as isize;
    if stride == 0 || out_h < 1 || out_w < 1 || out_h as usize + 2 * pad < w[2] {
        return Err(mismatch(
            "deconv2d",
            format!("kernel {}x{} stride {stride} pad {pad} gives empty output from {}x{}", w[2], w[3], x[2], x[3]),
        ));
    }
    let g = ConvGeom {
        channels: w[1],
        height: out_h as usize,
        width: out_w as usize,
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: x[2],
        out_w: x[3],
    };
    Ok((x[0], g, x[1]))
}

/// Gradients produced by one [`Tape::backward`] sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` is off the loss path.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        assert_eq!(v.tape, self.tape, "variable belongs to another tape");
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
