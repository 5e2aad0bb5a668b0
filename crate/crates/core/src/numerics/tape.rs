//! Dynamic reverse-mode autodiff.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value. [`Graph::backward`] walks the nodes in reverse creation
//! order and applies each operation's vector-Jacobian product. Graphs are
//! rebuilt for every forward pass and nothing is ever updated in place.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{
    axis_split, dim_err, gelu_grad_scalar, gelu_scalar, inverse_permutation, layer_norm_parts,
    log_sigmoid_scalar, log_softmax, matmul, matmul_plan, permute, sigmoid_scalar, softmax,
    sum_axis, Real, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulConst(usize, Rc<Tensor<F>>),
    Scale(usize, F),
    AddScalar(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    Exp(usize),
    Powf(usize, F),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAll(usize),
    SumAxis(usize, usize),
    IndexRows(usize, Vec<usize>),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Powf(..) => "powf",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::IndexRows(..) => "index_rows",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::LogSigmoid(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Powf(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::IndexRows(a, _) => vec![a],
        }
    }
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
    name: Option<String>,
}

/// Operation record for one forward/backward pass. Confined to one thread.
pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Real> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, name: Option<String>) -> Result<Var<'_, F>> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                what: format!("output of {}", op.name()),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => name.is_some(),
            _ => op.inputs().iter().any(|&i| nodes[i].needs_grad),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            name,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, None)
            .expect("constant inputs must be finite")
    }

    /// A named trainable input. Gradients are reported under `name`.
    pub fn param(&self, name: impl Into<String>, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, Some(name.into()))
            .expect("parameters must be finite")
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `output` with respect to every named parameter
    /// (and every other node) in the graph.
    pub fn backward(&self, output: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                shape: out.value.shape().to_vec(),
                reason: "output must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(out.value.shape(), F::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in vjp(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let named = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = n.name.clone()?;
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                Some((name, g))
            })
            .collect();
        Ok(Gradients { grads, named })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    named: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradients of named parameters in registration order. Parameters the
    /// output does not depend on report zeros.
    pub fn named(&self) -> &[(String, Tensor<F>)] {
        &self.named
    }

    pub fn into_named(self) -> Vec<(String, Tensor<F>)> {
        self.named
    }
}

/// Whether `small` can be broadcast against `big` by repeating over leading
/// axes (bias vectors, position embeddings, per-pixel weights).
fn suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_zip<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if !suffix_broadcast(a.shape(), b.shape()) {
        return Err(dim_err(op, a.shape(), b.shape()));
    }
    let n = b.numel();
    let mut data = Vec::with_capacity(a.numel());
    if n > 0 {
        for chunk in a.data().chunks_exact(n) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
    }
    Tensor::new(a.shape(), data)
}

/// Sum a full-size gradient down to the broadcast operand's shape.
fn reduce_suffix<F: Real>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![F::zero(); n];
    if n > 0 {
        for chunk in g.data().chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
    }
    Tensor::new(shape, out).expect("suffix shape")
}

fn vjp<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(usize, Tensor<F>)>> {
    let val = |i: usize| &*nodes[i].value;
    let y = &*node.value;
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = matmul_plan(av.shape(), bv.shape())?;
            let (m, k, p) = (plan.m, plan.k, plan.p);
            let mut ga = vec![F::zero(); av.numel()];
            let mut gb = vec![F::zero(); bv.numel()];
            for i in 0..plan.batch {
                let ao = if plan.a_shared { 0 } else { i * m * k };
                let bo = if plan.b_shared { 0 } else { i * k * p };
                let gc = &g.data()[i * m * p..(i + 1) * m * p];
                F::gemm(
                    m,
                    p,
                    k,
                    gc,
                    false,
                    &bv.data()[bo..bo + k * p],
                    true,
                    &mut ga[ao..ao + m * k],
                    plan.a_shared,
                );
                F::gemm(
                    k,
                    m,
                    p,
                    &av.data()[ao..ao + m * k],
                    true,
                    gc,
                    false,
                    &mut gb[bo..bo + k * p],
                    plan.b_shared,
                );
            }
            vec![
                (*a, Tensor::new(av.shape(), ga)?),
                (*b, Tensor::new(bv.shape(), gb)?),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_suffix(g, val(*b).shape()))],
        Op::Mul(a, b) => {
            let ga = broadcast_zip("mul", g, val(*b), |g, b| g * b)?;
            let gb_full = g.zip_map(val(*a), "mul", |g, a| g * a)?;
            vec![(*a, ga), (*b, reduce_suffix(&gb_full, val(*b).shape()))]
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            let ga = broadcast_zip("div", g, bv, |g, b| g / b)?;
            // d(a/b)/db = -(a/b)/b = -y/b
            let gy = g.zip_map(y, "div", |g, y| g * y)?;
            let gb_full = broadcast_zip("div", &gy, bv, |gy, b| -gy / b)?;
            vec![(*a, ga), (*b, reduce_suffix(&gb_full, bv.shape()))]
        }
        Op::MulConst(a, c) => vec![(*a, g.zip_map(c, "mul_const", |g, c| g * c)?)],
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(y, "sigmoid", |g, y| g * y * (F::one() - y))?)],
        Op::LogSigmoid(a) => vec![(
            *a,
            g.zip_map(val(*a), "log_sigmoid", |g, x| g * sigmoid_scalar(-x))?,
        )],
        Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), "gelu", |g, x| g * gelu_grad_scalar(x))?)],
        Op::Exp(a) => vec![(*a, g.zip_map(y, "exp", |g, y| g * y)?)],
        Op::Powf(a, p) => vec![(
            *a,
            g.zip_map(val(*a), "powf", |g, x| g * *p * x.powf(*p - F::one()))?,
        )],
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_split(y.shape(), *axis)?;
            let mut gx = vec![F::zero(); y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot = (0..len)
                        .map(|j| g.data()[base + j * inner] * y.data()[base + j * inner])
                        .sum::<F>();
                    for j in 0..len {
                        let at = base + j * inner;
                        gx[at] = y.data()[at] * (g.data()[at] - dot);
                    }
                }
            }
            vec![(*a, Tensor::new(y.shape(), gx)?)]
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, len, inner) = axis_split(y.shape(), *axis)?;
            let mut gx = vec![F::zero(); y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let total = (0..len).map(|j| g.data()[base + j * inner]).sum::<F>();
                    for j in 0..len {
                        let at = base + j * inner;
                        gx[at] = g.data()[at] - y.data()[at].fast_exp() * total;
                    }
                }
            }
            vec![(*a, Tensor::new(y.shape(), gx)?)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            let c = gv.numel();
            let rows = g.numel() / c;
            let cf = F::from_usize(c).unwrap();
            let mut gx = vec![F::zero(); g.numel()];
            let mut ggamma = vec![F::zero(); c];
            let mut gbeta = vec![F::zero(); c];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut mean_dh = F::zero();
                let mut mean_dh_h = F::zero();
                for j in 0..c {
                    let dh = gr[j] * gv.data()[j];
                    mean_dh = mean_dh + dh;
                    mean_dh_h = mean_dh_h + dh * hr[j];
                    ggamma[j] = ggamma[j] + gr[j] * hr[j];
                    gbeta[j] = gbeta[j] + gr[j];
                }
                mean_dh = mean_dh / cf;
                mean_dh_h = mean_dh_h / cf;
                for j in 0..c {
                    let dh = gr[j] * gv.data()[j];
                    gx[r * c + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            vec![
                (*x, Tensor::new(g.shape(), gx)?),
                (*gamma, Tensor::new(&[c], ggamma)?),
                (*beta, Tensor::new(&[c], gbeta)?),
            ]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Permute(a, perm) => vec![(*a, permute(g, &inverse_permutation(perm))?)],
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let (outer, len, inner) = axis_split(shape, *axis)?;
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*a, Tensor::new(shape, gx)?)]
        }
        Op::IndexRows(a, rows) => {
            let shape = val(*a).shape();
            let width: usize = shape[1..].iter().product();
            let mut gx = vec![F::zero(); val(*a).numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    gx[r * width + j] = gx[r * width + j] + g.data()[k * width + j];
                }
            }
            vec![(*a, Tensor::new(shape, gx)?)]
        }
    })
}

impl<'g, F: Real> Var<'g, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Result<Self> {
        self.graph.push(value, op, None)
    }

    pub fn matmul(&self, other: Var<'g, F>) -> Result<Self> {
        let out = matmul(&self.value(), &other.value())?;
        self.unary(out, Op::MatMul(self.id, other.id))
    }

    /// Elementwise sum; `other` may be a trailing-shape operand broadcast over
    /// the leading axes of `self`.
    pub fn add(&self, other: Var<'g, F>) -> Result<Self> {
        let out = broadcast_zip("add", &self.value(), &other.value(), |a, b| a + b)?;
        self.unary(out, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, F>) -> Result<Self> {
        self.add(other.scale(-F::one())?)
    }

    pub fn mul(&self, other: Var<'g, F>) -> Result<Self> {
        let out = broadcast_zip("mul", &self.value(), &other.value(), |a, b| a * b)?;
        self.unary(out, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g, F>) -> Result<Self> {
        let out = broadcast_zip("div", &self.value(), &other.value(), |a, b| a / b)?;
        self.unary(out, Op::Div(self.id, other.id))
    }

    /// Elementwise product with a same-shape constant.
    pub fn mul_const(&self, c: Tensor<F>) -> Result<Self> {
        let out = self.value().zip_map(&c, "mul_const", |a, b| a * b)?;
        self.unary(out, Op::MulConst(self.id, Rc::new(c)))
    }

    pub fn scale(&self, s: F) -> Result<Self> {
        let out = self.value().map(|v| v * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: F) -> Result<Self> {
        let out = self.value().map(|v| v + s);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn sigmoid(&self) -> Result<Self> {
        let out = self.value().map(sigmoid_scalar);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn log_sigmoid(&self) -> Result<Self> {
        let out = self.value().map(log_sigmoid_scalar);
        self.unary(out, Op::LogSigmoid(self.id))
    }

    pub fn gelu(&self) -> Result<Self> {
        let out = self.value().map(gelu_scalar);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Result<Self> {
        let out = self.value().map(F::exp);
        self.unary(out, Op::Exp(self.id))
    }

    /// `x^p` for positive inputs.
    pub fn powf(&self, p: F) -> Result<Self> {
        let out = self.value().map(|v| v.powf(p));
        self.unary(out, Op::Powf(self.id, p))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let out = softmax(&self.value(), axis)?;
        self.unary(out, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        let out = log_softmax(&self.value(), axis)?;
        self.unary(out, Op::LogSoftmax(self.id, axis))
    }

    pub fn layer_norm(&self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: F) -> Result<Self> {
        let (out, xhat, inv_std) =
            layer_norm_parts(&self.value(), &gamma.value(), &beta.value(), eps)?;
        self.unary(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let out = permute(&self.value(), perm)?;
        self.unary(out, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                shape: self.shape(),
                reason: "rank < 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn sum(&self) -> Result<Self> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Result<Self> {
        let n = F::from_usize(self.value().numel()).unwrap();
        self.sum()?.scale(F::one() / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let out = sum_axis(&self.value(), axis)?;
        self.unary(out, Op::SumAxis(self.id, axis))
    }

    /// Gather rows along the first axis.
    pub fn index_rows(&self, rows: &[usize]) -> Result<Self> {
        let v = self.value();
        let shape = v.shape();
        if shape.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::Shape {
                op: "index_rows",
                shape: shape.to_vec(),
                reason: format!("row indices {rows:?} out of range"),
            });
        }
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let out = Tensor::new(&out_shape, data)?;
        self.unary(out, Op::IndexRows(self.id, rows.to_vec()))
    }
}
