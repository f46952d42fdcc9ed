//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation on a [`Var`]
//! evaluates eagerly and records a node; [`Graph::backward`] walks the arena
//! in reverse insertion order, which is a valid reverse topological order
//! because a node can only consume nodes created before it.
//!
//! Broadcasting is restricted to the leading axis: in `a + b`, `b` may either
//! match `a` exactly or match `a.shape()[1..]`.
//!
//! [`Graph::straight_through`] is the custom-gradient node: its forward value
//! is an arbitrary tensor, and its backward pass hands the incoming gradient
//! unchanged to a surrogate node of the same shape.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{softmax_row, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Scale,
    Exp,
    Log,
    LogClamped,
    Neg,
    Sum,
    Mean,
    MaxLast,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Concat,
    Reshape,
    StraightThrough,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::LogClamped => "log_clamped",
            OpKind::Neg => "neg",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MaxLast => "max",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::StraightThrough => "straight_through",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Backward rule together with the parent ids it distributes into.
#[derive(Debug)]
enum Rule {
    None,
    Add { a: usize, b: usize, bcast: bool },
    Sub { a: usize, b: usize, bcast: bool },
    Mul { a: usize, b: usize, bcast: bool },
    MatMul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Exp { x: usize },
    Log { x: usize },
    LogClamped { x: usize, floor: f64 },
    Neg { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    MaxLast { x: usize, index: Vec<usize> },
    Relu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    Concat { parts: Vec<(usize, usize)> },
    Reshape { x: usize },
    StraightThrough { surrogate: usize },
}

impl Rule {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Rule::None => Vec::new(),
            Rule::Add { a, b, .. }
            | Rule::Sub { a, b, .. }
            | Rule::Mul { a, b, .. }
            | Rule::MatMul { a, b } => vec![*a, *b],
            Rule::Scale { x, .. }
            | Rule::Exp { x }
            | Rule::Log { x }
            | Rule::LogClamped { x, .. }
            | Rule::Neg { x }
            | Rule::Sum { x }
            | Rule::Mean { x }
            | Rule::MaxLast { x, .. }
            | Rule::Relu { x }
            | Rule::Sigmoid { x }
            | Rule::Softmax { x }
            | Rule::LogSoftmax { x }
            | Rule::Reshape { x } => vec![*x],
            Rule::Concat { parts } => parts.iter().map(|p| p.0).collect(),
            Rule::StraightThrough { surrogate } => vec![*surrogate],
        }
    }
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    value: Tensor,
    requires_grad: bool,
    rule: Rule,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<f64>>,
}

/// Arena of recorded operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({}, {:?})", self.id, n.kind, n.value.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node; differentiable iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad;
        self.push_unchecked(OpKind::Leaf, t, requires_grad, Rule::None)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        let mut t = self.nodes.borrow()[v.id].value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    pub fn with_value<R>(&self, v: Var<'_>, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var<'_>) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn kind(&self, v: Var<'_>) -> OpKind {
        self.nodes.borrow()[v.id].kind
    }

    pub fn requires_grad(&self, v: Var<'_>) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Ids of the parents `v` distributes gradient into.
    pub fn inputs(&self, v: Var<'_>) -> Vec<usize> {
        self.nodes.borrow()[v.id].rule.inputs()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push_unchecked(&self, kind: OpKind, value: Tensor, requires_grad: bool, rule: Rule) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let rule = if requires_grad { rule } else { Rule::None };
        nodes.push(Node {
            kind,
            value,
            requires_grad,
            rule,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, kind: OpKind, value: Tensor, rule: Rule) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            rule.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(kind, value, requires_grad, rule))
    }

    fn check_same(&self, a: Var<'_>, b: Var<'_>) {
        assert!(
            std::ptr::eq(a.graph, self) && std::ptr::eq(b.graph, self),
            "vars belong to a different graph"
        );
    }

    /// Node whose forward value is `forward_value` and whose backward pass
    /// routes the incoming gradient unchanged into `surrogate`.
    pub fn straight_through<'g>(&'g self, forward_value: Tensor, surrogate: Var<'g>) -> Result<Var<'g>> {
        let sshape = self.shape(surrogate);
        if forward_value.shape() != sshape.as_slice() {
            return Err(Error::Shape {
                op: OpKind::StraightThrough.name(),
                lhs: forward_value.shape().to_vec(),
                rhs: sshape,
            });
        }
        self.push(
            OpKind::StraightThrough,
            forward_value.with_requires_grad(false),
            Rule::StraightThrough {
                surrogate: surrogate.id,
            },
        )
    }

    /// Concatenation along the last axis. Leading axes must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let nodes = self.nodes.borrow();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = nodes[p.id].value.shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: OpKind::Concat.name(),
                    lhs: nodes[first.id].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rule = Rule::Concat {
            parts: parts.iter().map(|p| p.id).zip(widths).collect(),
        };
        drop(nodes);
        self.push(OpKind::Concat, value, rule)
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let r = &nodes[root.id];
            if r.value.len() != 1 {
                return Err(Error::NonScalarRoot(r.value.shape().to_vec()));
            }
            if !r.requires_grad {
                return Ok(());
            }
            let mut grads: Vec<Option<Vec<f64>>> = (0..=root.id).map(|_| None).collect();
            grads[root.id] = Some(vec![1.0]);
            let mut leaf_grads = Vec::new();
            for id in (0..=root.id).rev() {
                let Some(dy) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if node.kind == OpKind::Leaf {
                    leaf_grads.push((id, dy));
                    continue;
                }
                for input in node.rule.inputs() {
                    if input >= id {
                        return Err(Error::Cycle { node: id, input });
                    }
                }
                propagate(&nodes, id, &dy, &mut grads);
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, dy) in leaf_grads {
            match &mut nodes[id].grad {
                Some(g) => g.iter_mut().zip(&dy).for_each(|(a, b)| *a += b),
                slot => *slot = Some(dy),
            }
        }
        Ok(())
    }
}

fn broadcast_kind(op: OpKind, a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if a.rank() >= 1 && &a.shape()[1..] == b.shape() {
        Ok(true)
    } else {
        Err(Error::Shape {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bd = b.data();
    let n = bd.len().max(1);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % n]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m x k), `b` (k x n)
    // and the row-major `c` (m x n); callers check the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    let y = node.value.data();
    match &node.rule {
        Rule::None => {}
        Rule::Add { a, b, bcast } | Rule::Sub { a, b, bcast } => {
            let sign = if matches!(node.rule, Rule::Sub { .. }) { -1.0 } else { 1.0 };
            if needs(*a) {
                let g = slot(grads, *a, dy.len());
                g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
            }
            if needs(*b) {
                let nb = val(*b).len();
                let g = slot(grads, *b, nb);
                if *bcast {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % nb] += sign * d;
                    }
                } else {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += sign * d);
                }
            }
        }
        Rule::Mul { a, b, bcast } => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.len();
            if needs(*a) {
                let g = slot(grads, *a, dy.len());
                for (i, d) in dy.iter().enumerate() {
                    g[i] += d * bv[i % nb];
                }
            }
            if needs(*b) {
                let g = slot(grads, *b, nb);
                if *bcast {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % nb] += d * av[i];
                    }
                } else {
                    for (i, d) in dy.iter().enumerate() {
                        g[i] += d * av[i];
                    }
                }
            }
        }
        Rule::MatMul { a, b } => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if needs(*a) {
                // dA = dY · Bᵀ
                let g = slot(grads, *a, m * k);
                gemm(m, n, k, dy, (n as isize, 1), bv, (1, n as isize), 1.0, g);
            }
            if needs(*b) {
                // dB = Aᵀ · dY
                let g = slot(grads, *b, k * n);
                gemm(k, m, n, av, (1, k as isize), dy, (n as isize, 1), 1.0, g);
            }
        }
        Rule::Scale { x, c } => {
            let g = slot(grads, *x, dy.len());
            g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d);
        }
        Rule::Exp { x } => {
            let g = slot(grads, *x, dy.len());
            for i in 0..dy.len() {
                g[i] += dy[i] * y[i];
            }
        }
        Rule::Log { x } => {
            let xv = val(*x);
            let g = slot(grads, *x, dy.len());
            for i in 0..dy.len() {
                g[i] += dy[i] / xv[i];
            }
        }
        Rule::LogClamped { x, floor } => {
            let xv = val(*x);
            let g = slot(grads, *x, dy.len());
            for i in 0..dy.len() {
                if xv[i] > *floor {
                    g[i] += dy[i] / xv[i];
                }
            }
        }
        Rule::Neg { x } => {
            let g = slot(grads, *x, dy.len());
            g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
        }
        Rule::Sum { x } | Rule::Mean { x } => {
            let n = val(*x).len();
            let d = if matches!(node.rule, Rule::Mean { .. }) {
                dy[0] / n as f64
            } else {
                dy[0]
            };
            let g = slot(grads, *x, n);
            g.iter_mut().for_each(|g| *g += d);
        }
        Rule::MaxLast { x, index } => {
            let xt = &nodes[*x].value;
            let k = xt.last_dim();
            let g = slot(grads, *x, xt.len());
            for (r, &j) in index.iter().enumerate() {
                g[r * k + j] += dy[r];
            }
        }
        Rule::Relu { x } => {
            let xv = val(*x);
            let g = slot(grads, *x, dy.len());
            for i in 0..dy.len() {
                if xv[i] > 0.0 {
                    g[i] += dy[i];
                }
            }
        }
        Rule::Sigmoid { x } => {
            let g = slot(grads, *x, dy.len());
            for i in 0..dy.len() {
                g[i] += dy[i] * y[i] * (1.0 - y[i]);
            }
        }
        Rule::Softmax { x } => {
            let k = node.value.last_dim();
            let g = slot(grads, *x, dy.len());
            for ((yr, dr), gr) in y.chunks_exact(k).zip(dy.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    gr[j] += yr[j] * (dr[j] - dot);
                }
            }
        }
        Rule::LogSoftmax { x } => {
            let k = node.value.last_dim();
            let g = slot(grads, *x, dy.len());
            for ((yr, dr), gr) in y.chunks_exact(k).zip(dy.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                let total: f64 = dr.iter().sum();
                for j in 0..k {
                    gr[j] += dr[j] - yr[j].exp() * total;
                }
            }
        }
        Rule::Concat { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = dy.len() / total.max(1);
            let mut offset = 0;
            for &(pid, w) in parts {
                if needs(pid) {
                    let g = slot(grads, pid, rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * w + j] += dy[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Rule::Reshape { x } => {
            let g = slot(grads, *x, dy.len());
            g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        }
        Rule::StraightThrough { surrogate } => {
            let g = slot(grads, *surrogate, dy.len());
            g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        }
    }
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Tensor {
        self.graph.value(self)
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.shape(self)
    }

    pub fn grad(self) -> Option<Tensor> {
        self.graph.grad(self)
    }

    pub fn backward(self) -> Result<()> {
        self.graph.backward(self)
    }

    fn unary(self, kind: OpKind, f: impl Fn(&Tensor) -> Tensor, rule: Rule) -> Result<Var<'g>> {
        let value = self.graph.with_value(self, f);
        self.graph.push(kind, value, rule)
    }

    fn binary(
        self,
        other: Var<'g>,
        kind: OpKind,
        f: impl Fn(f64, f64) -> f64,
        rule: impl FnOnce(usize, usize, bool) -> Rule,
    ) -> Result<Var<'g>> {
        self.graph.check_same(self, other);
        let (value, bcast) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let bcast = broadcast_kind(kind, a, b)?;
            (elementwise(a, b, f), bcast)
        };
        self.graph.push(kind, value, rule(self.id, other.id, bcast))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Add, |a, b| a + b, |a, b, bcast| Rule::Add { a, b, bcast })
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Sub, |a, b| a - b, |a, b, bcast| Rule::Sub { a, b, bcast })
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, OpKind::Mul, |a, b| a * b, |a, b, bcast| Rule::Mul { a, b, bcast })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check_same(self, other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Shape {
                    op: OpKind::MatMul.name(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), 0.0, &mut out);
            Tensor::new(vec![m, n], out)?
        };
        self.graph.push(
            OpKind::MatMul,
            value,
            Rule::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.unary(OpKind::Scale, |t| t.map(|v| c * v), Rule::Scale { x: self.id, c })
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary(OpKind::Exp, |t| t.map(f64::exp), Rule::Exp { x: self.id })
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.unary(OpKind::Log, |t| t.map(f64::ln), Rule::Log { x: self.id })
    }

    /// `ln(max(x, floor))`; no gradient flows where `x <= floor`.
    pub fn log_clamped(self, floor: f64) -> Result<Var<'g>> {
        self.unary(
            OpKind::LogClamped,
            |t| t.map(|v| v.max(floor).ln()),
            Rule::LogClamped { x: self.id, floor },
        )
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(OpKind::Neg, |t| t.map(|v| -v), Rule::Neg { x: self.id })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.unary(
            OpKind::Sum,
            |t| Tensor::scalar(t.data().iter().sum()),
            Rule::Sum { x: self.id },
        )
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.unary(
            OpKind::Mean,
            |t| Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64),
            Rule::Mean { x: self.id },
        )
    }

    /// Max over the last axis, with the winning index per row (lowest index on ties).
    pub fn max_last(self) -> Result<(Var<'g>, Vec<usize>)> {
        let (value, index) = self.graph.with_value(self, |t| {
            let index: Vec<usize> = t.rows().map(crate::tensor::argmax).collect();
            let data = t.rows().zip(&index).map(|(r, &j)| r[j]).collect();
            let shape = t.shape()[..t.rank().saturating_sub(1)].to_vec();
            (Tensor::new(shape, data).expect("reduced shape"), index)
        });
        let v = self.graph.push(
            OpKind::MaxLast,
            value,
            Rule::MaxLast {
                x: self.id,
                index: index.clone(),
            },
        )?;
        Ok((v, index))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(OpKind::Relu, |t| t.map(|v| v.max(0.0)), Rule::Relu { x: self.id })
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(
            OpKind::Sigmoid,
            |t| t.map(|v| 1.0 / (1.0 + (-v).exp())),
            Rule::Sigmoid { x: self.id },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        self.unary(
            OpKind::Softmax,
            |t| {
                let mut out = t.clone();
                let k = t.last_dim();
                for (src, dst) in t.rows().zip(out.data_mut().chunks_exact_mut(k)) {
                    softmax_row(src, dst);
                }
                out.with_requires_grad(false)
            },
            Rule::Softmax { x: self.id },
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        self.unary(
            OpKind::LogSoftmax,
            |t| {
                let mut out = t.clone();
                let k = t.last_dim();
                for (src, dst) in t.rows().zip(out.data_mut().chunks_exact_mut(k)) {
                    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s - lse;
                    }
                }
                out.with_requires_grad(false)
            },
            Rule::LogSoftmax { x: self.id },
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let shape = shape.into();
        let value = self.graph.with_value(self, |t| t.clone().reshape(shape))?;
        self.graph
            .push(OpKind::Reshape, value.with_requires_grad(false), Rule::Reshape { x: self.id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let s = g.constant(t(&[3], &[0., 0., 0.])).softmax().unwrap().value();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exp_inverts_log() {
        let g = Graph::new();
        let v = g.constant(Tensor::scalar(2.5)).log().unwrap().exp().unwrap();
        assert!((v.value().item().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_by_identity() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        assert_eq!(a.matmul(i).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn square_derivative() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), Some(6.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), Some(8.0));
        g.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(x.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.; 6]));
        let b = g.constant(t(&[2, 2], &[0.; 4]));
        match a.matmul(b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(a.add(b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        assert!(matches!(x.log(), Err(Error::NonFinite { op: "log" })));
        let big = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(big.exp(), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn bias_broadcasts_over_leading_axis() {
        let g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.param(t(&[2], &[10., 20.]));
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 13., 24.]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn max_last_routes_to_winner() {
        let g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 5., 5., 7., 0., 1.]));
        let (m, idx) = x.max_last().unwrap();
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(m.value().data(), &[5., 7.]);
        m.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0., 1., 0., 0.]);
    }

    #[test]
    fn straight_through_forwards_value_and_passes_gradient() {
        let g = Graph::new();
        let l = g.param(t(&[1, 3], &[0.2, -0.4, 1.0]));
        let p = l.softmax().unwrap();
        let one_hot = t(&[1, 3], &[0., 0., 1.]);
        let z = g.straight_through(one_hot.clone(), p).unwrap();
        assert_eq!(z.value().data(), one_hot.data());
        let c = g.constant(t(&[1, 3], &[1.0, 2.0, -3.0]));
        z.mul(c).unwrap().sum().unwrap().backward().unwrap();
        let via_st = l.grad().unwrap();

        let g2 = Graph::new();
        let l2 = g2.param(t(&[1, 3], &[0.2, -0.4, 1.0]));
        let c2 = g2.constant(t(&[1, 3], &[1.0, 2.0, -3.0]));
        l2.softmax().unwrap().mul(c2).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(via_st.data(), l2.grad().unwrap().data());
    }

    #[test]
    fn straight_through_rejects_shape_mismatch() {
        let g = Graph::new();
        let s = g.param(t(&[1, 3], &[0.; 3]));
        assert!(g.straight_through(t(&[3], &[0.; 3]), s).is_err());
    }

    #[test]
    fn constants_record_no_backward_rule() {
        let g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = a.exp().unwrap();
        assert!(!g.requires_grad(b));
        assert!(g.inputs(b).is_empty());
        let p = g.param(t(&[2], &[1., 2.]));
        let c = p.mul(b).unwrap();
        assert_eq!(g.inputs(c), vec![p.id(), b.id()]);
    }

    #[test]
    fn concat_splits_gradient() {
        let g = Graph::new();
        let a = g.param(t(&[2, 1], &[1., 2.]));
        let b = g.param(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1., 3., 4., 2., 5., 6.]);
        let w = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        c.mul(w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1., 4.]);
        assert_eq!(b.grad().unwrap().data(), &[2., 3., 5., 6.]);
    }
}
