//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`Tape`] owns an arena of nodes. Lifting a [`Tensor`] with
//! [`Tape::leaf`] yields a [`Var`] handle; every operation on vars computes
//! its value immediately and records the inputs needed for the backward rule.
//! [`Var::backward`] walks the arena in reverse insertion order (which is a
//! topological order by construction) and accumulates gradients, so fan-out
//! adds contributions instead of overwriting them.
//!
//! Ops whose inputs all have `needs_grad == false` still materialize values
//! but are skipped during the backward sweep. One tape is single-threaded;
//! independent model instances on separate tapes can run on separate threads.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{mat_mul, mat_transpose, Tensor};

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    Sigmoid(usize),
    Neg(usize),
    Scale(usize, S),
    AddConst(usize, S),
    Clamp(usize, S, S),
    Sum(usize),
    Mean(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize, len: usize },
    Broadcast(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

#[derive(Debug, Default)]
struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Arena of recorded operations; cheap to create, dropped after each step.
pub struct Tape<S: Scalar> {
    graph: Rc<RefCell<Graph<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a tape. Clones are cheap and refer to the same node.
#[derive(Clone, Debug)]
pub struct Var<S: Scalar> {
    graph: Rc<RefCell<Graph<S>>>,
    id: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { graph: Rc::new(RefCell::new(Graph { nodes: Vec::new() })) }
    }

    /// Second handle to the same tape.
    pub fn clone_handle(&self) -> Tape<S> {
        Tape { graph: Rc::clone(&self.graph) }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool, op: Op<S>) -> Var<S> {
        let mut g = self.graph.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        Var { graph: Rc::clone(&self.graph), id }
    }

    /// Registers a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&self, t: &Tensor<S>) -> Var<S> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Registers a tensor as a gradient-free constant.
    pub fn constant(&self, t: &Tensor<S>) -> Var<S> {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    /// Registers a leaf with an explicit trainability, ignoring the tensor's
    /// own `requires_grad` flag.
    pub fn leaf_as(&self, t: &Tensor<S>, requires_grad: bool) -> Var<S> {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    /// Gradient-free constant from raw parts.
    pub fn values(&self, shape: &[usize], data: Vec<S>) -> Result<Var<S>> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar(&self, v: S) -> Var<S> {
        self.constant(&Tensor::scalar(v))
    }

    pub fn ones(&self, shape: &[usize]) -> Var<S> {
        self.constant(&Tensor::full(shape, S::one()))
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.borrow().nodes.len()
    }

    /// Concatenates along `axis`; all parts must share every other dimension.
    pub fn concat(&self, parts: &[Var<S>], axis: usize) -> Result<Var<S>> {
        if parts.is_empty() {
            return Err(Error::Param("concat needs at least one input".into()));
        }
        for p in parts {
            if !Rc::ptr_eq(&self.graph, &p.graph) {
                return Err(Error::Contract("concat inputs from a different tape".into()));
            }
        }
        let g = self.graph.borrow();
        let first = &g.nodes[parts[0].id];
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = first.shape.clone();
        let mut axis_total = 0usize;
        for p in parts {
            let n = &g.nodes[p.id];
            if n.shape.len() != rank {
                return Err(Error::shape(
                    "concat",
                    format!("rank mismatch: {:?} vs {:?}", first.shape, n.shape),
                ));
            }
            for (ax, (&a, &b)) in first.shape.iter().zip(n.shape.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("dim {ax} mismatch: {:?} vs {:?}", first.shape, n.shape),
                    ));
                }
            }
            axis_total += n.shape[axis];
        }
        out_shape[axis] = axis_total;

        let inner: usize = first.shape[axis + 1..].iter().product();
        let outer: usize = first.shape[..axis].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for o in 0..outer {
            for p in parts {
                let n = &g.nodes[p.id];
                let alen = n.shape[axis];
                let block = alen * inner;
                data.extend_from_slice(&n.data[o * block..(o + 1) * block]);
            }
        }
        let needs = parts.iter().any(|p| g.nodes[p.id].needs_grad);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(g);
        Ok(self.push(out_shape, data, needs, Op::Concat { inputs: ids, axis }))
    }
}

// ── broadcast mapping ──

/// Per-destination-axis stride into the source buffer, or None when the
/// source cannot expand to `dst`. Legal: right-aligned shapes where each
/// source dim equals the target dim or is 1; missing leading dims expand.
fn broadcast_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let off = dst.len() - src.len();
    let mut src_strides = vec![0usize; src.len()];
    let mut acc = 1usize;
    for i in (0..src.len()).rev() {
        src_strides[i] = acc;
        acc *= src[i];
    }
    let mut map = vec![0usize; dst.len()];
    for a in 0..dst.len() {
        if a < off {
            continue;
        }
        let s = src[a - off];
        if s == dst[a] {
            map[a] = if s == 1 { 0 } else { src_strides[a - off] };
        } else if s == 1 {
            map[a] = 0;
        } else {
            return None;
        }
    }
    Some(map)
}

fn for_each_broadcast_pair(dst_shape: &[usize], map: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = dst_shape.iter().product();
    let rank = dst_shape.len();
    let mut coords = vec![0usize; rank];
    for di in 0..numel {
        let si: usize = coords.iter().zip(map).map(|(&co, &m)| co * m).sum();
        f(di, si);
        for a in (0..rank).rev() {
            coords[a] += 1;
            if coords[a] < dst_shape[a] {
                break;
            }
            coords[a] = 0;
        }
    }
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Var<S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.borrow().nodes[self.id].data.len()
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Vec<S> {
        self.graph.borrow().nodes[self.id].data.clone()
    }

    /// Value snapshot as a detached tensor.
    pub fn to_tensor(&self) -> Tensor<S> {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is valid")
    }

    pub fn item(&self) -> Result<S> {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single-element var, shape is {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.graph.borrow().nodes[self.id].grad.clone()
    }

    /// Copies this node's gradient into the tensor's grad slot (zeros when
    /// backward never reached the node).
    pub fn write_grad_into(&self, t: &mut Tensor<S>) -> Result<()> {
        let g = self.graph.borrow();
        let n = &g.nodes[self.id];
        if n.shape != t.shape() {
            return Err(Error::shape(
                "write_grad_into",
                format!("node {:?} vs tensor {:?}", n.shape, t.shape()),
            ));
        }
        t.set_grad(n.grad.clone().unwrap_or_else(|| vec![S::zero(); n.data.len()]));
        Ok(())
    }

    /// Handle to the tape this var lives on.
    pub fn tape_handle(&self) -> Tape<S> {
        Tape { graph: Rc::clone(&self.graph) }
    }

    fn same_tape(&self, other: &Var<S>, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.graph, &other.graph) {
            Ok(())
        } else {
            Err(Error::Contract(format!("`{op}` got vars from different tapes")))
        }
    }

    fn tape(&self) -> Tape<S> {
        Tape { graph: Rc::clone(&self.graph) }
    }

    // ── elementwise binary ──

    fn binary(
        &self,
        other: &Var<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: impl Fn(usize, usize) -> Op<S>,
    ) -> Result<Var<S>> {
        self.same_tape(other, name)?;
        let (shape, data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            if a.shape != b.shape {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape, b.shape)));
            }
            let data: Vec<S> = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.needs_grad || b.needs_grad)
        };
        Ok(self.tape().push(shape, data, needs, op(self.id, other.id)))
    }

    pub fn add(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Var<S>) -> Result<Var<S>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    // ── matrix ops ──

    pub fn matmul(&self, other: &Var<S>) -> Result<Var<S>> {
        self.same_tape(other, "matmul")?;
        let (out, needs, m, n) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let b = &g.nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("lhs {:?} vs rhs {:?}", a.shape, b.shape),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (mat_mul(&a.data, &b.data, m, k, n), a.needs_grad || b.needs_grad, m, n)
        };
        Ok(self.tape().push(vec![m, n], out, needs, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<S>> {
        let (shape, data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", a.shape)));
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            (vec![n, m], mat_transpose(&a.data, m, n), a.needs_grad)
        };
        Ok(self.tape().push(shape, data, needs, Op::Transpose(self.id)))
    }

    // ── elementwise unary ──

    fn unary(&self, f: impl Fn(S) -> S, op: Op<S>) -> Var<S> {
        let (shape, data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            (a.shape.clone(), a.data.iter().map(|&x| f(x)).collect(), a.needs_grad)
        };
        self.tape().push(shape, data, needs, op)
    }

    pub fn exp(&self) -> Var<S> {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&self) -> Result<Var<S>> {
        {
            let g = self.graph.borrow();
            if g.nodes[self.id].data.iter().any(|&x| x <= S::zero()) {
                return Err(Error::domain("log", "input has non-positive elements"));
            }
        }
        Ok(self.unary(|x| x.ln(), Op::Log(self.id)))
    }

    /// Square root; inputs must be non-negative.
    pub fn sqrt(&self) -> Result<Var<S>> {
        {
            let g = self.graph.borrow();
            if g.nodes[self.id].data.iter().any(|&x| x < S::zero()) {
                return Err(Error::domain("sqrt", "input has negative elements"));
            }
        }
        Ok(self.unary(|x| x.sqrt(), Op::Sqrt(self.id)))
    }

    pub fn square(&self) -> Var<S> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn relu(&self) -> Var<S> {
        self.unary(|x| if x > S::zero() { x } else { S::zero() }, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<S> {
        self.unary(stable_sigmoid, Op::Sigmoid(self.id))
    }

    pub fn neg(&self) -> Var<S> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, k: f64) -> Var<S> {
        let ks = c::<S>(k);
        self.unary(|x| x * ks, Op::Scale(self.id, ks))
    }

    pub fn add_const(&self, k: f64) -> Var<S> {
        let ks = c::<S>(k);
        self.unary(|x| x + ks, Op::AddConst(self.id, ks))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<S> {
        let (l, h) = (c::<S>(lo), c::<S>(hi));
        self.unary(|x| if x < l { l } else if x > h { h } else { x }, Op::Clamp(self.id, l, h))
    }

    // ── reductions and layout ──

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<S> {
        let (data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            (vec![a.data.iter().copied().sum()], a.needs_grad)
        };
        self.tape().push(vec![1], data, needs, Op::Sum(self.id))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Var<S> {
        let (data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let n = c::<S>(a.data.len() as f64);
            (vec![a.data.iter().copied().sum::<S>() / n], a.needs_grad)
        };
        self.tape().push(vec![1], data, needs, Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<S>> {
        let (data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let numel: usize = shape.iter().product();
            if shape.is_empty() || numel != a.data.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{:?} ({} elems) to {:?}", a.shape, a.data.len(), shape),
                ));
            }
            (a.data.clone(), a.needs_grad)
        };
        Ok(self.tape().push(shape.to_vec(), data, needs, Op::Reshape(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<S>> {
        let (data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            let map = broadcast_strides(&a.shape, shape).ok_or_else(|| {
                Error::shape("broadcast", format!("{:?} cannot expand to {:?}", a.shape, shape))
            })?;
            let numel: usize = shape.iter().product();
            let mut data = vec![S::zero(); numel];
            for_each_broadcast_pair(shape, &map, |di, si| data[di] = a.data[si]);
            (data, a.needs_grad)
        };
        Ok(self.tape().push(shape.to_vec(), data, needs, Op::Broadcast(self.id)))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<S>> {
        let (shape, data, needs) = {
            let g = self.graph.borrow();
            let a = &g.nodes[self.id];
            if axis >= a.shape.len() {
                return Err(Error::shape(
                    "slice",
                    format!("axis {axis} out of range for {:?}", a.shape),
                ));
            }
            if len == 0 || start + len > a.shape[axis] {
                return Err(Error::shape(
                    "slice",
                    format!("range {start}..{} exceeds {:?} on axis {axis}", start + len, a.shape),
                ));
            }
            let (outer, alen, inner) = axis_blocks(&a.shape, axis);
            let mut out_shape = a.shape.clone();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                data.extend_from_slice(&a.data[base..base + len * inner]);
            }
            (out_shape, data, a.needs_grad)
        };
        Ok(self.tape().push(shape, data, needs, Op::Slice { input: self.id, axis, start, len }))
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// `needs_grad` node reachable from this one.
    pub fn backward(&self) -> Result<()> {
        let mut g = self.graph.borrow_mut();
        let loss = &g.nodes[self.id];
        if loss.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, shape is {:?}",
                loss.shape
            )));
        }
        if !loss.needs_grad {
            return Ok(());
        }
        accumulate(&mut g.nodes, self.id, vec![S::one()]);
        for idx in (0..=self.id).rev() {
            if !g.nodes[idx].needs_grad || g.nodes[idx].grad.is_none() {
                continue;
            }
            let op = g.nodes[idx].op.clone();
            let grad = g.nodes[idx].grad.clone().expect("checked above");
            backward_step(&mut g.nodes, idx, &op, &grad);
        }
        Ok(())
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn accumulate<S: Scalar>(nodes: &mut [Node<S>], id: usize, contrib: Vec<S>) {
    debug_assert_eq!(contrib.len(), nodes[id].data.len());
    match &mut nodes[id].grad {
        Some(gr) => {
            for (g, ct) in gr.iter_mut().zip(&contrib) {
                *g += *ct;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_if_needed<S: Scalar>(nodes: &mut [Node<S>], id: usize, contrib: Vec<S>) {
    if nodes[id].needs_grad {
        accumulate(nodes, id, contrib);
    }
}

fn backward_step<S: Scalar>(nodes: &mut [Node<S>], idx: usize, op: &Op<S>, grad: &[S]) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_if_needed(nodes, a, grad.to_vec());
            accumulate_if_needed(nodes, b, grad.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate_if_needed(nodes, a, grad.to_vec());
            accumulate_if_needed(nodes, b, grad.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                let da: Vec<S> = grad.iter().zip(&nodes[b].data).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, a, da);
            }
            if nodes[b].needs_grad {
                let db: Vec<S> = grad.iter().zip(&nodes[a].data).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, b, db);
            }
        }
        Op::Div(a, b) => {
            if nodes[a].needs_grad {
                let da: Vec<S> = grad.iter().zip(&nodes[b].data).map(|(&g, &y)| g / y).collect();
                accumulate(nodes, a, da);
            }
            if nodes[b].needs_grad {
                let db: Vec<S> = grad
                    .iter()
                    .zip(nodes[a].data.iter().zip(&nodes[b].data))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                accumulate(nodes, b, db);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if nodes[a].needs_grad {
                // dA = G @ B^T
                let bt = mat_transpose(&nodes[b].data, k, n);
                let da = mat_mul(grad, &bt, m, n, k);
                accumulate(nodes, a, da);
            }
            if nodes[b].needs_grad {
                // dB = A^T @ G
                let at = mat_transpose(&nodes[a].data, m, k);
                let db = mat_mul(&at, grad, k, m, n);
                accumulate(nodes, b, db);
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (nodes[idx].shape[0], nodes[idx].shape[1]);
            accumulate_if_needed(nodes, a, mat_transpose(grad, n, m));
        }
        Op::Exp(a) => {
            let da: Vec<S> = grad.iter().zip(&nodes[idx].data).map(|(&g, &y)| g * y).collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Log(a) => {
            let da: Vec<S> = grad.iter().zip(&nodes[a].data).map(|(&g, &x)| g / x).collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Sqrt(a) => {
            let half = c::<S>(0.5);
            let da: Vec<S> =
                grad.iter().zip(&nodes[idx].data).map(|(&g, &y)| g * half / y).collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Square(a) => {
            let two = c::<S>(2.0);
            let da: Vec<S> = grad.iter().zip(&nodes[a].data).map(|(&g, &x)| g * two * x).collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Relu(a) => {
            let da: Vec<S> = grad
                .iter()
                .zip(&nodes[a].data)
                .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                .collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Sigmoid(a) => {
            let da: Vec<S> = grad
                .iter()
                .zip(&nodes[idx].data)
                .map(|(&g, &y)| g * y * (S::one() - y))
                .collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Neg(a) => {
            accumulate_if_needed(nodes, a, grad.iter().map(|&g| -g).collect());
        }
        Op::Scale(a, k) => {
            accumulate_if_needed(nodes, a, grad.iter().map(|&g| g * k).collect());
        }
        Op::AddConst(a, _) => {
            accumulate_if_needed(nodes, a, grad.to_vec());
        }
        Op::Clamp(a, lo, hi) => {
            let da: Vec<S> = grad
                .iter()
                .zip(&nodes[a].data)
                .map(|(&g, &x)| if x >= lo && x <= hi { g } else { S::zero() })
                .collect();
            accumulate_if_needed(nodes, a, da);
        }
        Op::Sum(a) => {
            let g0 = grad[0];
            accumulate_if_needed(nodes, a, vec![g0; nodes[a].data.len()]);
        }
        Op::Mean(a) => {
            let n = c::<S>(nodes[a].data.len() as f64);
            let g0 = grad[0] / n;
            accumulate_if_needed(nodes, a, vec![g0; nodes[a].data.len()]);
        }
        Op::Concat { ref inputs, axis } => {
            let (outer, _, inner) = axis_blocks(&nodes[idx].shape, axis);
            let total_axis = nodes[idx].shape[axis];
            let mut offset = 0usize;
            for &pid in inputs {
                let alen = nodes[pid].shape[axis];
                if nodes[pid].needs_grad {
                    let mut dpart = Vec::with_capacity(outer * alen * inner);
                    for o in 0..outer {
                        let base = o * total_axis * inner + offset * inner;
                        dpart.extend_from_slice(&grad[base..base + alen * inner]);
                    }
                    accumulate(nodes, pid, dpart);
                }
                offset += alen;
            }
        }
        Op::Slice { input, axis, start, len } => {
            if nodes[input].needs_grad {
                let (outer, alen, inner) = axis_blocks(&nodes[input].shape, axis);
                let mut dsrc = vec![S::zero(); nodes[input].data.len()];
                for o in 0..outer {
                    let sbase = o * alen * inner + start * inner;
                    let gbase = o * len * inner;
                    for t in 0..len * inner {
                        dsrc[sbase + t] = grad[gbase + t];
                    }
                }
                accumulate(nodes, input, dsrc);
            }
        }
        Op::Broadcast(a) => {
            if nodes[a].needs_grad {
                let map = broadcast_strides(&nodes[a].shape, &nodes[idx].shape)
                    .expect("validated at forward time");
                let mut dsrc = vec![S::zero(); nodes[a].data.len()];
                for_each_broadcast_pair(&nodes[idx].shape, &map, |di, si| dsrc[si] += grad[di]);
                accumulate(nodes, a, dsrc);
            }
        }
        Op::Reshape(a) => {
            accumulate_if_needed(nodes, a, grad.to_vec());
        }
    }
}

// ── named dispatch ──

/// Public operation vocabulary for [`forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardOp {
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    Sum,
    Mean,
    Relu,
    Sigmoid,
    Sqrt,
    Square,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Broadcast { shape: Vec<usize> },
}

/// Applies one named op to the inputs, validating arity.
pub fn forward_op<S: Scalar>(op: &ForwardOp, inputs: &[Var<S>]) -> Result<Var<S>> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() != n {
            Err(Error::Param(format!("{op:?} expects {n} inputs, got {}", inputs.len())))
        } else {
            Ok(())
        }
    };
    match op {
        ForwardOp::Add => {
            arity(2)?;
            inputs[0].add(&inputs[1])
        }
        ForwardOp::Sub => {
            arity(2)?;
            inputs[0].sub(&inputs[1])
        }
        ForwardOp::Mul => {
            arity(2)?;
            inputs[0].mul(&inputs[1])
        }
        ForwardOp::MatMul => {
            arity(2)?;
            inputs[0].matmul(&inputs[1])
        }
        ForwardOp::Exp => {
            arity(1)?;
            Ok(inputs[0].exp())
        }
        ForwardOp::Log => {
            arity(1)?;
            inputs[0].log()
        }
        ForwardOp::Sum => {
            arity(1)?;
            Ok(inputs[0].sum())
        }
        ForwardOp::Mean => {
            arity(1)?;
            Ok(inputs[0].mean())
        }
        ForwardOp::Relu => {
            arity(1)?;
            Ok(inputs[0].relu())
        }
        ForwardOp::Sigmoid => {
            arity(1)?;
            Ok(inputs[0].sigmoid())
        }
        ForwardOp::Sqrt => {
            arity(1)?;
            inputs[0].sqrt()
        }
        ForwardOp::Square => {
            arity(1)?;
            Ok(inputs[0].square())
        }
        ForwardOp::Transpose => {
            arity(1)?;
            inputs[0].transpose()
        }
        ForwardOp::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::Param("concat expects at least one input".into()));
            }
            inputs[0].tape().concat(inputs, *axis)
        }
        ForwardOp::Slice { axis, start, len } => {
            arity(1)?;
            inputs[0].slice(*axis, *start, *len)
        }
        ForwardOp::Broadcast { shape } => {
            arity(1)?;
            inputs[0].broadcast_to(shape)
        }
    }
}

// ── finite differences ──

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must be a deterministic scalar-valued function of the given parameters
/// (fix any sampling noise before calling). Returns the maximum relative
/// error over all parameter coordinates, where the relative error of a pair
/// `(a, d)` is `|a - d| / max(|a|, |d|, 1e-8)`.
pub fn finite_diff_check<S, F>(params: &[Tensor<S>], eps: f64, f: F) -> Result<S>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var<S>]) -> Result<Var<S>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Param(format!("finite-difference eps must be in (0, 1e-2], got {eps}")));
    }
    if params.is_empty() {
        return Err(Error::Param("finite_diff_check needs at least one parameter".into()));
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<S>> = params.iter().map(|p| tape.leaf_as(p, true)).collect();
    let loss = f(&tape, &vars)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.item()?.is_finite() {
        return Err(Error::Numeric("loss is non-finite at the expansion point".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<S>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| v.grad().unwrap_or_else(|| vec![S::zero(); p.numel()]))
        .collect();

    // Forward-only evaluation at perturbed points.
    let eval = |ps: &[Tensor<S>]| -> Result<S> {
        let t = Tape::new();
        let vs: Vec<Var<S>> = ps.iter().map(|p| t.constant(p)).collect();
        let out = f(&t, &vs)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("loss is non-finite at a perturbed point".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<S>> = params.iter().map(|p| p.clone().with_requires_grad(false)).collect();
    let eps_s = c::<S>(eps);
    // Denominator guard for near-zero coordinates: a central difference in
    // f64 carries ~1e-11 of absolute noise, so comparing relatively against
    // anything smaller than ~1e-6 reports noise, not gradient error.
    let floor = c::<S>(1e-6);
    let mut max_rel = S::zero();
    for pi in 0..work.len() {
        for ci in 0..work[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps_s;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps_s;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (up - down) / (c::<S>(2.0) * eps_s);
            let a = analytic[pi][ci];
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = (a - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
