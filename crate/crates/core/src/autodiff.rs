//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records primitive operations into an arena as they execute;
//! [`Tape::backward`] walks the record once in reverse creation order
//! (which is a reverse topological order, since operands always precede
//! results) and accumulates adjoints into every node that can influence a
//! requested input. Nodes created with [`Tape::constant`] are pruned from
//! the backward pass.
//!
//! Tapes are single-threaded; distinct tapes are independent. Values are
//! immutable once recorded.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// vector * scalar-node broadcast
    MulScalar(usize, usize),
    /// vector + scalar-node broadcast
    AddScalar(usize, usize),
    MatVec(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// matrix + row-vector broadcast over rows
    AddRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SquaredNorm(usize),
    L2Norm(usize),
    Softmax(usize),
    Tanh(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Reshape(usize),
    Concat(usize, usize, usize),
    Slice(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording arena for one computation graph.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.len() > 0);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, id: nodes.len() - 1 }
    }

    fn check(&self, v: Var, op: &'static str) {
        assert_eq!(v.tape, self.id, "{op}: variable belongs to another tape");
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; pruned from the backward pass.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Scalar constant.
    pub fn constf(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.check(v, "value");
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.check(v, "shape");
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.check(v, "item");
        self.nodes.borrow()[v.id].value.item()
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, bool) {
        self.check(a, op);
        self.check(b, op);
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let value = va.zip_map(vb, f);
        let ng = nodes[a.id].needs_grad || nodes[b.id].needs_grad;
        (value, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (value, ng) = self.binary_same_shape("add", a, b, |x, y| x + y);
        self.push(value, Op::Add(a.id, b.id), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (value, ng) = self.binary_same_shape("sub", a, b, |x, y| x - y);
        self.push(value, Op::Sub(a.id, b.id), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (value, ng) = self.binary_same_shape("mul", a, b, |x, y| x * y);
        self.push(value, Op::Mul(a.id, b.id), ng)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (value, ng) = self.binary_same_shape("div", a, b, |x, y| x / y);
        self.push(value, Op::Div(a.id, b.id), ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.check(a, "scale");
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.scale(c);
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Scale(a.id, c), ng)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Broadcast multiply: every element of `a` times scalar node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        self.check(a, "mul_scalar");
        self.check(s, "mul_scalar");
        let nodes = self.nodes.borrow();
        let sv = &nodes[s.id].value;
        assert_eq!(sv.len(), 1, "mul_scalar: scalar operand has {} elements", sv.len());
        let c = sv.item();
        let value = nodes[a.id].value.scale(c);
        let ng = nodes[a.id].needs_grad || nodes[s.id].needs_grad;
        drop(nodes);
        self.push(value, Op::MulScalar(a.id, s.id), ng)
    }

    /// Broadcast add: every element of `a` plus scalar node `s`.
    pub fn add_scalar(&self, a: Var, s: Var) -> Var {
        self.check(a, "add_scalar");
        self.check(s, "add_scalar");
        let nodes = self.nodes.borrow();
        let sv = &nodes[s.id].value;
        assert_eq!(sv.len(), 1, "add_scalar: scalar operand has {} elements", sv.len());
        let c = sv.item();
        let value = nodes[a.id].value.map(|x| x + c);
        let ng = nodes[a.id].needs_grad || nodes[s.id].needs_grad;
        drop(nodes);
        self.push(value, Op::AddScalar(a.id, s.id), ng)
    }

    pub fn matvec(&self, m: Var, x: Var) -> Var {
        self.check(m, "matvec");
        self.check(x, "matvec");
        let nodes = self.nodes.borrow();
        let value = nodes[m.id].value.matvec(&nodes[x.id].value);
        let ng = nodes[m.id].needs_grad || nodes[x.id].needs_grad;
        drop(nodes);
        self.push(value, Op::MatVec(m.id, x.id), ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.check(a, "matmul");
        self.check(b, "matmul");
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.matmul(&nodes[b.id].value);
        let ng = nodes[a.id].needs_grad || nodes[b.id].needs_grad;
        drop(nodes);
        self.push(value, Op::MatMul(a.id, b.id), ng)
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.check(a, "transpose");
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.transpose();
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Transpose(a.id), ng)
    }

    /// Broadcast add a row vector to every row of a matrix.
    pub fn add_row(&self, m: Var, v: Var) -> Var {
        self.check(m, "add_row");
        self.check(v, "add_row");
        let nodes = self.nodes.borrow();
        let mv = &nodes[m.id].value;
        let vv = &nodes[v.id].value;
        assert_eq!(mv.shape().len(), 2, "add_row: left operand must be rank 2");
        assert_eq!(
            mv.cols(),
            vv.len(),
            "add_row: matrix has {} columns, vector {} elements",
            mv.cols(),
            vv.len()
        );
        let (r, c) = (mv.rows(), mv.cols());
        let mut out = mv.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += vv.at(j);
            }
        }
        let value = Tensor::new(vec![r, c], out);
        let ng = nodes[m.id].needs_grad || nodes[v.id].needs_grad;
        drop(nodes);
        self.push(value, Op::AddRow(m.id, v.id), ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        self.check(a, "sum");
        let nodes = self.nodes.borrow();
        let value = Tensor::scalar(nodes[a.id].value.sum());
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Sum(a.id), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        self.check(a, "mean");
        let nodes = self.nodes.borrow();
        let value = Tensor::scalar(nodes[a.id].value.mean());
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Mean(a.id), ng)
    }

    pub fn squared_norm(&self, a: Var) -> Var {
        self.check(a, "squared_norm");
        let nodes = self.nodes.borrow();
        let value = Tensor::scalar(nodes[a.id].value.squared_norm());
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::SquaredNorm(a.id), ng)
    }

    pub fn l2_norm(&self, a: Var) -> Var {
        self.check(a, "l2_norm");
        let nodes = self.nodes.borrow();
        let value = Tensor::scalar(nodes[a.id].value.norm());
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::L2Norm(a.id), ng)
    }

    /// Numerically stable softmax of a vector (max-shifted internally).
    pub fn softmax(&self, a: Var) -> Var {
        self.check(a, "softmax");
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        assert_eq!(av.shape().len(), 1, "softmax: vector input required");
        let hi = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.data().iter().map(|&x| (x - hi).exp()).collect();
        let z: f64 = exps.iter().sum();
        let value = Tensor::from_vec(exps.iter().map(|e| e / z).collect());
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Softmax(a.id), ng)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, "tanh", |x| x.tanh(), Op::Tanh(a.id))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, "silu", |x| x * sigmoid(x), Op::Silu(a.id))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, Op::Exp(a.id))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, "log", f64::ln, Op::Log(a.id))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt(a.id))
    }

    fn unary(&self, a: Var, op: &'static str, f: impl Fn(f64) -> f64, node_op: Op) -> Var {
        self.check(a, op);
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.map(f);
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, node_op, ng)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        self.check(a, "reshape");
        let nodes = self.nodes.borrow();
        let value = nodes[a.id].value.reshape(shape);
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Reshape(a.id), ng)
    }

    /// Concatenate along `axis` (0 for vectors; 0 or 1 for matrices).
    pub fn concat(&self, a: Var, b: Var, axis: usize) -> Var {
        self.check(a, "concat");
        self.check(b, "concat");
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a.id].value, &nodes[b.id].value);
        let value = match (va.shape().len(), vb.shape().len()) {
            (1, 1) => {
                assert_eq!(axis, 0, "concat: vectors concatenate along axis 0");
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::from_vec(data)
            }
            (2, 2) if axis == 0 => {
                assert_eq!(va.cols(), vb.cols(), "concat: column mismatch");
                let mut data = va.data().to_vec();
                data.extend_from_slice(vb.data());
                Tensor::new(vec![va.rows() + vb.rows(), va.cols()], data)
            }
            (2, 2) if axis == 1 => {
                assert_eq!(va.rows(), vb.rows(), "concat: row mismatch");
                let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut data = Vec::with_capacity(r * (ca + cb));
                for i in 0..r {
                    data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
                }
                Tensor::new(vec![r, ca + cb], data)
            }
            _ => panic!("concat: unsupported ranks {:?} / {:?}", va.shape(), vb.shape()),
        };
        let ng = nodes[a.id].needs_grad || nodes[b.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Concat(a.id, b.id, axis), ng)
    }

    /// Contiguous slice of the flattened data, returned as a vector.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Var {
        self.check(a, "slice");
        let nodes = self.nodes.borrow();
        let av = &nodes[a.id].value;
        assert!(
            start + len <= av.len(),
            "slice: range {}..{} out of bounds for {} elements",
            start,
            start + len,
            av.len()
        );
        let value = Tensor::from_slice(&av.data()[start..start + len]);
        let ng = nodes[a.id].needs_grad;
        drop(nodes);
        self.push(value, Op::Slice(a.id, start, len), ng)
    }

    /// Stack scalar nodes into a vector.
    pub fn stack_scalars(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_scalars: empty input");
        let mut out = parts[0];
        if self.shape(out) != [1] {
            out = self.reshape(out, &[1]);
        }
        for &p in &parts[1..] {
            out = self.concat(out, p, 0);
        }
        out
    }

    /// Inner product helper (sum of elementwise product).
    pub fn dot(&self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Reverse pass from a scalar root. Each node reachable from `root`
    /// receives the adjoint ∂root/∂node; query them via [`Gradients::wrt`].
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root, "backward");
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if root_val.len() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; nodes.len()];
        adj[root.id] = Some(Tensor::filled(root_val.shape(), 1.0));

        // Accumulate `delta` into the adjoint of `pid` if that node matters.
        macro_rules! acc {
            ($pid:expr, $delta:expr) => {{
                let pid = $pid;
                if nodes[pid].needs_grad {
                    let delta = $delta;
                    match &mut adj[pid] {
                        Some(t) => t.add_assign(&delta),
                        slot @ None => *slot = Some(delta),
                    }
                }
            }};
        }

        for id in (0..=root.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let out = &nodes[id].value;
            match &nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(*a, g.clone());
                    acc!(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc!(*a, g.clone());
                    acc!(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc!(*a, g.mul(&nodes[*b].value));
                    acc!(*b, g.mul(&nodes[*a].value));
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    acc!(*a, g.zip_map(bv, |gi, bi| gi / bi));
                    if nodes[*b].needs_grad {
                        let av = &nodes[*a].value;
                        let delta = Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av.data())
                                .zip(bv.data())
                                .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                                .collect(),
                        );
                        acc!(*b, delta);
                    }
                }
                Op::Scale(a, c) => {
                    acc!(*a, g.scale(*c));
                }
                Op::MulScalar(a, s) => {
                    let sv = nodes[*s].value.item();
                    acc!(*a, g.scale(sv));
                    acc!(*s, Tensor::scalar(g.dot(&nodes[*a].value)));
                }
                Op::AddScalar(a, s) => {
                    acc!(*a, g.clone());
                    acc!(*s, Tensor::scalar(g.sum()));
                }
                Op::MatVec(m, x) => {
                    if nodes[*m].needs_grad {
                        acc!(*m, Tensor::outer(&g, &nodes[*x].value));
                    }
                    acc!(*x, nodes[*m].value.matvec_t(&g));
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        acc!(*a, g.matmul(&nodes[*b].value.transpose()));
                    }
                    if nodes[*b].needs_grad {
                        acc!(*b, nodes[*a].value.transpose().matmul(&g));
                    }
                }
                Op::Transpose(a) => {
                    acc!(*a, g.transpose());
                }
                Op::AddRow(m, v) => {
                    acc!(*m, g.clone());
                    if nodes[*v].needs_grad {
                        let (r, c) = (g.rows(), g.cols());
                        let mut col_sum = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                col_sum[j] += g.at2(i, j);
                            }
                        }
                        acc!(*v, Tensor::from_vec(col_sum));
                    }
                }
                Op::Sum(a) => {
                    let gi = g.item();
                    acc!(*a, Tensor::filled(nodes[*a].value.shape(), gi));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len() as f64;
                    let gi = g.item() / n;
                    acc!(*a, Tensor::filled(nodes[*a].value.shape(), gi));
                }
                Op::SquaredNorm(a) => {
                    let gi = g.item();
                    acc!(*a, nodes[*a].value.scale(2.0 * gi));
                }
                Op::L2Norm(a) => {
                    let norm = out.item();
                    // Gradient at the origin is defined as zero.
                    let c = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    acc!(*a, nodes[*a].value.scale(c));
                }
                Op::Softmax(a) => {
                    let s = out;
                    let inner = g.dot(s);
                    acc!(*a, s.zip_map(&g, |si, gi| si * (gi - inner)));
                }
                Op::Tanh(a) => {
                    acc!(*a, g.zip_map(out, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Silu(a) => {
                    let av = &nodes[*a].value;
                    let delta = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .map(|(gi, xi)| {
                                let s = sigmoid(*xi);
                                gi * s * (1.0 + xi * (1.0 - s))
                            })
                            .collect(),
                    );
                    acc!(*a, delta);
                }
                Op::Exp(a) => {
                    acc!(*a, g.mul(out));
                }
                Op::Log(a) => {
                    acc!(*a, g.zip_map(&nodes[*a].value, |gi, xi| gi / xi));
                }
                Op::Sqrt(a) => {
                    acc!(*a, g.zip_map(out, |gi, yi| gi / (2.0 * yi)));
                }
                Op::Reshape(a) => {
                    acc!(*a, g.reshape(nodes[*a].value.shape()));
                }
                Op::Concat(a, b, axis) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    match (va.shape().len(), *axis) {
                        (1, _) | (2, 0) => {
                            let na = va.len();
                            acc!(*a, Tensor::new(va.shape().to_vec(), g.data()[..na].to_vec()));
                            acc!(*b, Tensor::new(vb.shape().to_vec(), g.data()[na..].to_vec()));
                        }
                        (2, 1) => {
                            let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
                            let mut ga = Vec::with_capacity(r * ca);
                            let mut gb = Vec::with_capacity(r * cb);
                            for i in 0..r {
                                let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                                ga.extend_from_slice(&row[..ca]);
                                gb.extend_from_slice(&row[ca..]);
                            }
                            acc!(*a, Tensor::new(vec![r, ca], ga));
                            acc!(*b, Tensor::new(vec![r, cb], gb));
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Slice(a, start, len) => {
                    let av = &nodes[*a].value;
                    let mut scattered = vec![0.0; av.len()];
                    scattered[*start..*start + *len].copy_from_slice(g.data());
                    acc!(*a, Tensor::new(av.shape().to_vec(), scattered));
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, adjoints: adj, shapes })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero tensor if `v` was unreached.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "wrt: variable belongs to another tape");
        match &self.adjoints[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

/// Max relative error between the reverse-mode gradient of `f` and central
/// finite differences with the given step, taken over coordinates of `x0`:
/// `|ad - fd| / max(1e-8, |fd|)`.
pub fn grad_check<F>(f: F, x0: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Var,
{
    assert!(step > 0.0, "grad_check: step must be positive");
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let y = f(&tape, x);
    let grad = tape.backward(y)?.wrt(x);

    let eval = |pt: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.var(pt.clone());
        let out = f(&t, v);
        let val = t.item(out);
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("objective at perturbed point: {val}")));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut hi = x0.clone();
        hi.data_mut()[i] += step;
        let mut lo = x0.clone();
        lo.data_mut()[i] -= step;
        let fd = (eval(&hi)? - eval(&lo)?) / (2.0 * step);
        let rel = (grad.at(i) - fd).abs() / f64::max(1e-8, fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn add_values() {
        let t = Tape::new();
        let a = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.var(Tensor::from_slice(&[3.0, 4.0]));
        assert_eq!(t.value(t.add(a, b)).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tape::new();
        let a = t.var(Tensor::from_slice(&[0.0, 0.0, 0.0]));
        let s = t.value(t.softmax(a));
        for &w in s.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn squared_norm_value() {
        let t = Tape::new();
        let a = t.var(Tensor::from_slice(&[3.0, 4.0]));
        assert_eq!(t.item(t.squared_norm(a)), 25.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        let t = Tape::new();
        let z = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let root = t.sum(t.mul(z, z));
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(z).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unreached_input_is_zero() {
        let t = Tape::new();
        let z = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let c = t.var(Tensor::scalar(5.0));
        let root = t.scale(c, 2.0);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let t = Tape::new();
        let z = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let root = t.mul(z, z);
        assert!(matches!(t.backward(root), Err(crate::Error::NonScalarRoot(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // Reusing y = x*x twice must match a graph where it is built twice.
        let x0 = Tensor::from_slice(&[0.7, -1.3, 2.1]);

        let t = Tape::new();
        let x = t.var(x0.clone());
        let y = t.mul(x, x);
        let root = t.sum(t.add(y, y));
        let g_shared = t.backward(root).unwrap().wrt(x);

        let t2 = Tape::new();
        let x2 = t2.var(x0.clone());
        let y1 = t2.mul(x2, x2);
        let y2 = t2.mul(x2, x2);
        let root2 = t2.sum(t2.add(y1, y2));
        let g_dup = t2.backward(root2).unwrap().wrt(x2);

        assert!(g_shared.max_abs_diff(&g_dup) < 1e-15);
        assert!(g_shared.max_abs_diff(&x0.scale(4.0)) < 1e-15);
    }

    #[test]
    #[should_panic(expected = "add: shape mismatch")]
    fn add_shape_mismatch_names_op() {
        let t = Tape::new();
        let a = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.var(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        t.add(a, b);
    }

    #[test]
    fn grad_check_squared_norm() {
        let x0 = Tensor::from_slice(&[1.0, -1.0]);
        let err = grad_check(|t, x| t.squared_norm(x), &x0, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let x0 = Tensor::from_slice(&[0.3, 0.4]);
        let err = grad_check(|t, _x| t.constf(3.5), &x0, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every registered primitive, wrapped into a scalar through a fixed
    /// random weighting so the full adjoint is exercised.
    #[test]
    fn grad_check_all_primitives() {
        let mut rng = rng::stream_from(42);
        let rand_in = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, lo: f64, hi: f64| {
            Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect())
        };

        // Weighted-sum wrapper: dot against fixed weights makes any output scalar.
        fn scalarize(t: &Tape, out: Var, w: &Tensor) -> Var {
            let flat = t.reshape(out, &[w.len()]);
            let wc = t.constant(w.clone());
            t.dot(flat, wc)
        }

        for trial in 0..4 {
            let x0 = rand_in(&mut rng, 6, -2.0, 2.0);
            let pos = rand_in(&mut rng, 6, 0.5, 2.0);
            let other = rand_in(&mut rng, 6, 0.5, 2.0);
            let x6a = rand_in(&mut rng, 6, -2.0, 2.0);
            let x6b = rand_in(&mut rng, 6, -2.0, 2.0);
            let w6 = rand_in(&mut rng, 6, -1.0, 1.0);
            let mat = Tensor::new(vec![3, 6], (0..18).map(|i| ((i * 7 + trial) % 5) as f64 - 2.0).collect());
            let w3 = rand_in(&mut rng, 3, -1.0, 1.0);
            let w12 = rand_in(&mut rng, 12, -1.0, 1.0);
            let w18 = rand_in(&mut rng, 18, -1.0, 1.0);

            let cases: Vec<(&str, Box<dyn Fn(&Tape, Var) -> Var>, &Tensor, f64)> = vec![
                ("add", Box::new({ let o = other.clone(); let w = w6.clone(); move |t, x| { let b = t.constant(o.clone()); scalarize(t, t.add(x, b), &w) } }), &x0, 1e-6),
                ("sub", Box::new({ let o = other.clone(); let w = w6.clone(); move |t, x| { let b = t.constant(o.clone()); scalarize(t, t.sub(x, b), &w) } }), &x0, 1e-6),
                ("mul", Box::new({ let o = other.clone(); let w = w6.clone(); move |t, x| { let b = t.constant(o.clone()); scalarize(t, t.mul(x, b), &w) } }), &x0, 1e-6),
                ("mul_self", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.mul(x, x), &w) }), &x0, 1e-6),
                ("div", Box::new({ let o = other.clone(); let w = w6.clone(); move |t, x| { let b = t.constant(o.clone()); scalarize(t, t.div(b, x), &w) } }), &pos, 1e-6),
                ("scale", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.scale(x, -1.7), &w) }), &x0, 1e-6),
                ("mul_scalar", Box::new({ let w = w6.clone(); move |t, x| {
                    let s = t.slice(x, 0, 1);
                    scalarize(t, t.mul_scalar(x, s), &w)
                } }), &pos, 1e-6),
                ("add_scalar", Box::new({ let w = w6.clone(); move |t, x| {
                    let s = t.slice(x, 1, 1);
                    scalarize(t, t.add_scalar(x, s), &w)
                } }), &x0, 1e-6),
                ("matvec", Box::new({ let m = mat.clone(); let w = w3.clone(); move |t, x| { let mc = t.constant(m.clone()); scalarize(t, t.matvec(mc, x), &w) } }), &x0, 1e-6),
                ("matvec_wrt_matrix", Box::new(move |t: &Tape, x: Var| {
                    let m = t.reshape(x, &[2, 3]);
                    let v = t.constant(Tensor::from_slice(&[0.5, -1.0, 2.0]));
                    let mv = t.matvec(m, v);
                    scalarize(t, mv, &Tensor::from_slice(&[1.0, -0.5]))
                }), &x6a, 1e-6),
                ("matmul", Box::new({ let w = w18.clone(); move |t, x| {
                    let a = t.reshape(x, &[2, 3]);
                    let b = t.constant(Tensor::new(vec![3, 9], (0..27).map(|i| (i % 4) as f64 - 1.5).collect()));
                    scalarize(t, t.matmul(a, b), &w)
                } }), &x6b, 1e-6),
                ("transpose", Box::new({ let w = w6.clone(); move |t, x| {
                    let m = t.reshape(x, &[2, 3]);
                    scalarize(t, t.transpose(m), &w)
                } }), &x0, 1e-6),
                ("add_row", Box::new({ let w = w6.clone(); move |t, x| {
                    let m = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
                    let v = t.slice(x, 0, 3);
                    scalarize(t, t.add_row(m, v), &w)
                } }), &x0, 1e-6),
                ("add_row_wrt_matrix", Box::new({ let w = w6.clone(); move |t, x| {
                    let m = t.reshape(x, &[2, 3]);
                    let v = t.constant(Tensor::from_slice(&[0.1, 0.2, 0.3]));
                    scalarize(t, t.add_row(m, v), &w)
                } }), &x0, 1e-6),
                ("sum", Box::new(move |t, x| t.sum(x)), &x0, 1e-6),
                ("mean", Box::new(move |t, x| t.mean(x)), &x0, 1e-6),
                ("squared_norm", Box::new(move |t, x| t.squared_norm(x)), &x0, 1e-6),
                ("l2_norm", Box::new(move |t, x| t.l2_norm(x)), &pos, 1e-6),
                ("softmax", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.softmax(x), &w) }), &x0, 1e-6),
                ("tanh", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.tanh(x), &w) }), &x0, 1e-6),
                ("silu", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.silu(x), &w) }), &x0, 1e-6),
                ("exp", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.exp(x), &w) }), &x0, 1e-6),
                ("log", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.log(x), &w) }), &pos, 1e-6),
                ("sqrt", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.sqrt(x), &w) }), &pos, 1e-6),
                ("reshape", Box::new({ let w = w6.clone(); move |t, x| scalarize(t, t.reshape(x, &[2, 3]), &w) }), &x0, 1e-6),
                ("concat", Box::new({ let o = other.clone(); let w = w12.clone(); move |t, x| {
                    let b = t.constant(o.clone());
                    scalarize(t, t.concat(x, b, 0), &w)
                } }), &x0, 1e-6),
                ("concat_axis1", Box::new({ let w = w12.clone(); move |t, x| {
                    let a = t.reshape(x, &[2, 3]);
                    let b = t.constant(Tensor::new(vec![2, 3], vec![1.0, -1.0, 0.5, 0.2, 0.3, -0.7]));
                    scalarize(t, t.concat(a, b, 1), &w)
                } }), &x0, 1e-6),
                ("slice", Box::new({ let w = w3.clone(); move |t, x| scalarize(t, t.slice(x, 2, 3), &w) }), &x0, 1e-6),
            ];

            for (name, f, x, tol) in cases {
                let err = grad_check(f.as_ref(), x, 1e-5).unwrap();
                assert!(err < tol, "primitive {name}: grad_check error {err}");
            }
        }
    }

    #[test]
    fn dot_and_stack_helpers() {
        let t = Tape::new();
        let a = t.var(Tensor::from_slice(&[1.0, 2.0]));
        let b = t.constant(Tensor::from_slice(&[3.0, 4.0]));
        assert_eq!(t.item(t.dot(a, b)), 11.0);
        let s1 = t.sum(a);
        let s2 = t.constf(7.0);
        let stacked = t.stack_scalars(&[s1, s2]);
        assert_eq!(t.value(stacked).data(), &[3.0, 7.0]);
    }
}
