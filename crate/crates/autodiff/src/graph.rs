//! Define-by-run tape.
//!
//! Every operation appends a node holding its forward value; nodes only ever
//! reference earlier nodes, so the node vector is already in topological
//! order and `backward` is a single reverse sweep.

use crate::error::{Result, TensorError};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Neg,
    Square,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Parameter leaves bound onto one graph, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The tape: an append-only list of nodes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of `v`; meant for scalars.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding a copy of `t`; it is differentiable when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf(None),
            t.requires_grad,
        )
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Constant, false))
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Var {
        self.push(data.to_vec(), vec![data.len()], Op::Constant, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Vec::new(), Op::Constant, false)
    }

    /// Binds every tensor of `params` as a leaf; `backward_into` writes their gradients back.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        Bound(
            params
                .iter()
                .map(|(id, _, t)| {
                    self.push(
                        t.data().to_vec(),
                        t.shape().to_vec(),
                        Op::Leaf(Some(id)),
                        t.requires_grad,
                    )
                })
                .collect(),
        )
    }

    /// Value-identical copy with no history. Gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Constant, false)
    }

    // ---- elementwise binary ----

    /// Output shape for a broadcasting binary op. The smaller operand must be
    /// a scalar or a suffix of the larger shape, so `i % len` indexes it.
    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(sa.clone());
        }
        let (na, nb) = (numel(sa), numel(sb));
        let suffix = |big: &[usize], small: &[usize]| {
            small.len() <= big.len() && big[big.len() - small.len()..] == *small
        };
        if nb == 1 || (na >= nb && suffix(sa, sb)) {
            Ok(sa.clone())
        } else if na == 1 || suffix(sb, sa) {
            Ok(sb.clone())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.broadcast(name, a, b)?;
        let n = numel(&shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (la, lb) = (va.len(), vb.len());
        let value = (0..n).map(|i| f(va[i % la], vb[i % lb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, shape, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ---- linear algebra ----

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
            ([k], [k2, n]) if k == k2 => (1, *k, *n, vec![*n]),
            _ => return Err(mismatch()),
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &va[i * k..(i + 1) * k];
            let out = &mut value[i * n..(i + 1) * n];
            for (p, &av) in row.iter().enumerate() {
                let brow = &vb[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, out_shape, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let [rows, cols] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        };
        let va = &self.nodes[a.0].value;
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                value[c * rows + r] = va[r * cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, vec![cols, rows], Op::Transpose { a, rows, cols }, rg))
    }

    // ---- unary ----

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64, Unary) -> f64 = |x, k| match k {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        };
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| f(x, kind)).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        self.push(value, shape, Op::Unary(a, kind), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Unary::AddScalar(c))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    // ---- reductions and reshaping ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], Vec::new(), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![m], Vec::new(), Op::Mean(a), rg))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty("concat"));
        }
        let mut value = Vec::new();
        let mut rg = false;
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.rg(*p);
        }
        let len = value.len();
        Ok(self.push(value, vec![len], Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous flat range `start..start + len` as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let end = start + len;
        if end > v.len() {
            return Err(TensorError::OutOfRange {
                op: "slice",
                start,
                end,
                len: v.len(),
            });
        }
        let value = v[start..end].to_vec();
        let rg = self.rg(a);
        Ok(self.push(value, vec![len], Op::Slice { a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if numel(shape) != v.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: v.len(),
            });
        }
        let value = v.clone();
        let rg = self.rg(a);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(a), rg))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and accumulates leaf gradients into the bound parameters.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, params);
        Ok(grads)
    }

    pub fn accumulate(&self, grads: &Gradients, params: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(id)) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    params.get_mut(id).accumulate_grad(g);
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        // Broadcast reduction: the smaller operand collects at `j % len`.
        let reduce = |slot: &mut [f64], f: &dyn Fn(usize) -> f64| {
            let len = slot.len();
            for j in 0..g.len() {
                slot[j % len] += f(j);
            }
        };
        match &node.op {
            Op::Leaf(_) | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| reduce(s, &|j| g[j]));
                acc(*b, &mut |s| reduce(s, &|j| g[j]));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| reduce(s, &|j| g[j]));
                acc(*b, &mut |s| reduce(s, &|j| -g[j]));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (la, lb) = (va.len(), vb.len());
                acc(*a, &mut |s| reduce(s, &|j| g[j] * vb[j % lb]));
                acc(*b, &mut |s| reduce(s, &|j| g[j] * va[j % la]));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            s[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = va[r * k + p];
                            let srow = &mut s[p * n..(p + 1) * n];
                            for (o, gv) in srow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*a, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                let kind = *kind;
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        let d = match kind {
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Tanh => 1.0 - y[j] * y[j],
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / x[j],
                            Unary::Softplus => sigmoid(x[j]),
                            Unary::Neg => -1.0,
                            Unary::Square => 2.0 * x[j],
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Clamp(lo, hi) => {
                                if x[j] >= lo && x[j] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        s[j] += g[j] * d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => acc(*a, &mut |s| {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += c);
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(v, gv)| *v += gv)
                    });
                    offset += len;
                }
            }
            Op::Slice { a, start } => {
                let start = *start;
                acc(*a, &mut |s| {
                    s[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(v, gv)| *v += gv)
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(v, gv)| *v += gv)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 1], vec![0.0; 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 1]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_mismatch() {
        let mut g = Graph::new();
        let a = g.constant_vec(&[1.0, 2.0, 3.0]);
        let b = g.constant_vec(&[1.0, 2.0]);
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant_scalar(0.0);
        let s = g.sigmoid(x);
        assert_eq!(g.scalar(s), 0.5);
    }

    #[test]
    fn log_exp_inverse() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[-1.0, 0.0, 2.0]);
        let e = g.exp(x);
        let l = g.log(e);
        for (a, b) in g.value(l).iter().zip([-1.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_sum_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(vec![0.0, 0.0]).with_grad());
        let s = g.sigmoid(w);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.25, 0.25]);
    }

    #[test]
    fn detach_blocks_one_factor() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(2.0).with_grad());
        let d = g.detach(x);
        assert_eq!(g.value(d), g.value(x));
        let y = g.mul(d, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn detach_constant_is_identity() {
        let mut g = Graph::new();
        let c = g.constant_vec(&[1.5, -2.0]);
        let d = g.detach(c);
        assert_eq!(g.value(c), g.value(d));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::scalar(1.0));
        let b = params.add("b", Tensor::scalar(5.0));
        params.zero_grad();
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let l = g.square(bound[a]);
        g.backward_into(l, &mut params).unwrap();
        assert_eq!(params.get(a).grad().unwrap(), &[2.0]);
        assert_eq!(params.get(b).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let bound = g.bind(&params);
        let l = g.square(bound[a]);
        g.backward_into(l, &mut params).unwrap();
        g.backward_into(l, &mut params).unwrap();
        assert_eq!(params.get(a).grad().unwrap(), &[12.0]);
        params.zero_grad();
        assert_eq!(params.get(a).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn scalar_and_row_broadcast() {
        let mut g = Graph::new();
        let m = g
            .leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().with_grad());
        let row = g.leaf(&Tensor::vector(vec![10.0, 20.0, 30.0]).with_grad());
        let s = g.leaf(&Tensor::scalar(2.0).with_grad());
        let a = g.add(m, row).unwrap();
        assert_eq!(g.value(a), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let b = g.mul(s, a).unwrap();
        let l = g.sum(b);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(row).unwrap(), &[4.0, 4.0, 4.0]);
        assert_eq!(grads.get(s).unwrap(), &[141.0]);
        assert_eq!(grads.get(m).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn concat_slice_reshape_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = g.leaf(&Tensor::vector(vec![3.0]).with_grad());
        let c = g.concat(&[a, b]).unwrap();
        let r = g.reshape(c, &[3, 1]).unwrap();
        let s = g.slice(r, 1, 2).unwrap();
        assert_eq!(g.value(s), &[2.0, 3.0]);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0]);
        assert!(g.slice(a, 1, 2).is_err());
    }

    #[test]
    fn clamp_gradient_vanishes_outside() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![-20.0, 0.5, 20.0]).with_grad());
        let c = g.clamp(x, -12.0, 12.0);
        assert_eq!(g.value(c), &[-12.0, 0.5, 12.0]);
        let l = g.sum(c);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::new();
        let x = g.constant_vec(&[-800.0, 0.0, 800.0]);
        let s = g.softplus(x);
        let v = g.value(s);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v[2], 800.0);
    }
}
