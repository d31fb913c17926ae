use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a trainable tensor inside a parameter set.
pub type ParamId = usize;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// The fixed primitive set. Every loss in the crate is composed from these.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    /// Softmax over the last axis.
    Softmax,
    /// Log-sum-exp over the last axis; the last axis collapses to size 1.
    LogSumExp,
    /// Sum of every entry into a scalar.
    Sum,
    /// Sum over the last axis; the last axis collapses to size 1.
    SumLast,
    /// Mean of every entry into a scalar.
    Mean,
    ConcatLast,
    /// Adds a `[m]` (or `[1, m]`) row to every row of an `[n, m]` matrix.
    AddRow,
    Transpose,
    Reshape(Vec<usize>),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Softmax => "softmax",
            Primitive::LogSumExp => "log_sum_exp",
            Primitive::Sum => "sum",
            Primitive::SumLast => "sum_last",
            Primitive::Mean => "mean",
            Primitive::ConcatLast => "concat_last",
            Primitive::AddRow => "add_row",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::AddRow => Some(2),
            Primitive::ConcatLast => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Apply { prim: Primitive, inputs: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    /// Adds `other` entrywise; parameters missing on one side count as zero.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (&id, g) in &other.map {
            match self.map.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(id, g.clone());
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn shape_err(prim: &Primitive, shapes: &[&[usize]]) -> Error {
    Error::shape(prim.name(), format!("incompatible shapes {shapes:?}"))
}

fn collapse_last(shape: &[usize]) -> Vec<usize> {
    match shape.split_last() {
        Some((_, lead)) => {
            let mut s = lead.to_vec();
            s.push(1);
            s
        }
        None => vec![1],
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Evaluates `prim` on concrete tensors.
fn forward(prim: &Primitive, xs: &[&Tensor]) -> Result<Tensor> {
    let unary = |f: &dyn Fn(f64) -> f64| {
        let x = xs[0];
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    };
    let out = match prim {
        Primitive::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err(prim, &[sa, sb]));
            }
            Tensor::from_parts(
                vec![sa[0], sb[1]],
                matmul_raw(a.data(), b.data(), sa[0], sa[1], sb[1]),
            )
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(prim, &[a.shape(), b.shape()]));
            }
            let f: fn(f64, f64) -> f64 = match prim {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Primitive::Scale(s) => unary(&|v| v * s),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => {
            if let Some(bad) = xs[0].data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::domain("log", format!("non-positive input {bad}")));
            }
            unary(&f64::ln)
        }
        Primitive::Tanh => unary(&f64::tanh),
        Primitive::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Softplus => unary(&softplus),
        Primitive::Softmax => {
            let x = xs[0];
            let w = x.last_dim();
            let mut data = vec![0.0; x.numel()];
            for (i, out) in data.chunks_mut(w).enumerate() {
                softmax_row(x.row(i), out);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Primitive::LogSumExp => {
            let x = xs[0];
            let data = (0..x.rows()).map(|i| log_sum_exp_row(x.row(i))).collect();
            Tensor::from_parts(collapse_last(x.shape()), data)
        }
        Primitive::Sum => Tensor::scalar(xs[0].data().iter().sum()),
        Primitive::Mean => {
            let x = xs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Primitive::SumLast => {
            let x = xs[0];
            let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
            Tensor::from_parts(collapse_last(x.shape()), data)
        }
        Primitive::ConcatLast => {
            let first = xs
                .first()
                .ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
            let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
            if first.shape().is_empty()
                || xs.iter().any(|x| {
                    x.shape().len() != first.shape().len() || &x.shape()[..lead.len()] != lead
                })
            {
                let shapes: Vec<&[usize]> = xs.iter().map(|x| x.shape()).collect();
                return Err(shape_err(prim, &shapes));
            }
            let width: usize = xs.iter().map(|x| x.last_dim()).sum();
            let rows = first.rows();
            let mut data = Vec::with_capacity(rows * width);
            for i in 0..rows {
                for x in xs {
                    data.extend_from_slice(x.row(i));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::from_parts(shape, data)
        }
        Primitive::AddRow => {
            let (a, r) = (xs[0], xs[1]);
            let m = a.last_dim();
            let row_ok = match r.shape() {
                [k] => *k == m,
                [1, k] => *k == m,
                _ => false,
            };
            if a.shape().len() != 2 || !row_ok {
                return Err(shape_err(prim, &[a.shape(), r.shape()]));
            }
            let data = a
                .data()
                .chunks(m)
                .flat_map(|row| row.iter().zip(r.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Primitive::Transpose => {
            let x = xs[0];
            let [rows, cols] = x.shape() else {
                return Err(shape_err(prim, &[x.shape()]));
            };
            Tensor::from_parts(vec![*cols, *rows], transpose_raw(x.data(), *rows, *cols))
        }
        Primitive::Reshape(shape) => {
            let x = xs[0];
            if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                return Err(shape_err(prim, &[x.shape(), shape]));
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
    };
    if out.data().iter().any(|v| v.is_nan()) {
        return Err(Error::domain(prim.name(), "produced NaN"));
    }
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(Op::Leaf { param: Some(id) }, value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value, false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::contract("variable belongs to a different graph"));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.value(v);
        self.nodes[v.index].requires_grad
    }

    /// Applies a primitive and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let out = forward(&prim, &values)?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Op::Apply { prim, inputs: idx }, out, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumLast, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatLast, parts)
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[a, row])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The tape is left untouched, so repeated calls return identical
    /// gradients. Every trainable leaf on the tape gets an entry, zero-filled
    /// when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf { .. } => grads[i] = Some(g),
                Op::Apply { prim, inputs } => {
                    let xs: Vec<&Tensor> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let local = self.vjp(prim, &xs, &node.value, &g);
                    for (&j, gj) in inputs.iter().zip(local) {
                        if !self.nodes[j].requires_grad {
                            continue;
                        }
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(gj),
                        }
                    }
                }
            }
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => g,
                    None => vec![0.0; node.value.numel()],
                };
                let g = Tensor::from_parts(node.value.shape().to_vec(), g);
                let mut single = Gradients::default();
                single.map.insert(id, g);
                out.accumulate(&single);
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian product: gradient of each input given the output
    /// gradient `g`.
    fn vjp(&self, prim: &Primitive, xs: &[&Tensor], y: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Vec<f64>> {
            let x = xs[0].data();
            vec![x
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&x, &y), &g)| f(x, y, g))
                .collect()]
        };
        match prim {
            Primitive::MatMul => {
                let (a, b) = (xs[0], xs[1]);
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let bt = transpose_raw(b.data(), k, m);
                let at = transpose_raw(a.data(), n, k);
                vec![matmul_raw(g, &bt, n, m, k), matmul_raw(&at, g, k, n, m)]
            }
            Primitive::Add => vec![g.to_vec(), g.to_vec()],
            Primitive::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
            Primitive::Mul => {
                let (a, b) = (xs[0].data(), xs[1].data());
                vec![
                    g.iter().zip(b).map(|(g, b)| g * b).collect(),
                    g.iter().zip(a).map(|(g, a)| g * a).collect(),
                ]
            }
            Primitive::Scale(s) => vec![g.iter().map(|v| v * s).collect()],
            Primitive::Exp => elementwise(&|_, y, g| g * y),
            Primitive::Log => elementwise(&|x, _, g| g / x),
            Primitive::Tanh => elementwise(&|_, y, g| g * (1.0 - y * y)),
            Primitive::Relu => elementwise(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
            Primitive::Softplus => elementwise(&|x, _, g| g * sigmoid(x)),
            Primitive::Softmax => {
                let w = y.last_dim();
                let mut out = vec![0.0; y.numel()];
                for ((o, yr), gr) in out.chunks_mut(w).zip(y.data().chunks(w)).zip(g.chunks(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![out]
            }
            Primitive::LogSumExp => {
                let x = xs[0];
                let w = x.last_dim();
                let mut out = vec![0.0; x.numel()];
                for (i, o) in out.chunks_mut(w).enumerate() {
                    softmax_row(x.row(i), o);
                    o.iter_mut().for_each(|v| *v *= g[i]);
                }
                vec![out]
            }
            Primitive::Sum => vec![vec![g[0]; xs[0].numel()]],
            Primitive::Mean => {
                let n = xs[0].numel();
                vec![vec![g[0] / n as f64; n]]
            }
            Primitive::SumLast => {
                let x = xs[0];
                let w = x.last_dim();
                vec![(0..x.numel()).map(|i| g[i / w]).collect()]
            }
            Primitive::ConcatLast => {
                let width = y.last_dim();
                let rows = y.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for x in xs {
                    let w = x.last_dim();
                    let mut gx = Vec::with_capacity(x.numel());
                    for i in 0..rows {
                        gx.extend_from_slice(&g[i * width + offset..i * width + offset + w]);
                    }
                    offset += w;
                    out.push(gx);
                }
                out
            }
            Primitive::AddRow => {
                let m = xs[0].last_dim();
                let mut grow = vec![0.0; m];
                for chunk in g.chunks(m) {
                    grow.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![g.to_vec(), grow]
            }
            Primitive::Transpose => {
                let (rows, cols) = (xs[0].shape()[0], xs[0].shape()[1]);
                vec![transpose_raw(g, cols, rows)]
            }
            Primitive::Reshape(_) => vec![g.to_vec()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(mat(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 3]));
        let s = g.softmax(x).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_sum_exp_single_element() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.0]));
        let l = g.log_sum_exp(x).unwrap();
        assert_eq!(g.value(l).data(), &[2.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(0, Tensor::vector(vec![3.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.5));
        assert!(g.backward(c).unwrap().is_empty());
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        // d/dz [lse(z) - z_y] = softmax(z) - onehot(y)
        let mut g = Graph::new();
        let z = g.param(0, Tensor::vector(vec![0.0; 4]));
        let onehot = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0, 1.0]));
        let picked = g.mul(z, onehot).unwrap();
        let picked = g.sum(picked).unwrap();
        let lse = g.log_sum_exp(z).unwrap();
        let lse = g.sum(lse).unwrap();
        let loss = g.sub(lse, picked).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected = [0.25, 0.25, 0.25, -0.75];
        for (a, b) in grads.get(0).unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(0, Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_foreign_variable() {
        let mut g1 = Graph::new();
        let g2 = Graph::new();
        let w = g1.param(0, Tensor::scalar(1.0));
        assert!(matches!(g2.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_idempotent() {
        let mut g = Graph::new();
        let w = g.param(0, Tensor::vector(vec![0.3, -1.2]));
        let t = g.tanh(w).unwrap();
        let e = g.exp(t).unwrap();
        let loss = g.sum(e).unwrap();
        let first = g.backward(loss).unwrap();
        let second = g.backward(loss).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(0, Tensor::scalar(2.0));
        let _unused = g.param(1, Tensor::vector(vec![1.0, 1.0]));
        let loss = g.scale(w, 3.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(1).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let w = g.param(0, Tensor::vector(vec![0.0]));
        let r = g.relu(w).unwrap();
        let loss = g.sum(r).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let a = g.param(0, Tensor::scalar(2.0));
        let b = g.param(0, Tensor::scalar(2.0));
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[4.0]);
    }
}
