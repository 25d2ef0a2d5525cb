//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Because a node
//! can only reference nodes created before it, insertion order is already a
//! topological order, and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_tn, Tensor};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "linear" => Some(Activation::Linear),
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows(NodeId, Vec<f64>),
    Act(NodeId, Activation),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Sum(NodeId),
    SumSquares(NodeId, f64),
    PseudoHuber(NodeId, f64),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node).and_then(Option::as_ref)
    }

    /// Gradient of `node`, or zeros of its shape when the output does not
    /// depend on it.
    pub fn get_or_zero(&self, node: NodeId) -> Tensor {
        self.get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node]))
    }

    pub fn collect(&self, nodes: &[NodeId]) -> Vec<Tensor> {
        nodes.iter().map(|&n| self.get_or_zero(n)).collect()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).scale(k);
        self.push(v, Op::Scale(x, k))
    }

    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x).scale_rows(&factors)?;
        Ok(self.push(v, Op::ScaleRows(x, factors)))
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        if act == Activation::Linear {
            return x;
        }
        let v = self.value(x).map(|z| act.apply(z));
        self.push(v, Op::Act(x, act))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Row lookup into a `[n, width]` table.
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(Error::invalid(format!(
                "row {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let v = t.select_rows(&rows);
        Ok(self.push(v, Op::Gather(table, rows)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `scale * Σ x²`
    pub fn sum_squares(&mut self, x: NodeId, scale: f64) -> NodeId {
        let v = Tensor::scalar(scale * self.value(x).sq_norm());
        self.push(v, Op::SumSquares(x, scale))
    }

    /// Mean over rows of `sqrt(‖r‖² + δ²) − δ`.
    pub fn pseudo_huber(&mut self, x: NodeId, delta: f64) -> NodeId {
        let t = self.value(x);
        let w = t.cols();
        let rows = t.rows();
        let total: f64 = t
            .data()
            .chunks_exact(w)
            .map(|r| (r.iter().map(|v| v * v).sum::<f64>() + delta * delta).sqrt() - delta)
            .sum();
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::PseudoHuber(x, delta),
        )
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let t = self.value(logits);
        if targets.len() != t.rows() {
            return Err(Error::shape(format!(
                "{} targets for {} rows",
                targets.len(),
                t.rows()
            )));
        }
        let k = t.cols();
        if targets.iter().any(|&c| c >= k) {
            return Err(Error::invalid("target class out of range"));
        }
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = t.row(r);
            total += log_sum_exp(row) - row[c];
        }
        let v = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(v, Op::SoftmaxCrossEntropy(logits, targets)))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output + 1];
        grads[output] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (rows, inner, cols) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; rows * inner];
                matmul_nt(g.data(), bv.data(), &mut ga, rows, cols, inner);
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                let mut gb = vec![0.0; inner * cols];
                matmul_tn(av.data(), g.data(), &mut gb, rows, inner, cols);
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone())?;
                let w = g.cols();
                let mut gb = vec![0.0; w];
                for row in g.data().chunks_exact(w) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(self.value(*b))?)?;
                accumulate(grads, *b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.scale(*k))?,
            Op::ScaleRows(x, f) => accumulate(grads, *x, g.scale_rows(f)?)?,
            Op::Act(x, act) => {
                let xv = self.value(*x);
                let gx = g.zip_with(xv, "activation", |gi, xi| gi * act.derivative(xi))?;
                accumulate(grads, *x, gx)?;
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, p, Tensor::new(pv.shape().to_vec(), gp)?)?;
                    offset += w;
                }
            }
            Op::Gather(table, rows) => {
                let tv = self.value(*table);
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &src) in rows.iter().enumerate() {
                    for (acc, v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::SumSquares(x, scale) => {
                let k = 2.0 * scale * g.data()[0];
                accumulate(grads, *x, self.value(*x).scale(k))?;
            }
            Op::PseudoHuber(x, delta) => {
                let xv = self.value(*x);
                let w = xv.cols();
                let n = xv.rows() as f64;
                let upstream = g.data()[0];
                let mut gx = xv.clone();
                for row in gx.data_mut().chunks_exact_mut(w) {
                    let norm = (row.iter().map(|v| v * v).sum::<f64>() + delta * delta).sqrt();
                    let k = upstream / (n * norm);
                    row.iter_mut().for_each(|v| *v *= k);
                }
                accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let n = targets.len() as f64;
                let upstream = g.data()[0];
                let mut gl = lv.clone();
                for (r, &c) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    let lse = log_sum_exp(row);
                    for v in row.iter_mut() {
                        *v = (*v - lse).exp() * upstream / n;
                    }
                    row[c] -= upstream / n;
                    debug_assert_eq!(row.len(), k);
                }
                accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let c = tape.leaf(Tensor::scalar(5.0));
        let y = tape.sum(c);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zero(x).data(), &[0.0]);
    }

    #[test]
    fn rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // y = sum(x*x + 3x) -> dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let s = tape.add(sq, lin).unwrap();
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap());
        let y = tape.softmax_cross_entropy(l, vec![1]).unwrap();
        let g = tape.backward(y).unwrap();
        let s: f64 = g.get(l).unwrap().sum();
        assert!(s.abs() < 1e-15);
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(x)).abs() < 1e-9);
        }
    }
}
