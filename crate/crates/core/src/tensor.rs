//! Dense row-major `f64` tensors.
//!
//! Most model math here works on 2-D `[batch, width]` tensors; higher-rank
//! shapes only appear for images (`[16, 16, 3]`) and are flattened before
//! they reach a network. Element-wise operations require identical shapes.
//! The only broadcast is [`Tensor::add_row`], which adds a `[width]` vector
//! to every row of a `[batch, width]` tensor.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ..")?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    /// Builds a `[rows.len(), width]` matrix. All rows must share one width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("rows of unequal width"));
        }
        Tensor::new(vec![rows.len(), width], rows.concat())
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    /// Entry `i` along the leading axis, with the trailing shape.
    pub fn entry(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.row(i).to_vec(),
        }
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// View as `[rows, cols]`.
    pub fn as_matrix(&self) -> Tensor {
        if self.shape.len() == 1 {
            return Tensor {
                shape: vec![1, self.shape[0]],
                data: self.data.clone(),
            };
        }
        Tensor {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        axpy(k, &other.data, &mut self.data);
        Ok(())
    }

    /// Adds a `[width]` vector to every row of a `[batch, width]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let w = self.cols();
        if bias.len() != w {
            return Err(Error::shape(format!(
                "row broadcast: bias of {} onto rows of {w}",
                bias.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(w) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Result<Tensor> {
        if factors.len() != self.rows() {
            return Err(Error::shape(format!(
                "row scale: {} factors for {} rows",
                factors.len(),
                self.rows()
            )));
        }
        let w = self.cols();
        let mut out = self.clone();
        for (row, &k) in out.data.chunks_exact_mut(w).zip(factors) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }

    /// `[b, i] x [i, o] -> [b, o]`
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (b, i) = (self.rows(), self.cols());
        let (ri, o) = (rhs.rows(), rhs.cols());
        if i != ri {
            return Err(Error::shape(format!("matmul: [{b}, {i}] x [{ri}, {o}]")));
        }
        let mut out = vec![0.0; b * o];
        matmul_nn(&self.data, &rhs.data, &mut out, b, i, o);
        Ok(Tensor {
            shape: vec![b, o],
            data: out,
        })
    }

    /// `selfᵀ · rhs` for `self: [b, i]`, `rhs: [b, o]`.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (b, i) = (self.rows(), self.cols());
        let (rb, o) = (rhs.rows(), rhs.cols());
        if b != rb {
            return Err(Error::shape(format!("t_matmul: [{b}, {i}]ᵀ x [{rb}, {o}]")));
        }
        let mut out = vec![0.0; i * o];
        matmul_tn(&self.data, &rhs.data, &mut out, b, i, o);
        Ok(Tensor {
            shape: vec![i, o],
            data: out,
        })
    }

    /// `self · rhsᵀ` for `self: [b, o]`, `rhs: [i, o]`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (b, o) = (self.rows(), self.cols());
        let (i, ro) = (rhs.rows(), rhs.cols());
        if o != ro {
            return Err(Error::shape(format!("matmul_t: [{b}, {o}] x [{i}, {ro}]ᵀ")));
        }
        let mut out = vec![0.0; b * i];
        matmul_nt(&self.data, &rhs.data, &mut out, b, o, i);
        Ok(Tensor {
            shape: vec![b, i],
            data: out,
        })
    }

    /// Concatenates 2-D tensors along the trailing axis.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .map(|p| p.rows())
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape("concat: unequal row counts"));
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor {
            shape: vec![rows, width],
            data,
        })
    }

    /// Stacks equal-shape tensors into `[n, ..shape]`.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        if items.iter().any(|t| t.shape != first.shape) {
            return Err(Error::shape("stack: unequal shapes"));
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let data = items.iter().flat_map(|t| t.data.iter().copied()).collect();
        Ok(Tensor { shape, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Splits rows into individual tensors of the trailing shape.
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        (0..self.rows())
            .map(|r| Tensor {
                shape: inner.clone(),
                data: self.row(r).to_vec(),
            })
            .collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-wise squared L2 distance.
    pub fn row_sq_dist(&self, other: &Tensor) -> Result<Vec<f64>> {
        self.check_same(other, "row distance")?;
        let w = self.cols();
        Ok(self
            .data
            .chunks_exact(w)
            .zip(other.data.chunks_exact(w))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect())
    }
}

pub(crate) fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// Row-major `out = A·B` with explicit strides, so transposed operands
/// need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.fill(0.0);
        return;
    }
    // SAFETY: the callers pass slices whose lengths cover the stride patterns
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
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_nn(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    rows: usize,
    inner: usize,
    cols: usize,
) {
    assert!(a.len() >= rows * inner && b.len() >= inner * cols && out.len() >= rows * cols);
    gemm(
        rows,
        inner,
        cols,
        a,
        inner as isize,
        1,
        b,
        cols as isize,
        1,
        out,
    );
}

pub(crate) fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, i: usize, o: usize) {
    assert!(a.len() >= batch * i && b.len() >= batch * o && out.len() >= i * o);
    gemm(i, batch, o, a, 1, i as isize, b, o as isize, 1, out);
}

pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, o: usize, i: usize) {
    assert!(a.len() >= batch * o && b.len() >= i * o && out.len() >= batch * i);
    gemm(batch, o, i, a, o as isize, 1, b, 1, o as isize, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn elementwise_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        let bt = Tensor::new(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]).unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), c);

        let at = Tensor::new(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]).unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), c);
    }

    #[test]
    fn row_broadcast_only_over_batch() {
        let a = Tensor::zeros(&[3, 2]);
        let ok = a.add_row(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(ok.row(2), &[1.0, 2.0]);
        assert!(a.add_row(&Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn concat_and_select() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
        assert_eq!(c.select_rows(&[1, 1]).row(0), &[2.0, 5.0, 6.0]);
    }
}
