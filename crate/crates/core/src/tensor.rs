//! Dense row-major tensors of real scalars.
//!
//! Storage is always `f64`; [`Precision`] decides whether values are rounded
//! to the nearest `f32` after every operation. Training runs in 32-bit mode,
//! gradient checks in 64-bit mode, and both share one code path.
//!
//! Only vector-over-rows broadcasting exists ([`Tensor::add_row_vector`]).
//! Every other shape disagreement is an [`Error::Shape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working precision of tensor values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn rounded(mut self, precision: Precision) -> Self {
        precision.round_slice(&mut self.data);
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(op, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub(crate) fn matmul_t(&self, ta: bool, other: &Tensor, tb: bool) -> Result<Self> {
        let (ar, ac) = self.dims2("matmul")?;
        let (br, bc) = other.dims2("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: strides describe the row-major buffers above and the
            // output buffer holds exactly m*n elements.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Adds `v` (length = cols) to every row.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Self> {
        let (r, c) = self.dims2("add_row_vector")?;
        if v.data.len() != c || v.shape.len() != 1 {
            return Err(Error::Shape {
                op: "add_row_vector",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&v.data) {
                *o += b;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Self {
        let c = self.cols().max(1);
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Mean over `axis` of a 1-D or 2-D tensor; the axis is removed.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        match (self.shape.len(), axis) {
            (1, 0) => Ok(Self::scalar(self.mean())),
            (2, 0) => {
                let (r, c) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                let inv = if r == 0 { 0.0 } else { 1.0 / r as f64 };
                out.iter_mut().for_each(|o| *o *= inv);
                Ok(Self::vector(out))
            }
            (2, 1) => {
                let c = self.shape[1];
                let inv = if c == 0 { 0.0 } else { 1.0 / c as f64 };
                Ok(Self::vector(
                    self.data.chunks(c.max(1)).map(|r| r.iter().sum::<f64>() * inv).collect(),
                ))
            }
            _ => Err(Error::Shape {
                op: "mean_axis",
                lhs: self.shape.clone(),
                rhs: vec![axis],
            }),
        }
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = join columns),
    /// or 1-D tensors along axis 0.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let nd = first.shape.len();
        let mismatch = |p: &Tensor| Error::Shape {
            op: "concat",
            lhs: first.shape.clone(),
            rhs: p.shape.clone(),
        };
        match (nd, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for p in parts {
                    if p.shape.len() != 1 {
                        return Err(mismatch(p));
                    }
                    data.extend_from_slice(&p.data);
                }
                Ok(Self::vector(data))
            }
            (2, 0) => {
                let c = first.shape[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    if p.shape.len() != 2 || p.shape[1] != c {
                        return Err(mismatch(p));
                    }
                    rows += p.shape[0];
                    data.extend_from_slice(&p.data);
                }
                Ok(Self {
                    shape: vec![rows, c],
                    data,
                })
            }
            (2, 1) => {
                let r = first.shape[0];
                for p in parts {
                    if p.shape.len() != 2 || p.shape[0] != r {
                        return Err(mismatch(p));
                    }
                }
                let total: usize = parts.iter().map(|p| p.shape[1]).sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Ok(Self {
                    shape: vec![r, total],
                    data,
                })
            }
            _ => Err(Error::Shape {
                op: "concat",
                lhs: first.shape.clone(),
                rhs: vec![axis],
            }),
        }
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let r = self.rows();
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Ok(Self { shape, data })
    }
}

/// Constant sparse matrix in coordinate form, used for graph aggregation
/// and pooling (`rows × cols`, entries `(row, col, weight)`).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, weight: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.entries.push((row, col, weight));
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.cols]);
        for &(i, j, w) in &self.entries {
            t.data[i * self.cols + j] += w;
        }
        t
    }

    /// `self · x` for a 2-D `x`.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `selfᵀ · x`.
    pub fn matmul_transposed(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }

    fn apply(&self, x: &Tensor, transposed: bool) -> Result<Tensor> {
        let (inner, outer) = if transposed {
            (self.rows, self.cols)
        } else {
            (self.cols, self.rows)
        };
        if x.shape.len() != 2 || x.shape[0] != inner {
            return Err(Error::Shape {
                op: "spmm",
                lhs: vec![self.rows, self.cols],
                rhs: x.shape.clone(),
            });
        }
        let c = x.shape[1];
        let mut out = vec![0.0; outer * c];
        for &(i, j, w) in &self.entries {
            let (dst, src) = if transposed { (j, i) } else { (i, j) };
            let s = &x.data[src * c..(src + 1) * c];
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(s) {
                *o += w * v;
            }
        }
        Ok(Tensor {
            shape: vec![outer, c],
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0, 0.5], [2.0, -1.0], [0.0, 3.0]]).unwrap();
        let direct = a.matmul(&b).unwrap();
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        assert_eq!(at.matmul_t(true, &b, false).unwrap(), direct);
        assert_eq!(a.matmul_t(false, &bt, true).unwrap(), direct);
        assert_eq!(direct.data(), &[5.0, 7.5, 14.0, 15.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        let err = a.add(&Tensor::zeros(&[3, 2])).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_and_gather() {
        let a = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);
        let r = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(r.gather_rows(&[3, 0]).unwrap().data(), &[4.0, 1.0]);
        assert!(r.gather_rows(&[4]).is_err());
    }

    #[test]
    fn sparse_matches_dense() {
        let mut s = SparseMatrix::new(2, 3);
        s.push(0, 1, 0.5);
        s.push(0, 2, 0.5);
        s.push(1, 0, 2.0);
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(s.matmul(&x).unwrap(), s.to_dense().matmul(&x).unwrap());
        let y = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let dense_t = s.to_dense().transpose().unwrap().matmul(&y).unwrap();
        assert_eq!(s.matmul_transposed(&y).unwrap(), dense_t);
    }

    #[test]
    fn precision_rounding() {
        let x = 0.1_f64;
        assert_eq!(Precision::F64.round(x), x);
        assert_eq!(Precision::F32.round(x), 0.1_f32 as f64);
    }
}
