//! Dense row-major tensors and the numerically stable softmax statistics the
//! attention kernels are built on.

mod prng;
mod rope;

pub use prng::{prng_fill, Prng};
pub(crate) use rope::rotate_row;
pub use rope::{rope_apply, RopeConfig};

use std::ops::{Index, IndexMut, Range};

use crate::error::{Error, Result};

/// Build-wide scalar precision. 32-bit unless the `f64` feature is enabled.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// Row-major matrix of [`Scalar`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<Scalar>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} tensor needs {} scalars, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[Scalar]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Scalar] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[Scalar]> {
        // chunks_exact panics on 0, and a 0-column tensor still has `rows` rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn matmul(&self, other: &Tensor2D) -> Result<Tensor2D> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut out = Tensor2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Copies the column range `cols` into a new tensor.
    pub fn columns(&self, cols: Range<usize>) -> Tensor2D {
        assert!(cols.end <= self.cols, "column range out of bounds");
        let width = cols.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[cols.clone()]);
        }
        Tensor2D {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Copies the row range `rows` into a new tensor.
    pub fn slice_rows(&self, rows: Range<usize>) -> Tensor2D {
        assert!(rows.end <= self.rows, "row range out of bounds");
        Tensor2D {
            rows: rows.len(),
            cols: self.cols,
            data: self.data[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }

    /// Writes `src` into this tensor starting at column `start`.
    pub fn set_columns(&mut self, start: usize, src: &Tensor2D) -> Result<()> {
        if src.rows != self.rows || start + src.cols > self.cols {
            return Err(Error::Dimension {
                op: "set_columns",
                left: self.shape(),
                right: src.shape(),
            });
        }
        for i in 0..self.rows {
            let cols = self.cols;
            self.data[i * cols + start..i * cols + start + src.cols].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    /// Stacks tensors vertically. All parts must share a column count.
    pub fn concat_rows(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Appends the rows of `other` in place.
    pub fn append_rows(&mut self, other: &Tensor2D) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            *self = other.clone();
            return Ok(());
        }
        if other.cols != self.cols {
            return Err(Error::Dimension {
                op: "append_rows",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor2D) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs(&self) -> Scalar {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor2D) -> Result<Scalar> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

impl Index<(usize, usize)> for Tensor2D {
    type Output = Scalar;

    fn index(&self, (i, j): (usize, usize)) -> &Scalar {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Tensor2D {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Scalar {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `m + ln Σ exp(x - m)` with `m = max(row)`.
pub fn log_sum_exp(row: &[Scalar]) -> Result<Scalar> {
    let m = row
        .iter()
        .copied()
        .reduce(Scalar::max)
        .ok_or_else(|| Error::domain("log_sum_exp of an empty row"))?;
    let sum: Scalar = row.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Per-cell attendability mask; `true` marks a cell that participates.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} mask needs {} cells, got {}",
                rows * cols,
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Row `i` may see columns `0..=offset + i`.
    pub fn causal(rows: usize, cols: usize, offset: usize) -> Self {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j <= offset + i))
            .collect();
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Row-wise softmax. Masked cells are skipped in both the max and the sum and
/// come out as exactly zero.
pub fn softmax_rows(scores: &Tensor2D, mask: Option<&Mask>) -> Result<Tensor2D> {
    if let Some(m) = mask {
        if m.shape() != scores.shape() {
            return Err(Error::Dimension {
                op: "softmax_rows",
                left: scores.shape(),
                right: m.shape(),
            });
        }
    }
    let keep = |i: usize, j: usize| mask.is_none_or(|m| m.allowed(i, j));
    let mut out = Tensor2D::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let row = scores.row(i);
        let max = (0..scores.cols)
            .filter(|&j| keep(i, j))
            .map(|j| row[j])
            .reduce(Scalar::max)
            .ok_or_else(|| Error::domain(format!("softmax row {i} is fully masked")))?;
        let mut sum = 0.0;
        let out_row = out.row_mut(i);
        for j in 0..scores.cols {
            if keep(i, j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                sum += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
