//! Dense row-major matrices, parameter blocks with gradients, plain SGD and
//! a central-difference gradient checker.
//!
//! Every kernel accumulates in a fixed order (row-major, left to right over
//! the shared dimension) so identical inputs give bit-identical outputs.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Minimum number of coordinates probed by [`finite_diff_check`] (all of them
/// when the parameter set is smaller).
pub const FD_MIN_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (i, r.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-column matrix has no meaningful rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Appends the rows of `other` below `self`.
    pub fn append_rows(&mut self, other: &Matrix) -> Result<()> {
        if other.cols != self.cols && self.rows > 0 {
            return Err(Error::Dimension {
                op: "append_rows",
                left: self.shape(),
                right: other.shape(),
            });
        }
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copy of the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Adds `bias` (a `1 × cols` row) to every row.
    pub fn add_row_vector(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension {
                op: "add_row_vector",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let cols = self.cols;
        for row in self.data.chunks_exact_mut(cols.max(1)) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// Column sums as a `1 × cols` row.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.row_iter() {
            for (o, x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }
}

/// Matrix product `a · b`.
///
/// Each output entry is accumulated over the shared index in ascending order.
/// Zero entries of `a` contribute nothing and are skipped; on finite inputs
/// this leaves every sum unchanged.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, (a.cols, 1), &b.data, (b.cols, 1), &mut out.data);
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(a.cols, a.rows, b.cols, &a.data, (1, a.cols), &b.data, (b.cols, 1), &mut out.data);
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, &a.data, (a.cols, 1), &b.data, (1, b.cols), &mut out.data);
    Ok(out)
}

/// `out (m×n) = a (m×k) · b (k×n)`, with `(row, col)` strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    debug_assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the assertions above bound every index dgemm touches for the
    // given shapes and strides; `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Backward of [`relu`]: passes `upstream` where `x > 0`, zero elsewhere
/// (the subgradient at 0 is taken as 0).
pub fn relu_grad(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension {
            op: "relu_grad",
            left: x.shape(),
            right: upstream.shape(),
        });
    }
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamBlock {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }

    /// Appends rows to the value, with zero gradient rows alongside.
    pub fn append_rows(&mut self, rows: &Matrix) -> Result<()> {
        self.value.append_rows(rows)?;
        self.grad
            .append_rows(&Matrix::zeros(rows.rows, rows.cols))?;
        Ok(())
    }
}

/// `value ← value − lr · grad`, then zeroes the gradient.
pub fn sgd_step(param: &mut ParamBlock, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (v, g) in param.value.data.iter_mut().zip(param.grad.data.iter_mut()) {
        *v -= lr * *g;
        *g = 0.0;
    }
    Ok(())
}

/// Anything exposing an ordered list of parameter blocks.
pub trait ParamSet {
    fn param_blocks(&self) -> Vec<&ParamBlock>;
    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grads(&mut self) {
        for p in self.param_blocks_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|p| p.len()).sum()
    }
}

impl ParamSet for ParamBlock {
    fn param_blocks(&self) -> Vec<&ParamBlock> {
        vec![self]
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        vec![self]
    }
}

/// Compares the analytic gradients already stored in `state` with central
/// differences of `loss_fn` and returns the worst
/// `|analytic − numeric| / max(1, |numeric|)` over the probed coordinates.
///
/// At least [`FD_MIN_COORDS`] coordinates are probed (every coordinate when
/// there are fewer), chosen by `rng`. Parameter values are restored exactly.
pub fn finite_diff_check<S, F, R>(loss_fn: F, state: &mut S, epsilon: f64, rng: &mut R) -> Result<f64>
where
    S: ParamSet,
    F: Fn(&S) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let sizes: Vec<usize> = state.param_blocks().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= FD_MIN_COORDS {
        (0..total).collect()
    } else {
        let mut v = index::sample(rng, total, FD_MIN_COORDS).into_vec();
        v.sort_unstable();
        v
    };

    let mut worst = 0.0f64;
    for flat in picks {
        let (block, offset) = locate(&sizes, flat);
        let (original, analytic) = {
            let blocks = state.param_blocks();
            (blocks[block].value.data[offset], blocks[block].grad.data[offset])
        };
        let probe = |v: f64, state: &mut S| -> Result<f64> {
            state.param_blocks_mut()[block].value.data[offset] = v;
            let l = loss_fn(state)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {l} while probing coordinate {flat}")));
            }
            Ok(l)
        };
        let plus = probe(original + epsilon, state);
        let minus = probe(original - epsilon, state);
        state.param_blocks_mut()[block].value.data[offset] = original;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("coordinate beyond parameter count")
}
