//! Dense real-matrix kernel: exactly the operations the repetition theory
//! needs (solve, singular values, spectral radius, trace, norms).

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute pivot magnitude below which elimination reports singularity.
pub const PIVOT_TOL: f64 = 1e-12;

/// Off-diagonal orthogonality tolerance for the Jacobi singular value sweeps.
pub const SVD_TOL: f64 = 1e-10;

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major entries; rejects empty shapes and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!("{rows}x{cols} matrix has no entries")));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("{} entries supplied for a {rows}x{cols} matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![T::one(); n])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum()).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    /// `shift * I - self`.
    pub fn shifted_negation(&self, shift: T) -> Self {
        assert!(self.is_square());
        let mut m = self.scale(-T::one());
        for i in 0..self.rows {
            m[(i, i)] += shift;
        }
        m
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|i| self.row(i).iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }

    /// Largest absolute row sum (the induced infinity norm).
    pub fn inf_norm(&self) -> T {
        (0..self.rows).map(|i| self.row(i).iter().map(|v| v.abs()).sum::<T>()).fold(T::zero(), T::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero())
    }

    /// Sum of singular values.
    pub fn nuclear_norm(&self) -> Result<T> {
        Ok(singular_values(self)?.into_iter().sum())
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `A X = C` by Gaussian elimination with partial pivoting.
pub fn solve_linear<T: Real>(a: &Matrix<T>, c: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!("solve needs a square matrix, got {}x{}", n, a.cols())));
    }
    if c.rows() != n {
        return Err(Error::ShapeMismatch(format!("right-hand side has {} rows, expected {n}", c.rows())));
    }
    let m = c.cols();
    let mut lu = a.clone();
    let mut x = c.clone();
    let tol = T::lit(PIVOT_TOL);

    for k in 0..n {
        let (p, pivot) =
            (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot < tol {
            return Err(Error::SingularMatrix { column: k, pivot: pivot.to_f64().unwrap_or(0.0) });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            for j in 0..m {
                x.data.swap(k * m + j, p * m + j);
            }
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            if factor == T::zero() {
                continue;
            }
            lu[(i, k)] = T::zero();
            for j in k + 1..n {
                let v = lu[(k, j)];
                lu[(i, j)] -= factor * v;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= factor * v;
            }
        }
    }

    for k in (0..n).rev() {
        let pivot = lu[(k, k)];
        for j in 0..m {
            let mut acc = x[(k, j)];
            for i in k + 1..n {
                acc -= lu[(k, i)] * x[(i, j)];
            }
            x[(k, j)] = acc / pivot;
        }
    }
    Ok(x)
}

/// Singular values in descending order, `min(rows, cols)` of them.
///
/// One-sided (Hestenes) Jacobi: cyclic plane rotations orthogonalise the
/// columns, which diagonalises `AᵀA` implicitly; the column norms are then the
/// singular values.
pub fn singular_values<T: Real>(a: &Matrix<T>) -> Result<Vec<T>> {
    let work = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let (m, n) = (work.rows(), work.cols());
    // column-major copy so rotations touch contiguous memory
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| (0..m).map(|i| work[(i, j)]).collect()).collect();
    let tol = T::lit(SVD_TOL).max(T::epsilon() * T::lit(8.0));
    let max_sweeps = 100 * n.max(1);
    // rotations against round-off columns of a rank-deficient input never settle
    let floor = T::epsilon() * cols.iter().flatten().map(|&v| v * v).sum::<T>();

    let mut converged = n < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = T::zero();
                    let mut beta = T::zero();
                    let mut gamma = T::zero();
                    for (&x, &y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::ConvergenceFailure { what: "singular value sweeps", iterations: max_sweeps });
    }
    let mut values: Vec<T> = cols.iter().map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    Ok(values)
}

/// Something that can be multiplied into a vector: a dense matrix, or a
/// sparse transition operator that never materialises its square.
pub trait LinearOperator<T: Real> {
    fn dim(&self) -> usize;

    /// `y = A x`.
    fn apply(&self, x: &[T], y: &mut [T]);

    /// Any upper bound on the spectral radius; the maximum absolute row sum is
    /// the canonical choice.
    fn radius_bound(&self) -> T;
}

impl<T: Real> LinearOperator<T> for Matrix<T> {
    fn dim(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }

    fn radius_bound(&self) -> T {
        self.inf_norm()
    }
}

/// Perron root of an entrywise nonnegative operator by shifted power
/// iteration from the all-ones vector.
///
/// The shift by the row-sum bound `s` keeps the iteration aperiodic: for a
/// nonnegative matrix `rho(A + sI) = rho(A) + s`. Stops once the relative
/// residual `|Ax - λx| / (λ|x|)` drops to `tol` (or the absolute residual
/// drops to `tol * s`, which covers a zero Perron root).
pub fn spectral_radius<T: Real, O: LinearOperator<T> + ?Sized>(op: &O, tol: T, max_iter: usize) -> Result<T> {
    let n = op.dim();
    let bound = op.radius_bound();
    if n == 0 || bound == T::zero() {
        return Ok(T::zero());
    }
    let mut x = vec![T::one(); n];
    let mut y = vec![T::zero(); n];
    for _ in 0..max_iter {
        op.apply(&x, &mut y);
        let xx: T = x.iter().map(|&v| v * v).sum();
        let lambda = x.iter().zip(&y).map(|(&a, &b)| a * b).sum::<T>() / xx;
        let resid = x.iter().zip(&y).map(|(&a, &b)| (b - lambda * a).powi(2)).sum::<T>().sqrt();
        let xnorm = xx.sqrt();
        if resid <= tol * lambda.abs() * xnorm || resid <= tol * bound * xnorm {
            return Ok(lambda.max(T::zero()).min(bound));
        }
        let mut peak = T::zero();
        for (xi, &yi) in x.iter_mut().zip(&y) {
            *xi = yi + bound * *xi;
            peak = peak.max(xi.abs());
        }
        for xi in x.iter_mut() {
            *xi /= peak;
        }
    }
    Err(Error::ConvergenceFailure { what: "power iteration", iterations: max_iter })
}

impl<T: Real> Matrix<T> {
    /// Spectral radius of a nonnegative square matrix; see [`spectral_radius`].
    pub fn spectral_radius(&self, tol: T, max_iter: usize) -> Result<T> {
        if !self.is_square() {
            return Err(Error::ShapeMismatch(format!("{}x{} is not square", self.rows, self.cols)));
        }
        if !self.is_nonnegative() {
            return Err(Error::InvalidArgument("spectral radius requires a nonnegative matrix".into()));
        }
        spectral_radius(self, tol, max_iter)
    }
}
