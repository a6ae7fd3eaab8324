//! Small dense Hermitian/PSD kernels.
//!
//! Every matrix handled by the simulator is at most `N x N` (antennas per AP)
//! or `M x M` (APs), so everything here is dense and allocation-friendly rather
//! than blocked. No routine forms an explicit inverse: every `A^-1 B` goes
//! through [`solve_hpd`].

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative tolerance of the Hermitian symmetry check.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues above `-PSD_CLAMP_TOL * lambda_max` are clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

const ROUND_TRIP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("matrix is not Hermitian (relative deviation {deviation:.3e} exceeds {tolerance:.1e})")]
    NotHermitian { deviation: f64, tolerance: f64 },
    #[error("matrix is indefinite (eigenvalue {min_eigenvalue:.3e} below -{threshold:.3e})")]
    IndefiniteMatrix { min_eigenvalue: f64, threshold: f64 },
    #[error("factorization failed: matrix is singular or not positive definite")]
    SingularMatrix,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("quadrature order {0} outside [1, 256]")]
    InvalidOrder(usize),
}

/// A square complex matrix that equals its conjugate transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    /// Validates symmetry to [`HERMITIAN_TOL`] relative to the largest entry,
    /// then stores the exactly symmetrized matrix.
    pub fn new(m: CMatrix) -> Result<Self, NumericsError> {
        if !m.is_square() {
            return Err(NumericsError::DimensionMismatch {
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        let deviation = hermitian_deviation(&m);
        if deviation > HERMITIAN_TOL {
            return Err(NumericsError::NotHermitian {
                deviation,
                tolerance: HERMITIAN_TOL,
            });
        }
        Ok(Self::from_symmetrized(m))
    }

    /// `(A + A^H) / 2`, Hermitian by construction.
    pub fn from_symmetrized(m: CMatrix) -> Self {
        let adj = m.adjoint();
        let mut h = (m + adj).unscale(2.0);
        for i in 0..h.nrows() {
            h[(i, i)].im = 0.0;
        }
        Self(h)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(CMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim))
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self(CMatrix::from_fn(n, n, |i, j| {
            if i == j {
                Complex64::new(diag[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    pub fn trace_re(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn real_diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)].re).collect()
    }

    /// Ascending real eigenvalues and the matching unitary eigenvector matrix.
    pub fn eigen(&self) -> (DVector<f64>, CMatrix) {
        let eig = self.0.clone().symmetric_eigen();
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        (values, vectors)
    }

    pub fn min_relative_eigenvalue(&self) -> f64 {
        let (values, _) = self.eigen();
        let max_abs = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if max_abs == 0.0 {
            return 0.0;
        }
        values[0] / max_abs
    }

    /// PSD up to the clamping threshold.
    pub fn is_psd(&self) -> bool {
        self.min_relative_eigenvalue() >= -PSD_CLAMP_TOL
    }

    /// Projects onto the PSD cone by zeroing eigenvalues in
    /// `[-PSD_CLAMP_TOL * lambda_max, 0)`. Returns the clamped matrix and the
    /// trace mass removed.
    pub fn clamp_psd(&self) -> Result<(Self, f64), NumericsError> {
        let (values, _) = self.eigen();
        self.clamp_psd_scaled(values.iter().fold(0.0_f64, |a, v| a.max(*v)))
    }

    /// Like [`clamp_psd`](Self::clamp_psd) with the tolerance taken relative to
    /// `scale` instead of this matrix's own largest eigenvalue. Differences of
    /// nearly equal covariances (estimation errors) need the scale of the
    /// operands, since their own spectrum can sit at round-off level.
    pub fn clamp_psd_scaled(&self, scale: f64) -> Result<(Self, f64), NumericsError> {
        let (values, vectors) = self.eigen();
        let threshold = PSD_CLAMP_TOL * scale.max(0.0);
        if values.iter().any(|&v| v < -threshold) {
            return Err(NumericsError::IndefiniteMatrix {
                min_eigenvalue: values[0],
                threshold,
            });
        }
        if values[0] >= 0.0 {
            return Ok((self.clone(), 0.0));
        }
        let removed: f64 = values.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
        let clamped = values.map(|v| v.max(0.0));
        Ok((recompose(&vectors, &clamped), removed))
    }
}

impl Deref for HermitianMatrix {
    type Target = CMatrix;

    fn deref(&self) -> &CMatrix {
        &self.0
    }
}

/// Largest `|a_ij - conj(a_ji)|` relative to the largest entry magnitude.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    let scale = m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()));
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev / scale
}

fn clamp_threshold(values: &DVector<f64>) -> f64 {
    let lambda_max = values.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    PSD_CLAMP_TOL * lambda_max
}

fn recompose(vectors: &CMatrix, values: &DVector<f64>) -> HermitianMatrix {
    let n = vectors.nrows();
    let mut scaled = vectors.clone();
    for c in 0..n {
        let s = values[c];
        scaled.column_mut(c).scale_mut(s);
    }
    HermitianMatrix::from_symmetrized(&scaled * vectors.adjoint())
}

/// Principal square root of a PSD matrix via Hermitian eigendecomposition.
pub fn psd_sqrt(a: &HermitianMatrix) -> Result<HermitianMatrix, NumericsError> {
    let (values, vectors) = a.eigen();
    let threshold = clamp_threshold(&values);
    if values.iter().any(|&v| v < -threshold) {
        return Err(NumericsError::IndefiniteMatrix {
            min_eigenvalue: values[0],
            threshold,
        });
    }
    Ok(recompose(&vectors, &values.map(|v| v.max(0.0).sqrt())))
}

/// Factor `L` with `L L^H = A`, used to draw `N_C(0, A)` samples.
///
/// Positive definite inputs get the lower-triangular Cholesky factor.
/// Rank-deficient inputs fall back to `V_r diag(sqrt(lambda_r))`, a
/// `dim x rank` factor built from the eigenpairs above the clamp threshold.
pub fn chol_sample_factor(a: &HermitianMatrix) -> Result<CMatrix, NumericsError> {
    let norm = a.norm();
    if norm == 0.0 {
        return Ok(CMatrix::zeros(a.dim(), 0));
    }
    if let Some(chol) = a.matrix().clone().cholesky() {
        let l = chol.unpack();
        let err = (&l * l.adjoint() - a.matrix()).norm() / norm;
        if l.iter().all(|z| z.re.is_finite() && z.im.is_finite()) && err < ROUND_TRIP_TOL {
            return Ok(l);
        }
    }
    let (values, vectors) = a.eigen();
    let threshold = clamp_threshold(&values);
    if values.iter().any(|&v| v < -threshold) {
        return Err(NumericsError::IndefiniteMatrix {
            min_eigenvalue: values[0],
            threshold,
        });
    }
    let keep: Vec<usize> = (0..a.dim()).filter(|&i| values[i] > threshold).collect();
    let mut factor = CMatrix::zeros(a.dim(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = values[i].sqrt();
        factor.set_column(c, &vectors.column(i).scale(s));
    }
    Ok(factor)
}

/// Cholesky factorization that rejects matrices that are not positive definite.
///
/// The complex factorization happily takes square roots of negative pivots,
/// so each pivot `l_ii^2` must come out with a positive real part and an
/// imaginary part at rounding level relative to the largest diagonal entry.
pub fn hpd_cholesky(a: CMatrix) -> Option<Cholesky<Complex64, Dyn>> {
    let scale = (0..a.nrows()).map(|i| a[(i, i)].re.abs()).fold(0.0, f64::max);
    let chol = a.cholesky()?;
    let l = chol.l_dirty();
    let ok = (0..l.nrows()).all(|i| {
        let pivot = l[(i, i)] * l[(i, i)];
        pivot.re > 0.0 && pivot.re.is_finite() && pivot.im.abs() <= 1e-12 * scale
    });
    ok.then_some(chol)
}

/// Solves `A X = B` for Hermitian positive definite `A` by Cholesky.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> Result<CMatrix, NumericsError> {
    if a.nrows() != b.nrows() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let chol = hpd_cholesky(a.clone()).ok_or(NumericsError::SingularMatrix)?;
    let x = chol.solve(b);
    if x.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(NumericsError::SingularMatrix);
    }
    Ok(x)
}

pub fn solve_hpd_vec(a: &CMatrix, b: &CVector) -> Result<CVector, NumericsError> {
    if a.nrows() != b.nrows() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let chol = hpd_cholesky(a.clone()).ok_or(NumericsError::SingularMatrix)?;
    let x = chol.solve(b);
    if x.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(NumericsError::SingularMatrix);
    }
    Ok(x)
}

/// `tr(A B)` without forming the product.
pub fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `x^H A y`.
pub fn quad_form(x: &CVector, a: &CMatrix, y: &CVector) -> Complex64 {
    x.dotc(&(a * y))
}

pub fn diag_matrix(diag: &[f64]) -> CMatrix {
    HermitianMatrix::from_real_diagonal(diag).into_inner()
}

/// Gauss-Hermite nodes and weights for `int f(x) exp(-x^2) dx`, ascending.
///
/// Nodes start from the eigenvalues of the Jacobi matrix and are polished by
/// Newton steps on the orthonormal Hermite recurrence, which also yields the
/// weights `2 / H'_n(x)^2` at full relative accuracy.
pub fn gauss_hermite_nodes(order: usize) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    if !(1..=256).contains(&order) {
        return Err(NumericsError::InvalidOrder(order));
    }
    let n = order;
    let nf = n as f64;
    let jacobi = DMatrix::<f64>::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut start: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    start.sort_by(|a, b| a.total_cmp(b));
    let pim4 = std::f64::consts::PI.powf(-0.25);
    // (p_n(z), sqrt(2n) p_{n-1}(z)) for the normalised recurrence
    let eval = |z: f64| {
        let mut p1 = pim4;
        let mut p2 = 0.0;
        for j in 0..n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
        }
        (p1, (2.0 * nf).sqrt() * p2)
    };
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // polish the nonnegative half and mirror it
        let mut z = start[n - 1 - i].abs();
        for _ in 0..8 {
            let (p, dp) = eval(z);
            let step = p / dp;
            if !step.is_finite() || step.abs() > 1e-6 * z.max(1.0) {
                break;
            }
            z -= step;
            if step.abs() <= 1e-16 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, dp) = eval(z);
        x[n - 1 - i] = z;
        x[i] = -z;
        w[i] = 2.0 / (dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
        let (_, dp) = eval(0.0);
        w[n / 2] = 2.0 / (dp * dp);
    }
    Ok((x, w))
}
