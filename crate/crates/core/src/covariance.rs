//! Small dense algebra for K×K aspect covariances.
//!
//! Covariances are always produced from an unconstrained factor `L` as
//! `Σ = L·Lᵀ`, so symmetry and positive semi-definiteness hold by
//! construction. Determinants and inverses go through a Cholesky
//! factorization; when the plain factorization breaks down (a near-singular
//! Σ mid-training) it is retried once on `Σ + εI` with
//! `ε = 1e-8 · max(1, tr(Σ)/K)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Relative tolerance for the symmetry invariant of [`CovMatrix`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative (to the trace) tolerance on negative eigenvalues.
pub const PSD_TOL: f64 = 1e-10;

/// Unconstrained K×K factor `L` of a covariance `Σ = L·Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct CovFactor(Matrix);

impl CovFactor {
    pub fn new(entries: Matrix) -> Result<Self> {
        if !entries.is_square() || entries.rows() == 0 {
            return Err(Error::InvalidInput(format!(
                "covariance factor must be square with dim >= 1, got {}x{}",
                entries.rows(),
                entries.cols()
            )));
        }
        if !entries.is_finite() {
            return Err(Error::InvalidInput("covariance factor has non-finite entries".into()));
        }
        Ok(CovFactor(entries))
    }

    pub fn identity(dim: usize) -> Self {
        CovFactor(Matrix::identity(dim))
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        CovFactor(Matrix::identity(dim).scaled(s))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Mutable access for optimizers. Callers must keep entries finite.
    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }
}

impl TryFrom<Matrix> for CovFactor {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        CovFactor::new(m)
    }
}

impl From<CovFactor> for Matrix {
    fn from(f: CovFactor) -> Matrix {
        f.0
    }
}

/// Symmetric positive semi-definite K×K covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix(Matrix);

impl CovMatrix {
    /// Validates symmetry and positive semi-definiteness.
    pub fn new(entries: Matrix) -> Result<Self> {
        if !entries.is_square() || entries.rows() == 0 {
            return Err(Error::InvalidInput("covariance must be square".into()));
        }
        if !entries.is_finite() {
            return Err(Error::InvalidInput("covariance has non-finite entries".into()));
        }
        let k = entries.rows();
        for a in 0..k {
            for b in 0..a {
                let (x, y) = (entries[(a, b)], entries[(b, a)]);
                if (x - y).abs() > SYMMETRY_TOL * x.abs().max(1.0) {
                    return Err(Error::InvalidInput(format!("covariance is not symmetric at ({a},{b})")));
                }
            }
        }
        let min_eig = entries.symmetric_eigenvalues()[0];
        if min_eig < -PSD_TOL * entries.trace().abs().max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateCovariance(format!(
                "matrix is not positive semi-definite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(CovMatrix(entries))
    }

    /// Wraps a matrix that is PSD by construction (products `LLᵀ`, convex
    /// combinations of covariances). Only symmetry is enforced.
    pub(crate) fn from_trusted(mut entries: Matrix) -> Self {
        let k = entries.rows();
        for a in 0..k {
            for b in 0..a {
                let v = 0.5 * (entries[(a, b)] + entries[(b, a)]);
                entries[(a, b)] = v;
                entries[(b, a)] = v;
            }
        }
        CovMatrix(entries)
    }

    pub fn identity(dim: usize) -> Self {
        CovMatrix(Matrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn scaled(&self, s: f64) -> CovMatrix {
        assert!(s >= 0.0, "covariances scale by nonnegative factors");
        CovMatrix(self.0.scaled(s))
    }
}

/// Correlation matrix: symmetric, unit diagonal, entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix(Matrix);

impl CorrMatrix {
    pub fn new(entries: Matrix) -> Result<Self> {
        if !entries.is_square() {
            return Err(Error::InvalidInput("correlation must be square".into()));
        }
        let k = entries.rows();
        for a in 0..k {
            if entries[(a, a)] != 1.0 {
                return Err(Error::InvalidInput("correlation diagonal must be 1".into()));
            }
            for b in 0..a {
                let (x, y) = (entries[(a, b)], entries[(b, a)]);
                if (x - y).abs() > SYMMETRY_TOL || !x.is_finite() || x.abs() > 1.0 + SYMMETRY_TOL {
                    return Err(Error::InvalidInput(format!("invalid correlation entry at ({a},{b})")));
                }
            }
        }
        Ok(CorrMatrix(entries))
    }

    pub fn identity(dim: usize) -> Self {
        CorrMatrix(Matrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }
}

/// Lower-triangular Cholesky factor of a (possibly jittered) covariance.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
    jitter: f64,
}

impl Cholesky {
    /// Plain factorization with no jitter. Returns `None` when a pivot is not
    /// comfortably positive.
    pub fn try_plain(a: &Matrix) -> Option<Cholesky> {
        Self::factor(a, 0.0)
    }

    fn factor(a: &Matrix, jitter: f64) -> Option<Cholesky> {
        let n = a.rows();
        let max_diag = (0..n).map(|k| a[(k, k)] + jitter).fold(0.0, f64::max);
        if !(max_diag > 0.0) || !max_diag.is_finite() {
            return None;
        }
        let floor = 1e-14 * max_diag;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)] + jitter;
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) || !d.is_finite() {
                return None;
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Some(Cholesky { lower: l, jitter })
    }

    /// Factorizes `Σ`, retrying once on `Σ + εI` if the plain attempt fails.
    pub fn with_jitter(sigma: &Matrix) -> Result<Cholesky> {
        if let Some(c) = Self::try_plain(sigma) {
            return Ok(c);
        }
        let k = sigma.rows() as f64;
        let eps = 1e-8 * (sigma.trace() / k).max(1.0);
        Self::factor(sigma, eps)
            .ok_or_else(|| Error::DegenerateCovariance(format!("matrix is singular even after jitter {eps:e}")))
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Jitter that was added to the diagonal (0 for a plain factorization).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lower.rows();
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.lower.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        // Symmetrize away roundoff.
        for a in 0..n {
            for b in 0..a {
                let v = 0.5 * (inv[(a, b)] + inv[(b, a)]);
                inv[(a, b)] = v;
                inv[(b, a)] = v;
            }
        }
        inv
    }
}

/// `Σ = L·Lᵀ`.
pub fn make_covariance(l: &CovFactor) -> CovMatrix {
    CovMatrix::from_trusted(l.matrix().gram())
}

fn check_dims(a: &CovMatrix, b: &CovMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!("covariances of dim {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `λ·Σu + (1−λ)·Σi`.
pub fn compose_pair_covariance(user: &CovMatrix, item: &CovMatrix, lambda: f64) -> Result<CovMatrix> {
    check_dims(user, item)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut m = user.matrix().scaled(lambda);
    m.add_scaled(item.matrix(), 1.0 - lambda);
    Ok(CovMatrix::from_trusted(m))
}

/// `2λ·Σu + (1−λ)·(Σi + Σj)`, the covariance of a rating-vector difference.
pub fn compose_triple_covariance(
    user: &CovMatrix,
    item: &CovMatrix,
    other: &CovMatrix,
    lambda: f64,
) -> Result<CovMatrix> {
    check_dims(user, item)?;
    check_dims(user, other)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut m = user.matrix().scaled(2.0 * lambda);
    m.add_scaled(item.matrix(), 1.0 - lambda);
    m.add_scaled(other.matrix(), 1.0 - lambda);
    Ok(CovMatrix::from_trusted(m))
}

/// Diagonal of Σ (the per-aspect variances).
pub fn variance_vector(sigma: &CovMatrix) -> Result<Vec<f64>> {
    let d = sigma.matrix().diag();
    if let Some((k, v)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::DegenerateCovariance(format!("variance of aspect {k} is {v}")));
    }
    Ok(d)
}

pub fn correlation_from_covariance(sigma: &CovMatrix) -> Result<CorrMatrix> {
    let var = variance_vector(sigma)?;
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let k = sigma.dim();
    let m = sigma.matrix();
    let rho = Matrix::from_fn(k, k, |a, b| {
        if a == b {
            1.0
        } else {
            // Order the product so that (a, b) and (b, a) round identically.
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            (m[(lo, hi)] / (sd[lo] * sd[hi])).clamp(-1.0, 1.0)
        }
    });
    Ok(CorrMatrix(rho))
}

/// `ln|Σ|` through a (jittered if necessary) Cholesky factorization.
pub fn log_det(sigma: &CovMatrix) -> Result<f64> {
    Ok(Cholesky::with_jitter(sigma.matrix())?.log_det())
}

/// Total correlation of a Gaussian with correlation `ρ`: `−½·ln|ρ|`.
/// No jitter: a singular `ρ` means infinite dependence and is an error.
pub fn gaussian_total_correlation(rho: &CorrMatrix) -> Result<f64> {
    let chol = Cholesky::try_plain(rho.matrix())
        .ok_or_else(|| Error::DegenerateCovariance("correlation matrix is not positive definite".into()))?;
    Ok((-0.5 * chol.log_det()).max(0.0))
}

/// Both sides of the total-correlation lower bound for a covariance:
/// `lhs = −½ ln|ρ|` and `rhs = −½ ln|Σ| + ½ Σ_k ln σ²_k`.
///
/// For Gaussians `|Σ| = |ρ| · Π σ²_k`, so the two agree up to roundoff.
pub fn total_correlation_sides(sigma: &CovMatrix) -> Result<(f64, f64)> {
    let var = variance_vector(sigma)?;
    let rho = correlation_from_covariance(sigma)?;
    let lhs = gaussian_total_correlation(&rho)?;
    let chol = Cholesky::try_plain(sigma.matrix())
        .ok_or_else(|| Error::DegenerateCovariance("covariance is not positive definite".into()))?;
    let rhs = -0.5 * chol.log_det() + 0.5 * var.iter().map(|v| v.ln()).sum::<f64>();
    Ok((lhs, rhs))
}

/// Covariance in which only the first variable correlates with the others:
/// variance `var_y` for variable 0, variances `vars` for the rest and
/// correlations `corr[i]` between variable 0 and variable `i + 1`.
pub fn arrow_covariance(var_y: f64, vars: &[f64], corr: &[f64]) -> Result<CovMatrix> {
    if vars.len() != corr.len() {
        return Err(Error::DimensionMismatch("arrow variances vs correlations".into()));
    }
    let k = vars.len() + 1;
    let sy = var_y.sqrt();
    let mut m = Matrix::zeros(k, k);
    m[(0, 0)] = var_y;
    for (i, (&v, &c)) in vars.iter().zip(corr).enumerate() {
        let off = c * sy * v.sqrt();
        m[(0, i + 1)] = off;
        m[(i + 1, 0)] = off;
        m[(i + 1, i + 1)] = v;
    }
    Ok(CovMatrix::from_trusted(m))
}

/// Closed-form determinant of [`arrow_covariance`]:
/// `var_y · (1 − Σ c²) · Π vars`.
pub fn arrow_determinant(var_y: f64, vars: &[f64], corr: &[f64]) -> f64 {
    let c2: f64 = corr.iter().map(|c| c * c).sum();
    var_y * (1.0 - c2) * vars.iter().product::<f64>()
}

/// Row-major CSV with a header of aspect names and the aspect name leading
/// each row.
pub fn matrix_to_csv(m: &Matrix, names: &[String]) -> String {
    let mut out = String::from("aspect");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for r in 0..m.rows() {
        out.push_str(names.get(r).map_or("", String::as_str));
        for c in 0..m.cols() {
            out.push(',');
            out.push_str(&m[(r, c)].to_string());
        }
        out.push('\n');
    }
    out
}
