//! Latent factors, covariance factors, hyper-parameters and the log-prior
//! terms shared by every objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::covariance::{make_covariance, Cholesky, CovFactor, CovMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::special::ln_gamma;

/// Standard deviation of the Gaussian used to initialize latent factors.
pub const INIT_FACTOR_SD: f64 = 0.1;
/// Scale of the identity fallback for the global covariance factor.
pub const INIT_COV_FACTOR_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Latent dimension.
    pub d: usize,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub sigma2_w: f64,
    /// Weight of the user covariance in the user-item composition.
    pub lambda: f64,
    /// Inverse-Wishart degrees of freedom for the global covariance.
    pub nu_g: f64,
    /// Inverse-Wishart degrees of freedom for personalized covariances.
    pub nu_p: f64,
    /// Per-aspect weights for the ranking criterion; empty means all ones.
    pub aspect_weights: Vec<f64>,
    pub learning_rate: f64,
    pub sgd_iters_per_em: usize,
    pub samples_per_iter: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d: 13,
            sigma2_u: 1.0,
            sigma2_v: 1.0,
            sigma2_w: 1.0,
            lambda: 0.5,
            nu_g: 50_000.0,
            nu_p: 10.0,
            aspect_weights: Vec::new(),
            learning_rate: 0.03,
            sgd_iters_per_em: 5,
            samples_per_iter: 1000,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d == 0 {
            return bad("latent dimension d must be >= 1".into());
        }
        for (name, v) in [("sigma2_u", self.sigma2_u), ("sigma2_v", self.sigma2_v), ("sigma2_w", self.sigma2_w)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        let min_nu = k as f64 - 1.0;
        if !(self.nu_g > min_nu) || !(self.nu_p > min_nu) {
            return bad(format!("nu_g ({}) and nu_p ({}) must exceed K-1 = {min_nu}", self.nu_g, self.nu_p));
        }
        if !self.aspect_weights.is_empty() {
            if self.aspect_weights.len() != k {
                return bad(format!("{} aspect weights for {k} aspects", self.aspect_weights.len()));
            }
            if self.aspect_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
                return bad("aspect weights must be nonnegative".into());
            }
            if self.aspect_weights.iter().all(|w| *w == 0.0) {
                return bad("aspect weights are all zero".into());
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be nonnegative".into());
        }
        Ok(())
    }

    /// Aspect weights expanded to length `k`.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        if self.aspect_weights.is_empty() {
            vec![1.0; k]
        } else {
            self.aspect_weights.clone()
        }
    }
}

/// User (M×d), item (N×d) and aspect (K×d) factor matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFactors {
    pub u: Matrix,
    pub v: Matrix,
    pub w: Matrix,
}

impl LatentFactors {
    pub fn new(u: Matrix, v: Matrix, w: Matrix) -> Result<Self> {
        let d = u.cols();
        if d == 0 || v.cols() != d || w.cols() != d {
            return Err(Error::DimensionMismatch(format!("factor widths {}, {}, {}", u.cols(), v.cols(), w.cols())));
        }
        if !(u.is_finite() && v.is_finite() && w.is_finite()) {
            return Err(Error::NonFinite("latent factors".into()));
        }
        Ok(LatentFactors { u, v, w })
    }

    pub fn zeros(m: usize, n: usize, k: usize, d: usize) -> Self {
        LatentFactors { u: Matrix::zeros(m, d), v: Matrix::zeros(n, d), w: Matrix::zeros(k, d) }
    }

    /// Entries drawn i.i.d. from `N(0, sd²)`.
    pub fn random<R: Rng + ?Sized>(m: usize, n: usize, k: usize, d: usize, sd: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sd).expect("finite sd");
        let mut draw = |rows| Matrix::from_fn(rows, d, |_, _| normal.sample(rng));
        let u = draw(m);
        let v = draw(n);
        let w = draw(k);
        LatentFactors { u, v, w }
    }

    pub fn num_users(&self) -> usize {
        self.u.rows()
    }

    pub fn num_items(&self) -> usize {
        self.v.rows()
    }

    pub fn num_aspects(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.u.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.w.is_finite()
    }

    /// `(U_u ∘ V_i)·Wᵀ`, the predicted K-vector of aspect ratings.
    pub fn predict_aspect_vector(&self, user: usize, item: usize) -> Result<Vec<f64>> {
        if user >= self.num_users() {
            return Err(Error::IndexOutOfRange { what: "user", index: user, len: self.num_users() });
        }
        if item >= self.num_items() {
            return Err(Error::IndexOutOfRange { what: "item", index: item, len: self.num_items() });
        }
        let mut out = vec![0.0; self.num_aspects()];
        self.predict_into(user, item, &mut out);
        Ok(out)
    }

    /// Unchecked variant of [`Self::predict_aspect_vector`] writing into `out`.
    pub fn predict_into(&self, user: usize, item: usize, out: &mut [f64]) {
        let uu = self.u.row(user);
        let vi = self.v.row(item);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.w.row(k).iter().zip(uu.iter().zip(vi)).map(|(w, (a, b))| w * a * b).sum();
        }
    }

    /// Predicted rating on one aspect.
    pub fn predict_aspect(&self, user: usize, item: usize, aspect: usize) -> f64 {
        self.w.row(aspect).iter().zip(self.u.row(user).iter().zip(self.v.row(item))).map(|(w, (a, b))| w * a * b).sum()
    }
}

fn gaussian_rows_log_prior(m: &Matrix, sigma2: f64) -> f64 {
    let sq: f64 = m.as_slice().iter().map(|v| v * v).sum();
    -0.5 * (sq / sigma2 + (m.rows() * m.cols()) as f64 * sigma2.ln())
}

/// Spherical Gaussian log-priors of U, V and W, without 2π constants.
pub fn log_prior_factors(factors: &LatentFactors, hp: &Hyperparams) -> f64 {
    gaussian_rows_log_prior(&factors.u, hp.sigma2_u)
        + gaussian_rows_log_prior(&factors.v, hp.sigma2_v)
        + gaussian_rows_log_prior(&factors.w, hp.sigma2_w)
}

/// `ln Γ_K(a)`, the multivariate gamma function.
pub fn ln_multivariate_gamma(k: usize, a: f64) -> f64 {
    let kf = k as f64;
    kf * (kf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=k).map(|j| ln_gamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Inverse-Wishart log-density of `Σ` with scale `Ψ` and `ν` degrees of
/// freedom. The trace term enters with a negative sign.
pub fn log_prior_covariance(sigma: &CovMatrix, psi: &CovMatrix, nu: f64) -> Result<f64> {
    InverseWishart::new(psi, nu)?.log_density(sigma)
}

/// An inverse-Wishart prior with its normalizing constant precomputed.
#[derive(Debug, Clone)]
pub struct InverseWishart {
    psi: Matrix,
    nu: f64,
    constant: f64,
}

impl InverseWishart {
    pub fn new(psi: &CovMatrix, nu: f64) -> Result<Self> {
        let k = psi.dim();
        if !(nu > k as f64 - 1.0) {
            return Err(Error::InvalidInput(format!("nu = {nu} must exceed K-1")));
        }
        let psi_chol = Cholesky::try_plain(psi.matrix())
            .ok_or_else(|| Error::DegenerateCovariance("prior scale is not positive definite".into()))?;
        let kf = k as f64;
        let constant =
            0.5 * nu * psi_chol.log_det() - 0.5 * nu * kf * std::f64::consts::LN_2 - ln_multivariate_gamma(k, 0.5 * nu);
        Ok(InverseWishart { psi: psi.matrix().clone(), nu, constant })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn psi(&self) -> &Matrix {
        &self.psi
    }

    fn check_dim(&self, sigma: &Matrix) -> Result<()> {
        if sigma.rows() != self.psi.rows() {
            return Err(Error::DimensionMismatch("prior scale vs covariance".into()));
        }
        Ok(())
    }

    pub fn log_density(&self, sigma: &CovMatrix) -> Result<f64> {
        self.check_dim(sigma.matrix())?;
        let chol = Cholesky::with_jitter(sigma.matrix())?;
        let kf = self.psi.rows() as f64;
        let tr = trace_of_product(&self.psi, &chol.inverse());
        Ok(self.constant - 0.5 * (self.nu + kf + 1.0) * chol.log_det() - 0.5 * tr)
    }

    /// `∂/∂Σ = ½Σ⁻¹ΨΣ⁻¹ − ((ν+K+1)/2)Σ⁻¹`, treating the entries of Σ as
    /// unconstrained.
    pub fn gradient(&self, sigma: &CovMatrix) -> Result<Matrix> {
        self.check_dim(sigma.matrix())?;
        let inv = Cholesky::with_jitter(sigma.matrix())?.inverse();
        let kf = self.psi.rows() as f64;
        let mut g = inv.matmul(&self.psi).matmul(&inv).scaled(0.5);
        g.add_scaled(&inv, -0.5 * (self.nu + kf + 1.0));
        Ok(g)
    }
}

/// `tr(A·B)` without forming the product.
pub fn trace_of_product(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.rows();
    let mut tr = 0.0;
    for r in 0..n {
        for c in 0..a.cols() {
            tr += a[(r, c)] * b[(c, r)];
        }
    }
    tr
}

/// Global, per-user and per-item covariance factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSet {
    pub global: CovFactor,
    pub users: Vec<CovFactor>,
    pub items: Vec<CovFactor>,
}

impl CovarianceSet {
    /// Every personalized factor starts as a copy of the global one.
    pub fn from_global(global: CovFactor, m: usize, n: usize) -> Self {
        CovarianceSet { users: vec![global.clone(); m], items: vec![global.clone(); n], global }
    }

    pub fn dim(&self) -> usize {
        self.global.dim()
    }

    pub fn global_cov(&self) -> CovMatrix {
        make_covariance(&self.global)
    }

    pub fn is_finite(&self) -> bool {
        self.global.matrix().is_finite()
            && self.users.iter().all(|l| l.matrix().is_finite())
            && self.items.iter().all(|l| l.matrix().is_finite())
    }

    pub fn materialize(&self) -> Materialized {
        Materialized {
            global: make_covariance(&self.global),
            users: self.users.iter().map(make_covariance).collect(),
            items: self.items.iter().map(make_covariance).collect(),
        }
    }
}

/// Covariances reconstructed from a [`CovarianceSet`].
#[derive(Debug, Clone)]
pub struct Materialized {
    pub global: CovMatrix,
    pub users: Vec<CovMatrix>,
    pub items: Vec<CovMatrix>,
}

/// Everything a trained model carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub factors: LatentFactors,
    pub covs: CovarianceSet,
}

impl ModelParams {
    /// Latent factors from `N(0, 0.1²)`; the global covariance factor is the
    /// Cholesky factor of `empirical` when it factorizes, else `0.1·I`.
    pub fn init<R: Rng + ?Sized>(
        m: usize,
        n: usize,
        k: usize,
        d: usize,
        empirical: Option<&CovMatrix>,
        rng: &mut R,
    ) -> Self {
        let factors = LatentFactors::random(m, n, k, d, INIT_FACTOR_SD, rng);
        let global = empirical
            .and_then(|s| Cholesky::try_plain(s.matrix()))
            .and_then(|c| CovFactor::new(c.lower().clone()).ok())
            .unwrap_or_else(|| CovFactor::scaled_identity(k, INIT_COV_FACTOR_SCALE));
        ModelParams { factors, covs: CovarianceSet::from_global(global, m, n) }
    }

    pub fn is_finite(&self) -> bool {
        self.factors.is_finite() && self.covs.is_finite()
    }
}
