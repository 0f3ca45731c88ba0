//! Log-likelihoods and log-posteriors: pointwise PMTF and pairwise BPMR,
//! each with a global and a personalized covariance variant.

use serde::{Deserialize, Serialize};

use crate::covariance::{Cholesky, CovFactor, CovMatrix};
use crate::data::Observation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{log_prior_factors, CovarianceSet, Hyperparams, InverseWishart, LatentFactors};
use crate::reduce::chunked_sum;
use crate::special::{erfc_hazard, ln_erfc};

/// A user `u` with a preferred item `i`, a comparison item `j` and the
/// masked rating difference `D = R_ui − R_uj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleSample {
    pub u: usize,
    pub i: usize,
    pub j: usize,
    pub d: Vec<f64>,
    pub mask: Vec<bool>,
}

impl TripleSample {
    /// Zeroes masked entries of `d` and rejects uninformative triples.
    pub fn new(u: usize, i: usize, j: usize, mut d: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidInput(format!("triple compares item {i} with itself")));
        }
        if d.len() != mask.len() {
            return Err(Error::DimensionMismatch("difference vs mask".into()));
        }
        for (x, &m) in d.iter_mut().zip(&mask) {
            if !m {
                *x = 0.0;
            }
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("triple difference".into()));
        }
        if d.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidInput("triple difference is zero after masking".into()));
        }
        Ok(TripleSample { u, i, j, d, mask })
    }

    /// The complementary claim: `i` and `j` trade places while `D` is kept,
    /// which negates `μ` and leaves the variance unchanged.
    pub fn reversed(&self) -> TripleSample {
        TripleSample { u: self.u, i: self.j, j: self.i, d: self.d.clone(), mask: self.mask.clone() }
    }
}

/// `D ∘ w`.
pub fn weighted_difference(d: &[f64], w: &[f64]) -> Vec<f64> {
    d.iter().zip(w).map(|(a, b)| a * b).collect()
}

/// `ln(½·erfc(z))` with `z = −μ/(√2·√var)`: the log-probability that the
/// preferred item wins along the direction `D`.
pub fn order_log_prob(mu_dot: f64, var_d: f64) -> Result<f64> {
    if !(var_d > 0.0) || !var_d.is_finite() || !mu_dot.is_finite() {
        return Err(Error::DegenerateVariance { var: var_d, triple: None });
    }
    Ok(ln_erfc(order_z(mu_dot, var_d)) - std::f64::consts::LN_2)
}

#[inline]
pub(crate) fn order_z(mu_dot: f64, var_d: f64) -> f64 {
    -mu_dot / (std::f64::consts::SQRT_2 * var_d.sqrt())
}

/// Per-triple quantities shared by objective and gradient.
pub(crate) struct OrderGeometry {
    /// `D ∘ w`.
    pub dt: Vec<f64>,
    /// `V_i − V_j`.
    pub delta: Vec<f64>,
    /// `(D ∘ w)·W`, a d-vector.
    pub q: Vec<f64>,
    pub mu: f64,
}

pub(crate) fn order_geometry(f: &LatentFactors, t: &TripleSample, w: &[f64]) -> OrderGeometry {
    let dt = weighted_difference(&t.d, w);
    let (vi, vj) = (f.v.row(t.i), f.v.row(t.j));
    let delta: Vec<f64> = vi.iter().zip(vj).map(|(a, b)| a - b).collect();
    let d = f.dim();
    let mut q = vec![0.0; d];
    for (k, &x) in dt.iter().enumerate() {
        if x != 0.0 {
            for (qf, wkf) in q.iter_mut().zip(f.w.row(k)) {
                *qf += x * wkf;
            }
        }
    }
    let mu = f.u.row(t.u).iter().zip(&delta).zip(&q).map(|((u, dl), qq)| u * dl * qq).sum();
    OrderGeometry { dt, delta, q, mu }
}

/// `ln p`, the hazard scale `c` and `s = √var` for one triple.
pub(crate) struct OrderValue {
    pub ln_p: f64,
    pub c: f64,
    pub s: f64,
}

pub(crate) fn order_value(t: &TripleSample, mu: f64, var: f64) -> Result<OrderValue> {
    if !(var > 0.0) || !var.is_finite() || !mu.is_finite() {
        return Err(Error::DegenerateVariance { var, triple: Some((t.u, t.i, t.j)) });
    }
    let z = order_z(mu, var);
    Ok(OrderValue { ln_p: ln_erfc(z) - std::f64::consts::LN_2, c: erfc_hazard(z), s: var.sqrt() })
}

/// Variance of the weighted difference under the personalized composition
/// `2λΣ_u + (1−λ)(Σ_i + Σ_j)`.
pub(crate) fn personalized_triple_var(covs: &[&CovMatrix; 3], lambda: f64, dt: &[f64]) -> f64 {
    2.0 * lambda * covs[0].matrix().quad_form(dt)
        + (1.0 - lambda) * (covs[1].matrix().quad_form(dt) + covs[2].matrix().quad_form(dt))
}

fn check_triples(f: &LatentFactors, triples: &[TripleSample]) -> Result<()> {
    for t in triples {
        if t.u >= f.num_users() || t.i >= f.num_items() || t.j >= f.num_items() {
            return Err(Error::IndexOutOfRange {
                what: "triple entity",
                index: t.u.max(t.i).max(t.j),
                len: f.num_users().min(f.num_items()),
            });
        }
        if t.d.len() != f.num_aspects() {
            return Err(Error::DimensionMismatch("triple length vs K".into()));
        }
    }
    Ok(())
}

fn check_observations(f: &LatentFactors, obs: &[Observation]) -> Result<()> {
    for o in obs {
        if o.user >= f.num_users() {
            return Err(Error::IndexOutOfRange { what: "user", index: o.user, len: f.num_users() });
        }
        if o.item >= f.num_items() {
            return Err(Error::IndexOutOfRange { what: "item", index: o.item, len: f.num_items() });
        }
        if o.ratings.len() != f.num_aspects() {
            return Err(Error::DimensionMismatch("observation length vs K".into()));
        }
    }
    Ok(())
}

/// Sum of order log-probabilities with a single shared covariance.
pub fn bpmr_data_term_global(
    f: &LatentFactors,
    sigma: &CovMatrix,
    triples: &[TripleSample],
    weights: &[f64],
) -> Result<f64> {
    check_triples(f, triples)?;
    chunked_sum(triples, |t| {
        let g = order_geometry(f, t, weights);
        let var = sigma.matrix().quad_form(&g.dt);
        Ok(order_value(t, g.mu, var)?.ln_p)
    })
}

/// Sum of order log-probabilities with per-triple composed covariances.
pub fn bpmr_data_term_personalized(
    f: &LatentFactors,
    users: &[CovMatrix],
    items: &[CovMatrix],
    lambda: f64,
    triples: &[TripleSample],
    weights: &[f64],
) -> Result<f64> {
    check_triples(f, triples)?;
    chunked_sum(triples, |t| {
        let g = order_geometry(f, t, weights);
        let var = personalized_triple_var(&[&users[t.u], &items[t.i], &items[t.j]], lambda, &g.dt);
        Ok(order_value(t, g.mu, var)?.ln_p)
    })
}

/// BPMR log-posterior with the global covariance `Σ_G = L_G L_Gᵀ` used
/// directly as the variance of every difference.
pub fn bpmr_log_posterior_global(
    f: &LatentFactors,
    l_g: &CovFactor,
    triples: &[TripleSample],
    hp: &Hyperparams,
    psi_g: &CovMatrix,
) -> Result<f64> {
    let sigma = crate::covariance::make_covariance(l_g);
    let data = bpmr_data_term_global(f, &sigma, triples, &hp.weights(f.num_aspects()))?;
    let prior = InverseWishart::new(psi_g, hp.nu_g)?.log_density(&sigma)?;
    Ok(data + prior + log_prior_factors(f, hp))
}

/// Sum of inverse-Wishart log-priors over every personalized covariance,
/// all centered on `Ψ_p = ν_p Σ_G`.
pub fn personalized_cov_prior(users: &[CovMatrix], items: &[CovMatrix], sigma_g: &CovMatrix, nu_p: f64) -> Result<f64> {
    let iw = InverseWishart::new(&sigma_g.scaled(nu_p), nu_p)?;
    let mut total = 0.0;
    for s in users.iter().chain(items) {
        total += iw.log_density(s)?;
    }
    Ok(total)
}

/// BPMR log-posterior with personalized user and item covariances.
pub fn bpmr_log_posterior_personalized(
    f: &LatentFactors,
    covs: &CovarianceSet,
    triples: &[TripleSample],
    hp: &Hyperparams,
    sigma_g: &CovMatrix,
) -> Result<f64> {
    check_entities(f, covs)?;
    let mat = covs.materialize();
    let data =
        bpmr_data_term_personalized(f, &mat.users, &mat.items, hp.lambda, triples, &hp.weights(f.num_aspects()))?;
    let prior = personalized_cov_prior(&mat.users, &mat.items, sigma_g, hp.nu_p)?;
    Ok(data + prior + log_prior_factors(f, hp))
}

pub(crate) fn check_entities(f: &LatentFactors, covs: &CovarianceSet) -> Result<()> {
    if covs.users.len() != f.num_users() || covs.items.len() != f.num_items() {
        return Err(Error::DimensionMismatch(format!(
            "{} user and {} item covariances for {} users and {} items",
            covs.users.len(),
            covs.items.len(),
            f.num_users(),
            f.num_items()
        )));
    }
    if covs.dim() != f.num_aspects() {
        return Err(Error::DimensionMismatch("covariance dimension vs K".into()));
    }
    Ok(())
}

/// Masked residual `(r − r̂) ∘ mask`.
pub(crate) fn masked_residual(f: &LatentFactors, o: &Observation) -> Vec<f64> {
    let mut pred = vec![0.0; f.num_aspects()];
    f.predict_into(o.user, o.item, &mut pred);
    o.ratings.iter().zip(&pred).zip(&o.mask).map(|((r, p), &m)| if m { r - p } else { 0.0 }).collect()
}

/// `−½[eᵀS⁻¹e + ln|S|]` for one masked residual.
pub(crate) fn gaussian_term(chol: &Cholesky, e: &[f64]) -> f64 {
    let sol = chol.solve(e);
    let quad: f64 = e.iter().zip(&sol).map(|(a, b)| a * b).sum();
    -0.5 * (quad + chol.log_det())
}

/// Masked Gaussian log-likelihood of the observations under `Σ_G`.
pub fn pmtf_data_term_global(f: &LatentFactors, sigma: &CovMatrix, obs: &[Observation]) -> Result<f64> {
    check_observations(f, obs)?;
    let chol = Cholesky::with_jitter(sigma.matrix())?;
    chunked_sum(obs, |o| Ok(gaussian_term(&chol, &masked_residual(f, o))))
}

pub(crate) fn pair_covariance(users: &[CovMatrix], items: &[CovMatrix], lambda: f64, u: usize, i: usize) -> Matrix {
    let mut s = users[u].matrix().scaled(lambda);
    s.add_scaled(items[i].matrix(), 1.0 - lambda);
    s
}

/// Masked Gaussian log-likelihood under `λΣ_u + (1−λ)Σ_i`.
pub fn pmtf_data_term_personalized(
    f: &LatentFactors,
    users: &[CovMatrix],
    items: &[CovMatrix],
    lambda: f64,
    obs: &[Observation],
) -> Result<f64> {
    check_observations(f, obs)?;
    chunked_sum(obs, |o| {
        let chol = Cholesky::with_jitter(&pair_covariance(users, items, lambda, o.user, o.item))?;
        Ok(gaussian_term(&chol, &masked_residual(f, o)))
    })
}

/// Pointwise PMTF log-posterior with a single global covariance.
pub fn pmtf_log_posterior_global(
    f: &LatentFactors,
    l_g: &CovFactor,
    obs: &[Observation],
    hp: &Hyperparams,
    psi_g: &CovMatrix,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::EmptyDataset("no observations".into()));
    }
    let sigma = crate::covariance::make_covariance(l_g);
    let data = pmtf_data_term_global(f, &sigma, obs)?;
    let prior = InverseWishart::new(psi_g, hp.nu_g)?.log_density(&sigma)?;
    Ok(data + prior + log_prior_factors(f, hp))
}

/// Pointwise PMTF log-posterior with personalized covariances.
pub fn pmtf_log_posterior_personalized(
    f: &LatentFactors,
    covs: &CovarianceSet,
    obs: &[Observation],
    hp: &Hyperparams,
    sigma_g: &CovMatrix,
) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::EmptyDataset("no observations".into()));
    }
    check_entities(f, covs)?;
    let mat = covs.materialize();
    let data = pmtf_data_term_personalized(f, &mat.users, &mat.items, hp.lambda, obs)?;
    let prior = personalized_cov_prior(&mat.users, &mat.items, sigma_g, hp.nu_p)?;
    Ok(data + prior + log_prior_factors(f, hp))
}
