//! Pointwise PTF and single-aspect BPR baselines on the same CP predictor.

use serde::{Deserialize, Serialize};

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::gradients::{pairwise_factor_grad, pointwise_factor_grad, GradOptions, GradientBundle};
use crate::model::{log_prior_factors, Hyperparams, LatentFactors};
use crate::objectives::{OrderGeometry, TripleSample};
use crate::reduce::chunked_sum;
use crate::special::{ln_sigmoid, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Ptf,
    Bpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Aspect ranked by BPR; aspect 0 is the overall rating.
    pub aspect: usize,
    /// Observation noise variance for PTF.
    pub noise_sigma2: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { kind: BaselineKind::Ptf, aspect: 0, noise_sigma2: 1.0 }
    }
}

impl BaselineConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.aspect >= k {
            return Err(Error::IndexOutOfRange { what: "aspect", index: self.aspect, len: k });
        }
        if !(self.noise_sigma2 > 0.0) || !self.noise_sigma2.is_finite() {
            return Err(Error::InvalidInput("noise_sigma2 must be positive".into()));
        }
        Ok(())
    }
}

/// User `u` prefers item `i` over item `j` on one aspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub u: usize,
    pub i: usize,
    pub j: usize,
}

/// Projects multi-aspect triples onto one aspect, orienting each pair by
/// the sign of the difference. Ties and masked aspects are dropped.
pub fn pairs_from_triples(triples: &[TripleSample], aspect: usize) -> Vec<PairSample> {
    triples
        .iter()
        .filter(|t| t.mask.get(aspect).copied().unwrap_or(false))
        .filter_map(|t| {
            let d = t.d[aspect];
            if d > 0.0 {
                Some(PairSample { u: t.u, i: t.i, j: t.j })
            } else if d < 0.0 {
                Some(PairSample { u: t.u, i: t.j, j: t.i })
            } else {
                None
            }
        })
        .collect()
}

/// `Σ ln N(r | r̂, σ²)` over every observed aspect rating.
pub fn ptf_data_term(f: &LatentFactors, obs: &[Observation], sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidInput("noise variance must be positive".into()));
    }
    let ln_norm = (2.0 * std::f64::consts::PI * sigma2).ln();
    chunked_sum(obs, |o| {
        let mut s = 0.0;
        for (k, (&r, &m)) in o.ratings.iter().zip(&o.mask).enumerate() {
            if m {
                let e = r - f.predict_aspect(o.user, o.item, k);
                s += -0.5 * (e * e / sigma2 + ln_norm);
            }
        }
        Ok(s)
    })
}

pub fn ptf_objective(f: &LatentFactors, obs: &[Observation], sigma2: f64, hp: &Hyperparams) -> Result<f64> {
    Ok(ptf_data_term(f, obs, sigma2)? + log_prior_factors(f, hp))
}

pub fn ptf_grad(
    f: &LatentFactors,
    obs: &[Observation],
    sigma2: f64,
    hp: &Hyperparams,
    opts: GradOptions,
) -> Result<GradientBundle> {
    pointwise_factor_grad(f, obs, hp, opts, |o| {
        (0..o.ratings.len())
            .map(|k| if o.mask[k] { (o.ratings[k] - f.predict_aspect(o.user, o.item, k)) / sigma2 } else { 0.0 })
            .collect()
    })
}

fn pair_geometry(f: &LatentFactors, p: &PairSample, aspect: usize) -> OrderGeometry {
    let k = f.num_aspects();
    let mut dt = vec![0.0; k];
    dt[aspect] = 1.0;
    let delta: Vec<f64> = f.v.row(p.i).iter().zip(f.v.row(p.j)).map(|(a, b)| a - b).collect();
    let q = f.w.row(aspect).to_vec();
    let mu = f.u.row(p.u).iter().zip(&delta).zip(&q).map(|((u, d), w)| u * d * w).sum();
    OrderGeometry { dt, delta, q, mu }
}

fn check_pairs(f: &LatentFactors, pairs: &[PairSample], aspect: usize) -> Result<()> {
    if aspect >= f.num_aspects() {
        return Err(Error::IndexOutOfRange { what: "aspect", index: aspect, len: f.num_aspects() });
    }
    for p in pairs {
        if p.u >= f.num_users() || p.i >= f.num_items() || p.j >= f.num_items() {
            return Err(Error::IndexOutOfRange {
                what: "pair entity",
                index: p.u.max(p.i).max(p.j),
                len: f.num_users().min(f.num_items()),
            });
        }
    }
    Ok(())
}

/// `Σ ln σ(x̂_ui − x̂_uj)` on one aspect.
pub fn bpr_data_term(f: &LatentFactors, pairs: &[PairSample], aspect: usize) -> Result<f64> {
    check_pairs(f, pairs, aspect)?;
    chunked_sum(pairs, |p| Ok(ln_sigmoid(pair_geometry(f, p, aspect).mu)))
}

pub fn bpr_objective(f: &LatentFactors, pairs: &[PairSample], aspect: usize, hp: &Hyperparams) -> Result<f64> {
    Ok(bpr_data_term(f, pairs, aspect)? + log_prior_factors(f, hp))
}

pub fn bpr_grad(
    f: &LatentFactors,
    pairs: &[PairSample],
    aspect: usize,
    hp: &Hyperparams,
    opts: GradOptions,
) -> Result<GradientBundle> {
    check_pairs(f, pairs, aspect)?;
    pairwise_factor_grad(f, pairs, hp, opts, |p| {
        let geo = pair_geometry(f, p, aspect);
        let a = sigmoid(-geo.mu);
        (p.u, p.i, p.j, geo, a)
    })
}
