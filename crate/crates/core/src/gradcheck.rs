//! Randomized small problems for checking every analytic gradient against
//! central differences.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{bpr_grad, bpr_objective, ptf_grad, ptf_objective, PairSample};
use crate::covariance::{make_covariance, CovFactor, CovMatrix};
use crate::data::Observation;
use crate::error::{Error, Result};
use crate::gradients::{
    bpmr_grad_global, bpmr_grad_personalized, finite_difference_check, pmtf_grad_global, pmtf_grad_personalized,
    FdReport, GradOptions, GradientBundle,
};
use crate::matrix::Matrix;
use crate::model::{CovarianceSet, Hyperparams, LatentFactors, ModelParams};
use crate::objectives::{
    bpmr_log_posterior_global, bpmr_log_posterior_personalized, pmtf_log_posterior_global,
    pmtf_log_posterior_personalized, TripleSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveId {
    BpmrGlobal,
    BpmrPersonalized,
    PmtfGlobal,
    PmtfPersonalized,
    Ptf,
    Bpr,
}

impl ObjectiveId {
    pub const ALL: [ObjectiveId; 6] = [
        ObjectiveId::BpmrGlobal,
        ObjectiveId::BpmrPersonalized,
        ObjectiveId::PmtfGlobal,
        ObjectiveId::PmtfPersonalized,
        ObjectiveId::Ptf,
        ObjectiveId::Bpr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveId::BpmrGlobal => "bpmr-global",
            ObjectiveId::BpmrPersonalized => "bpmr-personalized",
            ObjectiveId::PmtfGlobal => "pmtf-global",
            ObjectiveId::PmtfPersonalized => "pmtf-personalized",
            ObjectiveId::Ptf => "ptf",
            ObjectiveId::Bpr => "bpr",
        }
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveId::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown objective {s:?}")))
    }
}

/// Parameters and data for one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckProblem {
    pub params: ModelParams,
    pub triples: Vec<TripleSample>,
    pub observations: Vec<Observation>,
    pub pairs: Vec<PairSample>,
    pub hp: Hyperparams,
    /// Scale of the global inverse-Wishart prior.
    pub psi_g: CovMatrix,
    /// Global covariance held fixed by the personalized objectives.
    pub sigma_g: CovMatrix,
    pub noise_sigma2: f64,
    pub bpr_aspect: usize,
}

fn random_factor(rng: &mut ChaCha8Rng, k: usize) -> CovFactor {
    let mut l = Matrix::from_fn(k, k, |_, _| rng.random_range(-0.4..0.4));
    for a in 0..k {
        l[(a, a)] += rng.random_range(0.8..1.3);
    }
    CovFactor::new(l).expect("finite")
}

impl GradCheckProblem {
    /// A random instance with the given sizes.
    pub fn random(seed: u64, m: usize, n: usize, k: usize, d: usize) -> Result<Self> {
        if m == 0 || n < 2 || k == 0 || d == 0 {
            return Err(Error::InvalidInput("need M >= 1, N >= 2, K >= 1, d >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = LatentFactors::random(m, n, k, d, 0.7, &mut rng);
        let covs = CovarianceSet {
            global: random_factor(&mut rng, k),
            users: (0..m).map(|_| random_factor(&mut rng, k)).collect(),
            items: (0..n).map(|_| random_factor(&mut rng, k)).collect(),
        };
        let kf = k as f64;
        let hp = Hyperparams {
            d,
            sigma2_u: rng.random_range(0.5..2.0),
            sigma2_v: rng.random_range(0.5..2.0),
            sigma2_w: rng.random_range(0.5..2.0),
            lambda: rng.random_range(0.1..0.9),
            nu_g: kf + rng.random_range(1.0..5.0),
            nu_p: kf + rng.random_range(0.5..3.0),
            aspect_weights: (0..k).map(|_| rng.random_range(0.5..1.5)).collect(),
            ..Default::default()
        };
        let psi_g = make_covariance(&random_factor(&mut rng, k)).scaled(hp.nu_g);
        let sigma_g = make_covariance(&covs.global);
        let mut observations = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..(2 * m).max(6) {
            let (u, i) = (rng.random_range(0..m), rng.random_range(0..n));
            if !seen.insert((u, i)) {
                continue;
            }
            let mut mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.8)).collect();
            mask[rng.random_range(0..k)] = true;
            let ratings = mask.iter().map(|&o| if o { rng.random_range(-2.0..2.0) } else { 0.0 }).collect();
            observations.push(Observation { user: u, item: i, ratings, mask });
        }
        let mut triples = Vec::new();
        while triples.len() < 8 {
            let u = rng.random_range(0..m);
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let mask: Vec<bool> = (0..k).map(|_| rng.random_bool(0.85)).collect();
            let diff = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            if let Ok(t) = TripleSample::new(u, i, j, diff, mask) {
                triples.push(t);
            }
        }
        let pairs = triples.iter().map(|t| PairSample { u: t.u, i: t.i, j: t.j }).collect();
        Ok(GradCheckProblem {
            params: ModelParams { factors, covs },
            triples,
            observations,
            pairs,
            hp,
            psi_g,
            sigma_g,
            noise_sigma2: rng.random_range(0.3..2.0),
            bpr_aspect: rng.random_range(0..k),
        })
    }

    pub fn value(&self, id: ObjectiveId, p: &ModelParams) -> Result<f64> {
        let f = &p.factors;
        match id {
            ObjectiveId::BpmrGlobal => {
                bpmr_log_posterior_global(f, &p.covs.global, &self.triples, &self.hp, &self.psi_g)
            }
            ObjectiveId::BpmrPersonalized => {
                bpmr_log_posterior_personalized(f, &p.covs, &self.triples, &self.hp, &self.sigma_g)
            }
            ObjectiveId::PmtfGlobal => {
                pmtf_log_posterior_global(f, &p.covs.global, &self.observations, &self.hp, &self.psi_g)
            }
            ObjectiveId::PmtfPersonalized => {
                pmtf_log_posterior_personalized(f, &p.covs, &self.observations, &self.hp, &self.sigma_g)
            }
            ObjectiveId::Ptf => ptf_objective(f, &self.observations, self.noise_sigma2, &self.hp),
            ObjectiveId::Bpr => bpr_objective(f, &self.pairs, self.bpr_aspect, &self.hp),
        }
    }

    /// Exact gradient of the full objective.
    pub fn gradient(&self, id: ObjectiveId) -> Result<GradientBundle> {
        let p = &self.params;
        let f = &p.factors;
        let o = GradOptions::default();
        match id {
            ObjectiveId::BpmrGlobal => bpmr_grad_global(f, &p.covs.global, &self.triples, &self.hp, &self.psi_g, o),
            ObjectiveId::BpmrPersonalized => {
                bpmr_grad_personalized(f, &p.covs, &self.triples, &self.hp, &self.sigma_g, o)
            }
            ObjectiveId::PmtfGlobal => {
                pmtf_grad_global(f, &p.covs.global, &self.observations, &self.hp, &self.psi_g, o)
            }
            ObjectiveId::PmtfPersonalized => {
                pmtf_grad_personalized(f, &p.covs, &self.observations, &self.hp, &self.sigma_g, o)
            }
            ObjectiveId::Ptf => ptf_grad(f, &self.observations, self.noise_sigma2, &self.hp, o),
            ObjectiveId::Bpr => bpr_grad(f, &self.pairs, self.bpr_aspect, &self.hp, o),
        }
    }

    pub fn check(&self, id: ObjectiveId, h: f64) -> Result<FdReport> {
        let g = self.gradient(id)?;
        finite_difference_check(&self.params, &g, h, |p| self.value(id, p))
    }
}
