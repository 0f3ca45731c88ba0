//! Alternating stochastic optimization: a factor block, then the global
//! covariance, then the personalized covariances, repeated until the
//! validation objective stops improving.
//!
//! Randomness: one ChaCha8 generator seeded from `hp.seed`. Stream 0 draws
//! the initialization, stream `s + 1` drives EM step `s`, and the fixed
//! evaluation batches use streams `u64::MAX` (validation) and `u64::MAX − 1`
//! (training).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    bpr_data_term, bpr_grad, pairs_from_triples, ptf_data_term, ptf_grad, BaselineConfig, PairSample,
};
use crate::covariance::{make_covariance, Cholesky, CovMatrix};
use crate::data::{empirical_covariance, Observation, SplitDataset};
use crate::error::{Error, Result};
use crate::gradients::{
    bpmr_grad_global, bpmr_grad_personalized, pmtf_grad_global, pmtf_grad_personalized, GradOptions, GradientBundle,
    PriorScope,
};
use crate::matrix::Matrix;
use crate::model::{Hyperparams, LatentFactors, ModelParams};
use crate::objectives::{bpmr_data_term_personalized, pmtf_data_term_personalized, TripleSample};

/// Consecutive failed draws before the sampler gives up.
pub const MAX_SAMPLE_ATTEMPTS: usize = 1000;
/// AdaGrad's denominator floor.
pub const ADAGRAD_EPS: f64 = 1e-8;
/// Size cap of the fixed batches used to report objectives.
pub const EVAL_BATCH: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PmtfPredict,
    BpmrRank,
    PtfBaseline,
    BprBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PmtfPredict => "pmtf-predict",
            Mode::BpmrRank => "bpmr-rank",
            Mode::PtfBaseline => "ptf-baseline",
            Mode::BprBaseline => "bpr-baseline",
        }
    }

    /// Whether the mode learns covariances.
    pub fn has_covariances(self) -> bool {
        matches!(self, Mode::PmtfPredict | Mode::BpmrRank)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pmtf-predict" | "pmtf" => Mode::PmtfPredict,
            "bpmr-rank" | "bpmr" => Mode::BpmrRank,
            "ptf-baseline" | "ptf" => Mode::PtfBaseline,
            "bpr-baseline" | "bpr" => Mode::BprBaseline,
            _ => return Err(Error::InvalidInput(format!("unknown model {s:?}"))),
        })
    }
}

/// Starting point of the covariance factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovInit {
    /// Cholesky factor of the empirical rating covariance.
    Empirical,
    /// Its diagonal only. The full estimate is dominated by the shared
    /// signal, so it gives the strongest signal direction the largest noise
    /// variance and the factor prior can shrink that component away for good.
    Diagonal,
}

impl std::str::FromStr for CovInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(CovInit::Empirical),
            "diagonal" => Ok(CovInit::Diagonal),
            _ => Err(Error::InvalidInput(format!("unknown covariance init {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Zero returns the initialization untouched.
    pub max_em_steps: usize,
    pub patience: usize,
    pub validation_tolerance: f64,
    pub hp: Hyperparams,
    pub baseline: BaselineConfig,
    /// Entities with fewer training observations keep `Σ = Σ_G`.
    pub min_personal_obs: usize,
    /// AdaGrad rate of the covariance factors; `None` uses `hp.learning_rate`.
    pub cov_learning_rate: Option<f64>,
    /// Independent initializations; the one with the best final validation
    /// metric is kept. Restart `r` seeds with `hp.seed + r`.
    pub restarts: usize,
    pub cov_init: CovInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::BpmrRank,
            max_em_steps: 30,
            patience: 3,
            validation_tolerance: 1e-4,
            hp: Hyperparams::default(),
            baseline: BaselineConfig::default(),
            min_personal_obs: 3,
            cov_learning_rate: None,
            restarts: 1,
            cov_init: CovInit::Diagonal,
        }
    }
}

impl TrainConfig {
    pub fn cov_rate(&self) -> f64 {
        self.cov_learning_rate.unwrap_or(self.hp.learning_rate)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        self.hp.validate(k)?;
        if self.patience == 0 || self.restarts == 0 {
            return Err(Error::InvalidInput("patience and restarts must be >= 1".into()));
        }
        if !(self.validation_tolerance > 0.0) {
            return Err(Error::InvalidInput("validation_tolerance must be positive".into()));
        }
        if let Some(lr) = self.cov_learning_rate {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::InvalidInput("cov_learning_rate must be nonnegative".into()));
            }
        }
        if self.hp.samples_per_iter == 0 {
            return Err(Error::InvalidInput("samples_per_iter must be >= 1".into()));
        }
        if matches!(self.mode, Mode::PtfBaseline | Mode::BprBaseline) {
            self.baseline.validate(k)?;
        }
        Ok(())
    }
}

/// Ratings of every known (user, item) pair, for orienting triples.
#[derive(Debug, Clone)]
pub struct RatingLookup {
    per_user: Vec<Vec<(usize, usize)>>,
    obs: Vec<Observation>,
}

impl RatingLookup {
    pub fn new(num_users: usize, sources: &[&[Observation]]) -> Self {
        let obs: Vec<Observation> = sources.iter().flat_map(|s| s.iter().cloned()).collect();
        let mut per_user = vec![Vec::new(); num_users];
        for (idx, o) in obs.iter().enumerate() {
            per_user[o.user].push((o.item, idx));
        }
        for v in &mut per_user {
            v.sort_unstable();
        }
        RatingLookup { per_user, obs }
    }

    pub fn get(&self, user: usize, item: usize) -> Option<&Observation> {
        let row = self.per_user.get(user)?;
        row.binary_search_by_key(&item, |&(i, _)| i).ok().map(|p| &self.obs[row[p].1])
    }

    /// Items `user` has rated in any source, ascending.
    pub fn items_of(&self, user: usize) -> impl Iterator<Item = usize> + '_ {
        self.per_user.get(user).into_iter().flatten().map(|&(i, _)| i)
    }
}

/// Draws `count` triples: an observed `(u, i)` uniformly with replacement,
/// then `j ≠ i` uniformly from all items. An observed `j` contributes
/// `R_ui − R_uj` on the shared aspects; an unobserved one counts as rating 0,
/// giving `R_ui` on i's aspects. Draws whose difference vanishes are
/// repeated.
pub fn sample_triples<R: Rng + ?Sized>(
    pool: &[Observation],
    lookup: &RatingLookup,
    num_items: usize,
    rng: &mut R,
    count: usize,
) -> Result<Vec<TripleSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::EmptyDataset("no observations to sample triples from".into()));
    }
    if num_items < 2 {
        return Err(Error::InvalidInput("triples need at least two items".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut failures = 0;
    while out.len() < count {
        let o = &pool[rng.random_range(0..pool.len())];
        let j = loop {
            let j = rng.random_range(0..num_items);
            if j != o.item {
                break j;
            }
        };
        let (d, mask): (Vec<f64>, Vec<bool>) = match lookup.get(o.user, j) {
            Some(other) => o
                .ratings
                .iter()
                .zip(&o.mask)
                .zip(other.ratings.iter().zip(&other.mask))
                .map(|((&ri, &mi), (&rj, &mj))| if mi && mj { (ri - rj, true) } else { (0.0, false) })
                .unzip(),
            None => (o.ratings.clone(), o.mask.clone()),
        };
        match TripleSample::new(o.user, o.item, j, d, mask) {
            Ok(t) => {
                out.push(t);
                failures = 0;
            }
            Err(_) => {
                failures += 1;
                if failures >= MAX_SAMPLE_ATTEMPTS {
                    return Err(Error::NoInformativeTriples(failures));
                }
            }
        }
    }
    Ok(out)
}

/// `θ ← θ + lr·g/√(G + ε)` after `G ← G + g²`; ascent on the objective.
pub fn adagrad_update(acc: &mut [f64], theta: &mut [f64], grad: &[f64], lr: f64) {
    for ((a, t), &g) in acc.iter_mut().zip(theta.iter_mut()).zip(grad) {
        *a += g * g;
        *t += lr * g / (*a + ADAGRAD_EPS).sqrt();
    }
}

/// AdaGrad accumulators for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub acc_u: Matrix,
    pub acc_v: Matrix,
    pub acc_w: Matrix,
    pub acc_l_g: Matrix,
    pub acc_l_user: Vec<Matrix>,
    pub acc_l_item: Vec<Matrix>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(m: usize, n: usize, k: usize, d: usize) -> Self {
        OptimizerState {
            acc_u: Matrix::zeros(m, d),
            acc_v: Matrix::zeros(n, d),
            acc_w: Matrix::zeros(k, d),
            acc_l_g: Matrix::zeros(k, k),
            acc_l_user: vec![Matrix::zeros(k, k); m],
            acc_l_item: vec![Matrix::zeros(k, k); n],
            steps: 0,
        }
    }

    pub fn apply_factors(&mut self, p: &mut ModelParams, g: &GradientBundle, lr: f64) {
        for (&u, row) in &g.d_u {
            adagrad_update(self.acc_u.row_mut(u), p.factors.u.row_mut(u), row, lr);
        }
        for (&i, row) in &g.d_v {
            adagrad_update(self.acc_v.row_mut(i), p.factors.v.row_mut(i), row, lr);
        }
        adagrad_update(self.acc_w.as_mut_slice(), p.factors.w.as_mut_slice(), g.d_w.as_slice(), lr);
        self.steps += 1;
    }

    pub fn apply_global(&mut self, p: &mut ModelParams, g: &GradientBundle, lr: f64) {
        if let Some(dl) = &g.d_l_g {
            adagrad_update(self.acc_l_g.as_mut_slice(), p.covs.global.matrix_mut().as_mut_slice(), dl.as_slice(), lr);
        }
        self.steps += 1;
    }

    pub fn apply_personal(
        &mut self,
        p: &mut ModelParams,
        g: &GradientBundle,
        lr: f64,
        user_ok: &[bool],
        item_ok: &[bool],
    ) {
        for (&u, dl) in g.d_l_user.iter().filter(|(u, _)| user_ok[**u]) {
            adagrad_update(
                self.acc_l_user[u].as_mut_slice(),
                p.covs.users[u].matrix_mut().as_mut_slice(),
                dl.as_slice(),
                lr,
            );
        }
        for (&i, dl) in g.d_l_item.iter().filter(|(i, _)| item_ok[**i]) {
            adagrad_update(
                self.acc_l_item[i].as_mut_slice(),
                p.covs.items[i].matrix_mut().as_mut_slice(),
                dl.as_slice(),
                lr,
            );
        }
        self.steps += 1;
    }
}

/// Continue or stop after an EM step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    Stop,
}

/// Stops once `patience` consecutive entries failed to beat the best earlier
/// value by more than `tolerance` (higher is better).
pub fn convergence_check(history: &[f64], patience: usize, tolerance: f64) -> Convergence {
    let Some(&first) = history.first() else {
        return Convergence::Continue;
    };
    let mut best = first;
    let mut stale = 0;
    for &v in &history[1..] {
        if v > best + tolerance {
            best = v;
            stale = 0;
        } else {
            stale += 1;
            best = best.max(v);
        }
    }
    if stale >= patience {
        Convergence::Stop
    } else {
        Convergence::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Factors,
    GlobalCovariance,
    PersonalCovariance,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Factors => "factors",
            Phase::GlobalCovariance => "global_covariance",
            Phase::PersonalCovariance => "personal_covariance",
        }
    }
}

/// One progress record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub em_step: usize,
    pub phase: Phase,
    /// Mean data log-likelihood on a fixed training batch.
    pub train_objective: f64,
    /// Mean data log-likelihood on a fixed validation batch.
    pub val_metric: f64,
    pub wall_ms: u128,
}

impl HistoryEntry {
    pub const CSV_HEADER: &'static str = "em_step,phase,train_objective,val_metric,wall_ms";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.em_step, self.phase.name(), self.train_objective, self.val_metric, self.wall_ms)
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// The final parameters, or the last finite ones after a failure.
    pub params: ModelParams,
    pub history: Vec<HistoryEntry>,
    pub em_steps: usize,
    pub converged: bool,
    /// Set when training aborted; `params` then holds the last good state.
    pub failure: Option<Error>,
}

/// Pairwise-complete rating covariance used to initialize `Σ_G` and to set
/// `Ψ_g`. A non-positive-definite estimate falls back to its diagonal, with
/// zero variances replaced by the mean positive variance.
pub fn initial_global_covariance(train: &[Observation], k: usize) -> Result<CovMatrix> {
    let emp = empirical_covariance(train, k);
    let diag = emp.diag();
    let positive: Vec<f64> = diag.iter().copied().filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::DegenerateCovariance("ratings have zero variance on every aspect".into()));
    }
    if Cholesky::try_plain(&emp).is_some() {
        if let Ok(c) = CovMatrix::new(emp.clone()) {
            return Ok(c);
        }
    }
    let fill = positive.iter().sum::<f64>() / positive.len() as f64;
    let d: Vec<f64> = diag.iter().map(|&v| if v > 0.0 { v } else { fill }).collect();
    CovMatrix::new(Matrix::from_diag(&d))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic initialization shared by training and `--max-em-steps 0`.
pub fn initialize(config: &TrainConfig, data: &SplitDataset) -> Result<(ModelParams, CovMatrix)> {
    let k = data.num_aspects();
    config.validate(k)?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let emp = match initial_global_covariance(&data.train, k) {
        Ok(c) => c,
        Err(e) if config.mode.has_covariances() => return Err(e),
        Err(_) => CovMatrix::identity(k),
    };
    let start = match config.cov_init {
        CovInit::Empirical => emp.clone(),
        CovInit::Diagonal => CovMatrix::new(Matrix::from_diag(&emp.matrix().diag()))?,
    };
    let mut rng = stream_rng(config.hp.seed, 0);
    let params = ModelParams::init(data.num_users(), data.num_items(), k, config.hp.d, Some(&start), &mut rng);
    Ok((params, emp))
}

/// Fixed data used for reporting objectives.
enum EvalBatch {
    Obs(Vec<Observation>),
    Triples(Vec<TripleSample>),
    Pairs(Vec<PairSample>),
}

struct Fitter<'a> {
    cfg: &'a TrainConfig,
    data: &'a SplitDataset,
    lookup_train: RatingLookup,
    psi_g: CovMatrix,
    user_ok: Vec<bool>,
    item_ok: Vec<bool>,
    weights: Vec<f64>,
    /// Expected appearances of each user and item per drawn sample.
    user_rate: Vec<f64>,
    item_rate: Vec<f64>,
    train_eval: EvalBatch,
    val_eval: EvalBatch,
}

fn take_obs(pool: &[Observation], rng: &mut ChaCha8Rng) -> Vec<Observation> {
    if pool.len() <= EVAL_BATCH {
        return pool.to_vec();
    }
    (0..EVAL_BATCH).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

impl<'a> Fitter<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a SplitDataset, emp: &CovMatrix) -> Result<Self> {
        let (m, n, k) = (data.num_users(), data.num_items(), data.num_aspects());
        let lookup_train = RatingLookup::new(m, &[&data.train]);
        let lookup_all = RatingLookup::new(m, &[&data.train, &data.val]);
        let mut uc = vec![0usize; m];
        let mut ic = vec![0usize; n];
        for o in &data.train {
            uc[o.user] += 1;
            ic[o.item] += 1;
        }
        let val_pool: &[Observation] = if data.val.is_empty() { &data.train } else { &data.val };
        let make = |pool: &[Observation], lookup: &RatingLookup, stream: u64| -> Result<EvalBatch> {
            let mut rng = stream_rng(cfg.hp.seed, stream);
            Ok(match cfg.mode {
                Mode::PmtfPredict | Mode::PtfBaseline => EvalBatch::Obs(take_obs(pool, &mut rng)),
                Mode::BpmrRank => EvalBatch::Triples(sample_triples(
                    pool,
                    lookup,
                    n,
                    &mut rng,
                    EVAL_BATCH.min(pool.len() * 4).max(1),
                )?),
                Mode::BprBaseline => {
                    let t = sample_triples(pool, lookup, n, &mut rng, EVAL_BATCH.min(pool.len() * 4).max(1))?;
                    EvalBatch::Pairs(pairs_from_triples(&t, cfg.baseline.aspect))
                }
            })
        };
        let total = data.train.len() as f64;
        let user_rate = uc.iter().map(|&c| c as f64 / total).collect();
        let item_rate = ic
            .iter()
            .map(|&c| {
                let p = c as f64 / total;
                // pairwise modes also meet every item as the comparison item
                if matches!(cfg.mode, Mode::BpmrRank | Mode::BprBaseline) {
                    p + (1.0 - p) / (n - 1).max(1) as f64
                } else {
                    p
                }
            })
            .collect();
        let train_eval = make(&data.train, &lookup_train, u64::MAX - 1)?;
        let val_eval = make(val_pool, &lookup_all, u64::MAX)?;
        Ok(Fitter {
            cfg,
            data,
            lookup_train,
            psi_g: emp.scaled(cfg.hp.nu_g),
            user_ok: uc.iter().map(|&c| c >= cfg.min_personal_obs).collect(),
            item_ok: ic.iter().map(|&c| c >= cfg.min_personal_obs).collect(),
            weights: cfg.hp.weights(k),
            user_rate,
            item_rate,
            train_eval,
            val_eval,
        })
    }

    fn mean_objective(&self, p: &ModelParams, batch: &EvalBatch) -> Result<f64> {
        let f = &p.factors;
        let (total, count) = match batch {
            EvalBatch::Obs(o) => {
                let v = match self.cfg.mode {
                    Mode::PtfBaseline => ptf_data_term(f, o, self.cfg.baseline.noise_sigma2)?,
                    _ => {
                        let mat = p.covs.materialize();
                        pmtf_data_term_personalized(f, &mat.users, &mat.items, self.cfg.hp.lambda, o)?
                    }
                };
                (v, o.len())
            }
            EvalBatch::Triples(t) => {
                let mat = p.covs.materialize();
                (bpmr_data_term_personalized(f, &mat.users, &mat.items, self.cfg.hp.lambda, t, &self.weights)?, t.len())
            }
            EvalBatch::Pairs(pairs) => (bpr_data_term(f, pairs, self.cfg.baseline.aspect)?, pairs.len()),
        };
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        if !mean.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        Ok(mean)
    }

    fn draw_obs(&self, rng: &mut ChaCha8Rng) -> Vec<Observation> {
        let pool = &self.data.train;
        (0..self.cfg.hp.samples_per_iter).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
    }

    fn draw_triples(&self, rng: &mut ChaCha8Rng) -> Result<Vec<TripleSample>> {
        sample_triples(&self.data.train, &self.lookup_train, self.data.num_items(), rng, self.cfg.hp.samples_per_iter)
    }

    /// Adds the factor prior so that the batch gradient, with data scaled by
    /// `n/b`, is an unbiased estimate of the full posterior gradient: every
    /// appearance of an entity carries `1/(b·rate)` of its prior.
    fn add_factor_prior(&self, g: &mut GradientBundle, f: &LatentFactors, users: &[usize], items: &[usize]) {
        let hp = &self.cfg.hp;
        let b = hp.samples_per_iter as f64;
        let add = |map: &mut BTreeMap<usize, Vec<f64>>, m: &Matrix, rate: &[f64], e: usize, s2: f64| {
            let w = 1.0 / (b * rate[e].max(f64::MIN_POSITIVE) * s2);
            let row = map.entry(e).or_insert_with(|| vec![0.0; m.cols()]);
            for (gv, x) in row.iter_mut().zip(m.row(e)) {
                *gv -= w * x;
            }
        };
        for &u in users {
            add(&mut g.d_u, &f.u, &self.user_rate, u, hp.sigma2_u);
        }
        for &i in items {
            add(&mut g.d_v, &f.v, &self.item_rate, i, hp.sigma2_v);
        }
        g.d_w.add_scaled(&f.w, -1.0 / hp.sigma2_w);
    }

    fn factor_step(&self, p: &mut ModelParams, opt: &mut OptimizerState, rng: &mut ChaCha8Rng) -> Result<()> {
        let hp = &self.cfg.hp;
        let n = self.data.train.len() as f64;
        let opts = GradOptions { scope: PriorScope::None, data_weight: n / hp.samples_per_iter as f64 };
        let sigma_g = make_covariance(&p.covs.global);
        for _ in 0..hp.sgd_iters_per_em {
            let f = &p.factors;
            let (mut g, users, items) = if matches!(self.cfg.mode, Mode::BpmrRank | Mode::BprBaseline) {
                let t = self.draw_triples(rng)?;
                let users: Vec<usize> = t.iter().map(|t| t.u).collect();
                let items: Vec<usize> = t.iter().flat_map(|t| [t.i, t.j]).collect();
                let g = if self.cfg.mode == Mode::BpmrRank {
                    bpmr_grad_personalized(f, &p.covs, &t, hp, &sigma_g, opts)?
                } else {
                    let pairs = pairs_from_triples(&t, self.cfg.baseline.aspect);
                    bpr_grad(f, &pairs, self.cfg.baseline.aspect, hp, opts)?
                };
                (g, users, items)
            } else {
                let o = self.draw_obs(rng);
                let users: Vec<usize> = o.iter().map(|o| o.user).collect();
                let items: Vec<usize> = o.iter().map(|o| o.item).collect();
                let g = if self.cfg.mode == Mode::PmtfPredict {
                    pmtf_grad_personalized(f, &p.covs, &o, hp, &sigma_g, opts)?
                } else {
                    ptf_grad(f, &o, self.cfg.baseline.noise_sigma2, hp, opts)?
                };
                (g, users, items)
            };
            self.add_factor_prior(&mut g, f, &users, &items);
            check_bundle(&g)?;
            opt.apply_factors(p, &g, hp.learning_rate);
        }
        Ok(())
    }

    fn global_step(&self, p: &mut ModelParams, opt: &mut OptimizerState, rng: &mut ChaCha8Rng) -> Result<()> {
        let hp = &self.cfg.hp;
        let n = self.data.train.len() as f64;
        let opts = GradOptions { scope: PriorScope::Full, data_weight: n / hp.samples_per_iter as f64 };
        for _ in 0..hp.sgd_iters_per_em {
            let g = match self.cfg.mode {
                Mode::BpmrRank => {
                    bpmr_grad_global(&p.factors, &p.covs.global, &self.draw_triples(rng)?, hp, &self.psi_g, opts)?
                }
                _ => pmtf_grad_global(&p.factors, &p.covs.global, &self.draw_obs(rng), hp, &self.psi_g, opts)?,
            };
            check_bundle(&g)?;
            opt.apply_global(p, &g, self.cfg.cov_rate());
        }
        // entities without enough data stay at the global covariance
        for (u, ok) in self.user_ok.iter().enumerate() {
            if !ok {
                p.covs.users[u] = p.covs.global.clone();
            }
        }
        for (i, ok) in self.item_ok.iter().enumerate() {
            if !ok {
                p.covs.items[i] = p.covs.global.clone();
            }
        }
        Ok(())
    }

    fn personal_step(&self, p: &mut ModelParams, opt: &mut OptimizerState, rng: &mut ChaCha8Rng) -> Result<()> {
        if !self.user_ok.iter().chain(&self.item_ok).any(|&ok| ok) {
            return Ok(());
        }
        let hp = &self.cfg.hp;
        let n = self.data.train.len() as f64;
        let opts = GradOptions { scope: PriorScope::Full, data_weight: n / hp.samples_per_iter as f64 };
        let sigma_g = make_covariance(&p.covs.global);
        for _ in 0..hp.sgd_iters_per_em {
            let g = match self.cfg.mode {
                Mode::BpmrRank => {
                    bpmr_grad_personalized(&p.factors, &p.covs, &self.draw_triples(rng)?, hp, &sigma_g, opts)?
                }
                _ => pmtf_grad_personalized(&p.factors, &p.covs, &self.draw_obs(rng), hp, &sigma_g, opts)?,
            };
            check_bundle(&g)?;
            opt.apply_personal(p, &g, self.cfg.cov_rate(), &self.user_ok, &self.item_ok);
        }
        Ok(())
    }
}

fn check_bundle(g: &GradientBundle) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient".into()))
    }
}

/// Runs the alternating optimization. `on_progress` sees every history
/// entry as it is produced.
pub fn em_fit(
    config: &TrainConfig,
    data: &SplitDataset,
    mut on_progress: impl FnMut(&HistoryEntry),
) -> Result<FitOutcome> {
    config.validate(data.num_aspects())?;
    let mut best: Option<FitOutcome> = None;
    for r in 0..config.restarts {
        let mut cfg = config.clone();
        cfg.hp.seed = config.hp.seed.wrapping_add(r as u64);
        let out = fit_once(&cfg, data, &mut on_progress)?;
        let score = |o: &FitOutcome| match (&o.failure, o.history.last()) {
            (None, Some(e)) if e.val_metric.is_finite() => e.val_metric,
            _ => f64::NEG_INFINITY,
        };
        if best.as_ref().is_none_or(|b| score(&out) > score(b)) {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn fit_once(
    config: &TrainConfig,
    data: &SplitDataset,
    on_progress: &mut impl FnMut(&HistoryEntry),
) -> Result<FitOutcome> {
    let start = Instant::now();
    let (mut params, emp) = initialize(config, data)?;
    let (m, n, k, d) = (data.num_users(), data.num_items(), data.num_aspects(), config.hp.d);
    let fitter = Fitter::new(config, data, &emp)?;
    let mut opt = OptimizerState::new(m, n, k, d);
    let mut history = Vec::new();
    let mut vals = Vec::new();

    let mut record = |history: &mut Vec<HistoryEntry>, step: usize, phase: Phase, p: &ModelParams| -> Result<f64> {
        let e = HistoryEntry {
            em_step: step,
            phase,
            train_objective: fitter.mean_objective(p, &fitter.train_eval)?,
            val_metric: fitter.mean_objective(p, &fitter.val_eval)?,
            wall_ms: start.elapsed().as_millis(),
        };
        on_progress(&e);
        history.push(e);
        Ok(e.val_metric)
    };

    vals.push(record(&mut history, 0, Phase::Init, &params)?);
    let mut converged = false;
    let mut steps_done = 0;
    for step in 1..=config.max_em_steps {
        let last_good = params.clone();
        let mut rng = stream_rng(config.hp.seed, step as u64);
        let mut phases = vec![Phase::Factors];
        if config.mode.has_covariances() {
            phases.extend([Phase::GlobalCovariance, Phase::PersonalCovariance]);
        }
        let mut val = f64::NAN;
        for phase in phases {
            let res = match phase {
                Phase::Factors => fitter.factor_step(&mut params, &mut opt, &mut rng),
                Phase::GlobalCovariance => fitter.global_step(&mut params, &mut opt, &mut rng),
                Phase::PersonalCovariance => fitter.personal_step(&mut params, &mut opt, &mut rng),
                Phase::Init => Ok(()),
            };
            let res = res.and_then(|_| {
                if params.is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite(format!("parameters after {} step", phase.name())))
                }
            });
            let res = res.and_then(|_| record(&mut history, step, phase, &params));
            match res {
                Ok(v) => val = v,
                Err(e) => {
                    return Ok(FitOutcome {
                        params: last_good,
                        history,
                        em_steps: steps_done,
                        converged: false,
                        failure: Some(e),
                    })
                }
            }
        }
        steps_done = step;
        vals.push(val);
        if convergence_check(&vals, config.patience, config.validation_tolerance) == Convergence::Stop {
            converged = true;
            break;
        }
    }
    Ok(FitOutcome { params, history, em_steps: steps_done, converged, failure: None })
}
