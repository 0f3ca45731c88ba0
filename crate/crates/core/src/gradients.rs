//! Analytic gradients of the four objectives and a central-difference
//! checker.
//!
//! Data terms accumulate `∂/∂Σ` per entity treating the entries of Σ as
//! unconstrained; the chain to a factor is `∂/∂L = (G + Gᵀ)·L` for
//! `G = ∂/∂Σ`, so symmetry never has to be imposed by hand.

use std::collections::BTreeMap;

use crate::covariance::{make_covariance, Cholesky, CovFactor, CovMatrix};
use crate::data::Observation;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{CovarianceSet, Hyperparams, InverseWishart, LatentFactors, ModelParams};
use crate::objectives::{
    check_entities, masked_residual, order_geometry, order_value, pair_covariance, personalized_triple_var,
    OrderGeometry, TripleSample,
};
use crate::reduce::chunked_fold;

/// Which rows receive prior gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorScope {
    /// Only rows and entities touched by the batch. Used for stochastic steps.
    Batch,
    /// Every row and entity; gives the exact gradient of the full objective.
    Full,
    /// Data terms only; the caller supplies its own prior weighting.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradOptions {
    pub scope: PriorScope,
    /// Multiplier on the data term, e.g. `n/b` to scale a mini-batch of `b`
    /// out of `n` up to the full data set.
    pub data_weight: f64,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions { scope: PriorScope::Full, data_weight: 1.0 }
    }
}

/// Sparse gradient of a log-posterior. Entities a batch never touches are
/// absent from the maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_u: BTreeMap<usize, Vec<f64>>,
    pub d_v: BTreeMap<usize, Vec<f64>>,
    pub d_w: Matrix,
    pub d_l_g: Option<Matrix>,
    pub d_l_user: BTreeMap<usize, Matrix>,
    pub d_l_item: BTreeMap<usize, Matrix>,
}

fn add_row(map: &mut BTreeMap<usize, Vec<f64>>, key: usize, row: &[f64], scale: f64) {
    let e = map.entry(key).or_insert_with(|| vec![0.0; row.len()]);
    for (a, b) in e.iter_mut().zip(row) {
        *a += scale * b;
    }
}

fn add_mat(map: &mut BTreeMap<usize, Matrix>, key: usize, m: &Matrix, scale: f64) {
    map.entry(key).or_insert_with(|| Matrix::zeros(m.rows(), m.cols())).add_scaled(m, scale);
}

fn merge_rows(into: &mut BTreeMap<usize, Vec<f64>>, from: BTreeMap<usize, Vec<f64>>) {
    for (k, v) in from {
        add_row(into, k, &v, 1.0);
    }
}

fn merge_mats(into: &mut BTreeMap<usize, Matrix>, from: BTreeMap<usize, Matrix>) {
    for (k, m) in from {
        add_mat(into, k, &m, 1.0);
    }
}

impl GradientBundle {
    pub fn empty(k: usize, d: usize) -> Self {
        GradientBundle {
            d_u: BTreeMap::new(),
            d_v: BTreeMap::new(),
            d_w: Matrix::zeros(k, d),
            d_l_g: None,
            d_l_user: BTreeMap::new(),
            d_l_item: BTreeMap::new(),
        }
    }

    /// Entrywise sum.
    pub fn add(&mut self, other: GradientBundle) {
        merge_rows(&mut self.d_u, other.d_u);
        merge_rows(&mut self.d_v, other.d_v);
        self.d_w.add_scaled(&other.d_w, 1.0);
        self.d_l_g = match (self.d_l_g.take(), other.d_l_g) {
            (Some(mut a), Some(b)) => {
                a.add_scaled(&b, 1.0);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        merge_mats(&mut self.d_l_user, other.d_l_user);
        merge_mats(&mut self.d_l_item, other.d_l_item);
    }

    pub fn merge(mut self, other: GradientBundle) -> GradientBundle {
        self.add(other);
        self
    }

    pub fn is_finite(&self) -> bool {
        self.d_u.values().flatten().all(|v| v.is_finite())
            && self.d_v.values().flatten().all(|v| v.is_finite())
            && self.d_w.is_finite()
            && self.d_l_g.as_ref().is_none_or(Matrix::is_finite)
            && self.d_l_user.values().all(Matrix::is_finite)
            && self.d_l_item.values().all(Matrix::is_finite)
    }
}

/// Per-chunk accumulator: factor gradients plus raw `∂/∂Σ` per entity.
struct Raw {
    d_u: BTreeMap<usize, Vec<f64>>,
    d_v: BTreeMap<usize, Vec<f64>>,
    d_w: Matrix,
    sig_g: Matrix,
    sig_user: BTreeMap<usize, Matrix>,
    sig_item: BTreeMap<usize, Matrix>,
    count: usize,
}

impl Raw {
    fn new(k: usize, d: usize) -> Self {
        Raw {
            d_u: BTreeMap::new(),
            d_v: BTreeMap::new(),
            d_w: Matrix::zeros(k, d),
            sig_g: Matrix::zeros(k, k),
            sig_user: BTreeMap::new(),
            sig_item: BTreeMap::new(),
            count: 0,
        }
    }

    fn merge(mut self, other: Raw) -> Raw {
        merge_rows(&mut self.d_u, other.d_u);
        merge_rows(&mut self.d_v, other.d_v);
        self.d_w.add_scaled(&other.d_w, 1.0);
        self.sig_g.add_scaled(&other.sig_g, 1.0);
        merge_mats(&mut self.sig_user, other.sig_user);
        merge_mats(&mut self.sig_item, other.sig_item);
        self.count += other.count;
        self
    }

    /// Factor gradients of one pairwise term whose derivative with respect to
    /// `μ = Σ_f U_f·(V_i − V_j)_f·q_f` is `a`.
    pub(crate) fn add_pairwise(
        &mut self,
        f: &LatentFactors,
        u: usize,
        i: usize,
        j: usize,
        geo: &OrderGeometry,
        a: f64,
    ) {
        let uu = f.u.row(u);
        let du: Vec<f64> = geo.delta.iter().zip(&geo.q).map(|(dl, q)| dl * q).collect();
        let dv: Vec<f64> = uu.iter().zip(&geo.q).map(|(x, q)| x * q).collect();
        add_row(&mut self.d_u, u, &du, a);
        add_row(&mut self.d_v, i, &dv, a);
        add_row(&mut self.d_v, j, &dv, -a);
        for (k, &x) in geo.dt.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (fi, w) in self.d_w.row_mut(k).iter_mut().enumerate() {
                *w += a * x * uu[fi] * geo.delta[fi];
            }
        }
    }

    /// Factor gradients of a pointwise term with `∂/∂R̂_ui = g`.
    fn add_pointwise(&mut self, f: &LatentFactors, u: usize, i: usize, g: &[f64]) {
        let d = f.dim();
        let mut h = vec![0.0; d];
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            for (hf, w) in h.iter_mut().zip(f.w.row(k)) {
                *hf += gk * w;
            }
        }
        let (uu, vi) = (f.u.row(u), f.v.row(i));
        let du: Vec<f64> = h.iter().zip(vi).map(|(a, b)| a * b).collect();
        let dv: Vec<f64> = h.iter().zip(uu).map(|(a, b)| a * b).collect();
        add_row(&mut self.d_u, u, &du, 1.0);
        add_row(&mut self.d_v, i, &dv, 1.0);
        for (k, &gk) in g.iter().enumerate() {
            if gk == 0.0 {
                continue;
            }
            for (fi, w) in self.d_w.row_mut(k).iter_mut().enumerate() {
                *w += gk * uu[fi] * vi[fi];
            }
        }
    }
}

fn outer(x: &[f64], scale: f64) -> Matrix {
    Matrix::from_fn(x.len(), x.len(), |a, b| scale * x[a] * x[b])
}

/// `(G + Gᵀ)·L`.
fn chain_to_factor(g: &Matrix, l: &CovFactor) -> Matrix {
    let sym = Matrix::from_fn(g.rows(), g.cols(), |a, b| g[(a, b)] + g[(b, a)]);
    sym.matmul(l.matrix())
}

fn factor_prior(raw: &mut Raw, f: &LatentFactors, hp: &Hyperparams, scope: PriorScope) {
    let apply = |map: &mut BTreeMap<usize, Vec<f64>>, m: &Matrix, s2: f64| match scope {
        PriorScope::Batch => {
            for (&r, g) in map.iter_mut() {
                for (gv, x) in g.iter_mut().zip(m.row(r)) {
                    *gv -= x / s2;
                }
            }
        }
        PriorScope::Full => {
            for r in 0..m.rows() {
                add_row(map, r, m.row(r), -1.0 / s2);
            }
        }
        PriorScope::None => {}
    };
    apply(&mut raw.d_u, &f.u, hp.sigma2_u);
    apply(&mut raw.d_v, &f.v, hp.sigma2_v);
    if scope != PriorScope::None {
        raw.d_w.add_scaled(&f.w, -1.0 / hp.sigma2_w);
    }
}

fn into_bundle(raw: Raw) -> GradientBundle {
    GradientBundle {
        d_u: raw.d_u,
        d_v: raw.d_v,
        d_w: raw.d_w,
        d_l_g: None,
        d_l_user: BTreeMap::new(),
        d_l_item: BTreeMap::new(),
    }
}

fn check_batch<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty gradient batch".into()));
    }
    Ok(())
}

fn finish_global(
    mut raw: Raw,
    f: &LatentFactors,
    l_g: &CovFactor,
    sigma: &CovMatrix,
    hp: &Hyperparams,
    psi_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    factor_prior(&mut raw, f, hp, opts.scope);
    let mut g = raw.sig_g.clone();
    if opts.scope != PriorScope::None {
        g.add_scaled(&InverseWishart::new(psi_g, hp.nu_g)?.gradient(sigma)?, 1.0);
    }
    let d_l_g = chain_to_factor(&g, l_g);
    let mut bundle = into_bundle(raw);
    bundle.d_l_g = Some(d_l_g);
    Ok(bundle)
}

#[allow(clippy::too_many_arguments)]
fn finish_personalized(
    mut raw: Raw,
    f: &LatentFactors,
    covs: &CovarianceSet,
    users: &[CovMatrix],
    items: &[CovMatrix],
    hp: &Hyperparams,
    sigma_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    factor_prior(&mut raw, f, hp, opts.scope);
    let iw = InverseWishart::new(&sigma_g.scaled(hp.nu_p), hp.nu_p)?;
    let k = f.num_aspects();
    let mut sig_user = std::mem::take(&mut raw.sig_user);
    let mut sig_item = std::mem::take(&mut raw.sig_item);
    if opts.scope == PriorScope::Full {
        for u in 0..users.len() {
            sig_user.entry(u).or_insert_with(|| Matrix::zeros(k, k));
        }
        for i in 0..items.len() {
            sig_item.entry(i).or_insert_with(|| Matrix::zeros(k, k));
        }
    }
    let mut bundle = into_bundle(raw);
    let with_prior = opts.scope != PriorScope::None;
    for (u, mut g) in sig_user {
        if with_prior {
            g.add_scaled(&iw.gradient(&users[u])?, 1.0);
        }
        bundle.d_l_user.insert(u, chain_to_factor(&g, &covs.users[u]));
    }
    for (i, mut g) in sig_item {
        if with_prior {
            g.add_scaled(&iw.gradient(&items[i])?, 1.0);
        }
        bundle.d_l_item.insert(i, chain_to_factor(&g, &covs.items[i]));
    }
    Ok(bundle)
}

/// Gradient of the global BPMR log-posterior.
pub fn bpmr_grad_global(
    f: &LatentFactors,
    l_g: &CovFactor,
    batch: &[TripleSample],
    hp: &Hyperparams,
    psi_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let sigma = make_covariance(l_g);
    let w = hp.weights(k);
    let raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, t| {
            let geo = order_geometry(f, t, &w);
            let var = sigma.matrix().quad_form(&geo.dt);
            let ov = order_value(t, geo.mu, var)?;
            raw.add_pairwise(f, t.u, t.i, t.j, &geo, opts.data_weight * ov.c / ov.s);
            let coef = -opts.data_weight * ov.c * geo.mu / (2.0 * ov.s * ov.s * ov.s);
            raw.sig_g.add_scaled(&outer(&geo.dt, 1.0), coef);
            Ok(())
        },
        Raw::merge,
    )?;
    finish_global(raw, f, l_g, &sigma, hp, psi_g, opts)
}

/// Gradient of the personalized BPMR log-posterior with respect to the
/// factors and every personalized covariance factor; `Σ_G` is held fixed.
pub fn bpmr_grad_personalized(
    f: &LatentFactors,
    covs: &CovarianceSet,
    batch: &[TripleSample],
    hp: &Hyperparams,
    sigma_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    check_entities(f, covs)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let mat = covs.materialize();
    let w = hp.weights(k);
    let lambda = hp.lambda;
    let raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, t| {
            let geo = order_geometry(f, t, &w);
            let var = personalized_triple_var(&[&mat.users[t.u], &mat.items[t.i], &mat.items[t.j]], lambda, &geo.dt);
            let ov = order_value(t, geo.mu, var)?;
            raw.add_pairwise(f, t.u, t.i, t.j, &geo, opts.data_weight * ov.c / ov.s);
            let coef = -opts.data_weight * ov.c * geo.mu / (2.0 * ov.s * ov.s * ov.s);
            let dd = outer(&geo.dt, coef);
            add_mat(&mut raw.sig_user, t.u, &dd, 2.0 * lambda);
            add_mat(&mut raw.sig_item, t.i, &dd, 1.0 - lambda);
            add_mat(&mut raw.sig_item, t.j, &dd, 1.0 - lambda);
            Ok(())
        },
        Raw::merge,
    )?;
    finish_personalized(raw, f, covs, &mat.users, &mat.items, hp, sigma_g, opts)
}

/// `∂/∂R̂ = mask ∘ S⁻¹e` and `∂/∂S = ½S⁻¹eeᵀS⁻¹` for one observation; the
/// `−½S⁻¹` part is added by the caller.
fn pmtf_obs_terms(chol: &Cholesky, f: &LatentFactors, o: &Observation) -> (Vec<f64>, Vec<f64>) {
    let e = masked_residual(f, o);
    let sol = chol.solve(&e);
    let g = sol.iter().zip(&o.mask).map(|(s, &m)| if m { *s } else { 0.0 }).collect();
    (g, sol)
}

/// Gradient of the global PMTF log-posterior.
pub fn pmtf_grad_global(
    f: &LatentFactors,
    l_g: &CovFactor,
    batch: &[Observation],
    hp: &Hyperparams,
    psi_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let sigma = make_covariance(l_g);
    let chol = Cholesky::with_jitter(sigma.matrix())?;
    let wgt = opts.data_weight;
    let mut raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, o| {
            let (g, sol) = pmtf_obs_terms(&chol, f, o);
            let g: Vec<f64> = g.iter().map(|x| x * wgt).collect();
            raw.add_pointwise(f, o.user, o.item, &g);
            raw.sig_g.add_scaled(&outer(&sol, 1.0), 0.5 * wgt);
            raw.count += 1;
            Ok(())
        },
        Raw::merge,
    )?;
    raw.sig_g.add_scaled(&chol.inverse(), -0.5 * wgt * raw.count as f64);
    finish_global(raw, f, l_g, &sigma, hp, psi_g, opts)
}

/// Gradient of the personalized PMTF log-posterior; `Σ_G` is held fixed.
pub fn pmtf_grad_personalized(
    f: &LatentFactors,
    covs: &CovarianceSet,
    batch: &[Observation],
    hp: &Hyperparams,
    sigma_g: &CovMatrix,
    opts: GradOptions,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    check_entities(f, covs)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let mat = covs.materialize();
    let lambda = hp.lambda;
    let wgt = opts.data_weight;
    let raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, o| {
            let chol = Cholesky::with_jitter(&pair_covariance(&mat.users, &mat.items, lambda, o.user, o.item))?;
            let (g, sol) = pmtf_obs_terms(&chol, f, o);
            let g: Vec<f64> = g.iter().map(|x| x * wgt).collect();
            raw.add_pointwise(f, o.user, o.item, &g);
            let mut ds = outer(&sol, 0.5 * wgt);
            ds.add_scaled(&chol.inverse(), -0.5 * wgt);
            add_mat(&mut raw.sig_user, o.user, &ds, lambda);
            add_mat(&mut raw.sig_item, o.item, &ds, 1.0 - lambda);
            Ok(())
        },
        Raw::merge,
    )?;
    finish_personalized(raw, f, covs, &mat.users, &mat.items, hp, sigma_g, opts)
}

/// Pointwise gradient with `∂/∂R̂` supplied per observation, plus factor
/// priors. Shared with the PTF baseline.
pub(crate) fn pointwise_factor_grad(
    f: &LatentFactors,
    batch: &[Observation],
    hp: &Hyperparams,
    opts: GradOptions,
    dpred: impl Fn(&Observation) -> Vec<f64> + Sync,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let mut raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, o| {
            let g: Vec<f64> = dpred(o).iter().map(|x| x * opts.data_weight).collect();
            raw.add_pointwise(f, o.user, o.item, &g);
            Ok(())
        },
        Raw::merge,
    )?;
    factor_prior(&mut raw, f, hp, opts.scope);
    Ok(into_bundle(raw))
}

/// Pairwise gradient where each item yields `(u, i, j, geometry, ∂/∂μ)`.
pub(crate) fn pairwise_factor_grad<T: Sync>(
    f: &LatentFactors,
    batch: &[T],
    hp: &Hyperparams,
    opts: GradOptions,
    term: impl Fn(&T) -> (usize, usize, usize, OrderGeometry, f64) + Sync,
) -> Result<GradientBundle> {
    check_batch(batch)?;
    let (k, d) = (f.num_aspects(), f.dim());
    let mut raw = chunked_fold(
        batch,
        || Raw::new(k, d),
        |raw, t| {
            let (u, i, j, geo, a) = term(t);
            raw.add_pairwise(f, u, i, j, &geo, a * opts.data_weight);
            Ok(())
        },
        Raw::merge,
    )?;
    factor_prior(&mut raw, f, hp, opts.scope);
    Ok(into_bundle(raw))
}

/// Largest relative error in one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: String,
    pub n_params: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub blocks: Vec<BlockError>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    /// `block,n_params,max_rel_err` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,n_params,max_rel_err\n");
        for b in &self.blocks {
            s.push_str(&format!("{},{},{:e}\n", b.block, b.n_params, b.max_rel_err));
        }
        s
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Central differences of `f` at `x` against `grad`; returns the largest
/// relative error.
pub fn finite_difference_check_flat(x: &[f64], grad: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
    check_step(h)?;
    if x.len() != grad.len() {
        return Err(Error::DimensionMismatch("parameters vs gradient".into()));
    }
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        p[idx] = x[idx] + h;
        let up = f(&p);
        p[idx] = x[idx] - h;
        let down = f(&p);
        p[idx] = x[idx];
        worst = worst.max(relative_error(grad[idx], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum Block {
    U,
    V,
    W,
    LG,
    LUser,
    LItem,
}

fn entry(p: &mut ModelParams, block: Block, row: usize, idx: usize) -> &mut f64 {
    match block {
        Block::U => &mut p.factors.u.row_mut(row)[idx],
        Block::V => &mut p.factors.v.row_mut(row)[idx],
        Block::W => &mut p.factors.w.row_mut(row)[idx],
        Block::LG => &mut p.covs.global.matrix_mut().as_mut_slice()[idx],
        Block::LUser => &mut p.covs.users[row].matrix_mut().as_mut_slice()[idx],
        Block::LItem => &mut p.covs.items[row].matrix_mut().as_mut_slice()[idx],
    }
}

/// Compares every scalar of every block present in `analytic` against
/// central differences of `objective`. Rows missing from a sparse block count
/// as zero gradient.
pub fn finite_difference_check(
    params: &ModelParams,
    analytic: &GradientBundle,
    h: f64,
    objective: impl Fn(&ModelParams) -> Result<f64>,
) -> Result<FdReport> {
    check_step(h)?;
    let mut p = params.clone();
    let k = params.factors.num_aspects();
    let d = params.factors.dim();
    let mut blocks = Vec::new();
    let mut run =
        |name: &str, block: Block, rows: usize, width: usize, grad: &dyn Fn(usize, usize) -> f64| -> Result<()> {
            let mut worst: f64 = 0.0;
            for r in 0..rows {
                for c in 0..width {
                    let orig = *entry(&mut p, block, r, c);
                    *entry(&mut p, block, r, c) = orig + h;
                    let up = objective(&p)?;
                    *entry(&mut p, block, r, c) = orig - h;
                    let down = objective(&p)?;
                    *entry(&mut p, block, r, c) = orig;
                    worst = worst.max(relative_error(grad(r, c), (up - down) / (2.0 * h)));
                }
            }
            blocks.push(BlockError { block: name.to_string(), n_params: rows * width, max_rel_err: worst });
            Ok(())
        };
    let row_of = |m: &BTreeMap<usize, Vec<f64>>, r: usize, c: usize| m.get(&r).map_or(0.0, |v| v[c]);
    run("U", Block::U, params.factors.num_users(), d, &|r, c| row_of(&analytic.d_u, r, c))?;
    run("V", Block::V, params.factors.num_items(), d, &|r, c| row_of(&analytic.d_v, r, c))?;
    run("W", Block::W, k, d, &|r, c| analytic.d_w[(r, c)])?;
    if let Some(g) = &analytic.d_l_g {
        run("L_G", Block::LG, 1, k * k, &|_, c| g.as_slice()[c])?;
    }
    let mat_of = |m: &BTreeMap<usize, Matrix>, r: usize, c: usize| m.get(&r).map_or(0.0, |g| g.as_slice()[c]);
    if !analytic.d_l_user.is_empty() {
        run("L_user", Block::LUser, params.covs.users.len(), k * k, &|r, c| mat_of(&analytic.d_l_user, r, c))?;
    }
    if !analytic.d_l_item.is_empty() {
        run("L_item", Block::LItem, params.covs.items.len(), k * k, &|r, c| mat_of(&analytic.d_l_item, r, c))?;
    }
    Ok(FdReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = ½xᵀAx + bᵀx
        let a = [[3.0, 1.0], [1.0, 2.0]];
        let b = [0.5, -1.0];
        let f = |x: &[f64]| {
            0.5 * (a[0][0] * x[0] * x[0] + 2.0 * a[0][1] * x[0] * x[1] + a[1][1] * x[1] * x[1])
                + b[0] * x[0]
                + b[1] * x[1]
        };
        let x = [0.7, -1.3];
        let g = [a[0][0] * x[0] + a[0][1] * x[1] + b[0], a[1][0] * x[0] + a[1][1] * x[1] + b[1]];
        assert!(finite_difference_check_flat(&x, &g, 1e-4, f).unwrap() <= 1e-10);
        let bad = [g[0] * 2.0, g[1]];
        assert!(finite_difference_check_flat(&x, &bad, 1e-4, f).unwrap() > 1e-2);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(finite_difference_check_flat(&[0.0], &[0.0], 1e-2, |x| x[0]).is_err());
        assert!(finite_difference_check_flat(&[0.0], &[0.0], 1e-9, |x| x[0]).is_err());
    }

    #[test]
    fn bundle_add_is_entrywise() {
        let mut a = GradientBundle::empty(1, 2);
        a.d_u.insert(0, vec![1.0, 2.0]);
        let mut b = GradientBundle::empty(1, 2);
        b.d_u.insert(0, vec![0.5, 0.5]);
        b.d_u.insert(3, vec![1.0, 1.0]);
        b.d_l_g = Some(Matrix::identity(1));
        let c = a.clone().merge(b.clone());
        assert_eq!(c.d_u[&0], vec![1.5, 2.5]);
        assert_eq!(c.d_u[&3], vec![1.0, 1.0]);
        assert_eq!(c.d_l_g, Some(Matrix::identity(1)));
        assert_eq!(b.merge(a), c);
    }
}
