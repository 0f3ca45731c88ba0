//! Ranking quality (NDCG over candidate lists), explanation consistency
//! (MEC) and activity-group breakdowns.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{compose_pair_covariance, correlation_from_covariance, make_covariance};
use crate::data::Observation;
use crate::error::{Error, Result};
use crate::model::{LatentFactors, ModelParams};

pub const DEFAULT_LIST_SIZE: usize = 150;
pub const DEFAULT_BUCKET_EDGES: [usize; 7] = [5, 10, 20, 40, 80, 160, 320];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainKind {
    /// The observed rating, floored at zero.
    Graded,
    /// One for every test item rated on the target aspect.
    Binary,
}

impl std::str::FromStr for GainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graded" => Ok(GainKind::Graded),
            "binary" => Ok(GainKind::Binary),
            _ => Err(Error::InvalidInput(format!("unknown gain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub user: usize,
    pub items: Vec<usize>,
    /// Gain per entry of `items`; zero for fillers.
    pub relevance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    /// One list per user with test items, ascending by user.
    pub lists: Vec<CandidateList>,
    /// Lists that ran out of fillers before reaching the configured size.
    pub short_lists: usize,
}

/// Sorted, deduplicated items each user rated in any of `sources`.
pub fn observed_items(num_users: usize, sources: &[&[Observation]]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_users];
    for o in sources.iter().flat_map(|s| s.iter()) {
        out[o.user].push(o.item);
    }
    for v in &mut out {
        v.sort_unstable();
        v.dedup();
    }
    out
}

/// Per user: every test item, then fillers drawn without replacement from
/// the items the user never rated. Each user's fillers come from their own
/// generator stream, so lists do not depend on the aspect or on other users.
pub fn build_candidates(
    test: &[Observation],
    observed: &[Vec<usize>],
    num_items: usize,
    list_size: usize,
    aspect: usize,
    gain: GainKind,
    seed: u64,
) -> Result<Candidates> {
    let mut by_user: Vec<Vec<&Observation>> = vec![Vec::new(); observed.len()];
    for o in test {
        if o.user >= observed.len() || o.item >= num_items {
            return Err(Error::IndexOutOfRange { what: "test observation", index: o.user.max(o.item), len: num_items });
        }
        if aspect >= o.ratings.len() {
            return Err(Error::IndexOutOfRange { what: "aspect", index: aspect, len: o.ratings.len() });
        }
        by_user[o.user].push(o);
    }
    let mut lists = Vec::new();
    let mut short_lists = 0;
    for (user, rows) in by_user.iter_mut().enumerate() {
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|o| o.item);
        if rows.len() > list_size {
            return Err(Error::InvalidInput(format!(
                "user {user} has {} test items, more than the list size {list_size}",
                rows.len()
            )));
        }
        let mut items: Vec<usize> = rows.iter().map(|o| o.item).collect();
        let mut relevance: Vec<f64> = rows
            .iter()
            .map(|o| match (o.mask[aspect], gain) {
                (false, _) => 0.0,
                (true, GainKind::Binary) => 1.0,
                (true, GainKind::Graded) => o.ratings[aspect].max(0.0),
            })
            .collect();
        let seen = &observed[user];
        let pool: Vec<usize> =
            (0..num_items).filter(|i| seen.binary_search(i).is_err() && !items.contains(i)).collect();
        let want = list_size - items.len();
        if pool.len() < want {
            short_lists += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        for p in index::sample(&mut rng, pool.len(), want.min(pool.len())).into_iter() {
            items.push(pool[p]);
            relevance.push(0.0);
        }
        lists.push(CandidateList { user, items, relevance });
    }
    Ok(Candidates { lists, short_lists })
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains.enumerate().map(|(p, g)| g / ((p + 2) as f64).log2()).sum()
}

/// NDCG@k of one list; `scores[p]` belongs to `items[p]`. Higher scores rank
/// first and ties go to the smaller item index.
pub fn ndcg_at_k(scores: &[f64], items: &[usize], relevance: &[f64], k: usize) -> f64 {
    let mut ideal: Vec<f64> = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    if !(idcg > 0.0) {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    dcg(order.into_iter().take(k).map(|p| relevance[p])) / idcg
}

/// Per-user NDCG@k for each k, scoring candidates by the predicted rating on
/// `aspect`.
pub fn ndcg_per_user(f: &LatentFactors, lists: &[CandidateList], aspect: usize, ks: &[usize]) -> Vec<Vec<f64>> {
    let per_user: Vec<Vec<f64>> = lists
        .par_iter()
        .map(|c| {
            let scores: Vec<f64> = c.items.iter().map(|&i| f.predict_aspect(c.user, i, aspect)).collect();
            ks.iter().map(|&k| ndcg_at_k(&scores, &c.items, &c.relevance, k)).collect()
        })
        .collect();
    (0..ks.len()).map(|j| per_user.iter().map(|u| u[j]).collect()).collect()
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Pearson correlation of two equally long series.
pub fn mec(e: &[f64], s: &[f64]) -> Result<f64> {
    if e.len() != s.len() {
        return Err(Error::DimensionMismatch("error series differ in length".into()));
    }
    if e.len() < 2 {
        return Err(Error::UndefinedMetric("need at least two pairs".into()));
    }
    let n = e.len() as f64;
    let (me, ms) = (e.iter().sum::<f64>() / n, s.iter().sum::<f64>() / n);
    let (mut see, mut sss, mut ses) = (0.0, 0.0, 0.0);
    for (&a, &b) in e.iter().zip(s) {
        let (da, db) = (a - me, b - ms);
        see += da * da;
        sss += db * db;
        ses += da * db;
    }
    if !(see > 0.0) || !(sss > 0.0) {
        return Err(Error::UndefinedMetric("an error series has zero variance".into()));
    }
    Ok((ses / (see * sss).sqrt()).clamp(-1.0, 1.0))
}

/// How MEC picks the explaining aspect for each pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AspectSelector {
    Random,
    /// The aspect most correlated with the overall rating under `Σ_ui`.
    Correlation,
    /// The aspect with the highest predicted rating.
    HighestRating,
}

impl AspectSelector {
    pub const ALL: [AspectSelector; 3] =
        [AspectSelector::Random, AspectSelector::Correlation, AspectSelector::HighestRating];

    pub fn name(self) -> &'static str {
        match self {
            AspectSelector::Random => "random",
            AspectSelector::Correlation => "correlation",
            AspectSelector::HighestRating => "highest-rating",
        }
    }
}

impl std::str::FromStr for AspectSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AspectSelector::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown aspect selector {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MecReport {
    pub value: f64,
    pub n_pairs: usize,
    /// Pairs without both the overall and the selected rating.
    pub skipped: usize,
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (p, x) in xs.enumerate() {
        if x > best.1 {
            best = (p, x);
        }
    }
    best.0
}

/// MEC of a model on held-out pairs, with aspect 0 as the overall rating.
pub fn model_mec(
    params: &ModelParams,
    lambda: f64,
    test: &[Observation],
    selector: AspectSelector,
    seed: u64,
) -> Result<MecReport> {
    let f = &params.factors;
    let k = f.num_aspects();
    if k < 2 {
        return Err(Error::UndefinedMetric("MEC needs at least one aspect besides the overall rating".into()));
    }
    let mat = params.covs.materialize();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (mut e, mut s) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for o in test {
        if o.user >= f.num_users() || o.item >= f.num_items() || o.ratings.len() != k {
            return Err(Error::DimensionMismatch("test observation does not fit the model".into()));
        }
        let pred = f.predict_aspect_vector(o.user, o.item)?;
        let a = 1 + match selector {
            AspectSelector::Random => rng.random_range(0..k - 1),
            AspectSelector::HighestRating => argmax(pred[1..].iter().copied()),
            AspectSelector::Correlation => {
                let cov = compose_pair_covariance(&mat.users[o.user], &mat.items[o.item], lambda)?;
                let corr = correlation_from_covariance(&cov)?;
                argmax((1..k).map(|a| corr.get(0, a).abs()))
            }
        };
        if !(o.mask[0] && o.mask[a]) {
            skipped += 1;
            continue;
        }
        e.push(pred[0] - o.ratings[0]);
        s.push(pred[a] - o.ratings[a]);
    }
    Ok(MecReport { value: mec(&e, &s)?, n_pairs: e.len(), skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRow {
    pub lo: usize,
    /// Exclusive upper bound; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub n_users: usize,
    pub ndcg: Option<f64>,
}

/// Buckets `[0, e₀), [e₀, e₁), …, [e_last, ∞)` of training activity with the
/// mean score of the users in each.
pub fn group_by_activity(users: &[(usize, f64)], train_counts: &[usize], edges: &[usize]) -> Result<Vec<GroupRow>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
        return Err(Error::InvalidInput("bucket edges must be positive and strictly increasing".into()));
    }
    let mut bounds = vec![0];
    bounds.extend_from_slice(edges);
    let mut sums = vec![(0usize, 0.0); bounds.len()];
    for &(u, v) in users {
        let c =
            *train_counts.get(u).ok_or(Error::IndexOutOfRange { what: "user", index: u, len: train_counts.len() })?;
        let b = bounds.partition_point(|&lo| lo <= c) - 1;
        sums[b].0 += 1;
        sums[b].1 += v;
    }
    Ok(bounds
        .iter()
        .enumerate()
        .map(|(b, &lo)| GroupRow {
            lo,
            hi: bounds.get(b + 1).copied(),
            n_users: sums[b].0,
            ndcg: (sums[b].0 > 0).then(|| sums[b].1 / sums[b].0 as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub aspect: String,
    pub k: Option<usize>,
    pub value: f64,
    pub n_users: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,aspect,k,value,n_users\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.metric, r.aspect, k, r.value, r.n_users);
    }
    s
}

pub fn groups_csv(rows: &[GroupRow]) -> String {
    let mut s = String::from("bucket_lo,bucket_hi,n_users,ndcg\n");
    for r in rows {
        let hi = r.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
        let v = r.ndcg.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.lo, hi, r.n_users, v);
    }
    s
}

/// Global and entity-level correlation of a model, for inspection.
pub fn global_correlation(params: &ModelParams) -> Result<crate::covariance::CorrMatrix> {
    correlation_from_covariance(&make_covariance(&params.covs.global))
}
