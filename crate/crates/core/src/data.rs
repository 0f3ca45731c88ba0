//! Multi-aspect rating data: ingestion, filtering, splitting, and a
//! synthetic generator that samples from the model itself.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::{correlation_from_covariance, Cholesky, CorrMatrix, CovFactor, CovMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{CovarianceSet, LatentFactors, ModelParams};

/// One rated (user, item) pair. Masked aspects carry rating 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub user: usize,
    pub item: usize,
    pub ratings: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Observation {
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Inclusive bounds on observed ratings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const STARS: RatingScale = RatingScale { min: 1.0, max: 5.0 };
    pub const UNBOUNDED: RatingScale = RatingScale { min: f64::NEG_INFINITY, max: f64::INFINITY };

    pub fn contains(&self, r: f64) -> bool {
        r >= self.min && r <= self.max
    }

    pub fn is_bounded(&self) -> bool {
        self.min.is_finite() && self.max.is_finite()
    }
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale::STARS
    }
}

/// Dense indices for string ids, in order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut m = IdMap::new();
        for id in ids {
            if m.get(&id).is_some() {
                return Err(Error::InvalidInput(format!("duplicate id {id:?}")));
            }
            m.intern(&id);
        }
        Ok(m)
    }

    /// Index of `id`, inserting it if new.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: IdMap,
    pub items: IdMap,
    /// Aspect names; position 0 is the overall rating by convention.
    pub aspects: Vec<String>,
    pub observations: Vec<Observation>,
    pub scale: RatingScale,
}

impl Dataset {
    /// Checks every structural invariant.
    pub fn new(
        users: IdMap,
        items: IdMap,
        aspects: Vec<String>,
        observations: Vec<Observation>,
        scale: RatingScale,
    ) -> Result<Self> {
        let ds = Dataset { users, items, aspects, observations, scale };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_aspects();
        if k == 0 {
            return Err(Error::InvalidInput("no aspects".into()));
        }
        validate_observations(&self.observations, self.num_users(), self.num_items(), k, self.scale)?;
        let mut seen_u = vec![false; self.num_users()];
        let mut seen_i = vec![false; self.num_items()];
        for o in &self.observations {
            seen_u[o.user] = true;
            seen_i[o.item] = true;
        }
        if let Some(u) = seen_u.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("user {:?} has no observations", self.users.id(u))));
        }
        if let Some(i) = seen_i.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("item {:?} has no observations", self.items.id(i))));
        }
        Ok(())
    }
}

fn validate_observations(obs: &[Observation], m: usize, n: usize, k: usize, scale: RatingScale) -> Result<()> {
    let mut pairs = std::collections::HashSet::with_capacity(obs.len());
    for o in obs {
        if o.user >= m {
            return Err(Error::IndexOutOfRange { what: "user", index: o.user, len: m });
        }
        if o.item >= n {
            return Err(Error::IndexOutOfRange { what: "item", index: o.item, len: n });
        }
        if o.ratings.len() != k || o.mask.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "observation with {} ratings for {k} aspects",
                o.ratings.len()
            )));
        }
        for (&r, &msk) in o.ratings.iter().zip(&o.mask) {
            if msk && !(r.is_finite() && scale.contains(r)) {
                return Err(Error::InvalidInput(format!("rating {r} outside scale")));
            }
            if !msk && r != 0.0 {
                return Err(Error::InvalidInput("masked rating must be 0".into()));
            }
        }
        if !pairs.insert((o.user, o.item)) {
            return Err(Error::InvalidInput(format!("duplicate pair ({}, {})", o.user, o.item)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFormat {
    pub delimiter: char,
    pub missing_token: String,
    pub scale: RatingScale,
}

impl Default for TextFormat {
    fn default() -> Self {
        TextFormat { delimiter: '\t', missing_token: "NA".into(), scale: RatingScale::STARS }
    }
}

/// What ingestion had to resolve on its own.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Rows that repeated an earlier (user, item) pair and replaced it.
    pub duplicates: usize,
}

/// Rows parsed from delimited text before entities are indexed.
struct RawRows {
    aspects: Vec<String>,
    rows: Vec<(String, String, Vec<f64>, Vec<bool>)>,
}

fn parse_rows(text: &str, path: &Path, fmt: &TextFormat) -> Result<RawRows> {
    let perr = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((hline, header)) = lines.next() else {
        return Err(Error::EmptyDataset(format!("{} has no header", path.display())));
    };
    let cols: Vec<&str> = header.split(fmt.delimiter).map(str::trim).collect();
    if cols.len() < 3 {
        return Err(perr(hline + 1, "header needs user_id, item_id and at least one aspect".into()));
    }
    let aspects: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let k = aspects.len();
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let lineno = ln + 1;
        let fields: Vec<&str> = line.split(fmt.delimiter).map(str::trim).collect();
        if fields.len() != k + 2 {
            return Err(perr(lineno, format!("expected {} columns, found {}", k + 2, fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(perr(lineno, "empty user or item id".into()));
        }
        let mut ratings = vec![0.0; k];
        let mut mask = vec![false; k];
        for (a, f) in fields[2..].iter().enumerate() {
            if *f == fmt.missing_token {
                continue;
            }
            let r: f64 =
                f.parse().map_err(|_| perr(lineno, format!("non-numeric rating {f:?} for aspect {}", aspects[a])))?;
            if !r.is_finite() {
                return Err(perr(lineno, format!("non-finite rating {f:?}")));
            }
            if !fmt.scale.contains(r) {
                return Err(perr(
                    lineno,
                    format!("rating {r} for aspect {} outside [{}, {}]", aspects[a], fmt.scale.min, fmt.scale.max),
                ));
            }
            ratings[a] = r;
            mask[a] = true;
        }
        rows.push((fields[0].to_string(), fields[1].to_string(), ratings, mask));
    }
    Ok(RawRows { aspects, rows })
}

/// Parses delimited text. Duplicate (user, item) rows keep the last values.
pub fn parse_dataset(text: &str, path: &Path, fmt: &TextFormat) -> Result<(Dataset, IngestReport)> {
    let raw = parse_rows(text, path, fmt)?;
    if raw.rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no observations", path.display())));
    }
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut at: HashMap<(usize, usize), usize> = HashMap::new();
    let mut observations: Vec<Observation> = Vec::new();
    let mut report = IngestReport::default();
    for (uid, iid, ratings, mask) in raw.rows {
        let user = users.intern(&uid);
        let item = items.intern(&iid);
        let o = Observation { user, item, ratings, mask };
        match at.get(&(user, item)) {
            Some(&pos) => {
                observations[pos] = o;
                report.duplicates += 1;
            }
            None => {
                at.insert((user, item), observations.len());
                observations.push(o);
            }
        }
    }
    let ds = Dataset::new(users, items, raw.aspects, observations, fmt.scale)?;
    Ok((ds, report))
}

pub fn ingest(path: &Path, fmt: &TextFormat) -> Result<(Dataset, IngestReport)> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, path, fmt)
}

fn write_header(out: &mut String, aspects: &[String], delim: char) {
    out.push_str("user_id");
    out.push(delim);
    out.push_str("item_id");
    for a in aspects {
        out.push(delim);
        out.push_str(a);
    }
    out.push('\n');
}

fn write_rows(out: &mut String, users: &IdMap, items: &IdMap, obs: &[Observation], fmt: &TextFormat) {
    for o in obs {
        out.push_str(users.id(o.user));
        out.push(fmt.delimiter);
        out.push_str(items.id(o.item));
        for (&r, &m) in o.ratings.iter().zip(&o.mask) {
            out.push(fmt.delimiter);
            if m {
                // `Display` for f64 prints the shortest string that parses back exactly
                let _ = write!(out, "{r}");
            } else {
                out.push_str(&fmt.missing_token);
            }
        }
        out.push('\n');
    }
}

/// Renders a dataset in the ingest format.
pub fn format_dataset(ds: &Dataset, fmt: &TextFormat) -> String {
    let mut out = String::new();
    write_header(&mut out, &ds.aspects, fmt.delimiter);
    write_rows(&mut out, &ds.users, &ds.items, &ds.observations, fmt);
    out
}

pub fn write_dataset(ds: &Dataset, path: &Path, fmt: &TextFormat) -> Result<()> {
    std::fs::write(path, format_dataset(ds, fmt))?;
    Ok(())
}

/// Drops users and items with fewer than `min_count` observations,
/// repeating until every survivor qualifies, then reindexes densely.
pub fn filter_min_observations(ds: &Dataset, min_count: usize) -> Result<Dataset> {
    let mut keep: Vec<bool> = vec![true; ds.observations.len()];
    loop {
        let mut uc = vec![0usize; ds.num_users()];
        let mut ic = vec![0usize; ds.num_items()];
        for (o, _) in ds.observations.iter().zip(&keep).filter(|(_, k)| **k) {
            uc[o.user] += 1;
            ic[o.item] += 1;
        }
        let mut changed = false;
        for (o, k) in ds.observations.iter().zip(keep.iter_mut()) {
            if *k && (uc[o.user] < min_count || ic[o.item] < min_count) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let observations: Vec<Observation> = ds
        .observations
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(o, _)| Observation {
            user: users.intern(ds.users.id(o.user)),
            item: items.intern(ds.items.id(o.item)),
            ratings: o.ratings.clone(),
            mask: o.mask.clone(),
        })
        .collect();
    if observations.is_empty() {
        return Err(Error::EmptyDataset(format!("no observations survive a minimum count of {min_count}")));
    }
    Dataset::new(users, items, ds.aspects.clone(), observations, ds.scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.70, val_frac: 0.15, test_frac: 0.15, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("split fractions {f:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Train, validation and test observations over shared id maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub users: IdMap,
    pub items: IdMap,
    pub aspects: Vec<String>,
    pub scale: RatingScale,
    pub train: Vec<Observation>,
    pub val: Vec<Observation>,
    pub test: Vec<Observation>,
    /// Held-out observations moved into train because their user or item
    /// would otherwise be absent from it.
    pub reassigned: usize,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }

    /// Training observations per user.
    pub fn train_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_users()];
        for o in &self.train {
            c[o.user] += 1;
        }
        c
    }

    fn part(&self, obs: &[Observation]) -> Dataset {
        Dataset {
            users: self.users.clone(),
            items: self.items.clone(),
            aspects: self.aspects.clone(),
            observations: obs.to_vec(),
            scale: self.scale,
        }
    }

    /// Writes `train.tsv`, `val.tsv` and `test.tsv` into `dir`.
    pub fn write(&self, dir: &Path, fmt: &TextFormat) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, obs) in [("train.tsv", &self.train), ("val.tsv", &self.val), ("test.tsv", &self.test)] {
            let mut out = String::new();
            write_header(&mut out, &self.aspects, fmt.delimiter);
            write_rows(&mut out, &self.users, &self.items, obs, fmt);
            std::fs::write(dir.join(name), out)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`SplitDataset::write`]. Ids are indexed
    /// in order of first appearance across train, val, then test.
    pub fn load(dir: &Path, fmt: &TextFormat) -> Result<Self> {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        let mut aspects: Option<Vec<String>> = None;
        let mut parts = Vec::new();
        for name in ["train.tsv", "val.tsv", "test.tsv"] {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path)?;
            let raw = parse_rows(&text, &path, fmt)?;
            match &aspects {
                Some(a) if *a != raw.aspects => {
                    return Err(Error::InvalidInput(format!("{} has different aspects", path.display())))
                }
                Some(_) => {}
                None => aspects = Some(raw.aspects.clone()),
            }
            let obs: Vec<Observation> = raw
                .rows
                .into_iter()
                .map(|(u, i, ratings, mask)| Observation {
                    user: users.intern(&u),
                    item: items.intern(&i),
                    ratings,
                    mask,
                })
                .collect();
            parts.push(obs);
        }
        let test = parts.pop().unwrap_or_default();
        let val = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        let aspects = aspects.unwrap_or_default();
        let all: Vec<Observation> = train.iter().chain(&val).chain(&test).cloned().collect();
        validate_observations(&all, users.len(), items.len(), aspects.len(), fmt.scale)?;
        if train.is_empty() {
            return Err(Error::EmptyDataset("training split is empty".into()));
        }
        Ok(SplitDataset { users, items, aspects, scale: fmt.scale, train, val, test, reassigned: 0 })
    }

    pub fn train_dataset(&self) -> Dataset {
        self.part(&self.train)
    }
}

/// Uniform observation-level split with cold-start reassignment.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let n = ds.observations.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = (spec.train_frac * n as f64).round() as usize;
    let n_val = ((spec.val_frac * n as f64).round() as usize).min(n - n_train.min(n));
    let mut part = vec![0u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        part[idx] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let mut in_train_u = vec![false; ds.num_users()];
    let mut in_train_i = vec![false; ds.num_items()];
    for (o, &p) in ds.observations.iter().zip(&part) {
        if p == 0 {
            in_train_u[o.user] = true;
            in_train_i[o.item] = true;
        }
    }
    let mut reassigned = 0;
    for (o, p) in ds.observations.iter().zip(part.iter_mut()) {
        if *p != 0 && !(in_train_u[o.user] && in_train_i[o.item]) {
            *p = 0;
            reassigned += 1;
        }
    }
    let pick = |which: u8| -> Vec<Observation> {
        ds.observations.iter().zip(&part).filter(|(_, &p)| p == which).map(|(o, _)| o.clone()).collect()
    };
    let (train, val, test) = (pick(0), pick(1), pick(2));
    if val.is_empty() || test.is_empty() {
        return Err(Error::ImpossibleSplit(format!(
            "{n} observations leave an empty validation or test split after moving {reassigned} cold-start observations to train"
        )));
    }
    Ok(SplitDataset {
        users: ds.users.clone(),
        items: ds.items.clone(),
        aspects: ds.aspects.clone(),
        scale: ds.scale,
        train,
        val,
        test,
        reassigned,
    })
}

/// Settings for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub lambda: f64,
    /// Standard deviation of the true latent factor entries.
    pub factor_scale: f64,
    /// Standard deviation of the entries of `A` in `Σ = AAᵀ + 0.1I`.
    pub cov_scale: f64,
    /// Fraction of (user, item) pairs observed.
    pub density: f64,
    /// Round and clamp ratings to the 1 to 5 scale.
    pub discretize: bool,
    pub seed: u64,
    /// Share of each personalized `A` drawn independently; the rest is the
    /// global `A`. At 1 every entity's covariance is independent.
    pub personal_mix: f64,
    /// Target correlation structure of the global `A`; `None` draws it at
    /// random like the personalized ones.
    pub global_correlation: Option<CorrMatrix>,
    /// Tilts which pairs get observed toward pairs with a higher true
    /// overall rating: weight `exp(β·z)` for the standardized true mean `z`.
    pub exposure_bias: f64,
    /// Constant added to every true rating mean.
    pub offset: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            m: 200,
            n: 100,
            k: 4,
            d: 5,
            lambda: 0.5,
            factor_scale: 1.0,
            cov_scale: 1.0,
            density: 0.3,
            discretize: false,
            seed: 0,
            personal_mix: 1.0,
            global_correlation: None,
            exposure_bias: 0.0,
            offset: 0.0,
        }
    }
}

/// Covariance floor added to every generated `AAᵀ`.
pub const SYNTH_COV_FLOOR: f64 = 0.1;

/// The parameters that generated a synthetic dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// True factors and Cholesky factors of every true covariance.
    pub params: ModelParams,
    pub sigma_g: CovMatrix,
    pub users: Vec<CovMatrix>,
    pub items: Vec<CovMatrix>,
    pub lambda: f64,
    pub offset: f64,
}

impl GroundTruth {
    /// Mean of `λΣ_u + (1−λ)Σ_i` over the given pairs.
    pub fn pooled_covariance(&self, obs: &[Observation]) -> Result<CovMatrix> {
        if obs.is_empty() {
            return Err(Error::EmptyDataset("no pairs to pool over".into()));
        }
        let k = self.sigma_g.dim();
        let mut acc = Matrix::zeros(k, k);
        for o in obs {
            acc.add_scaled(self.users[o.user].matrix(), self.lambda);
            acc.add_scaled(self.items[o.item].matrix(), 1.0 - self.lambda);
        }
        CovMatrix::new(acc.scaled(1.0 / obs.len() as f64))
    }

    pub fn pooled_correlation(&self, obs: &[Observation]) -> Result<CorrMatrix> {
        correlation_from_covariance(&self.pooled_covariance(obs)?)
    }
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

fn cov_from_a(a: &Matrix) -> Result<CovMatrix> {
    let mut s = a.gram();
    for d in 0..s.rows() {
        s[(d, d)] += SYNTH_COV_FLOOR;
    }
    CovMatrix::new(s)
}

fn chol_factor(s: &CovMatrix) -> Result<CovFactor> {
    let c = Cholesky::try_plain(s.matrix())
        .ok_or_else(|| Error::DegenerateCovariance("generated covariance is not positive definite".into()))?;
    CovFactor::new(c.lower().clone())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.m == 0 || self.n == 0 || self.k == 0 || self.d == 0 {
            return bad("M, N, K and d must be positive".into());
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density {} outside (0, 1]", self.density));
        }
        if self.density * ((self.m * self.n) as f64) < 1.0 {
            return bad(format!("density {} yields no observations for {}x{} pairs", self.density, self.m, self.n));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.personal_mix) {
            return bad("lambda and personal_mix must lie in [0, 1]".into());
        }
        if !(self.factor_scale >= 0.0) || !(self.cov_scale >= 0.0) {
            return bad("scales must be nonnegative".into());
        }
        if let Some(c) = &self.global_correlation {
            if c.dim() != self.k {
                return bad("global correlation dimension differs from K".into());
            }
        }
        if !self.exposure_bias.is_finite() || !self.offset.is_finite() {
            return bad("exposure_bias and offset must be finite".into());
        }
        Ok(())
    }
}

/// Picks `count` distinct pairs: first one pair per user and per item so no
/// entity is left unobserved, then the rest by weighted sampling without
/// replacement (exponential keys).
fn choose_pairs(cfg: &GenConfig, z: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (m, n) = (cfg.m, cfg.n);
    let mut chosen = vec![false; m * n];
    let mut pairs = Vec::with_capacity(count);
    let mut take = |u: usize, i: usize, pairs: &mut Vec<(usize, usize)>| {
        if !chosen[u * n + i] {
            chosen[u * n + i] = true;
            pairs.push((u, i));
        }
    };
    for u in 0..m {
        let i = rng.random_range(0..n);
        take(u, i, &mut pairs);
    }
    for i in 0..n {
        let u = rng.random_range(0..m);
        take(u, i, &mut pairs);
    }
    let mut keys: Vec<(f64, usize)> = (0..m * n)
        .map(|p| {
            let r: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (r.ln() * (-cfg.exposure_bias * z[p]).exp(), p)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, p) in &keys {
        if pairs.len() >= count {
            break;
        }
        take(p / n, p % n, &mut pairs);
    }
    pairs.sort_unstable();
    pairs
}

/// Samples a dataset from the generative model together with the
/// parameters that produced it. Users and items are named `u<index>` and
/// `i<index>`; aspects `overall`, `a1`, `a2`, ...
pub fn generate_synthetic(cfg: &GenConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let (m, n, k, d) = (cfg.m, cfg.n, cfg.k, cfg.d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let factors = LatentFactors::new(
        normal_matrix(m, d, cfg.factor_scale, &mut rng),
        normal_matrix(n, d, cfg.factor_scale, &mut rng),
        normal_matrix(k, d, cfg.factor_scale, &mut rng),
    )?;

    let a_g = match &cfg.global_correlation {
        Some(c) => {
            let l = Cholesky::try_plain(c.matrix())
                .ok_or_else(|| Error::DegenerateCovariance("target correlation is not positive definite".into()))?;
            // same expected diagonal of AAᵀ as a K-column matrix of N(0, s²) entries
            l.lower().scaled(cfg.cov_scale * (k as f64).sqrt())
        }
        None => normal_matrix(k, k, cfg.cov_scale, &mut rng),
    };
    let sigma_g = cov_from_a(&a_g)?;
    let (keep, fresh) = ((1.0 - cfg.personal_mix).sqrt(), cfg.personal_mix.sqrt());
    let personal = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<CovMatrix>> {
        (0..count)
            .map(|_| {
                let mut a = normal_matrix(k, k, cfg.cov_scale, rng).scaled(fresh);
                a.add_scaled(&a_g, keep);
                cov_from_a(&a)
            })
            .collect()
    };
    let users = personal(m, &mut rng)?;
    let items = personal(n, &mut rng)?;

    let mut means = vec![0.0; m * n];
    let mut buf = vec![0.0; k];
    for u in 0..m {
        for i in 0..n {
            factors.predict_into(u, i, &mut buf);
            means[u * n + i] = buf[0];
        }
    }
    let mean0 = means.iter().sum::<f64>() / means.len() as f64;
    let sd0 = (means.iter().map(|x| (x - mean0).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
    let z: Vec<f64> = means.iter().map(|x| if sd0 > 0.0 { (x - mean0) / sd0 } else { 0.0 }).collect();
    let count = ((cfg.density * (m * n) as f64).round() as usize).clamp(1, m * n);
    let pairs = choose_pairs(cfg, &z, count, &mut rng);

    let scale = if cfg.discretize { RatingScale::STARS } else { RatingScale::UNBOUNDED };
    let mut observations = Vec::with_capacity(pairs.len());
    for (u, i) in pairs {
        let mut s = users[u].matrix().scaled(cfg.lambda);
        s.add_scaled(items[i].matrix(), 1.0 - cfg.lambda);
        let l = Cholesky::with_jitter(&s)?;
        let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        factors.predict_into(u, i, &mut buf);
        let noise = l.lower().mat_vec(&eps);
        let ratings: Vec<f64> = buf
            .iter()
            .zip(&noise)
            .map(|(mu, e)| {
                let r = mu + cfg.offset + e;
                if cfg.discretize {
                    r.round().clamp(1.0, 5.0)
                } else {
                    r
                }
            })
            .collect();
        observations.push(Observation { user: u, item: i, ratings, mask: vec![true; k] });
    }

    let user_ids = IdMap::from_ids((0..m).map(|u| format!("u{u}")))?;
    let item_ids = IdMap::from_ids((0..n).map(|i| format!("i{i}")))?;
    let aspects: Vec<String> = std::iter::once("overall".to_string()).chain((1..k).map(|a| format!("a{a}"))).collect();
    let ds = Dataset::new(user_ids, item_ids, aspects, observations, scale)?;

    let covs = CovarianceSet {
        global: chol_factor(&sigma_g)?,
        users: users.iter().map(chol_factor).collect::<Result<_>>()?,
        items: items.iter().map(chol_factor).collect::<Result<_>>()?,
    };
    let truth = GroundTruth {
        params: ModelParams { factors, covs },
        sigma_g,
        users,
        items,
        lambda: cfg.lambda,
        offset: cfg.offset,
    };
    Ok((ds, truth))
}

/// Pairwise-complete sample covariance of the aspect ratings: each entry
/// uses the observations where both aspects are present.
pub fn empirical_covariance(obs: &[Observation], k: usize) -> Matrix {
    let mut sum = vec![0.0; k * k];
    let mut sum_a = vec![0.0; k * k];
    let mut sum_b = vec![0.0; k * k];
    let mut count = vec![0usize; k * k];
    for o in obs {
        for a in 0..k {
            if !o.mask[a] {
                continue;
            }
            for b in 0..k {
                if !o.mask[b] {
                    continue;
                }
                let p = a * k + b;
                sum[p] += o.ratings[a] * o.ratings[b];
                sum_a[p] += o.ratings[a];
                sum_b[p] += o.ratings[b];
                count[p] += 1;
            }
        }
    }
    Matrix::from_fn(k, k, |a, b| {
        let p = a * k + b;
        let c = count[p] as f64;
        if count[p] < 2 {
            0.0
        } else {
            (sum[p] - sum_a[p] * sum_b[p] / c) / (c - 1.0)
        }
    })
}
