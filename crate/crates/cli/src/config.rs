//! Flat `key = value` run configuration. One setting per line, `#` starts a
//! comment, keys mirror the hyperparameter and trainer field names.

use std::collections::BTreeMap;
use std::str::FromStr;

use pmtf_core::{BaselineKind, CovInit, Mode, TrainConfig};

use crate::error::{usage, CliResult};

pub const KEYS: &[&str] = &[
    "aspect_weights",
    "baseline_aspect",
    "cov_init",
    "cov_learning_rate",
    "d",
    "lambda",
    "learning_rate",
    "max_em_steps",
    "min_personal_obs",
    "noise_sigma2",
    "nu_g",
    "nu_p",
    "patience",
    "restarts",
    "samples_per_iter",
    "seed",
    "sgd_iters_per_em",
    "sigma2_u",
    "sigma2_v",
    "sigma2_w",
    "validation_tolerance",
];

/// Parses the file into key/value pairs, rejecting unknown and repeated keys.
pub fn parse(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(usage(format!("config line {}: unknown key {k:?}", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(usage(format!("config line {}: {k} given twice", n + 1)));
        }
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

pub fn apply(cfg: &mut TrainConfig, key: &str, v: &str) -> CliResult<()> {
    let hp = &mut cfg.hp;
    match key {
        "aspect_weights" => {
            hp.aspect_weights = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|x| num(key, x.trim())).collect::<CliResult<_>>()?
            }
        }
        "baseline_aspect" => cfg.baseline.aspect = num(key, v)?,
        "cov_init" => cfg.cov_init = v.parse::<CovInit>().map_err(|e| usage(e.to_string()))?,
        "cov_learning_rate" => cfg.cov_learning_rate = Some(num(key, v)?),
        "d" => hp.d = num(key, v)?,
        "lambda" => hp.lambda = num(key, v)?,
        "learning_rate" => hp.learning_rate = num(key, v)?,
        "max_em_steps" => cfg.max_em_steps = num(key, v)?,
        "min_personal_obs" => cfg.min_personal_obs = num(key, v)?,
        "noise_sigma2" => cfg.baseline.noise_sigma2 = num(key, v)?,
        "nu_g" => hp.nu_g = num(key, v)?,
        "nu_p" => hp.nu_p = num(key, v)?,
        "patience" => cfg.patience = num(key, v)?,
        "restarts" => cfg.restarts = num(key, v)?,
        "samples_per_iter" => hp.samples_per_iter = num(key, v)?,
        "seed" => hp.seed = num(key, v)?,
        "sgd_iters_per_em" => hp.sgd_iters_per_em = num(key, v)?,
        "sigma2_u" => hp.sigma2_u = num(key, v)?,
        "sigma2_v" => hp.sigma2_v = num(key, v)?,
        "sigma2_w" => hp.sigma2_w = num(key, v)?,
        "validation_tolerance" => cfg.validation_tolerance = num(key, v)?,
        _ => return Err(usage(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// A config for `mode` with every default, then the file's overrides.
pub fn build(mode: Mode, entries: &BTreeMap<String, String>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig { mode, ..Default::default() };
    cfg.baseline.kind = if mode == Mode::BprBaseline { BaselineKind::Bpr } else { BaselineKind::Ptf };
    for (k, v) in entries {
        apply(&mut cfg, k, v)?;
    }
    Ok(cfg)
}

/// Every setting in effect, in the file's own syntax.
pub fn snapshot(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let hp = &cfg.hp;
    let weights: Vec<String> = hp.aspect_weights.iter().map(f64::to_string).collect();
    let cov_init = match cfg.cov_init {
        CovInit::Empirical => "empirical",
        CovInit::Diagonal => "diagonal",
    };
    [
        ("aspect_weights", weights.join(",")),
        ("baseline_aspect", cfg.baseline.aspect.to_string()),
        ("cov_init", cov_init.to_string()),
        ("cov_learning_rate", cfg.cov_rate().to_string()),
        ("d", hp.d.to_string()),
        ("lambda", hp.lambda.to_string()),
        ("learning_rate", hp.learning_rate.to_string()),
        ("max_em_steps", cfg.max_em_steps.to_string()),
        ("min_personal_obs", cfg.min_personal_obs.to_string()),
        ("model", cfg.mode.name().to_string()),
        ("noise_sigma2", cfg.baseline.noise_sigma2.to_string()),
        ("nu_g", hp.nu_g.to_string()),
        ("nu_p", hp.nu_p.to_string()),
        ("patience", cfg.patience.to_string()),
        ("restarts", cfg.restarts.to_string()),
        ("samples_per_iter", hp.samples_per_iter.to_string()),
        ("seed", hp.seed.to_string()),
        ("sgd_iters_per_em", hp.sgd_iters_per_em.to_string()),
        ("sigma2_u", hp.sigma2_u.to_string()),
        ("sigma2_v", hp.sigma2_v.to_string()),
        ("sigma2_w", hp.sigma2_w.to_string()),
        ("validation_tolerance", cfg.validation_tolerance.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}
