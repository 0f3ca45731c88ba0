use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use pmtf_core::checkpoint::write_atomic;
use pmtf_core::covariance::{correlation_from_covariance, make_covariance, matrix_to_csv, total_correlation_sides};
use pmtf_core::data::{self, RatingScale, TextFormat};
use pmtf_core::eval::{self, MetricRow, DEFAULT_BUCKET_EDGES};
use pmtf_core::gradcheck::{GradCheckProblem, ObjectiveId};
use pmtf_core::{
    em_fit, AspectSelector, Checkpoint, CorrMatrix, CovMatrix, Error, GainKind, GenConfig, Hyperparams, Matrix, Mode,
    Observation, SplitDataset, SplitSpec,
};

use crate::config;
use crate::error::{usage, CliError, CliResult};
use crate::manifest::{sibling_manifest, ManifestBuilder};
use crate::{EvaluateArgs, GradCheckArgs, IngestArgs, InspectArgs, SynthArgs, TrainArgs};

/// Gradient checks pass at or below this relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

const SPLIT_FILES: [&str; 3] = ["train.tsv", "val.tsv", "test.tsv"];

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(())
}

fn parse_scale(s: &str) -> CliResult<RatingScale> {
    if s == "unbounded" {
        return Ok(RatingScale::UNBOUNDED);
    }
    let bad = || usage(format!("--scale {s:?}: expected min:max or unbounded"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let (min, max): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if !(min.is_finite() && max.is_finite() && min < max) {
        return Err(bad());
    }
    Ok(RatingScale { min, max })
}

/// Split files are validated at ingest time; reloading them only needs to
/// parse, so the scale is left open.
fn load_splits(dir: &Path) -> CliResult<SplitDataset> {
    let fmt = TextFormat { scale: RatingScale::UNBOUNDED, ..Default::default() };
    Ok(SplitDataset::load(dir, &fmt)?)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| usage(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

pub fn ingest(a: IngestArgs) -> CliResult<()> {
    let scale = parse_scale(&a.scale)?;
    let fmt = TextFormat { delimiter: a.delimiter, missing_token: a.missing_token.clone(), scale };
    let mut man = ManifestBuilder::new("ingest", a.seed);
    man.input(&a.input)?;
    let (ds, report) = data::ingest(&a.input, &fmt)?;
    if report.duplicates > 0 {
        eprintln!("pmtf: {} duplicate rows replaced earlier ratings", report.duplicates);
    }
    let kept = data::filter_min_observations(&ds, a.min_count)?;
    let spec = SplitSpec { seed: a.seed, ..Default::default() };
    let splits = data::split(&kept, &spec)?;
    create_dir(&a.out)?;
    splits.write(&a.out, &TextFormat { scale, ..Default::default() })?;
    eprintln!(
        "pmtf: {} users, {} items, {} observations ({} train, {} val, {} test; {} moved to train)",
        splits.num_users(),
        splits.num_items(),
        kept.observations.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.reassigned
    );
    man.config("delimiter", a.delimiter.escape_default());
    man.config("missing_token", &a.missing_token);
    man.config("min_count", a.min_count);
    man.config("scale", &a.scale);
    man.config("split", format!("{}/{}/{}", spec.train_frac, spec.val_frac, spec.test_frac));
    for f in SPLIT_FILES {
        man.output(&a.out.join(f));
    }
    man.write(&a.out.join("manifest.json"))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mode: Mode = a.model.parse().map_err(|e: Error| usage(e.to_string()))?;
    let entries = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            config::parse(&text)?
        }
        None => Default::default(),
    };
    let mut cfg = config::build(mode, &entries)?;
    if let Some(s) = a.max_em_steps {
        cfg.max_em_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.hp.seed = s;
    }
    let splits = load_splits(&a.data)?;
    let mut man = ManifestBuilder::new("train", cfg.hp.seed);
    for f in SPLIT_FILES {
        man.input(&a.data.join(f))?;
    }
    man.configs(config::snapshot(&cfg));
    man.config("threads", a.threads);

    let mut log = format!("{}\n", pmtf_core::HistoryEntry::CSV_HEADER);
    let outcome = with_threads(a.threads, || {
        em_fit(&cfg, &splits, |e| {
            log.push_str(&e.to_csv());
            log.push('\n');
        })
    })??;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".history.csv");
        a.out.with_file_name(name)
    });
    write_text(&log_path, &log)?;
    let ckpt = Checkpoint::from_params(
        &outcome.params,
        &cfg.hp,
        mode.name(),
        &splits.aspects,
        splits.users.ids(),
        splits.items.ids(),
    )?;
    ckpt.save(&a.out)?;
    man.config("em_steps", outcome.em_steps);
    man.config("converged", outcome.converged);
    man.output(&a.out);
    man.output(&log_path);
    man.write(&sibling_manifest(&a.out))?;
    match outcome.failure {
        Some(e) => {
            eprintln!("pmtf: training stopped; {} holds the last finite parameters", a.out.display());
            Err(CliError::Core(e))
        }
        None => Ok(()),
    }
}

/// Reindexes observations from the dataset's id maps into the checkpoint's.
fn remap(
    obs: &[Observation],
    splits: &SplitDataset,
    users: &HashMap<&str, usize>,
    items: &HashMap<&str, usize>,
) -> CliResult<Vec<Observation>> {
    obs.iter()
        .map(|o| {
            let (uid, iid) = (splits.users.id(o.user), splits.items.id(o.item));
            let missing = |what, id: &str| Error::DimensionMismatch(format!("{what} {id:?} is not in the checkpoint"));
            Ok(Observation {
                user: *users.get(uid).ok_or_else(|| missing("user", uid))?,
                item: *items.get(iid).ok_or_else(|| missing("item", iid))?,
                ..o.clone()
            })
        })
        .collect()
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    if a.ndcg_k.is_empty() || a.ndcg_k.contains(&0) {
        return Err(usage("--ndcg-k needs positive cutoffs"));
    }
    if a.candidates == 0 {
        return Err(usage("--candidates must be positive"));
    }
    let gain: GainKind = a.gain.parse().map_err(|e: Error| usage(e.to_string()))?;
    let selectors: Vec<AspectSelector> =
        a.mec_selector.iter().map(|s| s.parse().map_err(|e: Error| usage(e.to_string()))).collect::<CliResult<_>>()?;

    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params = ckpt.to_params()?;
    let splits = load_splits(&a.data)?;
    if splits.aspects != ckpt.aspects {
        return Err(Error::DimensionMismatch(format!(
            "dataset aspects {:?} differ from checkpoint aspects {:?}",
            splits.aspects, ckpt.aspects
        ))
        .into());
    }
    if splits.test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()).into());
    }
    let user_ids = ckpt.user_ids();
    let item_ids = ckpt.item_ids();
    let users: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let items: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let train = remap(&splits.train, &splits, &users, &items)?;
    let val = remap(&splits.val, &splits, &users, &items)?;
    let test = remap(&splits.test, &splits, &users, &items)?;
    let (m, n) = (ckpt.m, ckpt.n);
    let mut train_counts = vec![0; m];
    for o in &train {
        train_counts[o.user] += 1;
    }

    let mut man = ManifestBuilder::new("evaluate", a.seed);
    man.input(&a.ckpt)?;
    for f in SPLIT_FILES {
        man.input(&a.data.join(f))?;
    }
    let ks: Vec<String> = a.ndcg_k.iter().map(usize::to_string).collect();
    man.config("ndcg_k", ks.join(","));
    man.config("candidates", a.candidates);
    man.config("mec_selector", a.mec_selector.join(","));
    man.config("gain", &a.gain);
    man.config("threads", a.threads);

    let observed = eval::observed_items(m, &[&train, &val, &test]);
    let (rows, groups) = with_threads(a.threads, || -> CliResult<_> {
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for (aspect, name) in ckpt.aspects.iter().enumerate() {
            let cands = eval::build_candidates(&test, &observed, n, a.candidates, aspect, gain, a.seed)?;
            if cands.short_lists > 0 {
                eprintln!("pmtf: {} candidate lists for {name} are shorter than {}", cands.short_lists, a.candidates);
            }
            // lists without a single relevant item have no defined NDCG
            let rated: Vec<usize> =
                (0..cands.lists.len()).filter(|&p| cands.lists[p].relevance.iter().any(|&g| g > 0.0)).collect();
            let scores = eval::ndcg_per_user(&params.factors, &cands.lists, aspect, &a.ndcg_k);
            for (j, &k) in a.ndcg_k.iter().enumerate() {
                let vals: Vec<f64> = rated.iter().map(|&p| scores[j][p]).collect();
                match eval::mean(&vals) {
                    Some(v) => rows.push(MetricRow {
                        metric: "ndcg".into(),
                        aspect: name.clone(),
                        k: Some(k),
                        value: v,
                        n_users: vals.len(),
                    }),
                    None => eprintln!("pmtf: no test user rated {name}; skipping its NDCG"),
                }
            }
            if aspect == 0 {
                let per_user: Vec<(usize, f64)> = rated.iter().map(|&p| (cands.lists[p].user, scores[0][p])).collect();
                groups = eval::group_by_activity(&per_user, &train_counts, &DEFAULT_BUCKET_EDGES)?;
            }
        }
        for &sel in &selectors {
            match eval::model_mec(&params, ckpt.hyperparams.lambda, &test, sel, a.seed) {
                Ok(r) => {
                    if r.skipped > 0 {
                        eprintln!("pmtf: MEC ({}) skipped {} pairs missing a rating", sel.name(), r.skipped);
                    }
                    rows.push(MetricRow {
                        metric: "mec".into(),
                        aspect: sel.name().into(),
                        k: None,
                        value: r.value,
                        n_users: r.n_pairs,
                    });
                }
                Err(Error::UndefinedMetric(msg)) => eprintln!("pmtf: MEC ({}) undefined: {msg}", sel.name()),
                Err(e) => return Err(e.into()),
            }
        }
        Ok((rows, groups))
    })??;

    create_dir(&a.out)?;
    let metrics_path = a.out.join("metrics.csv");
    let groups_path = a.out.join("groups.csv");
    write_text(&metrics_path, &eval::metrics_csv(&rows))?;
    write_text(&groups_path, &eval::groups_csv(&groups))?;
    man.output(&metrics_path);
    man.output(&groups_path);
    man.write(&a.out.join("manifest.json"))
}

/// Keeps ids usable as file names.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn inspect_covariance(a: InspectArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let params = ckpt.to_params()?;
    let mut man = ManifestBuilder::new("inspect-covariance", 0);
    man.input(&a.ckpt)?;
    man.config("user", a.user.join(","));
    man.config("item", a.item.join(","));

    let mut targets: Vec<(String, PathBuf, CovMatrix)> =
        vec![("global".into(), a.out.join("global_correlation.csv"), make_covariance(&params.covs.global))];
    for (kind, ids, all, factors) in
        [("user", &a.user, ckpt.user_ids(), &params.covs.users), ("item", &a.item, ckpt.item_ids(), &params.covs.items)]
    {
        for id in ids {
            let idx = all
                .iter()
                .position(|x| x == id)
                .ok_or_else(|| Error::InvalidInput(format!("{kind} {id:?} is not in the checkpoint")))?;
            let path = a.out.join(format!("{kind}_{}_correlation.csv", file_stem(id)));
            targets.push((format!("{kind}:{id}"), path, make_covariance(&factors[idx])));
        }
    }

    create_dir(&a.out)?;
    let mut report = String::from("matrix,lhs,rhs\n");
    for (label, path, cov) in &targets {
        let corr = correlation_from_covariance(cov)?;
        write_text(path, &matrix_to_csv(corr.matrix(), &ckpt.aspects))?;
        man.output(path);
        let (lhs, rhs) = total_correlation_sides(cov)?;
        report.push_str(&format!("{label},{lhs},{rhs}\n"));
    }
    let cov_path = a.out.join("global_covariance.csv");
    write_text(&cov_path, &matrix_to_csv(targets[0].2.matrix(), &ckpt.aspects))?;
    man.output(&cov_path);
    let report_path = a.out.join("total_correlation.csv");
    write_text(&report_path, &report)?;
    man.output(&report_path);
    man.write(&a.out.join("manifest.json"))
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let global_correlation = match a.correlation {
        Some(c) => Some(CorrMatrix::new(Matrix::from_fn(a.k, a.k, |r, s| if r == s { 1.0 } else { c }))?),
        None => None,
    };
    let cfg = GenConfig {
        m: a.m,
        n: a.n,
        k: a.k,
        d: a.d,
        lambda: a.lambda,
        factor_scale: a.factor_scale,
        cov_scale: a.cov_scale,
        density: a.density,
        discretize: a.discretize,
        seed: a.seed,
        personal_mix: a.personal_mix,
        global_correlation,
        exposure_bias: a.exposure_bias,
        offset: a.offset,
    };
    let (ds, truth) = data::generate_synthetic(&cfg)?;
    create_dir(&a.out)?;
    let mut man = ManifestBuilder::new("synth", a.seed);
    for (key, v) in [
        ("M", a.m.to_string()),
        ("N", a.n.to_string()),
        ("K", a.k.to_string()),
        ("d", a.d.to_string()),
        ("density", a.density.to_string()),
        ("lambda", a.lambda.to_string()),
        ("factor_scale", a.factor_scale.to_string()),
        ("cov_scale", a.cov_scale.to_string()),
        ("discretize", a.discretize.to_string()),
        ("personal_mix", a.personal_mix.to_string()),
        ("correlation", a.correlation.map(|c| c.to_string()).unwrap_or_default()),
        ("exposure_bias", a.exposure_bias.to_string()),
        ("offset", a.offset.to_string()),
    ] {
        man.config(key, v);
    }

    let data_path = a.out.join("dataset.tsv");
    write_text(&data_path, &data::format_dataset(&ds, &TextFormat::default()))?;
    let hp = Hyperparams { d: a.d, lambda: a.lambda, seed: a.seed, ..Default::default() };
    let truth_path = a.out.join("truth.ckpt");
    Checkpoint::from_params(&truth.params, &hp, "ground-truth", &ds.aspects, ds.users.ids(), ds.items.ids())?
        .save(&truth_path)?;
    let global_path = a.out.join("truth_correlation.csv");
    write_text(&global_path, &matrix_to_csv(correlation_from_covariance(&truth.sigma_g)?.matrix(), &ds.aspects))?;
    let pooled_path = a.out.join("pooled_correlation.csv");
    write_text(&pooled_path, &matrix_to_csv(truth.pooled_correlation(&ds.observations)?.matrix(), &ds.aspects))?;
    for p in [&data_path, &truth_path, &global_path, &pooled_path] {
        man.output(p);
    }
    man.write(&a.out.join("manifest.json"))
}

pub fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    let ids: Vec<ObjectiveId> = if a.objective == "all" {
        ObjectiveId::ALL.to_vec()
    } else {
        vec![a.objective.parse().map_err(|e: Error| usage(e.to_string()))?]
    };
    let prob = GradCheckProblem::random(a.seed, 5, 6, 4, 3)?;
    let mut worst: f64 = 0.0;
    println!("objective,block,n_params,max_rel_err");
    for id in ids {
        let report = prob.check(id, a.h)?;
        for line in report.to_csv().lines().skip(1) {
            println!("{id},{line}");
        }
        worst = worst.max(report.max_rel_err());
    }
    if worst <= GRAD_CHECK_TOL {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {worst:e} exceeds {GRAD_CHECK_TOL:e}")))
    }
}
