use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pmtf_core::checkpoint::Checkpoint;
use pmtf_core::covariance::CovFactor;
use pmtf_core::data::{RatingScale, TextFormat};
use pmtf_core::model::{CovarianceSet, LatentFactors, ModelParams};
use pmtf_core::trainer::{initialize, Mode};
use pmtf_core::{Hyperparams, SplitDataset, TrainConfig};
use tempfile::TempDir;

fn pmtf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmtf")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = pmtf(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A synthetic dataset split into `data/`.
fn prepared() -> TempDir {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--M", "60", "--N", "40", "--density", "0.4", "--seed", "1", "--out", "syn"]);
    ok(t.path(), &["ingest", "--input", "syn/dataset.tsv", "--scale", "unbounded", "--seed", "7", "--out", "data"]);
    fs::write(t.path().join("run.cfg"), "# quick run\nd = 3\nlearning_rate = 0.3\nnu_g = 5\n").unwrap();
    t
}

fn load_splits(dir: &Path) -> SplitDataset {
    SplitDataset::load(dir, &TextFormat { scale: RatingScale::UNBOUNDED, ..Default::default() }).unwrap()
}

#[test]
fn synth_writes_dataset_truth_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    ok(
        t.path(),
        &["synth", "--M", "200", "--N", "100", "--K", "4", "--d", "5", "--density", "0.3", "--seed", "1", "--out", "s"],
    );
    for f in ["dataset.tsv", "truth.ckpt", "truth_correlation.csv", "pooled_correlation.csv", "manifest.json"] {
        assert!(t.path().join("s").join(f).is_file(), "{f}");
    }
    let truth = Checkpoint::load(&t.path().join("s/truth.ckpt")).unwrap();
    assert_eq!((truth.m, truth.n, truth.k, truth.d), (200, 100, 4, 5));
    assert_eq!(truth.mode, "ground-truth");
    let rows = fs::read_to_string(t.path().join("s/dataset.tsv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 6000);
}

#[test]
fn ingest_is_reproducible_and_hashes_its_input() {
    let t = prepared();
    ok(t.path(), &["ingest", "--input", "syn/dataset.tsv", "--scale", "unbounded", "--seed", "7", "--out", "again"]);
    for f in ["train.tsv", "val.tsv", "test.tsv"] {
        assert_eq!(fs::read(t.path().join("data").join(f)).unwrap(), fs::read(t.path().join("again").join(f)).unwrap());
    }
    let man: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(man["command"], "ingest");
    assert_eq!(man["seed"], 7);
    assert_eq!(man["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(man["inputs"][0]["sha256"], man["dataset_sha256"]);
}

#[test]
fn bad_rows_exit_2_with_their_line_number() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("r.tsv"), "user_id\titem_id\toverall\nu1\ti1\t4\nu2\ti1\tseven\n").unwrap();
    let o = pmtf(t.path(), &["ingest", "--input", "r.tsv", "--out", "d"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("r.tsv:3"), "{}", stderr(&o));

    fs::write(t.path().join("r.tsv"), "user_id\titem_id\toverall\nu1\ti1\t9\n").unwrap();
    assert_eq!(code(&pmtf(t.path(), &["ingest", "--input", "r.tsv", "--out", "d"])), 2);
}

#[test]
fn usage_errors_exit_1() {
    let t = prepared();
    let p = t.path();
    let o = pmtf(p, &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&pmtf(p, &["train", "--model", "svd", "--data", "data", "--out", "m.ckpt"])), 1);
    fs::write(p.join("bad.cfg"), "depth = 3\n").unwrap();
    assert_eq!(
        code(&pmtf(p, &["train", "--model", "bpmr", "--config", "bad.cfg", "--data", "data", "--out", "m.ckpt"])),
        1
    );
    assert_eq!(code(&pmtf(p, &["ingest", "--input", "syn/dataset.tsv", "--scale", "5:1", "--out", "x"])), 1);
    assert_eq!(code(&pmtf(p, &["--help"])), 0);
}

#[test]
fn training_writes_checkpoint_history_and_manifest() {
    let t = prepared();
    let p = t.path();
    ok(
        p,
        &[
            "train",
            "--model",
            "pmtf",
            "--config",
            "run.cfg",
            "--data",
            "data",
            "--out",
            "m.ckpt",
            "--max-em-steps",
            "3",
        ],
    );
    let ckpt = Checkpoint::load(&p.join("m.ckpt")).unwrap();
    assert_eq!(ckpt.mode, "pmtf-predict");
    assert_eq!(ckpt.d, 3);
    assert!(ckpt.to_params().unwrap().is_finite());
    let history = fs::read_to_string(p.join("m.ckpt.history.csv")).unwrap();
    assert!(history.starts_with("em_step,phase,train_objective,val_metric,wall_ms\n"));
    let man: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("m.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(man["config"]["d"], "3");
    assert_eq!(man["config"]["model"], "pmtf-predict");
    assert_eq!(man["inputs"].as_array().unwrap().len(), 3);
}

#[test]
fn every_model_trains_with_defaults() {
    let t = prepared();
    for model in ["bpmr", "pmtf", "ptf", "bpr"] {
        let out = format!("{model}.ckpt");
        ok(t.path(), &["train", "--model", model, "--data", "data", "--out", &out, "--max-em-steps", "2"]);
        assert!(Checkpoint::load(&t.path().join(&out)).unwrap().to_params().unwrap().is_finite());
    }
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let t = prepared();
    let p = t.path();
    ok(
        p,
        &[
            "train",
            "--model",
            "bpmr",
            "--config",
            "run.cfg",
            "--data",
            "data",
            "--out",
            "z.ckpt",
            "--max-em-steps",
            "0",
            "--seed",
            "4",
        ],
    );
    let saved = Checkpoint::load(&p.join("z.ckpt")).unwrap().to_params().unwrap();
    let cfg = TrainConfig {
        mode: Mode::BpmrRank,
        hp: Hyperparams { d: 3, learning_rate: 0.3, nu_g: 5.0, seed: 4, ..Default::default() },
        ..Default::default()
    };
    let (init, _) = initialize(&cfg, &load_splits(&p.join("data"))).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn evaluation_is_deterministic_and_complete() {
    let t = prepared();
    let p = t.path();
    ok(
        p,
        &[
            "train",
            "--model",
            "bpmr",
            "--config",
            "run.cfg",
            "--data",
            "data",
            "--out",
            "m.ckpt",
            "--max-em-steps",
            "2",
        ],
    );
    for out in ["e1", "e2"] {
        ok(
            p,
            &[
                "evaluate",
                "--ckpt",
                "m.ckpt",
                "--data",
                "data",
                "--ndcg-k",
                "10,20,50",
                "--candidates",
                "150",
                "--mec-selector",
                "correlation,random",
                "--seed",
                "3",
                "--out",
                out,
                "--threads",
                if out == "e1" { "1" } else { "4" },
            ],
        );
    }
    for f in ["metrics.csv", "groups.csv"] {
        assert_eq!(fs::read(p.join("e1").join(f)).unwrap(), fs::read(p.join("e2").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(p.join("e1/metrics.csv")).unwrap();
    let ndcg_rows: Vec<&str> = metrics.lines().filter(|l| l.starts_with("ndcg,")).collect();
    assert_eq!(ndcg_rows.len(), 4 * 3);
    for k in ["10", "20", "50"] {
        assert!(ndcg_rows.iter().any(|l| l.split(',').nth(2) == Some(k)));
    }
    assert!(metrics.lines().any(|l| l.starts_with("mec,correlation,,")));
    assert!(metrics.lines().any(|l| l.starts_with("mec,random,,")));
    let groups = fs::read_to_string(p.join("e1/groups.csv")).unwrap();
    assert!(groups.starts_with("bucket_lo,bucket_hi,n_users,ndcg\n"));
    assert!(groups.lines().last().unwrap().starts_with("320,inf,"));
}

#[test]
fn evaluation_rejects_mismatched_or_empty_data() {
    let t = prepared();
    let p = t.path();
    ok(p, &["train", "--model", "ptf", "--data", "data", "--out", "m.ckpt", "--max-em-steps", "1"]);

    ok(p, &["synth", "--M", "30", "--N", "20", "--K", "3", "--density", "0.5", "--seed", "2", "--out", "other"]);
    ok(
        p,
        &["ingest", "--input", "other/dataset.tsv", "--scale", "unbounded", "--min-count", "1", "--out", "other_data"],
    );
    assert_eq!(code(&pmtf(p, &["evaluate", "--ckpt", "m.ckpt", "--data", "other_data", "--out", "e"])), 2);

    // same ids, unknown user
    fs::create_dir_all(p.join("stranger")).unwrap();
    for f in ["train.tsv", "val.tsv"] {
        fs::copy(p.join("data").join(f), p.join("stranger").join(f)).unwrap();
    }
    let header = fs::read_to_string(p.join("data/test.tsv")).unwrap().lines().next().unwrap().to_string();
    fs::write(p.join("stranger/test.tsv"), format!("{header}\nnobody\ti0\t1\t2\t3\t4\n")).unwrap();
    assert_eq!(code(&pmtf(p, &["evaluate", "--ckpt", "m.ckpt", "--data", "stranger", "--out", "e"])), 2);

    fs::write(p.join("stranger/test.tsv"), format!("{header}\n")).unwrap();
    let o = pmtf(p, &["evaluate", "--ckpt", "m.ckpt", "--data", "stranger", "--out", "e"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("test split is empty"));
}

fn identity_checkpoint(dir: &Path) {
    let (m, n, k, d) = (2, 2, 3, 2);
    let factors = LatentFactors::zeros(m, n, k, d);
    let covs = CovarianceSet::from_global(CovFactor::identity(k), m, n);
    let params = ModelParams { factors, covs };
    let names = |p: &str, c: usize| (0..c).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    Checkpoint::from_params(
        &params,
        &Hyperparams::default(),
        "bpmr-rank",
        &names("a", k),
        &names("u", m),
        &names("i", n),
    )
    .unwrap()
    .save(&dir.join("id.ckpt"))
    .unwrap();
}

#[test]
fn identity_covariance_has_identity_correlation_and_no_dependence() {
    let t = tempfile::tempdir().unwrap();
    identity_checkpoint(t.path());
    ok(t.path(), &["inspect-covariance", "--ckpt", "id.ckpt", "--out", "ins", "--user", "u1"]);
    let corr = fs::read_to_string(t.path().join("ins/global_correlation.csv")).unwrap();
    assert_eq!(corr, "aspect,a0,a1,a2\na0,1,0,0\na1,0,1,0\na2,0,0,1\n");
    let tc = fs::read_to_string(t.path().join("ins/total_correlation.csv")).unwrap();
    assert_eq!(tc, "matrix,lhs,rhs\nglobal,0,0\nuser:u1,0,0\n");
    assert_eq!(code(&pmtf(t.path(), &["inspect-covariance", "--ckpt", "id.ckpt", "--out", "x", "--item", "i9"])), 2);
}

#[test]
fn prior_only_entities_report_the_global_correlation() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    fs::create_dir_all(p.join("data")).unwrap();
    let header = "user_id\titem_id\toverall\tvalue\n";
    let rating = |u: usize, i: usize| format!("{}\t{}", 1 + (u * 3 + i * 7) % 5, 1 + (u + i * 2) % 5);
    let mut train = String::from(header);
    for u in 0..8 {
        for i in 0..10 {
            train.push_str(&format!("u{u}\ti{i}\t{}\n", rating(u, i)));
        }
    }
    train.push_str("lonely\ti0\t5\t4\n");
    let held = |range: std::ops::Range<usize>| {
        let mut s = String::from(header);
        for u in range {
            s.push_str(&format!("u{u}\ti{}\t{}\n", 10 + u, rating(u, 20)));
        }
        s
    };
    fs::write(p.join("data/train.tsv"), train).unwrap();
    fs::write(p.join("data/val.tsv"), held(0..4)).unwrap();
    fs::write(p.join("data/test.tsv"), held(4..8)).unwrap();
    ok(
        p,
        &[
            "train",
            "--model",
            "bpmr",
            "--data",
            "data",
            "--out",
            "m.ckpt",
            "--max-em-steps",
            "3",
            "--config",
            "/dev/null",
        ],
    );
    ok(p, &["inspect-covariance", "--ckpt", "m.ckpt", "--out", "ins", "--user", "lonely,u0"]);
    let global = fs::read_to_string(p.join("ins/global_correlation.csv")).unwrap();
    assert_eq!(fs::read_to_string(p.join("ins/user_lonely_correlation.csv")).unwrap(), global);
    assert_ne!(fs::read_to_string(p.join("ins/user_u0_correlation.csv")).unwrap(), global);
}

#[test]
fn gradient_check_reports_every_block() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["grad-check", "--objective", "bpmr-personalized", "--seed", "3"]);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.starts_with("objective,block,n_params,max_rel_err\n"));
    for block in ["U", "V", "W", "L_user", "L_item"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("bpmr-personalized,{block},"))), "{block}");
    }
    let all = ok(t.path(), &["grad-check", "--seed", "5"]);
    assert!(String::from_utf8(all.stdout).unwrap().lines().count() > 6 * 3);
    assert_eq!(code(&pmtf(t.path(), &["grad-check", "--objective", "nope"])), 1);
}
