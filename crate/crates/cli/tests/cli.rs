use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covpool::io::checkpoint::Checkpoint;
use covpool::io::tensorfile::{self, Tensor};
use covpool::pool::{FirstOrderKind, Variant};
use covpool::rng::{self, Purpose};
use covpool::trainer::{ExperimentConfig, Network, PoolingConfig};

fn covpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covpool")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn small(pooling: PoolingConfig) -> ExperimentConfig {
    let mut c = ExperimentConfig::acceptance(pooling, 3);
    c.data.train_per_class = 10;
    c.data.test_per_class = 4;
    c.train.epochs = 2;
    c
}

fn mpn() -> PoolingConfig {
    PoolingConfig::covariance(Variant::Mpn, 0.5)
}

#[test]
fn gradcheck_reference_case_passes() {
    let o = covpool(&["gradcheck", "--variant", "mpn", "--alpha", "0.5", "--d", "8", "--n", "12", "--seed", "42"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let r = &v.as_array().unwrap()[0];
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-5);
    for key in ["variant", "alpha", "dims", "max_rel_err", "max_abs_err", "worst_entry", "seed", "threshold", "precision"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn gradcheck_all_variants() {
    let o = covpool(&["gradcheck", "--variant", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>());
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["gradcheck", "--variant", "mpn", "--alpha", "-1"][..],
        &["gradcheck", "--variant", "nope"],
        &["gradcheck", "--d", "1"],
        &["gradcheck", "--bogus"],
        &["frobnicate"],
        &["shrinkage", "--lambda-grid", "1:2:cubic:5"],
        &["metric", "--alpha", "0"],
        &["train", "--config", "/nonexistent/config.json", "--out", "/tmp/x.json"],
    ] {
        let o = covpool(args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"net\": 3}").unwrap();
    let o = covpool(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().join("c.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let mut cfg = small(mpn());
    cfg.data.n_pos = 64;
    let p = write_config(dir.path(), "mismatch.json", &cfg);
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join("c.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_1_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(PoolingConfig::covariance(Variant::Plain, 1.0));
    cfg.train.lr_start = 1e4;
    cfg.train.lr_end = 1e4;
    let p = write_config(dir.path(), "hot.json", &cfg);
    let out = dir.path().join("c.json");
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 1"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn train_then_eval_matches_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(mpn());
    let p = write_config(dir.path(), "run.json", &cfg);
    let ck = dir.path().join("ck.json");
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = std::fs::read_to_string(dir.path().join("ck.history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,train_err,test_loss,test_err,lr");
    assert_eq!(history.lines().count(), 3);
    let last: Vec<f64> = history.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();

    let o = covpool(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["top1_error"].as_f64().unwrap(), last[4]);
    assert_eq!(v["loss"].as_f64().unwrap(), last[3]);
    assert_eq!(v["per_class"].as_array().unwrap().len(), 10);

    // A bare data spec works too.
    let spec = dir.path().join("data.json");
    std::fs::write(&spec, serde_json::to_string(&cfg.data).unwrap()).unwrap();
    let o2 = covpool(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", spec.to_str().unwrap()]);
    assert_eq!(stdout(&o), stdout(&o2));
}

#[test]
fn zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(mpn());
    let p = write_config(dir.path(), "run.json", &cfg);
    let ck = dir.path().join("init.json");
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", ck.to_str().unwrap(), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.epoch, 0);
    assert_eq!(loaded.params, Network::new(cfg.net.clone()).unwrap().params);
}

#[test]
fn warm_start_from_first_order_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let src_cfg = small(PoolingConfig::FirstOrder { mode: FirstOrderKind::Average });
    let p = write_config(dir.path(), "src.json", &src_cfg);
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join("src_ck.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut cfg = small(mpn());
    cfg.train = covpool::trainer::TrainConfig::warm("src_ck.json".into(), 0, 32);
    let p = write_config(dir.path(), "warm.json", &cfg);
    let ck = dir.path().join("warm_ck.json");
    let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let src = Checkpoint::load(&dir.path().join("src_ck.json")).unwrap();
    let warm = Checkpoint::load(&ck).unwrap();
    let k = warm.to_network().unwrap().pre_pooling_len();
    assert_eq!(&warm.params[..k], &src.params[..k]);
}

#[test]
fn mpn_beats_first_order_on_paired_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut errs = Vec::new();
    for (name, pooling) in [("mpn", mpn()), ("avg", PoolingConfig::FirstOrder { mode: FirstOrderKind::Average })] {
        let p = write_config(dir.path(), &format!("{name}.json"), &ExperimentConfig::acceptance(pooling, 0));
        let o = covpool(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join(format!("{name}_ck.json")).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        errs.push(v["final_record"]["test_err"].as_f64().unwrap());
    }
    assert!(errs[0] < errs[1], "mpn {} vs avg {}", errs[0], errs[1]);
}

#[test]
fn metric_converges() {
    let o = covpool(&["metric", "--alpha", "0.1,0.01,0.001", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "alpha,pow_e,log_e,rel_gap");
    let gaps: Vec<f64> = lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(gaps.len(), 3);
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
    assert!(gaps[2] < 1e-3);
}

fn shrinkage_rows(grid: &str) -> Vec<Vec<f64>> {
    let o = covpool(&["shrinkage", "--lambda-grid", grid]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "lambda,f_sqrt,f_log,d_sqrt,d_log");
    out.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn shrinkage_table_rows() {
    let rows = shrinkage_rows("1e-5:10:log:200");
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r[0] <= 10.0));
    assert!(!rows.iter().any(|r| r[0] == 50.0));
    // 200 points on six decades step by 6/199 decades, so λ = 1 itself is
    // not a grid point; a grid with a tenth-decade step contains it.
    let rows = shrinkage_rows("1e-5:10:log:61");
    let one = rows.iter().find(|r| r[0] == 1.0).expect("λ = 1 row");
    assert_eq!(one[1..], [1.0, 0.0, 0.5, 1.0]);
}

#[test]
fn spectrum_counts_are_conserved() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(11, Purpose::Data);
    let feats: Vec<Tensor> = (0..5).map(|i| Tensor::from_matrix(&rng::gaussian_matrix(&mut r, 6, 4 + i))).collect();
    let path = dir.path().join("feats.cvpf");
    tensorfile::write_file(&path, &feats).unwrap();
    let o = covpool(&["spectrum", "--input", path.to_str().unwrap(), "--bins", "100"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().next().unwrap(), "bin_lo,bin_hi,count");
    let total: u64 = out.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(out.lines().count(), 102);
    assert_eq!(total, 5 * 6);
}

#[test]
fn unreadable_tensorfile_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(12, Purpose::Data);
    let good = tensorfile::to_bytes(&[Tensor::from_matrix(&rng::gaussian_matrix(&mut r, 3, 5))]).unwrap();
    let mut bytes = good.clone();
    bytes.extend_from_slice(b"XXXXgarbage");
    let path = dir.path().join("bad.cvpf");
    std::fs::write(&path, &bytes).unwrap();
    let o = covpool(&["spectrum", "--input", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains(&good.len().to_string()), "{}", stderr(&o));
    assert!(o.stdout.is_empty());

    let o = covpool(&["spectrum", "--input", dir.path().join("missing.cvpf").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn thread_cap_does_not_change_output() {
    let args = ["gradcheck", "--variant", "all", "--alpha", "0.5,1.0", "--seed", "1,2"];
    let a = covpool(&args);
    let b = Command::new(env!("CARGO_BIN_EXE_covpool")).args(args).env("COVPOOL_THREADS", "1").output().unwrap();
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let c = Command::new(env!("CARGO_BIN_EXE_covpool")).args(args).env("COVPOOL_THREADS", "zero").output().unwrap();
    assert_eq!(code(&c), 2);
}
