use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ntil(args: &[&str]) -> Output {
    ntil_env(args, &[])
}

fn ntil_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ntil"));
    cmd.args(args).env_remove("NTIL_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// metric log lines with the `mode` field removed
fn log_without_mode(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("mode");
            v
        })
        .collect()
}

fn gen(dir: &Path, n: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(format!("data-{n}-{seed}"));
    let o = ntil(&["gen-data", "--task", "arithmetic", "--n", n, "--seed", seed, "--max-digits", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tiny_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        format!(
            "train_data = {:?}\ntest_data = {:?}\nembed_dim = 8\nhidden_dim = 12\ncontext_len = 16\nbatch_size = 8\nepochs = 2\n",
            data.join("train.jsonl"),
            data.join("test.jsonl")
        ),
    )
    .unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_and_exact() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "120", "7");
    let b = dir.path().join("again");
    ntil(&["gen-data", "--task", "arithmetic", "--n", "120", "--seed", "7", "--max-digits", "2", "--out", p(&b)]);
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let lines = |f: &str| fs::read_to_string(a.join(f)).unwrap().lines().count();
    assert_eq!(lines("train.jsonl") + lines("test.jsonl"), 120);
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["n"], 120);
    assert!(manifest["finished_unix"].is_u64());

    let clock = dir.path().join("clock");
    let o = ntil(&["gen-data", "--task", "clock", "--n", "50", "--seed", "1", "--out", p(&clock)]);
    assert_eq!(code(&o), 0);
    let first: Value = serde_json::from_str(fs::read_to_string(clock.join("train.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["task"], "clock");
}

#[test]
fn gen_data_rejects_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    assert_eq!(code(&ntil(&["gen-data", "--task", "arithmetic", "--n", "10", "--max-digits", "9", "--out", out])), 2);
    assert_eq!(code(&ntil(&["gen-data", "--task", "arithmetic", "--n", "10", "--ops", "^", "--out", out])), 2);
    assert_eq!(code(&ntil(&["gen-data", "--task", "poetry", "--n", "10", "--out", out])), 2);
    assert_eq!(code(&ntil(&["gen-data", "--task", "arithmetic", "--n", "0", "--out", out])), 2);
}

#[test]
fn train_writes_manifest_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "80", "1");
    let cfg = tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    let o = ntil(&["train", "--config", p(&cfg), "--loss", "ntil", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let manifest = read_json(&run.join("manifest.json"));
    let c = &manifest["config"];
    // defaults are materialized
    for key in ["alpha", "beta", "sigma"] {
        assert_eq!(c[key], 0.2);
    }
    assert_eq!(c["lambda"], 0.3);
    assert_eq!(c["tau"], 0.1);
    assert_eq!(c["hidden_dim"], 12);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let log = log_without_mode(&run.join("metrics.jsonl"));
    let train_len = fs::read_to_string(data.join("train.jsonl")).unwrap().lines().count();
    assert_eq!(log.len(), 2 * train_len.div_ceil(8));
    assert!(run.join("checkpoints/last.ckpt").is_file());
    assert!(run.join("checkpoints/epoch-002.ckpt").is_file());
    let metrics = read_json(&run.join("metrics.json"));
    let acc = metrics["exact_match"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(stdout(&o).contains("exact_match"));

    // evaluating the saved checkpoint reproduces the metrics
    let ev = dir.path().join("eval");
    let o = ntil(&["eval", "--checkpoint", p(&run.join("checkpoints/last.ckpt")), "--data", p(&data.join("test.jsonl")), "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&ev.join("metrics.json")), metrics);
    assert!(fs::read_to_string(ev.join("report.txt")).unwrap().contains("mean_abs_error"));

    // the manifest alone repeats the run
    let again = dir.path().join("again");
    let o = ntil(&["train", "--config", p(&run.join("manifest.json")), "--out", p(&again)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(again.join("metrics.jsonl")).unwrap());
}

#[test]
fn lambda_zero_reproduces_ce() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "60", "2");
    let cfg = tiny_config(dir.path(), &data);
    let ce = dir.path().join("ce");
    let zero = dir.path().join("zero");
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--loss", "ce", "--out", p(&ce)])), 0);
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--loss", "ntil", "--lambda", "0", "--out", p(&zero)])), 0);
    assert_eq!(log_without_mode(&ce.join("metrics.jsonl")), log_without_mode(&zero.join("metrics.jsonl")));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "60", "3");
    let cfg = tiny_config(dir.path(), &data);
    let straight = dir.path().join("straight");
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--out", p(&straight)])), 0);
    let split = dir.path().join("split");
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--epochs", "1", "--out", p(&split)])), 0);
    let ckpt = split.join("checkpoints/last.ckpt");
    let o = ntil(&["train", "--config", p(&cfg), "--resume", p(&ckpt), "--out", p(&split)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(straight.join("metrics.jsonl")).unwrap(), fs::read(split.join("metrics.jsonl")).unwrap());
    assert_eq!(read_json(&straight.join("metrics.json")), read_json(&split.join("metrics.json")));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "40", "4");
    let cfg = tiny_config(dir.path(), &data);
    let seed_of = |run: &Path| read_json(&run.join("manifest.json"))["config"]["seed"].clone();
    let env_run = dir.path().join("env");
    let o = ntil_env(&["train", "--config", p(&cfg), "--epochs", "1", "--out", p(&env_run)], &[("NTIL_SEED", "41")]);
    assert_eq!(code(&o), 0);
    assert_eq!(seed_of(&env_run), 41);
    let flag_run = dir.path().join("flag");
    ntil_env(&["train", "--config", p(&cfg), "--epochs", "1", "--seed", "5", "--out", p(&flag_run)], &[("NTIL_SEED", "41")]);
    assert_eq!(seed_of(&flag_run), 5);
    let with_seed = dir.path().join("seeded.toml");
    fs::write(&with_seed, fs::read_to_string(&cfg).unwrap() + "seed = 9\n").unwrap();
    let file_run = dir.path().join("file");
    ntil_env(&["train", "--config", p(&with_seed), "--epochs", "1", "--out", p(&file_run)], &[("NTIL_SEED", "41")]);
    assert_eq!(seed_of(&file_run), 9);
    assert_eq!(code(&ntil_env(&["train", "--config", p(&cfg), "--out", p(&env_run)], &[("NTIL_SEED", "x")])), 2);
}

#[test]
fn train_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "40", "5");
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("bad");
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--tau", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--alpha", "-1", "--out", p(&out)])), 2);
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--loss", "mse", "--out", p(&out)])), 2);
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg)])), 2);
    assert_eq!(code(&ntil(&["train", "--config", "/nonexistent.toml", "--out", p(&out)])), 2);
    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "lamda = 0.3\n").unwrap();
    assert_eq!(code(&ntil(&["train", "--config", p(&typo), "--out", p(&out)])), 2);
    let unencodable = dir.path().join("bad.jsonl");
    fs::write(&unencodable, "{\"prompt\":\"1#2=\",\"target\":\"3\",\"task\":\"arithmetic\"}\n").unwrap();
    assert_eq!(code(&ntil(&["train", "--train-data", p(&unencodable), "--out", p(&out)])), 2);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "40", "6");
    let cfg = tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    assert_eq!(code(&ntil(&["train", "--config", p(&cfg), "--epochs", "1", "--out", p(&run)])), 0);
    let ckpt = run.join("checkpoints/last.ckpt");
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("ev");
    assert_eq!(code(&ntil(&["eval", "--checkpoint", p(&ckpt), "--data", p(&empty), "--out", p(&out)])), 2);
    assert_eq!(code(&ntil(&["eval", "--checkpoint", "/missing.ckpt", "--data", p(&empty), "--out", p(&out)])), 2);
    assert_eq!(code(&ntil(&["eval", "--checkpoint", p(&ckpt), "--data", "/missing.jsonl", "--out", p(&out)])), 2);
}

fn inspect(dir: &Path, rows: &str, target: &str) -> Value {
    let path = dir.join("pred.txt");
    fs::write(&path, rows).unwrap();
    let o = ntil(&["inspect-loss", "--pred", p(&path), "--target", target, "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn inspect_loss_shows_the_ce_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let near = inspect(dir.path(), "0 0 0.5 0.5 0 0 0 0 0 0\n", "2");
    let far = inspect(dir.path(), "0 0 0.5 0 0 0 0 0 0 0.5\n", "2");
    let f = |v: &Value, k: &str| v[k].as_f64().unwrap();
    assert!((f(&near, "ce") - 2f64.ln()).abs() < 1e-6);
    assert!((f(&far, "ce") - 2f64.ln()).abs() < 1e-6);
    assert!(f(&far, "emd_weighted") - f(&near, "emd_weighted") >= 2.0);

    let perfect = inspect(dir.path(), "0 0 0 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 0 1 0\n", "98");
    for k in ["ce", "emd_weighted", "relative", "magnitude", "ntil", "total"] {
        assert!(f(&perfect, k).abs() < 1e-9, "{k} = {}", f(&perfect, k));
    }
    let uniform = inspect(dir.path(), "0.1 0.1 0.1 0.1 0.1 0.1 0.1 0.1 0.1 0.1\n", "3");
    assert!((f(&uniform, "emd_weighted") - 2.7).abs() < 1e-12);

    let table = ntil(&["inspect-loss", "--pred", p(&dir.path().join("pred.txt")), "--target", "3"]);
    assert!(stdout(&table).contains("emd_weighted"));

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0.5 0.6 0 0 0 0 0 0 0 0\n").unwrap();
    assert_eq!(code(&ntil(&["inspect-loss", "--pred", p(&bad), "--target", "3"])), 2);
    assert_eq!(code(&ntil(&["inspect-loss", "--pred", p(&dir.path().join("pred.txt")), "--target", "34"])), 2);
}

#[test]
fn check_suites_report_and_exit() {
    let o = ntil(&["check", "spans"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("PASS digit spans vs regex"));
    let o = ntil(&["check", "emd"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert_eq!(code(&ntil(&["check", "everything"])), 2);
}

#[test]
fn sweep_emits_one_metric_file_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "40", "8");
    let cfg = tiny_config(dir.path(), &data);
    let out = dir.path().join("sweep");
    let o = ntil(&["sweep", "--config", p(&cfg), "--epochs", "1", "--params", "alpha", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    let cells: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(cells.len(), 5);
    for c in cells {
        assert!(c.join("metrics.json").is_file());
        assert!(c.join("manifest.json").is_file());
    }
    assert_eq!(code(&ntil(&["sweep", "--config", p(&cfg), "--params", "gamma", "--out", p(&out)])), 2);
}
