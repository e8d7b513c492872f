use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ntil::autodiff::Tape;
use ntil::checks::{run_suite, SUITES};
use ntil::data::{self, gen_arithmetic, gen_clock, recompute_answer, split, ArithOp, ArithmeticSpec, Example, Task};
use ntil::loss::{ntil_loss, LossBreakdown, LossMode, NtilParams};
use ntil::model::Checkpoint;
use ntil::train::{continue_training, evaluate, train as run_train, EvalMetrics, StepRecord, Trainer};
use ntil::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, Overrides, RunConfig, RunManifest};
use crate::{Contract, VerificationFailed};

fn contract(msg: impl Into<String>) -> anyhow::Error {
    Contract(msg.into()).into()
}

fn load_examples(path: &Path) -> Result<Vec<Example>> {
    if !path.is_file() {
        return Err(contract(format!("data file {} not found", path.display())));
    }
    data::read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(contract(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_ops(text: &str) -> Result<Vec<ArithOp>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let mut chars = s.chars();
            match (chars.next().and_then(ArithOp::from_symbol), chars.next()) {
                (Some(op), None) => Ok(op),
                _ => Err(contract(format!("unknown operator {s:?} (expected + - * /)"))),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct GenConfig<'a> {
    task: Task,
    n: usize,
    seed: u64,
    max_digits: u32,
    ops: &'a [ArithOp],
    test_fraction: f64,
}

pub fn gen_data(
    task: Task,
    n: usize,
    seed: u64,
    out: &Path,
    max_digits: u32,
    ops: &str,
    test_fraction: f64,
) -> Result<()> {
    let ops = parse_ops(ops)?;
    let manifest = RunManifest::new(
        "gen-data",
        Some(seed),
        &GenConfig {
            task,
            n,
            seed,
            max_digits,
            ops: &ops,
            test_fraction,
        },
        &[],
    )?;
    let examples = match task {
        Task::Arithmetic => gen_arithmetic(&ArithmeticSpec {
            n,
            seed,
            max_digits,
            ops: ops.clone(),
            decimal: false,
        })?,
        Task::Clock => gen_clock(n, seed)?,
    };
    if task == Task::Arithmetic {
        for (i, e) in examples.iter().enumerate() {
            let again = recompute_answer(&e.prompt);
            if again.as_deref() != Some(e.target.as_str()) {
                return Err(VerificationFailed(format!(
                    "example {i}: {:?} has target {:?}, recomputed {again:?}",
                    e.prompt, e.target
                ))
                .into());
            }
        }
    }
    let (train, test) = split(&examples, test_fraction, seed)?;
    manifest.write(out)?;
    data::write_jsonl(&out.join("train.jsonl"), &train)?;
    data::write_jsonl(&out.join("test.jsonl"), &test)?;
    manifest.finish(out)?;
    println!(
        "wrote {} train and {} test examples to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

/// Drops decoded predictions so metric files stay small.
fn summary(metrics: &EvalMetrics) -> EvalMetrics {
    EvalMetrics {
        predictions: Vec::new(),
        ..metrics.clone()
    }
}

struct RunResult {
    last: Option<StepRecord>,
    metrics: Option<EvalMetrics>,
}

/// Trains with a resolved config into `out`: manifest first, then the metric
/// log, checkpoints, per-epoch evaluations and final metrics.
fn run_training(config: &RunConfig, out: &Path, resume: Option<&Path>, config_file: Option<&Path>) -> Result<RunResult> {
    let mut config = config.clone();
    config.out_dir = Some(out.to_path_buf());
    let t = &mut config.training;
    let train_path = t
        .train_data
        .clone()
        .ok_or_else(|| contract("no training data: set train_data or pass --train-data"))?;
    if t.checkpoint_dir.is_none() {
        t.checkpoint_dir = Some(out.join("checkpoints"));
    }
    let mut inputs: Vec<&Path> = config_file.into_iter().collect();
    inputs.push(&train_path);
    if let Some(p) = &config.training.test_data {
        inputs.push(p);
    }
    if let Some(p) = resume {
        inputs.push(p);
    }
    let manifest = RunManifest::new("train", Some(config.training.seed), &config, &inputs)?;
    manifest.write(out)?;

    let vocab = Vocabulary::default();
    let train_set = load_examples(&train_path)?;
    let test_set = config.training.test_data.as_deref().map(load_examples).transpose()?;

    let log_path = out.join("metrics.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log);
    let mut last = None;
    let mut on_step = |r: &StepRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut log, r)?;
        log.write_all(b"\n")?;
        last = Some(r.clone());
        Ok(())
    };
    let outcome = match resume {
        Some(path) => {
            let trainer = Trainer::resume(config.training.clone(), vocab.clone(), load_checkpoint(path)?)?;
            continue_training(trainer, &train_set, test_set.as_deref(), &mut on_step)?
        }
        None => run_train(&config.training, &vocab, &train_set, test_set.as_deref(), &mut on_step)?,
    };
    log.flush()?;
    drop(log);

    if !outcome.evals.is_empty() {
        let rows: Vec<_> = outcome
            .evals
            .iter()
            .map(|e| serde_json::json!({ "epoch": e.epoch, "metrics": summary(&e.metrics) }))
            .collect();
        write_jsonl(&out.join("eval.jsonl"), rows)?;
    }
    let metrics = match &test_set {
        Some(test) => {
            let m = evaluate(&outcome.checkpoint.model, &vocab, test)?;
            write_json(&out.join("metrics.json"), &summary(&m))?;
            write_jsonl(&out.join("predictions.jsonl"), &m.predictions)?;
            Some(m)
        }
        None => None,
    };
    manifest.finish(out)?;
    Ok(RunResult { last, metrics })
}

pub fn train(config_path: Option<&Path>, resume: Option<&Path>, overrides: &Overrides) -> Result<()> {
    let loaded = config::resolve(config_path, overrides)?;
    let out = loaded
        .config
        .out_dir
        .clone()
        .ok_or_else(|| contract("no output directory: set out_dir or pass --out"))?;
    let result = run_training(&loaded.config, &out, resume, loaded.source.as_deref())?;
    if let Some(r) = &result.last {
        println!(
            "step {} epoch {}: ce {:.6} ntil {:.6} total {:.6}",
            r.step, r.epoch, r.ce, r.ntil, r.total
        );
    }
    if let Some(m) = &result.metrics {
        print!("{}", report(m));
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text metric table.
pub fn report(m: &EvalMetrics) -> String {
    let mut s = String::new();
    let rows = [
        ("examples", m.examples.to_string()),
        ("exact_match", format!("{:.6}", m.exact_match)),
        ("failures", m.failures.to_string()),
        ("failure_rate", format!("{:.6}", m.failure_rate)),
        ("mean_abs_error", fmt_opt(m.mean_abs_error)),
        ("median_abs_error", fmt_opt(m.median_abs_error)),
        ("mean_time_gap_hours", fmt_opt(m.mean_time_gap_hours)),
    ];
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<20} {v}");
    }
    s
}

pub fn eval(checkpoint: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let manifest = RunManifest::new(
        "eval",
        None,
        &serde_json::json!({ "checkpoint": checkpoint, "data": data_path }),
        &[checkpoint, data_path],
    )?;
    let ckpt = load_checkpoint(checkpoint)?;
    let examples = load_examples(data_path)?;
    let vocab = Vocabulary::default();
    if ckpt.model.config().vocab_size != vocab.len() {
        return Err(contract(format!(
            "checkpoint expects {} tokens, the vocabulary has {}",
            ckpt.model.config().vocab_size,
            vocab.len()
        )));
    }
    let metrics = evaluate(&ckpt.model, &vocab, &examples)?;
    manifest.write(out)?;
    write_json(&out.join("metrics.json"), &summary(&metrics))?;
    write_jsonl(&out.join("predictions.jsonl"), &metrics.predictions)?;
    let table = report(&metrics);
    fs::write(out.join("report.txt"), &table)?;
    manifest.finish(out)?;
    print!("{table}");
    Ok(())
}

/// Stand-in for log(0) when turning probabilities into logits.
const LOG_FLOOR: f64 = -690.0;

fn parse_distributions(text: &str) -> Result<Vec<[f64; 10]>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| contract(format!("line {}: {e}", i + 1)))?;
        let row: [f64; 10] = values
            .try_into()
            .map_err(|v: Vec<f64>| contract(format!("line {}: expected 10 probabilities, found {}", i + 1, v.len())))?;
        if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(contract(format!("line {}: probabilities must be finite and non-negative", i + 1)));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(contract(format!("line {}: probabilities sum to {total}, not 1", i + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Breakdown for hand-written digit distributions against `target`. Each
/// digit row becomes logits `ln p` over the digit tokens; the decimal point,
/// if any, is predicted with certainty.
pub fn inspect_breakdown(vocab: &Vocabulary, rows: &[[f64; 10]], target: &str, params: &NtilParams) -> Result<LossBreakdown> {
    let ids = vocab.encode(target)?;
    let spans = vocab.find_digit_spans(&ids);
    if spans.len() != 1 || spans[0].start != 0 || spans[0].end != ids.len() {
        return Err(contract(format!("target {target:?} is not a single number")));
    }
    let span = spans[0];
    if rows.len() != span.digit_count() {
        return Err(contract(format!(
            "target {target:?} has {} digits but {} distributions were given",
            span.digit_count(),
            rows.len()
        )));
    }
    let v = vocab.len();
    let mut logits = vec![LOG_FLOOR; ids.len() * v];
    let mut next = rows.iter();
    for (t, &id) in ids.iter().enumerate() {
        let row = &mut logits[t * v..(t + 1) * v];
        if vocab.is_digit(id) {
            let probs = next.next().expect("row count checked");
            for (d, &tok) in vocab.digit_token_ids().iter().enumerate() {
                row[tok] = probs[d].ln().max(LOG_FLOOR);
            }
        } else {
            row[id] = 0.0;
        }
    }
    let tape = Tape::new();
    let logits = tape.constant(logits, &[ids.len(), v])?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(ntil_loss(vocab, logits, &ids, &spans, params, &mut rng)?.breakdown)
}

pub fn inspect_loss(pred: &Path, target: &str, knobs: [Option<f64>; 5], json: bool) -> Result<()> {
    let [alpha, beta, sigma, lambda, tau] = knobs;
    let d = NtilParams::default();
    let params = NtilParams {
        alpha: alpha.unwrap_or(d.alpha),
        beta: beta.unwrap_or(d.beta),
        sigma: sigma.unwrap_or(d.sigma),
        lambda: lambda.unwrap_or(d.lambda),
        tau: tau.unwrap_or(d.tau),
        ..d
    };
    params.validate()?;
    let rows = parse_distributions(&config::read_input(pred)?)?;
    let b = inspect_breakdown(&Vocabulary::default(), &rows, target, &params)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&b)?);
        return Ok(());
    }
    for (k, v) in [
        ("ce", b.ce),
        ("emd_weighted", b.emd_weighted),
        ("relative", b.relative),
        ("magnitude", b.magnitude),
        ("ntil", b.ntil),
        ("total", b.total),
    ] {
        println!("{k:<16} {v:.6}");
    }
    for s in &b.per_span {
        println!("{:<16} {:.6}", "predicted_value", s.predicted_value);
        println!("{:<16} {:.6}", "target_value", s.target_value);
    }
    Ok(())
}

pub fn check(suite: &str, seed: u64) -> Result<()> {
    let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    let mut failed = Vec::new();
    for name in names {
        let reports = run_suite(name, seed)
            .ok_or_else(|| contract(format!("unknown suite {name:?} (expected one of {SUITES:?} or all)")))?;
        for r in reports {
            println!("{r}");
            if !r.passed() {
                failed.push(r.name.clone());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(VerificationFailed(format!("failing checks: {}", failed.join(", "))).into())
    }
}

/// Values of one swept coefficient: alpha and beta over 0..0.4, sigma and
/// lambda over 0..0.7, in steps of 0.1.
fn grid(param: &str) -> Option<Vec<f64>> {
    let top = match param {
        "alpha" | "beta" => 4,
        "sigma" | "lambda" => 7,
        _ => return None,
    };
    Some((0..=top).map(|i| i as f64 / 10.0).collect())
}

fn set_param(p: &mut NtilParams, name: &str, value: f64) {
    match name {
        "alpha" => p.alpha = value,
        "beta" => p.beta = value,
        "sigma" => p.sigma = value,
        "lambda" => p.lambda = value,
        _ => unreachable!("validated by grid()"),
    }
}

/// Parameter settings visited by a sweep, without repeats.
pub fn sweep_cells(base: &NtilParams, params: &[&str], full: bool) -> Vec<NtilParams> {
    let mut cells: Vec<NtilParams> = Vec::new();
    if full {
        cells.push(*base);
        for name in params {
            let values = grid(name).expect("validated");
            cells = cells
                .iter()
                .flat_map(|c| {
                    values.iter().map(move |&v| {
                        let mut c = *c;
                        set_param(&mut c, name, v);
                        c
                    })
                })
                .collect();
        }
    } else {
        for name in params {
            for v in grid(name).expect("validated") {
                let mut c = *base;
                set_param(&mut c, name, v);
                if !cells.contains(&c) {
                    cells.push(c);
                }
            }
        }
    }
    cells
}

pub fn sweep(config_path: Option<&Path>, params: &str, full: bool, overrides: &Overrides) -> Result<()> {
    let loaded = config::resolve(config_path, overrides)?;
    let base = loaded.config;
    let out = base
        .out_dir
        .clone()
        .ok_or_else(|| contract("no output directory: set out_dir or pass --out"))?;
    let out = out.as_path();
    if base.training.loss != LossMode::Ntil {
        return Err(contract("a sweep varies the NTIL coefficients; use loss = \"ntil\""));
    }
    if base.training.test_data.is_none() {
        return Err(contract("a sweep needs test_data to score each cell"));
    }
    let names: Vec<&str> = params.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(contract("no parameters to sweep"));
    }
    if let Some(bad) = names.iter().find(|n| grid(n).is_none()) {
        return Err(contract(format!("cannot sweep {bad:?} (expected alpha, beta, sigma or lambda)")));
    }
    let cells = sweep_cells(&base.training.ntil, &names, full);
    let manifest = RunManifest::new(
        "sweep",
        Some(base.training.seed),
        &serde_json::json!({ "base": base, "params": names, "full": full, "cells": cells.len() }),
        &loaded.source.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
    )?;
    manifest.write(out)?;

    let mut csv = String::from("cell,alpha,beta,sigma,lambda,exact_match,mean_abs_error,median_abs_error,failure_rate,final_total\n");
    for (i, cell) in cells.iter().enumerate() {
        let name = format!(
            "cell-{i:03}-a{}-b{}-s{}-l{}",
            cell.alpha, cell.beta, cell.sigma, cell.lambda
        );
        let mut config = base.clone();
        config.training.ntil = *cell;
        config.training.checkpoint_dir = None;
        let result = run_training(&config, &out.join(&name), None, loaded.source.as_deref())?;
        let m = result.metrics.expect("sweeps always have test data");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{},{},{},{},{}",
            cell.alpha,
            cell.beta,
            cell.sigma,
            cell.lambda,
            m.exact_match,
            opt(m.mean_abs_error),
            opt(m.median_abs_error),
            m.failure_rate,
            opt(result.last.map(|r| r.total))
        );
        println!("{name}: exact_match {:.4} mean_abs_error {}", m.exact_match, fmt_opt(m.mean_abs_error));
    }
    fs::write(out.join("sweep.csv"), csv)?;
    manifest.finish(out)?;
    println!("{} cells written to {}", cells.len(), out.join("sweep.csv").display());
    Ok(())
}
