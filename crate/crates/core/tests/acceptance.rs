//! Acceptance run: one PASS/FAIL line per criterion, with runtimes.
//!
//! Criteria 5 and 6 are known not to hold (see the README); their FAIL lines
//! are printed but do not fail the target unless `NTIL_ACCEPTANCE_STRICT=1`.
//! Any other FAIL exits non-zero.

use std::time::{Duration, Instant};

use ntil::autodiff::Tape;
use ntil::checks::{
    construct_value_exact, emd_gradient_law, emd_vs_oracle, gradient_suites, gumbel_argmax, oracle_vs_enumeration,
    CheckReport,
};
use ntil::data::{gen_arithmetic, split, ArithmeticSpec, ClockTime, Example};
use ntil::loss::{cross_entropy, emd_digit, magnitude_deviation, relative_deviation, LossMode};
use ntil::model::Architecture;
use ntil::train::{evaluate, time_gap_hours, train, EvalMetrics, ModelSettings, StepRecord, TrainingConfig};
use ntil::vocab::Vocabulary;

const SEED: u64 = 0;
const KNOWN_FAILURES: [u32; 2] = [5, 6];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn from_reports(reports: &[CheckReport]) -> Self {
        Self {
            passed: reports.iter().all(CheckReport::passed),
            detail: reports.iter().map(|r| format!("\n      {r}")).collect(),
        }
    }
}

fn within(value: f64, expected: f64, tol: f64) -> bool {
    (value - expected).abs() <= tol
}

fn worked_constants() -> Outcome {
    let tape = Tape::new();
    let eps = 1e-8;
    let rel = |x: f64, y: f64| relative_deviation(tape.scalar(x), y, eps).unwrap().item();
    let mag = |x: f64, y: f64| magnitude_deviation(tape.scalar(x), y, eps).unwrap().item();
    let values = [
        ("relative(1, 10)", rel(1.0, 10.0), 0.90, 0.005),
        ("relative(1, 100)", rel(1.0, 100.0), 0.99, 0.005),
        ("magnitude(1, 10)", mag(1.0, 10.0), 2.30, 0.01),
        ("magnitude(1, 100)", mag(1.0, 100.0), 4.61, 0.01),
    ];
    Outcome {
        passed: values.iter().all(|&(_, v, e, t)| within(v, e, t)),
        detail: values
            .iter()
            .map(|(name, v, e, t)| format!("{name} = {v:.6} (want {e} ± {t})"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn ce_of(p: &[f64; 10], k: usize) -> f64 {
    let tape = Tape::new();
    // zero probabilities become logits far enough down to vanish in softmax
    let logits: Vec<f64> = p.iter().map(|&x| if x > 0.0 { x.ln() } else { -1e4 }).collect();
    let logits = tape.constant(logits, &[1, 10]).unwrap();
    cross_entropy(logits, &[k]).unwrap().item()
}

fn emd_of(p: &[f64; 10], k: usize) -> f64 {
    let tape = Tape::new();
    emd_digit(tape.constant(p.to_vec(), &[10]).unwrap(), k).unwrap().item()
}

fn ce_degeneracy() -> Outcome {
    let mut ok = true;
    let mut smallest_gap = f64::INFINITY;
    let mut worst_ce = 0.0f64;
    for k in 0..10 {
        let near = if k < 9 { k + 1 } else { k - 1 };
        let far = if k < 5 { 9 } else { 0 };
        let mut p_near = [0.0; 10];
        p_near[k] = 0.5;
        p_near[near] = 0.5;
        let mut p_far = [0.0; 10];
        p_far[k] = 0.5;
        p_far[far] = 0.5;
        // 0.6931 is ln 2 to four places; the 1e-6 tolerance applies to ln 2
        for ce in [ce_of(&p_near, k), ce_of(&p_far, k)] {
            worst_ce = worst_ce.max((ce - std::f64::consts::LN_2).abs());
            ok &= within(ce, std::f64::consts::LN_2, 1e-6);
        }
        let (e_near, e_far) = (emd_of(&p_near, k), emd_of(&p_far, k));
        smallest_gap = smallest_gap.min(e_far - e_near);
        ok &= e_far - e_near >= 2.0 && e_near < e_far;
    }
    Outcome {
        passed: ok,
        detail: format!(
            "CE within {worst_ce:.1e} of ln 2 = 0.6931 for both shapes at every target; \
             far - near EMD >= {smallest_gap:.2}, near always lower"
        ),
    }
}

fn oracle_equivalence() -> Outcome {
    Outcome::from_reports(&[emd_vs_oracle(1000, SEED), oracle_vs_enumeration(4, 8)])
}

fn gradient_suite() -> Outcome {
    let mut reports = gradient_suites(200, SEED);
    reports.push(emd_gradient_law(1000, SEED));
    Outcome::from_reports(&reports)
}

fn gumbel_determinism() -> Outcome {
    let [kept, mass] = gumbel_argmax(10_000, SEED);
    Outcome::from_reports(&[kept, mass, construct_value_exact(SEED)])
}

const COMPARISON_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn comparison_config(loss: LossMode, seed: u64) -> TrainingConfig {
    TrainingConfig {
        loss,
        seed,
        epochs: 20,
        batch_size: 32,
        learning_rate: 3e-3,
        model: ModelSettings {
            embed_dim: 64,
            hidden_dim: 128,
            context_len: 16,
            architecture: Architecture::Gru,
        },
        ..Default::default()
    }
}

fn held_out(config: &TrainingConfig, vocab: &Vocabulary, train_set: &[Example], test: &[Example]) -> EvalMetrics {
    let outcome = train(config, vocab, train_set, None, &mut |_| Ok(())).unwrap();
    evaluate(&outcome.checkpoint.model, vocab, test).unwrap()
}

fn training_comparison() -> Outcome {
    let vocab = Vocabulary::default();
    let all = gen_arithmetic(&ArithmeticSpec::addition(10_000, SEED, 3)).unwrap();
    let (train_set, test) = split(&all, 0.1, SEED).unwrap();
    let mut lower_error = 0;
    let mut accuracy_kept = 0;
    let mut rows = Vec::new();
    for seed in COMPARISON_SEEDS {
        let ce = held_out(&comparison_config(LossMode::Ce, seed), &vocab, &train_set, &test);
        let nt = held_out(&comparison_config(LossMode::Ntil, seed), &vocab, &train_set, &test);
        let (ce_mae, nt_mae) = (ce.mean_abs_error.unwrap_or(f64::INFINITY), nt.mean_abs_error.unwrap_or(f64::INFINITY));
        lower_error += usize::from(nt_mae <= ce_mae);
        accuracy_kept += usize::from(nt.exact_match >= ce.exact_match - 0.005);
        rows.push(format!(
            "\n      seed {seed}: mae ce {ce_mae:.3} ntil {nt_mae:.3}; exact ce {:.3} ntil {:.3}; unparsed ce {} ntil {}",
            ce.exact_match, nt.exact_match, ce.failures, nt.failures
        ));
    }
    let n = COMPARISON_SEEDS.len();
    Outcome {
        passed: lower_error >= 4 && accuracy_kept == n,
        detail: format!(
            "{} train / {} test; (a) ntil mae <= ce in {lower_error}/{n} seeds (need 4); \
             (b) ntil exact >= ce - 0.005 in {accuracy_kept}/{n} seeds (need {n}){}",
            train_set.len(),
            test.len(),
            rows.concat()
        ),
    }
}

/// The metric log as written to disk, minus the mode label.
fn log_without_mode(records: &[StepRecord]) -> Vec<String> {
    records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).unwrap();
            v.as_object_mut().unwrap().remove("mode");
            v.to_string()
        })
        .collect()
}

fn reduction_identities() -> Outcome {
    let vocab = Vocabulary::default();
    let data = gen_arithmetic(&ArithmeticSpec::addition(2000, SEED, 3)).unwrap();
    let base = TrainingConfig {
        epochs: 1,
        seed: 11,
        ..Default::default()
    };
    let log = |loss: LossMode, edit: &dyn Fn(&mut TrainingConfig)| {
        let mut cfg = TrainingConfig { loss, ..base.clone() };
        edit(&mut cfg);
        log_without_mode(&train(&cfg, &vocab, &data, None, &mut |_| Ok(())).unwrap().records)
    };
    let ce = log(LossMode::Ce, &|_| {});
    let ntil_no_lambda = log(LossMode::Ntil, &|c| c.ntil.lambda = 0.0);
    let emd = log(LossMode::Emd, &|_| {});
    let ntil_no_value = log(LossMode::Ntil, &|c| {
        c.ntil.alpha = 0.0;
        c.ntil.beta = 0.0;
        c.ntil.sigma = 0.0;
    });
    let differs = ce != emd;
    Outcome {
        passed: ce == ntil_no_lambda && emd == ntil_no_value && differs,
        detail: format!(
            "{} steps each; lambda=0 log identical to ce: {}; alpha=beta=sigma=0 log identical to emd: {}; \
             ce and emd logs differ: {differs}",
            ce.len(),
            ce == ntil_no_lambda,
            emd == ntil_no_value
        ),
    }
}

fn clock_metric() -> Outcome {
    let gap = time_gap_hours("4_35", "6_20");
    let mut zero = true;
    for hour in 1..=12 {
        for minute in (0..60).step_by(5) {
            let label = ClockTime { hour, minute }.label();
            zero &= time_gap_hours(&label, &label) == Some(0.0);
        }
    }
    Outcome {
        passed: gap == Some(1.75) && zero,
        detail: format!("gap(4_35, 6_20) = {gap:?} hours; gap(x, x) = 0 for all 144 labels: {zero}"),
    }
}

/// Number, name, time budget and check.
type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "worked constants", Duration::from_secs(1), worked_constants),
        (2, "CE degeneracy", Duration::from_secs(1), ce_degeneracy),
        (3, "oracle equivalence", Duration::from_secs(10), oracle_equivalence),
        (4, "gradient suite", Duration::from_secs(60), gradient_suite),
        (5, "gumbel determinism", Duration::from_secs(10), gumbel_determinism),
        (6, "training comparison", Duration::from_secs(15 * 60), training_comparison),
        (7, "reduction identities", Duration::from_secs(120), reduction_identities),
        (8, "clock metric", Duration::from_secs(1), clock_metric),
    ];
    let strict = std::env::var("NTIL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut unexpected = Vec::new();
    let mut summary = Vec::new();
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = outcome.passed && in_time;
        let line = format!(
            "{} criterion {id} ({name}) in {:.2}s (budget {}s{}): {}",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", exceeded" },
            outcome.detail
        );
        println!("{line}");
        summary.push(line.lines().next().unwrap_or_default().to_string());
        if !passed && (strict || !KNOWN_FAILURES.contains(&id)) {
            unexpected.push(id);
        }
    }
    println!("\nsummary:");
    for line in &summary {
        println!("  {line}");
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures in criteria {unexpected:?}");
        std::process::exit(1);
    }
}
