//! Deterministic synthetic datasets: integer/decimal arithmetic and textual
//! clock readings.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Arithmetic,
    Clock,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arithmetic" => Ok(Task::Arithmetic),
            "clock" => Ok(Task::Clock),
            other => Err(format!("unknown task {other:?} (expected arithmetic or clock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub target: String,
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArithOp {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    /// Quotient rounded half-up to two decimals.
    #[serde(rename = "/")]
    Div,
}

impl ArithOp {
    pub fn symbol(self) -> char {
        match self {
            ArithOp::Add => '+',
            ArithOp::Sub => '-',
            ArithOp::Mul => '*',
            ArithOp::Div => '/',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '+' => Some(ArithOp::Add),
            '-' => Some(ArithOp::Sub),
            '*' | 'x' | '×' => Some(ArithOp::Mul),
            '/' => Some(ArithOp::Div),
            _ => None,
        }
    }

    /// Exact answer text.
    pub fn answer(self, a: u64, b: u64) -> String {
        match self {
            ArithOp::Add => (a + b).to_string(),
            ArithOp::Sub => (a as i64 - b as i64).to_string(),
            ArithOp::Mul => (a * b).to_string(),
            ArithOp::Div => {
                let hundredths = (200 * a + b) / (2 * b);
                format!("{}.{:02}", hundredths / 100, hundredths % 100)
            }
        }
    }
}

/// Answer to an arithmetic prompt such as `"12+34="`, recomputed from the
/// prompt text alone. `None` when the prompt does not have that shape.
pub fn recompute_answer(prompt: &str) -> Option<String> {
    let body = prompt.strip_suffix('=')?;
    let (at, op) = body.char_indices().skip(1).find_map(|(i, c)| ArithOp::from_symbol(c).map(|op| (i, op)))?;
    let number = |s: &str| -> Option<u64> {
        (!s.is_empty() && s.bytes().all(|c| c.is_ascii_digit())).then(|| s.parse().ok())?
    };
    let (a, b) = (number(&body[..at])?, number(&body[at + 1..])?);
    if op == ArithOp::Div && b == 0 {
        return None;
    }
    Some(op.answer(a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArithmeticSpec {
    pub n: usize,
    pub seed: u64,
    /// Operands are drawn uniformly from `0..10^max_digits`.
    pub max_digits: u32,
    pub ops: Vec<ArithOp>,
    /// Adds two-decimal division to the operator pool.
    pub decimal: bool,
}

impl ArithmeticSpec {
    pub fn addition(n: usize, seed: u64, max_digits: u32) -> Self {
        Self {
            n,
            seed,
            max_digits,
            ops: vec![ArithOp::Add],
            decimal: false,
        }
    }
}

/// Examples with distinct prompts, e.g. prompt `"12+34="`, target `"46"`.
pub fn gen_arithmetic(spec: &ArithmeticSpec) -> Result<Vec<Example>> {
    if spec.n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    if !(1..=6).contains(&spec.max_digits) {
        return Err(DataError::Invalid(format!("max_digits {} outside 1..=6", spec.max_digits)));
    }
    let mut ops: Vec<ArithOp> = spec.ops.iter().copied().filter(|&o| o != ArithOp::Div).collect();
    ops.dedup();
    if spec.decimal || spec.ops.contains(&ArithOp::Div) {
        ops.push(ArithOp::Div);
    }
    if ops.is_empty() {
        return Err(DataError::Invalid("no operators selected".into()));
    }
    let bound = 10u64.pow(spec.max_digits);
    let capacity: u64 = ops
        .iter()
        .map(|&o| if o == ArithOp::Div { bound * (bound - 1) } else { bound * bound })
        .sum();
    if spec.n as u64 > capacity {
        return Err(DataError::Invalid(format!(
            "only {capacity} distinct prompts exist for these settings, {} requested",
            spec.n
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(spec.n);
    let mut out = Vec::with_capacity(spec.n);
    while out.len() < spec.n {
        let op = ops[rng.gen_range(0..ops.len())];
        let a = rng.gen_range(0..bound);
        let b = if op == ArithOp::Div {
            rng.gen_range(1..bound)
        } else {
            rng.gen_range(0..bound)
        };
        let prompt = format!("{a}{}{b}=", op.symbol());
        if seen.insert(prompt.clone()) {
            out.push(Example {
                prompt,
                target: op.answer(a, b),
                task: Task::Arithmetic,
            });
        }
    }
    Ok(out)
}

const NUMBER_WORDS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

/// A reading on a 12-hour dial at five-minute resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClockTime {
    pub hour: u32,
    pub minute: u32,
}

impl ClockTime {
    /// Parses labels of the form `H_MM`, e.g. `2_55`.
    pub fn parse(label: &str) -> Option<Self> {
        let (h, m) = label.split_once('_')?;
        if m.len() != 2 || h.is_empty() || h.len() > 2 {
            return None;
        }
        let hour: u32 = h.parse().ok()?;
        let minute: u32 = m.parse().ok()?;
        ((1..=12).contains(&hour) && minute < 60).then_some(Self { hour, minute })
    }

    pub fn label(&self) -> String {
        format!("{}_{:02}", self.hour, self.minute)
    }

    /// Minutes past 12 o'clock.
    pub fn minutes(&self) -> u32 {
        (self.hour % 12) * 60 + self.minute
    }

    /// Shortest distance around the dial, in hours.
    pub fn gap_hours(&self, other: &ClockTime) -> f64 {
        let d = self.minutes().abs_diff(other.minutes());
        d.min(720 - d) as f64 / 60.0
    }

    /// Hand positions in words, e.g. `hour hand past two, minute hand on eleven=`.
    pub fn describe(&self) -> String {
        let hour_word = NUMBER_WORDS[self.hour as usize - 1];
        let relation = if self.minute == 0 { "on" } else { "past" };
        let minute_word = match self.minute / 5 {
            0 => "twelve",
            k => NUMBER_WORDS[k as usize - 1],
        };
        format!("hour hand {relation} {hour_word}, minute hand on {minute_word}=")
    }
}

/// Clock readings whose labels cover the 144 five-minute classes evenly:
/// every consecutive block of 144 examples holds each class once, in a
/// seeded random order.
pub fn gen_clock(n: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    let classes: Vec<ClockTime> = (1..=12)
        .flat_map(|hour| (0..12).map(move |k| ClockTime { hour, minute: 5 * k }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut block = classes.clone();
        block.shuffle(&mut rng);
        out.extend(block.into_iter().take(n - out.len()).map(|t| Example {
            prompt: t.describe(),
            target: t.label(),
            task: Task::Clock,
        }));
    }
    Ok(out)
}

/// Splits into (train, test) so that no prompt appears on both sides. About
/// `test_fraction` of the distinct prompts go to test; example order is kept.
pub fn split(examples: &[Example], test_fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut prompts: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for e in examples {
        if seen.insert(e.prompt.as_str()) {
            prompts.push(&e.prompt);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prompts.shuffle(&mut rng);
    let n_test = (prompts.len() as f64 * test_fraction).round() as usize;
    let test_prompts: HashSet<&str> = prompts[..n_test].iter().copied().collect();
    let (test, train) = examples
        .iter()
        .cloned()
        .partition(|e| test_prompts.contains(e.prompt.as_str()));
    Ok((train, test))
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
