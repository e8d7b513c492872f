//! Numerical token integrity loss.
//!
//! Token level: at every digit position the ten digit-token logits are
//! renormalized into a distribution over digit values and scored by the
//! digit-level earth mover's distance against the target digit, scaled by an
//! exponential place weight that favours leading digits.
//!
//! Sequence level: each numeric span is reconstructed as a real number from a
//! temperature-sharpened (Gumbel-)softmax over its digit rows and compared to
//! the target number through a relative and an order-of-magnitude deviation.
//!
//! The combined objective per span is
//! `weighted_emd + alpha * relative + beta * magnitude`; spans are averaged per
//! sequence, sequences averaged per batch, and the result is added to
//! cross-entropy with coefficient `lambda`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::vocab::{DigitSpan, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid parameter {name} = {value}: {reason}")]
    Param {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

fn contract(msg: impl Into<String>) -> LossError {
    LossError::Contract(msg.into())
}

/// Hyperparameters of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtilParams {
    /// Weight of the relative deviation term.
    pub alpha: f64,
    /// Weight of the magnitude deviation term.
    pub beta: f64,
    /// Exponential increment rate of the place weights.
    pub sigma: f64,
    /// Coefficient of the whole term when added to cross-entropy.
    pub lambda: f64,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Multiplier on the Gumbel noise; 0 makes value construction deterministic.
    pub noise_scale: f64,
    pub epsilon: f64,
    /// Keep cross-entropy at digit positions. Turning it off leaves the
    /// digit positions to the EMD term alone.
    pub digit_ce: bool,
}

impl Default for NtilParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            sigma: 0.2,
            lambda: 0.3,
            tau: 0.1,
            noise_scale: 0.0,
            epsilon: 1e-8,
            digit_ce: true,
        }
    }
}

impl NtilParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("sigma", self.sigma),
            ("lambda", self.lambda),
            ("noise_scale", self.noise_scale),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LossError::Param {
                    name,
                    value,
                    reason: "must be finite and non-negative",
                });
            }
        }
        for (name, value) in [("tau", self.tau), ("epsilon", self.epsilon)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LossError::Param {
                    name,
                    value,
                    reason: "must be finite and positive",
                });
            }
        }
        Ok(())
    }
}

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Cross-entropy only.
    Ce,
    /// Cross-entropy plus `lambda` times unweighted per-digit EMD.
    Emd,
    /// Cross-entropy plus `lambda` times the full objective.
    Ntil,
}

impl LossMode {
    /// Every mode evaluates the same graph; the modes differ only in which
    /// coefficients are forced to zero. All components are still reported.
    pub fn effective_params(self, params: &NtilParams) -> NtilParams {
        match self {
            LossMode::Ce => NtilParams { lambda: 0.0, ..*params },
            LossMode::Emd => NtilParams {
                alpha: 0.0,
                beta: 0.0,
                sigma: 0.0,
                ..*params
            },
            LossMode::Ntil => *params,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Emd => "emd",
            LossMode::Ntil => "ntil",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "emd" => Ok(LossMode::Emd),
            "ntil" => Ok(LossMode::Ntil),
            other => Err(format!("unknown loss mode {other:?} (expected ce, emd or ntil)")),
        }
    }
}

/// Predicted distribution over the ten digit values and the target digit.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPair {
    pred: [f64; 10],
    target: usize,
}

impl DistributionPair {
    pub fn new(pred: [f64; 10], target: usize) -> Result<Self> {
        if target > 9 {
            return Err(contract(format!("target digit {target} out of range")));
        }
        let sum: f64 = pred.iter().sum();
        if pred.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(contract(format!("prediction is not a distribution (sum {sum})")));
        }
        Ok(Self { pred, target })
    }

    pub fn pred(&self) -> &[f64; 10] {
        &self.pred
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Records the prediction as a differentiable leaf.
    pub fn to_tensor<'t>(&self, tape: &'t Tape) -> Tensor<'t> {
        tape.param(self.pred.to_vec(), &[10]).expect("ten values")
    }
}

/// Per-span contribution to a [`LossBreakdown`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLoss {
    /// Index of the sequence within the batch.
    pub sequence: usize,
    pub span: DigitSpan,
    pub emd_weighted: f64,
    pub relative: f64,
    pub magnitude: f64,
    pub predicted_value: f64,
    pub target_value: f64,
}

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub emd_weighted: f64,
    pub relative: f64,
    pub magnitude: f64,
    pub ntil: f64,
    pub total: f64,
    pub per_span: Vec<SpanLoss>,
}

/// Differentiable total plus its reported components.
#[derive(Debug)]
pub struct LossOutput<'t> {
    pub total: Tensor<'t>,
    pub breakdown: LossBreakdown,
}

/// Mean over rows of `-log softmax(row)[target]`.
pub fn cross_entropy<'t>(logits: Tensor<'t>, targets: &[usize]) -> Result<Tensor<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(contract(format!(
            "cross_entropy: {} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(contract("cross_entropy: no positions"));
    }
    let picked = logits.log_softmax(1)?.pick(targets)?;
    Ok(picked.mean()?.neg())
}

fn digit_distances(targets: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut onehot = vec![0.0; targets.len() * 10];
    let mut dist = vec![0.0; targets.len() * 10];
    for (r, &k) in targets.iter().enumerate() {
        onehot[r * 10 + k] = 1.0;
        for i in 0..10 {
            dist[r * 10 + i] = (i as f64 - k as f64).abs();
        }
    }
    (onehot, dist)
}

/// Digit-level EMD for each row of an N×10 probability matrix:
/// `Σ_i |x_i - y_i| · |i - k|` with `y` one-hot at the row's target `k`.
pub fn emd_digit_rows<'t>(pred: Tensor<'t>, targets: &[usize]) -> Result<Tensor<'t>> {
    let shape = pred.shape();
    if shape != [targets.len(), 10] {
        return Err(contract(format!(
            "emd_digit_rows: expected [{}, 10], got {shape:?}",
            targets.len()
        )));
    }
    if let Some(k) = targets.iter().find(|&&k| k > 9) {
        return Err(contract(format!("emd_digit_rows: target digit {k} out of range")));
    }
    let tape = pred.tape();
    let (onehot, dist) = digit_distances(targets);
    let onehot = tape.constant(onehot, &shape)?;
    let dist = tape.constant(dist, &shape)?;
    Ok(pred.sub(onehot)?.abs().mul(dist)?.sum(Some(1))?)
}

/// Digit-level EMD of one length-10 distribution against target digit `k`.
pub fn emd_digit<'t>(pred: Tensor<'t>, target: usize) -> Result<Tensor<'t>> {
    let rows = emd_digit_rows(pred.reshape(&[1, 10])?, &[target])?;
    Ok(rows.reshape(&[])?)
}

/// Place weights `(1 + sigma)^(n - i - 1)` for `i = 0..n`, leading digit first.
pub fn exp_position_weights(n: usize, sigma: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(contract("exp_position_weights: span has no digits"));
    }
    if !(sigma >= 0.0) {
        return Err(LossError::Param {
            name: "sigma",
            value: sigma,
            reason: "must be non-negative",
        });
    }
    Ok((0..n).map(|i| (1.0 + sigma).powi((n - i - 1) as i32)).collect())
}

/// Draws a standard Gumbel sample.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// `softmax((log_softmax(logits) + noise_scale * g) / tau)` along the last
/// axis, with `g` i.i.d. Gumbel(0, 1) drawn from `rng` and held constant.
/// No noise is drawn when `noise_scale` is zero.
pub fn gumbel_softmax<'t, R: Rng + ?Sized>(
    logits: Tensor<'t>,
    tau: f64,
    noise_scale: f64,
    rng: &mut R,
) -> Result<Tensor<'t>> {
    if !(tau > 0.0) {
        return Err(LossError::Param {
            name: "tau",
            value: tau,
            reason: "must be positive",
        });
    }
    let shape = logits.shape();
    let axis = shape
        .len()
        .checked_sub(1)
        .ok_or_else(|| contract("gumbel_softmax: scalar logits"))?;
    let mut perturbed = logits.log_softmax(axis)?;
    if noise_scale != 0.0 {
        let noise: Vec<f64> = (0..logits.numel())
            .map(|_| noise_scale * sample_gumbel(rng))
            .collect();
        perturbed = perturbed.add(logits.tape().constant(noise, &shape)?)?;
    }
    Ok(perturbed.scale(1.0 / tau).softmax(axis)?)
}

fn digit_column<'t>(tape: &'t Tape) -> Tensor<'t> {
    tape.constant((0..10).map(f64::from).collect(), &[10, 1])
        .expect("ten values")
}

fn place_values(span: &DigitSpan) -> Vec<f64> {
    span.place_exponents().map(|e| 10f64.powi(e)).collect()
}

/// Value of a numeric span from per-digit distributions: each row's expected
/// digit times its power of ten, summed. Rows run left to right over the
/// span's digits, the decimal point excluded.
pub fn construct_value<'t>(digit_rows: Tensor<'t>, span: &DigitSpan) -> Result<Tensor<'t>> {
    let shape = digit_rows.shape();
    let n = span.digit_count();
    if shape != [n, 10] {
        return Err(contract(format!(
            "construct_value: span has {n} digits, rows have shape {shape:?}"
        )));
    }
    let tape = digit_rows.tape();
    let expected = digit_rows.matmul(digit_column(tape))?;
    let places = tape.constant(place_values(span), &[n, 1])?;
    Ok(expected.mul(places)?.sum(None)?)
}

fn relative_elementwise<'t>(x: Tensor<'t>, y: Tensor<'t>, epsilon: f64) -> Result<Tensor<'t>> {
    let gap = x.sub(y)?.abs();
    Ok(gap.div(x.max_elem(y)?.offset(epsilon))?)
}

fn magnitude_elementwise<'t>(x: Tensor<'t>, y: Tensor<'t>, epsilon: f64) -> Result<Tensor<'t>> {
    let hi = x.max_elem(y)?.offset(epsilon);
    let lo = x.min_elem(y)?.offset(epsilon);
    Ok(hi.div(lo)?.log()?)
}

fn check_nonnegative(x: Tensor<'_>, y: f64) -> Result<()> {
    let bad = x.values().iter().copied().chain([y]).find(|v| !(*v >= 0.0));
    match bad {
        Some(v) => Err(contract(format!("value deviation needs non-negative inputs, got {v}"))),
        None => Ok(()),
    }
}

/// `|x - y| / (max(x, y) + epsilon)`.
pub fn relative_deviation<'t>(x: Tensor<'t>, y: f64, epsilon: f64) -> Result<Tensor<'t>> {
    check_nonnegative(x, y)?;
    let y = x.tape().scalar(y);
    relative_elementwise(x, y, epsilon)
}

/// `ln((max(x, y) + epsilon) / (min(x, y) + epsilon))`.
pub fn magnitude_deviation<'t>(x: Tensor<'t>, y: f64, epsilon: f64) -> Result<Tensor<'t>> {
    check_nonnegative(x, y)?;
    let y = x.tape().scalar(y);
    magnitude_elementwise(x, y, epsilon)
}

/// Teacher-forced targets of one sequence inside a batch of logit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTarget {
    /// Logit row predicting `targets[0]`; the sequence occupies
    /// `row_offset..row_offset + targets.len()`.
    pub row_offset: usize,
    pub targets: Vec<usize>,
    /// Positions before this index are excluded from every loss term.
    pub loss_start: usize,
    /// Numeric spans over `targets`, all starting at or after `loss_start`.
    pub spans: Vec<DigitSpan>,
}

impl SequenceTarget {
    /// A sequence whose every position is scored, with spans detected from
    /// the targets.
    pub fn unmasked(vocab: &Vocabulary, targets: Vec<usize>) -> Self {
        let spans = vocab.find_digit_spans(&targets);
        Self {
            row_offset: 0,
            targets,
            loss_start: 0,
            spans,
        }
    }
}

/// Loss over one sequence: `logits` row `t` is the prediction for
/// `target_ids[t]`, and every position counts towards cross-entropy.
pub fn ntil_loss<'t, R: Rng + ?Sized>(
    vocab: &Vocabulary,
    logits: Tensor<'t>,
    target_ids: &[usize],
    spans: &[DigitSpan],
    params: &NtilParams,
    rng: &mut R,
) -> Result<LossOutput<'t>> {
    let seq = SequenceTarget {
        row_offset: 0,
        targets: target_ids.to_vec(),
        loss_start: 0,
        spans: spans.to_vec(),
    };
    batch_loss(vocab, logits, std::slice::from_ref(&seq), params, rng)
}

struct DigitRow {
    row: usize,
    target: usize,
    weight: f64,
    place: f64,
    span: usize,
}

/// Loss over a batch of sequences sharing one logit matrix.
pub fn batch_loss<'t, R: Rng + ?Sized>(
    vocab: &Vocabulary,
    logits: Tensor<'t>,
    seqs: &[SequenceTarget],
    params: &NtilParams,
    rng: &mut R,
) -> Result<LossOutput<'t>> {
    params.validate()?;
    let tape = logits.tape();
    let shape = logits.shape();
    let [total_rows, vocab_size] = shape[..] else {
        return Err(contract(format!("logits must be rows x vocab, got {shape:?}")));
    };
    if vocab_size != vocab.len() {
        return Err(contract(format!(
            "logits have {vocab_size} columns for a vocabulary of {}",
            vocab.len()
        )));
    }
    if seqs.is_empty() {
        return Err(contract("empty batch"));
    }
    let batch = seqs.len() as f64;

    let mut ce_rows = Vec::new();
    let mut ce_targets = Vec::new();
    let mut ce_weights = Vec::new();
    let mut digit_rows: Vec<DigitRow> = Vec::new();
    // (sequence, span, target value, per-span weight)
    let mut span_meta: Vec<(usize, DigitSpan, f64, f64)> = Vec::new();

    for (s, seq) in seqs.iter().enumerate() {
        let len = seq.targets.len();
        if seq.row_offset + len > total_rows || seq.loss_start > len {
            return Err(contract(format!("sequence {s} exceeds the logit rows")));
        }
        let mut digit_positions = vec![false; len];
        let span_weight = 1.0 / (seq.spans.len().max(1) as f64 * batch);
        for span in &seq.spans {
            if span.start < seq.loss_start || !span.is_valid_in(vocab, &seq.targets) {
                return Err(contract(format!("sequence {s}: span {span:?} out of range")));
            }
            let weights = exp_position_weights(span.digit_count(), params.sigma)?;
            let span_idx = span_meta.len();
            for ((pos, w), place) in span.digit_positions().zip(weights).zip(place_values(span)) {
                digit_positions[pos] = true;
                digit_rows.push(DigitRow {
                    row: seq.row_offset + pos,
                    target: vocab.digit_value(seq.targets[pos]).expect("validated digit"),
                    weight: w * span_weight,
                    place,
                    span: span_idx,
                });
            }
            let y = vocab
                .span_value(&seq.targets, span)
                .map_err(|e| contract(e.to_string()))?;
            span_meta.push((s, *span, y, span_weight));
        }

        let scored: Vec<usize> = (seq.loss_start..len)
            .filter(|&p| params.digit_ce || !digit_positions[p])
            .collect();
        for &p in &scored {
            if seq.targets[p] >= vocab_size {
                return Err(contract(format!("sequence {s}: target id {} out of range", seq.targets[p])));
            }
            ce_rows.push(seq.row_offset + p);
            ce_targets.push(seq.targets[p]);
            ce_weights.push(1.0 / (scored.len() as f64 * batch));
        }
    }

    let ce = if ce_rows.is_empty() {
        tape.scalar(0.0)
    } else {
        let picked = logits.gather_rows(&ce_rows)?.log_softmax(1)?.pick(&ce_targets)?;
        let n = ce_weights.len();
        picked.mul(tape.constant(ce_weights, &[n])?)?.sum(None)?.neg()
    };

    let mut per_span = Vec::with_capacity(span_meta.len());
    let (emd, relative, magnitude) = if digit_rows.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let n = digit_rows.len();
        let rows: Vec<usize> = digit_rows.iter().map(|d| d.row).collect();
        let digit_logits = logits.gather_rows(&rows)?.select_cols(vocab.digit_token_ids())?;

        let targets: Vec<usize> = digit_rows.iter().map(|d| d.target).collect();
        let emd_rows = emd_digit_rows(digit_logits.softmax(1)?, &targets)?;
        let row_weights = tape.constant(digit_rows.iter().map(|d| d.weight).collect(), &[n])?;
        let emd = emd_rows.mul(row_weights)?.sum(None)?;

        let sharpened = gumbel_softmax(digit_logits, params.tau, params.noise_scale, rng)?;
        let places = tape.constant(digit_rows.iter().map(|d| d.place).collect(), &[n, 1])?;
        let contributions = sharpened.matmul(digit_column(tape))?.mul(places)?;
        let spans = span_meta.len();
        let mut membership = vec![0.0; spans * n];
        for (r, d) in digit_rows.iter().enumerate() {
            membership[d.span * n + r] = 1.0;
        }
        let predicted = tape.constant(membership, &[spans, n])?.matmul(contributions)?;
        let target = tape.constant(span_meta.iter().map(|m| m.2).collect(), &[spans, 1])?;
        let rel = relative_elementwise(predicted, target, params.epsilon)?;
        let mag = magnitude_elementwise(predicted, target, params.epsilon)?;
        let span_weights = tape.constant(span_meta.iter().map(|m| m.3).collect(), &[spans, 1])?;
        let relative = rel.mul(span_weights)?.sum(None)?;
        let magnitude = mag.mul(span_weights)?.sum(None)?;

        let emd_values = emd_rows.value();
        let (pred_values, rel_values, mag_values) = (predicted.value(), rel.value(), mag.value());
        for (idx, &(sequence, span, target_value, span_weight)) in span_meta.iter().enumerate() {
            let emd_weighted = digit_rows
                .iter()
                .zip(&emd_values)
                .filter(|(d, _)| d.span == idx)
                .map(|(d, e)| e * d.weight / span_weight)
                .sum();
            per_span.push(SpanLoss {
                sequence,
                span,
                emd_weighted,
                relative: rel_values[idx],
                magnitude: mag_values[idx],
                predicted_value: pred_values[idx],
                target_value,
            });
        }
        (emd, relative, magnitude)
    };

    let ntil = emd
        .add(relative.scale(params.alpha))?
        .add(magnitude.scale(params.beta))?;
    let total = ce.add(ntil.scale(params.lambda))?;

    let breakdown = LossBreakdown {
        ce: ce.item(),
        emd_weighted: emd.item(),
        relative: relative.item(),
        magnitude: magnitude.item(),
        ntil: ntil.item(),
        total: total.item(),
        per_span,
    };
    Ok(LossOutput { total, breakdown })
}
