//! Teacher-forced training and greedy-decoding evaluation.
//!
//! Each example becomes `<bos> prompt target <eos>`. The model reads every
//! token but the last and predicts the next one; only positions inside the
//! target (and the closing `<eos>`) are scored.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape};
use crate::data::{ClockTime, Example, Task};
use crate::loss::{batch_loss, LossBreakdown, LossError, LossMode, NtilParams, SequenceTarget};
use crate::model::{Architecture, Checkpoint, Model, ModelConfig, ModelError, RngState};
use crate::optim::{clip_global_norm, Adam};
use crate::vocab::{VocabError, Vocabulary};

/// Learning rate used when fine-tuning full-size language models.
pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("example {index}: {source}")]
    Encode {
        index: usize,
        #[source]
        source: VocabError,
    },
    #[error("loss diverged at step {step}: {breakdown:?}")]
    Diverged { step: u64, breakdown: Box<LossBreakdown> },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Model shape knobs exposed through the training config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub architecture: Architecture,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::default();
        Self {
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            context_len: d.context_len,
            architecture: d.architecture,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub loss: LossMode,
    #[serde(flatten)]
    pub ntil: NtilParams,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient norm cap.
    pub clip_norm: f64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    /// Evaluate on the test data every this many epochs (0 disables).
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub model: ModelSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            loss: LossMode::Ntil,
            ntil: NtilParams::default(),
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::Constant,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            clip_norm: 1.0,
            train_data: None,
            test_data: None,
            eval_every: 0,
            checkpoint_dir: None,
            model: ModelSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.ntil.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config(format!("clip norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            context_len: self.model.context_len,
            architecture: self.model.architecture,
            seed: self.seed,
        }
    }
}

/// How the learning rate evolves over the configured epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at the end of the last epoch.
    Linear,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown lr schedule {other:?} (expected constant or linear)")),
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub mode: LossMode,
    pub ce: f64,
    pub emd_weighted: f64,
    pub relative: f64,
    pub magnitude: f64,
    pub ntil: f64,
    pub total: f64,
}

/// Model inputs and loss targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<SequenceTarget>,
}

/// Encodes examples for teacher forcing. `first_index` only labels errors.
pub fn build_batch(vocab: &Vocabulary, examples: &[Example], first_index: usize) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let encode = |text: &str| vocab.encode(text).map_err(|source| TrainError::Encode { index: first_index + i, source });
        let prompt = encode(&e.prompt)?;
        let answer = encode(&e.target)?;
        if answer.is_empty() {
            return Err(TrainError::Config(format!("example {} has an empty target", first_index + i)));
        }
        let mut tokens = Vec::with_capacity(prompt.len() + answer.len() + 2);
        tokens.push(vocab.bos_id());
        tokens.extend(&prompt);
        tokens.extend(&answer);
        tokens.push(vocab.eos_id());
        let loss_start = prompt.len();
        let next = tokens[1..].to_vec();
        let spans = vocab
            .find_digit_spans(&next[loss_start..])
            .into_iter()
            .map(|s| s.shifted(loss_start))
            .collect();
        inputs.push(tokens[..tokens.len() - 1].to_vec());
        targets.push(SequenceTarget {
            row_offset: 0,
            targets: next,
            loss_start,
            spans,
        });
    }
    let steps = inputs.iter().map(Vec::len).max().unwrap_or(0);
    for (b, t) in targets.iter_mut().enumerate() {
        t.row_offset = b * steps;
    }
    Ok(Batch { inputs, targets })
}

/// Parameters, optimizer and random stream of one training run.
pub struct Trainer {
    config: TrainingConfig,
    vocab: Vocabulary,
    model: Model,
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainingConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.model_config(&vocab))?;
        let optimizer = Adam::new(config.learning_rate, model.params());
        // distinct stream from the one used for initialization
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config,
            vocab,
            model,
            optimizer,
            rng,
            step: 0,
            epoch: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainingConfig, vocab: Vocabulary, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.config().vocab_size != vocab.len() {
            return Err(TrainError::Config("checkpoint vocabulary size differs".into()));
        }
        let optimizer = match checkpoint.optimizer {
            Some(state) => Adam::with_state(config.learning_rate, state),
            None => Adam::new(config.learning_rate, checkpoint.model.params()),
        };
        let rng = match &checkpoint.rng {
            Some(state) => state.restore()?,
            None => return Err(TrainError::Config("checkpoint carries no rng state".into())),
        };
        let epoch = checkpoint.metadata.get("epoch").and_then(|e| e.as_u64()).unwrap_or(0) as usize;
        Ok(Self {
            config,
            vocab,
            model: checkpoint.model,
            optimizer,
            rng,
            step: checkpoint.step,
            epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.state().clone()),
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            metadata: serde_json::json!({
                "epoch": self.epoch,
                "training": self.config,
            }),
        }
    }

    /// One optimizer update on `examples`.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<StepRecord> {
        let batch = build_batch(&self.vocab, examples, 0)?;
        let params = self.config.loss.effective_params(&self.config.ntil);
        let tape = Tape::new();
        let bound = self.model.bind(&tape, true)?;
        let logits = self.model.forward(&bound, &batch.inputs)?;
        let out = batch_loss(&self.vocab, logits, &batch.targets, &params, &mut self.rng)?;
        self.step += 1;
        let b = out.breakdown;
        if !b.total.is_finite() {
            return Err(TrainError::Diverged {
                step: self.step,
                breakdown: Box::new(b),
            });
        }
        tape.backward(out.total)?;
        let mut grads: Vec<Vec<f64>> = bound
            .tensors()
            .iter()
            .zip(self.model.params())
            .map(|(t, p)| t.grad().unwrap_or_else(|| vec![0.0; p.values.len()]))
            .collect();
        clip_global_norm(&mut grads, self.config.clip_norm);
        self.optimizer.step(self.model.params_mut(), &grads);
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch,
            mode: self.config.loss,
            ce: b.ce,
            emd_weighted: b.emd_weighted,
            relative: b.relative,
            magnitude: b.magnitude,
            ntil: b.ntil,
            total: b.total,
        })
    }

    /// Shuffles `data` with the run's rng and takes one step per batch.
    pub fn run_epoch(
        &mut self,
        data: &[Example],
        on_step: &mut dyn FnMut(&StepRecord) -> std::io::Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let per_epoch = data.len().div_ceil(self.config.batch_size);
        let total = (per_epoch * self.config.epochs.max(1)) as f64;
        let mut records = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(self.config.batch_size) {
            self.optimizer.learning_rate = match self.config.lr_schedule {
                LrSchedule::Constant => self.config.learning_rate,
                LrSchedule::Linear => self.config.learning_rate * (1.0 - self.step as f64 / total).max(0.0),
            };
            let examples: Vec<Example> = chunk.iter().map(|&i| data[i].clone()).collect();
            let record = self.train_step(&examples)?;
            on_step(&record)?;
            records.push(record);
        }
        self.epoch += 1;
        Ok(records)
    }
}

/// Evaluation after some epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub metrics: EvalMetrics,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EpochEval>,
}

/// Runs the configured number of epochs from a fresh initialization, calling
/// `on_step` after every update. Writes per-epoch checkpoints when the config
/// names a directory, and evaluates on `eval_set` at the configured cadence.
pub fn train(
    config: &TrainingConfig,
    vocab: &Vocabulary,
    train_set: &[Example],
    eval_set: Option<&[Example]>,
    on_step: &mut dyn FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone(), vocab.clone())?;
    continue_training(trainer, train_set, eval_set, on_step)
}

/// Runs `trainer` up to the configured epoch count.
pub fn continue_training(
    mut trainer: Trainer,
    train_set: &[Example],
    eval_set: Option<&[Example]>,
    on_step: &mut dyn FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome> {
    // fail on unencodable data before spending any compute
    build_batch(&trainer.vocab, train_set, 0)?;
    if let Some(dir) = &trainer.config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut records = Vec::new();
    let mut evals = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        records.extend(trainer.run_epoch(train_set, on_step)?);
        let epoch = trainer.epoch;
        if let Some(dir) = &trainer.config.checkpoint_dir {
            let ckpt = trainer.checkpoint();
            ckpt.save(&dir.join(format!("epoch-{epoch:03}.ckpt")))?;
            ckpt.save(&dir.join("last.ckpt"))?;
        }
        let every = trainer.config.eval_every;
        if let Some(eval_set) = eval_set {
            if every > 0 && (epoch.is_multiple_of(every) || epoch == trainer.config.epochs) {
                let metrics = evaluate(&trainer.model, &trainer.vocab, eval_set)?;
                evals.push(EpochEval { epoch, metrics });
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        records,
        evals,
    })
}

/// One decoded evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub prompt: String,
    pub target: String,
    pub output: String,
    pub exact: bool,
    /// Absolute numeric error (hours on the dial for clock examples).
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub examples: usize,
    pub exact_match: f64,
    /// Outputs that did not parse as a number (or clock reading).
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_abs_error: Option<f64>,
    pub median_abs_error: Option<f64>,
    /// Mean dial distance in hours, clock examples only.
    pub mean_time_gap_hours: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub predictions: Vec<Prediction>,
}

/// Absolute difference between two numeric strings, `None` when either
/// fails to parse.
pub fn numeric_error(prediction: &str, truth: &str) -> Option<f64> {
    let parse = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    Some((parse(prediction)? - parse(truth)?).abs())
}

/// Distance in hours between two `H_MM` labels on a 12-hour dial.
pub fn time_gap_hours(prediction: &str, truth: &str) -> Option<f64> {
    Some(ClockTime::parse(prediction)?.gap_hours(&ClockTime::parse(truth)?))
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

/// Scores already-decoded outputs against their examples.
pub fn score(examples: &[Example], outputs: &[String]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    assert_eq!(examples.len(), outputs.len(), "one output per example");
    let mut predictions = Vec::with_capacity(examples.len());
    let mut numeric = Vec::new();
    let mut gaps = Vec::new();
    let mut failures = 0;
    for (e, out) in examples.iter().zip(outputs) {
        let error = match e.task {
            Task::Arithmetic => numeric_error(out, &e.target),
            Task::Clock => time_gap_hours(out, &e.target),
        };
        match (error, e.task) {
            (None, _) => failures += 1,
            (Some(x), Task::Arithmetic) => numeric.push(x),
            (Some(x), Task::Clock) => gaps.push(x),
        }
        predictions.push(Prediction {
            prompt: e.prompt.clone(),
            target: e.target.clone(),
            output: out.clone(),
            exact: *out == e.target,
            error,
        });
    }
    let n = examples.len();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalMetrics {
        examples: n,
        exact_match: predictions.iter().filter(|p| p.exact).count() as f64 / n as f64,
        failures,
        failure_rate: failures as f64 / n as f64,
        mean_abs_error: mean(&numeric),
        median_abs_error: median(&mut numeric.clone()),
        mean_time_gap_hours: mean(&gaps),
        predictions,
    })
}

/// Greedy-decodes every prompt and scores the outputs.
pub fn evaluate(model: &Model, vocab: &Vocabulary, examples: &[Example]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut prompts = Vec::with_capacity(examples.len());
    let mut max_target = 0;
    for (index, e) in examples.iter().enumerate() {
        let mut ids = vec![vocab.bos_id()];
        ids.extend(vocab.encode(&e.prompt).map_err(|source| TrainError::Encode { index, source })?);
        prompts.push(ids);
        max_target = max_target.max(e.target.chars().count());
    }
    let decoded = model.generate_greedy_batch(&prompts, max_target + 2, vocab.eos_id())?;
    let outputs = decoded
        .iter()
        .map(|ids| {
            let end = ids.iter().position(|&t| t == vocab.eos_id()).unwrap_or(ids.len());
            vocab.decode(&ids[..end]).map_err(|source| TrainError::Encode { index: 0, source })
        })
        .collect::<Result<Vec<_>>>()?;
    score(examples, &outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_arithmetic, ArithmeticSpec};

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            batch_size: 8,
            epochs: 1,
            seed: 3,
            model: ModelSettings {
                embed_dim: 8,
                hidden_dim: 16,
                context_len: 16,
                architecture: Architecture::Gru,
            },
            ..Default::default()
        }
    }

    #[test]
    fn batch_layout() {
        let v = Vocabulary::default();
        let ex = vec![
            Example {
                prompt: "1+2=".into(),
                target: "3".into(),
                task: Task::Arithmetic,
            },
            Example {
                prompt: "10+20=".into(),
                target: "30".into(),
                task: Task::Arithmetic,
            },
        ];
        let b = build_batch(&v, &ex, 0).unwrap();
        assert_eq!(b.inputs[0].len(), 6);
        assert_eq!(b.inputs[1].len(), 9);
        assert_eq!(b.targets[1].row_offset, 9);
        assert_eq!(b.targets[0].loss_start, 4);
        assert_eq!(v.decode(&b.targets[1].targets[6..]).unwrap(), "30<eos>");
        let span = b.targets[1].spans[0];
        assert_eq!((span.start, span.end), (6, 8));
        assert_eq!(b.targets[1].spans.len(), 1);
    }

    #[test]
    fn unencodable_examples_are_rejected() {
        let v = Vocabulary::default();
        let bad = vec![Example {
            prompt: "1#2=".into(),
            target: "3".into(),
            task: Task::Arithmetic,
        }];
        assert!(matches!(build_batch(&v, &bad, 4), Err(TrainError::Encode { index: 4, .. })));
        let err = train(&small_config(), &v, &bad, None, &mut |_| Ok(()));
        assert!(matches!(err, Err(TrainError::Encode { .. })));
    }

    #[test]
    fn invalid_configs() {
        let v = Vocabulary::default();
        for cfg in [
            TrainingConfig {
                learning_rate: 0.0,
                ..small_config()
            },
            TrainingConfig {
                batch_size: 0,
                ..small_config()
            },
            TrainingConfig {
                ntil: NtilParams {
                    tau: -1.0,
                    ..Default::default()
                },
                ..small_config()
            },
        ] {
            assert!(Trainer::new(cfg, v.clone()).is_err());
        }
    }

    #[test]
    fn diverging_parameters_abort() {
        let v = Vocabulary::default();
        let mut trainer = Trainer::new(small_config(), v).unwrap();
        for p in trainer.model.params_mut()[0].values.iter_mut() {
            *p = f64::NAN;
        }
        let all = gen_arithmetic(&ArithmeticSpec::addition(2, 1, 2)).unwrap();
        assert!(matches!(trainer.train_step(&all), Err(TrainError::Diverged { step: 1, .. })));
    }

    #[test]
    fn scoring_examples() {
        let ex = |p: &str, t: &str, task| Example {
            prompt: p.into(),
            target: t.into(),
            task,
        };
        let examples = vec![
            ex("a", "0.98", Task::Arithmetic),
            ex("b", "0.98", Task::Arithmetic),
            ex("c", "46", Task::Arithmetic),
            ex("d", "12", Task::Arithmetic),
            ex("e", "6_20", Task::Clock),
        ];
        let outputs: Vec<String> = ["1.01", "1.98", "46", "1x", "4_35"].iter().map(|s| s.to_string()).collect();
        let m = score(&examples, &outputs).unwrap();
        let errs: Vec<_> = m.predictions.iter().map(|p| p.error).collect();
        assert!((errs[0].unwrap() - 0.03).abs() < 1e-12);
        assert!((errs[1].unwrap() - 1.00).abs() < 1e-12);
        assert_eq!(errs[2], Some(0.0));
        assert_eq!(errs[3], None);
        assert_eq!(errs[4], Some(1.75));
        assert_eq!(m.exact_match, 0.2);
        assert_eq!(m.failures, 1);
        assert_eq!(m.mean_time_gap_hours, Some(1.75));
        assert!((m.median_abs_error.unwrap() - 0.03).abs() < 1e-12);
        assert!(score(&[], &[]).is_err());
    }
}
