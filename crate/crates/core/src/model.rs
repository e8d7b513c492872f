//! Tiny autoregressive character model: a gated recurrent cell by default, or a
//! single causal self-attention block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the context of {context}")]
    Overlength { len: usize, context: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Gated recurrent unit over the token sequence.
    Gru,
    /// One causal single-head self-attention block with an MLP.
    Attention,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(Self::Gru),
            "attention" => Ok(Self::Attention),
            other => Err(format!("unknown architecture {other:?} (expected gru or attention)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_len: usize,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 64,
            hidden_dim: 128,
            context_len: 64,
            architecture: Architecture::Gru,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("context_len", self.context_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order, with the fan-in used
    /// for initialization.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        match self.architecture {
            Architecture::Gru => vec![
                ("embed", vec![v, e], e),
                ("gru.w_x", vec![e, 3 * h], e),
                ("gru.w_h", vec![h, 3 * h], h),
                ("gru.b_x", vec![3 * h], h),
                ("gru.b_h", vec![3 * h], h),
                ("out.w", vec![h, v], h),
                ("out.b", vec![v], h),
            ],
            Architecture::Attention => vec![
                ("embed", vec![v, e], e),
                ("pos", vec![self.context_len, e], e),
                ("attn.w_q", vec![e, e], e),
                ("attn.w_k", vec![e, e], e),
                ("attn.w_v", vec![e, e], e),
                ("attn.w_o", vec![e, e], e),
                ("mlp.w1", vec![e, h], e),
                ("mlp.b1", vec![h], e),
                ("mlp.w2", vec![h, e], h),
                ("mlp.b2", vec![e], h),
                ("out.w", vec![e, v], e),
                ("out.b", vec![v], e),
            ],
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, e, h, c) = (self.vocab_size, self.embed_dim, self.hidden_dim, self.context_len);
        match self.architecture {
            Architecture::Gru => v * e + 3 * h * (e + h + 2) + h * v + v,
            Architecture::Attention => v * e + c * e + 4 * e * e + 2 * e * h + h + e + e * v + v,
        }
    }
}

/// A named, shaped array of parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedArray>,
}

/// Parameters recorded on a tape, in storage order.
pub struct Bound<'t>(Vec<Tensor<'t>>);

impl<'t> Bound<'t> {
    pub fn tensors(&self) -> &[Tensor<'t>] {
        &self.0
    }
}

impl Model {
    /// Deterministic init: every parameter uniform in ±1/sqrt(fan_in).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let n = shape.iter().product();
                NamedArray {
                    name: name.to_string(),
                    shape,
                    values: (0..n).map(|_| dist.sample(&mut rng)).collect(),
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored arrays, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<NamedArray>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if p.name != *name || p.shape != *shape || p.values.len() != shape.iter().product::<usize>() {
                return Err(ModelError::Format(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedArray] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Records the parameters on `tape`, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Bound<'t>> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.values.clone(), &p.shape)
                } else {
                    tape.constant(p.values.clone(), &p.shape)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Bound(tensors))
    }

    fn check_batch(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let longest = batch.iter().map(Vec::len).max().unwrap_or(0);
        if longest == 0 {
            return Err(ModelError::Config("empty batch or empty sequence".into()));
        }
        if longest > self.config.context_len {
            return Err(ModelError::Overlength {
                len: longest,
                context: self.config.context_len,
            });
        }
        if let Some(&bad) = batch.iter().flatten().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::BadToken(bad));
        }
        Ok(longest)
    }

    /// Next-token logits for a batch of sequences. Shorter sequences are
    /// right-padded internally. Row `b * T + t` of the `[B * T, V]` result
    /// (T the longest length) depends only on `batch[b][..=t]`.
    pub fn forward<'t>(&self, bound: &Bound<'t>, batch: &[Vec<usize>]) -> Result<Tensor<'t>> {
        let steps = self.check_batch(batch)?;
        match self.config.architecture {
            Architecture::Gru => self.forward_gru(bound, batch, steps),
            Architecture::Attention => self.forward_attention(bound, batch, steps),
        }
    }

    fn forward_gru<'t>(&self, bound: &Bound<'t>, batch: &[Vec<usize>], steps: usize) -> Result<Tensor<'t>> {
        let [embed, w_x, w_h, b_x, b_h, out_w, out_b] = bound.0[..] else {
            unreachable!("gru layout has seven arrays")
        };
        let tape = embed.tape();
        let (b, h) = (batch.len(), self.config.hidden_dim);
        // time-major token order: row t * B + i
        let ids: Vec<usize> = (0..steps)
            .flat_map(|t| batch.iter().map(move |s| s.get(t).copied().unwrap_or(0)))
            .collect();
        let projected = embed.gather_rows(&ids)?.matmul(w_x)?.add_row(b_x)?;

        let mut state = tape.constant(vec![0.0; b * h], &[b, h])?;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = projected.slice_rows(t * b, (t + 1) * b)?;
            let hh = state.matmul(w_h)?.add_row(b_h)?;
            let reset = x.slice_cols(0, h)?.add(hh.slice_cols(0, h)?)?.sigmoid();
            let update = x.slice_cols(h, 2 * h)?.add(hh.slice_cols(h, 2 * h)?)?.sigmoid();
            let candidate = x
                .slice_cols(2 * h, 3 * h)?
                .add(reset.mul(hh.slice_cols(2 * h, 3 * h)?)?)?
                .tanh();
            state = candidate.add(update.mul(state.sub(candidate)?)?)?;
            states.push(state);
        }
        // back to batch-major rows: b * T + t
        let order: Vec<usize> = (0..b).flat_map(|i| (0..steps).map(move |t| t * b + i)).collect();
        let hidden = Tensor::concat_rows(&states)?.gather_rows(&order)?;
        Ok(hidden.matmul(out_w)?.add_row(out_b)?)
    }

    fn forward_attention<'t>(
        &self,
        bound: &Bound<'t>,
        batch: &[Vec<usize>],
        steps: usize,
    ) -> Result<Tensor<'t>> {
        let [embed, pos, w_q, w_k, w_v, w_o, w1, b1, w2, b2, out_w, out_b] = bound.0[..] else {
            unreachable!("attention layout has twelve arrays")
        };
        let tape = embed.tape();
        let e = self.config.embed_dim;
        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|s| (0..steps).map(move |t| s.get(t).copied().unwrap_or(0)))
            .collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..steps).collect();
        let x = embed.gather_rows(&ids)?.add(pos.gather_rows(&positions)?)?;
        let (q, k, v) = (x.matmul(w_q)?, x.matmul(w_k)?, x.matmul(w_v)?);

        let mut mask = vec![0.0; steps * steps];
        for i in 0..steps {
            for j in i + 1..steps {
                mask[i * steps + j] = -1e9;
            }
        }
        let mask = tape.constant(mask, &[steps, steps])?;
        let scale = 1.0 / (e as f64).sqrt();
        let mut heads = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let rows = (i * steps, (i + 1) * steps);
            let (qi, ki, vi) = (
                q.slice_rows(rows.0, rows.1)?,
                k.slice_rows(rows.0, rows.1)?,
                v.slice_rows(rows.0, rows.1)?,
            );
            let weights = qi.matmul(ki.transpose()?)?.scale(scale).add(mask)?.softmax(1)?;
            heads.push(weights.matmul(vi)?);
        }
        let x = x.add(Tensor::concat_rows(&heads)?.matmul(w_o)?)?;
        let mlp = x.matmul(w1)?.add_row(b1)?.tanh().matmul(w2)?.add_row(b2)?;
        let x = x.add(mlp)?;
        Ok(x.matmul(out_w)?.add_row(out_b)?)
    }

    /// Logits `[T, V]` for one sequence, without gradients.
    pub fn logits(&self, token_ids: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        Ok(self.forward(&bound, &[token_ids.to_vec()])?.value())
    }

    /// Extends `prompt` one token at a time, stopping after `eos` or
    /// `max_new` tokens. Returns only the continuation (including `eos` when
    /// produced). Greedy when `rng` is `None`, otherwise samples.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Vec<usize>> {
        let mut seq = prompt.to_vec();
        let v = self.config.vocab_size;
        for _ in 0..max_new {
            if seq.len() >= self.config.context_len {
                break;
            }
            let logits = self.logits(&seq)?;
            let last = &logits[(seq.len() - 1) * v..seq.len() * v];
            let next = match rng.as_deref_mut() {
                None => argmax(last),
                Some(rng) => {
                    let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = last.iter().map(|l| (l - max).exp()).collect();
                    WeightedIndex::new(&weights)
                        .map_err(|e| ModelError::Config(e.to_string()))?
                        .sample(rng)
                }
            };
            seq.push(next);
            if next == eos {
                break;
            }
        }
        Ok(seq[prompt.len()..].to_vec())
    }

    /// Greedy decoding of many prompts, batching prompts of equal length.
    /// Same results as [`Model::generate`] with `rng = None`.
    pub fn generate_greedy_batch(&self, prompts: &[Vec<usize>], max_new: usize, eos: usize) -> Result<Vec<Vec<usize>>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            groups.entry(p.len()).or_default().push(i);
        }
        let v = self.config.vocab_size;
        let mut out = vec![Vec::new(); prompts.len()];
        for members in groups.values() {
            let mut seqs: Vec<Vec<usize>> = members.iter().map(|&i| prompts[i].clone()).collect();
            let mut done = vec![false; seqs.len()];
            for _ in 0..max_new {
                let len = seqs[0].len();
                if len >= self.config.context_len || done.iter().all(|&d| d) {
                    break;
                }
                let tape = Tape::new();
                let bound = self.bind(&tape, false)?;
                let logits = self.forward(&bound, &seqs)?;
                let values = logits.values();
                for (b, seq) in seqs.iter_mut().enumerate() {
                    let row = b * len + len - 1;
                    let next = argmax(&values[row * v..(row + 1) * v]);
                    seq.push(next);
                    if !done[b] {
                        out[members[b]].push(next);
                        done[b] = next == eos;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Seed, stream and position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| ModelError::Format(format!("bad rng word position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Adaptive-moment state, one buffer per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form run metadata (training config, epoch).
    pub metadata: serde_json::Value,
}

const MAGIC: &[u8; 8] = b"NTILCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    step: u64,
    optimizer_step: Option<u64>,
    rng: Option<RngState>,
    metadata: serde_json::Value,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    /// Layout: magic, format version (u32), header length (u64), JSON
    /// header, array count (u64), then per array the name length (u32),
    /// UTF-8 name, rank (u32), dims (u64 each) and little-endian f64 values.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            model: self.model.config,
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            rng: self.rng.clone(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;

        let mut arrays: Vec<(String, &[usize], &[f64])> = self
            .model
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.as_slice(), p.values.as_slice()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.first_moment), ("adam.v", &opt.second_moment)] {
                for (p, m) in self.model.params.iter().zip(moments) {
                    arrays.push((format!("{prefix}/{}", p.name), p.shape.as_slice(), m.as_slice()));
                }
            }
        }
        w.write_all(&(arrays.len() as u64).to_le_bytes())?;
        for (name, shape, values) in arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported format version {version}")));
        }
        let header_len = read_u64(r)? as usize;
        let mut header = vec![0; header_len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| ModelError::Format(e.to_string()))?;

        let count = read_u64(r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ModelError::Format(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0; n * 8];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push(NamedArray { name, shape, values });
        }

        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = arrays.iter().find(|a| !seen.insert(a.name.clone())) {
            return Err(ModelError::Format(format!("duplicate array {}", dup.name)));
        }
        let n_params = header.model.layout().len();
        if arrays.len() < n_params {
            return Err(ModelError::Format("missing parameter arrays".into()));
        }
        let rest = arrays.split_off(n_params);
        let model = Model::from_parts(header.model, arrays)?;
        let optimizer = match header.optimizer_step {
            None if rest.is_empty() => None,
            Some(step) if rest.len() == 2 * n_params => {
                let (m, v) = rest.split_at(n_params);
                for (p, (a, b)) in model.params.iter().zip(m.iter().zip(v)) {
                    if a.name != format!("adam.m/{}", p.name) || b.name != format!("adam.v/{}", p.name) {
                        return Err(ModelError::Format(format!("unexpected optimizer array {}", a.name)));
                    }
                }
                Some(OptimizerState {
                    step,
                    first_moment: m.iter().map(|a| a.values.clone()).collect(),
                    second_moment: v.iter().map(|a| a.values.clone()).collect(),
                })
            }
            _ => return Err(ModelError::Format("optimizer arrays do not match header".into())),
        };
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            rng: header.rng,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(arch: Architecture) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            embed_dim: 8,
            hidden_dim: 12,
            context_len: 16,
            architecture: arch,
            seed: 5,
        }
    }

    const ARCHS: [Architecture; 2] = [Architecture::Gru, Architecture::Attention];

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        for arch in ARCHS {
            let a = Model::init(config(arch)).unwrap();
            assert_eq!(a, Model::init(config(arch)).unwrap());
            assert_eq!(a.params()[0].shape, vec![13, 8]);
            assert_eq!(a.parameter_count(), config(arch).parameter_count());
            assert_ne!(a, Model::init(ModelConfig { seed: 6, ..config(arch) }).unwrap());
        }
    }

    #[test]
    fn analytic_count_matches_hand_count() {
        // V=13, E=8, H=12: 104 + 288 + 432 + 36 + 36 + 156 + 13
        assert_eq!(config(Architecture::Gru).parameter_count(), 1065);
        // 104 + 128 + 4*64 + 96 + 12 + 96 + 8 + 104 + 13
        assert_eq!(config(Architecture::Attention).parameter_count(), 817);
    }

    #[test]
    fn output_shape_and_causality() {
        for arch in ARCHS {
            let m = Model::init(config(arch)).unwrap();
            let seq = vec![1, 4, 7, 2, 9, 3];
            let base = m.logits(&seq).unwrap();
            assert_eq!(base.len(), 6 * 13);
            for t in 0..5 {
                let mut changed = seq.clone();
                changed[t + 1] = (changed[t + 1] + 5) % 13;
                let other = m.logits(&changed).unwrap();
                for i in 0..(t + 1) * 13 {
                    assert_eq!(base[i].to_bits(), other[i].to_bits(), "{arch:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_rows() {
        for arch in ARCHS {
            let m = Model::init(config(arch)).unwrap();
            let short = vec![3, 1, 4];
            let long = vec![1, 5, 9, 2, 6, 5];
            let tape = Tape::new();
            let bound = m.bind(&tape, false).unwrap();
            let both = m.forward(&bound, &[short.clone(), long]).unwrap().value();
            let alone = m.logits(&short).unwrap();
            for (a, b) in alone.iter().zip(&both[..3 * 13]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::init(config(Architecture::Gru)).unwrap();
        assert!(matches!(m.logits(&[1; 17]), Err(ModelError::Overlength { len: 17, context: 16 })));
        assert!(matches!(m.logits(&[13]), Err(ModelError::BadToken(13))));
        assert!(Model::init(ModelConfig { hidden_dim: 0, ..config(Architecture::Gru) }).is_err());
    }

    #[test]
    fn greedy_generation() {
        let m = Model::init(config(Architecture::Gru)).unwrap();
        let none: Option<&mut ChaCha8Rng> = None;
        let a = m.generate(&[1, 2, 3], 5, 0, none).unwrap();
        let b = m.generate(&[1, 2, 3], 5, 0, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 5);
        assert!(m.generate(&[1, 2, 3], 0, 0, None::<&mut ChaCha8Rng>).unwrap().is_empty());
        let batched = m.generate_greedy_batch(&[vec![1, 2, 3], vec![4, 4], vec![3, 2, 1]], 5, 0).unwrap();
        assert_eq!(batched[0], a);
        assert_eq!(batched[2], m.generate(&[3, 2, 1], 5, 0, None::<&mut ChaCha8Rng>).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sampled = m.generate(&[1, 2, 3], 5, 0, Some(&mut rng)).unwrap();
        assert!(sampled.iter().all(|&t| t < 13));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::init(config(Architecture::Attention)).unwrap();
        let n = model.params().len();
        let moments: Vec<Vec<f64>> = model.params().iter().map(|p| p.values.iter().map(|v| v * 0.5).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: u64 = rng.gen();
        let ckpt = Checkpoint {
            model,
            optimizer: Some(OptimizerState {
                step: 17,
                first_moment: moments.clone(),
                second_moment: moments,
            }),
            step: 17,
            rng: Some(RngState::capture(&rng)),
            metadata: serde_json::json!({"epoch": 2}),
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.optimizer.as_ref().unwrap().first_moment.len(), n);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);

        let mut restored = back.rng.unwrap().restore().unwrap();
        assert_eq!(restored.gen::<u64>(), rng.gen::<u64>());

        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::read_from(&mut corrupt.as_slice()).is_err());
    }
}
