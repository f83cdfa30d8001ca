//! Fixed-window autoregressive neural language model with hand-written
//! reverse-mode gradients, Adam, and portable checkpoints.
//!
//! Architecture: embed the last `context` token ids, concatenate, one tanh
//! hidden layer, linear readout:
//!
//! ```text
//! logits = W2^T tanh(W1^T concat(E[context]) + b1) + b2
//! ```
//!
//! All math runs in f64; checkpoints store f32. Weight matrices are stored
//! transposed (output-major rows) so every dot product walks contiguous
//! memory; shapes in the checkpoint header describe the stored layout.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{padded_window, TokenId, TokenSequence};
use crate::par;
use crate::rng::{splitmix64, Stream};
use crate::{Error, Result};

/// Fixed BOS id shared with the corpus module (BOS is always id 0).
pub const BOS_ID: TokenId = 0;

const INIT_STDEV: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Context window length in tokens.
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0
        {
            return Err(Error::InvalidConfig(
                "model dimensions must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All weights of the model. `w1`/`w2` hold the transposed layouts
/// (`w1[i]` is the i-th hidden unit's fan-in, `w2[v]` the v-th token's
/// readout weights).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: Matrix, // vocab_size x embed_dim
    pub w1: Matrix,    // hidden_dim x (context * embed_dim)
    pub b1: Vec<f64>,  // hidden_dim
    pub w2: Matrix,    // vocab_size x hidden_dim
    pub b2: Vec<f64>,  // vocab_size
    pub config: ModelConfig,
}

/// Gradient (or moment) accumulator shaped like [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            embed: Matrix::zeros(config.vocab_size, config.embed_dim),
            w1: Matrix::zeros(config.hidden_dim, config.input_dim()),
            b1: vec![0.0; config.hidden_dim],
            w2: Matrix::zeros(config.vocab_size, config.hidden_dim),
            b2: vec![0.0; config.vocab_size],
            config,
        }
    }

    /// Seeded Gaussian init (stdev 0.02) for weights and embeddings; zero
    /// biases.
    pub fn init_gaussian(config: ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = Stream::new(seed);
        for t in [&mut p.embed, &mut p.w1, &mut p.w2] {
            for v in t.data.iter_mut() {
                *v = INIT_STDEV * rng.next_gaussian();
            }
        }
        p
    }

    /// Parameter tensors in flattening order: embed, w1, b1, w2, b2.
    fn tensor_slices(&self) -> [&[f64]; 5] {
        [
            &self.embed.data,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn tensor_slices_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embed.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensor_slices().iter().map(|s| s.len()).sum()
    }

    /// Reads flat parameter coordinate `i` (embed, w1, b1, w2, b2 order).
    pub fn get_param(&self, mut i: usize) -> f64 {
        for s in self.tensor_slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for s in self.tensor_slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensor_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Gradients {
    pub fn zeros(config: &ModelConfig) -> Self {
        Gradients {
            embed: Matrix::zeros(config.vocab_size, config.embed_dim),
            w1: Matrix::zeros(config.hidden_dim, config.input_dim()),
            b1: vec![0.0; config.hidden_dim],
            w2: Matrix::zeros(config.vocab_size, config.hidden_dim),
            b2: vec![0.0; config.vocab_size],
        }
    }

    fn tensor_slices(&self) -> [&[f64]; 5] {
        [
            &self.embed.data,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    fn tensor_slices_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embed.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn get(&self, mut i: usize) -> f64 {
        for s in self.tensor_slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("gradient index out of range");
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        let mut mine = self.tensor_slices_mut();
        let theirs = other.tensor_slices();
        for (a, b) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensor_slices_mut() {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensor_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Forward-pass intermediates kept for backprop.
pub struct Activations {
    pub input: Vec<f64>,  // concat of context embeddings
    pub hidden: Vec<f64>, // tanh layer output
    pub logits: Vec<f64>,
}

/// Runs the forward pass. `context` must have exactly `config.context` ids,
/// all within the vocabulary.
pub fn forward(params: &ModelParams, context: &[TokenId]) -> Result<Activations> {
    let cfg = &params.config;
    if context.len() != cfg.context {
        return Err(Error::ShapeMismatch(format!(
            "context length {} != {}",
            context.len(),
            cfg.context
        )));
    }
    let d = cfg.embed_dim;
    let mut input = Vec::with_capacity(cfg.input_dim());
    for &id in context {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        input.extend_from_slice(params.embed.row(id));
    }
    debug_assert_eq!(input.len(), cfg.context * d);

    let mut hidden = Vec::with_capacity(cfg.hidden_dim);
    for i in 0..cfg.hidden_dim {
        let mut acc = params.b1[i];
        for (w, x) in params.w1.row(i).iter().zip(&input) {
            acc += w * x;
        }
        hidden.push(acc.tanh());
    }

    let mut logits = Vec::with_capacity(cfg.vocab_size);
    for v in 0..cfg.vocab_size {
        let mut acc = params.b2[v];
        for (w, h) in params.w2.row(v).iter().zip(&hidden) {
            acc += w * h;
        }
        logits.push(acc);
    }
    Ok(Activations {
        input,
        hidden,
        logits,
    })
}

/// Pre-softmax scores for the next-token distribution.
pub fn logits(params: &ModelParams, context: &[TokenId]) -> Result<Vec<f64>> {
    forward(params, context).map(|a| a.logits)
}

/// Numerically stable softmax (max subtraction); sums to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

/// Log-softmax, for losses computed in log space.
pub fn ln_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

/// Accumulates gradients for one position given d(loss)/d(logits).
pub(crate) fn backward(
    params: &ModelParams,
    context: &[TokenId],
    acts: &Activations,
    dlogits: &[f64],
    grads: &mut Gradients,
) {
    let cfg = &params.config;
    let m = cfg.hidden_dim;
    let d = cfg.embed_dim;

    let mut dhidden = vec![0.0; m];
    for v in 0..cfg.vocab_size {
        let dv = dlogits[v];
        grads.b2[v] += dv;
        let w2_row = params.w2.row(v);
        let gw2_row = grads.w2.row_mut(v);
        for i in 0..m {
            gw2_row[i] += dv * acts.hidden[i];
            dhidden[i] += dv * w2_row[i];
        }
    }

    let mut dinput = vec![0.0; cfg.input_dim()];
    for i in 0..m {
        let dpre = dhidden[i] * (1.0 - acts.hidden[i] * acts.hidden[i]);
        grads.b1[i] += dpre;
        let w1_row = params.w1.row(i);
        let gw1_row = grads.w1.row_mut(i);
        for j in 0..cfg.input_dim() {
            gw1_row[j] += dpre * acts.input[j];
            dinput[j] += dpre * w1_row[j];
        }
    }

    for (k, &id) in context.iter().enumerate() {
        let ge = grads.embed.row_mut(id);
        for j in 0..d {
            ge[j] += dinput[k * d + j];
        }
    }
}

fn check_batch(batch: &[TokenSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    if batch.iter().any(|s| s.len() < 2) {
        return Err(Error::DegenerateBatch(
            "batch contains a sequence of length <= 1".into(),
        ));
    }
    Ok(())
}

/// Mean next-token negative log-likelihood over all positions t >= 1, with
/// exact reverse-mode gradients. Contexts shorter than the window are
/// BOS-padded. Batch elements are evaluated in parallel and reduced in a
/// fixed order.
pub fn nll_loss_and_grads(
    params: &ModelParams,
    batch: &[TokenSequence],
) -> Result<(f64, Gradients)> {
    check_batch(batch)?;
    let cfg = params.config;
    let per_seq: Vec<Result<(f64, usize, Gradients)>> = par::map_slice(batch, |seq| {
        let mut grads = Gradients::zeros(&cfg);
        let mut loss = 0.0;
        for t in 1..seq.len() {
            let context = padded_window(seq, t, cfg.context, BOS_ID);
            let acts = forward(params, &context)?;
            let lnp = ln_softmax(&acts.logits);
            let target = seq[t];
            if target >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: target,
                    vocab: cfg.vocab_size,
                });
            }
            loss -= lnp[target];
            let mut dlogits = softmax(&acts.logits);
            dlogits[target] -= 1.0;
            backward(params, &context, &acts, &dlogits, &mut grads);
        }
        Ok((loss, seq.len() - 1, grads))
    });

    let mut total = Gradients::zeros(&cfg);
    let mut loss_sum = 0.0;
    let mut positions = 0usize;
    for r in per_seq {
        let (l, n, g) = r?;
        loss_sum += l;
        positions += n;
        total.add_scaled(&g, 1.0);
    }
    let scale = 1.0 / positions as f64;
    total.scale(scale);
    Ok((loss_sum * scale, total))
}

/// Mean per-token negative log-likelihood of `response` under `model`, with
/// the prompt (and BOS padding) supplying context. Used as the quality proxy
/// when scoring generations against a frozen reference model.
pub fn response_nll(
    model: &ModelParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::DegenerateBatch("empty response".into()));
    }
    let mut stream = Vec::with_capacity(prompt.len() + response.len());
    stream.extend_from_slice(prompt);
    stream.extend_from_slice(response);
    let mut total = 0.0;
    for t in prompt.len()..stream.len() {
        let context = padded_window(&stream, t, model.config.context, BOS_ID);
        let z = logits(model, &context)?;
        let lnp = ln_softmax(&z);
        if stream[t] >= model.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: stream[t],
                vocab: model.config.vocab_size,
            });
        }
        total -= lnp[stream[t]];
    }
    Ok(total / response.len() as f64)
}

/// Adam optimizer state (first/second moments + step counter).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        OptimizerState {
            m: Gradients::zeros(config),
            v: Gradients::zeros(config),
            step: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias correction. Errors with "diverged" on
/// non-finite gradients.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Diverged {
            step: state.step,
            what: "non-finite gradients".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let mut p = params.tensor_slices_mut();
    let g = grads.tensor_slices();
    let mut m = state.m.tensor_slices_mut();
    let mut v = state.v.tensor_slices_mut();
    for k in 0..p.len() {
        let (pk, gk) = (&mut p[k], g[k]);
        let (mk, vk) = (&mut m[k], &mut v[k]);
        for i in 0..gk.len() {
            mk[i] = BETA1 * mk[i] + (1.0 - BETA1) * gk[i];
            vk[i] = BETA2 * vk[i] + (1.0 - BETA2) * gk[i] * gk[i];
            let mhat = mk[i] / bc1;
            let vhat = vk[i] / bc2;
            pk[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Learning-rate schedule. Constant is the default; warmup + cosine decay is
/// available as an opt-in knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    WarmupCosine {
        warmup: usize,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize, total: usize, base: f64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup } => {
                if step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else if total <= warmup {
                    base
                } else {
                    let p = (step - warmup) as f64 / (total - warmup) as f64;
                    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
                }
            }
        }
    }
}

/// Options for base-model training (and plain finetuning).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            batch_size: 16,
            seq_len: 64,
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 1 and seq_len >= 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Trains a model from scratch on `dataset` with the NLL objective.
/// Deterministic given the seed.
pub fn train_base(
    config: ModelConfig,
    dataset: &crate::corpus::DomainDataset,
    tcfg: &TrainConfig,
) -> Result<ModelParams> {
    config.validate()?;
    tcfg.validate()?;
    let mut params = ModelParams::init_gaussian(config, tcfg.seed);
    let mut opt = OptimizerState::new(&config);
    for step in 0..tcfg.steps {
        let batch = dataset.sample_batch(
            tcfg.batch_size,
            tcfg.seq_len,
            BOS_ID,
            splitmix64(tcfg.seed ^ step as u64),
        )?;
        let (loss, grads) = nll_loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss = {loss}"),
            });
        }
        let lr = tcfg.schedule.lr_at(step, tcfg.steps, tcfg.lr);
        adam_step(&mut params, &grads, &mut opt, lr)?;
    }
    Ok(params)
}

// --- checkpoints ---------------------------------------------------------

const MAGIC: &[u8; 4] = b"DSWM";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("embed".into(), vec![config.vocab_size, config.embed_dim]),
        ("w1".into(), vec![config.hidden_dim, config.input_dim()]),
        ("b1".into(), vec![config.hidden_dim]),
        ("w2".into(), vec![config.vocab_size, config.hidden_dim]),
        ("b2".into(), vec![config.vocab_size]),
    ]
}

/// Writes `params` as magic "DSWM", version byte, u32-LE header length, JSON
/// header {config, tensor order, shapes}, then raw little-endian f32 tensor
/// data in declared order.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config,
        tensors: tensor_layout(&params.config),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in params.tensor_slices() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |what: &str| Error::CorruptCheckpoint(what.to_string());

    if bytes.len() < 9 {
        return Err(corrupt("file shorter than fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    header.config.validate()?;
    if header.tensors != tensor_layout(&header.config) {
        return Err(Error::CheckpointMismatch(
            "tensor layout does not match config".into(),
        ));
    }
    let numel: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let data = &bytes[9 + header_len..];
    if data.len() != numel * 4 {
        return Err(corrupt("tensor data length mismatch"));
    }

    let mut params = ModelParams::zeros(header.config);
    let mut offset = 0usize;
    for t in params.tensor_slices_mut() {
        for v in t.iter_mut() {
            let raw: [u8; 4] = data[offset..offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            offset += 4;
        }
    }
    if !params.all_finite() {
        return Err(corrupt("non-finite tensor values"));
    }
    Ok(params)
}

/// Rounds every parameter through f32, matching checkpoint precision.
pub fn round_to_f32(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    for t in p.tensor_slices_mut() {
        for v in t.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainDataset, Split, Vocabulary, TokenizeMode};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            context: 3,
            embed_dim: 2,
            hidden_dim: 4,
        }
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let p = ModelParams::zeros(toy_config());
        let l = logits(&p, &[0, 1, 2]).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_passthrough_with_zero_w2() {
        let mut p = ModelParams::zeros(toy_config());
        p.b2 = vec![1.0, -2.0, 0.5, 3.0, 0.0];
        // nonzero earlier layers should not matter with W2 = 0
        p.w1.data.iter_mut().for_each(|v| *v = 0.7);
        p.embed.data.iter_mut().for_each(|v| *v = -0.3);
        for ctx in [[0, 1, 2], [4, 4, 4]] {
            assert_eq!(logits(&p, &ctx).unwrap(), p.b2);
        }
    }

    #[test]
    fn locality_of_unused_embedding_rows() {
        let cfg = toy_config();
        let p = ModelParams::init_gaussian(cfg, 11);
        let base = logits(&p, &[0, 1, 2]).unwrap();
        let mut q = p.clone();
        // token 4 is not in the context
        q.embed.row_mut(4).iter_mut().for_each(|v| *v += 5.0);
        assert_eq!(logits(&q, &[0, 1, 2]).unwrap(), base);
    }

    #[test]
    fn logits_reject_bad_input() {
        let p = ModelParams::zeros(toy_config());
        assert!(logits(&p, &[0, 1]).is_err());
        assert!(logits(&p, &[0, 1, 9]).is_err());
    }

    #[test]
    fn softmax_uniform_and_golden() {
        let u = softmax(&[0.0; 4]);
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15);
        assert!((s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.3, -1.2, 4.0, 0.0, 2.2];
        let a = softmax(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_predictor_loss_is_ln_vocab() {
        let p = ModelParams::zeros(toy_config());
        let batch = vec![vec![2, 3, 4, 2], vec![0, 1, 2]];
        let (loss, _) = nll_loss_and_grads(&p, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicating_batch_preserves_loss() {
        let p = ModelParams::init_gaussian(toy_config(), 3);
        let batch = vec![vec![2, 3, 4, 2], vec![0, 1, 2]];
        let mut doubled = batch.clone();
        doubled.extend(batch.iter().cloned());
        let (a, _) = nll_loss_and_grads(&p, &batch).unwrap();
        let (b, _) = nll_loss_and_grads(&p, &doubled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batches_rejected() {
        let p = ModelParams::zeros(toy_config());
        assert!(nll_loss_and_grads(&p, &[]).is_err());
        assert!(nll_loss_and_grads(&p, &[vec![2]]).is_err());
    }

    // Central finite differences vs analytic gradients on a toy config.
    #[test]
    fn nll_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            vocab_size: 6,
            context: 3,
            embed_dim: 2,
            hidden_dim: 3,
        };
        let params = ModelParams::init_gaussian(cfg, 42);
        let batch = vec![vec![2, 3, 4, 5, 2], vec![1, 4, 3]];
        let (_, grads) = nll_loss_and_grads(&params, &batch).unwrap();
        let eps = 1e-4;
        let n = params.param_count();
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut p_hi = params.clone();
            p_hi.set_param(i, params.get_param(i) + eps);
            let (lh, _) = nll_loss_and_grads(&p_hi, &batch).unwrap();
            let mut p_lo = params.clone();
            p_lo.set_param(i, params.get_param(i) - eps);
            let (ll, _) = nll_loss_and_grads(&p_lo, &batch).unwrap();
            let fd = (lh - ll) / (2.0 * eps);
            let g = grads.get(i);
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let cfg = toy_config();
        let mut p = ModelParams::init_gaussian(cfg, 5);
        let before = p.clone();
        let mut st = OptimizerState::new(&cfg);
        adam_step(&mut p, &Gradients::zeros(&cfg), &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // With fresh state, mhat = g and vhat = g^2, so the step is
        // -lr * g / (|g| + eps): magnitude ~ lr wherever g != 0.
        let cfg = toy_config();
        let mut p = ModelParams::zeros(cfg);
        let mut g = Gradients::zeros(&cfg);
        g.b2[0] = 0.37;
        g.b2[1] = -4.2;
        let mut st = OptimizerState::new(&cfg);
        let lr = 1e-3;
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        assert!((p.b2[0] + lr * 0.37 / (0.37 + 1e-8)).abs() < 1e-12);
        assert!((p.b2[1] - lr * 4.2 / (4.2 + 1e-8)).abs() < 1e-12);
        assert_eq!(p.b2[2], 0.0);
    }

    #[test]
    fn adam_identical_grads_identical_updates() {
        let cfg = toy_config();
        let mut p = ModelParams::zeros(cfg);
        let mut g = Gradients::zeros(&cfg);
        g.b1.iter_mut().for_each(|v| *v = 0.5);
        let mut st = OptimizerState::new(&cfg);
        adam_step(&mut p, &g, &mut st, 1e-2).unwrap();
        let first = p.b1[0];
        assert!(p.b1.iter().all(|&v| v == first));
    }

    #[test]
    fn adam_rejects_nonfinite() {
        let cfg = toy_config();
        let mut p = ModelParams::zeros(cfg);
        let mut g = Gradients::zeros(&cfg);
        g.b1[0] = f64::NAN;
        let mut st = OptimizerState::new(&cfg);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 1e-3),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn train_memorizes_alternating_corpus() {
        let text = "ab".repeat(200);
        let vocab = Vocabulary::build(&text, TokenizeMode::Char, 8).unwrap();
        let ds = DomainDataset::new("toy", vec![vocab.encode(&text)], Split::Train).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            context: 4,
            embed_dim: 4,
            hidden_dim: 8,
        };
        let tcfg = TrainConfig {
            steps: 200,
            lr: 3e-3,
            batch_size: 8,
            seq_len: 8,
            seed: 1,
            schedule: LrSchedule::Constant,
        };
        let params = train_base(cfg, &ds, &tcfg).unwrap();

        // loss should have improved over the fresh init
        let probe = ds.sample_batch(16, 8, BOS_ID, 999).unwrap();
        let fresh = ModelParams::init_gaussian(cfg, tcfg.seed);
        let (l0, _) = nll_loss_and_grads(&fresh, &probe).unwrap();
        let (l1, _) = nll_loss_and_grads(&params, &probe).unwrap();
        assert!(l1 < l0, "no improvement: {l1} >= {l0}");

        // greedy next token after "a" is "b" and vice versa
        let a = vocab.id_of("a").unwrap();
        let b = vocab.id_of("b").unwrap();
        let ctx_a = padded_window(&[b, a], 2, cfg.context, BOS_ID);
        let l = logits(&params, &ctx_a).unwrap();
        let argmax = (0..l.len()).max_by(|&i, &j| l[i].total_cmp(&l[j])).unwrap();
        assert_eq!(argmax, b);
    }

    #[test]
    fn training_is_deterministic() {
        let text = "abcd".repeat(100);
        let vocab = Vocabulary::build(&text, TokenizeMode::Char, 8).unwrap();
        let ds = DomainDataset::new("toy", vec![vocab.encode(&text)], Split::Train).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            context: 3,
            embed_dim: 3,
            hidden_dim: 6,
        };
        let tcfg = TrainConfig {
            steps: 30,
            lr: 1e-3,
            batch_size: 4,
            seq_len: 8,
            seed: 77,
            schedule: LrSchedule::Constant,
        };
        let a = train_base(cfg, &ds, &tcfg).unwrap();
        let b = train_base(cfg, &ds, &tcfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dswm");
        let cfg = toy_config();
        // f32-representable params: storage is exact for them
        let p = round_to_f32(&ModelParams::init_gaussian(cfg, 9));
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        // save(load(x)) is byte-identical
        let path2 = dir.path().join("m2.dswm");
        save_checkpoint(&q, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dswm");
        let p = ModelParams::init_gaussian(toy_config(), 9);
        save_checkpoint(&p, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.dswm");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&trunc),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badpath = dir.path().join("bad.dswm");
        std::fs::write(&badpath, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&badpath),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn schedule_warmup_then_decay() {
        let s = LrSchedule::WarmupCosine { warmup: 10 };
        assert!(s.lr_at(0, 100, 1.0) < s.lr_at(9, 100, 1.0));
        assert!((s.lr_at(9, 100, 1.0) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(50, 100, 1.0) > s.lr_at(99, 100, 1.0));
    }
}
