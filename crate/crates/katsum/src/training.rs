//! Optimization: inverse-square-root schedules with separate warmups for
//! the encoder and decoder parameter groups, Adam updates, binary
//! checkpoints, and a training loop whose data order and dropout noise are
//! fully derived from the seed and step counters, so a run resumed from a
//! checkpoint reproduces the uninterrupted run bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{decode, IdSeq, Vocab};
use crate::error::{Error, Result};
use crate::model::{DecodeMode, Example, ModelConfig, Summarizer};
use crate::rouge::{evaluate_corpus, Report};

const CHECKPOINT_MAGIC: &[u8; 4] = b"KATS";
const CHECKPOINT_SENTINEL: &[u8; 4] = b"KEND";
const CHECKPOINT_VERSION: u32 = 1;
/// Offsets the dropout stream away from the data-order stream.
const DROPOUT_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Inverse-square-root learning rate with linear warmup:
/// `base_lr * min(step^-0.5, step * warmup^-1.5)`. Steps are 1-based; the
/// schedule is undefined at step 0.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ScheduleStepZero);
    }
    if warmup == 0 {
        return Err(Error::InvalidArgument(
            "warmup must be at least one step".into(),
        ));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base_lr * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// Training hyperparameters. The defaults follow the full-scale recipe:
/// both groups use Adam, the encoder warms up over 20,000 steps at a small
/// peak rate while the decoder warms up over 10,000 at a large one,
/// gradients accumulate over five micro-batches per optimizer step, and a
/// checkpoint plus validation pass happens every 2,500 steps.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub warmup_encoder: u64,
    pub lr_decoder: f64,
    pub warmup_decoder: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub accumulate_every: usize,
    pub checkpoint_every: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Content-length cap for validation-time greedy decoding.
    pub eval_max_out: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 2e-3,
            warmup_encoder: 20_000,
            lr_decoder: 0.1,
            warmup_decoder: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulate_every: 5,
            checkpoint_every: 2_500,
            total_steps: 200_000,
            batch_size: 8,
            label_smoothing: 0.1,
            seed: 13,
            eval_max_out: 64,
        }
    }
}

impl TrainConfig {
    /// Small-corpus settings: short warmups, no accumulation, frequent
    /// checkpoints.
    pub fn desk() -> Self {
        TrainConfig {
            warmup_encoder: 100,
            lr_decoder: 0.02,
            warmup_decoder: 50,
            accumulate_every: 1,
            checkpoint_every: 100,
            total_steps: 400,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_encoder <= 0.0 || self.lr_decoder <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if self.warmup_encoder == 0 || self.warmup_decoder == 0 {
            return Err(Error::InvalidArgument(
                "warmup must be at least one step".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(
                "Adam betas must lie in [0, 1)".into(),
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam eps must be positive".into()));
        }
        if self.accumulate_every == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument(
                "accumulate_every, batch_size, and checkpoint_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidArgument(
                "label_smoothing must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter, shared by both
/// groups; only the learning rate differs between them.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(model: &Summarizer) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .params
            .params
            .iter()
            .map(|p| Array2::zeros(p.value.dim()))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Parameters in the decoder group move at
/// `lr_decoder`, the rest at `lr_encoder`.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut Summarizer,
    grads: &[Array2<f64>],
    lr_encoder: f64,
    lr_decoder: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in model.params.params.iter_mut().enumerate() {
        let lr = if param.decoder_group {
            lr_decoder
        } else {
            lr_encoder
        };
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        azip_update(m, v, &mut param.value, g, lr, bc1, bc2, cfg);
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    value: &mut Array2<f64>,
    g: &Array2<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
    cfg: &TrainConfig,
) {
    ndarray::Zip::from(value)
        .and(m)
        .and(v)
        .and(g)
        .for_each(|value, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Summarizer,
    pub vocab: Vocab,
    pub adam: AdamState,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Fresh state at step zero.
    pub fn fresh(model: Summarizer, vocab: Vocab, seed: u64) -> Self {
        let adam = AdamState::new(&model);
        Checkpoint {
            step: 0,
            model,
            vocab,
            adam,
            rng_seed: seed,
            rng_word_pos: 0,
        }
    }
}

/// A document prepared for validation: encoded source, selected triplet
/// embeddings, and the reference summary tokens.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub source: IdSeq,
    pub kg: Vec<Vec<f64>>,
    pub reference: Vec<String>,
}

/// Per-step training log row. ROUGE fields are filled on checkpoint steps.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub rouge: Option<Report>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: Checkpoint,
    pub trace: Vec<TraceRow>,
    /// Checkpoint with the highest validation unigram overlap, with its
    /// score; ties keep the earliest step.
    pub best: Option<(PathBuf, f64)>,
}

/// Micro-batch membership for the given global micro-batch counter. Each
/// epoch shuffles the corpus with a deterministic per-epoch seed, so any
/// batch can be recomputed from the counter alone.
pub fn batch_indices(global_micro: u64, n: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    assert!(n > 0 && batch_size > 0);
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = global_micro / per_epoch;
    let pos = (global_micro % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    let start = pos * batch_size;
    let end = (start + batch_size).min(n);
    order[start..end].to_vec()
}

/// Greedy-decodes every validation source and scores the result against
/// the references. An empty validation set reports zeros.
pub fn validation_report(
    model: &Summarizer,
    vocab: &Vocab,
    valid: &[EvalPair],
    max_out: usize,
) -> Result<Report> {
    if valid.is_empty() {
        return Ok(Report {
            rouge1: 0.0,
            rouge2: 0.0,
            rouge_l: 0.0,
            n_pairs: 0,
        });
    }
    let mut pairs = Vec::with_capacity(valid.len());
    for pair in valid {
        let out = model.generate(&pair.source, &pair.kg, DecodeMode::Greedy, max_out)?;
        pairs.push((decode(&out, vocab), pair.reference.clone()));
    }
    Ok(evaluate_corpus(&pairs)?.0)
}

/// Runs (or continues) training. Checkpoints land in
/// `work_dir/checkpoints/`, the per-step log in `work_dir/trace.csv`
/// (appended to when resuming). A non-finite loss aborts with a diagnostic
/// checkpoint of the last good state.
pub fn train_summarizer(
    start: &Checkpoint,
    train: &[Example],
    valid: &[EvalPair],
    cfg: &TrainConfig,
    work_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let ckpt_dir = work_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let resuming = start.step > 0;

    let mut state = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(state.rng_seed ^ DROPOUT_STREAM);
    rng.set_word_pos(state.rng_word_pos);
    let mut trace = Vec::new();
    let mut best: Option<(PathBuf, f64)> = None;

    let acc = cfg.accumulate_every as u64;
    let mut grads: Vec<Array2<f64>> = state
        .model
        .params
        .params
        .iter()
        .map(|p| Array2::zeros(p.value.dim()))
        .collect();

    for step in state.step + 1..=cfg.total_steps {
        let lr_e = lr_schedule(step, cfg.lr_encoder, cfg.warmup_encoder)?;
        let lr_d = lr_schedule(step, cfg.lr_decoder, cfg.warmup_decoder)?;
        for g in &mut grads {
            g.fill(0.0);
        }
        let mut loss_sum = 0.0;
        for k in 0..acc {
            let global_micro = (step - 1) * acc + k;
            let idxs = batch_indices(global_micro, train.len(), cfg.batch_size, state.rng_seed);
            let batch: Vec<Example> = idxs.iter().map(|&i| train[i].clone()).collect();
            let (loss, batch_grads) =
                state
                    .model
                    .loss_and_grads_train(&batch, cfg.label_smoothing, &mut rng)?;
            loss_sum += loss;
            for (acc_g, g) in grads.iter_mut().zip(&batch_grads) {
                *acc_g += g;
            }
        }
        let loss = loss_sum / acc as f64;
        if !loss.is_finite() {
            let diagnostic = ckpt_dir.join(format!("diagnostic_step_{step:08}.ckpt"));
            save_checkpoint(&diagnostic, &state)?;
            return Err(Error::NonFiniteLoss {
                step,
                checkpoint: diagnostic,
            });
        }
        let scale = 1.0 / acc as f64;
        for g in &mut grads {
            g.mapv_inplace(|v| v * scale);
        }
        adam_step(&mut state.adam, &mut state.model, &grads, lr_e, lr_d, cfg);
        state.step = step;
        state.rng_word_pos = rng.get_word_pos();

        let mut row = TraceRow {
            step,
            loss,
            lr_encoder: lr_e,
            lr_decoder: lr_d,
            rouge: None,
        };
        if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
            let report = validation_report(&state.model, &state.vocab, valid, cfg.eval_max_out)?;
            let path = ckpt_dir.join(format!("step_{step:08}.ckpt"));
            save_checkpoint(&path, &state)?;
            if best.as_ref().is_none_or(|(_, b)| report.rouge1 > *b) {
                best = Some((path, report.rouge1));
            }
            row.rouge = Some(report);
        }
        trace.push(row);
    }

    write_trace(&work_dir.join("trace.csv"), &trace, resuming)?;
    Ok(TrainOutcome { state, trace, best })
}

/// Writes (or appends) trace rows as CSV with a fixed header.
pub fn write_trace(path: &Path, rows: &[TraceRow], append: bool) -> Result<()> {
    let mut out = String::new();
    if !append || !path.exists() {
        out.push_str("step,loss,lr_enc,lr_dec,rouge1,rouge2,rougeL\n");
    }
    for row in rows {
        let rouge = match &row.rouge {
            Some(r) => format!("{},{},{}", r.rouge1, r.rouge2, r.rouge_l),
            None => ",,".to_string(),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.loss, row.lr_encoder, row.lr_decoder, rouge
        ));
    }
    let result = if append && path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
    } else {
        fs::write(path, out)
    };
    result.map_err(|e| Error::io(path, e))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
    fn matrix(&mut self, m: &Array2<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for &v in m.iter() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.corrupt("unexpected end of file"));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > self.data.len() {
            return Err(self.corrupt("length field exceeds file size"));
        }
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String> {
        let raw = self.bytes()?;
        String::from_utf8(raw).map_err(|_| self.corrupt("invalid utf-8 string"))
    }
    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        if rows.checked_mul(cols).is_none_or(|n| n > self.data.len() / 8) {
            return Err(self.corrupt("matrix shape exceeds file size"));
        }
        let mut m = Array2::zeros((rows, cols));
        for v in m.iter_mut() {
            *v = self.f64()?;
        }
        Ok(m)
    }
}

/// Serializes the full training state as a little-endian binary file with
/// a magic header and end sentinel. Floats are stored as raw bits, so a
/// round trip is exact.
pub fn save_checkpoint(path: &Path, state: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(state.step);

    let cfg = &state.model.cfg;
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.d_ff,
        cfg.max_len,
        cfg.kg_dim,
    ] {
        w.u64(v as u64);
    }
    w.f64(cfg.dropout);

    w.u64(state.vocab.len() as u64);
    for token in state.vocab.tokens() {
        w.bytes(token.as_bytes());
    }

    w.u64(state.model.params.len() as u64);
    for param in &state.model.params.params {
        w.bytes(param.name.as_bytes());
        w.buf.push(param.decoder_group as u8);
        w.matrix(&param.value);
    }

    w.u64(state.adam.t);
    for m in &state.adam.m {
        w.matrix(m);
    }
    for v in &state.adam.v {
        w.matrix(v);
    }

    w.u64(state.rng_seed);
    let pos = state.rng_word_pos;
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
    w.buf.extend_from_slice(CHECKPOINT_SENTINEL);

    fs::write(path, &w.buf).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back, validating the header, every shape, and the
/// end sentinel.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        data: &data,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let step = r.u64()?;

    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let dropout = r.f64()?;
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        enc_layers: dims[3],
        dec_layers: dims[4],
        d_ff: dims[5],
        max_len: dims[6],
        kg_dim: dims[7],
        dropout,
    };
    cfg.validate()
        .map_err(|e| r.corrupt(format!("invalid model config: {e}")))?;

    let n_tokens = r.u64()? as usize;
    if n_tokens > data.len() {
        return Err(r.corrupt("token count exceeds file size"));
    }
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(r.string()?);
    }
    let vocab =
        Vocab::from_token_list(tokens).map_err(|e| r.corrupt(format!("invalid vocab: {e}")))?;

    let mut model = Summarizer::new(cfg, 0)?;
    let n_params = r.u64()? as usize;
    if n_params != model.params.len() {
        return Err(r.corrupt(format!(
            "{} parameters on disk, model has {}",
            n_params,
            model.params.len()
        )));
    }
    for param in &mut model.params.params {
        let name = r.string()?;
        if name != param.name {
            return Err(r.corrupt(format!(
                "parameter '{}' on disk, expected '{}'",
                name, param.name
            )));
        }
        let group = r.take(1)?[0];
        if group != param.decoder_group as u8 {
            return Err(r.corrupt(format!("parameter '{}' changed group", param.name)));
        }
        let value = r.matrix()?;
        if value.dim() != param.value.dim() {
            return Err(r.corrupt(format!("parameter '{}' changed shape", param.name)));
        }
        param.value = value;
    }

    let t = r.u64()?;
    let mut adam = AdamState::new(&model);
    adam.t = t;
    for (slot, param) in adam.m.iter_mut().zip(&model.params.params) {
        let m = r.matrix()?;
        if m.dim() != param.value.dim() {
            return Err(r.corrupt(format!("moment for '{}' changed shape", param.name)));
        }
        *slot = m;
    }
    for (slot, param) in adam.v.iter_mut().zip(&model.params.params) {
        let v = r.matrix()?;
        if v.dim() != param.value.dim() {
            return Err(r.corrupt(format!("moment for '{}' changed shape", param.name)));
        }
        *slot = v;
    }

    let rng_seed = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let rng_word_pos = (hi << 64) | lo;
    if r.take(4)? != CHECKPOINT_SENTINEL {
        return Err(r.corrupt("missing end sentinel"));
    }
    if r.pos != data.len() {
        return Err(r.corrupt("trailing bytes after end sentinel"));
    }

    Ok(Checkpoint {
        step,
        model,
        vocab,
        adam,
        rng_seed,
        rng_word_pos,
    })
}
