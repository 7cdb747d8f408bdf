//! Optimization: AdamW, masked-autoencoder pre-training and supervised
//! fine-tuning of per-token symptom heads with early stopping.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_scaling::{mean_log_profile, scaling_vector, ScalingVector};
use crate::model::{
    encode_batch, init_head, init_params, reconstruct_batch, regress_batch, ModelConfig, ParamStore, ParamSubset,
    Tape,
};
use crate::seed::derive_seed;
use crate::tensor::Matrix;
use crate::tokenizer::{masked_features, plan_mask, MaskPlan, Sequence, Symptom};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of every parameter.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamStore, state: &mut OptimState) -> Result<()> {
    adamw_step_where(params, grads, state, |_| true)
}

/// One AdamW update restricted to parameters accepted by `trainable`; the
/// rest (including their weight decay) are left untouched.
pub fn adamw_step_where(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Validation("parameter, gradient and moment layouts differ".into()));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric(format!("gradient of {name}")));
    }
    state.step += 1;
    let c = &state.cfg;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if !trainable(name) {
            continue;
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
            v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p.data[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Validation loss of the starting parameters.
    pub initial_val_loss: f64,
    pub optimizer_steps: u64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss` rows, one per epoch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            s.push_str(&format!("{},{t},{v}\n", i + 1));
        }
        s
    }
}

/// Patience counter on a validation loss; only strict improvements reset it.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Progress {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            Progress::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                Progress::Stop
            } else {
                Progress::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Indices of the chronologically last `fraction` of each subject's
/// sequences (validation) and the rest (training). Subjects keep the order
/// in which they first appear.
pub fn chronological_split(sequences: &[Sequence], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut subjects: Vec<&str> = Vec::new();
    for s in sequences {
        if !subjects.contains(&s.subject_id.as_str()) {
            subjects.push(&s.subject_id);
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for subj in subjects {
        let mut idx: Vec<usize> = (0..sequences.len()).filter(|&i| sequences[i].subject_id == subj).collect();
        idx.sort_by_key(|&i| sequences[i].tokens.first().map_or(0, |t| t.t_start_unix_s));
        let n_val = (idx.len() as f64 * fraction).floor() as usize;
        let cut = idx.len() - n_val;
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    (train, val)
}

/// Stack the feature matrices of several sequences row-wise.
pub fn stack_features<'a>(seqs: impl IntoIterator<Item = &'a Sequence>) -> Matrix {
    let mut rows = 0;
    let mut cols = 0;
    let mut data = Vec::new();
    for s in seqs {
        for t in &s.tokens {
            cols = t.features.len();
            data.extend_from_slice(&t.features);
            rows += 1;
        }
    }
    Matrix::from_vec(rows, cols, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub val_fraction: f64,
    /// Loss weight at the hour-of-day position.
    pub hour_weight: f64,
    /// `false` replaces the 1/f scaling vector with unit weights.
    pub scaled_loss: bool,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 50,
            mask_ratio: 0.3,
            val_fraction: 0.1,
            hour_weight: 0.0,
            scaled_loss: true,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    pub report: TrainReport,
    pub scaling: ScalingVector,
}

/// Loss weights from the spectra of the given sequences only.
pub fn fit_scaling(sequences: &[&Sequence], freqs: &[f64], hour_weight: f64) -> Result<ScalingVector> {
    let spectra: Vec<&[f64]> = sequences.iter().flat_map(|s| s.tokens.iter().map(|t| t.spectrum())).collect();
    let p = mean_log_profile(&spectra)?;
    scaling_vector(&p, freqs, hour_weight)
}

/// Scaled masked reconstruction loss of a batch, recorded on `tape`.
pub fn masked_batch_loss(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[(&Sequence, &MaskPlan)],
    weights: &[f64],
) -> Result<crate::model::Var> {
    let per = cfg.tokens_per_sequence();
    let mut inputs = Vec::with_capacity(batch.len() * per * cfg.input_dim);
    let mut rows = Vec::new();
    for (b, (seq, plan)) in batch.iter().enumerate() {
        if seq.len() != per {
            return Err(Error::Validation(format!("sequence has {} tokens, model expects {per}", seq.len())));
        }
        inputs.extend_from_slice(&masked_features(seq, plan).data);
        rows.extend(plan.masked_indices.iter().map(|t| b * per + t));
    }
    let inputs = Matrix::from_vec(batch.len() * per, cfg.input_dim, inputs);
    let target = stack_features(batch.iter().map(|(s, _)| *s));
    let (hidden, _) = encode_batch(tape, params, cfg, &inputs, false)?;
    let pred = reconstruct_batch(tape, params, cfg, hidden)?;
    tape.weighted_mae(pred, target, weights.to_vec(), rows)
}

fn masked_eval(
    params: &ParamStore,
    cfg: &ModelConfig,
    items: &[(&Sequence, &MaskPlan)],
    weights: &[f64],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in items.chunks(batch_size.max(1)) {
        let n: usize = chunk.iter().map(|(_, p)| p.masked_indices.len()).sum();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let loss = masked_batch_loss(&mut tape, params, cfg, chunk, weights)?;
        total += tape.value(loss).data[0] * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Validation("no masked tokens to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Masked-autoencoder pre-training. Returns the best-validation parameters.
///
/// Validation uses the chronologically last `val_fraction` of each subject's
/// sequences with masks fixed up front; if that leaves nothing, the training
/// sequences are scored instead.
pub fn pretrain(
    sequences: &[Sequence],
    freqs: &[f64],
    cfg: &ModelConfig,
    hyper: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if sequences.is_empty() {
        return Err(Error::Validation("pre-training needs at least one sequence".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&hyper.mask_ratio) {
        return Err(Error::Config("pretrain.mask_ratio must lie in [0, 1]".into()));
    }
    let per = cfg.tokens_per_sequence();
    if crate::tokenizer::mask_count(hyper.mask_ratio, per) == 0 {
        return Err(Error::Config("mask_ratio masks no tokens".into()));
    }
    let (train_idx, mut val_idx) = chronological_split(sequences, hyper.val_fraction);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let train_refs: Vec<&Sequence> = train_idx.iter().map(|&i| &sequences[i]).collect();

    let scaling = if hyper.scaled_loss {
        fit_scaling(&train_refs, freqs, hyper.hour_weight)?
    } else {
        ScalingVector::unit(freqs.to_vec())
    };
    let weights = scaling.token_weights();
    if weights.len() != cfg.input_dim {
        return Err(Error::Validation(format!(
            "{} loss weights for input width {}",
            weights.len(),
            cfg.input_dim
        )));
    }

    let mut params = init_params(cfg, derive_seed(seed, "init", 0))?;
    let mut opt = OptimState::new(&params, hyper.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain", 0));

    let val_plans: Vec<MaskPlan> = val_idx
        .iter()
        .map(|&i| plan_mask(per, hyper.mask_ratio, derive_seed(seed, "val-mask", i as u64)))
        .collect();
    let val_items: Vec<(&Sequence, &MaskPlan)> = val_idx.iter().map(|&i| &sequences[i]).zip(&val_plans).collect();

    let initial_val_loss = masked_eval(&params, cfg, &val_items, &weights, hyper.batch_size)?;
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(hyper.epochs),
        val_loss: Vec::with_capacity(hyper.epochs),
        epochs_run: 0,
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        initial_val_loss,
        optimizer_steps: 0,
    };

    let mut order = train_idx.clone();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let plans: Vec<MaskPlan> = chunk
                .iter()
                .map(|_| plan_mask(per, hyper.mask_ratio, rng.gen()))
                .collect();
            let items: Vec<(&Sequence, &MaskPlan)> = chunk.iter().map(|&i| &sequences[i]).zip(&plans).collect();
            let mut tape = Tape::new();
            let loss = masked_batch_loss(&mut tape, &params, cfg, &items, &weights).map_err(|e| match e {
                Error::Numeric { context } => Error::numeric(format!("{context} (epoch {epoch}, batch {b})")),
                other => other,
            })?;
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::numeric(format!("pre-training loss (epoch {epoch}, batch {b})")));
            }
            let grads = tape.backward(loss, &params)?;
            adamw_step_where(&mut params, &grads, &mut opt, |n| !n.starts_with("head."))?;
            let n: usize = plans.iter().map(|p| p.masked_indices.len()).sum();
            sum += value * n as f64;
            count += n;
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = masked_eval(&params, cfg, &val_items, &weights, hyper.batch_size)?;
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.epochs_run = epoch;
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        }
    }
    report.optimizer_steps = opt.step;
    if report.epochs_run > 0 {
        report.best_epoch = best.1;
        params = best.2;
    }
    Ok(PretrainOutcome {
        params,
        report,
        scaling,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub val_fraction: f64,
    pub freeze_backbone: bool,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            batch_size: 50,
            hidden: 32,
            val_fraction: 0.1,
            freeze_backbone: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Sum over symptoms of the per-token MSE of each head, recorded on `tape`.
pub fn regression_batch_loss(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[&Sequence],
    symptoms: &[Symptom],
    frozen: bool,
) -> Result<crate::model::Var> {
    let inputs = stack_features(batch.iter().copied());
    let (hidden, _) = encode_batch(tape, params, cfg, &inputs, frozen)?;
    let tokens = tape.drop_first(hidden, cfg.seq_positions);
    let mut total = None;
    for &s in symptoms {
        let pred = regress_batch(tape, params, tokens, s)?;
        let target = batch
            .iter()
            .flat_map(|seq| (0..seq.len()).map(move |t| seq.label(t, s)))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Validation("sequence without labels".into()))?;
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l),
        });
    }
    total.ok_or_else(|| Error::Validation("no symptoms to fine-tune".into()))
}

fn regression_eval(
    params: &ParamStore,
    cfg: &ModelConfig,
    seqs: &[&Sequence],
    symptoms: &[Symptom],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let n: usize = chunk.iter().map(|s| s.len()).sum();
        let mut tape = Tape::new();
        let loss = regression_batch_loss(&mut tape, params, cfg, chunk, symptoms, true)?;
        total += tape.value(loss).data[0] * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Check that a checkpoint carries exactly the tensors `cfg` produces.
pub fn check_checkpoint(checkpoint: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let reference = init_params(cfg, 0)?;
    for (name, t) in reference.iter() {
        match checkpoint.get(name) {
            Some(c) if c.shape == t.shape => {}
            Some(c) => {
                return Err(Error::Config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, config expects {:?}",
                    c.shape, t.shape
                )))
            }
            None => return Err(Error::Config(format!("checkpoint lacks `{name}` required by config"))),
        }
    }
    Ok(())
}

/// Fine-tune fresh symptom heads (and, unless frozen, the backbone) on
/// labeled sequences. Stops after `patience` epochs without validation
/// improvement and returns the best-validation parameters.
pub fn finetune(
    checkpoint: &ParamStore,
    cfg: &ModelConfig,
    sequences: &[Sequence],
    symptoms: &[Symptom],
    hyper: &FinetuneConfig,
    seed: u64,
) -> Result<(ParamStore, TrainReport)> {
    if sequences.is_empty() {
        return Err(Error::Validation("fine-tuning needs at least one sequence".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.labels.is_none()) {
        return Err(Error::Validation(format!("sequence of subject {} has no labels", s.subject_id)));
    }
    if symptoms.is_empty() {
        return Err(Error::Validation("no symptoms to fine-tune".into()));
    }
    if hyper.batch_size == 0 || hyper.patience == 0 {
        return Err(Error::Config("finetune.batch_size and finetune.patience must be positive".into()));
    }
    check_checkpoint(checkpoint, cfg)?;

    let mut params = checkpoint.clone();
    for &s in symptoms {
        init_head(&mut params, cfg, s, hyper.hidden, derive_seed(seed, s.name(), 0));
    }
    let frozen = hyper.freeze_backbone;
    let heads: Vec<String> = symptoms.iter().map(|s| format!("head.{}.", s.name())).collect();
    let trainable = |n: &str| heads.iter().any(|h| n.starts_with(h.as_str())) || (!frozen && ParamSubset::Encoder.contains(n));

    let (train_idx, mut val_idx) = chronological_split(sequences, hyper.val_fraction);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let val: Vec<&Sequence> = val_idx.iter().map(|&i| &sequences[i]).collect();

    let mut opt = OptimState::new(&params, hyper.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "finetune", 0));
    let initial_val_loss = regression_eval(&params, cfg, &val, symptoms, hyper.batch_size)?;
    let mut stopper = EarlyStopping::new(hyper.patience);
    let mut best = params.clone();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        epochs_run: 0,
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        initial_val_loss,
        optimizer_steps: 0,
    };

    let mut order = train_idx.clone();
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut tape = Tape::new();
            let loss = regression_batch_loss(&mut tape, &params, cfg, &batch, symptoms, frozen)?;
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::numeric(format!("fine-tuning loss (epoch {epoch}, batch {b})")));
            }
            let grads = tape.backward(loss, &params)?;
            adamw_step_where(&mut params, &grads, &mut opt, trainable)?;
            let n: usize = batch.iter().map(|s| s.len()).sum();
            sum += value * n as f64;
            count += n;
        }
        let val_loss = regression_eval(&params, cfg, &val, symptoms, hyper.batch_size)?;
        report.train_loss.push(sum / count.max(1) as f64);
        report.val_loss.push(val_loss);
        report.epochs_run = epoch;
        match stopper.observe(epoch, val_loss) {
            Progress::Improved => best = params.clone(),
            Progress::Continue => {}
            Progress::Stop => {
                report.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    report.best_epoch = stopper.best_epoch();
    report.optimizer_steps = opt.step;
    Ok((best, report))
}

/// Unweighted mean absolute reconstruction error per input column over the
/// masked tokens of `items`.
pub fn per_column_masked_mae(
    params: &ParamStore,
    cfg: &ModelConfig,
    items: &[(&Sequence, &MaskPlan)],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let per = cfg.tokens_per_sequence();
    let mut sum = vec![0.0; cfg.input_dim];
    let mut n = 0usize;
    for chunk in items.chunks(batch_size.max(1)) {
        let mut inputs = Vec::with_capacity(chunk.len() * per * cfg.input_dim);
        for (seq, plan) in chunk {
            inputs.extend_from_slice(&masked_features(seq, plan).data);
        }
        let inputs = Matrix::from_vec(chunk.len() * per, cfg.input_dim, inputs);
        let mut tape = Tape::new();
        let (hidden, _) = encode_batch(&mut tape, params, cfg, &inputs, true)?;
        let pred = reconstruct_batch(&mut tape, params, cfg, hidden)?;
        let pred = tape.value(pred);
        for (b, (seq, plan)) in chunk.iter().enumerate() {
            for &t in &plan.masked_indices {
                let row = pred.row(b * per + t);
                for ((s, p), y) in sum.iter_mut().zip(row).zip(&seq.tokens[t].features) {
                    *s += (p - y).abs();
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Validation("no masked tokens to evaluate".into()));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Per-token head outputs, sequence-major.
pub fn predict_tokens(
    params: &ParamStore,
    cfg: &ModelConfig,
    sequences: &[Sequence],
    symptom: Symptom,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sequences.len() * cfg.tokens_per_sequence());
    for chunk in sequences.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let (hidden, _) = encode_batch(&mut tape, params, cfg, &stack_features(chunk), true)?;
        let tokens = tape.drop_first(hidden, cfg.seq_positions);
        let pred = regress_batch(&mut tape, params, tokens, symptom)?;
        out.extend_from_slice(&tape.value(pred).data);
    }
    Ok(out)
}

/// Final-layer embeddings (`seq_positions x d_model`, CLS first) per sequence.
pub fn embed_sequences(
    params: &ParamStore,
    cfg: &ModelConfig,
    sequences: &[Sequence],
    batch_size: usize,
) -> Result<Vec<Matrix>> {
    let mut out = Vec::with_capacity(sequences.len());
    let s = cfg.seq_positions;
    for chunk in sequences.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let (hidden, _) = encode_batch(&mut tape, params, cfg, &stack_features(chunk), true)?;
        let h = tape.value(hidden);
        for b in 0..chunk.len() {
            out.push(Matrix::from_vec(s, h.cols, h.data[b * s * h.cols..(b + 1) * s * h.cols].to_vec()));
        }
    }
    Ok(out)
}
