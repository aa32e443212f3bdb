//! Frozen-probe training: AdamW with decoupled weight decay, a cosine
//! learning-rate schedule, cross-entropy over byte windows, and deterministic
//! seeded batching with gradient accumulation.

use crate::error::{Error, Result};
use crate::model::{bind_model, forward_bound, ModelConfig, ParamStore, Partition};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use indexmap::IndexMap;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub steps: usize,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub warmup_steps: usize,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-5,
            steps: 500,
            effective_batch: 16,
            micro_batch: 16,
            warmup_steps: 0,
            lr_min: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.micro_batch == 0 || self.effective_batch % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "micro_batch {} must divide effective_batch {}",
                self.micro_batch, self.effective_batch
            )));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`: a linear ramp over `warmup_steps`, then
/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / steps)) / 2`.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::Config(format!("step {step} out of range 0..={}", cfg.steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = step as f64 / cfg.steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Mean token-level negative log-likelihood; thin wrapper over the tape op.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// First/second moment buffers, one pair per trainable tensor.
#[derive(Debug, Default)]
pub struct AdamState<T> {
    moments: IndexMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState { moments: IndexMap::new(), step: 0 }
    }
}

/// One AdamW update over every trainable tensor. Weight decay is decoupled:
/// `w <- w - lr * wd * w`, applied independently of the moment-based update.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::from_f64(cfg.beta1);
    let beta2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let bias1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bias2 = T::from_f64(1.0 - cfg.beta2.powi(t));

    for (name, entry) in store.iter_mut() {
        if entry.partition != Partition::Trainable {
            continue;
        }
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing gradient for trainable {name:?}")))?;
        let n = entry.tensor.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let w = entry.tensor.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            w[i] = w[i] * decay;
            m[i] = beta1 * m[i] + (T::one() - beta1) * g;
            v[i] = beta2 * v[i] + (T::one() - beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

/// Contiguous non-overlapping byte windows of `window_len`, visited in a
/// seeded per-epoch permutation. Window `w` predicts bytes `1..` from bytes
/// `..window_len - 1`.
pub struct WindowSampler {
    n_windows: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl WindowSampler {
    pub fn new(corpus_len: usize, window_len: usize, seed: u64) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::Config("window length must be at least 2".into()));
        }
        let n_windows = corpus_len / window_len;
        if n_windows == 0 {
            return Err(Error::Config(format!(
                "corpus of {corpus_len} bytes is shorter than one {window_len}-byte window"
            )));
        }
        let mut sampler = WindowSampler { n_windows, seed, epoch: 0, order: Vec::new(), pos: 0 };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n_windows).collect();
        let mut rng = StreamRng::for_label(self.seed, &format!("batch.epoch.{}", self.epoch));
        rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_window(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let w = self.order[self.pos];
        self.pos += 1;
        w
    }
}

/// Forward/backward over one group of windows on a single tape, averaging
/// the per-window losses. Returns the loss and, when anything is trainable,
/// the gradients by parameter name.
fn micro_batch_pass<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    corpus: &[u8],
    windows: &[usize],
    window_len: usize,
) -> Result<(f64, IndexMap<String, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, store, cfg)?;
    let mut losses = Vec::with_capacity(windows.len());
    for &w in windows {
        let bytes = &corpus[w * window_len..(w + 1) * window_len];
        let tokens: Vec<usize> = bytes[..window_len - 1].iter().map(|&b| b as usize).collect();
        let targets: Vec<usize> = bytes[1..].iter().map(|&b| b as usize).collect();
        let logits = forward_bound(&mut tape, &tokens, &bound, cfg, 0)?;
        losses.push(tape.cross_entropy(logits, &targets)?);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.add(acc, l)?;
    }
    let loss = tape.scale(acc, T::from_f64(1.0 / windows.len() as f64))?;
    let loss_value = tape.value(loss).item()?.as_f64();

    let mut grads = IndexMap::new();
    if !bound.trainable.is_empty() {
        tape.backward(loss)?;
        for (name, var) in &bound.trainable {
            let g = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(tape.shape(*var).to_vec()));
            grads.insert(name.clone(), g);
        }
    }
    Ok((loss_value, grads))
}

/// Gradients and mean loss for one optimizer step: the windows are split into
/// `effective_batch / micro_batch` groups, each group runs on its own tape,
/// and the group gradients are averaged in a fixed order.
pub fn step_gradients<T: Real>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    corpus: &[u8],
    windows: &[usize],
    micro_batch: usize,
    window_len: usize,
) -> Result<(f64, IndexMap<String, Tensor<T>>)> {
    let n_micro = windows.len() / micro_batch;
    let mut grads: IndexMap<String, Tensor<T>> = IndexMap::new();
    let mut loss_sum = 0.0;
    for micro in windows.chunks(micro_batch) {
        let (loss, micro_grads) = micro_batch_pass(store, cfg, corpus, micro, window_len)?;
        loss_sum += loss;
        for (name, g) in micro_grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let inv = T::from_f64(1.0 / n_micro as f64);
    for (_, g) in grads.iter_mut() {
        for v in g.data_mut() {
            *v = *v * inv;
        }
    }
    Ok((loss_sum / n_micro as f64, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeResult {
    pub history: Vec<StepRecord>,
}

impl ProbeResult {
    pub fn initial_loss(&self) -> f64 {
        self.history.first().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.history.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

/// Loss history as CSV: header `step,lr,loss`, one row per step.
pub fn loss_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Run the probe protocol: exactly `steps` optimizer steps over seeded
/// window batches, gradient accumulation across micro-batches, frozen
/// tensors untouched. The store must already be partitioned. A non-finite
/// loss (or any non-finite intermediate) aborts with the step index.
pub fn probe_train<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    corpus: &[u8],
    tcfg: &TrainConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    tcfg.validate()?;
    let window_len = cfg.max_seq_len;
    let mut sampler = WindowSampler::new(corpus.len(), window_len, tcfg.seed)?;
    let has_trainable = store.trainable_scalars() > 0;
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let lr = cosine_lr(step, tcfg)?;
        let windows: Vec<usize> =
            (0..tcfg.effective_batch).map(|_| sampler.next_window()).collect();
        let result = step_gradients(store, cfg, corpus, &windows, tcfg.micro_batch, window_len);
        let (loss, grads) = match result {
            Ok(ok) => ok,
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if has_trainable {
            match adamw_step(store, &grads, &mut state, lr, tcfg) {
                Ok(()) => {}
                Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { step }),
                Err(e) => return Err(e),
            }
        }
        history.push(StepRecord { step, lr, loss });
    }
    Ok(ProbeResult { history })
}
