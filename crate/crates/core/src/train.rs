//! L1 training with AdamW and a warmup multi-step schedule, plus evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lorafwi_tensor::{Gradients, Parameter, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::metrics::{MetricsReport, SampleMetrics};
use crate::model::Network;
use crate::nn::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// All parameters of a freshly initialized model.
    Scratch,
    /// All parameters of a pretrained model.
    Fft,
    /// Adapter parameters only.
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
    pub lora: Option<LoraConfig>,
}

impl TrainConfig {
    /// Schedule and optimizer settings of the full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 8e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            warmup_factor: 1e-5,
            milestones: vec![90, 100],
            gamma: 0.1,
            total_epochs: 120,
            batch_size: 128,
            seed: 0,
            method: Method::Scratch,
            lora: None,
        }
    }

    /// Same schedule shape compressed to 20 epochs with batch 8.
    pub fn desk() -> Self {
        Self {
            milestones: vec![15, 18],
            total_epochs: 20,
            batch_size: 8,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.warmup_factor) {
            return bad(format!("warmup_factor must lie in [0, 1], got {}", self.warmup_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.first().is_some_and(|&m| m < self.warmup_epochs) {
            return bad(format!("milestones {:?} must not precede the warmup", self.milestones));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return bad("total_epochs and batch_size must be positive".into());
        }
        match (self.method, &self.lora) {
            (Method::Lora, None) => return bad("method lora needs a LoRA config".into()),
            (Method::Lora, Some(c)) => c.validate()?,
            (_, Some(_)) => return bad("a LoRA config is only valid with method lora".into()),
            _ => {}
        }
        Ok(())
    }

    /// Per-epoch learning rate: linear warmup from `warmup_factor * base_lr`,
    /// then one decay by `gamma` per milestone reached.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Invalid(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        if epoch < self.warmup_epochs {
            let f = self.warmup_factor + (1.0 - self.warmup_factor) * epoch as f64 / self.warmup_epochs as f64;
            return Ok(self.base_lr * f);
        }
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        // Dividing by 1/gamma keeps decade steps on the exact decimal values.
        Ok(self.base_lr / self.gamma.recip().powi(k as i32))
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(pred.sub(target)?.abs().mean())
}

/// AdamW moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Flattened as `optim.m.{name}` / `optim.v.{name}` for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.moments
            .iter()
            .flat_map(|(n, (m, v))| [(format!("optim.m.{n}"), m), (format!("optim.v.{n}"), v)])
            .collect()
    }

    pub fn from_named(step: u64, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("optim.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                v.insert(n.to_string(), t);
            }
        }
        if m.len() != v.len() {
            return Err(Error::Corrupt("unpaired optimizer moments".into()));
        }
        let moments = m
            .into_iter()
            .map(|(n, mt)| {
                let vt = v.remove(&n).ok_or_else(|| Error::Corrupt(format!("no second moment for {n}")))?;
                Ok((n, (mt, vt)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { step, moments })
    }
}

/// One decoupled-weight-decay Adam update of every trainable parameter:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adamw_step<T: Scalar>(
    params: Vec<&mut Parameter<T>>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let trainable: Vec<&mut Parameter<T>> = params.into_iter().filter(|p| p.trainable).collect();
    if let Some(p) = trainable.iter().find(|p| grads.get(&p.name).is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for p in trainable {
        let g = grads.get(&p.name).expect("checked above");
        if g.shape() != p.value.shape() {
            return Err(Error::Tensor(lorafwi_tensor::TensorError::mismatch("adamw", p.value.shape(), g.shape())));
        }
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()).expect("nonempty"), Tensor::zeros(g.shape().to_vec()).expect("nonempty")));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
            let gi = gi.to_f64_lossy();
            let mn = b1 * mi.to_f64_lossy() + (1.0 - b1) * gi;
            let vn = b2 * vi.to_f64_lossy() + (1.0 - b2) * gi * gi;
            *mi = T::of(mn);
            *vi = T::of(vn);
            let wv = w.to_f64_lossy();
            let update = (mn / c1) / ((vn / c2).sqrt() + config.eps) + config.weight_decay * wv;
            *w = T::of(wv - lr * update);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_l1: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    pub val_ssim: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub optimizer_steps: u64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_l1,val_mae,val_rmse,val_ssim,seconds";

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.lr,
                r.train_l1,
                opt(r.val_mae),
                opt(r.val_rmse),
                opt(r.val_ssim),
                r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Everything except wall-clock time, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.seconds = 0.0);
        out
    }
}

/// Where a (possibly interrupted) run stands.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState<T> {
    pub optimizer: OptimizerState<T>,
    pub next_epoch: usize,
}

/// Shuffled mini-batches of one epoch. The order depends only on the seed
/// and the epoch, so an interrupted run can resume exactly. A trailing
/// batch of one sample is dropped: batch norm needs two values.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains from scratch for `config.total_epochs`.
pub fn train<T: Scalar, N: Network<T>>(
    model: &mut N,
    train_set: &SampleSet<T>,
    val_set: Option<&SampleSet<T>>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut state = TrainState::default();
    train_until(model, train_set, val_set, config, &mut state, config.total_epochs)
}

/// Runs epochs `state.next_epoch..stop` and advances `state`.
pub fn train_until<T: Scalar, N: Network<T>>(
    model: &mut N,
    train_set: &SampleSet<T>,
    val_set: Option<&SampleSet<T>>,
    config: &TrainConfig,
    state: &mut TrainState<T>,
    stop: usize,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let stop = stop.min(config.total_epochs);
    let mut history = TrainHistory::default();
    for epoch in state.next_epoch..stop {
        let start = Instant::now();
        let lr = config.lr_at(epoch)?;
        let batches = epoch_batches(train_set.len(), config.batch_size, config.seed, epoch);
        if batches.is_empty() {
            return Err(Error::Invalid(format!("{} training samples give no batch of two", train_set.len())));
        }
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train_set.batch(idx)?;
            let tape = Tape::new();
            let pred = model.forward(tape.constant(x), Mode::Train)?;
            let loss = l1_loss(pred, tape.constant(y))?;
            let value = loss.value().item()?.to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let grads = tape.backward(loss)?;
            adamw_step(model.parameters_mut(), &grads, &mut state.optimizer, lr, config)?;
            history.optimizer_steps += 1;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        let val = val_set.map(|v| evaluate(model, v, config.batch_size)).transpose()?;
        let record = EpochRecord {
            epoch,
            lr,
            train_l1: loss_sum / seen as f64,
            val_mae: val.as_ref().map(|m| m.mae),
            val_rmse: val.as_ref().map(|m| m.rmse),
            val_ssim: val.as_ref().map(|m| m.ssim),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {lr:.3e} train_l1 {:.5} val_mae {}",
            record.train_l1,
            record.val_mae.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into())
        );
        history.records.push(record);
        state.next_epoch = epoch + 1;
    }
    Ok(history)
}

/// Metrics of `predict` over a sample set, averaged per sample. MAE and RMSE
/// are taken on `[-1, 1]` maps, SSIM after rescaling to `[0, 1]`.
pub fn evaluate_with<T: Scalar>(
    mut predict: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    set: &SampleSet<T>,
    batch_size: usize,
    keep_per_sample: bool,
) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let mut samples = Vec::with_capacity(set.len());
    for idx in all.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(idx)?;
        let pred = predict(&x)?;
        if pred.shape() != y.shape() {
            return Err(lorafwi_tensor::TensorError::mismatch("evaluate", pred.shape(), y.shape()).into());
        }
        for b in 0..idx.len() {
            samples.push(SampleMetrics::compute(&pred.index_axis0(b)?, &y.index_axis0(b)?)?);
        }
    }
    MetricsReport::from_samples(samples, keep_per_sample)
}

/// Eval-mode metrics of a network.
pub fn evaluate<T: Scalar, N: Network<T>>(model: &mut N, set: &SampleSet<T>, batch_size: usize) -> Result<MetricsReport> {
    evaluate_with(|x| model.predict(x), set, batch_size, false)
}
