//! Training: AdamW with decoupled weight decay, per-epoch cosine annealing,
//! the epoch loop with evaluation, history and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::autograd::Tape;
use crate::data::{batch_indices, make_batch, AugmentConfig, DataError, SampleSource, Split};
use crate::error::AutogradError;
use crate::loss::{group_loss, LossConfig, LossError};
use crate::metrics::{confusion, metrics_report, MetricsError, MetricsReport, THRESHOLD};
use crate::model::{ModelError, Network};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::weights::{self, decode_f64, decode_u64, encode_f64, encode_u64, NamedTensors, WeightError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch} (samples {ids:?})")]
    NonFinite {
        epoch: u64,
        batch: usize,
        value: f64,
        ids: Vec<String>,
    },
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid training config: {0}")]
    Config(String),
}

// ── optimizer ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments are kept for learnable entries only, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| e.kind.learnable().then(|| Tensor::zeros(e.value.shape())))
                .collect()
        };
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)` for every learnable entry.
    /// Fails before touching anything if a learnable entry has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<(), TrainError> {
        if let Some(e) = store.entries().iter().find(|e| e.kind.learnable() && e.grad.is_none()) {
            return Err(TrainError::MissingGradient(e.name.clone()));
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::one() - T::from_f64(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::from_f64(c.beta2.powi(self.step as i32));
        let lr_t = T::from_f64(lr);
        let decay = T::one() - T::from_f64(lr * c.weight_decay);
        let eps = T::from_f64(c.eps);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let (Some(m), Some(v)) = (&mut self.m[i], &mut self.v[i]) else {
                continue;
            };
            let g = e.grad.as_ref().expect("checked above");
            let p = e.value.data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── schedule ──────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    /// Plain cosine formula at every epoch, so the rate rises again after `t_max`.
    Periodic,
    /// Hold `eta_min` once `t_max` is reached.
    Plateau,
}

impl FromStr for ScheduleMode {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic" => Ok(ScheduleMode::Periodic),
            "plateau" => Ok(ScheduleMode::Plateau),
            _ => Err(TrainError::Config(format!("unknown schedule `{s}`"))),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Periodic => "periodic",
            ScheduleMode::Plateau => "plateau",
        })
    }
}

/// `eta_min + (lr0 − eta_min)·(1 + cos(π·epoch/t_max))/2`.
pub fn cosine_lr(epoch: u64, lr0: f64, t_max: u64, eta_min: f64) -> f64 {
    eta_min + (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max as f64).cos()) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub t_max: u64,
    pub eta_min: f64,
    pub mode: ScheduleMode,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            lr0: 1e-3,
            t_max: 50,
            eta_min: 1e-5,
            mode: ScheduleMode::Periodic,
        }
    }
}

impl CosineSchedule {
    pub fn lr(&self, epoch: u64) -> f64 {
        match self.mode {
            ScheduleMode::Plateau if epoch >= self.t_max => self.eta_min,
            _ => cosine_lr(epoch, self.lr0, self.t_max, self.eta_min),
        }
    }
}

// ── loop ──────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub schedule: CosineSchedule,
    pub optim: AdamWConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub threshold: f64,
    pub seed: u64,
    /// Where history, best/final weights and the training checkpoint go.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 8,
            eval_batch: 1,
            schedule: CosineSchedule::default(),
            optim: AdamWConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            threshold: THRESHOLD,
            seed: 42,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if self.eval_batch != 1 {
            return bad("eval_batch must be 1");
        }
        if self.schedule.t_max == 0 {
            return bad("t_max must be ≥ 1");
        }
        if !(self.schedule.lr0 > 0.0 && self.schedule.eta_min >= 0.0) {
            return bad("learning rates must be positive");
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return bad("invalid AdamW constants");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0,1]");
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub test: Option<MetricsReport>,
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: u64,
    lr: f64,
    train_loss: f64,
    test_miou: Option<f64>,
    test_mdice: Option<f64>,
    test_miou_star: Option<f64>,
    test_mdice_star: Option<f64>,
}

pub fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(HistoryRow {
            epoch: r.epoch,
            lr: r.lr,
            train_loss: r.train_loss,
            test_miou: r.test.as_ref().map(|m| m.miou),
            test_mdice: r.test.as_ref().map(|m| m.mdice),
            test_miou_star: r.test.as_ref().map(|m| m.miou_star),
            test_mdice_star: r.test.as_ref().map(|m| m.mdice_star),
        })?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Eval-mode pass at batch 1 in source order.
pub fn evaluate<S: SampleSource + ?Sized>(net: &mut Network<f32>, src: &S, threshold: f64) -> Result<MetricsReport, TrainError> {
    let mut per_image = Vec::with_capacity(src.len());
    for idx in batch_indices(src.len(), Split::Test, 1, 0, 0)? {
        let b = make_batch(src, &idx, None)?;
        let p = net.predict(&b.images)?;
        per_image.push(confusion(p.data(), b.masks.data(), threshold).map_err(MetricsError::from)?);
    }
    Ok(metrics_report(&per_image)?)
}

pub const HISTORY_FILE: &str = "history.csv";
pub const BEST_WEIGHTS: &str = "best.ucmw";
pub const FINAL_WEIGHTS: &str = "final.ucmw";
pub const CHECKPOINT_FILE: &str = "checkpoint.ucmw";

pub struct Trainer {
    pub net: Network<f32>,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    /// Next epoch to run (0-based).
    pub epoch: u64,
    pub history: Vec<EpochRecord>,
    best_miou: Option<f64>,
}

impl Trainer {
    pub fn new(net: Network<f32>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = AdamW::new(cfg.optim.clone(), net.params());
        Ok(Trainer {
            net,
            opt,
            cfg,
            epoch: 0,
            history: Vec::new(),
            best_miou: None,
        })
    }

    /// One pass over `src` in train mode; returns `(lr, mean batch loss)`.
    pub fn train_epoch<S: SampleSource + ?Sized>(&mut self, src: &S) -> Result<(f64, f64), TrainError> {
        let epoch = self.epoch;
        let lr = self.cfg.schedule.lr(epoch);
        let batches = batch_indices(src.len(), Split::Train, self.cfg.batch_size, self.cfg.seed, epoch)?;
        let aug = self.cfg.augment.enabled.then_some((&self.cfg.augment, self.cfg.seed, epoch));
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch = make_batch(src, idx, aug)?;
            let tape = Tape::new();
            let x = tape.constant(batch.images)?;
            let out = self.net.forward(&tape, x, Mode::Train)?;
            let loss = group_loss(out.out_logits, &out.stage_logits, &batch.masks, &self.cfg.loss)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    value,
                    ids: batch.ids,
                });
            }
            let grads = tape.backward(loss)?;
            let store = self.net.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            self.opt.step(store, lr)?;
            total += value;
        }
        self.epoch += 1;
        Ok((lr, total / batches.len() as f64))
    }

    /// Run the remaining epochs. After each epoch the eval source (if any) is
    /// scored; with a checkpoint directory the history, best-by-mIoU and final
    /// weights, and a resumable checkpoint are written there.
    pub fn run<S, E>(&mut self, train: &S, eval: Option<&E>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(), TrainError>
    where
        S: SampleSource + ?Sized,
        E: SampleSource + ?Sized,
    {
        let dir = self.cfg.checkpoint_dir.clone();
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|source| TrainError::Io {
                path: d.clone(),
                source,
            })?;
        }
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let (lr, train_loss) = self.train_epoch(train)?;
            let test = match eval {
                Some(e) => Some(evaluate(&mut self.net, e, self.cfg.threshold)?),
                None => None,
            };
            let rec = EpochRecord {
                epoch,
                lr,
                train_loss,
                test,
            };
            if let Some(d) = &dir {
                if let Some(m) = &rec.test {
                    if self.best_miou.is_none_or(|b| m.miou > b) {
                        self.best_miou = Some(m.miou);
                        weights::save(&d.join(BEST_WEIGHTS), &weights::store_tensors(self.net.params()))?;
                    }
                }
            }
            on_epoch(&rec);
            self.history.push(rec);
            if let Some(d) = &dir {
                write_history(&d.join(HISTORY_FILE), &self.history)?;
            }
        }
        if let Some(d) = &dir {
            weights::save(&d.join(FINAL_WEIGHTS), &weights::store_tensors(self.net.params()))?;
            self.save_checkpoint(&d.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }

    pub fn checkpoint_tensors(&self) -> NamedTensors {
        let mut out = weights::store_tensors(self.net.params());
        for (i, e) in self.net.params().entries().iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.opt.m[i], &self.opt.v[i]) {
                out.push((format!("optim.m.{}", e.name), m.clone()));
                out.push((format!("optim.v.{}", e.name), v.clone()));
            }
        }
        let c = &self.opt.cfg;
        out.push(("optim.step".into(), encode_u64(self.opt.step)));
        out.push(("optim.weight_decay".into(), encode_f64(c.weight_decay)));
        out.push(("optim.beta1".into(), encode_f64(c.beta1)));
        out.push(("optim.beta2".into(), encode_f64(c.beta2)));
        out.push(("optim.eps".into(), encode_f64(c.eps)));
        out.push(("train.epoch".into(), encode_u64(self.epoch)));
        out.push(("train.best_miou".into(), encode_f64(self.best_miou.unwrap_or(f64::NAN))));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        Ok(weights::save(path, &self.checkpoint_tensors())?)
    }

    /// Restore model, optimizer state and epoch counter. The network must have
    /// the checkpoint's architecture; history is not restored.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), TrainError> {
        let tensors = weights::load(path)?;
        if let Some((n, _)) = tensors
            .iter()
            .find(|(n, _)| !n.starts_with("optim.") && !n.starts_with("train.") && self.net.params().id_of(n).is_none())
        {
            return Err(WeightError::Unexpected(n.clone()).into());
        }
        let get = |name: &str| -> Result<&Tensor<f32>, WeightError> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| WeightError::Missing(name.to_string()))
        };
        let mut net = self.net.clone();
        weights::load_into_store(net.params_mut(), &tensors, true)?;
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: decode_f64("optim.weight_decay", get("optim.weight_decay")?)?,
                beta1: decode_f64("optim.beta1", get("optim.beta1")?)?,
                beta2: decode_f64("optim.beta2", get("optim.beta2")?)?,
                eps: decode_f64("optim.eps", get("optim.eps")?)?,
            },
            net.params(),
        );
        opt.step = decode_u64("optim.step", get("optim.step")?)?;
        for (i, e) in net.params().entries().iter().enumerate() {
            if !e.kind.learnable() {
                continue;
            }
            for (slot, key) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let name = format!("optim.{key}.{}", e.name);
                let t = get(&name)?;
                if t.shape() != e.value.shape() {
                    return Err(WeightError::ShapeMismatch {
                        name,
                        expected: e.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    }
                    .into());
                }
                *slot = Some(t.clone());
            }
        }
        let epoch = decode_u64("train.epoch", get("train.epoch")?)?;
        let best = decode_f64("train.best_miou", get("train.best_miou")?)?;
        self.net = net;
        self.opt = opt;
        self.epoch = epoch;
        self.best_miou = (!best.is_nan()).then_some(best);
        Ok(())
    }
}
