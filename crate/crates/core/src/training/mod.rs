//! Loss, optimizer, schedule, synthetic data, evaluation and stream fusion.

mod data;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    generate_dataset, rest_pose, toy_splits, toy_suite, DataSpec, Dataset, Drive, Modality, MotionProgram,
    SyntheticActionSpec, ACROSS_CLASS, WITHIN_CLASS,
};

use crate::model::{to_channels_last, HyperformerModel, PartitionState};
use crate::numerics::{softmax_lastaxis, NdArray, ParamStore, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters and inputs are rounded to 32-bit floats after every update.
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rescales each minibatch gradient so its global L2 norm is at most this.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub data: DataSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 60 epochs with decay at 45 and 55.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.025,
            decay_factor: 0.1,
            decay_epochs: vec![45, 55],
            warmup_epochs: 5,
            weight_decay: 4e-4,
            momentum: 0.9,
            batch_size: 64,
            epochs: 60,
            clip_norm: None,
            seed: 0,
            precision: Precision::F64,
            data: DataSpec::default(),
        }
    }

    /// The published 140-epoch schedule.
    pub fn full() -> Self {
        Self {
            decay_epochs: vec![110, 120],
            epochs: 140,
            ..Self::desk()
        }
    }

    /// 50 epochs on the toy suite.
    pub fn toy() -> Self {
        Self {
            base_lr: 0.005,
            decay_epochs: vec![35, 45],
            batch_size: 32,
            epochs: 50,
            clip_norm: Some(5.0),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, full, toy)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("decay epochs must be strictly increasing".into());
        }
        if let Some(&last) = self.decay_epochs.last() {
            if last >= self.epochs {
                return fail(format!("decay epoch {last} not before total epochs {}", self.epochs));
            }
        }
        if let Some(&first) = self.decay_epochs.first() {
            if self.warmup_epochs >= first {
                return fail(format!("warmup {} not before first decay {first}", self.warmup_epochs));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout zero-based `epoch`: linear warmup
    /// reaching `base_lr` on the last warmup epoch, then a factor of
    /// `decay_factor` per milestone passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        self.decay_epochs
            .iter()
            .filter(|&&m| m <= epoch)
            .fold(self.base_lr, |lr, _| lr * self.decay_factor)
    }
}

/// SGD with Nesterov momentum in its lookahead form:
///
/// ```text
/// g = grad(theta + mu * v) + wd * (theta + mu * v)
/// v = mu * v - lr * g
/// theta = theta + v
/// ```
///
/// With `v = 0` the first step is `-lr * g`.
pub struct Nesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<NdArray>>,
}

impl Nesterov {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|_| None).collect(),
        }
    }

    /// Moves trainable parameters to the lookahead point and returns the
    /// values to restore afterwards.
    pub fn lookahead(&self, store: &mut ParamStore) -> Vec<Option<NdArray>> {
        let mut saved = Vec::with_capacity(self.velocity.len());
        for (p, v) in store.iter_mut().zip(&self.velocity) {
            match v {
                Some(v) if p.trainable && self.momentum != 0.0 => {
                    saved.push(Some(p.value.clone()));
                    let mu = self.momentum;
                    p.value = p.value.zip_map(v, |x, v| x + mu * v).expect("same shape");
                }
                _ => saved.push(None),
            }
        }
        saved
    }

    /// `grads` were taken at the lookahead point returned by [`lookahead`],
    /// whose saved values are restored here before the update.
    ///
    /// [`lookahead`]: Nesterov::lookahead
    pub fn step(&mut self, store: &mut ParamStore, saved: Vec<Option<NdArray>>, grads: &[Option<NdArray>], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (((p, v), s), g) in store.iter_mut().zip(&mut self.velocity).zip(saved).zip(grads) {
            let (Some(g), true) = (g, p.trainable) else {
                continue;
            };
            let at = p.value.clone();
            if let Some(s) = s {
                p.value = s;
            }
            let g = g.zip_map(&at, |g, x| g + wd * x).expect("same shape");
            let nv = match v.take() {
                Some(v) => v.zip_map(&g, |v, g| mu * v - lr * g).expect("same shape"),
                None => g.map(|g| -lr * g),
            };
            p.value = p.value.zip_map(&nv, |x, d| x + d).expect("same shape");
            *v = Some(nv);
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// Largest |row sum - 1| of the relaxed partition seen after any step.
    pub partition_row_error: Option<f64>,
}

/// Scales all gradients by one factor so their joint L2 norm is at most
/// `max`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<NdArray>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = max / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|x| x * k);
        }
    }
    norm
}

/// Trains in place, writing one JSON line per epoch to `log` as it goes.
pub fn train(
    model: &mut HyperformerModel,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut train_set = train_set.clone();
    let mut eval_set = eval_set.filter(|d| !d.is_empty()).cloned();
    if cfg.precision == Precision::F32 {
        model.round_to_f32();
        train_set.round_to_f32();
        if let Some(e) = eval_set.as_mut() {
            e.round_to_f32();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Nesterov::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let track_rows = matches!(model.partition, PartitionState::Relaxed { .. });
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = train_set.gather(chunk);
            let saved = opt.lookahead(&mut model.store);
            let (loss, predicted, grads) = {
                let mut tape = Tape::with_params(&model.store);
                let x = tape.constant(to_channels_last(&batch)?);
                let tr = model.forward(&mut tape, x)?;
                let loss = tape.cross_entropy(tr.logits, &labels)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: value });
                }
                let predicted = argmax_rows(tape.value(tr.logits));
                let g = tape.backward(loss)?;
                let mut grads: Vec<Option<NdArray>> = model.store.ids().map(|id| g.param(id).cloned()).collect();
                if let Some(max) = cfg.clip_norm {
                    clip_global_norm(&mut grads, max);
                }
                (value, predicted, grads)
            };
            opt.step(&mut model.store, saved, &grads, lr);
            if cfg.precision == Precision::F32 {
                model.round_to_f32();
            }
            if track_rows {
                let err = row_sum_error(&model.partition_matrix());
                let worst = report.partition_row_error.get_or_insert(0.0);
                *worst = worst.max(err);
            }
            loss_sum += loss * chunk.len() as f64;
            correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            step += 1;
        }
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            eval_acc: eval_set.as_ref().map(|d| evaluate(model, d)).transpose()?,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&m)?)?;
            w.flush()?;
        }
        report.metrics.push(m);
    }
    Ok(report)
}

fn row_sum_error(h: &NdArray) -> f64 {
    let e = h.shape()[1];
    h.data()
        .chunks(e)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

const EVAL_BATCH: usize = 64;

/// Logits `[N, num_classes]` of a whole dataset, in batches.
pub fn predict_logits(model: &HyperformerModel, data: &Dataset) -> Result<NdArray> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = idx
        .chunks(EVAL_BATCH)
        .map(|c| model.logits(&data.gather(c).0))
        .collect::<Result<Vec<_>>>()?;
    let k = model.config.num_classes;
    let flat: Vec<f64> = parts.into_iter().flat_map(NdArray::into_data).collect();
    NdArray::new(&[data.len(), k], flat)
}

/// Softmax scores `[N, num_classes]`, the input of [`fuse_streams`].
pub fn predict_scores(model: &HyperformerModel, data: &Dataset) -> Result<NdArray> {
    softmax_lastaxis(&predict_logits(model, data)?)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(x: &NdArray) -> Vec<usize> {
    let k = *x.shape().last().unwrap_or(&1);
    x.data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Top-1 accuracy.
pub fn evaluate(model: &HyperformerModel, data: &Dataset) -> Result<f64> {
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.config.num_classes) {
        return Err(Error::Index(format!("label {bad} >= {} classes", model.config.num_classes)));
    }
    Ok(accuracy(&argmax_rows(&predict_logits(model, data)?), &data.labels))
}

/// Adds per-stream softmax scores and takes the argmax.
pub fn fuse_streams(score_sets: &[NdArray]) -> Result<Vec<usize>> {
    let first = score_sets
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one stream".into()))?;
    if first.ndim() != 2 {
        return Err(Error::Shape {
            op: "fuse_streams",
            lhs: first.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    let mut total = NdArray::zeros(first.shape());
    for (i, s) in score_sets.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(Error::Shape {
                op: "fuse_streams",
                lhs: first.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let k = s.shape()[1];
        if let Some(r) = s.data().chunks(k).position(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
            return Err(Error::Numeric(format!("stream {i} row {r} does not sum to 1")));
        }
        total.add_assign(s)?;
    }
    Ok(argmax_rows(&total))
}
