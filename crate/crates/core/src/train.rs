//! Optimizer, learning-rate schedule, change-detection metrics and the
//! training loop.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Snapshot;
use crate::data::{augment, normalize_pixel, shuffled_order, AugmentConfig, DatasetIndex, PatchIndex, SamplePair};
use crate::error::{Error, Result};
use crate::head::ChangeMask;
use crate::model::ChangeDetector;
use crate::nn::{Mode, Module, Param};
use crate::tensor::ops::cross_entropy_from_probs;
use crate::tensor::{backward, no_grad, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.99,
            weight_decay: 0.0005,
            epochs: 200,
            batch_size: 8,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `lr` may be zero here (a no-op run); negative or non-finite values
    /// and zero epochs or batch size are rejected.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `lr₀ · (1 − e / epochs)` for `0 ≤ e ≤ epochs`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if cfg.epochs == 0 || epoch > cfg.epochs {
        return Err(Error::contract(format!("epoch {epoch} outside 0..={}", cfg.epochs)));
    }
    Ok(cfg.lr * (1.0 - epoch as f64 / cfg.epochs as f64))
}

/// Heavy-ball SGD with one velocity buffer per parameter.
#[derive(Debug)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &[&Param<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn velocity(&self, i: usize) -> &[T] {
        &self.velocity[i]
    }

    /// `g' = g + wd·θ` (decayed params only), `v ← μv + g'`, `θ ← θ − lr·v`.
    /// A missing gradient counts as zero. Installing the new values also
    /// drops the stale gradients.
    pub fn step(&mut self, params: &[&Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (mu, lr) = (T::of(self.momentum), T::of(lr));
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let mut theta = p.value();
            if v.len() != theta.len() {
                return Err(Error::dim("Sgd::step", &[v.len()], theta.shape()));
            }
            let wd = if p.decay() { T::of(self.weight_decay) } else { T::zero() };
            let grad = p.grad();
            let g = grad.as_ref().map(Tensor::data);
            for (i, (t, vi)) in theta.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]) + wd * *t;
                *vi = mu * *vi + gi;
                *t -= lr * *vi;
            }
            p.set(theta)?;
        }
        Ok(())
    }
}

/// Pixel tallies with change as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, o: ConfusionCounts) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Adds the pixelwise comparison of `mask` against `label` to `cc`.
pub fn update_confusion(cc: ConfusionCounts, mask: &[u8], label: &[u8]) -> Result<ConfusionCounts> {
    if mask.len() != label.len() {
        return Err(Error::dim("update_confusion", &[mask.len()], &[label.len()]));
    }
    let mut out = cc;
    for (&m, &l) in mask.iter().zip(label) {
        match (m != 0, l != 0) {
            (true, true) => out.tp += 1,
            (true, false) => out.fp += 1,
            (false, true) => out.fn_ += 1,
            (false, false) => out.tn += 1,
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// IoU implied by an F1 score computed from the same counts.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

pub fn compute_metrics(cc: &ConfusionCounts) -> Result<MetricReport> {
    if cc.total() == 0 {
        return Err(Error::contract("metrics of an empty confusion matrix"));
    }
    let (tp, fp, fn_, tn) = (cc.tp as f64, cc.fp as f64, cc.fn_ as f64, cc.tn as f64);
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_, &mut degenerate);
    let iou = ratio(tp, tp + fp + fn_, &mut degenerate);
    Ok(MetricReport {
        precision,
        recall,
        f1,
        iou,
        oa: (tp + tn) / cc.total() as f64,
        degenerate,
    })
}

/// Random-access source of training pairs.
pub trait PairSource {
    fn len(&self) -> usize;

    fn get(&self, i: usize) -> Result<SamplePair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [SamplePair] {
    fn len(&self) -> usize {
        <[SamplePair]>::len(self)
    }

    fn get(&self, i: usize) -> Result<SamplePair> {
        Ok(self[i].clone())
    }
}

impl PairSource for Vec<SamplePair> {
    fn len(&self) -> usize {
        <[SamplePair]>::len(self)
    }

    fn get(&self, i: usize) -> Result<SamplePair> {
        Ok(self[i].clone())
    }
}

impl PairSource for DatasetIndex {
    fn len(&self) -> usize {
        DatasetIndex::len(self)
    }

    fn get(&self, i: usize) -> Result<SamplePair> {
        self.load(i)
    }
}

impl PairSource for PatchIndex {
    fn len(&self) -> usize {
        PatchIndex::len(self)
    }

    fn get(&self, i: usize) -> Result<SamplePair> {
        self.load(i)
    }
}

/// Network inputs and flattened labels for one batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub t1: Tensor<T>,
    pub t2: Tensor<T>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
}

/// Stacks pairs of equal extent into normalized `[B, 3, H, W]` tensors.
pub fn make_batch<T: Scalar>(pairs: &[SamplePair]) -> Result<Batch<T>> {
    let first = pairs.first().ok_or_else(|| Error::contract("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut t1 = Vec::with_capacity(pairs.len() * 3 * h * w);
    let mut t2 = Vec::with_capacity(pairs.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if (p.height(), p.width()) != (h, w) {
            return Err(Error::Data(format!("{}: {}×{} does not match batch extent {h}×{w}", p.id, p.height(), p.width())));
        }
        t1.extend(p.t1.data.iter().map(|&v| T::of(normalize_pixel(v) as f64)));
        t2.extend(p.t2.data.iter().map(|&v| T::of(normalize_pixel(v) as f64)));
        labels.extend_from_slice(&p.label);
    }
    let shape = [pairs.len(), 3, h, w];
    Ok(Batch {
        t1: Tensor::new(&shape, t1)?,
        t2: Tensor::new(&shape, t2)?,
        labels,
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
    })
}

fn tally(cc: ConfusionCounts, mask: &ChangeMask, labels: &[u8]) -> Result<ConfusionCounts> {
    update_confusion(cc, &mask.values, labels)
}

/// Eval-mode loss and confusion counts over `source`.
pub fn evaluate<T: Scalar, S: PairSource + ?Sized>(
    model: &ChangeDetector<T>,
    source: &S,
    batch_size: usize,
) -> Result<(f64, ConfusionCounts)> {
    let _guard = no_grad();
    let mut cc = ConfusionCounts::default();
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let pairs: Vec<SamplePair> = chunk.iter().map(|&i| source.get(i)).collect::<Result<_>>()?;
        let batch = make_batch::<T>(&pairs)?;
        let pred = model.forward(&Var::constant(batch.t1), &Var::constant(batch.t2), Mode::Eval)?;
        let loss = cross_entropy_from_probs(&pred.probs, &batch.labels)?;
        loss_sum += loss.data()[0].as_f64() * batch.labels.len() as f64;
        pixels += batch.labels.len();
        cc = tally(cc, &pred.mask()?, &batch.labels)?;
    }
    Ok((loss_sum / pixels.max(1) as f64, cc))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_f1: f64,
    pub val_f1: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\ttrain_f1\tval_f1";
}

/// Tab-separated, fixed precision; matches [`EpochRecord::HEADER`].
impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_f1, self.val_f1
        )
    }
}

/// Everything `fit` produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub best: Snapshot,
}

impl TrainOutcome {
    pub fn render_log(&self) -> String {
        let mut s = String::from(EpochRecord::HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }
}

/// Trains `model` in place and keeps the snapshot with the best val F1
/// (the first one on ties). `on_epoch` sees each record as it completes.
pub fn fit<T: Scalar, A: PairSource + ?Sized, B: PairSource + ?Sized>(
    model: &ChangeDetector<T>,
    train: &A,
    val: &B,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training and validation splits must be non-empty"));
    }
    let params = model.params();
    let mut sgd = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let aug = if cfg.augment { AugmentConfig::default() } else { AugmentConfig::disabled() };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Snapshot)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        let order = shuffled_order(train.len(), &mut rng);
        let mut cc = ConfusionCounts::default();
        let (mut loss_sum, mut pixels) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| train.get(i).map(|p| augment(&p, &aug, &mut rng)))
                .collect::<Result<_>>()?;
            let batch = make_batch::<T>(&pairs)?;
            let pred = model.forward(&Var::constant(batch.t1), &Var::constant(batch.t2), Mode::Train)?;
            let loss = cross_entropy_from_probs(&pred.probs, &batch.labels)?;
            let value = loss.data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    batch: b,
                    loss: value,
                    samples: batch.ids.join(","),
                });
            }
            backward(&loss)?;
            sgd.step(&params, lr)?;
            loss_sum += value * batch.labels.len() as f64;
            pixels += batch.labels.len();
            cc = tally(cc, &pred.mask()?, &batch.labels)?;
        }
        let train_f1 = compute_metrics(&cc)?.f1;
        let (_, val_cc) = evaluate(model, val, cfg.batch_size)?;
        let val_f1 = compute_metrics(&val_cc)?.f1;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / pixels as f64,
            train_f1,
            val_f1,
        };
        on_epoch(&record);
        log.push(record);
        if best.as_ref().is_none_or(|(_, f, _)| val_f1 > *f) {
            best = Some((epoch + 1, val_f1, Snapshot::capture(model)));
        }
    }
    let (best_epoch, best_val_f1, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_f1,
        best,
    })
}
