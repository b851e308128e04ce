//! Training: momentum SGD with weight decay, a cosine-annealed learning
//! rate with warm restarts, shift/flip augmentation, and the epoch loop
//! that ties them to a network and datasets.
//!
//! Determinism contract: every random choice (shuffle order, augmentation
//! draws) comes from a counter-derived stream keyed by the run seed, the
//! stream's role, and the epoch, so a rerun with the same seed retraces
//! the run exactly — independent of wall-clock time or thread identity.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::checkpoint;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{NetworkConfig, ParamKind, StateEntry, SwGridNetwork};
use crate::rng::{stream_rng, ROLE_AUGMENT, ROLE_SHUFFLE};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate at the start of every cycle.
    pub lr_max: f64,
    /// Learning rate the cosine decays toward at a cycle's end.
    pub lr_min: f64,
    /// Momentum coefficient of the velocity update.
    pub momentum: f64,
    /// L2 penalty applied to convolution and linear weights only.
    pub weight_decay: f64,
    /// Records per optimizer step.
    pub batch_size: usize,
    /// Length of the first annealing cycle, in epochs.
    pub restart_period: usize,
    /// Factor by which each successive cycle is longer than the last.
    pub restart_mult: usize,
    /// Total epochs to run.
    pub epochs: usize,
    /// Seed for all run randomness (shuffling, augmentation).
    pub seed: u64,
    /// Whether to apply shift/flip augmentation to training batches.
    pub augment: bool,
    /// Zero-padding margin for the random shift, in pixels per side.
    pub augment_pad: usize,
    /// When set, the learning rate is re-evaluated every optimizer step
    /// (at fractional epoch positions) instead of once per epoch.
    pub anneal_per_iteration: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 0.2,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            restart_period: 10,
            restart_mult: 2,
            epochs: 630,
            seed: 1,
            augment: true,
            augment_pad: 4,
            anneal_per_iteration: false,
        }
    }
}

impl TrainConfig {
    /// Checks numeric ranges.
    pub fn validate(&self) -> Result<()> {
        if !self.lr_max.is_finite() || self.lr_max <= 0.0 {
            return Err(Error::Config(format!("lr_max must be finite and > 0, got {}", self.lr_max)));
        }
        if !self.lr_min.is_finite() || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min must satisfy 0 <= lr_min <= lr_max, got {}",
                self.lr_min
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.restart_period == 0 {
            return Err(Error::Config("restart_period must be at least 1 epoch".into()));
        }
        if self.restart_mult == 0 {
            return Err(Error::Config("restart_mult must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at continuous epoch position `t` under cosine annealing
/// with warm restarts: within each cycle the rate glides from `lr_max`
/// down to `lr_min` on a half-cosine, then jumps back to `lr_max` as the
/// next (`restart_mult` times longer) cycle begins.
pub fn annealed_lr(cfg: &TrainConfig, t: f64) -> f64 {
    let mut start = 0.0;
    let mut len = cfg.restart_period as f64;
    while t >= start + len {
        start += len;
        len *= cfg.restart_mult as f64;
    }
    let frac = (t - start) / len;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Epoch indices (counting completed epochs) at which an annealing cycle
/// finishes within the configured run — the natural points to snapshot
/// the network for later ensembling.
pub fn cycle_ends(cfg: &TrainConfig) -> Vec<usize> {
    let mut ends = Vec::new();
    let mut end = 0usize;
    let mut len = cfg.restart_period;
    while let Some(next) = end.checked_add(len) {
        if next > cfg.epochs {
            break;
        }
        ends.push(next);
        end = next;
        match len.checked_mul(cfg.restart_mult) {
            Some(l) => len = l,
            None => break,
        }
    }
    ends
}

struct Slot<S: Scalar> {
    tensor: Tensor<S>,
    decayed: bool,
    velocity: Vec<S>,
}

/// Momentum SGD over a fixed parameter list.
///
/// The update per scalar, with gradient `g`, velocity `v`, weight `w`:
///
/// ```text
/// g' = g + weight_decay * w      (decayed weights only)
/// v  = momentum * v + g'
/// w  = w - lr * v
/// ```
pub struct MomentumSgd<S: Scalar> {
    slots: Vec<Slot<S>>,
    momentum: f64,
    weight_decay: f64,
}

impl<S: Scalar> MomentumSgd<S> {
    /// Builds an optimizer over the trainable entries of `params`
    /// (buffers are skipped). Every entry must require gradients.
    pub fn new(params: &[StateEntry<S>], momentum: f64, weight_decay: f64) -> Result<Self> {
        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {weight_decay}")));
        }
        let mut slots = Vec::new();
        for entry in params {
            if entry.kind == ParamKind::Buffer {
                continue;
            }
            if !entry.tensor.requires_grad() {
                return Err(Error::Config(format!(
                    "parameter `{}` does not require gradients",
                    entry.name
                )));
            }
            slots.push(Slot {
                tensor: entry.tensor.clone(),
                decayed: entry.kind == ParamKind::DecayedWeight,
                velocity: vec![S::zero(); entry.tensor.numel()],
            });
        }
        if slots.is_empty() {
            return Err(Error::Config("optimizer needs at least one trainable parameter".into()));
        }
        Ok(MomentumSgd { slots, momentum, weight_decay })
    }

    /// Number of tensors being optimized.
    pub fn tracked(&self) -> usize {
        self.slots.len()
    }

    /// Clears the gradient accumulators of every tracked parameter.
    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.tensor.zero_grad();
        }
    }

    /// Applies one update with the given learning rate. Every tracked
    /// parameter must hold a gradient (i.e. `backward` ran since the last
    /// `zero_grads`).
    pub fn step(&mut self, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidInput(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let m = S::from_f64(self.momentum);
        let lr = S::from_f64(lr);
        for slot in &mut self.slots {
            let grad = slot.tensor.grad().ok_or_else(|| {
                Error::InvalidInput("optimizer step before any backward pass".into())
            })?;
            let wd = S::from_f64(if slot.decayed { self.weight_decay } else { 0.0 });
            let mut data = slot.tensor.data_mut();
            for ((w, v), g) in data.iter_mut().zip(&mut slot.velocity).zip(&grad) {
                *v = m * *v + (*g + wd * *w);
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

/// Writes into `dst` the image obtained by zero-padding `src` with `pad`
/// pixels per side, cropping a full-size window whose top-left corner sits
/// at `(dx, dy)` in the padded frame, and then mirroring horizontally when
/// `flip` is set. `dx` and `dy` range over `0..=2 * pad`; the center crop
/// `(pad, pad)` without flip reproduces `src` exactly.
pub fn shift_flip_image<S: Scalar>(
    src: &[S],
    channels: usize,
    size: usize,
    pad: usize,
    dx: usize,
    dy: usize,
    flip: bool,
    dst: &mut [S],
) {
    debug_assert_eq!(src.len(), channels * size * size);
    debug_assert_eq!(dst.len(), src.len());
    debug_assert!(dx <= 2 * pad && dy <= 2 * pad);
    let plane = size * size;
    for c in 0..channels {
        for y in 0..size {
            // Row index in the source, or out of range when the crop
            // reaches into the zero border.
            let src_y = (y + dy).wrapping_sub(pad);
            for x in 0..size {
                let x_window = if flip { size - 1 - x } else { x };
                let src_x = (x_window + dx).wrapping_sub(pad);
                dst[c * plane + y * size + x] = if src_y < size && src_x < size {
                    src[c * plane + src_y * size + src_x]
                } else {
                    S::zero()
                };
            }
        }
    }
}

/// Randomly shifts and flips every image of a batch in place. Each image
/// consumes exactly three draws from `rng` — horizontal offset, vertical
/// offset, flip — so the transformation sequence is a pure function of the
/// generator state.
pub fn augment_in_place<S: Scalar>(
    batch: &mut [S],
    images: usize,
    channels: usize,
    size: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let record = channels * size * size;
    if batch.len() != images * record {
        return Err(Error::InvalidInput(format!(
            "batch of {} values does not hold {images} images of {record}",
            batch.len()
        )));
    }
    let mut scratch = vec![S::zero(); record];
    for i in 0..images {
        let dx = rng.gen_range(0..=2 * pad);
        let dy = rng.gen_range(0..=2 * pad);
        let flip = rng.gen_bool(0.5);
        let image = &mut batch[i * record..(i + 1) * record];
        shift_flip_image(image, channels, size, pad, dx, dy, flip, &mut scratch);
        image.copy_from_slice(&scratch);
    }
    Ok(())
}

/// One epoch's worth of measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Zero-based epoch index.
    pub epoch: usize,
    /// Learning rate at the epoch's start.
    pub lr: f64,
    /// Mean training loss over the epoch's records.
    pub train_loss: f64,
    /// Fraction of training records classified correctly (during training,
    /// i.e. on the augmented batches as seen by the optimizer).
    pub train_acc: f64,
    /// Mean test loss in inference mode.
    pub test_loss: f64,
    /// Fraction of test records classified correctly.
    pub test_acc: f64,
    /// Wall-clock duration of the epoch (training plus evaluation).
    pub wall_seconds: f64,
}

/// Header of the metrics CSV written during a run.
pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc,wall_seconds";

impl MetricsRow {
    /// The row as one CSV line (no trailing newline). All fields except
    /// `wall_seconds` are exact decimal renderings, so reruns of a
    /// deterministic run produce byte-identical values there.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.test_loss,
            self.test_acc,
            self.wall_seconds
        )
    }
}

/// Files produced by [`TrainSession::run`].
pub struct RunArtifacts {
    /// Per-epoch measurements, in epoch order.
    pub rows: Vec<MetricsRow>,
    /// Snapshot checkpoints written at annealing-cycle boundaries.
    pub snapshots: Vec<PathBuf>,
    /// Checkpoint of the final network state.
    pub final_checkpoint: PathBuf,
}

fn check_geometry(config: &NetworkConfig, data: &Dataset) -> Result<()> {
    if data.channels() != config.input_channels
        || data.image_size() != config.image_size
        || data.classes() != config.classes
    {
        return Err(Error::InvalidInput(format!(
            "dataset geometry {}x{}x{} with {} classes does not match the network's {}x{}x{} with {}",
            data.channels(),
            data.image_size(),
            data.image_size(),
            data.classes(),
            config.input_channels,
            config.image_size,
            config.image_size,
            config.classes,
        )));
    }
    Ok(())
}

/// Index of the largest value in each row (first maximum wins ties).
fn argmax_rows<S: Scalar>(values: &[S], rows: usize, cols: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let mut best = 0;
        for (i, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

/// Drives training of one network.
pub struct TrainSession<'a, S: Scalar> {
    net: &'a SwGridNetwork<S>,
    cfg: TrainConfig,
    opt: MomentumSgd<S>,
    steps: usize,
}

impl<'a, S: Scalar> TrainSession<'a, S> {
    /// Validates the configuration and sets up the optimizer state.
    pub fn new(net: &'a SwGridNetwork<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = MomentumSgd::new(&net.parameters(), cfg.momentum, cfg.weight_decay)?;
        Ok(TrainSession { net, cfg, opt, steps: 0 })
    }

    /// The configuration this session runs under.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Runs one epoch of training and returns `(mean loss, accuracy)` over
    /// the records as the optimizer saw them. A non-finite batch loss
    /// aborts with a numeric error — the signature of a diverged run.
    pub fn run_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<(f64, f64)> {
        check_geometry(self.net.config(), data)?;
        self.net.set_training(true);
        let config = self.net.config();
        let (channels, size) = (config.input_channels, config.image_size);

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle = stream_rng(self.cfg.seed, ROLE_SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut augment = stream_rng(self.cfg.seed, ROLE_AUGMENT, epoch as u64);

        let batches = data.len().div_ceil(self.cfg.batch_size);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (index, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (mut pixels, labels) = data.batch::<S>(chunk)?;
            if self.cfg.augment {
                augment_in_place(
                    &mut pixels,
                    chunk.len(),
                    channels,
                    size,
                    self.cfg.augment_pad,
                    &mut augment,
                )?;
            }
            let x = Tensor::from_vec(&[chunk.len(), channels, size, size], pixels)?;
            let logits = self.net.forward(&x)?;
            {
                let values = logits.data();
                let predicted = argmax_rows(&values, chunk.len(), config.classes);
                correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
            }
            let loss = logits.softmax_cross_entropy(&labels)?;
            let loss_value = loss.item()?.to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {loss_value} at epoch {epoch}, batch {index}"
                )));
            }
            let t = if self.cfg.anneal_per_iteration {
                epoch as f64 + index as f64 / batches as f64
            } else {
                epoch as f64
            };
            self.opt.zero_grads();
            loss.backward()?;
            self.opt.step(annealed_lr(&self.cfg, t))?;
            self.steps += 1;
            loss_sum += loss_value * chunk.len() as f64;
        }
        Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
    }

    /// Runs the full configured schedule: every epoch trains, evaluates,
    /// appends a row to `metrics.csv` under `out_dir` (rewritten atomically
    /// each epoch, so a partial run still leaves a readable file), and
    /// snapshots the network at each annealing-cycle boundary. The final
    /// state is written as `final.ckpt`. `on_epoch` observes each row as
    /// it is produced.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        out_dir: &Path,
        mut on_epoch: impl FnMut(&MetricsRow),
    ) -> Result<RunArtifacts> {
        check_geometry(self.net.config(), train)?;
        check_geometry(self.net.config(), test)?;
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
        let ends = cycle_ends(&self.cfg);
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        let mut rows = Vec::with_capacity(self.cfg.epochs);
        let mut snapshots = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let started = Instant::now();
            let (train_loss, train_acc) = self.run_epoch(train, epoch)?;
            let (test_loss, test_acc) = evaluate(self.net, test, self.cfg.batch_size)?;
            let row = MetricsRow {
                epoch,
                lr: annealed_lr(&self.cfg, epoch as f64),
                train_loss,
                train_acc,
                test_loss,
                test_acc,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            csv.push_str(&row.csv_line());
            csv.push('\n');
            data::write_atomic(&out_dir.join("metrics.csv"), csv.as_bytes())?;
            if ends.contains(&(epoch + 1)) {
                let path = out_dir.join(format!("snapshot-epoch{:04}.ckpt", epoch + 1));
                checkpoint::save(self.net, &path)?;
                snapshots.push(path);
            }
            on_epoch(&row);
            rows.push(row);
        }
        let final_checkpoint = out_dir.join("final.ckpt");
        checkpoint::save(self.net, &final_checkpoint)?;
        Ok(RunArtifacts { rows, snapshots, final_checkpoint })
    }
}

/// Mean loss and accuracy of `net` on `data` in inference mode (batch
/// statistics frozen to the running estimates). Leaves the network in
/// inference mode.
pub fn evaluate<S: Scalar>(
    net: &SwGridNetwork<S>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    check_geometry(net.config(), data)?;
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    net.set_training(false);
    let config = net.config();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (pixels, labels) = data.batch::<S>(chunk)?;
        let x = Tensor::from_vec(&[chunk.len(), config.input_channels, config.image_size, config.image_size], pixels)?;
        let logits = net.forward(&x)?;
        {
            let values = logits.data();
            let predicted = argmax_rows(&values, chunk.len(), config.classes);
            correct += predicted.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let loss = logits.softmax_cross_entropy(&labels)?;
        loss_sum += loss.item()?.to_f64() * chunk.len() as f64;
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Mean softmax probability per record and class over several networks
/// (an ensemble of snapshots), as a row-major `records x classes` matrix.
/// Probabilities are formed and averaged in `f64` regardless of the
/// networks' scalar type, so each row sums to one up to rounding.
pub fn ensemble_probabilities<S: Scalar>(
    nets: &[&SwGridNetwork<S>],
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let first = *nets.first().ok_or_else(|| {
        Error::InvalidInput("ensemble prediction needs at least one network".into())
    })?;
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    for net in nets {
        check_geometry(net.config(), data)?;
        net.set_training(false);
    }
    let classes = first.config().classes;
    let mut probs = vec![0.0f64; data.len() * classes];
    let indices: Vec<usize> = (0..data.len()).collect();
    for net in nets {
        let config = net.config();
        for chunk in indices.chunks(batch_size) {
            let (pixels, _) = data.batch::<S>(chunk)?;
            let x = Tensor::from_vec(
                &[chunk.len(), config.input_channels, config.image_size, config.image_size],
                pixels,
            )?;
            let logits = net.forward(&x)?;
            let values = logits.data();
            for (row, &record) in chunk.iter().enumerate() {
                let row = &values[row * classes..(row + 1) * classes];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
                let mut exps = vec![0.0f64; classes];
                let mut sum = 0.0;
                for (e, &v) in exps.iter_mut().zip(row) {
                    *e = (v.to_f64() - max).exp();
                    sum += *e;
                }
                for (c, e) in exps.iter().enumerate() {
                    probs[record * classes + c] += e / sum;
                }
            }
        }
    }
    let scale = 1.0 / nets.len() as f64;
    for p in &mut probs {
        *p *= scale;
    }
    Ok(probs)
}

/// Predicted class per record from the ensemble's mean probabilities.
pub fn ensemble_predict<S: Scalar>(
    nets: &[&SwGridNetwork<S>],
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let classes = nets
        .first()
        .ok_or_else(|| Error::InvalidInput("ensemble prediction needs at least one network".into()))?
        .config()
        .classes;
    let probs = ensemble_probabilities(nets, data, batch_size)?;
    Ok(argmax_rows(&probs, data.len(), classes))
}

/// Fraction of records whose prediction matches the dataset label.
pub fn label_accuracy(predictions: &[usize], data: &Dataset) -> Result<f64> {
    if predictions.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} records",
            predictions.len(),
            data.len()
        )));
    }
    let correct = predictions.iter().enumerate().filter(|(i, &p)| p == data.label(*i)).count();
    Ok(correct as f64 / data.len() as f64)
}
