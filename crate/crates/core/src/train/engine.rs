use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::metrics::{psnr, top1_error};
use super::{LrSchedule, Optimizer, TrainRunConfig};
use crate::autodiff::{Graph, LossKind, Mode};
use crate::data::{add_awgn, bicubic_rescale, AugmentPolicy, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Entry, Model, Task};
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};

// stream tags keeping the random draws of different purposes apart
const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_VALIDATION: u64 = 5;
const TAG_HOLDOUT: u64 = 6;

/// Images per forward pass when evaluating.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    /// Classification error (%) or PSNR (dB); `NaN` on epochs without validation.
    pub val_metric: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_metric,lr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let val = if r.val_metric.is_nan() {
                String::new()
            } else {
                r.val_metric.to_string()
            };
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, val, r.lr);
        }
        s
    }
}

/// Splits off the last `fraction` of a seeded shuffle as a validation set.
pub fn holdout_split(
    samples: &[ImageSample],
    fraction: f64,
    seed: u64,
) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut stream(seed, &[TAG_HOLDOUT]));
    let n_val = ((samples.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let (train, val) = idx.split_at(samples.len() - n_val);
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect();
    (pick(train), pick(val))
}

/// Network input and regression/class target for one sample.
struct Pair<T> {
    input: Tensor<T>,
    target: Tensor<T>,
}

fn to_t<T: Scalar>(x: &Tensor<f32>) -> Tensor<T> {
    x.cast()
}

fn label_of(s: &ImageSample, classes: usize) -> Result<usize> {
    s.label.filter(|&l| l < classes).ok_or_else(|| {
        Error::Data(format!(
            "classification sample with label {:?} (need < {classes})",
            s.label
        ))
    })
}

/// Low-resolution input of an SR sample, synthesized by bicubic downscaling when absent.
fn low_res(s: &ImageSample, scale: usize) -> Result<Tensor<f32>> {
    match &s.degraded {
        Some(d) => Ok(d.clone()),
        None => bicubic_rescale(&s.pixels, 1, scale),
    }
}

/// Deterministic input/target for evaluation: no augmentation, fixed noise per sample index.
fn eval_pair<T: Scalar>(
    task: Task,
    s: &ImageSample,
    index: usize,
    sigma: f64,
    seed: u64,
    policy: Option<&AugmentPolicy>,
) -> Result<Pair<T>> {
    Ok(match task {
        Task::Classification { num_classes } => {
            let x = match policy.and_then(|p| p.normalize.as_ref()) {
                Some(stats) => stats.normalize(&s.pixels)?,
                None => s.pixels.clone(),
            };
            Pair {
                input: to_t(&x),
                target: Tensor::scalar(T::lit(label_of(s, num_classes)? as f64)),
            }
        }
        Task::Denoising => {
            let noisy = match &s.degraded {
                Some(d) => d.clone(),
                None => add_awgn(
                    &s.pixels,
                    sigma,
                    &mut stream(seed, &[TAG_VALIDATION, index as u64]),
                ),
            };
            Pair {
                input: to_t(&noisy),
                target: to_t(&s.pixels),
            }
        }
        Task::SuperResolution { scale } => Pair {
            input: to_t(&low_res(s, scale)?),
            target: to_t(&s.pixels),
        },
    })
}

fn loss_value<T: Scalar>(
    g: &mut Graph<T>,
    kind: LossKind,
    pred: crate::autodiff::Var,
    target: &Tensor<T>,
) -> Result<f64> {
    let l = g.loss(kind, pred, target)?;
    Ok(g.value(l).data()[0].as_f64())
}

/// Consecutive runs of same-shaped pairs, at most `max` long.
fn shape_runs<T: Scalar>(pairs: &[Pair<T>], max: usize) -> Vec<std::ops::Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        let split = i == pairs.len()
            || i - start == max
            || pairs[i].input.shape() != pairs[start].input.shape()
            || pairs[i].target.shape() != pairs[start].target.shape();
        if split {
            runs.push(start..i);
            start = i;
        }
    }
    runs
}

fn stack_field<T: Scalar>(
    pairs: &[Pair<T>],
    f: impl Fn(&Pair<T>) -> &Tensor<T>,
) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = pairs.iter().map(|p| f(p).clone()).collect();
    Tensor::stack(&items)
}

fn class_targets<T: Scalar>(pairs: &[Pair<T>]) -> Result<Tensor<T>> {
    Tensor::new(
        &[pairs.len()],
        pairs.iter().map(|p| p.target.data()[0]).collect(),
    )
}

/// Fixed evaluation batches of (input, loss target): class indices, the noise
/// map for residual denoising, or the high-resolution image. Noise is drawn
/// per sample index from `seed`, so the batches are reproducible.
pub fn loss_batches<T: Scalar>(
    task: Task,
    samples: &[ImageSample],
    sigma: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Data(
            "need at least one sample and a positive batch size".into(),
        ));
    }
    let pairs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| eval_pair::<T>(task, s, i, sigma, seed, None))
        .collect::<Result<Vec<_>>>()?;
    shape_runs(&pairs, batch_size)
        .into_iter()
        .map(|run| {
            let chunk = &pairs[run];
            let x = stack_field(chunk, |p| &p.input)?;
            let t = match task {
                Task::Classification { .. } => class_targets(chunk)?,
                Task::Denoising => x.sub(&stack_field(chunk, |p| &p.target)?)?,
                Task::SuperResolution { .. } => stack_field(chunk, |p| &p.target)?,
            };
            Ok((x, t))
        })
        .collect()
}

/// Evaluation loss and metric of `model` (which must be in eval mode) on `samples`.
pub fn evaluate_with_loss<T: Scalar>(
    model: &Model<T>,
    samples: &[ImageSample],
    loss: LossKind,
    sigma: f64,
    seed: u64,
    policy: Option<&AugmentPolicy>,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let task = model.config().task;
    let pairs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| eval_pair::<T>(task, s, i, sigma, seed, policy))
        .collect::<Result<Vec<_>>>()?;
    let (mut loss_sum, mut metric_sum, mut wrong_pct_sum) = (0.0, 0.0, 0.0);
    for run in shape_runs(&pairs, EVAL_BATCH) {
        let chunk = &pairs[run.clone()];
        let x = stack_field(chunk, |p| &p.input)?;
        let out = model.predict(&x)?;
        let n = chunk.len() as f64;
        let mut g = Graph::new();
        let o = g.input(out.clone());
        match task {
            Task::Classification { .. } => {
                let t = class_targets(chunk)?;
                loss_sum += loss_value(&mut g, LossKind::SoftmaxCe, o, &t)? * n;
                let labels: Vec<usize> = t.data().iter().map(|v| v.as_f64() as usize).collect();
                wrong_pct_sum += top1_error(&out, &labels)? * n;
            }
            Task::Denoising => {
                let clean = stack_field(chunk, |p| &p.target)?;
                let noise = x.sub(&clean)?;
                loss_sum += loss_value(&mut g, loss, o, &noise)? * n;
                let est = x.sub(&out)?;
                for i in 0..chunk.len() {
                    metric_sum += psnr(&est.batch_item(i)?, &clean.batch_item(i)?, 1.0, 0, false)?;
                }
            }
            Task::SuperResolution { .. } => {
                let hr = stack_field(chunk, |p| &p.target)?;
                loss_sum += loss_value(&mut g, loss, o, &hr)? * n;
                for i in 0..chunk.len() {
                    metric_sum += psnr(&out.batch_item(i)?, &hr.batch_item(i)?, 1.0, 4, true)?;
                }
            }
        }
    }
    let n = samples.len() as f64;
    let metric = match task {
        Task::Classification { .. } => wrong_pct_sum / n,
        _ => metric_sum / n,
    };
    Ok((loss_sum / n, metric))
}

/// Top-1 error (%), denoised PSNR (full frame) or SR luma PSNR (4-pixel border
/// crop), averaged over `samples`. Denoising inputs are the samples' degraded
/// images, or noise at `sigma` drawn from `seed` when absent.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[ImageSample],
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let loss = match model.config().task {
        Task::Classification { .. } => LossKind::SoftmaxCe,
        Task::Denoising => LossKind::Mse,
        Task::SuperResolution { .. } => LossKind::Mae,
    };
    Ok(evaluate_with_loss(model, samples, loss, sigma, seed, None)?.1)
}

/// Drives epochs of minibatch training for one model.
pub struct Trainer<'m, T> {
    model: &'m mut Model<T>,
    run: TrainRunConfig,
    policy: Option<AugmentPolicy>,
    optimizer: Optimizer<T>,
    schedule: LrSchedule,
    epoch: usize,
    history: History,
    checkpoint: Option<PathBuf>,
    extra_state: Vec<Entry>,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    pub fn new(model: &'m mut Model<T>, run: TrainRunConfig) -> Result<Self> {
        run.validate()?;
        let task = model.config().task;
        let loss_ok = match task {
            Task::Classification { .. } => run.loss == LossKind::SoftmaxCe,
            _ => run.loss != LossKind::SoftmaxCe,
        };
        if !loss_ok {
            return Err(Error::config(format!(
                "loss {:?} does not fit the {} task",
                run.loss,
                task.name()
            )));
        }
        let policy = match (run.augment, task) {
            (false, _) => None,
            // size-agnostic default; CIFAR runs install the full policy via `with_policy`
            (true, Task::Classification { .. }) => Some(AugmentPolicy {
                hflip: Some(0.5),
                ..AugmentPolicy::default()
            }),
            (true, _) => Some(AugmentPolicy::restoration()),
        };
        let schedule = run.build_schedule();
        let optimizer =
            Optimizer::new(run.optimizer, schedule.initial_lr(run.lr), run.weight_decay);
        Ok(Self {
            model,
            run,
            policy,
            optimizer,
            schedule,
            epoch: 0,
            history: History::default(),
            checkpoint: None,
            extra_state: Vec::new(),
        })
    }

    /// Replaces the augmentation policy chosen from the run configuration.
    pub fn with_policy(mut self, policy: Option<AugmentPolicy>) -> Self {
        self.policy = policy;
        self
    }

    /// Writes checkpoints (model, optimizer and schedule state) to `path`.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    /// Entries copied into the state section of every checkpoint.
    pub fn with_extra_state(mut self, entries: Vec<Entry>) -> Self {
        self.extra_state = entries;
        self
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr
    }

    /// Training input and target for sample `index` in `epoch`.
    fn train_pair(&self, s: &ImageSample, index: usize) -> Result<Pair<T>> {
        let task = self.model.config().task;
        let seed = self.run.seed;
        let key = [self.epoch as u64, index as u64];
        let mut aug_rng = stream(seed, &[TAG_AUGMENT, key[0], key[1]]);
        let geometric =
            |x: &Tensor<f32>, plan: Option<&crate::data::Plan>| -> Result<Tensor<f32>> {
                match (&self.policy, plan) {
                    (Some(p), Some(plan)) => p.apply(x, plan),
                    _ => Ok(x.clone()),
                }
            };
        Ok(match task {
            Task::Classification { num_classes } => {
                let label = label_of(s, num_classes)?;
                let x = match &self.policy {
                    Some(p) => p.augment(&s.pixels, &mut aug_rng)?,
                    None => s.pixels.clone(),
                };
                Pair {
                    input: to_t(&x),
                    target: Tensor::scalar(T::lit(label as f64)),
                }
            }
            Task::Denoising => {
                let (_, h, w) = s.dims();
                let plan = self.policy.as_ref().map(|p| p.draw(h, w, &mut aug_rng));
                let clean = geometric(&s.pixels, plan.as_ref())?;
                let noisy = add_awgn(
                    &clean,
                    self.run.sigma,
                    &mut stream(seed, &[TAG_NOISE, key[0], key[1]]),
                );
                let noise = noisy.sub(&clean)?;
                Pair {
                    input: to_t(&noisy),
                    target: to_t(&noise),
                }
            }
            Task::SuperResolution { scale } => {
                let (_, h, w) = s.dims();
                let plan = self.policy.as_ref().map(|p| p.draw(h, w, &mut aug_rng));
                let lr = geometric(&low_res(s, scale)?, plan.as_ref())?;
                let hr = geometric(&s.pixels, plan.as_ref())?;
                Pair {
                    input: to_t(&lr),
                    target: to_t(&hr),
                }
            }
        })
    }

    fn train_batch(&mut self, pairs: &[Pair<T>], batch_index: usize) -> Result<f64> {
        let x = stack_field(pairs, |p| &p.input)?;
        let target = match self.model.config().task {
            Task::Classification { .. } => class_targets(pairs)?,
            _ => stack_field(pairs, |p| &p.target)?,
        };
        let mut g = Graph::new();
        let b = self.model.bind(&mut g);
        let xv = g.input(x);
        let mut drop_rng = stream(
            self.run.seed,
            &[TAG_DROPOUT, self.epoch as u64, batch_index as u64],
        );
        let out = self.model.forward(&mut g, &b, xv, Some(&mut drop_rng))?;
        let loss = g.loss(self.run.loss, out.output, &target)?;
        let value = g.value(loss).data()[0].as_f64();
        g.backward(loss)?;
        let grads: Vec<Option<&Tensor<T>>> = b.ordered.iter().map(|&v| g.grad(v)).collect();
        self.optimizer.step(self.model, &grads)?;
        Ok(value)
    }

    /// Runs one epoch (shuffle, batches, optional validation, schedule step).
    pub fn run_epoch(&mut self, train: &[ImageSample], val: &[ImageSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let snapshot = self.model.clone();
        match self.epoch_inner(train, val) {
            Ok(r) => Ok(r),
            Err(Error::NonFinite(reason)) => {
                // keep the last good weights in memory; the checkpoint file is left untouched
                *self.model = snapshot;
                Err(Error::Divergence {
                    epoch: self.epoch + 1,
                    reason,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn epoch_inner(&mut self, train: &[ImageSample], val: &[ImageSample]) -> Result<EpochRecord> {
        self.model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(
            self.run.seed,
            &[TAG_SHUFFLE, self.epoch as u64],
        ));
        let lr = self.optimizer.lr;
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(self.run.batch_size).enumerate() {
            let pairs = chunk
                .iter()
                .map(|&i| self.train_pair(&train[i], i))
                .collect::<Result<Vec<_>>>()?;
            for run in shape_runs(&pairs, self.run.batch_size) {
                let n = run.len();
                let l = self.train_batch(&pairs[run], bi)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                loss_sum += l * n as f64;
                count += n;
            }
        }
        let done = self.epoch + 1;
        let validate = !val.is_empty()
            && (done.is_multiple_of(self.run.eval_every) || done == self.run.epochs);
        let (val_loss, val_metric) = if validate {
            self.model.set_mode(Mode::Eval);
            let r = evaluate_with_loss(
                self.model,
                val,
                self.run.loss,
                self.run.sigma,
                self.run.seed,
                self.policy.as_ref(),
            );
            self.model.set_mode(Mode::Train);
            r?
        } else {
            (f64::NAN, f64::NAN)
        };
        let train_loss = loss_sum / count as f64;
        // plateau decisions need a validation loss; fall back to the training loss
        let monitored = if val_loss.is_nan() {
            train_loss
        } else {
            val_loss
        };
        self.optimizer.lr = self
            .schedule
            .next_lr(self.run.lr, lr, self.epoch, monitored);
        self.epoch = done;
        let record = EpochRecord {
            epoch: done,
            train_loss,
            val_metric,
            val_loss,
            lr,
        };
        self.history.records.push(record);
        Ok(record)
    }

    /// Trains up to the configured epoch count, checkpointing on schedule.
    pub fn fit(
        &mut self,
        train: &[ImageSample],
        val: &[ImageSample],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<History> {
        while self.epoch < self.run.epochs {
            let r = self.run_epoch(train, val)?;
            on_epoch(&r);
            let every = self.run.checkpoint_every;
            if self.epoch == self.run.epochs || (every > 0 && self.epoch.is_multiple_of(every)) {
                if let Some(path) = &self.checkpoint {
                    self.save(path)?;
                }
            }
        }
        Ok(self.history.clone())
    }

    pub fn checkpoint_state(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(self.model);
        let names: Vec<String> = self.model.params().keys().cloned().collect();
        self.optimizer.save_state(&mut ck, &names);
        self.schedule.save_state(&mut ck);
        ck.put_state(Entry::u64s("train.epoch", &[self.epoch as u64]));
        ck.put_state(Entry::text("train.history", &self.history.to_csv()));
        ck.put_state(Entry::text("train.config", &self.run.to_kv()));
        for e in &self.extra_state {
            ck.put_state(e.clone());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        self.checkpoint_state().write(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores optimizer, schedule, epoch counter and history from a checkpoint
    /// written by [`Trainer::save`]; the model weights must already be loaded.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let names: Vec<String> = self.model.params().keys().cloned().collect();
        self.optimizer.load_state(ck, &names)?;
        self.schedule.load_state(ck)?;
        self.epoch = ck
            .state_entry("train.epoch")
            .ok_or_else(|| Error::Checkpoint("missing `train.epoch`".into()))?
            .as_u64s()?
            .first()
            .copied()
            .unwrap_or(0) as usize;
        if let Some(h) = ck.state_entry("train.history") {
            self.history = parse_history(h.as_text()?)?;
        }
        Ok(())
    }
}

fn parse_history(csv: &str) -> Result<History> {
    let mut records = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| -> Result<f64> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse()
                .map_err(|_| Error::Checkpoint(format!("bad history field `{s}`")))
        };
        if f.len() != 4 {
            return Err(Error::Checkpoint(format!("bad history line `{line}`")));
        }
        records.push(EpochRecord {
            epoch: num(f[0])? as usize,
            train_loss: num(f[1])?,
            val_metric: num(f[2])?,
            val_loss: f64::NAN,
            lr: num(f[3])?,
        });
    }
    Ok(History { records })
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[ImageSample],
    val: &[ImageSample],
    run: &TrainRunConfig,
) -> Result<History> {
    Trainer::new(model, run.clone())?.fit(train, val, |_| {})
}
