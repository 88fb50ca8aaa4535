use std::fmt::Write as _;

use super::{LrSchedule, OptimizerKind, Plateau};
use crate::autodiff::LossKind;
use crate::error::{Error, Result};
use crate::model::config::{parse_bool, parse_num};
use crate::model::Task;

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleKind {
    Constant,
    Plateau { factor: f64, patience: usize },
    Milestones { fractions: Vec<f64>, factor: f64 },
}

/// Everything about a training run except the network and the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Noise level on the 0-255 scale (denoising only).
    pub sigma: f64,
    pub augment: bool,
    /// Validate every this many epochs (and always after the last).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs; 0 only at the end.
    pub checkpoint_every: usize,
    /// Share of the training data held out when no validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainRunConfig {
    /// CIFAR recipe: 200 epochs of 128, Nesterov SGD at 0.1 with weight
    /// decay 5e-4, halved on a validation-loss plateau.
    pub fn classification() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            loss: LossKind::SoftmaxCe,
            optimizer: OptimizerKind::SgdNesterov { momentum: 0.9 },
            lr: 0.1,
            weight_decay: 5e-4,
            schedule: ScheduleKind::Plateau {
                factor: 2.0,
                patience: 10,
            },
            sigma: 0.0,
            augment: true,
            eval_every: 1,
            checkpoint_every: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    /// Denoising recipe: 5000 epochs of 32 at sigma 50, Adam at 1e-3 divided
    /// by 5 at 10, 25, 75 and 90 percent of training.
    pub fn denoising() -> Self {
        Self {
            epochs: 5000,
            batch_size: 32,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::ADAM,
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: ScheduleKind::Milestones {
                fractions: vec![0.1, 0.25, 0.75, 0.9],
                factor: 5.0,
            },
            sigma: 50.0,
            augment: true,
            eval_every: 10,
            checkpoint_every: 100,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    /// Super-resolution recipe: 6000 epochs of 16, Adam at 1e-4 cut tenfold
    /// halfway, L1 loss.
    pub fn super_resolution() -> Self {
        Self {
            epochs: 6000,
            batch_size: 16,
            loss: LossKind::Mae,
            lr: 1e-4,
            schedule: ScheduleKind::Milestones {
                fractions: vec![0.5],
                factor: 10.0,
            },
            sigma: 0.0,
            ..Self::denoising()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification { .. } => Self::classification(),
            Task::Denoising => Self::denoising(),
            Task::SuperResolution { .. } => Self::super_resolution(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "epochs, batch size and eval cadence must be positive",
            ));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.sigma < 0.0 {
            return Err(Error::config(
                "lr must be positive; weight decay and sigma non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must be in [0, 1)"));
        }
        self.build_schedule().validate()
    }

    pub fn build_schedule(&self) -> LrSchedule {
        match &self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::Plateau { factor, patience } => {
                let mut p = Plateau::new(self.lr);
                p.factor = *factor;
                p.patience = *patience;
                LrSchedule::Plateau(p)
            }
            ScheduleKind::Milestones { fractions, factor } => LrSchedule::Milestones {
                fractions: fractions.clone(),
                factor: *factor,
                total_epochs: self.epochs,
            },
        }
    }

    /// Applies one `train.`-prefixed (or bare) setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.strip_prefix("train.").unwrap_or(key);
        let value = value.trim();
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "sigma" => self.sigma = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "loss" => {
                self.loss = match value {
                    "mse" => LossKind::Mse,
                    "mae" | "l1" => LossKind::Mae,
                    "ce" | "cross_entropy" => LossKind::SoftmaxCe,
                    other => return Err(Error::config(format!("unknown loss `{other}`"))),
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::SgdNesterov { momentum: 0.9 },
                    "adam" => OptimizerKind::ADAM,
                    other => return Err(Error::config(format!("unknown optimizer `{other}`"))),
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::SgdNesterov { momentum } => *momentum = parse_num(key, value)?,
                _ => return Err(Error::config("`momentum` applies to sgd only")),
            },
            "schedule" => {
                self.schedule = match value {
                    "constant" => ScheduleKind::Constant,
                    "plateau" => ScheduleKind::Plateau {
                        factor: 2.0,
                        patience: 10,
                    },
                    "milestones" => ScheduleKind::Milestones {
                        fractions: vec![0.5],
                        factor: 10.0,
                    },
                    other => return Err(Error::config(format!("unknown schedule `{other}`"))),
                }
            }
            "factor" => match &mut self.schedule {
                ScheduleKind::Plateau { factor, .. } | ScheduleKind::Milestones { factor, .. } => {
                    *factor = parse_num(key, value)?
                }
                ScheduleKind::Constant => {
                    return Err(Error::config(
                        "`factor` needs a plateau or milestone schedule",
                    ))
                }
            },
            "patience" => match &mut self.schedule {
                ScheduleKind::Plateau { patience, .. } => *patience = parse_num(key, value)?,
                _ => return Err(Error::config("`patience` needs a plateau schedule")),
            },
            "milestones" => match &mut self.schedule {
                ScheduleKind::Milestones { fractions, .. } => {
                    *fractions = value
                        .split(',')
                        .map(|f| parse_num(key, f.trim()))
                        .collect::<Result<Vec<f64>>>()?
                }
                _ => return Err(Error::config("`milestones` needs a milestone schedule")),
            },
            other => return Err(Error::config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        key.starts_with("train.")
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let loss = match self.loss {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::SoftmaxCe => "ce",
        };
        let _ = writeln!(s, "train.epochs = {}", self.epochs);
        let _ = writeln!(s, "train.batch = {}", self.batch_size);
        let _ = writeln!(s, "train.loss = {loss}");
        let _ = writeln!(s, "train.optimizer = {}", self.optimizer.name());
        if let OptimizerKind::SgdNesterov { momentum } = self.optimizer {
            let _ = writeln!(s, "train.momentum = {momentum}");
        }
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.weight_decay = {}", self.weight_decay);
        match &self.schedule {
            ScheduleKind::Constant => {
                let _ = writeln!(s, "train.schedule = constant");
            }
            ScheduleKind::Plateau { factor, patience } => {
                let _ = writeln!(s, "train.schedule = plateau\ntrain.factor = {factor}\ntrain.patience = {patience}");
            }
            ScheduleKind::Milestones { fractions, factor } => {
                let f: Vec<String> = fractions.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(
                    s,
                    "train.schedule = milestones\ntrain.milestones = {}\ntrain.factor = {factor}",
                    f.join(",")
                );
            }
        }
        let _ = writeln!(s, "train.sigma = {}", self.sigma);
        let _ = writeln!(s, "train.augment = {}", self.augment);
        let _ = writeln!(s, "train.eval_every = {}", self.eval_every);
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "train.val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_kv;

    #[test]
    fn recipes() {
        let c = TrainRunConfig::classification();
        assert_eq!(
            (c.epochs, c.batch_size, c.lr, c.weight_decay),
            (200, 128, 0.1, 5e-4)
        );
        let d = TrainRunConfig::denoising();
        assert_eq!((d.epochs, d.batch_size, d.sigma), (5000, 32, 50.0));
        let s = TrainRunConfig::super_resolution();
        assert_eq!((s.epochs, s.batch_size, s.loss), (6000, 16, LossKind::Mae));
        for r in [c, d, s] {
            r.validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip() {
        for r in [
            TrainRunConfig::classification(),
            TrainRunConfig::denoising(),
            TrainRunConfig::super_resolution(),
        ] {
            let mut back = TrainRunConfig::classification();
            for (k, v) in parse_kv(&r.to_kv()).unwrap() {
                back.set(&k, &v).unwrap();
            }
            assert_eq!(back, r);
        }
    }

    #[test]
    fn rejects_bad_settings() {
        let mut r = TrainRunConfig::denoising();
        assert!(r.set("momentum", "0.5").is_err());
        assert!(r.set("train.bogus", "1").is_err());
        r.set("milestones", "0.5,0.4").unwrap();
        assert!(r.validate().is_err());
        r.set("milestones", "0.2,0.4").unwrap();
        r.set("lr", "0").unwrap();
        assert!(r.validate().is_err());
    }
}
