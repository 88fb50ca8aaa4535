use crate::error::{Error, Result};
use crate::model::{Checkpoint, Entry};

/// Halves (by default) the learning rate once the monitored loss has not
/// improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    pub min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            factor: 2.0,
            patience: 10,
            threshold: 1e-4,
            min_lr: 1e-4 * initial_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b * (1.0 - self.threshold) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.bad_epochs = 0;
                    return (lr / self.factor).max(self.min_lr);
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    Plateau(Plateau),
    /// Divide by `factor` once the epoch reaches each `fraction * total_epochs`.
    Milestones {
        fractions: Vec<f64>,
        factor: f64,
        total_epochs: usize,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Plateau(p) if p.factor > 1.0 && p.patience > 0 => Ok(()),
            LrSchedule::Plateau(_) => Err(Error::config(
                "plateau factor must exceed 1 and patience be positive",
            )),
            LrSchedule::Milestones {
                fractions, factor, ..
            } => {
                let increasing = fractions.windows(2).all(|w| w[0] < w[1]);
                let inside = fractions.iter().all(|f| *f > 0.0 && *f < 1.0);
                if *factor > 1.0 && increasing && inside {
                    Ok(())
                } else {
                    Err(Error::config(
                        "milestones need increasing fractions in (0, 1) and a factor above 1",
                    ))
                }
            }
        }
    }

    /// Learning rate for `epoch` (0-based) under a milestone schedule.
    pub fn milestone_lr(
        base_lr: f64,
        fractions: &[f64],
        factor: f64,
        total: usize,
        epoch: usize,
    ) -> f64 {
        let passed = fractions
            .iter()
            .filter(|f| epoch as f64 >= (*f * total as f64).round())
            .count();
        base_lr / factor.powi(passed as i32)
    }

    /// Learning rate of the first epoch.
    pub fn initial_lr(&self, base_lr: f64) -> f64 {
        match self {
            LrSchedule::Milestones {
                fractions,
                factor,
                total_epochs,
            } => Self::milestone_lr(base_lr, fractions, *factor, *total_epochs, 0),
            _ => base_lr,
        }
    }

    /// Learning rate for the epoch after `epoch`, given its validation loss.
    pub fn next_lr(&mut self, base_lr: f64, lr: f64, epoch: usize, val_loss: f64) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Plateau(p) => p.observe(val_loss, lr),
            LrSchedule::Milestones {
                fractions,
                factor,
                total_epochs,
            } => Self::milestone_lr(base_lr, fractions, *factor, *total_epochs, epoch + 1),
        }
    }

    pub fn save_state(&self, ck: &mut Checkpoint) {
        if let LrSchedule::Plateau(p) = self {
            ck.put_state(Entry::floats(
                "sched.best",
                &p.best.map_or(vec![], |b| vec![b]),
            ));
            ck.put_state(Entry::u64s("sched.bad_epochs", &[p.bad_epochs as u64]));
        }
    }

    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        if let LrSchedule::Plateau(p) = self {
            if let Some(e) = ck.state_entry("sched.best") {
                p.best = e.as_f64s()?.first().copied();
            }
            if let Some(e) = ck.state_entry("sched.bad_epochs") {
                p.bad_epochs = e.as_u64s()?.first().copied().unwrap_or(0) as usize;
            }
        }
        Ok(())
    }
}
