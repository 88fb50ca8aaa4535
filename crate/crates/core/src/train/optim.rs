use crate::error::{Error, Result};
use crate::model::{Checkpoint, Entry, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v <- mu v + g~; theta <- theta - lr (g~ + mu v)`.
    SgdNesterov { momentum: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Self::SgdNesterov { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

/// Optimizer with per-parameter moment buffers in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Added to the gradient as `wd * theta` for conv and linear weights only.
    pub weight_decay: f64,
    /// Momentum (SGD) or first moment (Adam).
    first: Vec<Vec<T>>,
    /// Adam second moment.
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads[i]` belongs to the i-th model parameter; every
    /// gradient is checked before any parameter changes.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if grads.len() != model.params().len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                model.params().len()
            )));
        }
        for ((name, p), g) in model.params().iter().zip(grads) {
            let g = g.ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}",
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}`; step aborted"
                )));
            }
        }
        if self.first.is_empty() {
            self.first = model
                .params()
                .values()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let lr = T::lit(self.lr);
        let wd = T::lit(self.weight_decay);
        let t = self.steps as i32;
        for (i, ((_, p), g)) in model.param_values_mut().zip(grads).enumerate() {
            let g = g.expect("checked above").data();
            let decay = p.kind.is_decayed() && self.weight_decay != 0.0;
            let theta = p.value.data_mut();
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::SgdNesterov { momentum } => {
                    let mu = T::lit(momentum);
                    for j in 0..theta.len() {
                        let gt = if decay { g[j] + wd * theta[j] } else { g[j] };
                        m[j] = mu * m[j] + gt;
                        theta[j] -= lr * (gt + mu * m[j]);
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let v = &mut self.second[i];
                    let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    for j in 0..theta.len() {
                        let gt = if decay { g[j] + wd * theta[j] } else { g[j] };
                        m[j] = b1 * m[j] + (T::one() - b1) * gt;
                        v[j] = b2 * v[j] + (T::one() - b2) * gt * gt;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        theta[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Stores lr, step count and moment buffers as `optim.*` state entries.
    pub fn save_state(&self, ck: &mut Checkpoint, param_names: &[String]) {
        ck.put_state(Entry::text("optim.kind", self.kind.name()));
        ck.put_state(Entry::floats("optim.lr", &[self.lr]));
        ck.put_state(Entry::u64s("optim.steps", &[self.steps]));
        for (name, buf) in param_names.iter().zip(&self.first) {
            ck.put_state(Entry::floats(format!("optim.m.{name}"), buf));
        }
        for (name, buf) in param_names.iter().zip(&self.second) {
            ck.put_state(Entry::floats(format!("optim.v.{name}"), buf));
        }
    }

    pub fn load_state(&mut self, ck: &Checkpoint, param_names: &[String]) -> Result<()> {
        let need = |n: &str| {
            ck.state_entry(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{n}`")))
        };
        let kind = need("optim.kind")?.as_text()?;
        if kind != self.kind.name() {
            return Err(Error::Checkpoint(format!(
                "checkpoint optimizer `{kind}`, run uses `{}`",
                self.kind.name()
            )));
        }
        self.lr = need("optim.lr")?
            .as_f64s()?
            .first()
            .copied()
            .unwrap_or(self.lr);
        self.steps = need("optim.steps")?
            .as_u64s()?
            .first()
            .copied()
            .unwrap_or(0);
        let read = |prefix: &str| -> Result<Vec<Vec<T>>> {
            if ck
                .state_entry(&format!("{prefix}.{}", param_names[0]))
                .is_none()
            {
                return Ok(Vec::new());
            }
            param_names
                .iter()
                .map(|n| {
                    Ok(need(&format!("{prefix}.{n}"))?
                        .as_f64s()?
                        .into_iter()
                        .map(T::lit)
                        .collect())
                })
                .collect()
        };
        self.first = read("optim.m")?;
        self.second = read("optim.v")?;
        Ok(())
    }
}
