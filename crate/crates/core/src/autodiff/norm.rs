use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics and hyper-parameters of one batch normalization layer.
///
/// The affine `gamma`/`beta` are ordinary graph parameters and live in the
/// model's parameter store; this holds everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
    channels: usize,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Running mean 0 and running variance 1, the usual starting point.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
            ..Self::uninitialized(channels)
        }
    }

    /// No running statistics yet; evaluation mode refuses to run until a
    /// training pass (or an explicit assignment) fills them.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            running_mean: None,
            running_var: None,
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
            mode: Mode::Train,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::shape(format!(
                "running stats for {} channels",
                self.channels
            )));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        self.running_mean = Some(mean);
        self.running_var = Some(var);
        Ok(())
    }
}

/// Forward result plus what the backward pass needs.
pub(crate) struct BnForward<T> {
    pub out: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<BnForward<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c != state.channels || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm over {c} channels with state for {} (gamma {:?}, beta {:?})",
            state.channels,
            gamma.shape(),
            beta.shape()
        )));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = T::lit(state.epsilon);
    let (mean, var) = match state.mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::invalid(
                    "batch norm in train mode needs at least 2 values per channel",
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_count = T::one() / T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    s += x.data()[base..base + plane].iter().copied().sum();
                }
                let m = s * inv_count;
                let mut v = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    v += x.data()[base..base + plane]
                        .iter()
                        .map(|&e| (e - m) * (e - m))
                        .sum();
                }
                mean[ch] = m;
                var[ch] = v * inv_count;
            }
            let mom = T::lit(state.momentum);
            let unbias = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            let rm = state.running_mean.get_or_insert_with(|| vec![T::zero(); c]);
            let rv = state.running_var.get_or_insert_with(|| vec![T::one(); c]);
            for ch in 0..c {
                rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
                rv[ch] = (T::one() - mom) * rv[ch] + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => match (&state.running_mean, &state.running_var) {
            (Some(m), Some(v)) => (m.clone(), v.clone()),
            _ => {
                return Err(Error::invalid(
                    "batch norm in eval mode with uninitialized running statistics",
                ))
            }
        },
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok(BnForward {
        out: Tensor::new(x.shape(), out)?,
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Scalar>(
    dout: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dout.dims4()?;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += dout.data()[i] * xhat.data()[i];
                dbeta[ch] += dout.data()[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dout.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let g = gamma.data()[ch];
            let is = inv_std[ch];
            for i in base..base + plane {
                dx[i] = if train {
                    // dxhat = dout * gamma; sums of dxhat and dxhat*xhat are gamma*dbeta, gamma*dgamma
                    g * is * (dout.data()[i] - (dbeta[ch] + xhat.data()[i] * dgamma[ch]) / count)
                } else {
                    g * is * dout.data()[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(dout.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}
