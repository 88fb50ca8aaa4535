use super::{BlockCtx, CountMode, Decls, ParamCount};
use crate::autodiff::{ConvSpec, Pool, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `[BN] -> Conv1x1 (floor(r*m) maps) -> [AvgPool 2x2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionSpec {
    pub in_channels: usize,
    pub reduction_rate: f64,
    pub with_pool: bool,
    pub with_bn: bool,
}

impl TransitionSpec {
    pub fn new(in_channels: usize, reduction_rate: f64) -> Self {
        Self {
            in_channels,
            reduction_rate,
            with_pool: true,
            with_bn: true,
        }
    }

    pub fn out_channels(&self) -> usize {
        (self.reduction_rate * self.in_channels as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reduction_rate > 0.0 && self.reduction_rate <= 1.0) {
            return Err(Error::config(format!(
                "reduction rate {} outside (0, 1]",
                self.reduction_rate
            )));
        }
        if self.out_channels() < 1 {
            return Err(Error::config(format!(
                "transition from {} channels at r={} leaves no output channels",
                self.in_channels, self.reduction_rate
            )));
        }
        Ok(())
    }

    fn conv(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.out_channels(), 1, !self.with_bn)
    }

    pub fn declare(&self, prefix: &str, decls: &mut Decls) {
        if self.with_bn {
            decls.batch_norm(&format!("{prefix}.bn"), self.in_channels);
        }
        decls.conv(&format!("{prefix}.conv"), &self.conv());
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        self.validate()?;
        let (_, c, h, w) = ctx.graph.value(x).dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "transition expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut z = x;
        if self.with_bn {
            z = ctx.batch_norm(&format!("{prefix}.bn"), z)?;
        }
        z = ctx.conv(&format!("{prefix}.conv"), z, &self.conv())?;
        if self.with_pool {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!(
                    "pooling transition needs even spatial dims, got {h}x{w}"
                )));
            }
            z = ctx.graph.pool(z, Pool::Avg2x2)?;
        }
        Ok(z)
    }
}

impl ParamCount for TransitionSpec {
    fn param_count(&self, _mode: CountMode) -> usize {
        let (m, o) = (self.in_channels, self.out_channels());
        let norm = if self.with_bn { 2 * m } else { 0 };
        let bias = if self.with_bn { 0 } else { o };
        norm + m * o + bias
    }
}
