use super::{BlockCtx, CountMode, Decls, ParamCount};
use crate::autodiff::{Activation, ConvSpec, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Side length of the depthwise kernel inside every xUnit.
pub const XUNIT_KERNEL: usize = 9;

/// Elementwise map taking the branch output into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Gate {
    #[default]
    Sigmoid,
    /// `exp(-z^2)`, the gate of the original xUnit.
    Gaussian,
}

impl Gate {
    pub fn activation(self) -> Activation {
        match self {
            Gate::Sigmoid => Activation::Sigmoid,
            Gate::Gaussian => Activation::GaussianGate,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Gate::Sigmoid => "sigmoid",
            Gate::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Gate::Sigmoid),
            "gaussian" => Ok(Gate::Gaussian),
            other => Err(Error::config(format!(
                "unknown gate `{other}` (sigmoid|gaussian)"
            ))),
        }
    }
}

/// Learnable spatial activation: `y = x * gate(branch(x))`, where the branch is
/// `[conv1x1] -> [BN] -> ReLU -> depthwise 9x9 -> [BN]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct XUnitSpec {
    pub channels: usize,
    pub gate: Gate,
    /// Cross-channel 1x1 convolution at the branch input.
    pub use_pointwise: bool,
    pub with_bn: bool,
    pub depthwise_kernel: usize,
}

impl XUnitSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gate: Gate::Sigmoid,
            use_pointwise: true,
            with_bn: true,
            depthwise_kernel: XUNIT_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("xUnit needs at least one channel"));
        }
        if self.depthwise_kernel != XUNIT_KERNEL {
            return Err(Error::config(format!(
                "xUnit depthwise kernel must be {XUNIT_KERNEL}"
            )));
        }
        Ok(())
    }

    fn pointwise_conv(&self) -> ConvSpec {
        ConvSpec::same(self.channels, self.channels, 1, false)
    }

    fn depthwise_conv(&self) -> ConvSpec {
        ConvSpec::depthwise(self.channels, self.depthwise_kernel, true)
    }

    pub fn declare(&self, prefix: &str, decls: &mut Decls) {
        if self.use_pointwise {
            decls.conv(&format!("{prefix}.pw"), &self.pointwise_conv());
        }
        if self.with_bn {
            decls.batch_norm(&format!("{prefix}.bn1"), self.channels);
        }
        decls.conv(&format!("{prefix}.dw"), &self.depthwise_conv());
        if self.with_bn {
            decls.batch_norm(&format!("{prefix}.bn2"), self.channels);
        }
    }

    /// Output together with the gate tensor.
    pub fn forward_with_gate<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.validate()?;
        let c = ctx.graph.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(format!(
                "xUnit over {} channels got {c}",
                self.channels
            )));
        }
        let mut z = x;
        if self.use_pointwise {
            z = ctx.graph.conv2d(
                z,
                ctx.var(&format!("{prefix}.pw.weight"))?,
                None,
                &self.pointwise_conv(),
            )?;
        }
        if self.with_bn {
            z = ctx.batch_norm(&format!("{prefix}.bn1"), z)?;
        }
        z = ctx.graph.relu(z)?;
        let dw = self.depthwise_conv();
        z = ctx.graph.conv2d(
            z,
            ctx.var(&format!("{prefix}.dw.weight"))?,
            Some(ctx.var(&format!("{prefix}.dw.bias"))?),
            &dw,
        )?;
        if self.with_bn {
            z = ctx.batch_norm(&format!("{prefix}.bn2"), z)?;
        }
        let gate = ctx.graph.activation(z, self.gate.activation())?;
        let y = ctx.graph.hadamard(x, gate)?;
        Ok((y, gate))
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_gate(ctx, prefix, x)?.0)
    }
}

impl ParamCount for XUnitSpec {
    fn param_count(&self, mode: CountMode) -> usize {
        let k = self.channels;
        let kk = self.depthwise_kernel * self.depthwise_kernel;
        match mode {
            CountMode::Compact => k * kk + k,
            CountMode::Full => {
                let pointwise = if self.use_pointwise { k * k } else { 0 };
                let norms = if self.with_bn { 4 * k } else { 0 };
                pointwise + k * kk + k + norms
            }
        }
    }
}
