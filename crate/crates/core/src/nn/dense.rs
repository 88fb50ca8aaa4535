use super::{BlockCtx, CountMode, Decls, ParamCount, XUnitSpec};
use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `BN-ReLU-Conv1x1-BN-ReLU-Conv3x3`, optionally followed by an xUnit, whose
/// `k` new maps are concatenated onto the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DenseLayerSpec {
    pub in_channels: usize,
    pub growth_rate: usize,
    pub bottleneck_channels: usize,
    /// `Some` makes this an x-dense layer.
    pub xunit: Option<XUnitSpec>,
    pub with_bn: bool,
}

impl DenseLayerSpec {
    /// Plain dense layer with the usual `4k` bottleneck.
    pub fn new(in_channels: usize, growth_rate: usize) -> Self {
        Self {
            in_channels,
            growth_rate,
            bottleneck_channels: 4 * growth_rate,
            xunit: None,
            with_bn: true,
        }
    }

    pub fn with_xunit(self, xunit: XUnitSpec) -> Self {
        Self {
            xunit: Some(xunit),
            ..self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.growth_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.growth_rate == 0 {
            return Err(Error::config(
                "dense layer needs positive input channels and growth rate",
            ));
        }
        if self.bottleneck_channels < self.growth_rate {
            return Err(Error::config(format!(
                "bottleneck {} narrower than growth rate {}",
                self.bottleneck_channels, self.growth_rate
            )));
        }
        if let Some(x) = &self.xunit {
            x.validate()?;
            if x.channels != self.growth_rate {
                return Err(Error::config("x-dense xUnit must span the k new maps"));
            }
        }
        Ok(())
    }

    fn bottleneck(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.bottleneck_channels, 1, false)
    }

    fn expand(&self) -> ConvSpec {
        ConvSpec::same(self.bottleneck_channels, self.growth_rate, 3, false)
    }

    pub fn declare(&self, prefix: &str, decls: &mut Decls) {
        if self.with_bn {
            decls.batch_norm(&format!("{prefix}.bn1"), self.in_channels);
        }
        decls.conv(&format!("{prefix}.conv1"), &self.bottleneck());
        if self.with_bn {
            decls.batch_norm(&format!("{prefix}.bn2"), self.bottleneck_channels);
        }
        decls.conv(&format!("{prefix}.conv2"), &self.expand());
        if let Some(x) = &self.xunit {
            x.declare(&format!("{prefix}.xunit"), decls);
        }
    }

    /// The `k` new feature maps, before concatenation.
    pub fn new_maps<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        self.validate()?;
        let c = ctx.graph.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "dense layer expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let mut z = x;
        if self.with_bn {
            z = ctx.batch_norm(&format!("{prefix}.bn1"), z)?;
        }
        z = ctx.graph.relu(z)?;
        z = ctx.conv(&format!("{prefix}.conv1"), z, &self.bottleneck())?;
        if self.with_bn {
            z = ctx.batch_norm(&format!("{prefix}.bn2"), z)?;
        }
        z = ctx.graph.relu(z)?;
        z = ctx.conv(&format!("{prefix}.conv2"), z, &self.expand())?;
        if let Some(xu) = &self.xunit {
            z = xu.forward(ctx, &format!("{prefix}.xunit"), z)?;
        }
        Ok(z)
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let new = self.new_maps(ctx, prefix, x)?;
        ctx.graph.concat_channels(&[x, new])
    }
}

impl ParamCount for DenseLayerSpec {
    fn param_count(&self, mode: CountMode) -> usize {
        let (m, b, k) = (self.in_channels, self.bottleneck_channels, self.growth_rate);
        let norms = if self.with_bn { 2 * m + 2 * b } else { 0 };
        norms + m * b + b * k * 9 + self.xunit.map_or(0, |x| x.param_count(mode))
    }
}

/// `n` dense layers sharing a growth rate; layer `i` sees `m + i*k` channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DenseBlockSpec {
    pub layers: Vec<DenseLayerSpec>,
}

impl DenseBlockSpec {
    pub fn new(in_channels: usize, n_layers: usize, template: DenseLayerSpec) -> Self {
        let layers = (0..n_layers)
            .map(|i| DenseLayerSpec {
                in_channels: in_channels + i * template.growth_rate,
                ..template
            })
            .collect();
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    pub fn declare(&self, prefix: &str, decls: &mut Decls) {
        for (i, l) in self.layers.iter().enumerate() {
            l.declare(&format!("{prefix}.layer{i}"), decls);
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut BlockCtx<'_, T>,
        prefix: &str,
        mut x: Var,
    ) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, &format!("{prefix}.layer{i}"), x)?;
        }
        Ok(x)
    }
}

impl ParamCount for DenseBlockSpec {
    fn param_count(&self, mode: CountMode) -> usize {
        self.layers.iter().map(|l| l.param_count(mode)).sum()
    }
}
