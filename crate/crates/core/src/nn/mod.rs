//! Network building blocks: the gated spatial activation (xUnit), dense and
//! x-dense layers, transition layers, and their parameter accounting.
//!
//! Blocks are plain specs. Each one declares the named parameters it needs
//! ([`Decls`]) and runs its forward pass against a [`BlockCtx`], which maps
//! those names to graph variables and owns the batch-norm running state.

mod dense;
mod transition;
mod xunit;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use dense::{DenseBlockSpec, DenseLayerSpec};
pub use transition::TransitionSpec;
pub use xunit::{Gate, XUnitSpec, XUNIT_KERNEL};

/// What a learnable tensor is, which decides initialization, weight decay and
/// whether flatness probing perturbs it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    LinearWeight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn is_decayed(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight { .. } | ParamKind::LinearWeight { .. }
        )
    }

    pub fn is_conv_filter(self) -> bool {
        matches!(self, ParamKind::ConvWeight { .. })
    }

    pub fn code(self) -> &'static str {
        match self {
            ParamKind::ConvWeight { .. } => "conv",
            ParamKind::LinearWeight { .. } => "linear",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "gamma",
            ParamKind::BnBeta => "beta",
        }
    }

    /// Initial value: He-normal weights (variance 2/fan_in), unit gamma, zero beta and bias.
    pub fn init<T: Scalar>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            ParamKind::ConvWeight { fan_in } | ParamKind::LinearWeight { fan_in } => {
                Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
            }
            ParamKind::BnGamma => Tensor::ones(shape),
            ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter and batch-norm declarations of a block or network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Decls {
    pub params: Vec<ParamDecl>,
    /// `(name, channels)` of each batch-norm layer; its affine parameters are
    /// `{name}.gamma` and `{name}.beta`.
    pub norms: Vec<(String, usize)>,
}

impl Decls {
    pub fn conv(&mut self, name: &str, spec: &ConvSpec) {
        self.params.push(ParamDecl {
            name: format!("{name}.weight"),
            shape: spec.weight_shape().to_vec(),
            kind: ParamKind::ConvWeight {
                fan_in: spec.fan_in(),
            },
        });
        if spec.has_bias {
            self.params.push(ParamDecl {
                name: format!("{name}.bias"),
                shape: vec![spec.out_channels],
                kind: ParamKind::Bias,
            });
        }
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) {
        self.params.push(ParamDecl {
            name: format!("{name}.weight"),
            shape: vec![out_features, in_features],
            kind: ParamKind::LinearWeight {
                fan_in: in_features,
            },
        });
        self.params.push(ParamDecl {
            name: format!("{name}.bias"),
            shape: vec![out_features],
            kind: ParamKind::Bias,
        });
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.push(ParamDecl {
            name: format!("{name}.gamma"),
            shape: vec![channels],
            kind: ParamKind::BnGamma,
        });
        self.params.push(ParamDecl {
            name: format!("{name}.beta"),
            shape: vec![channels],
            kind: ParamKind::BnBeta,
        });
        self.norms.push((name.to_string(), channels));
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(ParamDecl::numel).sum()
    }
}

/// How to count the parameters of an xUnit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CountMode {
    /// Depthwise 9x9 weights plus one bias per channel: `82k` per xUnit.
    Compact,
    /// Every stored learnable scalar of the implemented design.
    Full,
}

pub trait ParamCount {
    fn param_count(&self, mode: CountMode) -> usize;
}

/// Parameters and batch-norm state visible to a block's forward pass.
pub struct BlockCtx<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub vars: &'a HashMap<String, Var>,
    pub norms: &'a mut IndexMap<String, BatchNormState<T>>,
    /// Dropout rate and the stream it draws from; `None` disables dropout.
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<T: Scalar> BlockCtx<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unbound parameter `{name}`")))
    }

    pub fn conv(&mut self, name: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = if spec.has_bias {
            Some(self.var(&format!("{name}.bias"))?)
        } else {
            None
        };
        let y = self.graph.conv2d(x, w, b, spec)?;
        self.maybe_dropout(y)
    }

    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let state = self
            .norms
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no batch-norm state `{name}`")))?;
        self.graph.batch_norm(x, gamma, beta, state)
    }

    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        self.graph.linear(x, w, Some(b))
    }

    fn maybe_dropout(&mut self, y: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((rate, rng)) if *rate > 0.0 => self.graph.dropout(y, *rate, &mut **rng),
            _ => Ok(y),
        }
    }
}

/// Binds declared parameters into a fresh graph and prepares batch-norm
/// states, for exercising a single block in isolation.
pub struct StandaloneBlock<T> {
    pub values: IndexMap<String, Tensor<T>>,
    pub norms: IndexMap<String, BatchNormState<T>>,
}

impl<T: Scalar> StandaloneBlock<T> {
    pub fn init(decls: &Decls, rng: &mut impl Rng) -> Self {
        let values = decls
            .params
            .iter()
            .map(|d| (d.name.clone(), d.kind.init(&d.shape, rng)))
            .collect();
        let norms = decls
            .norms
            .iter()
            .map(|(n, c)| (n.clone(), BatchNormState::new(*c)))
            .collect();
        Self { values, norms }
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> HashMap<String, Var> {
        self.values
            .iter()
            .map(|(n, t)| (n.clone(), graph.param(t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests;
