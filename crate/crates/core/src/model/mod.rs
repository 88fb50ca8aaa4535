//! Whole networks: DxNet / DenseNet classifiers, residual denoisers and
//! super-resolution nets assembled from [`NetConfig`], plus checkpoints.

pub mod checkpoint;
pub(crate) mod config;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormState, ConvSpec, Graph, Mode, Pool, Var};
use crate::data::resize::bicubic_resize;
use crate::error::{Error, Result};
use crate::nn::{
    BlockCtx, CountMode, Decls, DenseBlockSpec, DenseLayerSpec, ParamCount, ParamKind,
    TransitionSpec, XUnitSpec,
};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{Checkpoint, Entry, EntryData, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_kv, NetConfig, Stem, Task};

/// One step of the network topology.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Stem {
        name: String,
        spec: ConvSpec,
    },
    XUnit {
        name: String,
        spec: XUnitSpec,
    },
    Block {
        name: String,
        spec: DenseBlockSpec,
    },
    Transition {
        name: String,
        spec: TransitionSpec,
    },
    /// `[BN] -> ReLU -> global average -> linear`.
    Classifier {
        bn: Option<String>,
        fc: String,
        features: usize,
        classes: usize,
    },
    /// `[BN] -> ReLU -> conv3x3`, predicting an image-sized map.
    ImageHead {
        bn: Option<String>,
        conv: String,
        spec: ConvSpec,
    },
    /// `ReLU`, then per step `conv3x3 -> pixel shuffle x2`, then `conv3x3` to image channels.
    Upsampler {
        steps: Vec<(String, ConvSpec)>,
        out: String,
        out_spec: ConvSpec,
    },
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Stem { name, .. }
            | Stage::XUnit { name, .. }
            | Stage::Block { name, .. }
            | Stage::Transition { name, .. } => name,
            Stage::Classifier { .. } => "head",
            Stage::ImageHead { .. } | Stage::Upsampler { .. } => "tail",
        }
    }

    fn declare(&self, d: &mut Decls) {
        match self {
            Stage::Stem { name, spec } => d.conv(name, spec),
            Stage::XUnit { name, spec } => spec.declare(name, d),
            Stage::Block { name, spec } => spec.declare(name, d),
            Stage::Transition { name, spec } => spec.declare(name, d),
            Stage::Classifier {
                bn,
                fc,
                features,
                classes,
            } => {
                if let Some(bn) = bn {
                    d.batch_norm(bn, *features);
                }
                d.linear(fc, *features, *classes);
            }
            Stage::ImageHead { bn, conv, spec } => {
                if let Some(bn) = bn {
                    d.batch_norm(bn, spec.in_channels);
                }
                d.conv(conv, spec);
            }
            Stage::Upsampler {
                steps,
                out,
                out_spec,
            } => {
                for (n, s) in steps {
                    d.conv(n, s);
                }
                d.conv(out, out_spec);
            }
        }
    }

    fn count(&self, mode: CountMode) -> usize {
        match self {
            Stage::XUnit { spec, .. } => spec.param_count(mode),
            Stage::Block { spec, .. } => spec.param_count(mode),
            Stage::Transition { spec, .. } => spec.param_count(mode),
            _ => {
                let mut d = Decls::default();
                self.declare(&mut d);
                d.scalar_count()
            }
        }
    }
}

/// Lays out the stages of the network described by `config`.
pub fn topology(config: &NetConfig) -> Result<Vec<Stage>> {
    config.validate()?;
    let k = config.growth_rate;
    let stem = match config.stem {
        config::Stem::Conv3x3 => {
            ConvSpec::same(config.channels, config.initial_channels, 3, !config.with_bn)
        }
        config::Stem::Conv7x7Stride2 => ConvSpec {
            stride: 2,
            ..ConvSpec::same(config.channels, config.initial_channels, 7, !config.with_bn)
        },
    };
    let xunit = |c: usize| XUnitSpec {
        gate: config.gate,
        use_pointwise: config.xunit_pointwise,
        with_bn: config.with_bn,
        ..XUnitSpec::new(c)
    };
    let mut stages = vec![Stage::Stem {
        name: "stem".into(),
        spec: stem,
    }];
    if config.with_xunit {
        stages.push(Stage::XUnit {
            name: "stem_xunit".into(),
            spec: xunit(config.initial_channels),
        });
    }
    let mut channels = config.initial_channels;
    let last = config.block_config.len() - 1;
    for (i, &n) in config.block_config.iter().enumerate() {
        let mut layer = DenseLayerSpec {
            bottleneck_channels: config.bottleneck_factor * k,
            with_bn: config.with_bn,
            ..DenseLayerSpec::new(channels, k)
        };
        if config.with_xunit {
            layer = layer.with_xunit(xunit(k));
        }
        let block = DenseBlockSpec::new(channels, n, layer);
        channels = block.out_channels();
        stages.push(Stage::Block {
            name: format!("block{i}"),
            spec: block,
        });
        if i < last {
            let t = TransitionSpec {
                with_pool: config.with_pool,
                with_bn: config.with_bn,
                ..TransitionSpec::new(channels, config.reduction_rate)
            };
            t.validate()?;
            channels = t.out_channels();
            stages.push(Stage::Transition {
                name: format!("trans{i}"),
                spec: t,
            });
        }
    }
    let head_bn = |n: &str| config.with_bn.then(|| n.to_string());
    stages.push(match config.task {
        Task::Classification { num_classes } => Stage::Classifier {
            bn: head_bn("head.bn"),
            fc: "head.fc".into(),
            features: channels,
            classes: num_classes,
        },
        Task::Denoising => Stage::ImageHead {
            bn: head_bn("tail.bn"),
            conv: "tail.conv".into(),
            spec: ConvSpec::same(channels, config.channels, 3, true),
        },
        Task::SuperResolution { scale } => {
            let feat = config.initial_channels;
            let mut steps = Vec::new();
            let mut c = channels;
            for i in 0..scale.trailing_zeros() {
                steps.push((
                    format!("tail.up{}", i + 1),
                    ConvSpec::same(c, 4 * feat, 3, true),
                ));
                c = feat;
            }
            Stage::Upsampler {
                steps,
                out: "tail.out".into(),
                out_spec: ConvSpec::same(feat, config.channels, 3, true),
            }
        }
    });
    Ok(stages)
}

/// Every learnable tensor and batch-norm layer of the network, in build order.
pub fn declarations(config: &NetConfig) -> Result<Decls> {
    let mut d = Decls::default();
    for s in topology(config)? {
        s.declare(&mut d);
    }
    Ok(d)
}

/// Learnable scalars per stage.
pub fn stage_param_counts(config: &NetConfig, mode: CountMode) -> Result<Vec<(String, usize)>> {
    Ok(topology(config)?
        .iter()
        .map(|s| (s.name().to_string(), s.count(mode)))
        .collect())
}

impl ParamCount for NetConfig {
    /// Panics on an invalid configuration; validate first.
    fn param_count(&self, mode: CountMode) -> usize {
        stage_param_counts(self, mode)
            .expect("invalid network configuration")
            .iter()
            .map(|(_, n)| n)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Graph variables of a model's parameters, in parameter order.
#[derive(Clone, Debug)]
pub struct Bindings {
    pub by_name: HashMap<String, Var>,
    pub ordered: Vec<Var>,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub output: Var,
    /// Classifier only: the activated maps entering global pooling.
    pub features: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: NetConfig,
    stages: Vec<Stage>,
    params: IndexMap<String, Param<T>>,
    norms: IndexMap<String, BatchNormState<T>>,
    mode: Mode,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a network; identical `(config, seed)` give identical weights.
    /// Random initialization. The output conv of a restoration net starts at
    /// zero, so an untrained denoiser returns its input and an untrained
    /// super-resolution net its bicubic skip.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::assemble(config, |d| d.kind.init(&d.shape, &mut rng))?;
        let out_conv = model.stages.iter().find_map(|s| match s {
            Stage::ImageHead { conv, .. } => Some(format!("{conv}.weight")),
            Stage::Upsampler { out, .. } => Some(format!("{out}.weight")),
            _ => None,
        });
        if let Some(name) = out_conv {
            let p = model
                .params
                .get_mut(&name)
                .expect("declared by the topology");
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(model)
    }

    /// Same topology with every parameter zeroed, to be filled from a checkpoint.
    pub(crate) fn skeleton(config: &NetConfig) -> Result<Self> {
        Self::assemble(config, |d| Tensor::zeros(&d.shape))
    }

    fn assemble(
        config: &NetConfig,
        mut init: impl FnMut(&crate::nn::ParamDecl) -> Tensor<T>,
    ) -> Result<Self> {
        let stages = topology(config)?;
        let mut d = Decls::default();
        stages.iter().for_each(|s| s.declare(&mut d));
        let mut params = IndexMap::new();
        for p in &d.params {
            if params
                .insert(
                    p.name.clone(),
                    Param {
                        value: init(p),
                        kind: p.kind,
                    },
                )
                .is_some()
            {
                return Err(Error::config(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
        }
        let norms = d
            .norms
            .iter()
            .map(|(n, c)| (n.clone(), BatchNormState::new(*c)))
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
            params,
            norms,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn params(&self) -> &IndexMap<String, Param<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Parameter values in order, for optimizers.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn norms(&self) -> &IndexMap<String, BatchNormState<T>> {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut IndexMap<String, BatchNormState<T>> {
        &mut self.norms
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.norms.values_mut().for_each(|s| s.mode = mode);
    }

    /// Registers the parameters as trainable graph leaves.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bindings {
        let mut by_name = HashMap::with_capacity(self.params.len());
        let mut ordered = Vec::with_capacity(self.params.len());
        for (n, p) in &self.params {
            let v = graph.param(p.value.clone());
            by_name.insert(n.clone(), v);
            ordered.push(v);
        }
        Bindings { by_name, ordered }
    }

    /// Forward pass on `graph`. In training mode this updates the running
    /// batch-norm statistics; `dropout` supplies the mask stream.
    pub fn forward(
        &mut self,
        graph: &mut Graph<T>,
        bindings: &Bindings,
        x: Var,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Outputs> {
        let rate = self.config.dropout_rate;
        let dropout = dropout
            .filter(|_| rate > 0.0 && self.mode == Mode::Train)
            .map(|r| (rate, r));
        run(
            &self.config,
            &self.stages,
            &mut self.norms,
            graph,
            &bindings.by_name,
            x,
            dropout,
        )
    }

    /// Evaluates the network on `x` without touching the model state.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let xv = g.input(x.clone());
        let mut norms = self.norms.clone();
        let out = run(
            &self.config,
            &self.stages,
            &mut norms,
            &mut g,
            &vars,
            xv,
            None,
        )?;
        Ok(g.value(out.output).clone())
    }

    /// Classifier logits together with the feature maps entering global pooling.
    pub fn predict_with_features(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let xv = g.input(x.clone());
        let mut norms = self.norms.clone();
        let out = run(
            &self.config,
            &self.stages,
            &mut norms,
            &mut g,
            &vars,
            xv,
            None,
        )?;
        let f = out
            .features
            .ok_or_else(|| Error::invalid("feature maps exist only for classifiers"))?;
        Ok((g.value(out.output).clone(), g.value(f).clone()))
    }

    /// Clean estimate `y - f(y)` of a noisy batch.
    pub fn denoise(&self, noisy: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.task != Task::Denoising {
            return Err(Error::invalid("denoise needs a denoising network"));
        }
        noisy.sub(&self.predict(noisy)?)
    }

    fn constants(&self, g: &mut Graph<T>) -> HashMap<String, Var> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), g.input(p.value.clone())))
            .collect()
    }
}

fn run<T: Scalar>(
    config: &NetConfig,
    stages: &[Stage],
    norms: &mut IndexMap<String, BatchNormState<T>>,
    graph: &mut Graph<T>,
    vars: &HashMap<String, Var>,
    x: Var,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Outputs> {
    let (_, c, h, w) = graph.value(x).dims4()?;
    if c != config.channels {
        return Err(Error::shape(format!(
            "network expects {} input channels, got {c}",
            config.channels
        )));
    }
    let input = x;
    let mut z = x;
    let mut features = None;
    for stage in stages {
        // dropout follows the convolutions inside blocks and transitions only
        let drop = match stage {
            Stage::Block { .. } | Stage::Transition { .. } => {
                dropout.as_mut().map(|(r, g)| (*r, &mut **g))
            }
            _ => None,
        };
        let mut ctx = BlockCtx {
            graph: &mut *graph,
            vars,
            norms: &mut *norms,
            dropout: drop,
        };
        z = match stage {
            Stage::Stem { name, spec } => {
                let w = ctx.var(&format!("{name}.weight"))?;
                let b = if spec.has_bias {
                    Some(ctx.var(&format!("{name}.bias"))?)
                } else {
                    None
                };
                ctx.graph.conv2d(z, w, b, spec)?
            }
            Stage::XUnit { name, spec } => spec.forward(&mut ctx, name, z)?,
            Stage::Block { name, spec } => spec.forward(&mut ctx, name, z)?,
            Stage::Transition { name, spec } => spec.forward(&mut ctx, name, z)?,
            Stage::Classifier {
                bn,
                fc,
                features: f,
                ..
            } => {
                if let Some(bn) = bn {
                    z = ctx.batch_norm(bn, z)?;
                }
                z = ctx.graph.relu(z)?;
                features = Some(z);
                let n = ctx.graph.value(z).shape()[0];
                let pooled = ctx.graph.pool(z, Pool::GlobalAvg)?;
                let flat = ctx.graph.reshape(pooled, &[n, *f])?;
                ctx.linear(fc, flat)?
            }
            Stage::ImageHead { bn, conv, spec } => {
                if let Some(bn) = bn {
                    z = ctx.batch_norm(bn, z)?;
                }
                z = ctx.graph.relu(z)?;
                ctx.conv(conv, z, spec)?
            }
            Stage::Upsampler {
                steps,
                out,
                out_spec,
            } => {
                z = ctx.graph.relu(z)?;
                for (n, s) in steps {
                    z = ctx.conv(n, z, s)?;
                    z = ctx.graph.pixel_shuffle(z, 2)?;
                }
                z = ctx.conv(out, z, out_spec)?;
                let scale = config.scale().unwrap_or(1);
                let skip = bicubic_resize(graph.value(input), h * scale, w * scale)?;
                let skip = graph.input(skip);
                graph.add(z, skip)?
            }
        };
    }
    Ok(Outputs {
        output: z,
        features,
    })
}

#[cfg(test)]
mod tests;
