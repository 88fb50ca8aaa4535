//! Declarative network description and its flat `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::Gate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Classification {
        num_classes: usize,
    },
    /// Residual denoiser: the network predicts the noise.
    Denoising,
    SuperResolution {
        scale: usize,
    },
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Denoising => "denoising",
            Task::SuperResolution { .. } => "super_resolution",
        }
    }
}

/// Input stem ahead of the first dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Stem {
    #[default]
    Conv3x3,
    /// 7x7 stride-2 convolution, for ImageNet-style inputs.
    Conv7x7Stride2,
}

impl Stem {
    fn name(self) -> &'static str {
        match self {
            Stem::Conv3x3 => "conv3x3",
            Stem::Conv7x7Stride2 => "conv7x7s2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub task: Task,
    /// Image channels at the input (and output, for restoration).
    pub channels: usize,
    /// Dense layers per block, e.g. `[12, 12, 12]`.
    pub block_config: Vec<usize>,
    pub growth_rate: usize,
    pub reduction_rate: f64,
    pub initial_channels: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    /// DxNet when set, DenseNet otherwise.
    pub with_xunit: bool,
    pub gate: Gate,
    /// The 1x1 convolution at the head of each xUnit branch.
    pub xunit_pointwise: bool,
    pub with_bn: bool,
    pub with_pool: bool,
    pub dropout_rate: f64,
    pub stem: Stem,
}

impl NetConfig {
    /// CIFAR-style classifier: 3x3 stem with `2k` maps, pooling transitions.
    pub fn classifier(block_config: &[usize], growth_rate: usize, with_xunit: bool) -> Self {
        Self {
            task: Task::Classification { num_classes: 10 },
            channels: 3,
            block_config: block_config.to_vec(),
            growth_rate,
            reduction_rate: 0.5,
            initial_channels: 2 * growth_rate,
            bottleneck_factor: 4,
            with_xunit,
            gate: Gate::Sigmoid,
            xunit_pointwise: true,
            with_bn: true,
            with_pool: true,
            dropout_rate: 0.0,
            stem: Stem::Conv3x3,
        }
    }

    /// Grayscale residual denoiser: no pooling, batch norm kept.
    pub fn denoiser(block_config: &[usize], growth_rate: usize, with_xunit: bool) -> Self {
        Self {
            task: Task::Denoising,
            channels: 1,
            with_pool: false,
            ..Self::classifier(block_config, growth_rate, with_xunit)
        }
    }

    /// RGB super-resolution net: no batch norm, no pooling.
    pub fn super_resolution(
        block_config: &[usize],
        growth_rate: usize,
        scale: usize,
        with_xunit: bool,
    ) -> Self {
        Self {
            task: Task::SuperResolution { scale },
            channels: 3,
            with_pool: false,
            with_bn: false,
            ..Self::classifier(block_config, growth_rate, with_xunit)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_config.is_empty() || self.block_config.contains(&0) {
            return Err(Error::config(
                "block configuration must list at least one non-empty block",
            ));
        }
        if self.growth_rate == 0 || self.channels == 0 {
            return Err(Error::config("growth rate and channels must be positive"));
        }
        if self.initial_channels < self.growth_rate {
            return Err(Error::config(format!(
                "initial_channels {} below growth rate {}",
                self.initial_channels, self.growth_rate
            )));
        }
        if self.bottleneck_factor == 0 {
            return Err(Error::config("bottleneck factor must be at least 1"));
        }
        if !(self.reduction_rate > 0.0 && self.reduction_rate <= 1.0) {
            return Err(Error::config(format!(
                "reduction rate {} outside (0, 1]",
                self.reduction_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        match self.task {
            Task::Classification { num_classes } if num_classes < 2 => {
                return Err(Error::config("classification needs at least two classes"))
            }
            Task::Denoising if self.with_pool => {
                return Err(Error::config(
                    "denoising nets keep the spatial size: pool must be off",
                ))
            }
            Task::SuperResolution { scale } => {
                if scale != 2 && scale != 4 {
                    return Err(Error::config(format!(
                        "super-resolution scale {scale} not in {{2, 4}}"
                    )));
                }
                if self.with_pool || self.with_bn {
                    return Err(Error::config(
                        "super-resolution nets use neither pooling nor batch norm",
                    ));
                }
            }
            _ => {}
        }
        if self.stem == Stem::Conv7x7Stride2 && !matches!(self.task, Task::Classification { .. }) {
            return Err(Error::config(
                "the strided stem only applies to classification",
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` setting; keys may carry a `net.` prefix.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.strip_prefix("net.").unwrap_or(key);
        let value = value.trim();
        match key {
            "task" => {
                self.task = match value {
                    "classification" => Task::Classification {
                        num_classes: self.num_classes().unwrap_or(10),
                    },
                    "denoising" => Task::Denoising,
                    "super_resolution" | "sr" => Task::SuperResolution {
                        scale: self.scale().unwrap_or(4),
                    },
                    other => return Err(Error::config(format!("unknown task `{other}`"))),
                }
            }
            "classes" => {
                let n = parse_num(key, value)?;
                match &mut self.task {
                    Task::Classification { num_classes } => *num_classes = n,
                    _ => return Err(Error::config("`classes` only applies to classification")),
                }
            }
            "scale" => {
                let s = parse_num(key, value)?;
                match &mut self.task {
                    Task::SuperResolution { scale } => *scale = s,
                    _ => return Err(Error::config("`scale` only applies to super_resolution")),
                }
            }
            "blocks" => {
                self.block_config = value
                    .split(['-', ','])
                    .map(|p| parse_num(key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "growth" => self.growth_rate = parse_num(key, value)?,
            "reduction" => self.reduction_rate = parse_num(key, value)?,
            "initial_channels" => self.initial_channels = parse_num(key, value)?,
            "bottleneck" => self.bottleneck_factor = parse_num(key, value)?,
            "xunit" => self.with_xunit = parse_bool(key, value)?,
            "gate" => self.gate = Gate::parse(value)?,
            "pointwise" => self.xunit_pointwise = parse_bool(key, value)?,
            "bn" => self.with_bn = parse_bool(key, value)?,
            "pool" => self.with_pool = parse_bool(key, value)?,
            "dropout" => self.dropout_rate = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "stem" => {
                self.stem = match value {
                    "conv3x3" => Stem::Conv3x3,
                    "conv7x7s2" => Stem::Conv7x7Stride2,
                    other => return Err(Error::config(format!("unknown stem `{other}`"))),
                }
            }
            other => return Err(Error::config(format!("unknown network key `{other}`"))),
        }
        Ok(())
    }

    /// Whether `key` names a network setting.
    pub fn is_key(key: &str) -> bool {
        const KEYS: &[&str] = &[
            "task",
            "classes",
            "scale",
            "blocks",
            "growth",
            "reduction",
            "initial_channels",
            "bottleneck",
            "xunit",
            "gate",
            "pointwise",
            "bn",
            "pool",
            "dropout",
            "channels",
            "stem",
        ];
        KEYS.contains(&key.strip_prefix("net.").unwrap_or(key))
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.task {
            Task::Classification { num_classes } => Some(num_classes),
            _ => None,
        }
    }

    pub fn scale(&self) -> Option<usize> {
        match self.task {
            Task::SuperResolution { scale } => Some(scale),
            _ => None,
        }
    }

    /// Parses `key = value` lines (`#` starts a comment), starting from the
    /// classifier defaults. The `task` key, when present, is applied first.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg = Self::classifier(&[12, 12, 12], 12, true);
        if let Some((_, task)) = pairs
            .iter()
            .find(|(k, _)| k.strip_prefix("net.").unwrap_or(k) == "task")
        {
            cfg = match task.as_str() {
                "denoising" => Self::denoiser(&[4, 4, 4], 16, true),
                "super_resolution" | "sr" => Self::super_resolution(&[4, 6, 8], 16, 4, true),
                _ => cfg,
            };
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Canonical text form; `from_kv(to_kv())` reproduces the config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let blocks: Vec<String> = self.block_config.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "net.task = {}", self.task.name());
        match self.task {
            Task::Classification { num_classes } => {
                let _ = writeln!(s, "net.classes = {num_classes}");
            }
            Task::SuperResolution { scale } => {
                let _ = writeln!(s, "net.scale = {scale}");
            }
            Task::Denoising => {}
        }
        let _ = writeln!(s, "net.channels = {}", self.channels);
        let _ = writeln!(s, "net.blocks = {}", blocks.join("-"));
        let _ = writeln!(s, "net.growth = {}", self.growth_rate);
        let _ = writeln!(s, "net.reduction = {}", self.reduction_rate);
        let _ = writeln!(s, "net.initial_channels = {}", self.initial_channels);
        let _ = writeln!(s, "net.bottleneck = {}", self.bottleneck_factor);
        let _ = writeln!(s, "net.xunit = {}", self.with_xunit);
        let _ = writeln!(s, "net.gate = {}", self.gate.name());
        let _ = writeln!(s, "net.pointwise = {}", self.xunit_pointwise);
        let _ = writeln!(s, "net.bn = {}", self.with_bn);
        let _ = writeln!(s, "net.pool = {}", self.with_pool);
        let _ = writeln!(s, "net.dropout = {}", self.dropout_rate);
        let _ = writeln!(s, "net.stem = {}", self.stem.name());
        s
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                i + 1
            ))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [
            NetConfig::classifier(&[12, 12, 12], 12, true),
            NetConfig::denoiser(&[4, 6, 8], 16, false),
            NetConfig::super_resolution(&[4, 4, 4, 6, 8, 8, 8], 16, 2, true),
        ] {
            assert_eq!(NetConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        }
    }

    #[test]
    fn parses_documented_keys() {
        let cfg = NetConfig::from_kv(
            "# DxNet for CIFAR\ntask = classification\nblocks = 16-16-16\ngrowth = 12\nreduction = 0.5\n\
             initial_channels = 24\nxunit = false\ngate = gaussian\nbn = true\npool = true\ndropout = 0.2\nchannels = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.block_config, vec![16, 16, 16]);
        assert!(!cfg.with_xunit);
        assert_eq!(cfg.gate, Gate::Gaussian);
        assert_eq!(cfg.dropout_rate, 0.2);
        let sr =
            NetConfig::from_kv("task = super_resolution\nscale = 2\nblocks = 4,6,8\n").unwrap();
        assert_eq!(sr.scale(), Some(2));
        assert!(sr.validate().is_ok());
    }

    #[test]
    fn rejects_invalid_combinations() {
        let mut d = NetConfig::denoiser(&[4], 16, true);
        d.with_pool = true;
        assert!(d.validate().is_err());
        let mut sr = NetConfig::super_resolution(&[4], 16, 4, true);
        sr.set("scale", "3").unwrap();
        assert!(sr.validate().is_err());
        let mut c = NetConfig::classifier(&[], 12, true);
        assert!(c.validate().is_err());
        c.block_config = vec![2];
        c.initial_channels = 4;
        assert!(c.validate().is_err());
        assert!(NetConfig::from_kv("growth = twelve").is_err());
        assert!(NetConfig::from_kv("nonsense = 1").is_err());
        assert!(NetConfig::from_kv("no equals sign").is_err());
    }
}
