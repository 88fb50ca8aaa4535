//! CIFAR-10 binary batches: records of one label byte followed by the
//! 32x32 R, G and B planes (row-major), 3073 bytes each.

use std::path::Path;

use super::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const STATS_FILE: &str = "channel_stats.txt";

pub fn decode_cifar10(bytes: &[u8]) -> Result<Vec<ImageSample>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Data(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::Data(format!("record {i}: label {label} > 9")));
            }
            let px = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(ImageSample::new(Tensor::new(&[3, SIDE, SIDE], px)?)?.with_label(label))
        })
        .collect()
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_cifar10(&bytes)
}

/// Training batches and the test batch of an extracted `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        train.extend(load_cifar10(dir.join(f))?);
    }
    Ok((train, load_cifar10(dir.join(TEST_FILE))?))
}

/// 8-bit quantization used by every encoder: clamp to `[0, 1]`, scale, round.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_cifar10(samples: &[ImageSample]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * RECORD_BYTES);
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != (3, SIDE, SIDE) {
            return Err(Error::Data(format!(
                "sample {i}: CIFAR-10 records are 3x32x32, got {:?}",
                s.dims()
            )));
        }
        let label = s.label.filter(|&l| l < NUM_CLASSES).ok_or_else(|| {
            Error::Data(format!(
                "sample {i}: CIFAR-10 records need a label below 10, got {:?}",
                s.label
            ))
        })?;
        out.push(label as u8);
        out.extend(s.pixels.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn compute(samples: &[ImageSample]) -> Result<Self> {
        let c = samples
            .first()
            .ok_or_else(|| Error::Data("no samples for channel statistics".into()))?
            .dims()
            .0;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for s in samples {
            let (sc, h, w) = s.dims();
            if sc != c {
                return Err(Error::Data("mixed channel counts".into()));
            }
            for (ch, plane) in s.pixels.data().chunks(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += h * w;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt().max(1e-6) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    /// Reads `channel_stats.txt` from `dir`, computing and writing it on first use.
    pub fn cached(dir: impl AsRef<Path>, samples: &[ImageSample]) -> Result<Self> {
        let path = dir.as_ref().join(STATS_FILE);
        if let Ok(text) = std::fs::read_to_string(&path) {
            return Self::parse(&text);
        }
        let stats = Self::compute(samples)?;
        std::fs::write(&path, stats.to_text())?;
        Ok(stats)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f32]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!("mean = {}\nstd = {}\n", join(&self.mean), join(&self.std))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for (k, v) in crate::model::parse_kv(text)? {
            let vals = v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f32>()
                        .map_err(|_| Error::Data(format!("bad channel statistic `{x}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            match k.as_str() {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                other => return Err(Error::Data(format!("unknown channel statistic `{other}`"))),
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() && std.iter().all(|&s| s > 0.0) => {
                Ok(Self { mean, std })
            }
            _ => Err(Error::Data(
                "channel statistics need matching positive `mean` and `std` lists".into(),
            )),
        }
    }

    pub fn normalize(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = x.shape()[0];
        if x.rank() != 3 || c != self.mean.len() {
            return Err(Error::Shape(format!(
                "{} channel statistics for image {:?}",
                self.mean.len(),
                x.shape()
            )));
        }
        let plane = x.numel() / c;
        Ok(Tensor::from_fn(x.shape(), |i| {
            let ch = i / plane;
            (x.data()[i] - self.mean[ch]) / self.std[ch]
        }))
    }
}
