//! Images, datasets, degradations and augmentation.
//!
//! Pixels are `f32` in `[0, 1]`, laid out `(C, H, W)`. Restoration samples
//! carry the degraded counterpart next to the clean image.

mod augment;
pub mod cifar;
mod noise;
mod patches;
pub mod pnm;
pub mod resize;
mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{AugmentPolicy, Plan};
pub use cifar::{decode_cifar10, encode_cifar10, load_cifar10, ChannelStats};
pub use noise::{add_awgn, with_awgn};
pub use patches::extract_patches;
pub use pnm::{decode_pnm, encode_pnm, read_image, write_image};
pub use resize::{bicubic_rescale, bicubic_resize};
pub use synth::{synthetic_classification, synthetic_image};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// Clean image, `(C, H, W)`.
    pub pixels: Tensor<f32>,
    pub label: Option<usize>,
    /// Noisy or downscaled input paired with `pixels`.
    pub degraded: Option<Tensor<f32>>,
}

impl ImageSample {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::Shape(format!(
                "image must be (C, H, W), got {:?}",
                pixels.shape()
            )));
        }
        Ok(Self {
            pixels,
            label: None,
            degraded: None,
        })
    }

    pub fn with_label(self, label: usize) -> Self {
        Self {
            label: Some(label),
            ..self
        }
    }

    pub fn with_degraded(self, degraded: Tensor<f32>) -> Self {
        Self {
            degraded: Some(degraded),
            ..self
        }
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    /// The degraded image, or an error naming what is missing.
    pub fn degraded(&self) -> Result<&Tensor<f32>> {
        self.degraded
            .as_ref()
            .ok_or_else(|| Error::Data("sample has no degraded counterpart".into()))
    }
}

fn dims3(x: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected (C, H, W), got {:?}",
            x.shape()
        ))),
    }
}

/// `h x w` window whose top-left corner is `(top, left)`.
pub fn crop(x: &Tensor<f32>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (c, ih, iw) = dims3(x)?;
    if h == 0 || w == 0 || top + h > ih || left + w > iw {
        return Err(Error::Shape(format!(
            "crop {h}x{w} at ({top}, {left}) outside {ih}x{iw}"
        )));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in top..top + h {
            let row = (ch * ih + y) * iw;
            out.extend_from_slice(&d[row + left..row + left + w]);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Zero border of `pad` pixels on every side.
pub fn pad_zero(x: &Tensor<f32>, pad: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(x)?;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[(ch * h + y) * w..][..w];
            out[(ch * ph + y + pad) * pw + pad..][..w].copy_from_slice(src);
        }
    }
    Tensor::new(&[c, ph, pw], out)
}

/// Mirror left-right.
pub fn hflip(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(x)?;
    let d = x.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let col = i % w;
        d[i - col + (w - 1 - col)]
    }))
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rot90(x: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(x)?;
    let d = x.data();
    Ok(match k % 4 {
        0 => x.clone(),
        1 => Tensor::from_fn(&[c, w, h], |i| {
            let (ch, y, xx) = (i / (w * h), (i / h) % w, i % h);
            d[(ch * h + xx) * w + (w - 1 - y)]
        }),
        2 => Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, xx) = (i / (w * h), (i / w) % h, i % w);
            d[(ch * h + (h - 1 - y)) * w + (w - 1 - xx)]
        }),
        _ => Tensor::from_fn(&[c, w, h], |i| {
            let (ch, y, xx) = (i / (w * h), (i / h) % w, i % h);
            d[(ch * h + (h - 1 - xx)) * w + y]
        }),
    })
}

/// Batch `(N, C, H, W)` from same-sized images.
pub fn batch(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = images.iter().map(|t| (*t).clone()).collect();
    Tensor::stack(&owned)
}

/// All `.pgm` / `.ppm` files of a directory, sorted by file name.
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageSample>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no .pgm/.ppm images in {}",
            dir.display()
        )));
    }
    paths.iter().map(read_image).collect()
}
