use rand::Rng;

use super::{crop, dims3, hflip, pad_zero, rot90, ChannelStats};
use crate::error::Result;
use crate::tensor::Tensor;

/// Enabled transforms, applied in field order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPolicy {
    pub normalize: Option<ChannelStats>,
    /// `(pad, size)`: zero-pad every side, then take a random `size x size` window.
    pub random_crop: Option<(usize, usize)>,
    /// Probability of a horizontal mirror.
    pub hflip: Option<f64>,
    /// Side of the zeroed square.
    pub cutout: Option<usize>,
    /// Random multiple of 90 degrees.
    pub rot90: bool,
}

impl AugmentPolicy {
    /// Normalization, pad-4 crop to 32, mirroring at p = 0.5, 16x16 cutout.
    pub fn cifar(stats: ChannelStats) -> Self {
        Self {
            normalize: Some(stats),
            random_crop: Some((4, 32)),
            hflip: Some(0.5),
            cutout: Some(16),
            rot90: false,
        }
    }

    /// Mirroring and quarter turns, for restoration patches.
    pub fn restoration() -> Self {
        Self {
            hflip: Some(0.5),
            rot90: true,
            ..Self::default()
        }
    }

    /// Draws the random choices for one `h x w` image.
    pub fn draw(&self, h: usize, w: usize, rng: &mut impl Rng) -> Plan {
        let crop = self
            .random_crop
            .map(|(pad, _)| (rng.gen_range(0..=2 * pad), rng.gen_range(0..=2 * pad)));
        let (h, w) = self.random_crop.map_or((h, w), |(_, s)| (s, s));
        let flip = self.hflip.is_some_and(|p| rng.gen::<f64>() < p);
        let cutout = self
            .cutout
            .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)));
        let quarter_turns = if self.rot90 { rng.gen_range(0..4) } else { 0 };
        Plan {
            crop,
            flip,
            cutout,
            quarter_turns,
        }
    }

    pub fn apply(&self, x: &Tensor<f32>, plan: &Plan) -> Result<Tensor<f32>> {
        let mut y = match &self.normalize {
            Some(s) => s.normalize(x)?,
            None => x.clone(),
        };
        if let (Some((pad, size)), Some((dy, dx))) = (self.random_crop, plan.crop) {
            y = crop(&pad_zero(&y, pad)?, dy, dx, size, size)?;
        }
        if plan.flip {
            y = hflip(&y)?;
        }
        if let (Some(side), Some(center)) = (self.cutout, plan.cutout) {
            y = cutout(&y, center, side)?;
        }
        rot90(&y, plan.quarter_turns)
    }

    /// Draws a plan and applies it.
    pub fn augment(&self, x: &Tensor<f32>, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        let (_, h, w) = dims3(x)?;
        let plan = self.draw(h, w, rng);
        self.apply(x, &plan)
    }
}

/// Random choices of one augmentation, reusable across a clean/degraded pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub crop: Option<(usize, usize)>,
    pub flip: bool,
    pub cutout: Option<(usize, usize)>,
    pub quarter_turns: usize,
}

/// Zeroes the `side x side` square centered at `center`, clipped to the image.
pub fn cutout(x: &Tensor<f32>, center: (usize, usize), side: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims3(x)?;
    let half = side / 2;
    let (y0, y1) = (
        center.0.saturating_sub(half),
        (center.0 + side - half).min(h),
    );
    let (x0, x1) = (
        center.1.saturating_sub(half),
        (center.1 + side - half).min(w),
    );
    let mut out = x.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            d[(ch * h + y) * w + x0..(ch * h + y) * w + x1].fill(0.0);
        }
    }
    Ok(out)
}
