use rand::Rng;

use super::{crop, ImageSample};
use crate::error::{Error, Result};

/// `count` random `patch_size` squares, each from a uniformly chosen image at a
/// uniform offset. A degraded image of the same size is cropped identically;
/// one smaller by an integer factor `s` (a low-resolution input) is cropped at
/// the matching `patch_size / s` window, with offsets on multiples of `s`.
pub fn extract_patches(
    images: &[ImageSample],
    patch_size: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ImageSample>> {
    if images.is_empty() {
        return Err(Error::Data("no images to cut patches from".into()));
    }
    if patch_size == 0 {
        return Err(Error::Data("patch size must be positive".into()));
    }
    let factors = images
        .iter()
        .map(|im| {
            let (_, h, w) = im.dims();
            if patch_size > h || patch_size > w {
                return Err(Error::Data(format!(
                    "patch {patch_size} larger than {h}x{w} image"
                )));
            }
            let Some(d) = &im.degraded else { return Ok(1) };
            let (dh, dw) = (d.shape()[1], d.shape()[2]);
            let s = h / dh;
            if s == 0 || dh * s != h || dw * s != w || !patch_size.is_multiple_of(s) {
                return Err(Error::Data(format!(
                    "degraded {dh}x{dw} does not tile {h}x{w} for patch {patch_size}"
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<usize>>>()?;
    (0..count)
        .map(|_| {
            let i = rng.gen_range(0..images.len());
            let (im, s) = (&images[i], factors[i]);
            let (_, h, w) = im.dims();
            let top = rng.gen_range(0..=(h - patch_size) / s) * s;
            let left = rng.gen_range(0..=(w - patch_size) / s) * s;
            let mut out = ImageSample::new(crop(&im.pixels, top, left, patch_size, patch_size)?)?;
            out.label = im.label;
            if let Some(d) = &im.degraded {
                let p = patch_size / s;
                out.degraded = Some(crop(d, top / s, left / s, p, p)?);
            }
            Ok(out)
        })
        .collect()
}
