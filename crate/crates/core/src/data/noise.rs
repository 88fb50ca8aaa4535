use rand::Rng;
use rand_distr::StandardNormal;

use super::ImageSample;
use crate::tensor::Tensor;

/// `x + n` with `n ~ N(0, (sigma_255 / 255)^2)` per pixel; the result is not clipped.
pub fn add_awgn(x: &Tensor<f32>, sigma_255: f64, rng: &mut impl Rng) -> Tensor<f32> {
    if sigma_255 == 0.0 {
        return x.clone();
    }
    let s = sigma_255 / 255.0;
    let data = x
        .data()
        .iter()
        .map(|&v| v + (s * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// The sample with a freshly noised copy as its degraded image.
pub fn with_awgn(sample: &ImageSample, sigma_255: f64, rng: &mut impl Rng) -> ImageSample {
    let noisy = add_awgn(&sample.pixels, sigma_255, rng);
    sample.clone().with_degraded(noisy)
}
