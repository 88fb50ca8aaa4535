//! Procedural images for tests and desk-scale experiments.

use rand::Rng;

use super::ImageSample;
use crate::tensor::Tensor;

/// Piecewise-smooth scene: a shaded background with overlapping rectangles,
/// discs and striped patches, values in `[0, 1]`.
pub fn synthetic_image(channels: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let mut img = vec![0.0f64; channels * h * w];
    let color = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..channels).map(|_| rng.gen_range(0.05..0.95)).collect()
    };
    let base = color(rng);
    let (gy, gx) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                img[(c * h + y) * w + x] =
                    base[c] + gy * (y as f64 / h as f64 - 0.5) + gx * (x as f64 / w as f64 - 0.5);
            }
        }
    }
    let shapes = rng.gen_range(3..7);
    for _ in 0..shapes {
        let col = color(rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let r = rng.gen_range(0.1..0.4) * h.min(w) as f64;
        let kind = rng.gen_range(0..3);
        let (freq, angle) = (
            rng.gen_range(0.3..1.2),
            rng.gen_range(0.0..std::f64::consts::PI),
        );
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match kind {
                    0 => dy.abs() < r && dx.abs() < 0.7 * r,
                    1 => dy * dy + dx * dx < r * r,
                    _ => dy.abs() < r && dx.abs() < r,
                };
                if !inside {
                    continue;
                }
                let stripe = if kind == 2 {
                    0.25 * (freq * (dx * angle.cos() + dy * angle.sin())).sin()
                } else {
                    0.0
                };
                for c in 0..channels {
                    img[(c * h + y) * w + x] = col[c] + stripe;
                }
            }
        }
    }
    Tensor::new(
        &[channels, h, w],
        img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
    .expect("consistent shape")
}

/// Labelled RGB images whose class is the orientation of a striped square
/// placed at a random position on a faint noisy background.
pub fn synthetic_classification(
    n: usize,
    classes: usize,
    side: usize,
    rng: &mut impl Rng,
) -> Vec<ImageSample> {
    (0..n)
        .map(|i| {
            let label = i % classes;
            let angle = std::f64::consts::PI * label as f64 / classes as f64;
            let half = (side / 4).max(1) as f64;
            let cy = rng.gen_range(half..side as f64 - half);
            let cx = rng.gen_range(half..side as f64 - half);
            let tint: Vec<f64> = (0..3).map(|_| rng.gen_range(0.6..1.0)).collect();
            let mut px = vec![0.0f32; 3 * side * side];
            for y in 0..side {
                for x in 0..side {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let v = if dy.abs() < half && dx.abs() < half {
                        0.5 + 0.45 * (1.6 * (dx * angle.cos() + dy * angle.sin())).sin()
                    } else {
                        0.0
                    };
                    for c in 0..3 {
                        let bg: f64 = rng.gen_range(0.0..0.1);
                        px[(c * side + y) * side + x] = (v * tint[c] + bg).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let t = Tensor::new(&[3, side, side], px).expect("consistent shape");
            ImageSample::new(t).expect("rank 3").with_label(label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn images_are_in_range_and_seeded() {
        let a = synthetic_image(1, 24, 20, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.shape(), &[1, 24, 20]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            a,
            synthetic_image(1, 24, 20, &mut ChaCha8Rng::seed_from_u64(1))
        );
        assert_ne!(
            a,
            synthetic_image(1, 24, 20, &mut ChaCha8Rng::seed_from_u64(2))
        );
        // not a flat image
        let mean = a.mean();
        assert!(a.data().iter().map(|v| (v - mean).abs()).sum::<f32>() > 1.0);
    }

    #[test]
    fn classification_labels_cycle() {
        let s = synthetic_classification(7, 3, 16, &mut ChaCha8Rng::seed_from_u64(3));
        let labels: Vec<_> = s.iter().map(|x| x.label.unwrap()).collect();
        assert_eq!(labels, vec![0, 1, 2, 0, 1, 2, 0]);
        assert!(s.iter().all(|x| x.dims() == (3, 16, 16)));
    }
}
