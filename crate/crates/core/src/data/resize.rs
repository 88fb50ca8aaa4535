//! Separable bicubic resampling (`a = -0.5`), antialiased when shrinking,
//! with edge pixels replicated past the border.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BICUBIC_A: f64 = -0.5;

/// Keys' cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Per output position: the source indices (already clamped) and their weights.
pub(crate) fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst as f64 / src as f64;
    // shrinking stretches the kernel so every source pixel contributes
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let wgt = cubic((center - i as f64) * stretch);
                if wgt == 0.0 {
                    continue;
                }
                total += wgt;
                let idx = i.clamp(0, src as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resizes one row-major plane.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = axis_weights(h, oh);
    let wx = axis_weights(w, ow);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, taps) in wx.iter().enumerate() {
            rows[y * ow + x] = taps.iter().map(|&(i, k)| k * row[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().map(|&(i, k)| k * rows[i * ow + x]).sum();
        }
    }
    out
}

/// Resizes every plane of a `(C, H, W)` or `(N, C, H, W)` tensor.
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r != 3 && r != 4 {
        return Err(Error::Shape(format!(
            "resize expects rank 3 or 4, got {:?}",
            x.shape()
        )));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be non-empty".into(),
        ));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let mut out = Vec::with_capacity(x.numel() / (h * w) * oh * ow);
    for plane in x.data().chunks(h * w) {
        let src: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        out.extend(resize_plane(&src, h, w, oh, ow).into_iter().map(T::lit));
    }
    Tensor::new(&shape, out)
}

/// Resizes by the rational factor `num / den` (output sizes rounded down).
pub fn bicubic_rescale<T: Scalar>(x: &Tensor<T>, num: usize, den: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if num == 0 || den == 0 || r < 2 {
        return Err(Error::InvalidArgument(format!(
            "bad resize factor {num}/{den} for shape {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let (oh, ow) = (h * num / den, w * num / den);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} scaled by {num}/{den} is empty"
        )));
    }
    bicubic_resize(x, oh, ow)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    // Direct 2D evaluation of the same resampling definition, one output pixel at a time.
    fn brute_force(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let weights_1d = |n: usize, m: usize, o: usize| -> Vec<f64> {
            let scale = m as f64 / n as f64;
            let s = scale.min(1.0);
            let c = (o as f64 + 0.5) / scale - 0.5;
            let mut wts = vec![0.0; n];
            let reach = (2.0 / s).ceil() as isize + 2;
            for i in -reach - 1..n as isize + reach {
                let wv = cubic((c - i as f64) * s);
                wts[i.clamp(0, n as isize - 1) as usize] += wv;
            }
            let t: f64 = wts.iter().sum();
            wts.iter().map(|v| v / t).collect()
        };
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            let wy = weights_1d(h, oh, oy);
            for ox in 0..ow {
                let wx = weights_1d(w, ow, ox);
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += wy[y] * wx[x] * src[y * w + x];
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, oh, ow) in &[
            (6, 5, 24, 20),
            (12, 12, 6, 6),
            (16, 8, 4, 2),
            (7, 9, 14, 5),
            (5, 5, 5, 5),
        ] {
            let t = Tensor::<f64>::rand_uniform(&[h * w], 0.0, 1.0, &mut rng);
            let fast = resize_plane(t.data(), h, w, oh, ow);
            let slow = brute_force(t.data(), h, w, oh, ow);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{h}x{w}->{oh}x{ow}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn preserves_constants_and_identity() {
        let c = Tensor::<f32>::full(&[2, 3, 7, 5], 0.25);
        let up = bicubic_resize(&c, 28, 20).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[1, 6, 6], 1.0, &mut rng);
        let same = bicubic_resize(&x, 6, 6).unwrap();
        for (a, b) in same.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_downscale_of_impulse() {
        let (h, w) = (16, 12);
        let mut img = vec![0.0; h * w];
        img[5 * w + 6] = 1.0;
        let fast = resize_plane(&img, h, w, 4, 3);
        let slow = brute_force(&img, h, w, 4, 3);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        // the widened kernel spreads the impulse over several outputs
        assert!(fast.iter().filter(|v| v.abs() > 1e-9).count() > 1);
        let t = Tensor::<f64>::new(&[1, h, w], img).unwrap();
        assert_eq!(bicubic_rescale(&t, 1, 4).unwrap().shape(), &[1, 4, 3]);
    }

    #[test]
    fn is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut rng);
        for (num, den) in [(1, 4), (1, 2), (2, 1), (4, 1)] {
            let mix = x.scale(0.3).add(&y.scale(-1.7)).unwrap();
            let lhs = bicubic_rescale(&mix, num, den).unwrap();
            let rx = bicubic_rescale(&x, num, den).unwrap();
            let ry = bicubic_rescale(&y, num, den).unwrap();
            let rhs = rx.scale(0.3).add(&ry.scale(-1.7)).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(bicubic_rescale(&Tensor::<f32>::zeros(&[1, 2, 2]), 1, 4).is_err());
        assert!(bicubic_rescale(&Tensor::<f32>::zeros(&[1, 2, 2]), 0, 1).is_err());
        assert!(bicubic_resize(&Tensor::<f32>::zeros(&[4, 4]), 2, 2).is_err());
        assert!(bicubic_resize(&Tensor::<f32>::zeros(&[1, 4, 4]), 0, 2).is_err());
    }
}
