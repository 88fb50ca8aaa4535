use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reported in place of infinity for identical images.
pub const PSNR_CAP_DB: f64 = 300.0;

pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// `10 log10(peak^2 / MSE)` over the region left after cropping `border`
/// pixels from every side of the last two axes. With `luma_only` the channel
/// axis (third from last, length 3) is first reduced by BT.601 weights.
pub fn psnr<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    peak: f64,
    border: usize,
    luma_only: bool,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr peak must be positive"));
    }
    let r = a.rank();
    if r < 2 {
        return Err(Error::shape("psnr needs images with at least two axes"));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::invalid(format!(
            "cropping {border} pixels leaves nothing of {h}x{w}"
        )));
    }
    let diff: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() - y.as_f64())
        .collect();
    let planes: Vec<Vec<f64>> = if luma_only {
        if r < 3 || a.shape()[r - 3] != 3 {
            return Err(Error::shape(format!(
                "luma needs 3 channels, got {:?}",
                a.shape()
            )));
        }
        diff.chunks(3 * h * w)
            .map(|img| {
                (0..h * w)
                    .map(|p| (0..3).map(|c| BT601[c] * img[c * h * w + p]).sum())
                    .collect()
            })
            .collect()
    } else {
        diff.chunks(h * w).map(<[f64]>::to_vec).collect()
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for p in &planes {
        for y in border..h - border {
            for x in border..w - border {
                sum += p[y * w + x] * p[y * w + x];
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Percentage of rows of `logits` (N, classes) whose arg-max differs from the label.
pub fn top1_error<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => {
            return Err(Error::shape(format!(
                "logits must be (N, classes), got {:?}",
                logits.shape()
            )))
        }
    };
    if n != labels.len() || n == 0 {
        return Err(Error::invalid(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    let wrong = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best != l
        })
        .count();
    Ok(100.0 * wrong as f64 / n as f64)
}
