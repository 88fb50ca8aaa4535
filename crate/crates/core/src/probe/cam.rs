use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Model, Stage};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    pub class: usize,
    /// `(H_f, W_f)` classifier-weighted sum of the final feature maps.
    pub map: Tensor<f64>,
    /// The map resized bilinearly to the input and scaled to `[0, 1]`.
    pub overlay: Tensor<f64>,
    pub logit: f64,
    /// `mean(map) + bias - logit`.
    pub residual: f64,
}

fn classifier_fc<T: Scalar>(model: &Model<T>) -> Result<&str> {
    match model.stages().last() {
        Some(Stage::Classifier { fc, .. }) => Ok(fc),
        _ => Err(Error::invalid(
            "class activation maps need a global-average-pool classifier head",
        )),
    }
}

/// Class activation maps of one image `(C, H, W)` for every class in `classes`.
pub fn cam_all<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    classes: &[usize],
) -> Result<Vec<CamResult>> {
    let fc = classifier_fc(model)?;
    let w = model.param(&format!("{fc}.weight"))?;
    let b = model.param(&format!("{fc}.bias"))?;
    let (k, f) = (w.shape()[0], w.shape()[1]);
    let (_, h, wd) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "cam takes one (C, H, W) image, got {:?}",
                image.shape()
            )))
        }
    };
    let x = image.reshape(&[1, image.shape()[0], h, wd])?;
    let (logits, feats) = model.predict_with_features(&x)?;
    let (_, fc_in, hf, wf) = feats.dims4()?;
    if fc_in != f {
        return Err(Error::shape(format!(
            "{fc_in} feature maps for a {f}-input classifier"
        )));
    }
    let fd = feats.data();
    classes
        .iter()
        .map(|&c| {
            if c >= k {
                return Err(Error::invalid(format!(
                    "class {c} out of range for {k} classes"
                )));
            }
            let mut map = vec![0.0f64; hf * wf];
            for ch in 0..f {
                let wc = w.data()[c * f + ch].as_f64();
                let plane = &fd[ch * hf * wf..(ch + 1) * hf * wf];
                map.iter_mut()
                    .zip(plane)
                    .for_each(|(m, v)| *m += wc * v.as_f64());
            }
            let mean = map.iter().sum::<f64>() / map.len() as f64;
            let logit = logits.data()[c].as_f64();
            let map = Tensor::new(&[hf, wf], map)?;
            let overlay = normalize_unit(&bilinear(&map, h, wd)?);
            Ok(CamResult {
                class: c,
                residual: mean + b.data()[c].as_f64() - logit,
                map,
                overlay,
                logit,
            })
        })
        .collect()
}

pub fn cam<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class: usize) -> Result<CamResult> {
    Ok(cam_all(model, image, &[class])?.remove(0))
}

/// Half-pixel-centred bilinear resize of a 2-D map with clamped edges.
pub fn bilinear(map: &Tensor<f64>, oh: usize, ow: usize) -> Result<Tensor<f64>> {
    let (h, w) = match *map.shape() {
        [h, w] if h > 0 && w > 0 => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "bilinear takes a non-empty 2-D map, got {:?}",
                map.shape()
            )))
        }
    };
    if oh == 0 || ow == 0 {
        return Err(Error::invalid("bilinear target size must be positive"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let d = map.data();
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        let (y0, y1, fy) = ty[i / ow];
        let (x0, x1, fx) = tx[i % ow];
        let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
        let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Min-max scaling to `[0, 1]`; a constant map becomes zeros.
pub fn normalize_unit(map: &Tensor<f64>) -> Tensor<f64> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

/// Blue-cyan-yellow-red ramp for a value in `[0, 1]`.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Even blend of an image in `[0, 1]` (1 or 3 channels) with the heat-mapped overlay.
pub fn overlay_rgb(image: &Tensor<f32>, overlay: &Tensor<f64>) -> Result<Tensor<f32>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => {
            return Err(Error::shape(format!(
                "overlay needs a 1- or 3-channel image, got {:?}",
                image.shape()
            )))
        }
    };
    if overlay.shape() != [h, w] {
        return Err(Error::shape(format!(
            "overlay {:?} for a {h}x{w} image",
            overlay.shape()
        )));
    }
    let px = image.data();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        let src = px[if c == 3 { ch * h * w + p } else { p }] as f64;
        (0.5 * src.clamp(0.0, 1.0) + 0.5 * heat(overlay.data()[p])[ch]) as f32
    }))
}

pub fn map_csv(map: &Tensor<f64>) -> String {
    let w = map.shape()[1];
    let mut s = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}
