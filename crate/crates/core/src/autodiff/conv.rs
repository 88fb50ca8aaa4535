//! 2-D cross-correlation kernels (zero padding, no kernel flip).
//!
//! General convolutions lower each sample to an im2col matrix and call gemm
//! per group. Depthwise convolutions (one input and one output channel per
//! group) use a direct loop, which is much cheaper for the 9x9 kernels of the
//! spatial activation branch.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels, one group.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, has_bias: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            has_bias,
        }
    }

    /// Depthwise square kernel with "same" padding.
    pub fn depthwise(channels: usize, kernel: usize, has_bias: bool) -> Self {
        Self {
            groups: channels,
            ..Self::same(channels, channels, kernel, has_bias)
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel_h * self.kernel_w
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::invalid(format!("degenerate conv {self:?}")));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::invalid(format!(
                "degenerate kernel/stride in {self:?}"
            )));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::invalid(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Validates input and weight shapes, returning `(n, h, w, out_h, out_w)`.
    pub fn check_io<T: Scalar>(
        &self,
        x: &Tensor<T>,
        w: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, wd) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv input has {c} channels, spec {}",
                self.in_channels
            )));
        }
        if w.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "conv weight {:?}, expected {:?}",
                w.shape(),
                self.weight_shape()
            )));
        }
        let (oh, ow) = self.output_hw(h, wd)?;
        Ok((n, h, wd, oh, ow))
    }

    pub fn check_bias<T: Scalar>(&self, b: Option<&Tensor<T>>) -> Result<()> {
        match (b, self.has_bias) {
            (None, false) => Ok(()),
            (Some(b), true) if b.shape() == [self.out_channels] => Ok(()),
            (Some(b), true) => Err(Error::shape(format!(
                "conv bias {:?}, expected [{}]",
                b.shape(),
                self.out_channels
            ))),
            (_, has) => Err(Error::invalid(format!(
                "conv bias presence does not match has_bias={has}"
            ))),
        }
    }
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.padding == 0
    }
}

/// Unfolds one group of one sample into a `(cin_g * kh * kw, oh * ow)` matrix.
fn im2col<T: Scalar>(src: &[T], spec: &ConvSpec, g: &Geometry, cols: &mut [T]) {
    let cin_g = spec.in_channels / spec.groups;
    let p = g.oh * g.ow;
    let pad = spec.padding as isize;
    for ci in 0..cin_g {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (ci * spec.kernel_h + ki) * spec.kernel_w + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an input-shaped buffer.
fn col2im<T: Scalar>(cols: &[T], spec: &ConvSpec, g: &Geometry, dst: &mut [T]) {
    let cin_g = spec.in_channels / spec.groups;
    let p = g.oh * g.ow;
    let pad = spec.padding as isize;
    for ci in 0..cin_g {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..spec.kernel_h {
            for kj in 0..spec.kernel_w {
                let row = (ci * spec.kernel_h + ki) * spec.kernel_w + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Valid `[lo, hi)` range of output coordinates whose tap `k` lands inside `[0, len)`.
fn tap_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // input index = o * stride + k - pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride).min(out_len)
    };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn depthwise_plane_forward<T: Scalar>(
    src: &[T],
    ker: &[T],
    spec: &ConvSpec,
    g: &Geometry,
    out: &mut [T],
) {
    for ki in 0..spec.kernel_h {
        let (y0, y1) = tap_range(ki, spec.padding, spec.stride, g.h, g.oh);
        for kj in 0..spec.kernel_w {
            let wv = ker[ki * spec.kernel_w + kj];
            let (x0, x1) = tap_range(kj, spec.padding, spec.stride, g.w, g.ow);
            if x0 == x1 {
                continue;
            }
            for oy in y0..y1 {
                let iy = oy * spec.stride + ki - spec.padding;
                let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                let irow = &src[iy * g.w..(iy + 1) * g.w];
                if spec.stride == 1 {
                    let ix0 = x0 + kj - spec.padding;
                    for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                        *o += wv * i;
                    }
                } else {
                    for ox in x0..x1 {
                        orow[ox] += wv * irow[ox * spec.stride + kj - spec.padding];
                    }
                }
            }
        }
    }
}

fn depthwise_plane_backward<T: Scalar>(
    src: &[T],
    ker: &[T],
    dout: &[T],
    spec: &ConvSpec,
    g: &Geometry,
    dx: &mut [T],
    dk: &mut [T],
) {
    for ki in 0..spec.kernel_h {
        let (y0, y1) = tap_range(ki, spec.padding, spec.stride, g.h, g.oh);
        for kj in 0..spec.kernel_w {
            let wv = ker[ki * spec.kernel_w + kj];
            let (x0, x1) = tap_range(kj, spec.padding, spec.stride, g.w, g.ow);
            let mut acc = T::zero();
            for oy in y0..y1 {
                let iy = oy * spec.stride + ki - spec.padding;
                let drow = &dout[oy * g.ow..(oy + 1) * g.ow];
                for ox in x0..x1 {
                    let ix = iy * g.w + ox * spec.stride + kj - spec.padding;
                    acc += drow[ox] * src[ix];
                    dx[ix] += wv * drow[ox];
                }
            }
            dk[ki * spec.kernel_w + kj] += acc;
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, h, wd, oh, ow) = spec.check_io(x, w)?;
    spec.check_bias(b)?;
    let geo = Geometry { h, w: wd, oh, ow };
    let in_len = spec.in_channels * h * wd;
    let out_len = spec.out_channels * oh * ow;
    let p = oh * ow;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = spec.fan_in();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(s, dst)| {
            let src = &x.data()[s * in_len..(s + 1) * in_len];
            if spec.is_depthwise() {
                let kk = spec.kernel_h * spec.kernel_w;
                for c in 0..spec.in_channels {
                    depthwise_plane_forward(
                        &src[c * h * wd..(c + 1) * h * wd],
                        &w.data()[c * kk..(c + 1) * kk],
                        spec,
                        &geo,
                        &mut dst[c * p..(c + 1) * p],
                    );
                }
            } else {
                let mut cols = if geo.is_pointwise(spec) {
                    Vec::new()
                } else {
                    vec![T::zero(); k * p]
                };
                for grp in 0..spec.groups {
                    let gsrc = &src[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd];
                    let colref: &[T] = if geo.is_pointwise(spec) {
                        gsrc
                    } else {
                        im2col(gsrc, spec, &geo, &mut cols);
                        &cols
                    };
                    let wg = &w.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
                    gemm(
                        T::one(),
                        MatRef::new(wg, cout_g, k),
                        MatRef::new(colref, k, p),
                        T::zero(),
                        &mut dst[grp * cout_g * p..(grp + 1) * cout_g * p],
                    );
                }
            }
            if let Some(b) = b {
                for (c, plane) in dst.chunks_mut(p).enumerate() {
                    let bv = b.data()[c];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(&[n, spec.out_channels, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`]. Per-sample weight gradients are reduced
/// in sample order so the result does not depend on thread scheduling.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    spec: &ConvSpec,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let (n, h, wd, oh, ow) = spec.check_io(x, w)?;
    if dout.shape() != [n, spec.out_channels, oh, ow] {
        return Err(Error::shape(format!(
            "conv upstream gradient {:?}",
            dout.shape()
        )));
    }
    let (need_x, need_w, need_b) = need;
    let geo = Geometry { h, w: wd, oh, ow };
    let in_len = spec.in_channels * h * wd;
    let out_len = spec.out_channels * oh * ow;
    let p = oh * ow;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let k = spec.fan_in();
    let wlen = spec.weight_count();

    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let src = &x.data()[s * in_len..(s + 1) * in_len];
            let dsrc = &dout.data()[s * out_len..(s + 1) * out_len];
            let mut dx = if need_x {
                vec![T::zero(); in_len]
            } else {
                Vec::new()
            };
            let mut dw = if need_w {
                vec![T::zero(); wlen]
            } else {
                Vec::new()
            };
            if spec.is_depthwise() {
                let kk = spec.kernel_h * spec.kernel_w;
                let mut scratch_dx = vec![T::zero(); if need_x { 0 } else { h * wd }];
                let mut scratch_dk = vec![T::zero(); if need_w { 0 } else { kk }];
                for c in 0..spec.in_channels {
                    let dxp = if need_x {
                        &mut dx[c * h * wd..(c + 1) * h * wd]
                    } else {
                        &mut scratch_dx[..]
                    };
                    let dkp = if need_w {
                        &mut dw[c * kk..(c + 1) * kk]
                    } else {
                        &mut scratch_dk[..]
                    };
                    depthwise_plane_backward(
                        &src[c * h * wd..(c + 1) * h * wd],
                        &w.data()[c * kk..(c + 1) * kk],
                        &dsrc[c * p..(c + 1) * p],
                        spec,
                        &geo,
                        dxp,
                        dkp,
                    );
                }
            } else {
                let pointwise = geo.is_pointwise(spec);
                let mut cols = vec![T::zero(); if pointwise { 0 } else { k * p }];
                for grp in 0..spec.groups {
                    let gsrc = &src[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd];
                    let gd = &dsrc[grp * cout_g * p..(grp + 1) * cout_g * p];
                    let wg = &w.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
                    if need_w {
                        let colref: &[T] = if pointwise {
                            gsrc
                        } else {
                            im2col(gsrc, spec, &geo, &mut cols);
                            &cols
                        };
                        // dW_g (cout_g x k) = dOut_g (cout_g x p) @ cols^T (p x k)
                        gemm(
                            T::one(),
                            MatRef::new(gd, cout_g, p),
                            MatRef::transposed(colref, p, k),
                            T::zero(),
                            &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k],
                        );
                    }
                    if need_x {
                        let gdx = &mut dx[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd];
                        if pointwise {
                            gemm(
                                T::one(),
                                MatRef::transposed(wg, k, cout_g),
                                MatRef::new(gd, cout_g, p),
                                T::zero(),
                                gdx,
                            );
                        } else {
                            let mut dcols = vec![T::zero(); k * p];
                            gemm(
                                T::one(),
                                MatRef::transposed(wg, k, cout_g),
                                MatRef::new(gd, cout_g, p),
                                T::zero(),
                                &mut dcols,
                            );
                            col2im(&dcols, spec, &geo, gdx);
                        }
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let dx = if need_x {
        let mut all = Vec::with_capacity(n * in_len);
        for (dx, _) in &per_sample {
            all.extend_from_slice(dx);
        }
        Some(Tensor::new(x.shape(), all)?)
    } else {
        None
    };
    let dw = if need_w {
        let mut acc = vec![T::zero(); wlen];
        for (_, dw) in &per_sample {
            acc.iter_mut().zip(dw).for_each(|(a, &v)| *a += v);
        }
        Some(Tensor::new(w.shape(), acc)?)
    } else {
        None
    };
    let db = if need_b {
        let mut acc = vec![T::zero(); spec.out_channels];
        for s in 0..n {
            for (c, a) in acc.iter_mut().enumerate() {
                let base = s * out_len + c * p;
                *a += dout.data()[base..base + p].iter().copied().sum();
            }
        }
        Some(Tensor::new(&[spec.out_channels], acc)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, independent of im2col and the depthwise path.
    fn naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: Option<&Tensor<f64>>,
        s: &ConvSpec,
    ) -> Tensor<f64> {
        let (n, _, h, wd) = x.dims4().unwrap();
        let (oh, ow) = s.output_hw(h, wd).unwrap();
        let cin_g = s.in_channels / s.groups;
        let cout_g = s.out_channels / s.groups;
        let mut out = vec![0.0; n * s.out_channels * oh * ow];
        for b_ in 0..n {
            for co in 0..s.out_channels {
                let grp = co / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin_g {
                            for ki in 0..s.kernel_h {
                                for kj in 0..s.kernel_w {
                                    let iy = (oy * s.stride + ki) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kj) as isize - s.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w.at4(co, ci, ki, kj)
                                            * x.at4(b_, grp * cin_g + ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out[((b_ * s.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, s.out_channels, oh, ow], out).unwrap()
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
        a.shape() == b.shape()
            && a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - y).abs() < 1e-10)
    }

    #[test]
    fn ones_kernel_counts_receptive_field() {
        let spec = ConvSpec::same(1, 1, 3, false);
        let x = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
        assert_eq!(y.at4(0, 0, 1, 0), 6.0);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 2, 2), 9.0);
        assert_eq!(y.at4(0, 0, 3, 3), 4.0);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let spec = ConvSpec::same(3, 3, 1, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(conv2d_forward(&x, &w, None, &spec).unwrap(), x);
    }

    #[test]
    fn matches_naive_oracle_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let specs = [
            ConvSpec::same(3, 5, 3, true),
            ConvSpec::same(4, 2, 1, false),
            ConvSpec {
                stride: 2,
                ..ConvSpec::same(2, 3, 3, true)
            },
            ConvSpec {
                groups: 2,
                ..ConvSpec::same(4, 6, 3, false)
            },
            ConvSpec::depthwise(2, 9, true),
            ConvSpec {
                stride: 2,
                ..ConvSpec::depthwise(3, 3, false)
            },
            ConvSpec {
                padding: 0,
                ..ConvSpec::same(2, 2, 3, false)
            },
        ];
        // planes smaller than the kernel reach included
        for (spec, (h, wd)) in specs
            .iter()
            .flat_map(|s| [(7, 6), (3, 2), (1, 1)].map(|hw| (*s, hw)))
        {
            if spec.output_hw(h, wd).is_err() {
                continue;
            }
            let x = Tensor::<f64>::randn(&[2, spec.in_channels, h, wd], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&spec.weight_shape(), 1.0, &mut rng);
            let b = spec
                .has_bias
                .then(|| Tensor::<f64>::randn(&[spec.out_channels], 1.0, &mut rng));
            let got = conv2d_forward(&x, &w, b.as_ref(), &spec).unwrap();
            assert!(close(&got, &naive(&x, &w, b.as_ref(), &spec)), "{spec:?}");
        }
    }

    #[test]
    fn depthwise_equals_independent_single_channel_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::depthwise(2, 9, false);
        let x = Tensor::<f64>::randn(&[1, 2, 11, 10], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 1, 9, 9], 1.0, &mut rng);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        let single = ConvSpec::same(1, 1, 9, false);
        for c in 0..2 {
            let xc = x.slice_channels(c, 1).unwrap();
            let wc = Tensor::new(&[1, 1, 9, 9], w.data()[c * 81..(c + 1) * 81].to_vec()).unwrap();
            let yc = naive(&xc, &wc, None, &single);
            assert!(close(&y.slice_channels(c, 1).unwrap(), &yc));
        }
    }

    #[test]
    fn rejects_bad_groups_and_sizes() {
        let bad = ConvSpec {
            groups: 2,
            ..ConvSpec::same(3, 4, 3, false)
        };
        assert!(bad.validate().is_err());
        let spec = ConvSpec {
            padding: 0,
            ..ConvSpec::same(1, 1, 5, false)
        };
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &w, None, &spec).is_err());
        let x = Tensor::<f64>::ones(&[1, 2, 3, 3]);
        assert!(conv2d_forward(
            &x,
            &Tensor::ones(&[1, 1, 5, 5]),
            None,
            &ConvSpec::same(1, 1, 5, false)
        )
        .is_err());
    }

    #[test]
    fn tap_range_covers_valid_outputs() {
        for (k, pad, stride, len) in [
            (0, 4, 1, 10),
            (8, 4, 1, 10),
            (2, 1, 2, 7),
            (0, 0, 1, 5),
            (0, 4, 1, 3),
            (8, 4, 1, 2),
            (1, 4, 1, 1),
        ] {
            let out_len = (len + 2 * pad - 9.min(len + 2 * pad)) / stride + 1;
            let (lo, hi) = tap_range(k, pad, stride, len, out_len);
            assert!(lo <= hi && hi <= out_len);
            for o in 0..out_len {
                let i = (o * stride + k) as isize - pad as isize;
                let valid = i >= 0 && (i as usize) < len;
                assert_eq!(valid, o >= lo && o < hi, "k={k} o={o}");
            }
        }
    }
}
