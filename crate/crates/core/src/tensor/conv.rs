//! 2-D convolution (cross-correlation, no kernel flip) and its transpose.
//!
//! Inputs are `[B, C, H, W]`; a rank-3 `[C, H, W]` input is treated as a
//! batch of one and the result keeps rank 3.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [b, c, h, w] => Ok((b, c, h, w, true)),
        _ => Err(Error::Shape(format!(
            "{op} needs [C, H, W] or [B, C, H, W], got {shape:?}"
        ))),
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, c_out: usize, op: &'static str) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c_out] => Err(Error::dim(op, &[c_out], b.shape())),
        _ => Ok(()),
    }
}

/// Range of output columns `o` for which `o*stride + off - pad` lands in `0..len`.
#[inline]
fn valid_range(
    out_len: usize,
    len: usize,
    off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    // need o*stride + off >= pad and o*stride + off - pad < len
    let lo = if off >= pad {
        0
    } else {
        (pad - off).div_ceil(stride)
    };
    let hi = if len + pad > off {
        ((len + pad - off - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl<T: Scalar> Tensor<T> {
    /// `out[b, co, y, x] = Σ w[co, ci, ky, kx] · in[b, ci, y·s + ky − p, x·s + kx − p] (+ bias[co])`
    /// with zero padding. Kernel layout `[C_out, C_in, k, k]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w, batched) = batch_dims(self.shape(), "conv2d")?;
        let &[c_out, kc_in, k, k2] = kernel.shape() else {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [C_out, C_in, k, k], got {:?}",
                kernel.shape()
            )));
        };
        if k != k2 || k == 0 {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square, got {k}x{k2}"
            )));
        }
        if kc_in != c_in {
            return Err(Error::dim("conv2d", self.shape(), kernel.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        check_bias(bias, c_out, "conv2d")?;
        let out_extent = |n: usize| -> Result<usize> {
            let span = n + 2 * padding;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::Shape(format!(
                    "conv2d output extent ({n} + 2·{padding} − {k})/{stride} + 1 is not integral"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let geo = Geometry {
            batch,
            c_in,
            c_out,
            h,
            w,
            k,
            stride,
            pad: padding,
            h_out: out_extent(h)?,
            w_out: out_extent(w)?,
        };

        let mut out = vec![T::zero(); batch * c_out * geo.h_out * geo.w_out];
        conv_forward(&self.data(), &kernel.data(), &mut out, &geo);
        if let Some(b) = bias {
            add_channel_bias(&mut out, &b.data(), batch, c_out, geo.h_out * geo.w_out);
        }

        let shape = if batched {
            vec![batch, c_out, geo.h_out, geo.w_out]
        } else {
            vec![c_out, geo.h_out, geo.w_out]
        };
        let mut inputs = vec![self.clone(), kernel.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv2d",
            shape,
            out,
            inputs,
            Box::new(move |inputs, _, g| {
                let gx = inputs[0].requires_grad_flag().then(|| {
                    let mut gx = vec![T::zero(); geo.batch * geo.c_in * geo.h * geo.w];
                    conv_backward_input(g, &inputs[1].data(), &mut gx, &geo);
                    gx
                });
                let gk = inputs[1].requires_grad_flag().then(|| {
                    let mut gk = vec![T::zero(); geo.c_out * geo.c_in * geo.k * geo.k];
                    conv_backward_kernel(g, &inputs[0].data(), &mut gk, &geo);
                    gk
                });
                let mut grads = vec![gx, gk];
                if inputs.len() == 3 {
                    grads.push(Some(channel_sums(
                        g,
                        geo.batch,
                        geo.c_out,
                        geo.h_out * geo.w_out,
                    )));
                }
                grads
            }),
        ))
    }

    /// Transposed convolution: every input cell scatters `x · w[ci, co, :, :]`
    /// into a `k×k` output window at stride `s`. Output extent `(H − 1)·s + k`.
    /// Kernel layout `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w, batched) = batch_dims(self.shape(), "conv_transpose2d")?;
        let &[kc_in, c_out, k, k2] = kernel.shape() else {
            return Err(Error::Shape(format!(
                "conv_transpose2d kernel must be [C_in, C_out, k, k], got {:?}",
                kernel.shape()
            )));
        };
        if k != k2 || k == 0 {
            return Err(Error::Shape(format!(
                "conv_transpose2d kernel must be square, got {k}x{k2}"
            )));
        }
        if kc_in != c_in {
            return Err(Error::dim("conv_transpose2d", self.shape(), kernel.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be >= 1".into()));
        }
        check_bias(bias, c_out, "conv_transpose2d")?;
        let (h_out, w_out) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let plane_in = h * w;
        let plane_out = h_out * w_out;

        let mut out = vec![T::zero(); batch * c_out * plane_out];
        {
            let (x, wk) = (self.data(), kernel.data());
            for b in 0..batch {
                for ci in 0..c_in {
                    let xin = &x[(b * c_in + ci) * plane_in..][..plane_in];
                    for co in 0..c_out {
                        let o = &mut out[(b * c_out + co) * plane_out..][..plane_out];
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wk[((ci * c_out + co) * k + ky) * k + kx];
                                for iy in 0..h {
                                    let orow = (iy * stride + ky) * w_out + kx;
                                    let irow = &xin[iy * w..(iy + 1) * w];
                                    for (ix, &xv) in irow.iter().enumerate() {
                                        o[orow + ix * stride] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, &bv.data(), batch, c_out, plane_out);
        }

        let shape = if batched {
            vec![batch, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let mut inputs = vec![self.clone(), kernel.clone()];
        inputs.extend(bias.cloned());
        Ok(Tensor::from_op(
            "conv_transpose2d",
            shape,
            out,
            inputs,
            Box::new(move |inputs, _, g| {
                let x = inputs[0].data();
                let wk = inputs[1].data();
                let need_x = inputs[0].requires_grad_flag();
                let need_k = inputs[1].requires_grad_flag();
                let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
                let mut gk = vec![T::zero(); if need_k { wk.len() } else { 0 }];
                for b in 0..batch {
                    for ci in 0..c_in {
                        let xoff = (b * c_in + ci) * plane_in;
                        for co in 0..c_out {
                            let go = &g[(b * c_out + co) * plane_out..][..plane_out];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((ci * c_out + co) * k + ky) * k + kx;
                                    let wv = wk[widx];
                                    let mut acc = T::zero();
                                    for iy in 0..h {
                                        let orow = (iy * stride + ky) * w_out + kx;
                                        for ix in 0..w {
                                            let gv = go[orow + ix * stride];
                                            let xi = xoff + iy * w + ix;
                                            if need_x {
                                                gx[xi] += wv * gv;
                                            }
                                            acc += x[xi] * gv;
                                        }
                                    }
                                    if need_k {
                                        gk[widx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![need_x.then_some(gx), need_k.then_some(gk)];
                if inputs.len() == 3 {
                    grads.push(Some(channel_sums(g, batch, c_out, plane_out)));
                }
                grads
            }),
        ))
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], batch: usize, c: usize, plane: usize) {
    for b in 0..batch {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            out[(b * c + ch) * plane..][..plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, c: usize, plane: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for b in 0..batch {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    s
}

fn conv_forward<T: Scalar>(x: &[T], wk: &[T], out: &mut [T], geo: &Geometry) {
    let &Geometry {
        batch,
        c_in,
        c_out,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = geo;
    for b in 0..batch {
        for co in 0..c_out {
            let o = &mut out[(b * c_out + co) * h_out * w_out..][..h_out * w_out];
            for ci in 0..c_in {
                let xin = &x[(b * c_in + ci) * h * w..][..h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_out, h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = wk[((co * c_in + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(w_out, w, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut o[oy * w_out..(oy + 1) * w_out];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                orow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&irow[ix0..ix0 + (ox_hi - ox_lo)])
                                    .for_each(|(o, &v)| *o += wv * v);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input<T: Scalar>(g: &[T], wk: &[T], gx: &mut [T], geo: &Geometry) {
    let &Geometry {
        batch,
        c_in,
        c_out,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = geo;
    for b in 0..batch {
        for ci in 0..c_in {
            let gin = &mut gx[(b * c_in + ci) * h * w..][..h * w];
            for co in 0..c_out {
                let go = &g[(b * c_out + co) * h_out * w_out..][..h_out * w_out];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_out, h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = wk[((co * c_in + ci) * k + ky) * k + kx];
                        let (ox_lo, ox_hi) = valid_range(w_out, w, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &go[oy * w_out..(oy + 1) * w_out];
                            let irow = &mut gin[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                irow[ix0..ix0 + (ox_hi - ox_lo)]
                                    .iter_mut()
                                    .zip(&grow[ox_lo..ox_hi])
                                    .for_each(|(d, &gv)| *d += wv * gv);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    irow[ox * stride + kx - pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel<T: Scalar>(g: &[T], x: &[T], gk: &mut [T], geo: &Geometry) {
    let &Geometry {
        batch,
        c_in,
        c_out,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = geo;
    for b in 0..batch {
        for co in 0..c_out {
            let go = &g[(b * c_out + co) * h_out * w_out..][..h_out * w_out];
            for ci in 0..c_in {
                let xin = &x[(b * c_in + ci) * h * w..][..h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_out, h, ky, stride, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_range(w_out, w, kx, stride, pad);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &go[oy * w_out..(oy + 1) * w_out];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                acc += grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + (ox_hi - ox_lo)])
                                    .map(|(&a, &b)| a * b)
                                    .sum::<T>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                        gk[((co * c_in + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
}
