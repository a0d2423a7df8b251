//! Same-size, stride-1, zero-padded 2-D convolution via im2col + GEMM.

use super::array::dims4;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn infer(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<Self> {
        let (b, cin, h, w) = dims4(input, "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(weight, "conv2d")?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {weight:?} expects {wcin}"),
            ));
        }
        if let Some(bs) = bias {
            if bs != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {bs:?} does not match {cout} output channels"),
                ));
            }
        }
        Ok(Self {
            batch: b,
            in_ch: cin,
            out_ch: cout,
            height: h,
            width: w,
            kernel: kh,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.height, self.width]
    }
}

/// Unfolds one batch element `[Cin, H, W]` into `[Cin*k*k, H*W]`.
fn im2col<T: Scalar>(g: &ConvGeometry, src: &[T], cols: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    for ci in 0..g.in_ch {
        let chan = &src[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let in_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&in_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Folds `[Cin*k*k, H*W]` back into `[Cin, H, W]`, accumulating into `dst`.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dst: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let plane = g.plane();
    for ci in 0..g.in_ch {
        let chan = &mut dst[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let in_row =
                        &mut chan[iy as usize * w + s0..iy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, &s) in in_row.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let plane = g.plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = if g.kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for b in 0..g.batch {
        let x = &input.data()[b * g.in_ch * plane..(b + 1) * g.in_ch * plane];
        let y = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let cols_ref: &[T] = if g.kernel == 1 {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_ch,
            patch,
            plane,
            T::one(),
            weight.data(),
            patch as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            beta,
            y,
            plane as isize,
            1,
        );
    }
    Tensor::new(&g.output_shape(), out).expect("conv output shape")
}

/// Accumulates input/weight/bias gradients for one convolution.
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.plane();
    let patch = g.patch_len();
    let in_stride = g.in_ch * plane;
    let out_stride = g.out_ch * plane;

    if let Some(gb) = grad_bias {
        for b in 0..g.batch {
            let go = &grad_out[b * out_stride..(b + 1) * out_stride];
            for (co, chunk) in go.chunks(plane).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.to_f64().unwrap()).sum();
                gb[co] = gb[co] + T::from_f64_lossy(s);
            }
        }
    }

    let mut cols = vec![T::zero(); if g.kernel == 1 { 0 } else { patch * plane }];
    if let Some(gw) = grad_weight {
        for b in 0..g.batch {
            let x = &input.data()[b * in_stride..(b + 1) * in_stride];
            let go = &grad_out[b * out_stride..(b + 1) * out_stride];
            let cols_ref: &[T] = if g.kernel == 1 {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // dW[Cout, patch] += dY[Cout, HW] * cols^T[HW, patch]
            T::gemm(
                g.out_ch,
                plane,
                patch,
                T::one(),
                go,
                plane as isize,
                1,
                cols_ref,
                1,
                plane as isize,
                T::one(),
                gw,
                patch as isize,
                1,
            );
        }
    }

    if let Some(gi) = grad_input {
        let mut dcols = vec![T::zero(); patch * plane];
        for b in 0..g.batch {
            let go = &grad_out[b * out_stride..(b + 1) * out_stride];
            // dcols[patch, HW] = W^T[patch, Cout] * dY[Cout, HW]
            T::gemm(
                patch,
                g.out_ch,
                plane,
                T::one(),
                weight.data(),
                1,
                patch as isize,
                go,
                plane as isize,
                1,
                T::zero(),
                &mut dcols,
                plane as isize,
                1,
            );
            let dst = &mut gi[b * in_stride..(b + 1) * in_stride];
            if g.kernel == 1 {
                for (d, &s) in dst.iter_mut().zip(&dcols) {
                    *d = *d + s;
                }
            } else {
                col2im(g, &dcols, dst);
            }
        }
    }
}
