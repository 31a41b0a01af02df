use super::{ConvKernel, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Output extent of a stride-1 convolution, or `None` if it would be empty.
fn conv_extent(input: usize, kernel: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v + 1)
}

/// Column range `[x0, x1)` of output positions whose input column
/// `x + kx - padding` lies inside `[0, width)`.
#[inline]
fn valid_cols(out_w: usize, width: usize, kx: usize, padding: usize) -> (usize, usize) {
    let x0 = padding.saturating_sub(kx);
    let x1 = (width + padding).saturating_sub(kx).min(out_w);
    (x0, x1.max(x0))
}

fn conv_output_shape(input: Shape4, kernel: &ConvKernel, padding: usize) -> Result<Shape4> {
    kernel.validate()?;
    if kernel.in_channels != input.c {
        return Err(Error::dim(format!(
            "conv2d: input {input} has {} channels but kernel {} expects {}",
            input.c,
            kernel.dims_string(),
            kernel.in_channels
        )));
    }
    match (
        conv_extent(input.h, kernel.kh, padding),
        conv_extent(input.w, kernel.kw, padding),
    ) {
        (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok(Shape4::new(input.n, kernel.out_channels, h, w)),
        _ => Err(Error::dim(format!(
            "conv2d: kernel {} with padding {padding} does not fit input {input}",
            kernel.dims_string()
        ))),
    }
}

/// Stride-1 2D cross-correlation with zero padding plus per-channel bias.
pub fn conv2d(input: &Tensor4, kernel: &ConvKernel, padding: usize) -> Result<Tensor4> {
    let ishape = input.shape();
    let oshape = conv_output_shape(ishape, kernel, padding)?;
    let mut out = Tensor4::zeros(oshape);
    let (ih, iw) = (ishape.h, ishape.w);
    let (oh, ow) = (oshape.h, oshape.w);

    for b in 0..ishape.n {
        for o in 0..kernel.out_channels {
            let out_plane = out.plane_mut(b, o);
            out_plane.fill(kernel.bias[o]);
            for c in 0..ishape.c {
                let in_plane = input.plane(b, c);
                for ky in 0..kernel.kh {
                    for kx in 0..kernel.kw {
                        let wgt = kernel.weight(o, c, ky, kx);
                        let (x0, x1) = valid_cols(ow, iw, kx, padding);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 + kx - padding;
                        for y in 0..oh {
                            let iy = y + ky;
                            if iy < padding || iy - padding >= ih {
                                continue;
                            }
                            let in_row = &in_plane[(iy - padding) * iw + ix0..][..x1 - x0];
                            let out_row = &mut out_plane[y * ow + x0..y * ow + x1];
                            for (dst, &src) in out_row.iter_mut().zip(in_row) {
                                *dst += wgt * src;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &ConvKernel,
    grad_out: &Tensor4,
    padding: usize,
) -> Result<(Tensor4, ConvKernel)> {
    let ishape = input.shape();
    let oshape = conv_output_shape(ishape, kernel, padding)?;
    if grad_out.shape() != oshape {
        return Err(Error::dim(format!(
            "conv2d_backward: grad_out {} does not match conv output {oshape}",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor4::zeros(ishape);
    let mut grad_k = ConvKernel::zeros(kernel.out_channels, kernel.in_channels, kernel.kh, kernel.kw);
    let (ih, iw) = (ishape.h, ishape.w);
    let (oh, ow) = (oshape.h, oshape.w);

    for b in 0..ishape.n {
        for o in 0..kernel.out_channels {
            let g_plane = grad_out.plane(b, o);
            grad_k.bias[o] += g_plane.iter().sum::<f64>();
            for c in 0..ishape.c {
                let in_plane = input.plane(b, c);
                for ky in 0..kernel.kh {
                    for kx in 0..kernel.kw {
                        let widx = kernel.weight_offset(o, c, ky, kx);
                        let wgt = kernel.weights[widx];
                        let (x0, x1) = valid_cols(ow, iw, kx, padding);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 + kx - padding;
                        let mut acc = 0.0;
                        let gin_plane = grad_in.plane_mut(b, c);
                        for y in 0..oh {
                            let iy = y + ky;
                            if iy < padding || iy - padding >= ih {
                                continue;
                            }
                            let row_start = (iy - padding) * iw + ix0;
                            let g_row = &g_plane[y * ow + x0..y * ow + x1];
                            let in_row = &in_plane[row_start..row_start + (x1 - x0)];
                            acc += g_row.iter().zip(in_row).map(|(g, v)| g * v).sum::<f64>();
                            let gin_row = &mut gin_plane[row_start..row_start + (x1 - x0)];
                            for (dst, &g) in gin_row.iter_mut().zip(g_row) {
                                *dst += wgt * g;
                            }
                        }
                        grad_k.weights[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}

fn upconv_check(input: Shape4, kernel: &ConvKernel) -> Result<()> {
    kernel.validate()?;
    if kernel.kh != 2 || kernel.kw != 2 {
        return Err(Error::dim(format!(
            "upconv2 requires a 2x2 kernel, got {}",
            kernel.dims_string()
        )));
    }
    if kernel.in_channels != input.c {
        return Err(Error::dim(format!(
            "upconv2: input {input} has {} channels but kernel {} expects {}",
            input.c,
            kernel.dims_string(),
            kernel.in_channels
        )));
    }
    Ok(())
}

/// 2×2 stride-2 transposed convolution: each input cell scatters a 2×2
/// block into an output of exactly doubled spatial size.
pub fn upconv2(input: &Tensor4, kernel: &ConvKernel) -> Result<Tensor4> {
    let s = input.shape();
    upconv_check(s, kernel)?;
    let oshape = Shape4::new(s.n, kernel.out_channels, 2 * s.h, 2 * s.w);
    let ow = oshape.w;
    let mut out = Tensor4::zeros(oshape);
    for b in 0..s.n {
        for o in 0..kernel.out_channels {
            let out_plane = out.plane_mut(b, o);
            out_plane.fill(kernel.bias[o]);
            for c in 0..s.c {
                let in_plane = input.plane(b, c);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wgt = kernel.weight(o, c, dy, dx);
                        for i in 0..s.h {
                            let out_row = &mut out_plane[(2 * i + dy) * ow..(2 * i + dy + 1) * ow];
                            let in_row = &in_plane[i * s.w..(i + 1) * s.w];
                            for (j, &v) in in_row.iter().enumerate() {
                                out_row[2 * j + dx] += wgt * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`upconv2`]. The input gradient is the adjoint map of the
/// transposed convolution applied to `grad_out`.
pub fn upconv2_backward(
    input: &Tensor4,
    kernel: &ConvKernel,
    grad_out: &Tensor4,
) -> Result<(Tensor4, ConvKernel)> {
    let s = input.shape();
    upconv_check(s, kernel)?;
    let oshape = Shape4::new(s.n, kernel.out_channels, 2 * s.h, 2 * s.w);
    if grad_out.shape() != oshape {
        return Err(Error::dim(format!(
            "upconv2_backward: grad_out {} does not match output {oshape}",
            grad_out.shape()
        )));
    }
    let ow = oshape.w;
    let mut grad_in = Tensor4::zeros(s);
    let mut grad_k = ConvKernel::zeros(kernel.out_channels, kernel.in_channels, 2, 2);
    for b in 0..s.n {
        for o in 0..kernel.out_channels {
            let g_plane = grad_out.plane(b, o);
            grad_k.bias[o] += g_plane.iter().sum::<f64>();
            for c in 0..s.c {
                let in_plane = input.plane(b, c);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let widx = kernel.weight_offset(o, c, dy, dx);
                        let wgt = kernel.weights[widx];
                        let mut acc = 0.0;
                        let gin_plane = grad_in.plane_mut(b, c);
                        for i in 0..s.h {
                            let g_row = &g_plane[(2 * i + dy) * ow..(2 * i + dy + 1) * ow];
                            for j in 0..s.w {
                                let g = g_row[2 * j + dx];
                                acc += g * in_plane[i * s.w + j];
                                gin_plane[i * s.w + j] += wgt * g;
                            }
                        }
                        grad_k.weights[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_k))
}
