//! Stride-1 "valid" 2-D cross-correlation via im2col + GEMM.

use super::{check_same_shape, strides, wrong_cache, LayerCache, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, w) = input.dims4("conv input")?;
    let (k, wc, kh, kw) = weights.dims4("conv weights")?;
    if wc != c {
        return Err(Error::Dimension(format!(
            "conv channel axis: input has {c} channels, weights expect {wc}"
        )));
    }
    if kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::Dimension(format!(
            "conv spatial axes: kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    if bias.shape() != [k] {
        return Err(Error::Dimension(format!(
            "conv bias axis: expected [{k}], got {:?}",
            bias.shape()
        )));
    }
    Ok((
        n,
        k,
        Geometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            out_h: h - kh + 1,
            out_w: w - kw + 1,
        },
    ))
}

/// Unfolds one sample `[C,H,W]` into a `[C·kh·kw, out_h·out_w]` matrix.
fn im2col<T: Scalar>(sample: &[T], g: &Geometry, col: &mut [T]) {
    let out_len = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let src = &plane[(oy + ki) * g.width + kj..][..g.out_w];
                    dst[oy * g.out_w..(oy + 1) * g.out_w].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a `[C,H,W]` sample.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, sample: &mut [T]) {
    let out_len = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_h {
                    let dst = &mut plane[(oy + ki) * g.width + kj..][..g.out_w];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * g.out_w..(oy + 1) * g.out_w]) {
                        *d = *d + s;
                    }
                }
                row += 1;
            }
        }
    }
}

/// `input [N,C,H,W] ⋆ weights [K,C,kh,kw] + bias [K] → [N,K,H-kh+1,W-kw+1]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, k, g) = geometry(input, weights, bias)?;
    let patch = g.patch_len();
    let out_len = g.out_len();
    let in_len = g.channels * g.height * g.width;

    let mut output = Tensor::zeros(&[n, k, g.out_h, g.out_w]);
    let mut col = vec![T::zero(); patch * out_len];
    for (sample, out) in input
        .data()
        .chunks_exact(in_len)
        .zip(output.data_mut().chunks_exact_mut(k * out_len))
    {
        for (plane, &b) in out.chunks_exact_mut(out_len).zip(bias.data()) {
            plane.fill(b);
        }
        im2col(sample, &g, &mut col);
        T::gemm(
            k,
            patch,
            out_len,
            weights.data(),
            strides(patch, false),
            &col,
            strides(out_len, false),
            T::one(),
            out,
        );
    }
    let cache = LayerCache::Conv {
        input: input.clone(),
        weights: weights.clone(),
    };
    Ok((output, cache))
}

pub fn conv2d_backward<T: Scalar>(upstream: &Tensor<T>, cache: &LayerCache<T>) -> Result<ConvGrads<T>> {
    let LayerCache::Conv { input, weights } = cache else {
        return Err(wrong_cache("conv", cache));
    };
    let k = weights.shape()[0];
    let (n, _, g) = geometry(input, weights, &Tensor::zeros(&[k]))?;
    check_same_shape("conv upstream", &[n, k, g.out_h, g.out_w], upstream.shape())?;

    let patch = g.patch_len();
    let out_len = g.out_len();
    let in_len = g.channels * g.height * g.width;

    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = Tensor::zeros(&[k]);
    let mut col = vec![T::zero(); patch * out_len];
    let mut d_col = vec![T::zero(); patch * out_len];

    for ((sample, up), d_sample) in input
        .data()
        .chunks_exact(in_len)
        .zip(upstream.data().chunks_exact(k * out_len))
        .zip(d_input.data_mut().chunks_exact_mut(in_len))
    {
        for (db, plane) in d_bias.data_mut().iter_mut().zip(up.chunks_exact(out_len)) {
            *db = *db + plane.iter().copied().sum();
        }
        im2col(sample, &g, &mut col);
        // dW += dY · colᵀ
        T::gemm(
            k,
            out_len,
            patch,
            up,
            strides(out_len, false),
            &col,
            strides(out_len, true),
            T::one(),
            d_weights.data_mut(),
        );
        // dcol = Wᵀ · dY
        T::gemm(
            patch,
            k,
            out_len,
            weights.data(),
            strides(patch, true),
            up,
            strides(out_len, false),
            T::zero(),
            &mut d_col,
        );
        col2im(&d_col, &g, d_sample);
    }

    Ok(ConvGrads {
        input: d_input,
        weights: d_weights,
        bias: d_bias,
    })
}
