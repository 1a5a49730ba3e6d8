use super::{check_same_shape, strides, wrong_cache, LayerCache, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    /// Same shape as the forward input (un-flattened).
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Affine map `x·W + b`. Inputs of rank > 2 are flattened to `[N, D]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (d, m) = weights.dims2("linear weights")?;
    if input.rank() < 2 {
        return Err(Error::Dimension(format!(
            "linear input must have a batch axis, got shape {:?}",
            input.shape()
        )));
    }
    let n = input.shape()[0];
    let features: usize = input.shape()[1..].iter().product();
    if features != d {
        return Err(Error::Dimension(format!(
            "linear inner axis: input has {features} features, weights expect {d}"
        )));
    }
    check_same_shape("linear bias", &[m], bias.shape())?;

    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_exact_mut(m) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        d,
        m,
        input.data(),
        strides(d, false),
        weights.data(),
        strides(m, false),
        T::one(),
        out.data_mut(),
    );
    let cache = LayerCache::Linear {
        input: input.clone(),
        weights: weights.clone(),
    };
    Ok((out, cache))
}

pub fn linear_backward<T: Scalar>(upstream: &Tensor<T>, cache: &LayerCache<T>) -> Result<LinearGrads<T>> {
    let LayerCache::Linear { input, weights } = cache else {
        return Err(wrong_cache("linear", cache));
    };
    let (d, m) = weights.dims2("linear weights")?;
    let n = input.shape()[0];
    check_same_shape("linear upstream", &[n, m], upstream.shape())?;

    let mut d_input = Tensor::zeros(input.shape());
    T::gemm(
        n,
        m,
        d,
        upstream.data(),
        strides(m, false),
        weights.data(),
        strides(m, true),
        T::zero(),
        d_input.data_mut(),
    );
    let mut d_weights = Tensor::zeros(&[d, m]);
    T::gemm(
        d,
        n,
        m,
        input.data(),
        strides(d, true),
        upstream.data(),
        strides(m, false),
        T::zero(),
        d_weights.data_mut(),
    );
    let mut d_bias = Tensor::zeros(&[m]);
    for row in upstream.data().chunks_exact(m) {
        for (b, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weights: d_weights,
        bias: d_bias,
    })
}
