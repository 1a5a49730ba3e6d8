use rand::Rng;

use super::{check_same_shape, wrong_cache, LayerCache, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, LayerCache<T>) {
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    (out, LayerCache::Relu { input: input.clone() })
}

/// Passes upstream where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(upstream: &Tensor<T>, cache: &LayerCache<T>) -> Result<Tensor<T>> {
    let LayerCache::Relu { input } = cache else {
        return Err(wrong_cache("relu", cache));
    };
    check_same_shape("relu upstream", input.shape(), upstream.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}

/// Inverted dropout. In train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 − rate)`; eval mode is the identity.
/// The cache is `None` in eval mode.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask_data = (0..input.len())
        .map(|_| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = Tensor::from_vec(input.shape(), mask_data)?;
    let (out, cache) = dropout_with_mask(input, mask)?;
    Ok((out, Some(cache)))
}

/// Applies a precomputed multiplicative mask.
pub fn dropout_with_mask<T: Scalar>(input: &Tensor<T>, mask: Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>)> {
    check_same_shape("dropout mask", input.shape(), mask.shape())?;
    let data = input.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape(), data)?, LayerCache::Dropout { mask }))
}

pub fn dropout_backward<T: Scalar>(upstream: &Tensor<T>, cache: &LayerCache<T>) -> Result<Tensor<T>> {
    let LayerCache::Dropout { mask } = cache else {
        return Err(wrong_cache("dropout", cache));
    };
    check_same_shape("dropout upstream", mask.shape(), upstream.shape())?;
    let data = upstream.data().iter().zip(mask.data()).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(upstream.shape(), data)
}
