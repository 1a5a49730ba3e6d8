use super::{wrong_cache, LayerCache, Scalar, Tensor};
use crate::{Error, Result};

/// Output length of one pooled axis: `⌊(len − window) / stride⌋ + 1`.
pub fn pooled_len(len: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || len < window {
        None
    } else {
        Some((len - window) / stride + 1)
    }
}

/// Max pooling; argmax positions (first occurrence on ties) go into the cache.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (n, c, h, w) = input.dims4("maxpool input")?;
    let (Some(oh), Some(ow)) = (pooled_len(h, window, stride), pooled_len(w, window, stride)) else {
        return Err(Error::Dimension(format!(
            "maxpool window {window}x{window} (stride {stride}) does not fit input {h}x{w}"
        )));
    };

    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for idx in row..row + window {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let cache = LayerCache::MaxPool {
        input_shape: input.shape().to_vec(),
        argmax,
    };
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, cache))
}

pub fn maxpool_backward<T: Scalar>(upstream: &Tensor<T>, cache: &LayerCache<T>) -> Result<Tensor<T>> {
    let LayerCache::MaxPool { input_shape, argmax } = cache else {
        return Err(wrong_cache("maxpool", cache));
    };
    if upstream.len() != argmax.len() {
        return Err(Error::Dimension(format!(
            "maxpool upstream has {} elements, forward produced {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut d_input = Tensor::zeros(input_shape);
    let d = d_input.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(d_input)
}
