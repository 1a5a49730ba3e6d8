use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SoftmaxOutput<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub d_logits: Tensor<T>,
}

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("logits")?;
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(probs)
}

/// Mean cross-entropy over the batch, with `d_logits = (probs − onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxOutput<T>> {
    let (n, c) = logits.dims2("logits")?;
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Parameter(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits)?;
    let scale = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    let mut d_logits = probs.clone();
    for ((row, logit_row), &label) in d_logits
        .data_mut()
        .chunks_exact_mut(c)
        .zip(logits.data().chunks_exact(c))
        .zip(labels)
    {
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_total = logit_row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss - (logit_row[label] - max - log_total);
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(SoftmaxOutput {
        loss: loss * scale,
        probs,
        d_logits,
    })
}
