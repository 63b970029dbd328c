use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<(S, Tensor<S>)> {
    pred.expect_shape(target.shape())?;
    if pred.is_empty() {
        return Err(Error::EmptyInput("mse of empty tensors".into()));
    }
    let n = S::of(pred.len() as f64);
    let diff = pred.zip_map(target, |a, b| a - b)?;
    let loss = diff.data().iter().map(|&d| d * d).sum::<S>() / n;
    let two = S::of(2.0);
    Ok((loss, diff.map(|d| two * d / n)))
}

/// Numerically stable softmax of one row.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax cross-entropy averaged over the batch of `[N, K]` logits.
///
/// Gradient is `(softmax - onehot) / N`.
pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross entropy needs [N, K] logits for {} labels, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("cross entropy on non-finite logits".into()));
    }
    let k = logits.shape()[1];
    let n = S::of(labels.len() as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = S::zero();
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.data_mut().chunks_exact_mut(k))
        .zip(labels)
    {
        if label >= k {
            return Err(Error::Shape(format!("label {label} out of {k} classes")));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
        loss += lse - row[label];
        for (j, gv) in g.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *gv = (p - if j == label { S::one() } else { S::zero() }) / n;
        }
    }
    Ok((loss / n, grad))
}
