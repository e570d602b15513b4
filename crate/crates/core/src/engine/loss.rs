use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `[batch, classes]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), and its
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut grad = logits.data().to_vec();
    let mut loss = 0.0;
    for (row, &y) in grad.chunks_exact_mut(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / b as f64;
        }
        row[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean squared error over all elements, and its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}
