use super::{KernelError, Scalar, Tensor};

/// Row-wise softmax of `(batch, classes)` logits, computed in `f64`.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = logits.shape().get(1).copied().unwrap_or(0);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>), KernelError> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(KernelError::DataLength {
                shape: logits.shape().to_vec(),
                len: logits.len(),
            })
        }
    };
    if b == 0 || labels.len() != b {
        return Err(KernelError::EmptyBatch);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(KernelError::Label { label, classes: k });
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[b, k]);
    for (bi, (p, &y)) in probs.iter().zip(labels).enumerate() {
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, &pc) in p.iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            grad.data_mut()[bi * k + c] = T::of((pc - target) / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}
