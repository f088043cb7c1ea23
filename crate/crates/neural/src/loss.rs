use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean of `-ln softmax(logits)[target]` over rows with `mask[r]` set, and
/// its gradient with respect to `logits` (`softmax - one_hot`, scaled by the
/// number of counted rows and zero on masked rows).
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor<T>)> {
    let (rows, v) = (logits.rows(), logits.last_dim());
    if targets.len() != rows || mask.len() != rows {
        return shape_err(
            "softmax_cross_entropy",
            format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
        );
    }
    if targets.iter().zip(mask).any(|(&t, &m)| m && t >= v) {
        return shape_err("softmax_cross_entropy", format!("target outside vocabulary of {v}"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for (r, row) in logits.data().chunks(v).enumerate() {
        if !mask[r] {
            continue;
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += (log_sum - row[targets[r]]).to_f64().unwrap();
        let scale = T::one() / T::from_usize(count).unwrap();
        for j in 0..v {
            let p = (row[j] - log_sum).exp();
            let one_hot = if j == targets[r] { T::one() } else { T::zero() };
            grad[r * v + j] = (p - one_hot) * scale;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, Tensor::new(logits.shape(), grad)?))
}
