//! Cross-entropy loss with log-sum-exp stabilization and f64 accumulation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean of `-log softmax(logits)[label]` over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    if logits.shape().len() != 2 || logits.n_samples() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        total += ce_sample(logits.sample(i), y, k)?;
    }
    Ok((total / labels.len() as f64) as f32)
}

/// Per-sample cross-entropy without the gradient.
pub fn ce_loss_sample(row: &[f32], y: usize, k: usize) -> Result<f32> {
    ce_sample(row, y, k).map(|l| l as f32)
}

fn ce_sample(row: &[f32], y: usize, k: usize) -> Result<f64> {
    if y >= k {
        return Err(Error::LabelOutOfRange { label: y, n_classes: k });
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + row.iter().map(|&v| ((v as f64) - max).exp()).sum::<f64>().ln();
    Ok(lse - row[y] as f64)
}

/// Per-sample loss and `softmax - onehot` gradient w.r.t. the logits.
pub fn ce_grad_sample(row: &[f32], y: usize, k: usize) -> Result<(f32, Vec<f32>)> {
    let loss = ce_sample(row, y, k)?;
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let mut grad: Vec<f32> = exps.iter().map(|e| (e / denom) as f32).collect();
    grad[y] -= 1.0;
    Ok((loss as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::filled(vec![3, 10], 0.7);
        let loss = cross_entropy(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - (10.0f32).ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn confident_correct_logit_gives_near_zero_loss() {
        let mut row = vec![0.0f32; 5];
        row[2] = 30.0;
        let logits = Tensor::new(vec![1, 5], row).unwrap();
        let loss = cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn matches_high_precision_reference() {
        // Independent route: direct f64 softmax without the log-sum-exp trick.
        let rows = vec![
            vec![0.3f32, -1.2, 2.0],
            vec![-0.5, 0.5, 0.1],
            vec![1.0, 1.0, -3.0],
            vec![4.2, -0.1, 0.0],
        ];
        let labels = [2usize, 0, 1, 0];
        let mut expected = 0.0f64;
        for (row, &y) in rows.iter().zip(&labels) {
            let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            let p = (row[y] as f64).exp() / denom;
            expected += -p.ln();
        }
        expected /= labels.len() as f64;
        let flat: Vec<f32> = rows.concat();
        let logits = Tensor::new(vec![4, 3], flat).unwrap();
        let loss = cross_entropy(&logits, &labels).unwrap() as f64;
        assert!((loss - expected).abs() / expected <= 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn grad_is_softmax_minus_onehot() {
        let row = [0.2f32, -0.4, 1.1];
        let (_, g) = ce_grad_sample(&row, 1, 3).unwrap();
        let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        for (i, &gi) in g.iter().enumerate() {
            let mut want = (row[i] as f64).exp() / denom;
            if i == 1 {
                want -= 1.0;
            }
            assert!((gi as f64 - want).abs() < 1e-6);
        }
        // gradient over logits sums to zero
        let s: f32 = g.iter().sum();
        assert!(s.abs() < 1e-6);
    }
}
