use super::Matrix;
use crate::error::{Result, SyqError};

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if targets.len() != batch {
        return Err(SyqError::shape("softmax_cross_entropy", batch, targets.len()));
    }
    if batch == 0 {
        return Err(SyqError::InvalidArgument("empty batch".into()));
    }
    let mut grad = Matrix::zeros(batch, classes);
    let mut total = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(SyqError::InvalidArgument(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        total += log_sum - row[t];
        let g = grad.row_mut(b);
        for (j, v) in row.iter().enumerate() {
            g[j] = (v - log_sum).exp() / batch as f64;
        }
        g[t] -= 1.0 / batch as f64;
    }
    Ok((total / batch as f64, grad))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Matrix::zeros(3, 7);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        for b in 0..3 {
            assert!(grad.row(b).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((0.0..1e-300).contains(&loss));
    }

    #[test]
    fn three_class_direct_evaluation() {
        let z = [0.3, -1.2, 2.0];
        let logits = Matrix::from_rows(&[z.to_vec()]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        let direct = -(z[1].exp() / denom).ln();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn bad_target() {
        assert!(softmax_cross_entropy(&Matrix::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
