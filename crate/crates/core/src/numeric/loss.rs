use super::tensor::Tensor2;
use crate::{Error, Result};

/// Numerically stable row softmax and log-softmax.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(t.rows(), t.cols());
    for r in 0..t.rows() {
        let ls = log_softmax_row(t.row(r));
        out.row_mut(r).iter_mut().zip(ls).for_each(|(o, l)| *o = l.exp());
    }
    out
}

/// Mean cross entropy of `logits` against `labels` and its gradient with
/// respect to the logits, `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let c = logits.cols();
    let b = labels.len();
    if b == 0 {
        return Ok((0.0, Tensor2::zeros(0, c)));
    }
    let mut grad = Tensor2::zeros(b, c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Label { label: y, num_classes: c });
        }
        let ls = log_softmax_row(logits.row(r));
        loss -= ls[y];
        for (j, (g, l)) in grad.row_mut(r).iter_mut().zip(&ls).enumerate() {
            *g = (l.exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`; `p` is a constant
/// target, the gradient is taken with respect to `q` only.
pub fn softmax_kl(p_feats: &Tensor2, q_feats: &Tensor2) -> Result<(f64, Tensor2)> {
    if p_feats.shape() != q_feats.shape() {
        return Err(Error::Shape(format!("softmax_kl: {:?} vs {:?}", p_feats.shape(), q_feats.shape())));
    }
    let (rows, cols) = q_feats.shape();
    let mut grad = Tensor2::zeros(rows, cols);
    if rows == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for r in 0..rows {
        let lp = log_softmax_row(p_feats.row(r));
        let lq = log_softmax_row(q_feats.row(r));
        let mut kl = 0.0;
        for j in 0..cols {
            let p = lp[j].exp();
            kl += p * (lp[j] - lq[j]);
            grad.set(r, j, (lq[j].exp() - p) / rows as f64);
        }
        // tiny negative values are rounding
        loss += kl.max(0.0);
    }
    Ok((loss / rows as f64, grad))
}
