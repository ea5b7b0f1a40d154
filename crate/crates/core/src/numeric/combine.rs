use crate::{Error, Result};

/// `Σ_k weights[k] · vectors[k]`, accumulated from zero in list order.
pub fn weighted_sum(vectors: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or_else(|| Error::Protocol("weighted sum of an empty list".into()))?;
    if vectors.len() != weights.len() {
        return Err(Error::Protocol(format!("{} vectors but {} weights", vectors.len(), weights.len())));
    }
    let len = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::Protocol(format!("vector of length {} among length {len}", bad.len())));
    }
    let mut out = vec![0.0; len];
    for (v, &w) in vectors.iter().zip(weights) {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    Ok(out)
}

/// Element-wise arithmetic mean; the same kernel as [`weighted_sum`] with weights `1/n`.
pub fn mean(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let w = 1.0 / vectors.len() as f64;
    weighted_sum(vectors, &vec![w; vectors.len()])
}
