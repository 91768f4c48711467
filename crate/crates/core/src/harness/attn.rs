//! Softmax-attention baseline: the non-parametric memory that keeps every
//! pair and retrieves by kernel-weighted averaging.

use crate::error::{Error, Result};

/// softmax(<q, k_j> / temperature)-weighted sum of the stored values.
pub fn attn_baseline_query(
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    q: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Contract("attention baseline: empty store".into()));
    }
    if keys.len() != values.len() {
        return Err(Error::shape("attention baseline: key/value count".to_string()));
    }
    if temperature <= 0.0 {
        return Err(Error::Contract("attention temperature must be > 0".into()));
    }
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            if k.len() != q.len() {
                return Err(Error::shape("attention baseline: key length".to_string()));
            }
            Ok(k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / temperature)
        })
        .collect::<Result<_>>()?;
    let m = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let weights: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let d_v = values[0].len();
    let mut out = vec![0.0; d_v];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    Ok(out)
}

/// Scale-matched default: 1 / sqrt(d).
pub fn default_temperature(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}
