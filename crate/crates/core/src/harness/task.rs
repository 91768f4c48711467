//! Synthetic recall tasks: streams of (key, value) pairs plus the queries
//! and targets used to score a model after it has seen the stream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Task family. `d` is the vector dimension, `t` the stream length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// t pairs of unit-norm keys (orthonormalized via QR when t <= d) with
    /// random values; every pair is queried.
    PairRecall { d: usize, t: usize },
    /// PairRecall with ceil(rate * t) values scaled by `scale`; only the
    /// clean pairs are queried.
    NoisyPairRecall {
        d: usize,
        t: usize,
        rate: f64,
        scale: f64,
    },
    /// Correlated-key sequential recall: keys are never orthogonalized and
    /// the whole stream is replayed in order at query time.
    Copy { d: usize, t: usize },
    /// One needle pair hidden among t - 1 distractors; only the needle is
    /// queried.
    SNiahToy {
        d: usize,
        t: usize,
        needle_position: usize,
    },
}

impl TaskSpec {
    pub fn dim(&self) -> usize {
        match *self {
            TaskSpec::PairRecall { d, .. }
            | TaskSpec::NoisyPairRecall { d, .. }
            | TaskSpec::Copy { d, .. }
            | TaskSpec::SNiahToy { d, .. } => d,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            TaskSpec::PairRecall { t, .. }
            | TaskSpec::NoisyPairRecall { t, .. }
            | TaskSpec::Copy { t, .. }
            | TaskSpec::SNiahToy { t, .. } => t,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TaskSpec::PairRecall { d, t } => format!("pair_recall(d={d},t={t})"),
            TaskSpec::NoisyPairRecall { d, t, rate, scale } => {
                format!("noisy_pair_recall(d={d},t={t},rate={rate},scale={scale})")
            }
            TaskSpec::Copy { d, t } => format!("copy(d={d},t={t})"),
            TaskSpec::SNiahToy {
                d,
                t,
                needle_position,
            } => format!("s_niah_toy(d={d},t={t},needle={needle_position})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 || self.len() == 0 {
            return Err(Error::Config("task needs d >= 1 and t >= 1".into()));
        }
        match *self {
            TaskSpec::NoisyPairRecall { t, rate, .. } => {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::Config("outlier rate must lie in [0,1]".into()));
                }
                let outliers = (rate * t as f64).ceil() as usize;
                if outliers > t.saturating_sub(1) {
                    return Err(Error::Config(
                        "outlier count must leave at least one clean pair".into(),
                    ));
                }
                Ok(())
            }
            TaskSpec::SNiahToy {
                t, needle_position, ..
            } => {
                if needle_position >= t {
                    return Err(Error::Config(format!(
                        "needle position {needle_position} outside stream of length {t}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Generated task instance.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub keys: Vec<Vec<f64>>,
    pub vals: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// Two rounds of modified Gram-Schmidt; keeps pairwise dot products at the
/// 1e-15 level for t <= d.
fn orthonormalize(keys: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..keys.len() {
            for j in 0..i {
                let dot: f64 = keys[i].iter().zip(&keys[j]).map(|(a, b)| a * b).sum();
                let proj: Vec<f64> = keys[j].iter().map(|b| dot * b).collect();
                for (a, p) in keys[i].iter_mut().zip(&proj) {
                    *a -= p;
                }
            }
            let norm = keys[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            for a in keys[i].iter_mut() {
                *a /= norm;
            }
        }
    }
}

pub fn gen_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = Rng::new(seed).fork(0x7a5c);
    let d = spec.dim();
    let t = spec.len();
    match *spec {
        TaskSpec::PairRecall { .. } => {
            let mut keys: Vec<Vec<f64>> = (0..t).map(|_| rng.unit_vec(d)).collect();
            if t <= d {
                orthonormalize(&mut keys);
            }
            let vals: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
            Ok(TaskData {
                queries: keys.clone(),
                targets: vals.clone(),
                keys,
                vals,
            })
        }
        TaskSpec::NoisyPairRecall { rate, scale, .. } => {
            // identical base stream to PairRecall on the same seed; the
            // outlier choice comes from a forked stream so rate = 0
            // degenerates exactly
            let mut keys: Vec<Vec<f64>> = (0..t).map(|_| rng.unit_vec(d)).collect();
            if t <= d {
                orthonormalize(&mut keys);
            }
            let mut vals: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
            let n_outliers = (rate * t as f64).ceil() as usize;
            let mut pick = rng.fork(0x07);
            let mut indices: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                let j = (pick.next_u64() % (i as u64 + 1)) as usize;
                indices.swap(i, j);
            }
            let outliers: Vec<usize> = indices[..n_outliers].to_vec();
            for &i in &outliers {
                for x in vals[i].iter_mut() {
                    *x *= scale;
                }
            }
            let mut queries = Vec::new();
            let mut targets = Vec::new();
            for i in 0..t {
                if !outliers.contains(&i) {
                    queries.push(keys[i].clone());
                    targets.push(vals[i].clone());
                }
            }
            Ok(TaskData {
                keys,
                vals,
                queries,
                targets,
            })
        }
        TaskSpec::Copy { .. } => {
            let keys: Vec<Vec<f64>> = (0..t).map(|_| rng.unit_vec(d)).collect();
            let vals: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
            Ok(TaskData {
                queries: keys.clone(),
                targets: vals.clone(),
                keys,
                vals,
            })
        }
        TaskSpec::SNiahToy {
            needle_position, ..
        } => {
            let keys: Vec<Vec<f64>> = (0..t).map(|_| rng.unit_vec(d)).collect();
            let vals: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
            Ok(TaskData {
                queries: vec![keys[needle_position].clone()],
                targets: vec![vals[needle_position].clone()],
                keys,
                vals,
            })
        }
    }
}
