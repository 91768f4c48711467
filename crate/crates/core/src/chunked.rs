//! Chunkwise-parallel evaluation of gated gradient-descent instances.
//!
//! Within a chunk, every gradient is evaluated at the chunk-start state, so
//! the in-chunk recursion is affine in the running state and collapses to a
//! handful of dense contractions:
//!
//!   X_b = prod(alpha) (.) X_0 - sum_i eta_i suffix_i(alpha) (.) g_i(X_start)
//!
//! `stale_sequential` is the defining oracle (a plain loop over the exact
//! same staleness rule); `chunked_batched` must reproduce its chunk-boundary
//! states. The simplex-gated model gets its own pair of routines: one full
//! nonlinear step on the first token of each chunk, linear accumulation for
//! the rest.

use crate::bias::BiasSignals;
use crate::error::{Error, Result};
use crate::memory::{Memory, MemoryState};
use crate::models::{MirasModel, MirasSpec, StepSignals};
use crate::optimizer::InnerLearner;
use crate::retention::{
    lq_normalize, step_kl_softmax_slices, GateSignals, RetentionGate, Signal, SlicePolicy,
    EPS_FLOOR,
};
use crate::tensor::Tensor;

/// One (key, value) pair per token plus its gate signals.
pub struct TokenStream {
    pub keys: Vec<Vec<f64>>,
    pub vals: Vec<Vec<f64>>,
    pub signals: Vec<StepSignals>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys.len() != self.vals.len() || self.keys.len() != self.signals.len() {
            return Err(Error::shape(
                "token stream: keys, values and signals must have equal length".to_string(),
            ));
        }
        Ok(())
    }
}

fn check_chunkable(spec: &MirasSpec) -> Result<()> {
    if !matches!(spec.learner, InnerLearner::Gd) {
        return Err(Error::Contract(
            "chunked evaluation is defined for the plain gd learner".into(),
        ));
    }
    if spec.decay_before_grad {
        return Err(Error::Contract(
            "chunked evaluation uses the post-grad decay composition".into(),
        ));
    }
    match spec.gate {
        RetentionGate::Decay | RetentionGate::LqDual { .. } => Ok(()),
        RetentionGate::KlSoftmax { .. } => Err(Error::Contract(
            "simplex-gated models chunk through memora_chunked".into(),
        )),
        _ => Err(Error::Contract(
            "chunked evaluation supports the decay and lq gates".into(),
        )),
    }
}

/// The defining oracle: a plain per-token loop where each gradient is
/// evaluated at the chunk-start state. Returns the state after every chunk
/// boundary (the final partial chunk included).
pub fn stale_sequential(
    spec: &MirasSpec,
    stream: &TokenStream,
    b: usize,
    seed: u64,
) -> Result<Vec<MemoryState>> {
    check_chunkable(spec)?;
    stream.validate()?;
    if b == 0 {
        return Err(Error::Contract("chunk size must be >= 1".into()));
    }
    let mut model = MirasModel::from_spec(spec, seed)?;
    let mut out = Vec::new();
    let mut t = 0;
    while t < stream.len() {
        let end = (t + b).min(stream.len());
        let stale = model.memory.clone();
        for i in t..end {
            model.step_with_stale(&stale, &stream.keys[i], &stream.vals[i], &stream.signals[i])?;
        }
        out.push(model.state());
        t = end;
    }
    Ok(out)
}

/// Per-entry signal buffer for one token: scalar or fully expanded.
#[derive(Clone)]
enum Expanded {
    Scalar(f64),
    Per(Vec<f64>),
}

impl Expanded {
    #[inline]
    fn at(&self, i: usize) -> f64 {
        match self {
            Expanded::Scalar(s) => *s,
            Expanded::Per(v) => v[i],
        }
    }

    fn times(&self, other: &Expanded) -> Expanded {
        match (self, other) {
            (Expanded::Scalar(a), Expanded::Scalar(b)) => Expanded::Scalar(a * b),
            (Expanded::Scalar(a), Expanded::Per(b)) => {
                Expanded::Per(b.iter().map(|x| a * x).collect())
            }
            (Expanded::Per(a), Expanded::Scalar(b)) => {
                Expanded::Per(a.iter().map(|x| x * b).collect())
            }
            (Expanded::Per(a), Expanded::Per(b)) => {
                Expanded::Per(a.iter().zip(b).map(|(x, y)| x * y).collect())
            }
        }
    }
}

/// Expand a gate signal against the state layout: matrix states broadcast a
/// channel per output row, MLP states through the parameter layout.
fn expand_state_signal(sig: &Signal, memory: &Memory, state_len: usize) -> Result<Expanded> {
    match sig {
        Signal::Scalar(s) => Ok(Expanded::Scalar(*s)),
        Signal::Channel(_) | Signal::Full(_) => {
            let full = match sig {
                Signal::Channel(c) => memory.expand_channel(c)?,
                Signal::Full(f) => f.clone(),
                Signal::Scalar(_) => unreachable!(),
            };
            if full.len() != state_len {
                return Err(Error::shape("signal length vs state length".to_string()));
            }
            Ok(Expanded::Per(full))
        }
    }
}

/// Batched evaluation: one pass of dense contractions per chunk, boundary
/// states identical to `stale_sequential` up to float reassociation. Only
/// chunk-boundary states are materialized.
pub fn chunked_batched(
    spec: &MirasSpec,
    stream: &TokenStream,
    b: usize,
    seed: u64,
) -> Result<Vec<MemoryState>> {
    check_chunkable(spec)?;
    stream.validate()?;
    if b == 0 {
        return Err(Error::Contract("chunk size must be >= 1".into()));
    }
    let mut model = MirasModel::from_spec(spec, seed)?;
    let n = model.memory.param_len();
    let (q_norm, is_lq) = match spec.gate {
        RetentionGate::LqDual { q, dual_exponent } => {
            (if dual_exponent { q / (q - 1.0) } else { q }, true)
        }
        _ => (2.0, false),
    };

    // running in-chunk state: W for the decay gate, A for the lq gate
    let mut x = if is_lq {
        model.accumulator.clone().expect("lq accumulator")
    } else {
        model.memory.params_flat()
    };

    let mut out = Vec::new();
    let mut t0 = 0;
    while t0 < stream.len() {
        let end = (t0 + b).min(stream.len());
        let width = end - t0;
        let stale = model.memory.clone();

        // per-token eta_i and suffix products suf_i = prod_{j>i} alpha_j
        let mut alphas = Vec::with_capacity(width);
        let mut etas = Vec::with_capacity(width);
        for i in t0..end {
            alphas.push(expand_state_signal(&stream.signals[i].alpha, &model.memory, n)?);
            etas.push(expand_state_signal(&stream.signals[i].eta, &model.memory, n)?);
        }
        // suffixes[i] = prod of alphas over (i+1 .. width)
        let mut suffixes: Vec<Expanded> = vec![Expanded::Scalar(1.0); width];
        for i in (0..width.saturating_sub(1)).rev() {
            suffixes[i] = suffixes[i + 1].times(&alphas[i + 1]);
        }
        let beta_b = suffixes[0].times(&alphas[0]); // prod of all alphas

        // total update: sum_i eta_i suf_i g_i with g_i at the stale state
        let mut delta = vec![0.0; n];
        match &stale {
            Memory::Matrix(m) => {
                // R = W0 K - V in one contraction, then the bias
                // nonlinearity per column
                let (d_v, d_k) = (m.d_v(), m.d_k());
                let mut kmat = Tensor::zeros(&[d_k, width]);
                for (c, i) in (t0..end).enumerate() {
                    if stream.keys[i].len() != d_k || stream.vals[i].len() != d_v {
                        return Err(Error::shape("stream pair dims".to_string()));
                    }
                    for rw in 0..d_k {
                        kmat.set2(rw, c, stream.keys[i][rw]);
                    }
                }
                let pred = m.w.matmul(&kmat)?;
                for (c, i) in (t0..end).enumerate() {
                    let r: Vec<f64> = (0..d_v)
                        .map(|rw| pred.get2(rw, c) - stream.vals[i][rw])
                        .collect();
                    let bias_sig: BiasSignals = delta_signals(&stream.signals[i])?;
                    let u = spec.bias.upstream(&r, &stream.vals[i], &bias_sig)?;
                    // scale by eta_i suf_i per row, contract against k^T
                    for rw in 0..d_v {
                        let s = etas[c].at(rw * d_k) * suffixes[c].at(rw * d_k);
                        let coeff = s * u[rw];
                        if coeff == 0.0 {
                            continue;
                        }
                        let krow = &stream.keys[i];
                        let drow = &mut delta[rw * d_k..(rw + 1) * d_k];
                        for (dj, kj) in drow.iter_mut().zip(krow) {
                            *dj += coeff * kj;
                        }
                    }
                }
            }
            Memory::Mlp(_) => {
                // per-token pullbacks, all at the stale parameters; the
                // accumulation buffer is the only live state
                for (c, i) in (t0..end).enumerate() {
                    let r: Vec<f64> = stale
                        .forward(&stream.keys[i])?
                        .iter()
                        .zip(&stream.vals[i])
                        .map(|(o, t)| o - t)
                        .collect();
                    let bias_sig = delta_signals(&stream.signals[i])?;
                    let u = spec.bias.upstream(&r, &stream.vals[i], &bias_sig)?;
                    let g = stale.grad_params(&stream.keys[i], &u)?;
                    for (j, gj) in g.data().iter().enumerate() {
                        delta[j] += etas[c].at(j) * suffixes[c].at(j) * gj;
                    }
                }
            }
        }

        // X_b = beta_b (.) X_0 - delta, then the end-of-chunk normalization
        for (j, xv) in x.data_mut().iter_mut().enumerate() {
            *xv = beta_b.at(j) * *xv - delta[j];
        }
        if is_lq {
            let w = lq_normalize(&x, q_norm);
            model.memory.set_params_flat(&w)?;
            model.accumulator = Some(x.clone());
        } else {
            model.memory.set_params_flat(&x)?;
        }
        out.push(model.state());
        t0 = end;
    }
    Ok(out)
}

fn delta_signals(sig: &StepSignals) -> Result<BiasSignals> {
    use crate::bias::DeltaSignal;
    let delta = match &sig.delta {
        None => None,
        Some(Signal::Scalar(d)) => Some(DeltaSignal::Scalar(*d)),
        Some(Signal::Channel(c)) => Some(DeltaSignal::Channel(c.clone())),
        Some(Signal::Full(_)) => {
            return Err(Error::Contract(
                "delta signal must be scalar or channel-wise".into(),
            ))
        }
    };
    Ok(BiasSignals { delta })
}

/// One full nonlinear simplex step at a chunk boundary using the chunk's
/// first pair; the in-chunk updates that follow it run in the linear
/// (log-free) regime. The incoming state is floored into the positive
/// orthant first, since the linear phase of the previous chunk may have
/// left the simplex.
pub fn memora_chunk_boundary(
    model: &mut MirasModel,
    k: &[f64],
    v: &[f64],
    sig: &StepSignals,
) -> Result<()> {
    let (c, per_row) = match model.spec.gate {
        RetentionGate::KlSoftmax { c, slice } => (c, slice == SlicePolicy::PerRow),
        _ => {
            return Err(Error::Contract(
                "memora_chunk_boundary needs the kl softmax gate".into(),
            ))
        }
    };
    let slices = model.memory.simplex_slices(per_row);
    let mut flat = model.memory.params_flat();
    for range in slices.iter().cloned() {
        for x in &mut flat.data_mut()[range] {
            *x = x.max(EPS_FLOOR);
        }
    }
    model.memory.set_params_flat(&flat)?;

    let grad = model
        .spec
        .bias
        .grad_with(&model.memory, k, v, &delta_signals(sig)?)?;
    let gate_sig = GateSignals {
        alpha: flatten_for(&sig.alpha, &model.memory)?,
        eta: flatten_for(&sig.eta, &model.memory)?,
        gamma: 0.0,
        c,
    };
    let next = step_kl_softmax_slices(&model.memory.params_flat(), &grad, &gate_sig, &slices)?;
    model.memory.set_params_flat(&next)
}

fn flatten_for(sig: &Signal, memory: &Memory) -> Result<Signal> {
    match sig {
        Signal::Channel(c) => Ok(Signal::Full(memory.expand_channel(c)?)),
        other => Ok(other.clone()),
    }
}

/// Chunked trajectory of the simplex-gated model: lag-token boundary steps
/// plus stale linear decay inside each chunk. Returns the post-boundary
/// state of every chunk.
pub fn memora_chunked(
    spec: &MirasSpec,
    stream: &TokenStream,
    b: usize,
    seed: u64,
) -> Result<Vec<MemoryState>> {
    stream.validate()?;
    if b == 0 {
        return Err(Error::Contract("chunk size must be >= 1".into()));
    }
    if !matches!(spec.gate, RetentionGate::KlSoftmax { .. }) {
        return Err(Error::Contract(
            "memora_chunked needs the kl softmax gate".into(),
        ));
    }
    let mut model = MirasModel::from_spec(spec, seed)?;
    let mut out = Vec::new();
    let mut t0 = 0;
    while t0 < stream.len() {
        let end = (t0 + b).min(stream.len());
        memora_chunk_boundary(
            &mut model,
            &stream.keys[t0],
            &stream.vals[t0],
            &stream.signals[t0],
        )?;
        out.push(model.state());
        // linear regime: plain decay steps with gradients at the
        // post-boundary state
        let stale = model.memory.clone();
        let mut x = model.memory.params_flat();
        for i in t0 + 1..end {
            let grad = spec
                .bias
                .grad_with(&stale, &stream.keys[i], &stream.vals[i], &delta_signals(&stream.signals[i])?)?;
            let alpha = expand_state_signal(&stream.signals[i].alpha, &model.memory, x.len())?;
            let eta = expand_state_signal(&stream.signals[i].eta, &model.memory, x.len())?;
            for (j, xv) in x.data_mut().iter_mut().enumerate() {
                *xv = alpha.at(j) * *xv - eta.at(j) * grad.data()[j];
            }
        }
        model.memory.set_params_flat(&x)?;
        t0 = end;
    }
    Ok(out)
}

/// Final-state gap between the chunked trajectory at width b and the fully
/// sequential one; reported by the harness as a staleness metric, with no
/// ordering asserted.
pub fn staleness_gap(spec: &MirasSpec, stream: &TokenStream, b: usize, seed: u64) -> Result<f64> {
    let stale = stale_sequential(spec, stream, b, seed)?;
    let seq = stale_sequential(spec, stream, 1, seed)?;
    let last_stale = stale.last().ok_or_else(|| Error::Contract("empty stream".into()))?;
    let last_seq = seq.last().ok_or_else(|| Error::Contract("empty stream".into()))?;
    Ok(last_stale.params.max_abs_diff(&last_seq.params))
}
