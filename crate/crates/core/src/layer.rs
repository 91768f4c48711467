//! The full sequence-layer block around a memory: q/k/v projections, short
//! causal depthwise convolution, key/query normalization, low-rank
//! channel-wise gate signals, and gated + normalized readout. Layer weights
//! are fixed seeded values; the inner loop is the object under test.

use crate::error::{Error, Result};
use crate::models::{MirasModel, MirasSpec, StepSignals};
use crate::retention::{sigmoid, softplus, Signal};
use crate::tensor::{Rng, Tensor};

pub const CONV_WIDTH: usize = 4;
const EPS_NORM: f64 = 1e-12;

/// Low-rank factor pair emitting one channel-wise signal:
/// raw = up (down x), then the per-signal squashing.
#[derive(Clone, Debug)]
pub struct LowRank {
    /// d x r
    pub down: Tensor,
    /// r x d
    pub up: Tensor,
}

impl LowRank {
    fn seeded(d: usize, r: usize, rng: &mut Rng) -> Self {
        LowRank {
            down: rng.normal_tensor(&[r, d], 0.02),
            up: rng.normal_tensor(&[d, r], 0.02),
        }
    }

    fn raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        let low = self.down.matvec(x)?;
        self.up.matvec(&low)
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// Fixed seeded weights of one layer block.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub d: usize,
    pub rank: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// depthwise kernels, one d x 4 block per path (q, k, v); tap 3 is the
    /// current token
    pub conv_q: Tensor,
    pub conv_k: Tensor,
    pub conv_v: Tensor,
    pub gate_alpha: LowRank,
    pub gate_eta: LowRank,
    pub gate_delta: LowRank,
    pub output_gate: Tensor,
    pub norm_gain: Vec<f64>,
}

impl LayerParams {
    /// All projections normal std 0.02, norm gains one.
    pub fn seeded(d: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank > d {
            return Err(Error::Contract(format!(
                "low-rank width {rank} exceeds model dim {d}"
            )));
        }
        let mut rng = Rng::new(seed).fork(0x1a7e);
        Ok(LayerParams {
            d,
            rank,
            w_q: rng.normal_tensor(&[d, d], 0.02),
            w_k: rng.normal_tensor(&[d, d], 0.02),
            w_v: rng.normal_tensor(&[d, d], 0.02),
            conv_q: rng.normal_tensor(&[d, CONV_WIDTH], 0.02),
            conv_k: rng.normal_tensor(&[d, CONV_WIDTH], 0.02),
            conv_v: rng.normal_tensor(&[d, CONV_WIDTH], 0.02),
            gate_alpha: LowRank::seeded(d, rank, &mut rng),
            gate_eta: LowRank::seeded(d, rank, &mut rng),
            gate_delta: LowRank::seeded(d, rank, &mut rng),
            output_gate: rng.normal_tensor(&[d, d], 0.02),
            norm_gain: vec![1.0; d],
        })
    }

    /// Identity projections and delta-impulse convolutions; useful for
    /// isolating pieces of the block.
    pub fn identity(d: usize) -> Self {
        let mut impulse = Tensor::zeros(&[d, CONV_WIDTH]);
        for i in 0..d {
            impulse.set2(i, CONV_WIDTH - 1, 1.0);
        }
        LayerParams {
            d,
            rank: 1,
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            conv_q: impulse.clone(),
            conv_k: impulse.clone(),
            conv_v: impulse,
            gate_alpha: LowRank {
                down: Tensor::zeros(&[1, d]),
                up: Tensor::zeros(&[d, 1]),
            },
            gate_eta: LowRank {
                down: Tensor::zeros(&[1, d]),
                up: Tensor::zeros(&[d, 1]),
            },
            gate_delta: LowRank {
                down: Tensor::zeros(&[1, d]),
                up: Tensor::zeros(&[d, 1]),
            },
            output_gate: Tensor::eye(d),
            norm_gain: vec![1.0; d],
        }
    }
}

/// Rolling window of the last CONV_WIDTH - 1 post-projection vectors per
/// path, zero-padded at the sequence start.
#[derive(Clone, Debug, Default)]
pub struct ConvHistory {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn conv_causal(kernel: &Tensor, history: &[Vec<f64>], current: &[f64]) -> Vec<f64> {
    let d = current.len();
    let mut out = vec![0.0; d];
    for tap in 0..CONV_WIDTH {
        // tap CONV_WIDTH-1 is the current token, earlier taps reach back
        let src: Option<&[f64]> = if tap == CONV_WIDTH - 1 {
            Some(current)
        } else {
            let back = CONV_WIDTH - 1 - tap;
            if history.len() >= back {
                Some(history[history.len() - back].as_slice())
            } else {
                None
            }
        };
        if let Some(src) = src {
            for i in 0..d {
                out[i] += kernel.get2(i, tap) * src[i];
            }
        }
    }
    out
}

fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < EPS_NORM {
        vec![0.0; x.len()]
    } else {
        x.iter().map(|v| v / norm).collect()
    }
}

/// Project one input through the q/k/v paths: linear map, causal depthwise
/// conv of width 4 over the post-projection history, then l2 normalization
/// of q and k (v stays unnormalized). Pushes the raw projections into the
/// history window.
pub fn project(
    params: &LayerParams,
    x: &[f64],
    history: &mut ConvHistory,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if x.len() != params.d {
        return Err(Error::shape(format!(
            "layer input length {} vs dim {}",
            x.len(),
            params.d
        )));
    }
    let uq = params.w_q.matvec(x)?;
    let uk = params.w_k.matvec(x)?;
    let uv = params.w_v.matvec(x)?;
    let q = l2_normalize(&conv_causal(&params.conv_q, &history.q, &uq));
    let k = l2_normalize(&conv_causal(&params.conv_k, &history.k, &uk));
    let v = conv_causal(&params.conv_v, &history.v, &uv);
    push_window(&mut history.q, uq);
    push_window(&mut history.k, uk);
    push_window(&mut history.v, uv);
    Ok((q, k, v))
}

fn push_window(window: &mut Vec<Vec<f64>>, item: Vec<f64>) {
    window.push(item);
    if window.len() > CONV_WIDTH - 1 {
        window.remove(0);
    }
}

/// Channel-wise gate signals from the low-rank projections:
/// alpha = sigmoid(raw) in (0,1)^d, eta and delta = softplus(raw) > 0.
pub fn gate_signals(params: &LayerParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let alpha = params
        .gate_alpha
        .raw(x)?
        .into_iter()
        .map(sigmoid)
        .collect();
    let eta = params.gate_eta.raw(x)?.into_iter().map(softplus).collect();
    let delta = params
        .gate_delta
        .raw(x)?
        .into_iter()
        .map(softplus)
        .collect();
    Ok((alpha, eta, delta))
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = ms.sqrt();
    if rms < EPS_NORM {
        return vec![0.0; x.len()];
    }
    x.iter()
        .zip(gain)
        .map(|(v, g)| g * v / rms)
        .collect()
}

/// One layer block bound to a memory model.
pub struct Layer {
    pub params: LayerParams,
    pub model: MirasModel,
    history: ConvHistory,
}

impl Layer {
    pub fn new(params: LayerParams, spec: &MirasSpec, seed: u64) -> Result<Self> {
        let model = MirasModel::from_spec(spec, seed)?;
        if model.memory.input_dim() != params.d || model.memory.output_dim() != params.d {
            return Err(Error::shape(
                "layer and memory dims must agree".to_string(),
            ));
        }
        Ok(Layer {
            params,
            model,
            history: ConvHistory::default(),
        })
    }

    /// One token: project, derive signals, write the (k, v) pair into the
    /// memory, read out at q, then gate and normalize.
    pub fn forward_token(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let (q, k, v) = project(&self.params, x, &mut self.history)?;
        let (alpha, eta, delta) = gate_signals(&self.params, x)?;
        let sig = StepSignals {
            alpha: Signal::Channel(alpha),
            eta: Signal::Channel(eta),
            delta: Some(Signal::Channel(delta)),
            theta: None,
            eta_momentum: 0.9,
            gamma: 0.0,
        };
        self.model.step(&k, &v, &sig)?;
        let readout = self.model.query(&q)?;
        let gate = self.params.output_gate.matvec(x)?;
        let normed = rms_norm(&readout, &self.params.norm_gain);
        Ok(gate.iter().zip(&normed).map(|(g, o)| g * o).collect())
    }
}

/// Whole-stream convenience wrapper; output t depends only on inputs 0..=t.
pub fn layer_forward(
    params: &LayerParams,
    spec: &MirasSpec,
    xs: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut layer = Layer::new(params.clone(), spec, seed)?;
    xs.iter().map(|x| layer.forward_token(x)).collect()
}
