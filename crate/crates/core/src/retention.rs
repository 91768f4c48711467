//! Retention gates: transforms taking (previous state, gradient, per-step
//! gate signals) to the next state, plus the projection/normalization
//! operators they need.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log/logit-domain floor applied before log, logit, and division.
pub const EPS_FLOOR: f64 = 1e-12;
/// Norm guard for the Lq normalization denominator.
pub const EPS_NORM: f64 = 1e-12;

/// Per-step gate signal: a scalar shared by every parameter, a length-d
/// channel vector broadcast per output row of a matrix state, or a
/// pre-expanded params-shaped buffer (used for MLP parameter layouts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Scalar(f64),
    Channel(Vec<f64>),
    Full(Vec<f64>),
}

impl Signal {
    /// Resolve to one value per flat entry of a state with the given dims.
    /// Channel signals require a 2-d state and broadcast over its rows.
    pub fn expand(&self, dims: &[usize]) -> Result<ExpandedSignal<'_>> {
        let len: usize = dims.iter().product();
        match self {
            Signal::Scalar(s) => Ok(ExpandedSignal::Scalar(*s)),
            Signal::Channel(c) => {
                if dims.len() != 2 || c.len() != dims[0] {
                    return Err(Error::shape(format!(
                        "channel signal of length {} for state dims {:?}",
                        c.len(),
                        dims
                    )));
                }
                Ok(ExpandedSignal::PerRow { values: c, cols: dims[1] })
            }
            Signal::Full(f) => {
                if f.len() != len {
                    return Err(Error::shape(format!(
                        "full signal length {} vs state length {}",
                        f.len(),
                        len
                    )));
                }
                Ok(ExpandedSignal::Full(f))
            }
        }
    }
}

pub enum ExpandedSignal<'a> {
    Scalar(f64),
    PerRow { values: &'a [f64], cols: usize },
    Full(&'a [f64]),
}

impl ExpandedSignal<'_> {
    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        match self {
            ExpandedSignal::Scalar(s) => *s,
            ExpandedSignal::PerRow { values, cols } => values[idx / cols],
            ExpandedSignal::Full(f) => f[idx],
        }
    }
}

/// Gate signals for one step. `alpha` is the retention rate in [0,1],
/// `eta` the learning rate; the remaining fields are kind-specific.
#[derive(Clone, Debug)]
pub struct GateSignals {
    pub alpha: Signal,
    pub eta: Signal,
    /// soft-threshold width for the local elastic-net gate
    pub gamma: f64,
    /// simplex mass for KL/f-divergence gates
    pub c: f64,
}

impl GateSignals {
    pub fn scalar(alpha: f64, eta: f64) -> Self {
        GateSignals {
            alpha: Signal::Scalar(alpha),
            eta: Signal::Scalar(eta),
            gamma: 0.0,
            c: 1.0,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_mass(mut self, c: f64) -> Self {
        self.c = c;
        self
    }
}

/// Normalization slice policy for simplex-constrained gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePolicy {
    WholeTensor,
    PerRow,
}

impl Default for SlicePolicy {
    fn default() -> Self {
        SlicePolicy::PerRow
    }
}

impl SlicePolicy {
    /// Slice ranges over the flat data of a state tensor.
    pub fn slices(&self, dims: &[usize]) -> Vec<Range<usize>> {
        let len: usize = dims.iter().product();
        match self {
            SlicePolicy::WholeTensor => vec![0..len],
            SlicePolicy::PerRow => {
                if dims.len() == 2 {
                    let (r, c) = (dims[0], dims[1]);
                    (0..r).map(|i| i * c..(i + 1) * c).collect()
                } else {
                    vec![0..len]
                }
            }
        }
    }
}

/// Monotone scalar maps usable as the inverse-derivative hook of the
/// f-divergence gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotoneMap {
    Exp,
    Sigmoid,
}

impl MonotoneMap {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            MonotoneMap::Exp => x.exp(),
            MonotoneMap::Sigmoid => sigmoid(x),
        }
    }
}

/// Gate families; see the per-step functions for the exact transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RetentionGate {
    /// W <- alpha (.) W - eta (.) grad
    Decay,
    /// accumulator A <- alpha (.) A - eta (.) grad, W <- A / ||A||_q^(q-2);
    /// `dual_exponent` switches the norm exponent to p = q/(q-1)
    LqDual {
        q: f64,
        #[serde(default)]
        dual_exponent: bool,
    },
    /// W <- c softmax(alpha log W - eta grad) per slice
    KlSoftmax {
        #[serde(default = "default_mass")]
        c: f64,
        #[serde(default)]
        slice: SlicePolicy,
    },
    /// W <- soft_threshold_gamma(alpha (.) W - eta (.) grad)
    ElasticLocal {
        #[serde(default)]
        smooth: bool,
    },
    /// A <- A - eta grad, W <- soft_threshold_(eta/alpha)(A)
    ElasticFtrl,
    /// W <- W (.) g(-zeta - eta grad) with zeta solved per slice so the
    /// slice mass stays c
    FDivergence {
        map: MonotoneMap,
        #[serde(default = "default_mass")]
        c: f64,
        #[serde(default)]
        slice: SlicePolicy,
    },
    /// W <- sigmoid(logit(W) - eta grad), entries stay in (0,1)
    BregmanSigmoid,
}

fn default_mass() -> f64 {
    1.0
}

impl RetentionGate {
    pub fn validate(&self) -> Result<()> {
        match self {
            RetentionGate::LqDual { q, .. } if *q <= 1.0 => {
                Err(Error::Contract(format!("lq gate needs q > 1, got {q}")))
            }
            RetentionGate::KlSoftmax { c, .. } | RetentionGate::FDivergence { c, .. }
                if *c <= 0.0 =>
            {
                Err(Error::Contract("simplex mass c must be > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Whether this gate keeps a separate accumulator state.
    pub fn uses_accumulator(&self) -> bool {
        matches!(
            self,
            RetentionGate::LqDual { .. } | RetentionGate::ElasticFtrl
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// S_gamma(z) = sign(z) max(0, |z| - gamma).
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    z.signum() * (z.abs() - gamma).max(0.0)
}

/// Smooth surrogate |z| atan(z/gamma) / (pi/2); identity when gamma = 0.
pub fn soft_threshold_smooth(z: f64, gamma: f64) -> f64 {
    if gamma <= 0.0 {
        return z;
    }
    z.abs() * (z / gamma).atan() / std::f64::consts::FRAC_PI_2
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Elementwise affine gate: W_next = alpha (.) W_prev - eta (.) grad.
pub fn step_decay(w_prev: &Tensor, grad: &Tensor, sig: &GateSignals) -> Result<Tensor> {
    check_same_shape(w_prev, grad, "step_decay")?;
    let alpha = sig.alpha.expand(w_prev.dims())?;
    let eta = sig.eta.expand(w_prev.dims())?;
    let mut out = w_prev.clone();
    let g = grad.data();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        *x = alpha.at(i) * *x - eta.at(i) * g[i];
    }
    Ok(out)
}

/// Accumulator update plus Lq-norm normalization:
/// A_next = alpha (.) A - eta (.) grad, W_next = A_next / ||A_next||_q^(q-2)
/// (with the q = 2 exponent collapsing to the identity).
pub fn step_lq(
    a_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    q: f64,
    dual_exponent: bool,
) -> Result<(Tensor, Tensor)> {
    if q <= 1.0 {
        return Err(Error::Contract(format!("step_lq needs q > 1, got {q}")));
    }
    let a_next = step_decay(a_prev, grad, sig)?;
    let exponent_norm = if dual_exponent { q / (q - 1.0) } else { q };
    let w_next = lq_normalize(&a_next, exponent_norm);
    Ok((a_next, w_next))
}

/// A / max(||A||_q, eps)^(q-2).
pub fn lq_normalize(a: &Tensor, q: f64) -> Tensor {
    if q == 2.0 {
        return a.clone();
    }
    let norm = a.norm_lq(q).max(EPS_NORM);
    a.scale(1.0 / norm.powf(q - 2.0))
}

/// Multiplicative-weights step on the scaled simplex:
/// per slice, W_next = c softmax(alpha log(clamp(W_prev)) - eta grad).
pub fn step_kl_softmax(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    slice: SlicePolicy,
) -> Result<Tensor> {
    step_kl_softmax_slices(w_prev, grad, sig, &slice.slices(w_prev.dims()))
}

/// Same transform over explicit flat ranges; entries outside every range
/// pass through untouched.
pub fn step_kl_softmax_slices(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    slices: &[Range<usize>],
) -> Result<Tensor> {
    check_same_shape(w_prev, grad, "step_kl_softmax")?;
    let alpha = sig.alpha.expand(w_prev.dims())?;
    let eta = sig.eta.expand(w_prev.dims())?;
    let mut out = w_prev.clone();
    for range in slices {
        if w_prev.data()[range.clone()].iter().any(|&x| x < 0.0) {
            return Err(Error::Contract(
                "kl softmax gate: previous state has negative entries".into(),
            ));
        }
        let base = range.start;
        let logits: Vec<f64> = w_prev.data()[range.clone()]
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let i = base + j;
                alpha.at(i) * w.max(EPS_FLOOR).ln() - eta.at(i) * grad.data()[i]
            })
            .collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.data_mut()[base + j] = sig.c * e / z;
        }
    }
    Ok(out)
}

/// Soft-thresholded decay: W_next = S_gamma(alpha (.) W - eta (.) grad).
pub fn step_elastic_local(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    smooth: bool,
) -> Result<Tensor> {
    if sig.gamma < 0.0 {
        return Err(Error::Contract("elastic gate needs gamma >= 0".into()));
    }
    let pre = step_decay(w_prev, grad, sig)?;
    let g = sig.gamma;
    Ok(pre.map(|z| {
        if smooth {
            soft_threshold_smooth(z, g)
        } else {
            soft_threshold(z, g)
        }
    }))
}

/// Accumulate-then-threshold: A_next = A - eta (.) grad,
/// W_next = S_(eta/alpha)(A_next).
pub fn step_elastic_ftrl(
    a_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
) -> Result<(Tensor, Tensor)> {
    check_same_shape(a_prev, grad, "step_elastic_ftrl")?;
    let eta = sig.eta.expand(a_prev.dims())?;
    let alpha = sig.alpha.expand(a_prev.dims())?;
    let mut a_next = a_prev.clone();
    let g = grad.data();
    for (i, x) in a_next.data_mut().iter_mut().enumerate() {
        *x -= eta.at(i) * g[i];
    }
    let mut w_next = a_next.clone();
    for (i, x) in w_next.data_mut().iter_mut().enumerate() {
        let thresh = eta.at(i) / alpha.at(i).max(EPS_FLOOR);
        *x = soft_threshold(*x, thresh);
    }
    Ok((a_next, w_next))
}

/// General f-divergence gate: W_next = W_prev (.) g(-zeta - eta grad) with
/// the slice offset zeta found by bisection so each slice keeps mass c.
pub fn step_fdiv(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    map: MonotoneMap,
    slice: SlicePolicy,
) -> Result<Tensor> {
    step_fdiv_with(w_prev, grad, sig, &|x| map.apply(x), slice)
}

/// Hook variant of `step_fdiv` for arbitrary strictly increasing maps.
pub fn step_fdiv_with(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    g: &dyn Fn(f64) -> f64,
    slice: SlicePolicy,
) -> Result<Tensor> {
    step_fdiv_slices(w_prev, grad, sig, g, &slice.slices(w_prev.dims()))
}

/// f-divergence step over explicit flat ranges; each range keeps mass c.
pub fn step_fdiv_slices(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
    g: &dyn Fn(f64) -> f64,
    slices: &[Range<usize>],
) -> Result<Tensor> {
    check_same_shape(w_prev, grad, "step_fdiv")?;
    let eta = sig.eta.expand(w_prev.dims())?;
    let mut out = w_prev.clone();
    for range in slices {
        if w_prev.data()[range.clone()].iter().any(|&x| x <= 0.0) {
            return Err(Error::Contract(
                "f-divergence gate: previous state must be entrywise positive".into(),
            ));
        }
        let range = range.clone();
        let base = range.start;
        let n = range.len();
        let mass = |zeta: f64| -> f64 {
            let mut s = 0.0;
            for j in 0..n {
                let i = base + j;
                s += w_prev.data()[i] * g(-zeta - eta.at(i) * grad.data()[i]);
            }
            s
        };
        // mass(zeta) is strictly decreasing; expand the bracket until the
        // residual changes sign, then bisect
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        let mut doubles = 0;
        while mass(lo) < sig.c {
            lo *= 2.0;
            doubles += 1;
            if doubles > 200 {
                return Err(Error::Numerical(
                    "f-divergence gate: bracket expansion failed".into(),
                ));
            }
        }
        while mass(hi) > sig.c {
            hi *= 2.0;
            doubles += 1;
            if doubles > 200 {
                return Err(Error::Numerical(
                    "f-divergence gate: bracket expansion failed".into(),
                ));
            }
        }
        let mut zeta = 0.5 * (lo + hi);
        for _ in 0..200 {
            let m = mass(zeta);
            if (m - sig.c).abs() <= 1e-10 {
                break;
            }
            if m > sig.c {
                lo = zeta;
            } else {
                hi = zeta;
            }
            zeta = 0.5 * (lo + hi);
        }
        if (mass(zeta) - sig.c).abs() > 1e-10 {
            return Err(Error::Numerical(
                "f-divergence gate: bisection did not reach tolerance".into(),
            ));
        }
        for j in 0..n {
            let i = base + j;
            out.data_mut()[i] = w_prev.data()[i] * g(-zeta - eta.at(i) * grad.data()[i]);
        }
    }
    Ok(out)
}

/// Mirror step through the sigmoid link: W_next = sigmoid(logit(W) - eta grad).
pub fn step_bregman_sigmoid(
    w_prev: &Tensor,
    grad: &Tensor,
    sig: &GateSignals,
) -> Result<Tensor> {
    check_same_shape(w_prev, grad, "step_bregman_sigmoid")?;
    if w_prev.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Contract(
            "bregman sigmoid gate: previous state must lie in [0,1]".into(),
        ));
    }
    let eta = sig.eta.expand(w_prev.dims())?;
    let mut out = w_prev.clone();
    let g = grad.data();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let w = x.clamp(EPS_FLOOR, 1.0 - EPS_FLOOR);
        let logit = (w / (1.0 - w)).ln();
        // clamp the output too: sigmoid saturates to exactly 0.0 or 1.0 in
        // finite precision once |argument| passes ~37
        *x = sigmoid(logit - eta.at(i) * g[i]).clamp(EPS_FLOOR, 1.0 - EPS_FLOOR);
    }
    Ok(out)
}
