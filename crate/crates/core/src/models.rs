//! Assembled sequence memories: the four-choice model specs, the three
//! shipped variants (lp/Lq, Huber-mixture, KL-softmax), literal
//! reconstructions of the classic recurrent write rules, and the
//! trajectory-equivalence checks that tie the two together.

use serde::{Deserialize, Serialize};

use crate::bias::{AttentionalBias, BiasKind, BiasSignals, DeltaSignal, Smoothing};
use crate::error::{Error, Result};
use crate::memory::{MatrixMemory, Memory, MemorySpec, MemoryState};
use crate::optimizer::{momentum_step, InnerLearner};
use crate::retention::{
    sigmoid, softplus, step_bregman_sigmoid, step_decay, step_elastic_ftrl, step_elastic_local,
    step_fdiv_slices, step_kl_softmax_slices, step_lq, GateSignals, MonotoneMap, RetentionGate,
    Signal, SlicePolicy,
};
use crate::tensor::{Rng, SmoothCfg, Tensor};

/// Per-step inputs to a model step: retention rate, learning rate, the bias
/// threshold override, and the momentum pair when the learner uses one.
#[derive(Clone, Debug)]
pub struct StepSignals {
    pub alpha: Signal,
    pub eta: Signal,
    pub delta: Option<Signal>,
    pub theta: Option<Signal>,
    pub eta_momentum: f64,
    /// soft-threshold width for the local elastic-net gate
    pub gamma: f64,
}

impl StepSignals {
    pub fn scalar(alpha: f64, eta: f64) -> Self {
        StepSignals {
            alpha: Signal::Scalar(alpha),
            eta: Signal::Scalar(eta),
            delta: None,
            theta: None,
            eta_momentum: 0.9,
            gamma: 0.0,
        }
    }

    pub fn with_delta(mut self, delta: Signal) -> Self {
        self.delta = Some(delta);
        self
    }

    fn bias_signals(&self) -> Result<BiasSignals> {
        let delta = match &self.delta {
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
}

/// How the standalone runner produces the per-step signals when no layer
/// block drives them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    Constant {
        alpha: f64,
        eta: f64,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default = "default_theta")]
        theta: f64,
        #[serde(default = "default_eta_momentum")]
        eta_momentum: f64,
    },
    /// alpha = sigmoid(a), eta = softplus(b), delta = softplus(c) from fixed
    /// scalars drawn off the run seed.
    SeededSquashed,
}

fn default_theta() -> f64 {
    0.1
}

fn default_eta_momentum() -> f64 {
    0.9
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec::SeededSquashed
    }
}

impl SignalSpec {
    pub fn realize(&self, seed: u64) -> StepSignals {
        match *self {
            SignalSpec::Constant {
                alpha,
                eta,
                delta,
                theta,
                eta_momentum,
            } => StepSignals {
                alpha: Signal::Scalar(alpha),
                eta: Signal::Scalar(eta),
                delta: delta.map(Signal::Scalar),
                theta: Some(Signal::Scalar(theta)),
                eta_momentum,
                gamma: 0.0,
            },
            SignalSpec::SeededSquashed => {
                let mut rng = Rng::new(seed).fork(0x5169);
                StepSignals {
                    alpha: Signal::Scalar(sigmoid(rng.normal())),
                    eta: Signal::Scalar(softplus(rng.normal())),
                    delta: Some(Signal::Scalar(softplus(rng.normal()))),
                    theta: Some(Signal::Scalar(softplus(rng.normal()) * 0.1)),
                    eta_momentum: sigmoid(rng.normal()),
                    gamma: 0.0,
                }
            }
        }
    }
}

/// The four design choices plus hyperparameters; fully serializable and,
/// together with a seed, uniquely determines the dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirasSpec {
    pub memory: MemorySpec,
    pub bias: AttentionalBias,
    pub gate: RetentionGate,
    #[serde(default)]
    pub learner: InnerLearner,
    #[serde(default)]
    pub signals: SignalSpec,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    /// apply the alpha decay before evaluating the gradient (the
    /// gated-delta composition) instead of after (the default)
    #[serde(default)]
    pub decay_before_grad: bool,
}

fn default_chunk() -> usize {
    16
}

impl MirasSpec {
    pub fn new(memory: MemorySpec, bias: AttentionalBias, gate: RetentionGate) -> Self {
        MirasSpec {
            memory,
            bias,
            gate,
            learner: InnerLearner::Gd,
            signals: SignalSpec::default(),
            chunk_size: 16,
            decay_before_grad: false,
        }
    }

    /// lp attentional bias with the Lq-normalized accumulator gate,
    /// defaults (p, q) = (3, 4), smooth sign/abs.
    pub fn moneta(memory: MemorySpec, p: f64, q: f64) -> Self {
        MirasSpec::new(
            memory,
            AttentionalBias::smoothed(BiasKind::Lp { p }, SmoothCfg::default()),
            RetentionGate::LqDual {
                q,
                dual_exponent: false,
            },
        )
    }

    /// Huber-mixture bias with plain decay retention.
    pub fn yaad(memory: MemorySpec, delta: f64) -> Self {
        MirasSpec::new(
            memory,
            AttentionalBias::new(BiasKind::HuberMixture { delta }),
            RetentionGate::Decay,
        )
    }

    /// l2 bias with the KL-softmax simplex gate; state starts uniform on
    /// each slice.
    pub fn memora(memory: MemorySpec, c: f64) -> Self {
        MirasSpec::new(
            memory,
            AttentionalBias::new(BiasKind::L2),
            RetentionGate::KlSoftmax {
                c,
                slice: SlicePolicy::PerRow,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.bias.validate()?;
        self.gate.validate()?;
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.decay_before_grad && !matches!(self.gate, RetentionGate::Decay) {
            return Err(Error::Config(
                "decay_before_grad is only defined for the decay gate".into(),
            ));
        }
        if matches!(self.learner, InnerLearner::GdMomentum { .. })
            && !matches!(self.gate, RetentionGate::Decay)
        {
            return Err(Error::Config(
                "the momentum learner composes with the decay gate only".into(),
            ));
        }
        if matches!(self.learner, InnerLearner::FtrlQuadratic { .. })
            && !matches!(self.gate, RetentionGate::Decay)
        {
            return Err(Error::Config(
                "the quadratic-ftrl learner carries its own retention; pair it with decay".into(),
            ));
        }
        Ok(())
    }
}

/// One model instance: the four choices bound to live state.
#[derive(Clone, Debug)]
pub struct MirasModel {
    pub spec: MirasSpec,
    pub memory: Memory,
    /// accumulator A for the Lq / elastic-ftrl / quadratic-ftrl states
    pub accumulator: Option<Tensor>,
    /// momentum buffer S
    pub momentum: Option<Tensor>,
}

impl MirasModel {
    pub fn from_spec(spec: &MirasSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed).fork(0xA11C);
        let mut memory = spec.memory.build(&mut rng);

        // simplex gates start from the uniform slice distribution
        if let RetentionGate::KlSoftmax { c, slice } = &spec.gate {
            init_simplex(&mut memory, *c, *slice)?;
        }
        if let RetentionGate::FDivergence { c, slice, .. } = &spec.gate {
            init_simplex(&mut memory, *c, *slice)?;
        }
        // the interval gate starts from the midpoint
        if let RetentionGate::BregmanSigmoid = &spec.gate {
            let mid = Tensor::from_vec(&[memory.param_len()], vec![0.5; memory.param_len()])?;
            memory.set_params_flat(&mid)?;
        }

        let accumulator = if spec.gate.uses_accumulator()
            || matches!(spec.learner, InnerLearner::FtrlQuadratic { .. })
        {
            Some(memory.params_flat())
        } else {
            None
        };
        let momentum = if matches!(spec.learner, InnerLearner::GdMomentum { .. }) {
            Some(Tensor::zeros(&[memory.param_len()]))
        } else {
            None
        };
        Ok(MirasModel {
            spec: spec.clone(),
            memory,
            accumulator,
            momentum,
        })
    }

    pub fn query(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.memory.forward(q)
    }

    pub fn state(&self) -> MemoryState {
        MemoryState {
            params: self.memory.params_flat(),
            aux: self
                .accumulator
                .clone()
                .or_else(|| self.momentum.clone()),
        }
    }

    /// Resolve a channel signal against this memory's parameter layout.
    fn resolve(&self, sig: &Signal) -> Result<Signal> {
        match (sig, &self.memory) {
            (Signal::Channel(_), Memory::Matrix(_)) => Ok(sig.clone()),
            (Signal::Channel(c), Memory::Mlp(_)) => {
                Ok(Signal::Full(self.memory.expand_channel(c)?))
            }
            _ => Ok(sig.clone()),
        }
    }

    fn state_tensor(&self) -> Tensor {
        match &self.memory {
            Memory::Matrix(m) => m.w.clone(),
            Memory::Mlp(_) => self.memory.params_flat(),
        }
    }

    fn set_state_tensor(&mut self, t: Tensor) -> Result<()> {
        let flat = t.clone().reshape(&[t.len()])?;
        self.memory.set_params_flat(&flat)
    }

    fn shape_grad(&self, flat: Tensor) -> Result<Tensor> {
        match &self.memory {
            Memory::Matrix(m) => flat.reshape(&[m.d_v(), m.d_k()]),
            Memory::Mlp(_) => Ok(flat),
        }
    }

    /// Sequential step: gradient at the current state.
    pub fn step(&mut self, k: &[f64], v: &[f64], sig: &StepSignals) -> Result<()> {
        self.step_at(None, k, v, sig)
    }

    /// Step with the gradient evaluated at an explicit (stale) state; the
    /// retention transform still applies to the live state.
    pub fn step_with_stale(
        &mut self,
        stale: &Memory,
        k: &[f64],
        v: &[f64],
        sig: &StepSignals,
    ) -> Result<()> {
        self.step_at(Some(stale), k, v, sig)
    }

    fn step_at(
        &mut self,
        stale: Option<&Memory>,
        k: &[f64],
        v: &[f64],
        sig: &StepSignals,
    ) -> Result<()> {
        let alpha = self.resolve(&sig.alpha)?;
        let eta = self.resolve(&sig.eta)?;
        let bias_sig = sig.bias_signals()?;

        if self.spec.decay_before_grad {
            if stale.is_some() {
                return Err(Error::Contract(
                    "stale-gradient evaluation requires the post-grad decay composition".into(),
                ));
            }
            // gated-delta composition: decay first, gradient at the decayed
            // state, then a pure gradient step
            let decayed = step_decay(
                &self.state_tensor(),
                &Tensor::zeros(self.state_tensor().dims()),
                &GateSignals {
                    alpha: alpha.clone(),
                    eta: Signal::Scalar(0.0),
                    gamma: 0.0,
                    c: 1.0,
                },
            )?;
            self.set_state_tensor(decayed)?;
            let grad = self
                .spec
                .bias
                .grad_with(&self.memory, k, v, &bias_sig)?;
            let grad = self.shape_grad(grad)?;
            let next = step_decay(
                &self.state_tensor(),
                &grad,
                &GateSignals {
                    alpha: Signal::Scalar(1.0),
                    eta,
                    gamma: 0.0,
                    c: 1.0,
                },
            )?;
            return self.set_state_tensor(next);
        }

        let grad_state = stale.unwrap_or(&self.memory);
        let grad = self.spec.bias.grad_with(grad_state, k, v, &bias_sig)?;
        let grad = self.shape_grad(grad)?;
        let gate_sig = GateSignals {
            alpha,
            eta,
            gamma: sig.gamma,
            c: 1.0,
        };

        match &self.spec.learner {
            InnerLearner::GdMomentum {
                titans_literal_sign,
            } => {
                let s_prev = self.momentum.as_ref().expect("momentum buffer").clone();
                let theta = match &sig.theta {
                    Some(t) => self.resolve(t)?,
                    None => Signal::Scalar(default_theta()),
                };
                let flat_w = self.memory.params_flat();
                let flat_grad = grad.clone().reshape(&[grad.len()])?;
                let flat_alpha = match &gate_sig.alpha {
                    Signal::Channel(c) => Signal::Full(self.memory.expand_channel(c)?),
                    other => other.clone(),
                };
                let (w_next, s_next) = momentum_step(
                    &flat_w,
                    &s_prev,
                    &flat_grad,
                    &flat_alpha,
                    &theta,
                    sig.eta_momentum,
                    *titans_literal_sign,
                )?;
                self.momentum = Some(s_next);
                return self.memory.set_params_flat(&w_next);
            }
            InnerLearner::FtrlQuadratic { eta: eta_f } => {
                let acc = self.accumulator.as_ref().expect("ftrl accumulator");
                let flat_grad = grad.clone().reshape(&[grad.len()])?;
                let next_acc = acc.add_scaled(&flat_grad, 1.0)?;
                let w = next_acc.scale(-eta_f);
                self.accumulator = Some(next_acc);
                return self.memory.set_params_flat(&w);
            }
            InnerLearner::Gd => {}
        }

        match self.spec.gate.clone() {
            RetentionGate::Decay => {
                let next = step_decay(&self.state_tensor(), &grad, &gate_sig)?;
                self.set_state_tensor(next)
            }
            RetentionGate::LqDual { q, dual_exponent } => {
                let a_prev = self.accumulator.as_ref().expect("lq accumulator");
                let a_shaped = match &self.memory {
                    Memory::Matrix(m) => a_prev.clone().reshape(&[m.d_v(), m.d_k()])?,
                    Memory::Mlp(_) => a_prev.clone(),
                };
                let (a_next, w_next) = step_lq(&a_shaped, &grad, &gate_sig, q, dual_exponent)?;
                self.accumulator = Some(a_next.clone().reshape(&[a_next.len()])?);
                self.set_state_tensor(w_next)
            }
            RetentionGate::KlSoftmax { c, slice } => {
                let slices = self
                    .memory
                    .simplex_slices(slice == SlicePolicy::PerRow);
                let flat_w = self.memory.params_flat();
                let flat_grad = grad.clone().reshape(&[grad.len()])?;
                let sig2 = GateSignals {
                    alpha: flatten_signal(&gate_sig.alpha, &self.memory)?,
                    eta: flatten_signal(&gate_sig.eta, &self.memory)?,
                    gamma: gate_sig.gamma,
                    c,
                };
                let next = step_kl_softmax_slices(&flat_w, &flat_grad, &sig2, &slices)?;
                self.memory.set_params_flat(&next)
            }
            RetentionGate::ElasticLocal { smooth } => {
                let next = step_elastic_local(&self.state_tensor(), &grad, &gate_sig, smooth)?;
                self.set_state_tensor(next)
            }
            RetentionGate::ElasticFtrl => {
                let a_prev = self.accumulator.as_ref().expect("elastic accumulator");
                let a_shaped = match &self.memory {
                    Memory::Matrix(m) => a_prev.clone().reshape(&[m.d_v(), m.d_k()])?,
                    Memory::Mlp(_) => a_prev.clone(),
                };
                let (a_next, w_next) = step_elastic_ftrl(&a_shaped, &grad, &gate_sig)?;
                self.accumulator = Some(a_next.clone().reshape(&[a_next.len()])?);
                self.set_state_tensor(w_next)
            }
            RetentionGate::FDivergence { map, c, slice } => {
                let slices = self
                    .memory
                    .simplex_slices(slice == SlicePolicy::PerRow);
                let flat_w = self.memory.params_flat();
                let flat_grad = grad.clone().reshape(&[grad.len()])?;
                let sig2 = GateSignals {
                    alpha: flatten_signal(&gate_sig.alpha, &self.memory)?,
                    eta: flatten_signal(&gate_sig.eta, &self.memory)?,
                    gamma: gate_sig.gamma,
                    c,
                };
                let next =
                    step_fdiv_slices(&flat_w, &flat_grad, &sig2, &|x| map.apply(x), &slices)?;
                self.memory.set_params_flat(&next)
            }
            RetentionGate::BregmanSigmoid => {
                let flat_w = self.memory.params_flat();
                let flat_grad = grad.clone().reshape(&[grad.len()])?;
                let sig2 = GateSignals {
                    alpha: flatten_signal(&gate_sig.alpha, &self.memory)?,
                    eta: flatten_signal(&gate_sig.eta, &self.memory)?,
                    gamma: gate_sig.gamma,
                    c: 1.0,
                };
                let next = step_bregman_sigmoid(&flat_w, &flat_grad, &sig2)?;
                self.memory.set_params_flat(&next)
            }
        }
    }
}

fn flatten_signal(sig: &Signal, memory: &Memory) -> Result<Signal> {
    match sig {
        Signal::Channel(c) => Ok(Signal::Full(memory.expand_channel(c)?)),
        other => Ok(other.clone()),
    }
}

fn init_simplex(memory: &mut Memory, c: f64, slice: SlicePolicy) -> Result<()> {
    let slices = memory.simplex_slices(slice == SlicePolicy::PerRow);
    let mut flat = memory.params_flat();
    for range in slices {
        let n = range.len();
        for x in &mut flat.data_mut()[range] {
            *x = c / n as f64;
        }
    }
    memory.set_params_flat(&flat)
}

// ---------------------------------------------------------------------------
// Literal reference reconstructions

/// The classic write operations, implemented exactly as printed (in the
/// d_v x d_k right-multiplication convention, where a left diag gate acts on
/// output rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    /// W += v k^T
    La,
    /// W = alpha W + v k^T, constant alpha
    RetNet,
    /// W = alpha_t W + v k^T, per-step scalar alpha
    Mamba2,
    /// W = Diag(alpha_t) W + v k^T, channel-wise alpha
    Gla,
    /// W = W (I - beta k k^T) + beta v k^T
    DeltaNet,
    /// W = alpha_t [W (I - beta k k^T)] + beta v k^T
    GatedDeltaNet,
    /// W = Diag(alpha_t) [W (I - beta k k^T)] + beta v k^T
    Rwkv7,
    /// delta step with the implicit-step rate beta / (1 + beta k^T k)
    Longhorn,
    /// W = Diag(alpha_t) W + v (1 - alpha_t)^T
    Hgrn2,
    /// S = eta_m S - theta grad_l2, W = alpha W - S (printed sign)
    TitansLmm,
}

impl ReferenceRule {
    pub const ALL: [ReferenceRule; 10] = [
        ReferenceRule::La,
        ReferenceRule::RetNet,
        ReferenceRule::Mamba2,
        ReferenceRule::Gla,
        ReferenceRule::DeltaNet,
        ReferenceRule::GatedDeltaNet,
        ReferenceRule::Rwkv7,
        ReferenceRule::Longhorn,
        ReferenceRule::Hgrn2,
        ReferenceRule::TitansLmm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ReferenceRule::La => "la",
            ReferenceRule::RetNet => "ret_net",
            ReferenceRule::Mamba2 => "mamba2",
            ReferenceRule::Gla => "gla",
            ReferenceRule::DeltaNet => "delta_net",
            ReferenceRule::GatedDeltaNet => "gated_delta_net",
            ReferenceRule::Rwkv7 => "rwkv7",
            ReferenceRule::Longhorn => "longhorn",
            ReferenceRule::Hgrn2 => "hgrn2",
            ReferenceRule::TitansLmm => "titans_lmm",
        }
    }

    pub fn parse(name: &str) -> Option<ReferenceRule> {
        Self::ALL.iter().copied().find(|r| r.name() == name)
    }
}

/// Matrix-memory state machine for the literal rules. `alpha` comes from
/// the step signals, `beta` from the eta channel, and the momentum pair
/// feeds the titans rule.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub rule: ReferenceRule,
    pub w: Tensor,
    momentum: Option<Tensor>,
}

impl ReferenceModel {
    pub fn new(rule: ReferenceRule, d_v: usize, d_k: usize) -> Self {
        ReferenceModel {
            rule,
            w: Tensor::zeros(&[d_v, d_k]),
            momentum: if rule == ReferenceRule::TitansLmm {
                Some(Tensor::zeros(&[d_v, d_k]))
            } else {
                None
            },
        }
    }

    pub fn query(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.w.matvec(q)
    }

    fn scalar(sig: &Signal, what: &str) -> Result<f64> {
        match sig {
            Signal::Scalar(x) => Ok(*x),
            _ => Err(Error::Contract(format!("{what} must be a scalar here"))),
        }
    }

    fn row_gate(&self, sig: &Signal) -> Result<Vec<f64>> {
        match sig {
            Signal::Scalar(x) => Ok(vec![*x; self.w.rows()]),
            Signal::Channel(c) => {
                if c.len() != self.w.rows() {
                    return Err(Error::shape("channel gate length".to_string()));
                }
                Ok(c.clone())
            }
            Signal::Full(_) => Err(Error::Contract(
                "reference rules take scalar or channel gates".into(),
            )),
        }
    }

    pub fn step(&mut self, k: &[f64], v: &[f64], sig: &StepSignals) -> Result<()> {
        let (rows, cols) = (self.w.rows(), self.w.cols());
        if k.len() != cols || v.len() != rows {
            return Err(Error::shape("reference step: k/v dims".to_string()));
        }
        match self.rule {
            ReferenceRule::La => {
                for i in 0..rows {
                    for j in 0..cols {
                        let x = self.w.get2(i, j) + v[i] * k[j];
                        self.w.set2(i, j, x);
                    }
                }
            }
            ReferenceRule::RetNet | ReferenceRule::Mamba2 => {
                let alpha = Self::scalar(&sig.alpha, "alpha")?;
                for i in 0..rows {
                    for j in 0..cols {
                        let x = alpha * self.w.get2(i, j) + v[i] * k[j];
                        self.w.set2(i, j, x);
                    }
                }
            }
            ReferenceRule::Gla => {
                let alpha = self.row_gate(&sig.alpha)?;
                for i in 0..rows {
                    for j in 0..cols {
                        let x = alpha[i] * self.w.get2(i, j) + v[i] * k[j];
                        self.w.set2(i, j, x);
                    }
                }
            }
            ReferenceRule::DeltaNet => {
                let beta = Self::scalar(&sig.eta, "beta")?;
                self.delta_update(k, v, beta)?;
            }
            ReferenceRule::GatedDeltaNet => {
                let alpha = Self::scalar(&sig.alpha, "alpha")?;
                self.w = self.w.scale(alpha);
                let beta = Self::scalar(&sig.eta, "beta")?;
                self.delta_update(k, v, beta)?;
            }
            ReferenceRule::Rwkv7 => {
                let alpha = self.row_gate(&sig.alpha)?;
                for i in 0..rows {
                    for j in 0..cols {
                        let x = alpha[i] * self.w.get2(i, j);
                        self.w.set2(i, j, x);
                    }
                }
                let beta = Self::scalar(&sig.eta, "beta")?;
                self.delta_update(k, v, beta)?;
            }
            ReferenceRule::Longhorn => {
                let beta = Self::scalar(&sig.eta, "beta")?;
                let ksq: f64 = k.iter().map(|x| x * x).sum();
                let rate = beta / (1.0 + beta * ksq);
                self.delta_update(k, v, rate)?;
            }
            ReferenceRule::Hgrn2 => {
                let alpha = self.row_gate(&sig.alpha)?;
                if rows != cols {
                    return Err(Error::shape("hgrn2 needs a square memory".to_string()));
                }
                for i in 0..rows {
                    for j in 0..cols {
                        let x = alpha[i] * self.w.get2(i, j) + v[i] * (1.0 - alpha[j]);
                        self.w.set2(i, j, x);
                    }
                }
            }
            ReferenceRule::TitansLmm => {
                let alpha = Self::scalar(&sig.alpha, "alpha")?;
                let theta = match &sig.theta {
                    Some(t) => Self::scalar(t, "theta")?,
                    None => default_theta(),
                };
                // half-scaled l2 gradient convention (W k - v) k^T
                let r = self.w.matvec(k)?;
                let mut s = self.momentum.take().expect("titans momentum");
                for i in 0..rows {
                    for j in 0..cols {
                        let g = (r[i] - v[i]) * k[j];
                        let si = sig.eta_momentum * s.get2(i, j) - theta * g;
                        s.set2(i, j, si);
                        let x = alpha * self.w.get2(i, j) - si;
                        self.w.set2(i, j, x);
                    }
                }
                self.momentum = Some(s);
            }
        }
        Ok(())
    }

    /// W <- W - rate (W k - v) k^T
    fn delta_update(&mut self, k: &[f64], v: &[f64], rate: f64) -> Result<()> {
        let r = self.w.matvec(k)?;
        let (rows, cols) = (self.w.rows(), self.w.cols());
        for i in 0..rows {
            let coeff = rate * (r[i] - v[i]);
            for j in 0..cols {
                let x = self.w.get2(i, j) - coeff * k[j];
                self.w.set2(i, j, x);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Framework instantiations of the reference rules
//
// Constant-absorption ledger (the printed rules fold constants into the
// gradient; the framework instance makes each one explicit):
//
//   rule             bias          gate signals            absorption
//   la               dot_product   alpha = 1,   eta = 1/2  eta halves the literal -2 v k^T
//   ret_net          dot_product   alpha const, eta = 1/2  same
//   mamba2           dot_product   alpha_t,     eta = 1/2  same
//   gla              dot_product   alpha_t in R^d, eta=1/2 same, per output row
//   delta_net        l2            alpha = 1,   eta = beta half-scaled grad (Wk-v)k^T
//   gated_delta_net  l2            alpha_t,     eta = beta decay applied before the grad
//   rwkv7            l2            alpha_t in R^d, eta=beta decay applied before the grad
//
// longhorn, hgrn2, and the literal titans row are reference-only: their
// printed forms do not factor through the literal-gradient convention.

/// Builds the framework instance equivalent to a mapped reference rule.
/// Returns None for the reference-only rules.
pub fn equivalent_spec(rule: ReferenceRule, d_v: usize, d_k: usize) -> Option<MirasSpec> {
    let matrix = MemorySpec::Matrix { d_v, d_k };
    let spec = match rule {
        ReferenceRule::La
        | ReferenceRule::RetNet
        | ReferenceRule::Mamba2
        | ReferenceRule::Gla => MirasSpec::new(
            matrix,
            AttentionalBias::new(BiasKind::DotProduct),
            RetentionGate::Decay,
        ),
        ReferenceRule::DeltaNet => MirasSpec::new(
            matrix,
            AttentionalBias::new(BiasKind::L2),
            RetentionGate::Decay,
        ),
        ReferenceRule::GatedDeltaNet | ReferenceRule::Rwkv7 => {
            let mut s = MirasSpec::new(
                matrix,
                AttentionalBias::new(BiasKind::L2),
                RetentionGate::Decay,
            );
            s.decay_before_grad = true;
            s
        }
        ReferenceRule::Longhorn | ReferenceRule::Hgrn2 | ReferenceRule::TitansLmm => return None,
    };
    Some(spec)
}

/// Translate per-step reference signals into the framework instance's
/// signals (the absorption mapping from the ledger above).
pub fn absorb_signals(rule: ReferenceRule, sig: &StepSignals) -> StepSignals {
    let mut out = sig.clone();
    match rule {
        ReferenceRule::La => {
            out.alpha = Signal::Scalar(1.0);
            out.eta = Signal::Scalar(0.5);
        }
        ReferenceRule::RetNet | ReferenceRule::Mamba2 | ReferenceRule::Gla => {
            out.eta = Signal::Scalar(0.5);
        }
        ReferenceRule::DeltaNet => {
            out.alpha = Signal::Scalar(1.0);
        }
        ReferenceRule::GatedDeltaNet | ReferenceRule::Rwkv7 => {}
        ReferenceRule::Longhorn | ReferenceRule::Hgrn2 | ReferenceRule::TitansLmm => {}
    }
    out
}

/// Runs the literal rule and its framework instance on the same seeded
/// stream and returns the largest elementwise state deviation. Errors with
/// `Contract` for the reference-only rules.
pub fn framework_equivalence(rule: ReferenceRule, d: usize, steps: usize, seed: u64) -> Result<f64> {
    let spec = equivalent_spec(rule, d, d).ok_or_else(|| {
        Error::Contract(format!(
            "{} is reference-only: no framework mapping is claimed",
            rule.name()
        ))
    })?;
    let mut reference = ReferenceModel::new(rule, d, d);
    let mut model = MirasModel::from_spec(&spec, seed)?;
    let mut rng = Rng::new(seed).fork(0xE9);
    let mut max_dev: f64 = 0.0;
    for _ in 0..steps {
        let k = rng.unit_vec(d);
        let v = rng.normal_vec(d);
        let alpha_scalar = 0.5 + 0.5 * rng.uniform();
        let beta = 0.1 + 0.8 * rng.uniform();
        let alpha = match rule {
            ReferenceRule::Gla | ReferenceRule::Rwkv7 => {
                Signal::Channel((0..d).map(|_| 0.5 + 0.5 * rng.uniform()).collect())
            }
            _ => Signal::Scalar(alpha_scalar),
        };
        let mut sig = StepSignals::scalar(0.0, 0.0);
        sig.alpha = alpha;
        sig.eta = Signal::Scalar(beta);
        reference.step(&k, &v, &sig)?;
        model.step(&k, &v, &absorb_signals(rule, &sig))?;
        let w = model.memory.params_flat();
        let rw = reference.w.clone().reshape(&[d * d])?;
        max_dev = max_dev.max(w.max_abs_diff(&rw));
    }
    Ok(max_dev)
}
