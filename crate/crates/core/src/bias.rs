//! Attentional-bias objectives: loss value and analytic gradient with
//! respect to the memory parameters for one (key, value) pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Memory;
use crate::tensor::{smooth_abs, smooth_sign, SmoothCfg, Tensor};

/// Whether sign/abs in gradients use the exact operators or the tanh/sqrt
/// surrogates. Branch conditions always use exact arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Smoothing {
    Exact,
    Smooth(SmoothCfg),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Exact
    }
}

impl Smoothing {
    fn sign(&self, x: f64) -> f64 {
        match self {
            Smoothing::Exact => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Smoothing::Smooth(cfg) => smooth_sign(x, cfg),
        }
    }

    fn abs(&self, x: f64) -> f64 {
        match self {
            Smoothing::Exact => x.abs(),
            Smoothing::Smooth(cfg) => smooth_abs(x, cfg),
        }
    }
}

/// Objective families. `delta` and `shift` are the defaults used when the
/// caller supplies no per-step override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasKind {
    /// -2 <M(k), v>; gradient -2 v k^T for the matrix memory, W-independent.
    DotProduct,
    /// ||r||^2 loss with the half-scaled gradient convention r k^T (the
    /// loss carries no 1/2, so loss = 2 x the potential of the gradient;
    /// see `loss_grad_scale`).
    L2,
    /// sum_i |r_i|^p with gradient p sign(r_i)|r_i|^(p-1).
    Lp { p: f64 },
    /// Coordinatewise Huber: quadratic inside |r_i| <= delta, linear outside.
    HuberCoord { delta: f64 },
    /// Huber on the l2 norm of the residual: r inside, delta r/||r|| outside.
    HuberNorm { delta: f64 },
    /// Branching mixture: l2 gradient while ||r||_2 <= delta, otherwise
    /// delta times the l1 gradient.
    HuberMixture { delta: f64 },
    /// Worst-case value-shift objective 1/2||r||^2 + shift||r|| + 1/2 shift^2.
    RobustShift { shift: f64 },
    /// Lp with p = 1: pure sign gradient.
    L1,
}

// serde note: `kind` is flattened into the bias object, which rules out
// deny_unknown_fields here; stray keys inside a bias object are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionalBias {
    #[serde(flatten)]
    pub kind: BiasKind,
    #[serde(default)]
    pub smooth: Smoothing,
}

/// Per-step overrides for the thresholds, supplied by the caller. A
/// channel-wise delta applies per coordinate where the objective is
/// coordinatewise; norm-branch objectives compare against its mean.
#[derive(Clone, Debug, Default)]
pub struct BiasSignals {
    pub delta: Option<DeltaSignal>,
}

#[derive(Clone, Debug)]
pub enum DeltaSignal {
    Scalar(f64),
    Channel(Vec<f64>),
}

impl DeltaSignal {
    fn at(&self, i: usize) -> f64 {
        match self {
            DeltaSignal::Scalar(d) => *d,
            DeltaSignal::Channel(v) => v[i],
        }
    }

    fn mean(&self) -> f64 {
        match self {
            DeltaSignal::Scalar(d) => *d,
            DeltaSignal::Channel(v) => v.iter().sum::<f64>() / v.len() as f64,
        }
    }

    fn check_len(&self, d: usize) -> Result<()> {
        if let DeltaSignal::Channel(v) = self {
            if v.len() != d {
                return Err(Error::shape(format!(
                    "channel delta length {} vs output dim {}",
                    v.len(),
                    d
                )));
            }
        }
        Ok(())
    }
}

impl AttentionalBias {
    pub fn new(kind: BiasKind) -> Self {
        AttentionalBias {
            kind,
            smooth: Smoothing::Exact,
        }
    }

    pub fn smoothed(kind: BiasKind, cfg: SmoothCfg) -> Self {
        AttentionalBias {
            kind,
            smooth: Smoothing::Smooth(cfg),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            BiasKind::Lp { p } if *p < 1.0 => {
                Err(Error::Contract(format!("lp bias needs p >= 1, got {p}")))
            }
            BiasKind::HuberCoord { delta }
            | BiasKind::HuberNorm { delta }
            | BiasKind::HuberMixture { delta }
                if *delta <= 0.0 =>
            {
                Err(Error::Contract("huber delta must be > 0".into()))
            }
            BiasKind::RobustShift { shift } if *shift < 0.0 => {
                Err(Error::Contract("robust shift must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Ratio loss / potential-of-gradient for the finite-difference suite.
    /// Only the l2 kind keeps the historical mismatch (loss ||r||^2,
    /// gradient r k^T); every other kind's gradient is the exact gradient
    /// of its loss.
    pub fn loss_grad_scale(&self) -> f64 {
        match self.kind {
            BiasKind::L2 => 2.0,
            _ => 1.0,
        }
    }

    fn residual(&self, mem: &Memory, k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let out = mem.forward(k)?;
        if out.len() != v.len() {
            return Err(Error::shape(format!(
                "value length {} vs memory output {}",
                v.len(),
                out.len()
            )));
        }
        Ok(out.iter().zip(v).map(|(&o, &t)| o - t).collect())
    }

    pub fn loss(&self, mem: &Memory, k: &[f64], v: &[f64]) -> Result<f64> {
        self.loss_with(mem, k, v, &BiasSignals::default())
    }

    pub fn loss_with(
        &self,
        mem: &Memory,
        k: &[f64],
        v: &[f64],
        sig: &BiasSignals,
    ) -> Result<f64> {
        match &self.kind {
            BiasKind::DotProduct => {
                let out = mem.forward(k)?;
                if out.len() != v.len() {
                    return Err(Error::shape("value length".to_string()));
                }
                Ok(-2.0 * out.iter().zip(v).map(|(&o, &t)| o * t).sum::<f64>())
            }
            _ => {
                let r = self.residual(mem, k, v)?;
                self.loss_of_residual(&r, sig)
            }
        }
    }

    fn delta_of(&self, sig: &BiasSignals, fallback: f64) -> DeltaSignal {
        sig.delta.clone().unwrap_or(DeltaSignal::Scalar(fallback))
    }

    fn loss_of_residual(&self, r: &[f64], sig: &BiasSignals) -> Result<f64> {
        let norm2 = r.iter().map(|x| x * x).sum::<f64>();
        match &self.kind {
            BiasKind::DotProduct => unreachable!("handled in loss_with"),
            BiasKind::L2 => Ok(norm2),
            BiasKind::Lp { p } => Ok(r.iter().map(|&x| self.smooth.abs(x).powf(*p)).sum()),
            BiasKind::L1 => Ok(r.iter().map(|&x| self.smooth.abs(x)).sum()),
            BiasKind::HuberCoord { delta } => {
                let d = self.delta_of(sig, *delta);
                d.check_len(r.len())?;
                Ok(r.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let di = d.at(i);
                        if x.abs() <= di {
                            0.5 * x * x
                        } else {
                            di * (x.abs() - 0.5 * di)
                        }
                    })
                    .sum())
            }
            BiasKind::HuberNorm { delta } => {
                let d = self.delta_of(sig, *delta).mean();
                let n = norm2.sqrt();
                Ok(if n <= d {
                    0.5 * norm2
                } else {
                    d * (n - 0.5 * d)
                })
            }
            BiasKind::HuberMixture { delta } => {
                let dsig = self.delta_of(sig, *delta);
                let d = dsig.mean();
                Ok(if norm2.sqrt() <= d {
                    0.5 * norm2
                } else {
                    r.iter()
                        .enumerate()
                        .map(|(i, &x)| dsig.at(i) * self.smooth.abs(x))
                        .sum()
                })
            }
            BiasKind::RobustShift { shift } => {
                let n = norm2.sqrt();
                Ok(0.5 * norm2 + shift * n + 0.5 * shift * shift)
            }
        }
    }

    /// Upstream cotangent dloss/dM(k) as a function of the residual; the
    /// full parameter gradient is its pullback through the memory.
    pub fn upstream(&self, r: &[f64], v: &[f64], sig: &BiasSignals) -> Result<Vec<f64>> {
        let norm2 = r.iter().map(|x| x * x).sum::<f64>();
        match &self.kind {
            BiasKind::DotProduct => Ok(v.iter().map(|&t| -2.0 * t).collect()),
            BiasKind::L2 => Ok(r.to_vec()),
            BiasKind::Lp { p } => Ok(r
                .iter()
                .map(|&x| *p * self.smooth.sign(x) * self.smooth.abs(x).powf(*p - 1.0))
                .collect()),
            BiasKind::L1 => Ok(r.iter().map(|&x| self.smooth.sign(x)).collect()),
            BiasKind::HuberCoord { delta } => {
                let d = self.delta_of(sig, *delta);
                d.check_len(r.len())?;
                Ok(r.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let di = d.at(i);
                        // inclusive boundary: quadratic branch at |x| == delta
                        if x.abs() <= di {
                            x
                        } else {
                            di * self.smooth.sign(x)
                        }
                    })
                    .collect())
            }
            BiasKind::HuberNorm { delta } => {
                let d = self.delta_of(sig, *delta).mean();
                let n = norm2.sqrt();
                if n <= d {
                    Ok(r.to_vec())
                } else {
                    Ok(r.iter().map(|&x| d * x / n).collect())
                }
            }
            BiasKind::HuberMixture { delta } => {
                let dsig = self.delta_of(sig, *delta);
                let d = dsig.mean();
                if norm2.sqrt() <= d {
                    Ok(r.to_vec())
                } else {
                    Ok(r
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| dsig.at(i) * self.smooth.sign(x))
                        .collect())
                }
            }
            BiasKind::RobustShift { shift } => {
                let n = norm2.sqrt();
                if n < 1e-300 {
                    // residual exactly zero: the norm term contributes no
                    // direction
                    Ok(r.to_vec())
                } else {
                    Ok(r.iter().map(|&x| x + shift * x / n).collect())
                }
            }
        }
    }

    pub fn grad(&self, mem: &Memory, k: &[f64], v: &[f64]) -> Result<Tensor> {
        self.grad_with(mem, k, v, &BiasSignals::default())
    }

    /// Flat params-shaped gradient of the objective at the current memory.
    pub fn grad_with(
        &self,
        mem: &Memory,
        k: &[f64],
        v: &[f64],
        sig: &BiasSignals,
    ) -> Result<Tensor> {
        let r = self.residual(mem, k, v)?;
        let upstream = self.upstream(&r, v, sig)?;
        mem.grad_params(k, &upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{MatrixMemory, MlpMemory};
    use crate::tensor::Rng;

    fn matrix(w: Tensor) -> Memory {
        Memory::Matrix(MatrixMemory::from_tensor(w).unwrap())
    }

    fn fd_loss_grad(
        bias: &AttentionalBias,
        mem: &Memory,
        k: &[f64],
        v: &[f64],
        step: f64,
    ) -> Vec<f64> {
        let flat = mem.params_flat();
        let mut g = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p.data_mut()[i] += step;
            let mut mp = mem.clone();
            mp.set_params_flat(&p).unwrap();
            let mut m = flat.clone();
            m.data_mut()[i] -= step;
            let mut mm = mem.clone();
            mm.set_params_flat(&m).unwrap();
            g[i] = (bias.loss(&mp, k, v).unwrap() - bias.loss(&mm, k, v).unwrap()) / (2.0 * step);
        }
        g
    }

    #[test]
    fn l2_loss_at_zero_memory() {
        let mem = matrix(Tensor::zeros(&[2, 2]));
        let bias = AttentionalBias::new(BiasKind::L2);
        let loss = bias.loss(&mem, &[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn dot_product_loss_on_stored_pair() {
        // W = v k^T with unit k gives <Wk, v> = ||v||^2
        let k = [1.0, 0.0];
        let v = [3.0, -4.0];
        let mem = matrix(Tensor::outer(&v, &k));
        let bias = AttentionalBias::new(BiasKind::DotProduct);
        let loss = bias.loss(&mem, &k, &v).unwrap();
        assert_eq!(loss, -2.0 * 25.0);
    }

    #[test]
    fn lp_loss_direct() {
        let mem = matrix(Tensor::zeros(&[2, 1]));
        let bias = AttentionalBias::new(BiasKind::Lp { p: 3.0 });
        // r = -v = (-2, 0)
        let loss = bias.loss(&mem, &[1.0], &[2.0, 0.0]).unwrap();
        assert_eq!(loss, 8.0);
    }

    #[test]
    fn l2_grad_identity_case() {
        let mem = matrix(Tensor::eye(2));
        let bias = AttentionalBias::new(BiasKind::L2);
        let g = bias.grad(&mem, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, -1.0, 0.0]);
    }

    #[test]
    fn lp3_grad_closed_form() {
        let mem = matrix(Tensor::zeros(&[2, 2]));
        let bias = AttentionalBias::new(BiasKind::Lp { p: 3.0 });
        let g = bias.grad(&mem, &[1.0, 0.0], &[2.0, 0.0]).unwrap();
        // r = (-2, 0): entry (0,0) = 3 * sign(-2) * 4 = -12
        assert_eq!(g.data(), &[-12.0, 0.0, 0.0, 0.0]);
        // and it matches finite differences of the loss
        let mut rng = Rng::new(2);
        let mem = matrix(rng.normal_tensor(&[2, 2], 1.0));
        let k = rng.unit_vec(2);
        let v = rng.normal_vec(2);
        let analytic = bias.grad(&mem, &k, &v).unwrap();
        let numeric = fd_loss_grad(&bias, &mem, &k, &v, 1e-5);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            let denom = n.abs().max(1e-6);
            assert!((a - n).abs() / denom <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn huber_mixture_inside_equals_l2() {
        let mut rng = Rng::new(3);
        let mem = matrix(rng.normal_tensor(&[3, 3], 0.3));
        let k = rng.unit_vec(3);
        let mut v = mem.forward(&k).unwrap();
        // force residual norm 1
        v[0] += 1.0;
        let mix = AttentionalBias::new(BiasKind::HuberMixture { delta: 10.0 });
        let l2 = AttentionalBias::new(BiasKind::L2);
        let gm = mix.grad(&mem, &k, &v).unwrap();
        let gl = l2.grad(&mem, &k, &v).unwrap();
        assert_eq!(gm.data(), gl.data());
    }

    #[test]
    fn huber_norm_outside_grad_norm() {
        // residual with ||r|| = 2, delta = 0.5: frobenius norm of the matrix
        // gradient is delta * ||k||
        let mem = matrix(Tensor::zeros(&[2, 3]));
        let k = [1.0, 2.0, -2.0]; // ||k|| = 3
        let v = [2.0, 0.0]; // r = -v, ||r|| = 2
        let bias = AttentionalBias::new(BiasKind::HuberNorm { delta: 0.5 });
        let g = bias.grad(&mem, &k, &v).unwrap();
        let fro = g.norm_l2();
        assert!((fro - 0.5 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn huber_norm_grad_globally_bounded() {
        let mut rng = Rng::new(11);
        let delta = 0.7;
        let bias = AttentionalBias::new(BiasKind::HuberNorm { delta });
        for trial in 0..50 {
            let mut sub = rng.fork(trial);
            let mem = matrix(sub.normal_tensor(&[3, 4], 2.0));
            let k = sub.normal_vec(4);
            let v = sub.normal_vec(3);
            let r: Vec<f64> = mem
                .forward(&k)
                .unwrap()
                .iter()
                .zip(&v)
                .map(|(o, t)| o - t)
                .collect();
            let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            let g = bias.grad(&mem, &k, &v).unwrap().norm_l2();
            assert!(g <= rn.max(delta) * kn + 1e-9);
            if rn > delta {
                assert!(g <= delta * kn + 1e-9);
            }
        }
    }

    #[test]
    fn robust_shift_zero_equals_half_scaled_l2() {
        let mut rng = Rng::new(4);
        let mem = matrix(rng.normal_tensor(&[2, 2], 1.0));
        let k = rng.normal_vec(2);
        let v = rng.normal_vec(2);
        let rs = AttentionalBias::new(BiasKind::RobustShift { shift: 0.0 });
        let l2 = AttentionalBias::new(BiasKind::L2);
        assert_eq!(
            rs.grad(&mem, &k, &v).unwrap().data(),
            l2.grad(&mem, &k, &v).unwrap().data()
        );
    }

    #[test]
    fn dot_product_grad_independent_of_w() {
        let mut rng = Rng::new(5);
        let k = rng.normal_vec(3);
        let v = rng.normal_vec(2);
        let bias = AttentionalBias::new(BiasKind::DotProduct);
        let g0 = bias.grad(&matrix(Tensor::zeros(&[2, 3])), &k, &v).unwrap();
        let g1 = bias
            .grad(&matrix(rng.normal_tensor(&[2, 3], 5.0)), &k, &v)
            .unwrap();
        assert_eq!(g0.data(), g1.data());
        let expect = Tensor::outer(&v, &k).scale(-2.0);
        for (a, b) in g0.data().iter().zip(expect.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn l1_grad_is_sign_pattern() {
        let mut rng = Rng::new(6);
        let mem = matrix(rng.normal_tensor(&[3, 3], 1.0));
        let k = rng.normal_vec(3);
        let v = rng.normal_vec(3);
        let r: Vec<f64> = mem
            .forward(&k)
            .unwrap()
            .iter()
            .zip(&v)
            .map(|(o, t)| o - t)
            .collect();
        let bias = AttentionalBias::new(BiasKind::L1);
        let g = bias.grad(&mem, &k, &v).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.data()[i * 3 + j], r[i].signum() * k[j]);
            }
        }
    }

    #[test]
    fn lp2_is_twice_l2_grad() {
        let mut rng = Rng::new(7);
        let mem = matrix(rng.normal_tensor(&[3, 2], 1.0));
        let k = rng.normal_vec(2);
        let v = rng.normal_vec(3);
        let lp = AttentionalBias::new(BiasKind::Lp { p: 2.0 });
        let l2 = AttentionalBias::new(BiasKind::L2);
        let gp = lp.grad(&mem, &k, &v).unwrap();
        let g2 = l2.grad(&mem, &k, &v).unwrap();
        for (a, b) in gp.data().iter().zip(g2.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    /// Every kind, both memory architectures, sampled away from branch
    /// boundaries and non-smooth points: analytic gradient vs central finite
    /// differences of the loss (l2 carries its documented factor 2).
    #[test]
    fn gradient_matches_finite_differences_all_kinds() {
        let kinds = [
            BiasKind::DotProduct,
            BiasKind::L2,
            BiasKind::Lp { p: 3.0 },
            BiasKind::Lp { p: 1.5 },
            BiasKind::HuberCoord { delta: 1.0 },
            BiasKind::HuberNorm { delta: 1.0 },
            BiasKind::HuberMixture { delta: 1.0 },
            BiasKind::RobustShift { shift: 0.1 },
            BiasKind::L1,
        ];
        let mut rng = Rng::new(2024);
        for kind in kinds {
            let bias = AttentionalBias::new(kind.clone());
            let mut accepted = 0u32;
            let mut trial = 0u64;
            while accepted < 100 {
                trial += 1;
                let mut sub = rng.fork(trial + 10_000 * accepted as u64);
                let use_mlp = accepted % 2 == 1;
                let mem = if use_mlp {
                    Memory::Mlp(MlpMemory::seeded_with_std(4, 2, 0.5, &mut sub))
                } else {
                    matrix(sub.normal_tensor(&[3, 4], 0.5))
                };
                let k = sub.normal_vec(mem.input_dim());
                let v = sub.normal_vec(mem.output_dim());
                let r: Vec<f64> = mem
                    .forward(&k)
                    .unwrap()
                    .iter()
                    .zip(&v)
                    .map(|(o, t)| o - t)
                    .collect();
                let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (rn - 1.0).abs() < 0.1 || r.iter().any(|x| x.abs() < 0.05) {
                    continue;
                }
                accepted += 1;
                let analytic = bias.grad(&mem, &k, &v).unwrap();
                let numeric = fd_loss_grad(&bias, &mem, &k, &v, 1e-6);
                let scale = bias.loss_grad_scale();
                let denom = numeric
                    .iter()
                    .fold(0.0f64, |m, &g| m.max(g.abs()))
                    .max(1e-6);
                for (a, n) in analytic.data().iter().zip(&numeric) {
                    assert!(
                        (scale * a - n).abs() / denom <= 1e-5,
                        "{kind:?}: {a} (x{scale}) vs fd {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn validate_rejects_bad_params() {
        assert!(AttentionalBias::new(BiasKind::Lp { p: 0.5 }).validate().is_err());
        assert!(AttentionalBias::new(BiasKind::HuberNorm { delta: 0.0 })
            .validate()
            .is_err());
        assert!(AttentionalBias::new(BiasKind::RobustShift { shift: -1.0 })
            .validate()
            .is_err());
    }
}
