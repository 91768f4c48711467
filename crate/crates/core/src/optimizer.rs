//! Inner-loop learning algorithms over (bias, gate) pairs: plain gradient
//! descent, gradient descent with momentum, and the closed-form quadratic
//! FTRL solution, plus the numerical check that the regularized-leader and
//! learning-retaining formulations produce the same trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retention::{step_decay, GateSignals, Signal};
use crate::tensor::{Rng, Tensor};

/// Learner choices. `titans_literal_sign` switches the momentum composition
/// from W <- alpha W + S (the behavioral convention, default) to the
/// printed W <- alpha W - S form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnerLearner {
    Gd,
    GdMomentum {
        #[serde(default)]
        titans_literal_sign: bool,
    },
    FtrlQuadratic { eta: f64 },
}

impl Default for InnerLearner {
    fn default() -> Self {
        InnerLearner::Gd
    }
}

/// One momentum step: S_next = eta_m S_prev - theta grad, then
/// W_next = alpha W_prev + S_next (or - S_next in literal mode).
pub fn momentum_step(
    w_prev: &Tensor,
    s_prev: &Tensor,
    grad: &Tensor,
    alpha: &Signal,
    theta: &Signal,
    eta_m: f64,
    literal_sign: bool,
) -> Result<(Tensor, Tensor)> {
    // S update reuses the decay kernel: eta_m (.) S - theta (.) grad
    let s_next = step_decay(
        s_prev,
        grad,
        &GateSignals {
            alpha: Signal::Scalar(eta_m),
            eta: theta.clone(),
            gamma: 0.0,
            c: 1.0,
        },
    )?;
    let sign = if literal_sign { -1.0 } else { 1.0 };
    let w_next = step_decay(
        w_prev,
        &s_next,
        &GateSignals {
            alpha: alpha.clone(),
            eta: Signal::Scalar(-sign),
            gamma: 0.0,
            c: 1.0,
        },
    )?;
    Ok((w_next, s_next))
}

/// Closed-form minimizer of the linearized-loss quadratic-regularizer
/// objective with W_0 = 0: -eta * sum(grads). Empty input gives the zero
/// tensor of the provided shape.
pub fn ftrl_quadratic_solve(grads: &[Tensor], eta: f64, dims: &[usize]) -> Result<Tensor> {
    let mut sum = Tensor::zeros(dims);
    for g in grads {
        if g.dims() != dims {
            return Err(Error::shape(format!(
                "ftrl gradient dims {:?} vs {:?}",
                g.dims(),
                dims
            )));
        }
        sum = sum.add_scaled(g, 1.0)?;
    }
    Ok(sum.scale(-eta))
}

/// Builds both trajectory views on the same seeded linearized losses and
/// returns the largest elementwise deviation over all steps.
///
/// View 1 solves the running regularized-leader problem in closed form
/// (prefix sums). View 2 performs the per-step minimization with the
/// Bregman retention of the leader function h_t, which for the quadratic
/// regularizer reduces to the online gradient recurrence
/// W_t = W_{t-1} - eta g_t.
pub fn verify_proposition1(seed: u64, steps: usize, d: usize, eta: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let grads: Vec<Tensor> = (0..steps).map(|_| rng.normal_tensor(&[d, d], 1.0)).collect();

    let mut max_dev: f64 = 0.0;
    let mut retained = Tensor::zeros(&[d, d]);
    let mut prefix = Tensor::zeros(&[d, d]);
    for g in &grads {
        // leader view: W_t = -eta * sum_{i<=t} g_i
        prefix = prefix.add_scaled(g, 1.0).expect("same shape");
        let leader = prefix.scale(-eta);
        // retaining view: D_{h_t}(W, W_{t-1}) collapses to the quadratic
        // premetric, so the argmin is one gradient step
        retained = retained.add_scaled(g, -eta).expect("same shape");
        max_dev = max_dev.max(leader.max_abs_diff(&retained));
    }
    max_dev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::{AttentionalBias, BiasKind};
    use crate::memory::{MatrixMemory, Memory};
    use crate::retention::step_decay;

    #[test]
    fn gd_one_step_stores_pair_exactly() {
        // l2 bias, eta = 1, unit key, zero init: W_1 k = v
        let mem = Memory::Matrix(MatrixMemory::zeros(3, 3));
        let bias = AttentionalBias::new(BiasKind::L2);
        let mut rng = Rng::new(1);
        let k = rng.unit_vec(3);
        let v = rng.normal_vec(3);
        let grad = bias.grad(&mem, &k, &v).unwrap().reshape(&[3, 3]).unwrap();
        let w1 = step_decay(
            &Tensor::zeros(&[3, 3]),
            &grad,
            &GateSignals::scalar(1.0, 1.0),
        )
        .unwrap();
        let out = w1.matvec(&k).unwrap();
        for (o, t) in out.iter().zip(&v) {
            assert!((o - t).abs() < 1e-12);
        }
    }

    #[test]
    fn null_step_leaves_state() {
        let mut rng = Rng::new(2);
        let w = rng.normal_tensor(&[2, 2], 1.0);
        let mem = Memory::Matrix(MatrixMemory::from_tensor(w.clone()).unwrap());
        let bias = AttentionalBias::new(BiasKind::HuberNorm { delta: 1.0 });
        let k = rng.unit_vec(2);
        let v = rng.normal_vec(2);
        let grad = bias.grad(&mem, &k, &v).unwrap().reshape(&[2, 2]).unwrap();
        let next = step_decay(&w, &grad, &GateSignals::scalar(1.0, 0.0)).unwrap();
        assert_eq!(next, w);
    }

    #[test]
    fn dot_product_half_eta_absorbs_factor_two() {
        let mem = Memory::Matrix(MatrixMemory::zeros(2, 2));
        let bias = AttentionalBias::new(BiasKind::DotProduct);
        let k = [0.6, 0.8];
        let v = [1.0, -2.0];
        let grad = bias.grad(&mem, &k, &v).unwrap().reshape(&[2, 2]).unwrap();
        let w1 = step_decay(
            &Tensor::zeros(&[2, 2]),
            &grad,
            &GateSignals::scalar(1.0, 0.5),
        )
        .unwrap();
        let expect = Tensor::outer(&v, &k);
        assert_eq!(w1.data(), expect.data());
    }

    #[test]
    fn momentum_zero_decay_reduces_to_gd() {
        let mut rng = Rng::new(3);
        let w = rng.normal_tensor(&[2, 3], 1.0);
        let s = Tensor::zeros(&[2, 3]);
        let g = rng.normal_tensor(&[2, 3], 1.0);
        let theta = 0.4;
        let (w_next, _) = momentum_step(
            &w,
            &s,
            &g,
            &Signal::Scalar(1.0),
            &Signal::Scalar(theta),
            0.0,
            false,
        )
        .unwrap();
        let plain = step_decay(&w, &g, &GateSignals::scalar(1.0, theta)).unwrap();
        assert!(w_next.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn momentum_zero_surprise_is_pure_decay() {
        let mut rng = Rng::new(4);
        let w = rng.normal_tensor(&[2, 2], 1.0);
        let mut s = Tensor::zeros(&[2, 2]);
        let mut cur = w.clone();
        for _ in 0..5 {
            let g = rng.normal_tensor(&[2, 2], 1.0);
            let (wn, sn) = momentum_step(
                &cur,
                &s,
                &g,
                &Signal::Scalar(0.9),
                &Signal::Scalar(0.0),
                1.0,
                false,
            )
            .unwrap();
            cur = wn;
            s = sn;
        }
        let expect = w.scale(0.9f64.powi(5));
        assert!(cur.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let mut rng = Rng::new(5);
        let alpha = 0.95;
        let theta = 0.3;
        let eta_m = 0.8;
        let grads: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[3, 2], 1.0)).collect();

        let mut w = Tensor::zeros(&[3, 2]);
        let mut s = Tensor::zeros(&[3, 2]);
        for g in &grads {
            let (wn, sn) = momentum_step(
                &w,
                &s,
                g,
                &Signal::Scalar(alpha),
                &Signal::Scalar(theta),
                eta_m,
                false,
            )
            .unwrap();
            w = wn;
            s = sn;
        }

        // independent unrolled loop over raw slices
        let mut we = vec![0.0; 6];
        let mut se = vec![0.0; 6];
        for g in &grads {
            for i in 0..6 {
                se[i] = eta_m * se[i] - theta * g.data()[i];
                we[i] = alpha * we[i] + se[i];
            }
        }
        for (a, b) in w.data().iter().zip(&we) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_literal_sign_flips_composition() {
        let mut rng = Rng::new(6);
        let w = rng.normal_tensor(&[2, 2], 1.0);
        let s = Tensor::zeros(&[2, 2]);
        let g = rng.normal_tensor(&[2, 2], 1.0);
        let (def, sn) = momentum_step(
            &w,
            &s,
            &g,
            &Signal::Scalar(1.0),
            &Signal::Scalar(0.5),
            0.5,
            false,
        )
        .unwrap();
        let (lit, _) = momentum_step(
            &w,
            &s,
            &g,
            &Signal::Scalar(1.0),
            &Signal::Scalar(0.5),
            0.5,
            true,
        )
        .unwrap();
        let diff = def.add_scaled(&lit, -1.0).unwrap();
        assert!(diff.max_abs_diff(&sn.scale(2.0)) < 1e-15);
    }

    #[test]
    fn momentum_norm_geometric_bound() {
        let mut rng = Rng::new(7);
        let theta = 0.3;
        let eta_m = 0.9;
        let mut w = Tensor::zeros(&[4, 4]);
        let mut s = Tensor::zeros(&[4, 4]);
        let mut sup_grad: f64 = 0.0;
        for _ in 0..500 {
            let g = rng.normal_tensor(&[4, 4], 1.0);
            sup_grad = sup_grad.max(g.norm_l2());
            let (wn, sn) = momentum_step(
                &w,
                &s,
                &g,
                &Signal::Scalar(0.99),
                &Signal::Scalar(theta),
                eta_m,
                false,
            )
            .unwrap();
            w = wn;
            s = sn;
            assert!(s.norm_l2() <= theta * sup_grad / (1.0 - eta_m) + 1e-9);
        }
    }

    #[test]
    fn ftrl_single_and_cancelling() {
        let mut rng = Rng::new(8);
        let g = rng.normal_tensor(&[2, 2], 1.0);
        let one = ftrl_quadratic_solve(&[g.clone()], 0.3, &[2, 2]).unwrap();
        assert!(one.max_abs_diff(&g.scale(-0.3)) < 1e-15);
        let zero = ftrl_quadratic_solve(&[g.clone(), g.scale(-1.0)], 0.3, &[2, 2]).unwrap();
        assert!(zero.norm_inf() == 0.0);
        let empty = ftrl_quadratic_solve(&[], 0.3, &[2, 2]).unwrap();
        assert!(empty.norm_inf() == 0.0);
    }

    #[test]
    fn ftrl_prefixes_equal_ogd_bitexact() {
        // eta = 0.5 is a power of two, so scaling commutes with rounding and
        // the two summation orders match bit for bit
        let eta = 0.5;
        let mut rng = Rng::new(9);
        let grads: Vec<Tensor> = (0..20).map(|_| rng.normal_tensor(&[4, 4], 1.0)).collect();
        let mut ogd = Tensor::zeros(&[4, 4]);
        for t in 0..20 {
            ogd = ogd.add_scaled(&grads[t], -eta).unwrap();
            let ftrl = ftrl_quadratic_solve(&grads[..=t], eta, &[4, 4]).unwrap();
            assert_eq!(ogd.data(), ftrl.data(), "step {t}");
        }
    }

    #[test]
    fn proposition1_base_case_and_degenerate() {
        assert_eq!(verify_proposition1(123, 1, 8, 0.1), 0.0);
        assert_eq!(verify_proposition1(123, 50, 8, 0.0), 0.0);
    }

    #[test]
    fn proposition1_deviation_small() {
        for seed in 0..20 {
            let dev = verify_proposition1(seed, 50, 8, 0.1);
            assert!(dev <= 1e-10, "seed {seed}: deviation {dev}");
        }
    }
}
