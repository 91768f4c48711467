//! Memory architectures: the map from key to predicted value, with forward
//! evaluation and the analytic parameter-Jacobian pullback used by every
//! attentional-bias gradient.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Guard under which a layer-norm input counts as constant; the norm then
/// returns the offset vector instead of dividing by a vanishing stddev.
const LN_VAR_GUARD: f64 = 1e-12;

/// exact-erf GELU (not the tanh approximation, so analytic derivatives track
/// the implemented function to machine precision)
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_deriv(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Linear memory: forward(k) = W k, no bias term. W is d_v x d_k.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixMemory {
    pub w: Tensor,
}

impl MatrixMemory {
    /// Zero-initialized d_v x d_k matrix.
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        MatrixMemory {
            w: Tensor::zeros(&[d_v, d_k]),
        }
    }

    pub fn from_tensor(w: Tensor) -> Result<Self> {
        if w.dims().len() != 2 {
            return Err(Error::shape("matrix memory needs a 2-d tensor"));
        }
        Ok(MatrixMemory { w })
    }

    pub fn d_v(&self) -> usize {
        self.w.rows()
    }

    pub fn d_k(&self) -> usize {
        self.w.cols()
    }
}

/// Two-layer residual MLP memory: forward(x) = x + LN(w1 * gelu(w2 * x)),
/// layer norm over the feature axis with learnable gain/offset. Input and
/// output dimension are both d; the hidden width is expansion * d.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpMemory {
    /// d x (expansion * d)
    pub w1: Tensor,
    /// (expansion * d) x d
    pub w2: Tensor,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub d: usize,
    pub expansion: usize,
}

impl MlpMemory {
    /// Seeded init: weights normal with std 0.02, gain 1, offset 0.
    pub fn seeded(d: usize, expansion: usize, rng: &mut Rng) -> Self {
        Self::seeded_with_std(d, expansion, 0.02, rng)
    }

    /// Same layout with a caller-chosen weight scale.
    pub fn seeded_with_std(d: usize, expansion: usize, std: f64, rng: &mut Rng) -> Self {
        let h = expansion * d;
        MlpMemory {
            w1: rng.normal_tensor(&[d, h], std),
            w2: rng.normal_tensor(&[h, d], std),
            gain: vec![1.0; d],
            offset: vec![0.0; d],
            d,
            expansion,
        }
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.d
    }

    fn layer_norm(&self, y: &[f64]) -> Vec<f64> {
        let d = y.len() as f64;
        let mean = y.iter().sum::<f64>() / d;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        if var < LN_VAR_GUARD {
            return self.offset.clone();
        }
        let s = var.sqrt();
        y.iter()
            .enumerate()
            .map(|(i, &v)| self.gain[i] * (v - mean) / s + self.offset[i])
            .collect()
    }
}

/// Dispatch of the two memory architectures plus the flat-parameter view
/// that the retention gates operate on.
#[derive(Clone, Debug, PartialEq)]
pub enum Memory {
    Matrix(MatrixMemory),
    Mlp(MlpMemory),
}

/// Snapshot of one memory's trainable parameters plus any learner buffers,
/// all as flat tensors over the same parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub params: Tensor,
    pub aux: Option<Tensor>,
}

impl Memory {
    pub fn input_dim(&self) -> usize {
        match self {
            Memory::Matrix(m) => m.d_k(),
            Memory::Mlp(m) => m.d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Memory::Matrix(m) => m.d_v(),
            Memory::Mlp(m) => m.d,
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            Memory::Matrix(m) => m.w.len(),
            Memory::Mlp(m) => m.w1.len() + m.w2.len() + 2 * m.d,
        }
    }

    pub fn forward(&self, k: &[f64]) -> Result<Vec<f64>> {
        if k.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "forward: key length {} vs input dim {}",
                k.len(),
                self.input_dim()
            )));
        }
        match self {
            Memory::Matrix(m) => m.w.matvec(k),
            Memory::Mlp(m) => {
                let z = m.w2.matvec(k)?;
                let a: Vec<f64> = z.iter().map(|&x| gelu(x)).collect();
                let y = m.w1.matvec(&a)?;
                let ln = m.layer_norm(&y);
                Ok(k.iter().zip(&ln).map(|(&x, &l)| x + l).collect())
            }
        }
    }

    /// Pullback of an upstream cotangent at the output against all trainable
    /// parameters: returns flat g with g = dL/dparams whenever
    /// dL/dforward(k) = upstream. For the matrix memory this is the outer
    /// product upstream * k^T, flattened row-major.
    pub fn grad_params(&self, k: &[f64], upstream: &[f64]) -> Result<Tensor> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "grad_params: upstream length {} vs output dim {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if k.len() != self.input_dim() {
            return Err(Error::shape("grad_params: key length".to_string()));
        }
        match self {
            Memory::Matrix(_) => {
                Ok(Tensor::outer(upstream, k).reshape(&[upstream.len() * k.len()])?)
            }
            Memory::Mlp(m) => {
                let d = m.d;
                let h = m.hidden();
                let z = m.w2.matvec(k)?;
                let a: Vec<f64> = z.iter().map(|&x| gelu(x)).collect();
                let y = m.w1.matvec(&a)?;

                let mean = y.iter().sum::<f64>() / d as f64;
                let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;

                let mut grad = vec![0.0; self.param_len()];
                let (w1_rng, w2_rng, gain_rng, offset_rng) = mlp_ranges(d, h);

                if var < LN_VAR_GUARD {
                    // constant pre-activation: LN output is the offset, so only
                    // the offset receives gradient
                    grad[offset_rng].copy_from_slice(upstream);
                    return Tensor::from_vec(&[self.param_len()], grad);
                }

                let s = var.sqrt();
                let xhat: Vec<f64> = y.iter().map(|&v| (v - mean) / s).collect();

                // d(out)/d(gain_i) = upstream_i * xhat_i, d/d(offset_i) = upstream_i
                for i in 0..d {
                    grad[gain_rng.start + i] = upstream[i] * xhat[i];
                    grad[offset_rng.start + i] = upstream[i];
                }

                // back through the normalization (biased variance)
                let dxhat: Vec<f64> = (0..d).map(|i| upstream[i] * m.gain[i]).collect();
                let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dxhat_xhat = dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(&g, &x)| g * x)
                    .sum::<f64>()
                    / d as f64;
                let dy: Vec<f64> = (0..d)
                    .map(|i| (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) / s)
                    .collect();

                // w1: dy a^T
                for i in 0..d {
                    for j in 0..h {
                        grad[w1_rng.start + i * h + j] = dy[i] * a[j];
                    }
                }
                // back through w1 and the activation, then w2: dz k^T
                for j in 0..h {
                    let mut da = 0.0;
                    for i in 0..d {
                        da += m.w1.data()[i * h + j] * dy[i];
                    }
                    let dz = da * gelu_deriv(z[j]);
                    for l in 0..d {
                        grad[w2_rng.start + j * d + l] = dz * k[l];
                    }
                }
                Tensor::from_vec(&[self.param_len()], grad)
            }
        }
    }

    /// Flat row-major view over all trainable parameters.
    pub fn params_flat(&self) -> Tensor {
        match self {
            Memory::Matrix(m) => m.w.clone().reshape(&[m.w.len()]).expect("flat view"),
            Memory::Mlp(m) => {
                let mut data = Vec::with_capacity(self.param_len());
                data.extend_from_slice(m.w1.data());
                data.extend_from_slice(m.w2.data());
                data.extend_from_slice(&m.gain);
                data.extend_from_slice(&m.offset);
                Tensor::from_vec(&[data.len()], data).expect("flat view")
            }
        }
    }

    /// Inverse of `params_flat`; the round trip is bit-exact.
    pub fn set_params_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::shape(format!(
                "set_params_flat: {} vs {}",
                flat.len(),
                self.param_len()
            )));
        }
        match self {
            Memory::Matrix(m) => {
                let dims = m.w.dims().to_vec();
                m.w = flat.clone().reshape(&dims)?;
            }
            Memory::Mlp(m) => {
                let d = m.d;
                let h = m.hidden();
                let (w1_rng, w2_rng, gain_rng, offset_rng) = mlp_ranges(d, h);
                let data = flat.data();
                m.w1 = Tensor::from_vec(&[d, h], data[w1_rng].to_vec())?;
                m.w2 = Tensor::from_vec(&[h, d], data[w2_rng].to_vec())?;
                m.gain = data[gain_rng].to_vec();
                m.offset = data[offset_rng].to_vec();
            }
        }
        Ok(())
    }

    /// Expand a length-d channel signal to the flat parameter layout. Each
    /// matrix block broadcasts over the axis tied to the model dimension:
    /// per output row for the linear memory and for w1, per input column for
    /// w2, direct for gain/offset.
    pub fn expand_channel(&self, channel: &[f64]) -> Result<Vec<f64>> {
        match self {
            Memory::Matrix(m) => {
                if channel.len() != m.d_v() {
                    return Err(Error::shape(format!(
                        "channel signal length {} vs {} output rows",
                        channel.len(),
                        m.d_v()
                    )));
                }
                let mut out = Vec::with_capacity(m.w.len());
                for &c in channel {
                    out.extend(std::iter::repeat(c).take(m.d_k()));
                }
                Ok(out)
            }
            Memory::Mlp(m) => {
                if channel.len() != m.d {
                    return Err(Error::shape(format!(
                        "channel signal length {} vs model dim {}",
                        channel.len(),
                        m.d
                    )));
                }
                let h = m.hidden();
                let mut out = Vec::with_capacity(self.param_len());
                for &c in channel {
                    out.extend(std::iter::repeat(c).take(h));
                }
                for _ in 0..h {
                    out.extend_from_slice(channel);
                }
                out.extend_from_slice(channel);
                out.extend_from_slice(channel);
                Ok(out)
            }
        }
    }

    /// Slice layout over the flat parameters for simplex-constrained gates.
    /// Per-row policy: one slice per matrix row; gain/offset of the MLP are
    /// excluded (they stay fixed under simplex gates). Whole policy: one
    /// slice per weight block.
    pub fn simplex_slices(&self, per_row: bool) -> Vec<Range<usize>> {
        match self {
            Memory::Matrix(m) => {
                let (r, c) = (m.d_v(), m.d_k());
                if per_row {
                    (0..r).map(|i| i * c..(i + 1) * c).collect()
                } else {
                    vec![0..r * c]
                }
            }
            Memory::Mlp(m) => {
                let d = m.d;
                let h = m.hidden();
                let (w1_rng, w2_rng, _, _) = mlp_ranges(d, h);
                if per_row {
                    let mut slices: Vec<Range<usize>> =
                        (0..d).map(|i| w1_rng.start + i * h..w1_rng.start + (i + 1) * h).collect();
                    slices.extend((0..h).map(|j| w2_rng.start + j * d..w2_rng.start + (j + 1) * d));
                    slices
                } else {
                    vec![w1_rng, w2_rng]
                }
            }
        }
    }
}

fn mlp_ranges(d: usize, h: usize) -> (Range<usize>, Range<usize>, Range<usize>, Range<usize>) {
    let w1 = 0..d * h;
    let w2 = w1.end..w1.end + h * d;
    let gain = w2.end..w2.end + d;
    let offset = gain.end..gain.end + d;
    (w1, w2, gain, offset)
}

/// How the memory is built; carried inside model specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MemorySpec {
    Matrix {
        d_v: usize,
        d_k: usize,
    },
    Mlp {
        d: usize,
        #[serde(default = "default_expansion")]
        expansion: usize,
    },
}

fn default_expansion() -> usize {
    4
}

impl MemorySpec {
    /// Matrix memories start at zero; MLP memories draw a seeded normal init.
    pub fn build(&self, rng: &mut Rng) -> Memory {
        match *self {
            MemorySpec::Matrix { d_v, d_k } => Memory::Matrix(MatrixMemory::zeros(d_v, d_k)),
            MemorySpec::Mlp { d, expansion } => Memory::Mlp(MlpMemory::seeded(d, expansion, rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            MemorySpec::Matrix { d_k, .. } => d_k,
            MemorySpec::Mlp { d, .. } => d,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            MemorySpec::Matrix { d_v, .. } => d_v,
            MemorySpec::Mlp { d, .. } => d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_grad(mem: &Memory, k: &[f64], upstream: &[f64], step: f64) -> Vec<f64> {
        // central differences of upstream^T forward(k) in each parameter
        let flat = mem.params_flat();
        let mut grad = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut plus = mem.clone();
            let mut pf = flat.clone();
            pf.data_mut()[i] += step;
            plus.set_params_flat(&pf).unwrap();
            let mut minus = mem.clone();
            let mut mf = flat.clone();
            mf.data_mut()[i] -= step;
            minus.set_params_flat(&mf).unwrap();
            let fp: f64 = plus
                .forward(k)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(&o, &u)| o * u)
                .sum();
            let fm: f64 = minus
                .forward(k)
                .unwrap()
                .iter()
                .zip(upstream)
                .map(|(&o, &u)| o * u)
                .sum();
            grad[i] = (fp - fm) / (2.0 * step);
        }
        grad
    }

    #[test]
    fn matrix_forward_zero_and_identity() {
        let zero = Memory::Matrix(MatrixMemory::zeros(2, 3));
        assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let id = Memory::Matrix(MatrixMemory::from_tensor(Tensor::eye(3)).unwrap());
        assert_eq!(id.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn matrix_forward_dim_mismatch() {
        let m = Memory::Matrix(MatrixMemory::zeros(2, 3));
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn mlp_zero_w1_is_residual_passthrough() {
        let mut rng = Rng::new(5);
        let mut mlp = MlpMemory::seeded(4, 2, &mut rng);
        mlp.w1 = Tensor::zeros(&[4, 8]);
        let mem = Memory::Mlp(mlp);
        let x = [0.3, -1.0, 2.0, 0.1];
        let out = mem.forward(&x).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn matrix_grad_is_outer_product() {
        let m = Memory::Matrix(MatrixMemory::zeros(3, 2));
        // k = e1, upstream = e2 puts a single 1 at row 2, col 1
        let g = m.grad_params(&[1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let gz = m.grad_params(&[1.0, 0.7], &[0.0, 0.0, 0.0]).unwrap();
        assert!(gz.data().iter().all(|&x| x == 0.0));
        // exact outer product on random data
        let mut rng = Rng::new(1);
        let k = rng.normal_vec(2);
        let u = rng.normal_vec(3);
        let g = m.grad_params(&k, &u).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(g.data()[i * 2 + j], u[i] * k[j]);
            }
        }
    }

    #[test]
    fn mlp_grad_matches_finite_differences() {
        // weights at O(0.5) scale keep the layer-norm well conditioned, so
        // central differences at step 1e-5 resolve the gradient cleanly
        let mut rng = Rng::new(1234);
        for trial in 0..200 {
            let mut sub = rng.fork(trial);
            let mem = Memory::Mlp(MlpMemory::seeded_with_std(4, 2, 0.5, &mut sub));
            let x = sub.normal_vec(4);
            let u = sub.normal_vec(4);
            let analytic = mem.grad_params(&x, &u).unwrap();
            let numeric = finite_diff_grad(&mem, &x, &u, 1e-5);
            let scale = numeric
                .iter()
                .fold(0.0f64, |m, &g| m.max(g.abs()))
                .max(1e-8);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!(
                    (a - n).abs() / scale <= 1e-6,
                    "trial {trial}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn flatten_unflatten_roundtrip_bitexact() {
        let mut rng = Rng::new(77);
        let mem = Memory::Mlp(MlpMemory::seeded(3, 2, &mut rng));
        let flat = mem.params_flat();
        let mut copy = mem.clone();
        copy.set_params_flat(&flat).unwrap();
        assert_eq!(mem, copy);
        let m2 = Memory::Matrix(MatrixMemory::from_tensor(rng.normal_tensor(&[4, 5], 1.0)).unwrap());
        let mut c2 = m2.clone();
        c2.set_params_flat(&m2.params_flat()).unwrap();
        assert_eq!(m2, c2);
    }

    #[test]
    fn channel_expansion_layout() {
        let m = Memory::Matrix(MatrixMemory::zeros(2, 3));
        let e = m.expand_channel(&[5.0, 7.0]).unwrap();
        assert_eq!(e, vec![5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
        assert!(m.expand_channel(&[1.0]).is_err());

        let mut rng = Rng::new(3);
        let mlp = Memory::Mlp(MlpMemory::seeded(2, 2, &mut rng));
        let e = mlp.expand_channel(&[1.0, 2.0]).unwrap();
        assert_eq!(e.len(), mlp.param_len());
        // w1 rows (2x4), then w2 columns (4x2), then gain, offset
        assert_eq!(&e[0..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        assert_eq!(&e[8..16], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(&e[16..20], &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn simplex_slice_layouts() {
        let m = Memory::Matrix(MatrixMemory::zeros(2, 3));
        assert_eq!(m.simplex_slices(true), vec![0..3, 3..6]);
        assert_eq!(m.simplex_slices(false), vec![0..6]);
    }
}
