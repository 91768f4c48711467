//! Dense row-major f64 tensors, the seeded counter-based RNG, smooth
//! approximations of sign/abs, and the binary dump format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals. Empty `dims` means a scalar
/// (one element).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "dims {:?} need {} elements, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            dims: vec![],
            data: vec![x],
        }
    }

    /// d x d identity matrix.
    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer with new extents of equal total length.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() needs a 2-d tensor");
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() needs a 2-d tensor");
        self.dims[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, x: f64) {
        let c = self.cols();
        self.data[i * c + j] = x;
    }

    /// Matrix-vector product for a 2-d tensor: `self[rows x cols] * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.dims.len() != 2 || self.cols() != x.len() {
            return Err(Error::shape(format!(
                "matvec: {:?} * vector of length {}",
                self.dims,
                x.len()
            )));
        }
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Dense product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims.len() != 2 || other.dims.len() != 2 || self.cols() != other.rows() {
            return Err(Error::shape(format!(
                "matmul: {:?} * {:?}",
                self.dims, other.dims
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[l * n..(l + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// Outer product u v^T as a [u.len() x v.len()] tensor.
    pub fn outer(u: &[f64], v: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(&[u.len(), v.len()]);
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                t.data[i * v.len() + j] = ui * vj;
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// self + scale * other, elementwise.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + scale * b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::shape("dot: length mismatch".to_string()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// Entrywise q-norm (sum |x|^q)^(1/q) over the whole tensor.
    pub fn norm_lq(&self, q: f64) -> f64 {
        self.data
            .iter()
            .map(|&x| x.abs().powf(q))
            .sum::<f64>()
            .powf(1.0 / q)
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "max_abs_diff length");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// RNG

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator: draw i is `mix64(seed + (i+1) * GOLDEN_GAMMA)`
/// with the splitmix64 finalizer as the mixing function. The stream depends
/// only on (seed, counter), so identical seeds give bit-identical streams on
/// every platform and forked sub-streams stay reproducible regardless of
/// execution order.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Independent sub-stream for a labelled piece of work.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng {
            seed: mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; one pair of uniforms per draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, dims: &[usize], std: f64) -> Tensor {
        let len: usize = dims.iter().product();
        let data = (0..len).map(|_| self.normal() * std).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Uniform unit-norm vector (normal draw, normalized).
    pub fn unit_vec(&mut self, n: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(n);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Smooth approximations

/// Sharpness/floor constants for the smooth sign and abs surrogates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothCfg {
    /// tanh sharpness: smooth_sign(x) = tanh(sign_sharpness * x).
    pub sign_sharpness: f64,
    /// abs floor: smooth_abs(x) = sqrt(x^2 + abs_epsilon).
    pub abs_epsilon: f64,
}

impl Default for SmoothCfg {
    fn default() -> Self {
        SmoothCfg {
            sign_sharpness: 10.0,
            abs_epsilon: 1e-6,
        }
    }
}

impl SmoothCfg {
    pub fn validate(&self) -> Result<()> {
        if self.sign_sharpness <= 0.0 || self.abs_epsilon <= 0.0 {
            return Err(Error::Contract(
                "SmoothCfg requires sign_sharpness > 0 and abs_epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// tanh(alpha * x): odd, range (-1, 1), pointwise -> sign(x) as alpha grows.
pub fn smooth_sign(x: f64, cfg: &SmoothCfg) -> f64 {
    (cfg.sign_sharpness * x).tanh()
}

/// sqrt(x^2 + eps): even, >= sqrt(eps), differentiable everywhere.
pub fn smooth_abs(x: f64, cfg: &SmoothCfg) -> f64 {
    (x * x + cfg.abs_epsilon).sqrt()
}

// ---------------------------------------------------------------------------
// Binary dump format
//
// Little-endian: magic "MIRAS1\0\0" (8 bytes), u32 ndim, ndim x u64 extents,
// then the row-major f64 payload. No padding, no compression.

const MAGIC: &[u8; 8] = b"MIRAS1\0\0";
const MAX_NDIM: u32 = 64;

pub fn dump_tensor(t: &Tensor, sink: &mut impl Write) -> Result<()> {
    sink.write_all(MAGIC)?;
    sink.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in &t.data {
        sink.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_tensor(source: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 8];
    source
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut b4 = [0u8; 4];
    source
        .read_exact(&mut b4)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let ndim = u32::from_le_bytes(b4);
    if ndim > MAX_NDIM {
        return Err(Error::Format(format!("ndim {} exceeds limit", ndim)));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut len: usize = 1;
    for _ in 0..ndim {
        let mut b8 = [0u8; 8];
        source
            .read_exact(&mut b8)
            .map_err(|_| Error::Format("truncated extents".into()))?;
        let extent = u64::from_le_bytes(b8);
        let extent: usize = extent
            .try_into()
            .map_err(|_| Error::Format("extent overflows usize".into()))?;
        len = len
            .checked_mul(extent)
            .ok_or_else(|| Error::Format("dims product overflows".into()))?;
        dims.push(extent);
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        let mut b8 = [0u8; 8];
        source
            .read_exact(&mut b8)
            .map_err(|_| Error::Format("truncated payload".into()))?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Tensor { dims, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_sign_examples() {
        let cfg = SmoothCfg::default();
        assert_eq!(smooth_sign(0.0, &cfg), 0.0);
        assert!(smooth_sign(100.0, &cfg) > 0.999999);
        // tanh(1) computed from the exponential definition as an
        // implementation-independent route.
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let tanh1 = (e2 - 1.0) / (e2 + 1.0);
        assert!((smooth_sign(0.1, &cfg) - tanh1).abs() < 1e-12);
        assert!((smooth_sign(0.1, &cfg) - 0.761594).abs() < 1e-6);
        // odd
        for x in [-3.0, -0.2, 0.7, 5.0] {
            assert_eq!(smooth_sign(x, &cfg), -smooth_sign(-x, &cfg));
        }
    }

    #[test]
    fn smooth_sign_pointwise_convergence() {
        let cfg = SmoothCfg {
            sign_sharpness: 1e4,
            abs_epsilon: 1e-6,
        };
        for x in [0.5, -0.5, 0.75, -2.0, 10.0] {
            assert!((smooth_sign(x, &cfg) - x.signum()).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn smooth_abs_examples() {
        let cfg = SmoothCfg::default();
        assert_eq!(smooth_abs(0.0, &cfg), 1e-3);
        assert_eq!(smooth_abs(3.0, &cfg), 9.000001f64.sqrt());
        assert_eq!(smooth_abs(-3.0, &cfg), smooth_abs(3.0, &cfg));
    }

    #[test]
    fn smooth_abs_dominates_abs_by_at_most_sqrt_eps() {
        let cfg = SmoothCfg::default();
        for i in -100..=100 {
            let x = i as f64 * 0.37;
            let gap = smooth_abs(x, &cfg) - x.abs();
            assert!(gap >= 0.0 && gap <= cfg.abs_epsilon.sqrt(), "x={x} gap={gap}");
        }
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(43);
        assert_ne!(Rng::new(42).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_forks_are_distinct() {
        let root = Rng::new(7);
        let mut a = root.fork(0);
        let mut b = root.fork(1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn dump_roundtrip_identity() {
        let t = Tensor::eye(2);
        let mut buf = Vec::new();
        dump_tensor(&t, &mut buf).unwrap();
        let back = load_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn dump_roundtrip_scalar() {
        let t = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        dump_tensor(&t, &mut buf).unwrap();
        let back = load_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        assert!(back.dims().is_empty());
    }

    #[test]
    fn dump_roundtrip_seeded_bitexact() {
        let mut rng = Rng::new(99);
        let t = rng.normal_tensor(&[3, 5, 7], 1.0);
        let mut buf = Vec::new();
        dump_tensor(&t, &mut buf).unwrap();
        let mut buf2 = Vec::new();
        dump_tensor(&load_tensor(&mut buf.as_slice()).unwrap(), &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn load_rejects_garbage() {
        assert!(load_tensor(&mut &b"NOTMIRAS"[..]).is_err());
        let mut buf = Vec::new();
        dump_tensor(&Tensor::eye(3), &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(load_tensor(&mut buf.as_slice()).is_err());
        // extents that overflow the product
        let mut evil = Vec::new();
        evil.extend_from_slice(MAGIC);
        evil.extend_from_slice(&2u32.to_le_bytes());
        evil.extend_from_slice(&u64::MAX.to_le_bytes());
        evil.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(load_tensor(&mut evil.as_slice()).is_err());
    }

    #[test]
    fn matvec_and_outer() {
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        let o = Tensor::outer(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(o.data(), &[3.0, 4.0, 6.0, 8.0]);
    }
}
