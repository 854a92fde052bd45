//! Exactly decomposable attention kernels.
//!
//! Each kernel comes with a direct form `k(a, b)` and a pair of finite
//! feature maps with `k(a, b) = <phi(a), psi(b)>`. Queries go through
//! `phi`, keys through `psi`. Nothing requires `k` to be symmetric.
//!
//! | id             | k(a, b)                                   | width |
//! |----------------|-------------------------------------------|-------|
//! | `sum-sq`       | `‖a + b‖²`                                | D + 2 |
//! | `sub-sq`       | `‖a − b‖²`                                | D + 2 |
//! | `hadamard-exp` | `Σ_d exp(a_d) exp(b_d)`                   | D     |
//! | `mag-dir`      | `(â·b̂ + 1)(‖a‖² + 1)(‖b‖² + 1)`           | D + 1 |
//! | `asym-example` | `a₁b₂ + 2a₂b₁` (D = 2)                    | 2     |
//!
//! `â` is the unit direction of `a`, with the zero vector mapped to the
//! zero direction.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::norm_sq_split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelId {
    SumSqDist,
    SubSqDist,
    HadamardExp,
    MagnitudeDirection,
    AsymmetricExample,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::SumSqDist,
        KernelId::SubSqDist,
        KernelId::HadamardExp,
        KernelId::MagnitudeDirection,
        KernelId::AsymmetricExample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelId::SumSqDist => "sum-sq",
            KernelId::SubSqDist => "sub-sq",
            KernelId::HadamardExp => "hadamard-exp",
            KernelId::MagnitudeDirection => "mag-dir",
            KernelId::AsymmetricExample => "asym-example",
        }
    }

    pub fn nonneg_guaranteed(self) -> bool {
        !matches!(self, KernelId::AsymmetricExample)
    }

    /// Feature width `M` for input width `d`.
    pub fn feature_dim(self, d: usize) -> Result<usize> {
        if d == 0 {
            return Err(Error::Shape("kernel input width must be positive".into()));
        }
        match self {
            KernelId::SumSqDist | KernelId::SubSqDist => Ok(d + 2),
            KernelId::HadamardExp => Ok(d),
            KernelId::MagnitudeDirection => Ok(d + 1),
            KernelId::AsymmetricExample if d == 2 => Ok(2),
            KernelId::AsymmetricExample => Err(Error::Shape(format!(
                "asym-example is defined for D = 2 only, got D = {d}"
            ))),
        }
    }

    /// Direct evaluation of `k(a, b)`.
    pub fn direct(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            KernelId::SumSqDist => a.iter().zip(b).map(|(x, y)| (x + y) * (x + y)).sum(),
            KernelId::SubSqDist => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            KernelId::HadamardExp => a.iter().zip(b).map(|(x, y)| (x + y).exp()).sum(),
            KernelId::MagnitudeDirection => {
                let (na, nb) = (norm_sq(a), norm_sq(b));
                let cos = if na > 0.0 && nb > 0.0 {
                    dot(a, b) / (na.sqrt() * nb.sqrt())
                } else {
                    0.0
                };
                (cos + 1.0) * (na + 1.0) * (nb + 1.0)
            }
            KernelId::AsymmetricExample => a[0] * b[1] + 2.0 * a[1] * b[0],
        }
    }

    /// Writes `phi(a)` into `out` (length `feature_dim`).
    pub fn phi_into(self, a: &[f64], out: &mut [f64]) {
        let d = a.len();
        match self {
            KernelId::SumSqDist | KernelId::SubSqDist => {
                out[..d].copy_from_slice(a);
                out[d] = norm_sq_split(a).0;
                out[d + 1] = 1.0;
            }
            KernelId::HadamardExp => out.iter_mut().zip(a).for_each(|(o, x)| *o = x.exp()),
            KernelId::MagnitudeDirection => magnitude_direction_map(a, out),
            KernelId::AsymmetricExample => {
                out[0] = a[0];
                out[1] = 2.0 * a[1];
            }
        }
    }

    /// Writes `psi(b)` into `out` (length `feature_dim`).
    pub fn psi_into(self, b: &[f64], out: &mut [f64]) {
        let d = b.len();
        match self {
            KernelId::SumSqDist | KernelId::SubSqDist => {
                let sign = if self == KernelId::SumSqDist { 2.0 } else { -2.0 };
                out.iter_mut().zip(b).for_each(|(o, x)| *o = sign * x);
                out[d] = 1.0;
                out[d + 1] = norm_sq_split(b).0;
            }
            KernelId::HadamardExp => out.iter_mut().zip(b).for_each(|(o, x)| *o = x.exp()),
            KernelId::MagnitudeDirection => magnitude_direction_map(b, out),
            KernelId::AsymmetricExample => {
                out[0] = b[1];
                out[1] = b[0];
            }
        }
    }

    /// Whether [`KernelId::phi_residual_into`] and
    /// [`KernelId::psi_residual_into`] can be nonzero.
    pub fn has_residuals(self) -> bool {
        matches!(self, KernelId::SumSqDist | KernelId::SubSqDist)
    }

    /// Rounding error of each `phi(a)` entry, so that `phi + residual`
    /// holds the feature to twice the working precision. Zero where the
    /// entry is exact or no correction is tracked.
    pub fn phi_residual_into(self, a: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.has_residuals() {
            out[a.len()] = norm_sq_split(a).1;
        }
    }

    /// Counterpart of [`KernelId::phi_residual_into`] for `psi(b)`.
    pub fn psi_residual_into(self, b: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        if self.has_residuals() {
            out[b.len() + 1] = norm_sq_split(b).1;
        }
    }

    /// Adds `J_phi(a)^T g` into `grad`.
    pub fn phi_vjp(self, a: &[f64], g: &[f64], grad: &mut [f64]) {
        let d = a.len();
        match self {
            KernelId::SumSqDist | KernelId::SubSqDist => {
                for e in 0..d {
                    grad[e] += g[e] + 2.0 * a[e] * g[d];
                }
            }
            KernelId::HadamardExp => {
                for e in 0..d {
                    grad[e] += g[e] * a[e].exp();
                }
            }
            KernelId::MagnitudeDirection => magnitude_direction_vjp(a, g, grad),
            KernelId::AsymmetricExample => {
                grad[0] += g[0];
                grad[1] += 2.0 * g[1];
            }
        }
    }

    /// Adds `J_psi(b)^T g` into `grad`.
    pub fn psi_vjp(self, b: &[f64], g: &[f64], grad: &mut [f64]) {
        let d = b.len();
        match self {
            KernelId::SumSqDist | KernelId::SubSqDist => {
                let sign = if self == KernelId::SumSqDist { 2.0 } else { -2.0 };
                for e in 0..d {
                    grad[e] += sign * g[e] + 2.0 * b[e] * g[d + 1];
                }
            }
            KernelId::HadamardExp => {
                for e in 0..d {
                    grad[e] += g[e] * b[e].exp();
                }
            }
            KernelId::MagnitudeDirection => magnitude_direction_vjp(b, g, grad),
            KernelId::AsymmetricExample => {
                grad[0] += g[1];
                grad[1] += g[0];
            }
        }
    }

    /// Adds `scale * dk/da` and `scale * dk/db` of the direct form.
    pub fn direct_grad(self, a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
        match self {
            KernelId::SumSqDist => {
                for d in 0..a.len() {
                    let s = 2.0 * (a[d] + b[d]) * scale;
                    ga[d] += s;
                    gb[d] += s;
                }
            }
            KernelId::SubSqDist => {
                for d in 0..a.len() {
                    let s = 2.0 * (a[d] - b[d]) * scale;
                    ga[d] += s;
                    gb[d] -= s;
                }
            }
            KernelId::HadamardExp => {
                for d in 0..a.len() {
                    let s = a[d].exp() * b[d].exp() * scale;
                    ga[d] += s;
                    gb[d] += s;
                }
            }
            KernelId::MagnitudeDirection => {
                let (na, nb) = (norm_sq(a), norm_sq(b));
                let (ra, rb) = (na.sqrt(), nb.sqrt());
                let cos = if ra > 0.0 && rb > 0.0 { dot(a, b) / (ra * rb) } else { 0.0 };
                let (ma, mb) = (na + 1.0, nb + 1.0);
                for d in 0..a.len() {
                    let mut da = (cos + 1.0) * mb * 2.0 * a[d];
                    let mut db = (cos + 1.0) * ma * 2.0 * b[d];
                    if ra > 0.0 && rb > 0.0 {
                        da += ma * mb * (b[d] / rb - cos * a[d] / ra) / ra;
                        db += ma * mb * (a[d] / ra - cos * b[d] / rb) / rb;
                    }
                    ga[d] += scale * da;
                    gb[d] += scale * db;
                }
            }
            KernelId::AsymmetricExample => {
                ga[0] += scale * b[1];
                ga[1] += scale * 2.0 * b[0];
                gb[0] += scale * 2.0 * a[1];
                gb[1] += scale * a[0];
            }
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown kernel '{s}' (expected one of sum-sq, sub-sq, hadamard-exp, mag-dir, asym-example)"
                ))
            })
    }
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// (‖a‖² + 1) · (â, 1)
fn magnitude_direction_map(a: &[f64], out: &mut [f64]) {
    let d = a.len();
    let n2 = norm_sq(a);
    let mag = n2 + 1.0;
    let r = n2.sqrt();
    for e in 0..d {
        out[e] = if r > 0.0 { mag * a[e] / r } else { 0.0 };
    }
    out[d] = mag;
}

fn magnitude_direction_vjp(a: &[f64], g: &[f64], grad: &mut [f64]) {
    let d = a.len();
    let n2 = norm_sq(a);
    let r = n2.sqrt();
    if r == 0.0 {
        return;
    }
    let mag = n2 + 1.0;
    let g_dir: f64 = (0..d).map(|e| g[e] * a[e] / r).sum();
    for e in 0..d {
        let unit = a[e] / r;
        grad[e] += 2.0 * a[e] * (g_dir + g[d]) + mag * (g[e] - unit * g_dir) / r;
    }
}

/// One kernel evaluated both ways.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelEval {
    pub direct: f64,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl KernelEval {
    /// `<phi, psi>`.
    pub fn decomposed(&self) -> f64 {
        dot(&self.phi, &self.psi)
    }
}

fn evaluate_unchecked(kernel: KernelId, a: &[f64], b: &[f64]) -> KernelEval {
    assert_eq!(a.len(), b.len(), "kernel inputs differ in length");
    let m = kernel.feature_dim(a.len()).expect("feature width");
    let mut phi = vec![0.0; m];
    let mut psi = vec![0.0; m];
    kernel.phi_into(a, &mut phi);
    kernel.psi_into(b, &mut psi);
    KernelEval {
        direct: kernel.direct(a, b),
        phi,
        psi,
    }
}

pub fn sum_sq_dist(a: &[f64], b: &[f64]) -> KernelEval {
    evaluate_unchecked(KernelId::SumSqDist, a, b)
}

pub fn sub_sq_dist(a: &[f64], b: &[f64]) -> KernelEval {
    evaluate_unchecked(KernelId::SubSqDist, a, b)
}

/// Fails with a finiteness error if any exponential overflows.
pub fn hadamard_exp(a: &[f64], b: &[f64]) -> Result<KernelEval> {
    let ev = evaluate_unchecked(KernelId::HadamardExp, a, b);
    if !ev.direct.is_finite() || ev.phi.iter().chain(&ev.psi).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(
            "hadamard-exp overflow; shift inputs before evaluating".into(),
        ));
    }
    Ok(ev)
}

pub fn magnitude_direction(a: &[f64], b: &[f64]) -> KernelEval {
    evaluate_unchecked(KernelId::MagnitudeDirection, a, b)
}

pub fn asymmetric_example(a: &[f64], b: &[f64]) -> Result<KernelEval> {
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::Shape(format!(
            "asym-example needs 2-vectors, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(evaluate_unchecked(KernelId::AsymmetricExample, a, b))
}

/// Evaluates any kernel, checking shapes and finiteness.
pub fn evaluate(kernel: KernelId, a: &[f64], b: &[f64]) -> Result<KernelEval> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "kernel inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    kernel.feature_dim(a.len())?;
    match kernel {
        KernelId::HadamardExp => hadamard_exp(a, b),
        KernelId::AsymmetricExample => asymmetric_example(a, b),
        _ => {
            let ev = evaluate_unchecked(kernel, a, b);
            if !ev.direct.is_finite() {
                return Err(Error::NonFinite(format!("{kernel} produced {}", ev.direct)));
            }
            Ok(ev)
        }
    }
}

/// A kernel bound to an input width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMapPair {
    pub kernel_id: KernelId,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub nonneg_guaranteed: bool,
}

impl FeatureMapPair {
    pub fn new(kernel_id: KernelId, input_dim: usize) -> Result<Self> {
        Ok(FeatureMapPair {
            kernel_id,
            input_dim,
            feature_dim: kernel_id.feature_dim(input_dim)?,
            nonneg_guaranteed: kernel_id.nonneg_guaranteed(),
        })
    }

    pub fn phi(&self, a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim];
        self.kernel_id.phi_into(a, &mut out);
        out
    }

    pub fn psi(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim];
        self.kernel_id.psi_into(b, &mut out);
        out
    }

    pub fn direct(&self, a: &[f64], b: &[f64]) -> f64 {
        self.kernel_id.direct(a, b)
    }
}

/// Empirical check of a kernel against the selection criteria.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub kernel_id: KernelId,
    /// max |<phi(a), psi(b)> − k(a, b)| over the samples.
    pub max_decomposition_error: f64,
    pub min_kernel_value: f64,
    /// Standard deviation of row-normalized weights over random 16x16
    /// score blocks. Small values mean diluted attention.
    pub discriminability: f64,
    pub samples: usize,
}

const BLOCK: usize = 16;

/// Draws `sample_count` standard-normal pairs and measures exactness,
/// sign and weight spread. Deterministic for a given `seed`.
pub fn validate_kernel(pair: &FeatureMapPair, sample_count: usize, seed: u64) -> Result<KernelReport> {
    if sample_count == 0 {
        return Err(Error::Config("sample_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = pair.input_dim;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };

    let mut max_err = 0.0f64;
    let mut min_val = f64::INFINITY;
    for s in 0..sample_count {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let direct = pair.direct(&a, &b);
        let decomposed = dot(&pair.phi(&a), &pair.psi(&b));
        if !direct.is_finite() || !decomposed.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} sample {s}: direct {direct}, decomposed {decomposed} (a = {a:?}, b = {b:?})",
                pair.kernel_id
            )));
        }
        max_err = max_err.max((decomposed - direct).abs());
        min_val = min_val.min(direct);
    }

    let blocks = (sample_count / BLOCK).max(1);
    let mut weights = Vec::with_capacity(blocks * BLOCK * BLOCK);
    for _ in 0..blocks {
        let queries: Vec<Vec<f64>> = (0..BLOCK).map(|_| draw(&mut rng)).collect();
        let keys: Vec<Vec<f64>> = (0..BLOCK).map(|_| draw(&mut rng)).collect();
        for q in &queries {
            let row: Vec<f64> = keys.iter().map(|k| pair.direct(q, k)).collect();
            let z: f64 = row.iter().sum();
            if z.abs() > 0.0 {
                weights.extend(row.iter().map(|v| v / z));
            }
        }
    }
    let n = weights.len().max(1) as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n;

    Ok(KernelReport {
        kernel_id: pair.kernel_id,
        max_decomposition_error: max_err,
        min_kernel_value: min_val,
        discriminability: var.sqrt(),
        samples: sample_count,
    })
}
