//! Row-normalized kernel attention.
//!
//! For a decomposable kernel the output row
//!
//! ```text
//! y_i = Σ_j k(q_i, k_j) v_j / Σ_j k(q_i, k_j)
//!     = phi(q_i)ᵀ S / phi(q_i)ᵀ C,   S = Σ_j psi(k_j) v_jᵀ,  C = Σ_j psi(k_j)
//! ```
//!
//! is computed without the `L x L` score matrix. The causal variant keeps
//! running prefix sums of `C` and `S`; [`DecodeState`] is that pair of
//! accumulators carried across decoding steps.
//!
//! [`quadratic_oracle`] evaluates the direct form and is the reference
//! for everything else in this module.
//!
//! Denominators with magnitude below `epsilon` are replaced by
//! `den + epsilon * sign(den)` in the linear paths (`sign(0) = +1`). The
//! oracle instead reports such rows as degenerate.

mod backward;
mod decode;
mod linear;
mod op;
mod oracle;
mod softmax;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::KernelId;
use crate::numerics::{Real, Tensor3};

pub use backward::{attention_backward, quadratic_backward, AttentionGrads};
pub use decode::{decode_step, DecodeState};
pub use linear::{linear_attention, linear_bidirectional, linear_causal, linear_forward, ForwardContext};
pub use op::attention_on_tape;
pub use oracle::{attention_weights, quadratic_oracle};
pub use softmax::{softmax_attention, softmax_attention_on_tape};

/// Largest amount a stabilized exponent may exceed its anchor shift.
pub const STALE_SHIFT_LIMIT: f64 = 300.0;

/// Rows per block in the causal pass.
pub(crate) const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kernel: KernelId,
    pub heads: usize,
    pub causal: bool,
    /// Denominator guard; `None` uses the precision default (1e-6 for
    /// f32, 1e-12 for f64).
    pub epsilon: Option<f64>,
    /// Shift exponent inputs of `hadamard-exp` before evaluating.
    pub stabilize: bool,
    /// Evaluates `psi` at the negated key in the linear paths. Only used
    /// to prove the checks can fail.
    #[doc(hidden)]
    pub inject_psi_sign_fault: bool,
}

impl AttentionConfig {
    pub fn new(kernel: KernelId, heads: usize, causal: bool) -> Self {
        AttentionConfig {
            kernel,
            heads,
            causal,
            epsilon: None,
            stabilize: true,
            inject_psi_sign_fault: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        self.epsilon = Some(epsilon);
        Ok(self)
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn epsilon_for<T: Real>(&self) -> f64 {
        self.epsilon.unwrap_or(T::GUARD)
    }

    pub fn head_dim(&self, d_model: usize) -> Result<usize> {
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(d_model / self.heads)
    }

    pub(crate) fn shifts_active(&self) -> bool {
        self.stabilize && self.kernel == KernelId::HadamardExp
    }
}

/// Which evaluation route an attention layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionPath {
    Linear,
    Quadratic,
}

impl fmt::Display for AttentionPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionPath::Linear => "linear",
            AttentionPath::Quadratic => "quadratic",
        })
    }
}

impl FromStr for AttentionPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(AttentionPath::Linear),
            "quadratic" => Ok(AttentionPath::Quadratic),
            _ => Err(Error::Config(format!("unknown attention path '{s}'"))),
        }
    }
}

/// Subtracts the global maximum entry of `q` from all of `q`, and likewise
/// for `k`. For `hadamard-exp` this scales every `phi` (resp. `psi`) by the
/// same positive constant, which cancels in the row normalization.
pub fn stabilize_shift<T: Real>(q: &Tensor3<T>, k: &Tensor3<T>) -> (Tensor3<T>, Tensor3<T>, f64, f64) {
    let sq = global_max(q.as_slice());
    let sk = global_max(k.as_slice());
    (q.map(|x| x - sq), k.map(|x| x - sk), sq, sk)
}

pub(crate) fn global_max<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max)
}

#[inline]
pub(crate) fn guard(den: f64, eps: f64) -> f64 {
    if den.abs() < eps {
        den + if den >= 0.0 { eps } else { -eps }
    } else {
        den
    }
}

/// Validated geometry of one attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub dh: usize,
    pub dv: usize,
    pub m: usize,
}

impl Dims {
    pub fn d(&self) -> usize {
        self.heads * self.dh
    }
    pub fn d_v(&self) -> usize {
        self.heads * self.dv
    }

    pub fn new(q: [usize; 3], k: [usize; 3], v: [usize; 3], cfg: &AttentionConfig) -> Result<Dims> {
        if q != k {
            return Err(Error::Shape(format!("query shape {q:?} differs from key shape {k:?}")));
        }
        if v[0] != q[0] || v[1] != q[1] {
            return Err(Error::Shape(format!("value shape {v:?} does not match queries {q:?}")));
        }
        let dh = cfg.head_dim(q[2])?;
        if !v[2].is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "value width {} is not divisible by {} heads",
                v[2], cfg.heads
            )));
        }
        Ok(Dims {
            batch: q[0],
            len: q[1],
            heads: cfg.heads,
            dh,
            dv: v[2] / cfg.heads,
            m: cfg.kernel.feature_dim(dh)?,
        })
    }
}

/// Key shifts for `hadamard-exp`, zero otherwise, indexed by
/// `row * heads + head`.
///
/// Keys share one shift per sequence and head, which scales every `psi`
/// of that head alike: the maximum over the sequence when bidirectional,
/// the maximum of the first key when causal, so that no output depends
/// on later positions. Queries are shifted row by row where they are
/// consumed (see `query_features`).
#[derive(Clone, Debug)]
pub(crate) struct ShiftPlan {
    pub k: Vec<f64>,
}

impl ShiftPlan {
    pub fn new<T: Real>(k: &[T], dims: &Dims, cfg: &AttentionConfig) -> Result<ShiftPlan> {
        let slots = dims.batch * dims.len * dims.heads;
        if !cfg.shifts_active() {
            return Ok(ShiftPlan { k: vec![0.0; slots] });
        }
        let (d, dh, hs, l) = (dims.d(), dims.dh, dims.heads, dims.len);
        let head = |r: usize, h: usize| global_max(&k[r * d + h * dh..r * d + (h + 1) * dh]);
        let mut ks = vec![0.0; slots];
        for b in 0..dims.batch {
            for h in 0..hs {
                let anchor = if cfg.causal {
                    head(b * l, h)
                } else {
                    (0..l).map(|t| head(b * l + t, h)).fold(f64::NEG_INFINITY, f64::max)
                };
                for t in 0..l {
                    let r = b * l + t;
                    let kmax = head(r, h);
                    if kmax - anchor > STALE_SHIFT_LIMIT {
                        return Err(Error::StaleShift {
                            value: kmax,
                            shift: anchor,
                            limit: STALE_SHIFT_LIMIT,
                        });
                    }
                    ks[r * hs + h] = anchor;
                }
            }
        }
        Ok(ShiftPlan { k: ks })
    }
}

/// Copies head `h` of `row` into `out` as `f64`, minus `shift`.
#[inline]
pub(crate) fn head_slice<T: Real>(row: &[T], h: usize, width: usize, shift: f64, out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(&row[h * width..(h + 1) * width]) {
        *o = x.to_f64() - shift;
    }
}
