use super::{global_max, guard, head_slice, AttentionConfig, Dims, ShiftPlan, CHUNK};
use crate::error::Result;
use crate::numerics::{two_sum, Compensated, Real, Split, Tensor3};

/// Running `C = Σ psi_j` and `S = Σ psi_j v_jᵀ` for one head.
///
/// Both are kept as unevaluated `hi + lo` pairs and contracted with
/// compensated dot products, so a row whose scores nearly cancel loses no
/// more than the direct evaluation would.
#[derive(Clone, Debug)]
pub(crate) struct HeadAccumulator {
    pub c: Vec<f64>,
    pub c_lo: Vec<f64>,
    pub s: Vec<f64>,
    pub s_lo: Vec<f64>,
    y_lo: Vec<f64>,
    dv: usize,
}

impl HeadAccumulator {
    pub fn new(m: usize, dv: usize) -> Self {
        HeadAccumulator {
            c: vec![0.0; m],
            c_lo: vec![0.0; m],
            s: vec![0.0; m * dv],
            s_lo: vec![0.0; m * dv],
            y_lo: vec![0.0; dv],
            dv,
        }
    }

    /// Number of `f64` slots held.
    pub fn len(&self) -> usize {
        self.c.len() + self.c_lo.len() + self.s.len() + self.s_lo.len() + self.y_lo.len()
    }

    /// Adds `psi + psi_lo` to `C` and `(psi + psi_lo) vᵀ` to `S`.
    #[inline]
    pub fn absorb(&mut self, psi: &[f64], psi_lo: &[f64], v: &[f64]) {
        let dv = self.dv;
        let v = &v[..dv];
        for (f, (&p, &pl)) in psi.iter().zip(psi_lo).enumerate() {
            let (c, e) = two_sum(self.c[f], p);
            self.c[f] = c;
            self.c_lo[f] += e + pl;
            let ps = Split::new(p);
            let s = &mut self.s[f * dv..(f + 1) * dv];
            let lo = &mut self.s_lo[f * dv..(f + 1) * dv];
            for i in 0..dv {
                let (prod, pe) = ps.exact_mul(v[i]);
                let (sum, se) = two_sum(s[i], prod);
                s[i] = sum;
                lo[i] += se + pe + pl * v[i];
            }
        }
    }

    /// Writes `phiᵀS / guard(phiᵀC)` into `y` and returns the guarded
    /// denominator. `phi_lo` carries the rounding residual of `phi`.
    #[inline]
    pub fn read(&mut self, phi: &[f64], phi_lo: &[f64], eps: f64, y: &mut [f64]) -> f64 {
        let dv = self.dv;
        let y = &mut y[..dv];
        let y_lo = &mut self.y_lo[..dv];
        y.fill(0.0);
        y_lo.fill(0.0);
        let mut den = Compensated::default();
        for (f, (&p, &pl)) in phi.iter().zip(phi_lo).enumerate() {
            den.add_product(p, pl, self.c[f], self.c_lo[f]);
            let ps = Split::new(p);
            let s = &self.s[f * dv..(f + 1) * dv];
            let s_lo = &self.s_lo[f * dv..(f + 1) * dv];
            for i in 0..dv {
                let (prod, pe) = ps.exact_mul(s[i]);
                let (sum, se) = two_sum(y[i], prod);
                y[i] = sum;
                y_lo[i] += se + pe + p * s_lo[i] + pl * s[i];
            }
        }
        let den = guard(den.value(), eps);
        for (o, lo) in y.iter_mut().zip(y_lo.iter()) {
            *o = (*o + lo) / den;
        }
        den
    }
}

/// Query features against accumulated `c`.
///
/// For stabilized `hadamard-exp`, `x` is first shifted in place by
/// `max_e(x_e + ln c_e)`. That scales the row's numerator and denominator
/// alike and leaves `phiᵀc >= 1`, clear of the denominator guard.
#[inline]
pub(crate) fn query_features(cfg: &AttentionConfig, x: &mut [f64], c: &[f64], out: &mut [f64]) {
    if cfg.shifts_active() {
        let s = x
            .iter()
            .zip(c)
            .filter(|(_, &ce)| ce > 0.0)
            .map(|(&xe, &ce)| xe + ce.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        let s = if s.is_finite() { s } else { global_max(x) };
        x.iter_mut().for_each(|e| *e -= s);
    }
    cfg.kernel.phi_into(x, out);
}

/// `x` is negated in place first when the sign fault is injected.
#[inline]
pub(crate) fn psi_features(cfg: &AttentionConfig, x: &mut [f64], out: &mut [f64]) {
    if cfg.inject_psi_sign_fault {
        x.iter_mut().for_each(|e| *e = -*e);
    }
    cfg.kernel.psi_into(x, out);
}

#[inline]
pub(crate) fn to_f64_into<T: Real>(src: &[T], out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(src) {
        *o = x.to_f64();
    }
}

/// Inputs kept for [`super::attention_backward`].
#[derive(Clone, Debug)]
pub struct ForwardContext<T: Real> {
    pub(crate) q: Tensor3<T>,
    pub(crate) k: Tensor3<T>,
    pub(crate) v: Tensor3<T>,
    pub(crate) cfg: AttentionConfig,
}

impl<T: Real> ForwardContext<T> {
    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }
}

/// Linear-time attention over the full sequence, ignoring `cfg.causal`.
pub fn linear_bidirectional<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor3<T>> {
    linear_attention(q, k, v, &cfg.causal(false))
}

/// Linear-time attention where row `i` only sees positions `0..=i`.
pub fn linear_causal<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor3<T>> {
    linear_attention(q, k, v, &cfg.causal(true))
}

/// Dispatches on `cfg.causal`.
pub fn linear_attention<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor3<T>> {
    let dims = Dims::new(q.shape(), k.shape(), v.shape(), cfg)?;
    let out = linear_raw(q.as_slice(), k.as_slice(), v.as_slice(), &dims, cfg, cfg.epsilon_for::<T>())?;
    Tensor3::from_f64_checked(dims.batch, dims.len, dims.d_v(), out, "attention output")
}

/// Like [`linear_attention`] but also returns what the backward pass needs.
pub fn linear_forward<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor3<T>, ForwardContext<T>)> {
    let y = linear_attention(q, k, v, cfg)?;
    Ok((
        y,
        ForwardContext {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            cfg: *cfg,
        },
    ))
}

pub(crate) fn linear_raw<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: &Dims,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    let shifts = ShiftPlan::new(k, dims, cfg)?;
    let (l, d, dvt, dh, dv, m) = (dims.len, dims.d(), dims.d_v(), dims.dh, dims.dv, dims.m);
    let hs = dims.heads;
    let mut out = vec![0.0; dims.batch * l * dvt];
    let mut x = vec![0.0; dh];
    let (mut phi, mut phi_lo) = (vec![0.0; m], vec![0.0; m]);
    let mut psi = vec![0.0; CHUNK.min(l) * m];
    let mut psi_lo = vec![0.0; CHUNK.min(l) * m];
    let mut vals = vec![0.0; CHUNK.min(l) * dv];
    for b in 0..dims.batch {
        for h in 0..hs {
            let mut acc = HeadAccumulator::new(m, dv);
            if !cfg.causal {
                for j in 0..l {
                    let r = b * l + j;
                    head_slice(&k[r * d..(r + 1) * d], h, dh, shifts.k[r * hs + h], &mut x);
                    psi_features(cfg, &mut x, &mut psi[..m]);
                    cfg.kernel.psi_residual_into(&x, &mut psi_lo[..m]);
                    to_f64_into(&v[r * dvt + h * dv..r * dvt + (h + 1) * dv], &mut vals[..dv]);
                    acc.absorb(&psi[..m], &psi_lo[..m], &vals[..dv]);
                }
                for i in 0..l {
                    let r = b * l + i;
                    head_slice(&q[r * d..(r + 1) * d], h, dh, 0.0, &mut x);
                    query_features(cfg, &mut x, &acc.c, &mut phi);
                    cfg.kernel.phi_residual_into(&x, &mut phi_lo);
                    acc.read(&phi, &phi_lo, eps, &mut out[r * dvt + h * dv..r * dvt + (h + 1) * dv]);
                }
                continue;
            }
            for start in (0..l).step_by(CHUNK) {
                let end = (start + CHUNK).min(l);
                for t in start..end {
                    let r = b * l + t;
                    let o = t - start;
                    head_slice(&k[r * d..(r + 1) * d], h, dh, shifts.k[r * hs + h], &mut x);
                    psi_features(cfg, &mut x, &mut psi[o * m..(o + 1) * m]);
                    cfg.kernel.psi_residual_into(&x, &mut psi_lo[o * m..(o + 1) * m]);
                    to_f64_into(&v[r * dvt + h * dv..r * dvt + (h + 1) * dv], &mut vals[o * dv..(o + 1) * dv]);
                }
                for t in start..end {
                    let r = b * l + t;
                    let o = t - start;
                    acc.absorb(&psi[o * m..(o + 1) * m], &psi_lo[o * m..(o + 1) * m], &vals[o * dv..(o + 1) * dv]);
                    head_slice(&q[r * d..(r + 1) * d], h, dh, 0.0, &mut x);
                    query_features(cfg, &mut x, &acc.c, &mut phi);
                    cfg.kernel.phi_residual_into(&x, &mut phi_lo);
                    acc.read(&phi, &phi_lo, eps, &mut out[r * dvt + h * dv..r * dvt + (h + 1) * dv]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::quadratic_oracle;
    use crate::kernels::KernelId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(seed: u64, b: usize, l: usize, d: usize) -> [Tensor3<f64>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            Tensor3::randn(b, l, d, &mut rng),
            Tensor3::randn(b, l, d, &mut rng),
            Tensor3::randn(b, l, d, &mut rng),
        ]
    }

    #[test]
    fn matches_oracle_for_nonnegative_kernels() {
        let [q, k, v] = inputs(1, 2, 70, 8);
        for kernel in [KernelId::HadamardExp, KernelId::SumSqDist] {
            for causal in [false, true] {
                let cfg = AttentionConfig::new(kernel, 2, causal);
                let want = quadratic_oracle(&q, &k, &v, &cfg).unwrap();
                let got = linear_attention(&q, &k, &v, &cfg).unwrap();
                assert!(got.max_abs_diff(&want) <= 1e-10, "{kernel} causal={causal}");
            }
        }
    }

    #[test]
    fn psi_fault_is_visible() {
        let [q, k, v] = inputs(2, 1, 16, 4);
        let mut cfg = AttentionConfig::new(KernelId::SumSqDist, 1, false);
        let clean = linear_attention(&q, &k, &v, &cfg).unwrap();
        cfg.inject_psi_sign_fault = true;
        let bad = linear_attention(&q, &k, &v, &cfg).unwrap();
        let want = quadratic_oracle(&q, &k, &v, &cfg).unwrap();
        assert!(clean.max_abs_diff(&want) < 1e-10);
        assert!(bad.max_abs_diff(&want) > 1e-3);
    }

    #[test]
    fn single_position_returns_value() {
        let [q, k, v] = inputs(3, 1, 1, 4);
        for kernel in [KernelId::HadamardExp, KernelId::SumSqDist, KernelId::MagnitudeDirection] {
            let cfg = AttentionConfig::new(kernel, 1, true);
            let y = linear_attention(&q, &k, &v, &cfg).unwrap();
            assert!(y.max_abs_diff(&v) < 1e-12);
        }
    }
}
