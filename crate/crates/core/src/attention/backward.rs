//! Adjoints of the normalized attention output.
//!
//! With `z_i = guard(phi_iᵀ C_i)` and `y_i = phi_iᵀ S_i / z_i`, an upstream
//! gradient `g_i` gives `a_i = g_i / z_i` and `c_i = -(g_i · y_i) / z_i`, and
//!
//! ```text
//! dphi_i = S_i a_i + C_i c_i
//! dpsi_j = R_j v_j + r_j        R_j = Σ_{i sees j} phi_i a_iᵀ
//! dv_j   = R_jᵀ psi_j           r_j = Σ_{i sees j} phi_i c_i
//! ```
//!
//! In the causal case `R_j` and `r_j` are suffix sums, accumulated in a
//! reverse sweep. The guard is treated as the identity and shifts as
//! constants.

use super::linear::{psi_features, query_features, to_f64_into, ForwardContext};
use super::oracle::{check_row, key_plan, shift_query, shifted_keys};
use super::{guard, head_slice, AttentionConfig, Dims, ShiftPlan};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor3};

/// Gradients with respect to `q`, `k` and `v`, in `f64`.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: Tensor3<f64>,
    pub dk: Tensor3<f64>,
    pub dv: Tensor3<f64>,
}

/// `O(L)` backward pass for a prior [`super::linear_forward`] call.
pub fn attention_backward<T: Real, U: Real>(upstream: &Tensor3<U>, ctx: &ForwardContext<T>) -> Result<AttentionGrads> {
    let dims = Dims::new(ctx.q.shape(), ctx.k.shape(), ctx.v.shape(), &ctx.cfg)?;
    check_upstream(upstream.shape(), &dims)?;
    let g = upstream.to_f64_vec();
    let (dq, dk, dv) = linear_backward_raw(
        ctx.q.as_slice(),
        ctx.k.as_slice(),
        ctx.v.as_slice(),
        &g,
        &dims,
        &ctx.cfg,
        ctx.cfg.epsilon_for::<T>(),
    )?;
    Ok(pack(&dims, dq, dk, dv))
}

/// `O(L^2)` backward of [`super::quadratic_oracle`] through the direct
/// kernel form.
pub fn quadratic_backward<T: Real, U: Real>(
    upstream: &Tensor3<U>,
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionGrads> {
    let dims = Dims::new(q.shape(), k.shape(), v.shape(), cfg)?;
    check_upstream(upstream.shape(), &dims)?;
    let g = upstream.to_f64_vec();
    let (dq, dk, dv) = quadratic_backward_raw(
        q.as_slice(),
        k.as_slice(),
        v.as_slice(),
        &g,
        &dims,
        cfg,
        cfg.epsilon_for::<T>(),
    )?;
    Ok(pack(&dims, dq, dk, dv))
}

fn check_upstream(shape: [usize; 3], dims: &Dims) -> Result<()> {
    if shape != [dims.batch, dims.len, dims.d_v()] {
        return Err(Error::Shape(format!(
            "upstream gradient {shape:?} does not match output [{}, {}, {}]",
            dims.batch,
            dims.len,
            dims.d_v()
        )));
    }
    Ok(())
}

fn pack(dims: &Dims, dq: Vec<f64>, dk: Vec<f64>, dv: Vec<f64>) -> AttentionGrads {
    AttentionGrads {
        dq: Tensor3::from_raw(dims.batch, dims.len, dims.d(), dq),
        dk: Tensor3::from_raw(dims.batch, dims.len, dims.d(), dk),
        dv: Tensor3::from_raw(dims.batch, dims.len, dims.d_v(), dv),
    }
}

type Triple = (Vec<f64>, Vec<f64>, Vec<f64>);

pub(crate) fn linear_backward_raw<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[f64],
    dims: &Dims,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<Triple> {
    let shifts = ShiftPlan::new(k, dims, cfg)?;
    let (l, d, dvt, dh, dv, m) = (dims.len, dims.d(), dims.d_v(), dims.dh, dims.dv, dims.m);
    let hs = dims.heads;
    let sign = if cfg.inject_psi_sign_fault { -1.0 } else { 1.0 };
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];

    let mut qs = vec![0.0; l * dh];
    let mut ks = vec![0.0; l * dh];
    let mut phi = vec![0.0; l * m];
    let mut psi = vec![0.0; l * m];
    let mut vals = vec![0.0; l * dv];
    let mut a = vec![0.0; l * dv];
    let mut c = vec![0.0; l];
    let mut dphi = vec![0.0; l * m];
    let mut y = vec![0.0; dv];
    let mut cacc = vec![0.0; m];
    let mut sacc = vec![0.0; m * dv];
    let mut big_r = vec![0.0; m * dv];
    let mut small_r = vec![0.0; m];
    let mut tmp = vec![0.0; dh];

    for b in 0..dims.batch {
        for h in 0..dims.heads {
            for t in 0..l {
                let r = b * l + t;
                head_slice(&k[r * d..(r + 1) * d], h, dh, shifts.k[r * hs + h], &mut ks[t * dh..(t + 1) * dh]);
                psi_features(cfg, &mut ks[t * dh..(t + 1) * dh], &mut psi[t * m..(t + 1) * m]);
                to_f64_into(&v[r * dvt + h * dv..r * dvt + (h + 1) * dv], &mut vals[t * dv..(t + 1) * dv]);
            }
            cacc.iter_mut().for_each(|x| *x = 0.0);
            sacc.iter_mut().for_each(|x| *x = 0.0);
            if !cfg.causal {
                for t in 0..l {
                    accumulate(&mut cacc, &mut sacc, &psi[t * m..(t + 1) * m], &vals[t * dv..(t + 1) * dv]);
                }
            }
            // Forward sweep: per-row adjoint scalars and dphi.
            for i in 0..l {
                if cfg.causal {
                    accumulate(&mut cacc, &mut sacc, &psi[i * m..(i + 1) * m], &vals[i * dv..(i + 1) * dv]);
                }
                let r = b * l + i;
                let qi = &mut qs[i * dh..(i + 1) * dh];
                head_slice(&q[r * d..(r + 1) * d], h, dh, 0.0, qi);
                query_features(cfg, qi, &cacc, &mut phi[i * m..(i + 1) * m]);
                let p = &phi[i * m..(i + 1) * m];
                let mut den = 0.0;
                y.iter_mut().for_each(|x| *x = 0.0);
                for f in 0..m {
                    den += p[f] * cacc[f];
                    for e in 0..dv {
                        y[e] += p[f] * sacc[f * dv + e];
                    }
                }
                let z = guard(den, eps);
                let gi = &g[(b * l + i) * dvt + h * dv..(b * l + i) * dvt + (h + 1) * dv];
                let mut gy = 0.0;
                for e in 0..dv {
                    y[e] /= z;
                    a[i * dv + e] = gi[e] / z;
                    gy += gi[e] * y[e];
                }
                c[i] = -gy / z;
                let dp = &mut dphi[i * m..(i + 1) * m];
                for f in 0..m {
                    let mut s = cacc[f] * c[i];
                    for e in 0..dv {
                        s += sacc[f * dv + e] * a[i * dv + e];
                    }
                    dp[f] = s;
                }
            }
            // Reverse sweep: R and r are suffix sums (full sums when
            // bidirectional).
            big_r.iter_mut().for_each(|x| *x = 0.0);
            small_r.iter_mut().for_each(|x| *x = 0.0);
            if !cfg.causal {
                for i in 0..l {
                    accumulate_adjoint(&mut small_r, &mut big_r, &phi[i * m..(i + 1) * m], c[i], &a[i * dv..(i + 1) * dv]);
                }
            }
            let mut dpsi = vec![0.0; m];
            for j in (0..l).rev() {
                if cfg.causal {
                    accumulate_adjoint(&mut small_r, &mut big_r, &phi[j * m..(j + 1) * m], c[j], &a[j * dv..(j + 1) * dv]);
                }
                let vj = &vals[j * dv..(j + 1) * dv];
                let ps = &psi[j * m..(j + 1) * m];
                let r = b * l + j;
                let gvj = &mut gv[r * dvt + h * dv..r * dvt + (h + 1) * dv];
                for f in 0..m {
                    let row = &big_r[f * dv..(f + 1) * dv];
                    let mut s = small_r[f];
                    for e in 0..dv {
                        s += row[e] * vj[e];
                        gvj[e] += row[e] * ps[f];
                    }
                    dpsi[f] = s * sign;
                }
                tmp.iter_mut().for_each(|x| *x = 0.0);
                cfg.kernel.psi_vjp(&ks[j * dh..(j + 1) * dh], &dpsi, &mut tmp);
                for (o, t) in gk[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(&tmp) {
                    *o += t;
                }
                let gqi = &mut gq[r * d + h * dh..r * d + (h + 1) * dh];
                cfg.kernel.phi_vjp(&qs[j * dh..(j + 1) * dh], &dphi[j * m..(j + 1) * m], gqi);
            }
        }
    }
    Ok((gq, gk, gv))
}

#[inline]
fn accumulate(c: &mut [f64], s: &mut [f64], psi: &[f64], v: &[f64]) {
    let dv = v.len();
    for (f, &p) in psi.iter().enumerate() {
        c[f] += p;
        for e in 0..dv {
            s[f * dv + e] += p * v[e];
        }
    }
}

#[inline]
fn accumulate_adjoint(small_r: &mut [f64], big_r: &mut [f64], phi: &[f64], c: f64, a: &[f64]) {
    let dv = a.len();
    for (f, &p) in phi.iter().enumerate() {
        small_r[f] += p * c;
        for e in 0..dv {
            big_r[f * dv + e] += p * a[e];
        }
    }
}

pub(crate) fn quadratic_backward_raw<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[f64],
    dims: &Dims,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<Triple> {
    let shifts = key_plan(k, dims, cfg)?;
    let (l, d, dvt, dh, dv) = (dims.len, dims.d(), dims.d_v(), dims.dh, dims.dv);
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut qi = vec![0.0; dh];
    let mut ks = vec![0.0; l * dh];
    let mut vals = vec![0.0; l * dv];
    let mut scores = vec![0.0; l];
    let mut y = vec![0.0; dv];
    let mut dqi = vec![0.0; dh];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            shifted_keys(k, &shifts, dims, b, h, &mut ks);
            for t in 0..l {
                let r = b * l + t;
                to_f64_into(&v[r * dvt + h * dv..r * dvt + (h + 1) * dv], &mut vals[t * dv..(t + 1) * dv]);
            }
            for i in 0..l {
                let upto = if cfg.causal { i + 1 } else { l };
                let r = b * l + i;
                head_slice(&q[r * d..(r + 1) * d], h, dh, 0.0, &mut qi);
                shift_query(cfg, &mut qi, &ks[..upto * dh]);
                let mut z = 0.0;
                for j in 0..upto {
                    scores[j] = cfg.kernel.direct(&qi, &ks[j * dh..(j + 1) * dh]);
                    z += scores[j];
                }
                check_row(z, eps, b, h, i)?;
                y.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..upto {
                    for e in 0..dv {
                        y[e] += scores[j] / z * vals[j * dv + e];
                    }
                }
                let gi = &g[r * dvt + h * dv..r * dvt + (h + 1) * dv];
                let gy: f64 = gi.iter().zip(&y).map(|(a, b)| a * b).sum();
                dqi.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..upto {
                    let vj = &vals[j * dv..(j + 1) * dv];
                    let c = b * l + j;
                    let gvj = &mut gv[c * dvt + h * dv..c * dvt + (h + 1) * dv];
                    let w = scores[j] / z;
                    let mut gvv = 0.0;
                    for e in 0..dv {
                        gvj[e] += w * gi[e];
                        gvv += gi[e] * vj[e];
                    }
                    let dscore = (gvv - gy) / z;
                    let gkj = &mut gk[c * d + h * dh..c * d + (h + 1) * dh];
                    cfg.kernel.direct_grad(&qi, &ks[j * dh..(j + 1) * dh], dscore, &mut dqi, gkj);
                }
                for (o, x) in gq[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(&dqi) {
                    *o += x;
                }
            }
        }
    }
    Ok((gq, gk, gv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{linear_attention, linear_forward, quadratic_oracle};
    use crate::kernels::KernelId;
    use crate::numerics::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn check(kernel: KernelId, causal: bool, quadratic: bool) {
        let (bsz, l, d, heads) = (1, 16, 4, if kernel == KernelId::AsymmetricExample { 2 } else { 1 });
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draw = |rng: &mut ChaCha8Rng| {
            Tensor3::<f64>::from_fn(bsz, l, d, |_, _, _| {
                if kernel == KernelId::AsymmetricExample {
                    rng.random_range(0.5..1.5)
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
        };
        let q = draw(&mut rng);
        let k = draw(&mut rng);
        let v = draw(&mut rng);
        let cfg = AttentionConfig::new(kernel, heads, causal);
        let w = loss_weights(bsz * l * d, 5);
        let up = Tensor3::<f64>::from_raw(bsz, l, d, w.clone());
        let grads = if quadratic {
            quadratic_backward(&up, &q, &k, &v, &cfg).unwrap()
        } else {
            let (_, ctx) = linear_forward(&q, &k, &v, &cfg).unwrap();
            attention_backward(&up, &ctx).unwrap()
        };
        let fwd = |q: &Tensor3<f64>, k: &Tensor3<f64>, v: &Tensor3<f64>| {
            let y = if quadratic {
                quadratic_oracle(q, k, v, &cfg).unwrap()
            } else {
                linear_attention(q, k, v, &cfg).unwrap()
            };
            dot(y.as_slice(), &w)
        };
        for which in 0..3 {
            let base = [&q, &k, &v][which].to_f64_vec();
            let analytic = [&grads.dq, &grads.dk, &grads.dv][which].as_slice();
            for idx in (0..base.len()).step_by(5) {
                let fd = central_difference(
                    |x| {
                        let t = Tensor3::from_raw(bsz, l, d, x.to_vec());
                        match which {
                            0 => fwd(&t, &k, &v),
                            1 => fwd(&q, &t, &v),
                            _ => fwd(&q, &k, &t),
                        }
                    },
                    &base,
                    idx,
                    1e-5,
                );
                let err = relative_error(analytic[idx], fd, 1e-4);
                assert!(err <= 1e-5, "{kernel} causal={causal} quad={quadratic} input={which} idx={idx}: {} vs {fd}", analytic[idx]);
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for kernel in KernelId::ALL {
            for causal in [false, true] {
                check(kernel, causal, false);
            }
        }
    }

    #[test]
    fn quadratic_gradients_match_finite_differences() {
        for kernel in KernelId::ALL {
            for causal in [false, true] {
                check(kernel, causal, true);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor3::<f64>::randn(2, 9, 4, &mut rng);
        let cfg = AttentionConfig::new(KernelId::HadamardExp, 2, true);
        let (_, ctx) = linear_forward(&q, &q, &q, &cfg).unwrap();
        let g = attention_backward(&Tensor3::<f64>::zeros(2, 9, 4), &ctx).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert!(t.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn causal_key_gradient_ignores_earlier_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor3::<f64>::randn(1, 12, 4, &mut rng);
        let k = Tensor3::<f64>::randn(1, 12, 4, &mut rng);
        let v = Tensor3::<f64>::randn(1, 12, 4, &mut rng);
        let cfg = AttentionConfig::new(KernelId::SumSqDist, 1, true);
        let (_, ctx) = linear_forward(&q, &k, &v, &cfg).unwrap();
        // Upstream only on rows before 6: keys and values from 6 on get nothing.
        let up = Tensor3::<f64>::from_fn(1, 12, 4, |_, l, _| if l < 6 { 1.0 } else { 0.0 });
        let g = attention_backward(&up, &ctx).unwrap();
        for l in 6..12 {
            for e in 0..4 {
                assert_eq!(g.dk.get(0, l, e), 0.0);
                assert_eq!(g.dv.get(0, l, e), 0.0);
            }
        }
    }

    #[test]
    fn linear_and_quadratic_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor3::<f64>::randn(2, 20, 8, &mut rng);
        let k = Tensor3::<f64>::randn(2, 20, 8, &mut rng);
        let v = Tensor3::<f64>::randn(2, 20, 8, &mut rng);
        let up = Tensor3::<f64>::randn(2, 20, 8, &mut rng);
        for causal in [false, true] {
            let cfg = AttentionConfig::new(KernelId::HadamardExp, 2, causal);
            let (_, ctx) = linear_forward(&q, &k, &v, &cfg).unwrap();
            let a = attention_backward(&up, &ctx).unwrap();
            let b = quadratic_backward(&up, &q, &k, &v, &cfg).unwrap();
            assert!(a.dq.max_abs_diff(&b.dq) < 1e-10);
            assert!(a.dk.max_abs_diff(&b.dk) < 1e-10);
            assert!(a.dv.max_abs_diff(&b.dv) < 1e-10);
        }
    }
}
