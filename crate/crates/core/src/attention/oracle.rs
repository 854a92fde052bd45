use super::{head_slice, AttentionConfig, Dims, ShiftPlan};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor3};

/// Direct `O(L^2)` evaluation: builds every score `k(q_i, k_j)` and
/// normalizes each row by its sum.
///
/// A row whose sum has magnitude below the configured epsilon is reported
/// as [`Error::DegenerateRow`] rather than guarded.
pub fn quadratic_oracle<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    cfg: &AttentionConfig,
) -> Result<Tensor3<T>> {
    let dims = Dims::new(q.shape(), k.shape(), v.shape(), cfg)?;
    let out = oracle_raw(q.as_slice(), k.as_slice(), v.as_slice(), &dims, cfg, cfg.epsilon_for::<T>())?;
    Tensor3::from_f64_checked(dims.batch, dims.len, dims.d_v(), out, "attention output")
}

/// Row-stochastic weights of head `head`, as a `[batch][L][L]` array
/// flattened row-major. Masked entries are zero.
pub fn attention_weights<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    cfg: &AttentionConfig,
    head: usize,
) -> Result<Vec<f64>> {
    let dims = Dims::new(q.shape(), k.shape(), [q.batch(), q.len(), cfg.heads], cfg)?;
    if head >= dims.heads {
        return Err(Error::Config(format!("head {head} out of range for {} heads", dims.heads)));
    }
    let eps = cfg.epsilon_for::<T>();
    let (l, d, dh) = (dims.len, dims.d(), dims.dh);
    let shifts = key_plan(k.as_slice(), &dims, cfg)?;
    let mut out = vec![0.0; dims.batch * l * l];
    let mut qi = vec![0.0; dh];
    let mut keys = vec![0.0; l * dh];
    for b in 0..dims.batch {
        shifted_keys(k.as_slice(), &shifts, &dims, b, head, &mut keys);
        for i in 0..l {
            let r = b * l + i;
            let upto = if cfg.causal { i + 1 } else { l };
            head_slice(&q.as_slice()[r * d..(r + 1) * d], head, dh, 0.0, &mut qi);
            shift_query(cfg, &mut qi, &keys[..upto * dh]);
            let row = &mut out[r * l..(r + 1) * l];
            let mut z = 0.0;
            for (j, w) in row.iter_mut().enumerate().take(upto) {
                *w = cfg.kernel.direct(&qi, &keys[j * dh..(j + 1) * dh]);
                z += *w;
            }
            check_row(z, eps, b, head, i)?;
            row.iter_mut().for_each(|w| *w /= z);
        }
    }
    Ok(out)
}

/// Key shifts for the direct form. The per-row query shift already bounds
/// every exponent, so causal rows skip the key shift and depend on past
/// keys only.
pub(crate) fn key_plan<T: Real>(k: &[T], dims: &Dims, cfg: &AttentionConfig) -> Result<ShiftPlan> {
    if cfg.causal {
        return Ok(ShiftPlan {
            k: vec![0.0; dims.batch * dims.len * dims.heads],
        });
    }
    ShiftPlan::new(k, dims, cfg)
}

/// Head `h` of every key in sequence `b`, shifted, as `[L x dh]`.
pub(crate) fn shifted_keys<T: Real>(k: &[T], shifts: &ShiftPlan, dims: &Dims, b: usize, h: usize, out: &mut [f64]) {
    let (l, d, dh) = (dims.len, dims.d(), dims.dh);
    for j in 0..l {
        let c = b * l + j;
        head_slice(&k[c * d..(c + 1) * d], h, dh, shifts.k[c * dims.heads + h], &mut out[j * dh..(j + 1) * dh]);
    }
}

/// For stabilized `hadamard-exp`, shifts `qi` by its largest exponent
/// `q_e + k_e` over the visible keys, so the largest score is exactly 1.
pub(crate) fn shift_query(cfg: &AttentionConfig, qi: &mut [f64], keys: &[f64]) {
    if !cfg.shifts_active() {
        return;
    }
    let s = keys
        .chunks(qi.len())
        .flat_map(|kj| kj.iter().zip(qi.iter()).map(|(a, b)| a + b))
        .fold(f64::NEG_INFINITY, f64::max);
    qi.iter_mut().for_each(|e| *e -= s);
}

pub(crate) fn check_row(z: f64, eps: f64, batch: usize, head: usize, position: usize) -> Result<()> {
    if !(z.abs() >= eps) {
        return Err(Error::DegenerateRow {
            batch,
            head,
            position,
            sum: z,
        });
    }
    Ok(())
}

pub(crate) fn oracle_raw<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: &Dims,
    cfg: &AttentionConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    let (l, d, dvt, dh) = (dims.len, dims.d(), dims.d_v(), dims.dh);
    let shifts = key_plan(k, dims, cfg)?;
    let mut out = vec![0.0; dims.batch * l * dvt];
    let mut qi = vec![0.0; dh];
    let mut keys = vec![0.0; l * dh];
    let mut scores = vec![0.0; l];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            shifted_keys(k, &shifts, dims, b, h, &mut keys);
            for i in 0..l {
                let r = b * l + i;
                head_slice(&q[r * d..(r + 1) * d], h, dh, 0.0, &mut qi);
                let upto = if cfg.causal { i + 1 } else { l };
                shift_query(cfg, &mut qi, &keys[..upto * dh]);
                let mut z = 0.0;
                for j in 0..upto {
                    scores[j] = cfg.kernel.direct(&qi, &keys[j * dh..(j + 1) * dh]);
                    z += scores[j];
                }
                check_row(z, eps, b, h, i)?;
                let y = &mut out[r * dvt + h * dims.dv..r * dvt + (h + 1) * dims.dv];
                for (j, &s) in scores.iter().enumerate().take(upto) {
                    let w = s / z;
                    let vrow = &v[(b * l + j) * dvt + h * dims.dv..(b * l + j) * dvt + (h + 1) * dims.dv];
                    for (o, x) in y.iter_mut().zip(vrow) {
                        *o += w * x.to_f64();
                    }
                }
            }
        }
    }
    Ok(out)
}
