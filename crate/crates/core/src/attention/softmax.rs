//! Standard scaled softmax attention, evaluated directly in `O(L^2)`.
//!
//! Not decomposable; kept as the full-attention baseline for model
//! comparisons.

use crate::error::{Error, Result};
use crate::numerics::{check_finite, CustomOp, Matrix, Real, Tape, Tensor3, Var};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
    dv: usize,
    causal: bool,
}

impl Geometry {
    fn new(q: [usize; 3], k: [usize; 3], v: [usize; 3], heads: usize, causal: bool) -> Result<Self> {
        if q != k || v[0] != q[0] || v[1] != q[1] {
            return Err(Error::Shape(format!("softmax attention shapes {q:?}, {k:?}, {v:?}")));
        }
        if heads == 0 || !q[2].is_multiple_of(heads) || !v[2].is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "widths {} and {} are not divisible by {heads} heads",
                q[2], v[2]
            )));
        }
        Ok(Geometry {
            batch: q[0],
            len: q[1],
            heads,
            dh: q[2] / heads,
            dv: v[2] / heads,
            causal,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh as f64).sqrt()
    }

    /// Row-softmax of head `h` at row `r`, written to `p[..visible]`.
    fn weights<T: Real>(&self, q: &[T], k: &[T], b: usize, i: usize, h: usize, p: &mut [f64]) -> usize {
        let (l, d, dh) = (self.len, self.heads * self.dh, self.dh);
        let upto = if self.causal { i + 1 } else { l };
        let qi = &q[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate().take(upto) {
            let kj = &k[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
            *pj = self.scale() * qi.iter().zip(kj).map(|(a, c)| a.to_f64() * c.to_f64()).sum::<f64>();
            max = max.max(*pj);
        }
        let mut z = 0.0;
        for pj in p.iter_mut().take(upto) {
            *pj = (*pj - max).exp();
            z += *pj;
        }
        p.iter_mut().take(upto).for_each(|x| *x /= z);
        upto
    }
}

fn forward_raw<T: Real>(q: &[T], k: &[T], v: &[T], g: &Geometry) -> Vec<f64> {
    let (l, dvt) = (g.len, g.heads * g.dv);
    let mut out = vec![0.0; g.batch * l * dvt];
    let mut p = vec![0.0; l];
    for b in 0..g.batch {
        for h in 0..g.heads {
            for i in 0..l {
                let upto = g.weights(q, k, b, i, h, &mut p);
                let y = &mut out[(b * l + i) * dvt + h * g.dv..(b * l + i) * dvt + (h + 1) * g.dv];
                for (j, &w) in p.iter().enumerate().take(upto) {
                    let vj = &v[(b * l + j) * dvt + h * g.dv..(b * l + j) * dvt + (h + 1) * g.dv];
                    y.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x.to_f64());
                }
            }
        }
    }
    out
}

fn backward_raw<T: Real>(q: &[T], k: &[T], v: &[T], up: &[f64], g: &Geometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (l, d, dvt, dh, dv) = (g.len, g.heads * g.dh, g.heads * g.dv, g.dh, g.dv);
    let (mut dq, mut dk, mut dval) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    let mut p = vec![0.0; l];
    let mut dp = vec![0.0; l];
    let scale = g.scale();
    for b in 0..g.batch {
        for h in 0..g.heads {
            for i in 0..l {
                let upto = g.weights(q, k, b, i, h, &mut p);
                let gi = &up[(b * l + i) * dvt + h * dv..(b * l + i) * dvt + (h + 1) * dv];
                let mut mean = 0.0;
                for j in 0..upto {
                    let off = (b * l + j) * dvt + h * dv;
                    dp[j] = gi.iter().zip(&v[off..off + dv]).map(|(a, x)| a * x.to_f64()).sum();
                    mean += p[j] * dp[j];
                    dval[off..off + dv].iter_mut().zip(gi).for_each(|(o, a)| *o += p[j] * a);
                }
                let qo = (b * l + i) * d + h * dh;
                for j in 0..upto {
                    let ds = scale * p[j] * (dp[j] - mean);
                    let ko = (b * l + j) * d + h * dh;
                    for e in 0..dh {
                        dq[qo + e] += ds * k[ko + e].to_f64();
                        dk[ko + e] += ds * q[qo + e].to_f64();
                    }
                }
            }
        }
    }
    (dq, dk, dval)
}

/// `softmax(q kᵀ / sqrt(d_h)) v` per head, heads being contiguous slices.
pub fn softmax_attention<T: Real>(
    q: &Tensor3<T>,
    k: &Tensor3<T>,
    v: &Tensor3<T>,
    heads: usize,
    causal: bool,
) -> Result<Tensor3<T>> {
    let g = Geometry::new(q.shape(), k.shape(), v.shape(), heads, causal)?;
    let out = forward_raw(q.as_slice(), k.as_slice(), v.as_slice(), &g);
    Tensor3::from_f64_checked(g.batch, g.len, g.heads * g.dv, out, "softmax attention output")
}

struct SoftmaxOp {
    geometry: Geometry,
}

impl<T: Real> CustomOp<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax-attention"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad_output: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (dq, dk, dv) = backward_raw(
            inputs[0].as_slice(),
            inputs[1].as_slice(),
            inputs[2].as_slice(),
            grad_output,
            &self.geometry,
        );
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

/// Records softmax attention over `(batch*len) x D` matrices on `tape`.
pub fn softmax_attention_on_tape<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (rows, d) = tape.value(q).shape();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape(format!("{rows} rows cannot be split into {batch} sequences")));
    }
    let len = rows / batch;
    let (kr, kd) = tape.value(k).shape();
    let (vr, dvt) = tape.value(v).shape();
    if kr != rows || vr != rows {
        return Err(Error::Shape(format!("attention inputs have {rows}, {kr} and {vr} rows")));
    }
    let g = Geometry::new([batch, len, d], [batch, len, kd], [batch, len, dvt], heads, causal)?;
    let out = forward_raw(tape.value(q).as_slice(), tape.value(k).as_slice(), tape.value(v).as_slice(), &g);
    let out: Vec<T> = out.into_iter().map(T::from_f64).collect();
    check_finite(&out, "softmax attention output")?;
    tape.custom(&[q, k, v], Matrix::new(rows, dvt, out)?, Box::new(SoftmaxOp { geometry: g }))
}
