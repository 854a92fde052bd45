use super::backward::{linear_backward_raw, quadratic_backward_raw};
use super::linear::linear_raw;
use super::oracle::oracle_raw;
use super::{AttentionConfig, AttentionPath, Dims};
use crate::error::{Error, Result};
use crate::numerics::{check_finite, CustomOp, Matrix, Real, Tape, Var};

struct AttentionOp {
    cfg: AttentionConfig,
    dims: Dims,
    path: AttentionPath,
}

impl<T: Real> CustomOp<T> for AttentionOp {
    fn name(&self) -> &'static str {
        match self.path {
            AttentionPath::Linear => "linear-attention",
            AttentionPath::Quadratic => "quadratic-attention",
        }
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad_output: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v) = (inputs[0].as_slice(), inputs[1].as_slice(), inputs[2].as_slice());
        let eps = self.cfg.epsilon_for::<T>();
        let (dq, dk, dv) = match self.path {
            AttentionPath::Linear => linear_backward_raw(q, k, v, grad_output, &self.dims, &self.cfg, eps)?,
            AttentionPath::Quadratic => quadratic_backward_raw(q, k, v, grad_output, &self.dims, &self.cfg, eps)?,
        };
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

/// Records attention over `(batch*len) x D` matrices on `tape`.
///
/// The linear path has an `O(L)` backward; the quadratic path
/// differentiates the direct form in `O(L^2)`.
pub fn attention_on_tape<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    cfg: &AttentionConfig,
    path: AttentionPath,
) -> Result<Var> {
    let (rows, d) = tape.value(q).shape();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape(format!("{rows} rows cannot be split into {batch} sequences")));
    }
    let len = rows / batch;
    let (kr, kd) = tape.value(k).shape();
    let (vr, dvt) = tape.value(v).shape();
    if kr != rows || vr != rows {
        return Err(Error::Shape(format!(
            "attention inputs have {rows}, {kr} and {vr} rows"
        )));
    }
    let dims = Dims::new([batch, len, d], [batch, len, kd], [batch, len, dvt], cfg)?;
    let eps = cfg.epsilon_for::<T>();
    let (qs, ks, vs) = (tape.value(q).as_slice(), tape.value(k).as_slice(), tape.value(v).as_slice());
    let out = match path {
        AttentionPath::Linear => linear_raw(qs, ks, vs, &dims, cfg, eps)?,
        AttentionPath::Quadratic => oracle_raw(qs, ks, vs, &dims, cfg, eps)?,
    };
    let out: Vec<T> = out.into_iter().map(T::from_f64).collect();
    check_finite(&out, "attention output")?;
    let value = Matrix::new(rows, dvt, out)?;
    tape.custom(
        &[q, k, v],
        value,
        Box::new(AttentionOp {
            cfg: *cfg,
            dims,
            path,
        }),
    )
}
