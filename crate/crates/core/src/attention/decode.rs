use std::mem::size_of;

use super::linear::{psi_features, query_features, to_f64_into, HeadAccumulator};
use super::{global_max, head_slice, AttentionConfig, STALE_SHIFT_LIMIT};
use crate::error::{Error, Result};
use crate::numerics::{check_finite, Real};

/// Causal attention state carried between decoding steps.
///
/// Holds `C` and `S` per head and nothing that grows with position, so
/// [`DecodeState::state_bytes`] is the same after 1 step or 10^6 steps.
/// Feeding a sequence through [`DecodeState::step`] reproduces
/// [`super::linear_causal`] bit for bit.
#[derive(Clone, Debug)]
pub struct DecodeState {
    cfg: AttentionConfig,
    dh: usize,
    dv: usize,
    heads: Vec<HeadAccumulator>,
    position: usize,
    shift: Option<Vec<f64>>,
    phi: Vec<f64>,
    phi_lo: Vec<f64>,
    psi: Vec<f64>,
    psi_lo: Vec<f64>,
    x: Vec<f64>,
    vrow: Vec<f64>,
}

impl DecodeState {
    /// `d_model` is the total query/key width, `d_value` the total value
    /// width; both are split across `cfg.heads`.
    pub fn new(cfg: &AttentionConfig, d_model: usize, d_value: usize) -> Result<Self> {
        let dh = cfg.head_dim(d_model)?;
        if d_value == 0 || !d_value.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!(
                "value width {d_value} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let dv = d_value / cfg.heads;
        let m = cfg.kernel.feature_dim(dh)?;
        Ok(DecodeState {
            cfg: cfg.causal(true),
            dh,
            dv,
            heads: (0..cfg.heads).map(|_| HeadAccumulator::new(m, dv)).collect(),
            position: 0,
            shift: None,
            phi: vec![0.0; m],
            phi_lo: vec![0.0; m],
            psi: vec![0.0; m],
            psi_lo: vec![0.0; m],
            x: vec![0.0; dh],
            vrow: vec![0.0; dv],
        })
    }

    /// Starts with a fixed key shift for every head instead of taking it
    /// from the first key.
    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = Some(vec![shift; self.heads.len()]);
        self
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Per-head key shifts in effect, once fixed.
    pub fn shift(&self) -> Option<&[f64]> {
        self.shift.as_deref()
    }

    /// Running `Σ psi(k_j)` of head `h`.
    pub fn c_acc(&self, h: usize) -> &[f64] {
        &self.heads[h].c
    }

    /// Running `Σ psi(k_j) v_jᵀ` of head `h`, `[M x d_v]` row-major.
    pub fn s_acc(&self, h: usize) -> &[f64] {
        &self.heads[h].s
    }

    /// Bytes held by the state, including heap buffers.
    pub fn state_bytes(&self) -> usize {
        let bufs: usize = self
            .heads
            .iter()
            .map(|a| size_of::<HeadAccumulator>() + a.len() * size_of::<f64>())
            .sum();
        size_of::<Self>()
            + bufs
            + (self.phi.len() + self.phi_lo.len() + self.psi.len() + self.psi_lo.len() + self.x.len() + self.vrow.len())
                * size_of::<f64>()
    }

    /// Absorbs `(k_t, v_t)` and returns the output for `q_t`.
    pub fn step<T: Real>(&mut self, q_t: &[T], k_t: &[T], v_t: &[T]) -> Result<Vec<T>> {
        let h = self.heads.len();
        if q_t.len() != h * self.dh || k_t.len() != h * self.dh || v_t.len() != h * self.dv {
            return Err(Error::Shape(format!(
                "decode step expects q,k of width {} and v of width {}, got {}, {}, {}",
                h * self.dh,
                h * self.dv,
                q_t.len(),
                k_t.len(),
                v_t.len()
            )));
        }
        check_finite(q_t, "decode query")?;
        check_finite(k_t, "decode key")?;
        check_finite(v_t, "decode value")?;
        let active = self.cfg.shifts_active();
        let dh = self.dh;
        let head_max = |x: &[T], h: usize| global_max(&x[h * dh..(h + 1) * dh]);
        if active {
            let anchors = self.shift.get_or_insert_with(|| (0..h).map(|i| head_max(k_t, i)).collect());
            for (i, &anchor) in anchors.iter().enumerate() {
                let kmax = head_max(k_t, i);
                if kmax - anchor > STALE_SHIFT_LIMIT {
                    return Err(Error::StaleShift {
                        value: kmax,
                        shift: anchor,
                        limit: STALE_SHIFT_LIMIT,
                    });
                }
            }
        }
        let eps = self.cfg.epsilon_for::<T>();
        let mut y = vec![0.0; h * self.dv];
        for (head, acc) in self.heads.iter_mut().enumerate() {
            let sk = match &self.shift {
                Some(anchors) if active => anchors[head],
                _ => 0.0,
            };
            head_slice(k_t, head, self.dh, sk, &mut self.x);
            psi_features(&self.cfg, &mut self.x, &mut self.psi);
            self.cfg.kernel.psi_residual_into(&self.x, &mut self.psi_lo);
            to_f64_into(&v_t[head * self.dv..(head + 1) * self.dv], &mut self.vrow);
            acc.absorb(&self.psi, &self.psi_lo, &self.vrow);
            head_slice(q_t, head, self.dh, 0.0, &mut self.x);
            query_features(&self.cfg, &mut self.x, &acc.c, &mut self.phi);
            self.cfg.kernel.phi_residual_into(&self.x, &mut self.phi_lo);
            acc.read(&self.phi, &self.phi_lo, eps, &mut y[head * self.dv..(head + 1) * self.dv]);
        }
        self.position += 1;
        let out: Vec<T> = y.into_iter().map(T::from_f64).collect();
        check_finite(&out, "decode output")?;
        Ok(out)
    }
}

/// Functional form of [`DecodeState::step`].
pub fn decode_step<T: Real>(state: &mut DecodeState, q_t: &[T], k_t: &[T], v_t: &[T]) -> Result<Vec<T>> {
    state.step(q_t, k_t, v_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::linear_causal;
    use crate::kernels::KernelId;
    use crate::numerics::Tensor3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn replays_causal_pass_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = Tensor3::<f64>::randn(1, 100, 8, &mut rng);
        let k = Tensor3::<f64>::randn(1, 100, 8, &mut rng);
        let v = Tensor3::<f64>::randn(1, 100, 8, &mut rng);
        for kernel in [KernelId::HadamardExp, KernelId::SumSqDist, KernelId::MagnitudeDirection] {
            let cfg = AttentionConfig::new(kernel, 2, true);
            let full = linear_causal(&q, &k, &v, &cfg).unwrap();
            let mut st = DecodeState::new(&cfg, 8, 8).unwrap();
            for t in 0..100 {
                let y = st.step(q.row(0, t), k.row(0, t), v.row(0, t)).unwrap();
                assert_eq!(y.as_slice(), full.row(0, t), "{kernel} t={t}");
            }
        }
    }

    #[test]
    fn accumulators_track_feature_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = Tensor3::<f64>::randn(1, 10, 4, &mut rng);
        let cfg = AttentionConfig::new(KernelId::SumSqDist, 1, true);
        let mut st = DecodeState::new(&cfg, 4, 4).unwrap();
        let mut want = vec![0.0; 6];
        for t in 0..10 {
            st.step(k.row(0, t), k.row(0, t), k.row(0, t)).unwrap();
            let mut psi = vec![0.0; 6];
            KernelId::SumSqDist.psi_into(k.row(0, t), &mut psi);
            want.iter_mut().zip(&psi).for_each(|(w, p)| *w += p);
            for (a, b) in st.c_acc(0).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
        assert_eq!(st.position(), 10);
    }

    #[test]
    fn stale_shift_is_reported() {
        let cfg = AttentionConfig::new(KernelId::HadamardExp, 1, true);
        let mut st = DecodeState::new(&cfg, 2, 2).unwrap().with_shift(0.0);
        st.step(&[0.0f64, 0.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(
            st.step(&[0.0f64, 0.0], &[400.0, 0.0], &[1.0, 1.0]),
            Err(Error::StaleShift { .. })
        ));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let cfg = AttentionConfig::new(KernelId::SumSqDist, 2, true);
        let mut st = DecodeState::new(&cfg, 4, 4).unwrap();
        assert!(matches!(st.step(&[0.0f32; 3], &[0.0; 4], &[0.0; 4]), Err(Error::Shape(_))));
    }
}
