//! Wall-time scaling of the linear path against the quadratic oracle.

use std::hint::black_box;
use std::time::{Duration, Instant};

use ela_core::attention::{linear_causal, quadratic_oracle, AttentionConfig, DecodeState};
use ela_core::kernels::KernelId;
use ela_core::numerics::{Real, Tensor3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::svg::{LineChart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Impl {
    Linear,
    Quadratic,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    #[serde(rename = "impl")]
    pub implementation: Impl,
    pub kernel_id: String,
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Median over `reps` timed repetitions, per call.
    pub wall_ns: u64,
    /// Linear: decode state after `L` steps. Quadratic: the key/value
    /// cache a decoder would hold at `L`.
    pub peak_state_bytes: usize,
    pub reps: usize,
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub kernel: KernelId,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            lengths: (8..=13).map(|e| 1usize << e).collect(),
            dim: 64,
            heads: 1,
            kernel: KernelId::SumSqDist,
            reps: 5,
            seed: 0,
        }
    }
}

/// Smallest nonzero step of the monotonic clock seen over a few reads.
fn clock_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times `f`, batching calls per repetition until one repetition spans at
/// least 1000 clock ticks. Returns the median per-call time.
fn time_median(reps: usize, resolution: Duration, mut f: impl FnMut(), warn: &mut dyn FnMut(String)) -> u64 {
    let floor = resolution * 1000;
    let mut calls = 1u32;
    loop {
        // Warm-up repetition, discarded.
        let t = Instant::now();
        for _ in 0..calls {
            f();
        }
        if t.elapsed() >= floor {
            break;
        }
        calls *= 2;
        warn(format!("repetition shorter than 1000 clock ticks; batching {calls} calls per repetition"));
    }
    let mut samples: Vec<u128> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..calls {
                f();
            }
            t.elapsed().as_nanos() / calls as u128
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2] as u64
}

fn decode_state_bytes(cfg: &AttentionConfig, q: &Tensor3<f64>) -> ela_core::Result<usize> {
    let mut st = DecodeState::new(cfg, q.dim(), q.dim())?;
    for t in 0..q.len() {
        st.step(q.row(0, t), q.row(0, t), q.row(0, t))?;
    }
    Ok(st.state_bytes())
}

/// Runs both implementations at every length. Inputs are scaled down so
/// that exponential kernels stay in range at any width.
pub fn bench_scaling(spec: &BenchSpec, warn: &mut dyn FnMut(String)) -> ela_core::Result<Vec<BenchRecord>> {
    if spec.reps < 5 {
        return Err(ela_core::Error::Config(format!("reps must be at least 5, got {}", spec.reps)));
    }
    if spec.lengths.contains(&0) {
        return Err(ela_core::Error::Config("lengths must be at least 1".into()));
    }
    let cfg = AttentionConfig::new(spec.kernel, spec.heads, true);
    cfg.head_dim(spec.dim)?;
    let resolution = clock_resolution();
    let mut out = Vec::new();
    for &l in &spec.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ l as u64);
        let scale = 1.0 / (spec.dim as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| Tensor3::<f64>::randn(1, l, spec.dim, rng).map(|x| x * scale);
        let (q, k, v) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let lin_ns = time_median(spec.reps, resolution, || {
            black_box(linear_causal(&q, &k, &v, &cfg).expect("benchmark inputs are valid"));
        }, warn);
        let quad_ns = time_median(spec.reps, resolution, || {
            black_box(quadratic_oracle(&q, &k, &v, &cfg).expect("benchmark inputs are valid"));
        }, warn);
        let record = |implementation, wall_ns, peak_state_bytes| BenchRecord {
            implementation,
            kernel_id: spec.kernel.to_string(),
            len: l,
            dim: spec.dim,
            heads: spec.heads,
            wall_ns,
            peak_state_bytes,
            reps: spec.reps,
        };
        out.push(record(Impl::Linear, lin_ns, decode_state_bytes(&cfg, &q)?));
        out.push(record(Impl::Quadratic, quad_ns, 2 * l * spec.dim * f64::BYTES));
    }
    Ok(out)
}

/// Least-squares slope of `ln y` on `ln x`; `None` with fewer than two
/// distinct lengths.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if pts.len() < 2 || sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

pub fn series(records: &[BenchRecord], which: Impl) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.implementation == which)
        .map(|r| (r.len as f64, r.wall_ns as f64))
        .collect()
}

pub fn slope_of(records: &[BenchRecord], which: Impl) -> Option<f64> {
    loglog_slope(&series(records, which))
}

pub fn scaling_chart(records: &[BenchRecord]) -> LineChart {
    let first = records.first();
    LineChart {
        title: format!(
            "Attention wall time ({}, D={}, H={})",
            first.map_or("", |r| r.kernel_id.as_str()),
            first.map_or(0, |r| r.dim),
            first.map_or(0, |r| r.heads)
        ),
        x_label: "sequence length L".into(),
        y_label: "median wall time per call (ns)".into(),
        log_x: true,
        log_y: true,
        series: [(Impl::Linear, "linear"), (Impl::Quadratic, "quadratic")]
            .into_iter()
            .map(|(i, name)| Series {
                name: name.into(),
                points: series(records, i),
            })
            .collect(),
    }
}
