use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::run::{train, LossRecord};
use crate::error::{Error, Result};
use crate::kernels::KernelId;
use crate::model::{BiasMode, LobeMode, TokenMixer};
use crate::numerics::Real;

/// Default loss level for `steps_to_threshold`, in nats per token.
pub const DEFAULT_THRESHOLD: f64 = 2.0;

/// Token mixers compared by the suite.
pub const ABLATION_MIXERS: [TokenMixer; 3] = [
    TokenMixer::Kernel(KernelId::SumSqDist),
    TokenMixer::Kernel(KernelId::HadamardExp),
    TokenMixer::FullOracle,
];

/// One point of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn of(config: TrainConfig) -> Self {
        let m = &config.model;
        let name = format!(
            "hl-{}_mem-{}_bias-{}_mix-{}",
            if m.hyper_link { "on" } else { "off" },
            m.memory_lobe,
            m.bias_mode,
            m.kernel
        );
        Variant { name, config }
    }
}

/// The grid over hyper-link, memory lobe, bias mode and token mixer.
///
/// The lobe reads the flow produced by the hyper-link dataflow, so with
/// hyper-link off only the lobe-off variants exist: 27 + 9 = 36 runs.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for hyper in [true, false] {
        for lobe in [LobeMode::Off, LobeMode::On, LobeMode::Causal] {
            if !hyper && lobe != LobeMode::Off {
                continue;
            }
            for bias in BiasMode::ALL {
                for mixer in ABLATION_MIXERS {
                    let mut cfg = base.clone();
                    cfg.model.hyper_link = hyper;
                    cfg.model.memory_lobe = lobe;
                    cfg.model.bias_mode = bias;
                    cfg.model.kernel = mixer;
                    out.push(Variant::of(cfg));
                }
            }
        }
    }
    out
}

/// Outcome of one variant.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub params: usize,
    pub records: Vec<LossRecord>,
    /// Updates applied before the training loss first reached the threshold.
    pub steps_to_threshold: Option<usize>,
    /// Set when the run aborted.
    pub error: Option<String>,
}

impl VariantResult {
    pub fn final_train_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.val_loss)
    }

    pub fn min_train_loss(&self) -> f64 {
        self.records.iter().map(|r| r.train_loss).fold(f64::NAN, f64::min)
    }

    pub fn grad_finite(&self) -> bool {
        self.records.iter().all(|r| r.grad_norm.is_finite())
    }

    /// First step whose training loss is at or below `level`.
    pub fn steps_to(&self, level: f64) -> Option<usize> {
        self.records.iter().find(|r| r.train_loss <= level).map(|r| r.step)
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    hyper_link: bool,
    memory_lobe: String,
    bias_mode: String,
    mixer: String,
    params: usize,
    steps: usize,
    steps_to_threshold: Option<usize>,
    final_train_loss: f64,
    min_train_loss: f64,
    final_val_loss: f64,
    grad_finite: bool,
    status: String,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    variant: &'a str,
    step: usize,
    train_loss: f64,
    val_loss: f64,
}

/// Trains every variant into `out_dir/<name>` and writes `summary.csv`
/// and `curves.csv` beside them. A variant that aborts on a non-finite
/// loss is recorded and the suite moves on; other errors stop it.
pub fn ablation_suite<T: Real>(
    variants: &[Variant],
    threshold: f64,
    out_dir: &Path,
    on_done: &mut dyn FnMut(&VariantResult),
) -> Result<Vec<VariantResult>> {
    for v in variants {
        v.config.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        let dir = out_dir.join(&v.name);
        let (records, error) = match train::<T>(&v.config, &dir) {
            Ok(outcome) => (outcome.records, None),
            Err(e @ Error::NonFiniteLoss { .. }) => {
                (super::run::read_loss_csv(&dir.join("loss.csv"))?, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        let mut result = VariantResult {
            params: v.config.model.param_count(),
            variant: v.clone(),
            records,
            steps_to_threshold: None,
            error,
        };
        result.steps_to_threshold = result.steps_to(threshold);
        on_done(&result);
        results.push(result);
    }
    write_summary(&results, out_dir)?;
    Ok(results)
}

fn write_summary(results: &[VariantResult], out_dir: &Path) -> Result<()> {
    let fmt_err = |p: &Path, e: csv::Error| Error::Format(format!("writing {}: {e}", p.display()));
    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| fmt_err(&path, e))?;
    for r in results {
        let m = &r.variant.config.model;
        w.serialize(SummaryRow {
            variant: &r.variant.name,
            hyper_link: m.hyper_link,
            memory_lobe: m.memory_lobe.to_string(),
            bias_mode: m.bias_mode.to_string(),
            mixer: m.kernel.to_string(),
            params: r.params,
            steps: r.records.len(),
            steps_to_threshold: r.steps_to_threshold,
            final_train_loss: r.final_train_loss(),
            min_train_loss: r.min_train_loss(),
            final_val_loss: r.final_val_loss(),
            grad_finite: r.grad_finite(),
            status: r.error.clone().unwrap_or_else(|| "ok".into()),
        })
        .map_err(|e| fmt_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| fmt_err(&path, e))?;
    for r in results {
        for rec in &r.records {
            w.serialize(CurveRow {
                variant: &r.variant.name,
                step: rec.step,
                train_loss: rec.train_loss,
                val_loss: rec.val_loss,
            })
            .map_err(|e| fmt_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
