//! Loss-curve figures over ablation results.

use std::fs;
use std::path::Path;

use anyhow::Context;
use ela_core::kernels::KernelId;
use ela_core::model::{BiasMode, LobeMode, TokenMixer};
use ela_core::training::{TrainConfig, Variant, VariantResult, ABLATION_MIXERS};
use serde::Serialize;

use crate::svg::{LineChart, Series};

/// A set of variants drawn on one chart.
#[derive(Clone, Debug)]
pub struct FigureGroup {
    pub name: &'static str,
    pub title: &'static str,
    pub variants: Vec<Variant>,
}

/// Hyper-link on, lobe off, inner bias, hadamard-exp; each group varies
/// one switch from there.
fn reference(base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.model.hyper_link = true;
    cfg.model.memory_lobe = LobeMode::Off;
    cfg.model.bias_mode = BiasMode::Inner;
    cfg.model.kernel = TokenMixer::Kernel(KernelId::HadamardExp);
    cfg
}

fn vary(base: &TrainConfig, f: impl Fn(&mut TrainConfig)) -> Variant {
    let mut cfg = reference(base);
    f(&mut cfg);
    Variant::of(cfg)
}

pub fn figure_groups(base: &TrainConfig) -> Vec<FigureGroup> {
    vec![
        FigureGroup {
            name: "bias",
            title: "MoE label bias: inner vs outer vs none",
            variants: BiasMode::ALL.iter().map(|&b| vary(base, |c| c.model.bias_mode = b)).collect(),
        },
        FigureGroup {
            name: "hyper_link",
            title: "Hyper-link vs attention residual",
            variants: [true, false].iter().map(|&h| vary(base, |c| c.model.hyper_link = h)).collect(),
        },
        FigureGroup {
            name: "memory",
            title: "Memory lobe: off vs on vs causal query",
            variants: [LobeMode::Off, LobeMode::On, LobeMode::Causal]
                .iter()
                .map(|&m| vary(base, |c| c.model.memory_lobe = m))
                .collect(),
        },
        FigureGroup {
            name: "kernels",
            title: "Kernels vs softmax attention",
            variants: ABLATION_MIXERS.iter().map(|&k| vary(base, |c| c.model.kernel = k)).collect(),
        },
    ]
}

/// Variants of all groups, each once, in first-seen order.
pub fn union(groups: &[FigureGroup]) -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    for v in groups.iter().flat_map(|g| &g.variants) {
        if !out.iter().any(|o| o.name == v.name) {
            out.push(v.clone());
        }
    }
    out
}

#[derive(Serialize)]
struct CurveRow<'a> {
    variant: &'a str,
    step: usize,
    train_loss: f64,
    val_loss: f64,
}

pub fn loss_chart(title: &str, results: &[&VariantResult]) -> LineChart {
    LineChart {
        title: title.into(),
        x_label: "step".into(),
        y_label: "training loss (nats/byte)".into(),
        log_x: false,
        log_y: false,
        series: results
            .iter()
            .map(|r| Series {
                name: r.variant.name.clone(),
                points: r.records.iter().map(|rec| (rec.step as f64, rec.train_loss)).collect(),
            })
            .collect(),
    }
}

/// Writes `<stem>.csv` with the curves and `<stem>.svg` drawn from them.
pub fn write_curves(dir: &Path, stem: &str, title: &str, results: &[&VariantResult]) -> anyhow::Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for r in results {
        for rec in &r.records {
            w.serialize(CurveRow {
                variant: &r.variant.name,
                step: rec.step,
                train_loss: rec.train_loss,
                val_loss: rec.val_loss,
            })?;
        }
    }
    w.flush()?;
    let svg_path = dir.join(format!("{stem}.svg"));
    fs::write(&svg_path, loss_chart(title, results).render()).with_context(|| format!("writing {}", svg_path.display()))
}
