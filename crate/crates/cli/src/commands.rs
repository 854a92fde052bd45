//! Argument parsing and dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ela_core::kernels::{validate_kernel, FeatureMapPair, KernelId, KernelReport};
use ela_core::model::{load_checkpoint, ModelConfig};
use ela_core::numerics::Real;
use ela_core::training::{
    ablation_suite, ablation_variants, desk_corpus, sample, train, SampleConfig, TrainConfig, Variant, VariantResult,
    DEFAULT_THRESHOLD,
};

use crate::bench::{bench_scaling, scaling_chart, slope_of, BenchSpec, Impl};
use crate::figures::{figure_groups, union, write_curves};
use crate::sweep::{causality_sweep, exactness_sweep, SweepSpec};
use crate::{Precision, Status, UsageError};

/// Exact linear attention: checks, benchmarks, training and sampling.
#[derive(Debug, Parser)]
#[command(name = "ela", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Kernel checks.
    Kernels {
        #[command(subcommand)]
        action: KernelsAction,
    },
    /// Attention checks.
    Attn {
        #[command(subcommand)]
        action: AttnAction,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        action: BenchAction,
    },
    /// Train one model into a run directory.
    Train(TrainArgs),
    /// Train the ablation grid and plot the loss curves.
    Ablate(AblateArgs),
    /// Generate bytes from a checkpoint.
    Sample(SampleArgs),
    /// Write the built-in training corpus.
    Corpus {
        #[arg(long, default_value = "desk.txt")]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum KernelsAction {
    /// Sample each kernel and report exactness, sign and spread.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Validate every built-in kernel.
    #[arg(long, conflicts_with = "kernel")]
    pub all: bool,
    /// Kernel ids to validate (repeatable).
    #[arg(long)]
    pub kernel: Vec<KernelId>,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input width. The asymmetric example always uses 2.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
}

#[derive(Debug, Subcommand)]
pub enum AttnAction {
    /// Linear path against the quadratic oracle, plus a causality sweep.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InjectedBug {
    PsiSign,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 17, 64, 257])]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4])]
    pub heads: Vec<usize>,
    /// Kernel ids (repeatable); all by default.
    #[arg(long)]
    pub kernel: Vec<KernelId>,
    /// Random instances per cell.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to ELA_PRECISION, else f64.
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, hide = true)]
    pub inject_bug: Option<InjectedBug>,
}

#[derive(Debug, Subcommand)]
pub enum BenchAction {
    /// Time linear and quadratic attention over a range of lengths.
    Scaling(ScalingArgs),
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048, 4096, 8192])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value = "sum-sq")]
    pub kernel: KernelId,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(5..))]
    pub reps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench")]
    pub out_dir: PathBuf,
    /// Exit 1 unless the linear slope is at most 1.3 and the quadratic
    /// slope at least 1.7.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset (desk, paper-6) applied before the file.
    #[arg(long)]
    pub model: Option<String>,
    /// Overrides, applied last (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblatePreset {
    /// Every variant of the grid.
    Grid,
    /// One chart per switch, each against a shared reference variant.
    PaperFigures,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value = "grid")]
    pub preset: AblatePreset,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "the ")]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temp: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Kernels {
            action: KernelsAction::Validate(a),
        } => kernels_validate(&a),
        Command::Attn {
            action: AttnAction::Check(a),
        } => attn_check(&a),
        Command::Bench {
            action: BenchAction::Scaling(a),
        } => bench_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Corpus { out } => {
            fs::write(&out, desk_corpus()).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} bytes to {}", desk_corpus().len(), out.display());
            Ok(Status::Pass)
        }
    }
}

/// Decomposition error above which a kernel fails validation.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-10;

pub fn validate_input_dim(kernel: KernelId, requested: usize) -> usize {
    if kernel == KernelId::AsymmetricExample {
        2
    } else {
        requested
    }
}

/// Validates `kernels` and says whether each report passes.
pub fn kernel_reports(kernels: &[KernelId], samples: usize, seed: u64, dim: usize) -> anyhow::Result<Vec<(KernelReport, bool)>> {
    kernels
        .iter()
        .map(|&k| {
            let pair = FeatureMapPair::new(k, validate_input_dim(k, dim))?;
            let r = validate_kernel(&pair, samples, seed)?;
            let ok = r.max_decomposition_error <= DECOMPOSITION_TOLERANCE && (!k.nonneg_guaranteed() || r.min_kernel_value >= 0.0);
            Ok((r, ok))
        })
        .collect()
}

fn kernels_validate(a: &ValidateArgs) -> anyhow::Result<Status> {
    let kernels = if a.all || a.kernel.is_empty() { KernelId::ALL.to_vec() } else { a.kernel.clone() };
    let reports = kernel_reports(&kernels, a.samples as usize, a.seed, a.dim as usize)?;
    println!(
        "{:<20} {:>4} {:>8} {:>14} {:>14} {:>14}  result",
        "kernel", "dim", "samples", "max_decomp_err", "min_value", "discrim"
    );
    for (r, ok) in &reports {
        println!(
            "{:<20} {:>4} {:>8} {:>14.3e} {:>14.4e} {:>14.4e}  {}",
            r.kernel_id.to_string(),
            validate_input_dim(r.kernel_id, a.dim as usize),
            r.samples,
            r.max_decomposition_error,
            r.min_kernel_value,
            r.discriminability,
            if *ok { "pass" } else { "FAIL" }
        );
    }
    Ok(if reports.iter().all(|(_, ok)| *ok) { Status::Pass } else { Status::Fail })
}

fn precisions(arg: Option<PrecisionArg>) -> anyhow::Result<Vec<Precision>> {
    Ok(match arg {
        Some(PrecisionArg::F32) => vec![Precision::F32],
        Some(PrecisionArg::F64) => vec![Precision::F64],
        Some(PrecisionArg::Both) => vec![Precision::F64, Precision::F32],
        None => vec![Precision::from_env(Precision::F64)?],
    })
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn attn_check(a: &CheckArgs) -> anyhow::Result<Status> {
    if a.lengths.contains(&0) || a.dims.contains(&0) || a.heads.contains(&0) {
        return Err(UsageError("lengths, dims and heads must be at least 1".into()).into());
    }
    let spec = SweepSpec {
        kernels: if a.kernel.is_empty() { KernelId::ALL.to_vec() } else { a.kernel.clone() },
        lengths: a.lengths.clone(),
        dims: a.dims.clone(),
        heads: a.heads.clone(),
        seeds: a.seeds,
        base_seed: a.seed,
        precisions: precisions(a.precision)?,
        inject_psi_sign_fault: a.inject_bug == Some(InjectedBug::PsiSign),
    };
    let exact = exactness_sweep(&spec)?;
    let causal = causality_sweep(a.seed)?;
    let mut w = csv::Writer::from_writer(output(&a.out)?);
    w.write_record(["check", "kernel", "precision", "causal", "L", "D", "H", "seeds", "degenerate", "max_abs_err", "tolerance", "pass"])?;
    for r in &exact {
        w.write_record([
            "exactness".to_string(),
            r.kernel.clone(),
            r.precision.clone(),
            r.causal.to_string(),
            r.len.to_string(),
            r.dim.to_string(),
            r.heads.to_string(),
            r.seeds.to_string(),
            r.degenerate.to_string(),
            format!("{:e}", r.max_abs_err),
            format!("{:e}", r.tolerance),
            r.pass.to_string(),
        ])?;
    }
    for r in &causal {
        w.write_record([
            format!("causality/{}", r.target),
            r.variant.clone(),
            String::new(),
            "true".into(),
            r.len.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            "bitwise".into(),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    let failed = exact.iter().filter(|r| !r.pass).count() + causal.iter().filter(|r| !r.pass).count();
    eprintln!(
        "{} exactness cells, {} causality checks, {failed} failed",
        exact.len(),
        causal.len()
    );
    Ok(if failed == 0 { Status::Pass } else { Status::Fail })
}

pub const LINEAR_SLOPE_MAX: f64 = 1.3;
pub const QUADRATIC_SLOPE_MIN: f64 = 1.7;

fn bench_cmd(a: &ScalingArgs) -> anyhow::Result<Status> {
    let spec = BenchSpec {
        lengths: a.lengths.clone(),
        dim: a.dim,
        heads: a.heads,
        kernel: a.kernel,
        reps: a.reps as usize,
        seed: a.seed,
    };
    let records = bench_scaling(&spec, &mut |m| eprintln!("warning: {m}"))?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut w = csv::Writer::from_path(a.out_dir.join("bench.csv"))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(a.out_dir.join("scaling.svg"), scaling_chart(&records).render())?;
    let fmt = |s: Option<f64>| s.map_or_else(|| "n/a".to_string(), |s| format!("{s:.3}"));
    let (lin, quad) = (slope_of(&records, Impl::Linear), slope_of(&records, Impl::Quadratic));
    println!("linear slope {}", fmt(lin));
    println!("quadratic slope {}", fmt(quad));
    let mut slopes = csv::Writer::from_path(a.out_dir.join("slopes.csv"))?;
    slopes.write_record(["impl", "slope"])?;
    slopes.write_record(["linear", &lin.map(|s| s.to_string()).unwrap_or_default()])?;
    slopes.write_record(["quadratic", &quad.map(|s| s.to_string()).unwrap_or_default()])?;
    slopes.flush()?;
    if !a.check {
        return Ok(Status::Pass);
    }
    let ok = lin.is_some_and(|s| s <= LINEAR_SLOPE_MAX) && quad.is_some_and(|s| s >= QUADRATIC_SLOPE_MIN);
    Ok(if ok { Status::Pass } else { Status::Fail })
}

/// Preset, then file, then overrides.
pub fn load_train_config(a: &ConfigArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(name) = &a.model {
        cfg.model = ModelConfig::preset(name)?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in ela_core::model::parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for o in &a.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(UsageError(format!("--set expects KEY=VALUE, got '{o}'")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<Status> {
    let cfg = load_train_config(&a.config)?;
    let records = match Precision::from_env(Precision::F32)? {
        Precision::F32 => train::<f32>(&cfg, &a.out)?.records,
        Precision::F64 => train::<f64>(&cfg, &a.out)?.records,
    };
    match records.last() {
        Some(r) => eprintln!(
            "{} steps, final train loss {:.4}, val loss {:.4}; run in {}",
            records.len(),
            r.train_loss,
            r.val_loss,
            a.out.display()
        ),
        None => eprintln!("0 steps; run in {}", a.out.display()),
    }
    Ok(Status::Pass)
}

fn run_suite<T: Real>(variants: &[Variant], threshold: f64, out: &Path) -> anyhow::Result<Vec<VariantResult>> {
    let total = variants.len();
    let mut done = 0;
    Ok(ablation_suite::<T>(variants, threshold, out, &mut |r| {
        done += 1;
        eprintln!(
            "[{done}/{total}] {}: {} steps, final loss {:.4}{}",
            r.variant.name,
            r.records.len(),
            r.final_train_loss(),
            r.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    })?)
}

fn ablate_cmd(a: &AblateArgs) -> anyhow::Result<Status> {
    let base = load_train_config(&a.config)?;
    let groups = match a.preset {
        AblatePreset::Grid => Vec::new(),
        AblatePreset::PaperFigures => figure_groups(&base),
    };
    let variants = match a.preset {
        AblatePreset::Grid => ablation_variants(&base),
        AblatePreset::PaperFigures => union(&groups),
    };
    let results = match Precision::from_env(Precision::F32)? {
        Precision::F32 => run_suite::<f32>(&variants, a.threshold, &a.out)?,
        Precision::F64 => run_suite::<f64>(&variants, a.threshold, &a.out)?,
    };
    let all: Vec<&VariantResult> = results.iter().collect();
    fs::write(
        a.out.join("loss_comparison.svg"),
        crate::figures::loss_chart("Training loss, all variants", &all).render(),
    )?;
    for g in &groups {
        let members: Vec<&VariantResult> = g
            .variants
            .iter()
            .filter_map(|v| results.iter().find(|r| r.variant.name == v.name))
            .collect();
        write_curves(&a.out, g.name, g.title, &members)?;
    }
    let aborted = results.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} variants, {aborted} aborted; summary in {}", results.len(), a.out.join("summary.csv").display());
    Ok(if aborted == 0 { Status::Pass } else { Status::Fail })
}

fn sample_with<T: Real>(a: &SampleArgs, cfg: &SampleConfig) -> anyhow::Result<Vec<u8>> {
    let model = load_checkpoint::<T>(&a.ckpt)?;
    Ok(sample(&model, a.prompt.as_bytes(), cfg)?)
}

fn sample_cmd(a: &SampleArgs) -> anyhow::Result<Status> {
    let cfg = SampleConfig {
        n_tokens: a.n,
        temperature: a.temp,
        seed: a.seed,
    };
    let bytes = match Precision::from_env(Precision::F32)? {
        Precision::F32 => sample_with::<f32>(a, &cfg)?,
        Precision::F64 => sample_with::<f64>(a, &cfg)?,
    };
    let mut out = std::io::stdout().lock();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(Status::Pass)
}
