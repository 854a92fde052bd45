use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::corpus::{desk_corpus, load_corpus, Corpus};
use crate::error::{Error, Result};
use crate::model::{gpt_on_tape, leaves, save_checkpoint, MixerConfig, ToyGpt, WholeSequence, AUX_WEIGHT};
use crate::numerics::{Matrix, Real, Tape};

/// One row of `loss.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean cross-entropy of the step's batch, nats per token.
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub tokens_seen: usize,
    pub wall_ms: u64,
}

/// Column order of `loss.csv`.
pub const LOSS_CSV_HEADER: [&str; 6] = ["step", "train_loss", "val_loss", "grad_norm", "tokens_seen", "wall_ms"];

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(model: &ToyGpt<Matrix<T>>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.named().iter().map(|(_, m)| vec![0.0; m.len()]).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step<T: Real>(&mut self, model: &mut ToyGpt<Matrix<T>>, grads: &ToyGpt<Matrix<f64>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let params = model.named_mut();
        for (i, ((_, p), (_, g))) in params.into_iter().zip(grads.named()).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = T::from_f64(w.to_f64() - update);
            }
        }
    }
}

/// Loss terms and parameter gradients of one batch.
pub struct BatchGrad {
    pub cross_entropy: f64,
    pub aux: f64,
    /// `cross_entropy + AUX_WEIGHT * aux`.
    pub loss: f64,
    pub grads: ToyGpt<Matrix<f64>>,
}

impl BatchGrad {
    pub fn norm(&self) -> f64 {
        self.grads
            .named()
            .iter()
            .flat_map(|(_, g)| g.as_slice().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Differentiates `CE + 0.01·aux` for `batch` sequences stacked in
/// `inputs`, each followed by its shifted `targets`.
pub fn loss_and_grads<T: Real>(
    model: &ToyGpt<Matrix<T>>,
    inputs: &[usize],
    targets: &[usize],
    batch: usize,
) -> Result<BatchGrad> {
    let mut tape = Tape::new();
    let params = leaves(&mut tape, model);
    let mut attend = WholeSequence {
        mix: MixerConfig::of(&model.config),
        batch,
    };
    let (logits, aux) = gpt_on_tape(&mut tape, &params, inputs, &mut attend)?;
    let ce = tape.cross_entropy(logits, targets)?;
    let weighted = tape.scale(aux, AUX_WEIGHT)?;
    let loss = tape.add(ce, weighted)?;
    let gradients = tape.backward(loss)?;
    let grads = params.try_map(|_, v| gradients.get(*v))?;
    let scalar = |v| tape.value(v).get(0, 0).to_f64();
    Ok(BatchGrad {
        cross_entropy: scalar(ce),
        aux: scalar(aux),
        loss: scalar(loss),
        grads,
    })
}

/// Mean cross-entropy without gradients.
pub fn evaluate<T: Real>(model: &ToyGpt<Matrix<T>>, inputs: &[usize], targets: &[usize], batch: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let params = leaves(&mut tape, model);
    let mut attend = WholeSequence {
        mix: MixerConfig::of(&model.config),
        batch,
    };
    let (logits, _) = gpt_on_tape(&mut tape, &params, inputs, &mut attend)?;
    let ce = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(ce).get(0, 0).to_f64())
}

/// Inputs and next-byte targets for windows of `len` starting at `starts`.
fn windows(tokens: &[u8], starts: &[usize], len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(starts.len() * len);
    let mut targets = Vec::with_capacity(starts.len() * len);
    for &s in starts {
        inputs.extend(tokens[s..s + len].iter().map(|&b| b as usize));
        targets.extend(tokens[s + 1..s + len + 1].iter().map(|&b| b as usize));
    }
    (inputs, targets)
}

/// Reads the configured corpus, or the built-in one.
pub fn corpus_for(cfg: &TrainConfig) -> Result<Corpus> {
    let bytes = match &cfg.corpus_path {
        Some(p) => load_corpus(p)?,
        None => desk_corpus(),
    };
    Corpus::from_bytes(bytes, cfg.context_len)
}

/// Salt separating the batch stream from the parameter initialization.
const BATCH_STREAM: u64 = 0xba7c_4e5d;

/// Runs the optimization and reports each record through `on_record`.
///
/// A non-finite loss or gradient norm is reported as a final record and
/// then returned as [`Error::NonFiniteLoss`].
pub fn train_loop<T: Real>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    model: &mut ToyGpt<Matrix<T>>,
    on_record: &mut dyn FnMut(&LossRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let len = cfg.context_len.min(corpus.train.len() - 1);
    let vlen = cfg.context_len.min(corpus.val.len() - 1);
    let vspan = corpus.val.len() - vlen - 1;
    let vstarts: Vec<usize> = (0..cfg.val_windows)
        .map(|i| if cfg.val_windows == 1 { 0 } else { i * vspan / (cfg.val_windows - 1) })
        .collect();
    let (vin, vtgt) = windows(&corpus.val, &vstarts, vlen);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed ^ BATCH_STREAM);
    let mut adam = Adam::new(model, cfg);
    let clock = Instant::now();
    for step in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..corpus.train.len() - len))
            .collect();
        let (inputs, targets) = windows(&corpus.train, &starts, len);
        let bg = loss_and_grads(model, &inputs, &targets, cfg.batch_size)?;
        let grad_norm = bg.norm();
        let val_loss = if bg.loss.is_finite() && grad_norm.is_finite() {
            evaluate(model, &vin, &vtgt, cfg.val_windows)?
        } else {
            f64::NAN
        };
        let record = LossRecord {
            step,
            train_loss: bg.cross_entropy,
            val_loss,
            grad_norm,
            tokens_seen: (step + 1) * cfg.batch_size * len,
            wall_ms: if cfg.record_wall_clock { clock.elapsed().as_millis() as u64 } else { 0 },
        };
        on_record(&record)?;
        if !(bg.loss.is_finite() && grad_norm.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss {} (aux {}), gradient norm {grad_norm}", bg.loss, bg.aux),
            });
        }
        if cfg.stop_loss.is_some_and(|s| bg.cross_entropy <= s) {
            break;
        }
        adam.step(model, &bg.grads);
    }
    Ok(())
}

/// What a finished run leaves behind besides its files.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub model: ToyGpt<Matrix<T>>,
    pub records: Vec<LossRecord>,
}

/// Trains into `run_dir`, writing `config.echo`, `loss.csv` (row by row)
/// and `model.ckpt`.
pub fn train<T: Real>(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let corpus = corpus_for(cfg)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let echo = run_dir.join("config.echo");
    fs::write(&echo, cfg.to_kv()).map_err(|e| Error::io(&echo, e))?;
    let csv_path = run_dir.join("loss.csv");
    let csv_err = |e: csv::Error| Error::Format(format!("writing {}: {e}", csv_path.display()));
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(csv_err)?;
    writer.write_record(LOSS_CSV_HEADER).map_err(csv_err)?;
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut model = ToyGpt::<Matrix<T>>::init(&cfg.model)?;
    let mut records = Vec::new();
    let result = train_loop(cfg, &corpus, &mut model, &mut |r| {
        writer.serialize(r).map_err(csv_err)?;
        writer.flush().map_err(|e| Error::io(&csv_path, e))?;
        records.push(r.clone());
        Ok(())
    });
    result?;
    save_checkpoint(&model, &run_dir.join("model.ckpt"))?;
    Ok(TrainOutcome { model, records })
}

/// Parses a `loss.csv` written by [`train`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
