use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{gpt_forward, StreamState, ToyGpt, VOCAB};
use crate::numerics::{Matrix, Real};

/// Sampling settings; `temperature == 0` takes the arg-max.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub n_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

fn check(prompt: &[u8], cfg: &SampleConfig) -> Result<()> {
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be finite and non-negative, got {}", cfg.temperature)));
    }
    if prompt.is_empty() && cfg.n_tokens > 0 {
        return Err(Error::Input("sampling needs a non-empty prompt".into()));
    }
    Ok(())
}

/// Picks the next byte from 256 logits. Ties in the arg-max go to the
/// lower byte.
fn choose<T: Real>(logits: &[T], temperature: f64, rng: &mut ChaCha8Rng) -> u8 {
    debug_assert_eq!(logits.len(), VOCAB);
    let l: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        return best as u8;
    }
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = l.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i as u8;
        }
        u -= wi;
    }
    (VOCAB - 1) as u8
}

/// Generates by rerunning the whole prefix for every new byte.
pub fn sample_recompute<T: Real>(model: &ToyGpt<Matrix<T>>, prompt: &[u8], cfg: &SampleConfig) -> Result<Vec<u8>> {
    check(prompt, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut text = prompt.to_vec();
    for _ in 0..cfg.n_tokens {
        let ids: Vec<usize> = text.iter().map(|&b| b as usize).collect();
        let (logits, _) = gpt_forward(&[ids], model)?;
        let last = logits.row(0, text.len() - 1);
        text.push(choose(last, cfg.temperature, &mut rng));
    }
    Ok(text)
}

/// Generates one byte per [`StreamState::step`]; memory stays constant.
pub fn sample_streaming<T: Real>(model: &ToyGpt<Matrix<T>>, prompt: &[u8], cfg: &SampleConfig) -> Result<Vec<u8>> {
    check(prompt, cfg)?;
    let mut text = prompt.to_vec();
    if cfg.n_tokens == 0 {
        return Ok(text);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = StreamState::new(&model.config)?;
    let mut logits = Vec::new();
    for &b in prompt {
        logits = state.step(model, b as usize)?;
    }
    for i in 0..cfg.n_tokens {
        let next = choose(&logits, cfg.temperature, &mut rng);
        text.push(next);
        if i + 1 < cfg.n_tokens {
            logits = state.step(model, next as usize)?;
        }
    }
    Ok(text)
}

/// Streams when the model allows it and recomputes otherwise (softmax
/// attention, the quadratic path, or a bidirectional lobe).
pub fn sample<T: Real>(model: &ToyGpt<Matrix<T>>, prompt: &[u8], cfg: &SampleConfig) -> Result<Vec<u8>> {
    if StreamState::supported(&model.config) {
        sample_streaming(model, prompt, cfg)
    } else {
        sample_recompute(model, prompt, cfg)
    }
}
