use super::config::{LobeMode, ModelConfig, TokenMixer};
use super::forward::{gpt_on_tape, leaves, Attend, MixerConfig, Site};
use super::params::ToyGpt;
use crate::attention::{AttentionPath, DecodeState};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, Tape, Var};

/// Per-layer decoding state for token-by-token generation.
///
/// Holds one [`DecodeState`] per decoder block and one per causal lobe,
/// so memory does not grow with the number of tokens fed. Logits equal
/// those of a whole-sequence forward bit for bit.
#[derive(Clone, Debug)]
pub struct StreamState {
    blocks: Vec<DecodeState>,
    lobes: Vec<Option<DecodeState>>,
    position: usize,
}

impl StreamState {
    /// Whether a model can be decoded incrementally: exact kernels on the
    /// linear path, and no bidirectional lobe (which would revise every
    /// earlier position as tokens arrive).
    pub fn supported(config: &ModelConfig) -> bool {
        matches!(config.kernel, TokenMixer::Kernel(_))
            && config.attention_path == AttentionPath::Linear
            && config.memory_lobe != LobeMode::On
    }

    pub fn new(config: &ModelConfig) -> Result<Self> {
        if !StreamState::supported(config) {
            return Err(Error::Config(format!(
                "incremental decoding needs an exact kernel on the linear path and no bidirectional lobe \
                 (kernel={}, attention_path={}, memory_lobe={})",
                config.kernel, config.attention_path, config.memory_lobe
            )));
        }
        let mix = MixerConfig::of(config);
        let d = config.d_model;
        let state = |causal| -> Result<DecodeState> {
            let cfg = mix.attention(causal).expect("kernel mixer");
            DecodeState::new(&cfg, d, d)
        };
        let blocks = (0..config.n_layers).map(|_| state(true)).collect::<Result<_>>()?;
        let lobes = (0..config.n_layers)
            .map(|_| match config.memory_lobe {
                LobeMode::Causal => state(true).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(StreamState {
            blocks,
            lobes,
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Bytes of attention state held across steps.
    pub fn state_bytes(&self) -> usize {
        self.blocks.iter().chain(self.lobes.iter().flatten()).map(DecodeState::state_bytes).sum()
    }

    /// Feeds one token and returns the 256 next-token logits.
    pub fn step<T: Real>(&mut self, model: &ToyGpt<Matrix<T>>, token: usize) -> Result<Vec<T>> {
        if self.blocks.len() != model.layers.len() {
            return Err(Error::Config("stream state was built for a different model".into()));
        }
        let mut tape = Tape::new();
        let params = leaves(&mut tape, model);
        let mut attend = Streaming {
            blocks: &mut self.blocks,
            lobes: &mut self.lobes,
        };
        let (logits, _) = gpt_on_tape(&mut tape, &params, &[token], &mut attend)?;
        self.position += 1;
        Ok(tape.value(logits).as_slice().to_vec())
    }
}

struct Streaming<'a> {
    blocks: &'a mut [DecodeState],
    lobes: &'a mut [Option<DecodeState>],
}

impl<T: Real> Attend<T> for Streaming<'_> {
    fn attend(&mut self, tape: &mut Tape<T>, site: Site, q: Var, k: Var, v: Var, _causal: bool) -> Result<Var> {
        let state = match site {
            Site::Block(i) => &mut self.blocks[i],
            Site::Lobe(i) => self.lobes[i]
                .as_mut()
                .ok_or_else(|| Error::Config("no incremental state for a bidirectional lobe".into()))?,
        };
        let y = state.step(tape.value(q).as_slice(), tape.value(k).as_slice(), tape.value(v).as_slice())?;
        let width = y.len();
        Ok(tape.leaf(Matrix::new(1, width, y)?))
    }
}
