use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionPath;
use crate::error::{Error, Result};
use crate::kernels::KernelId;

/// Byte-level vocabulary.
pub const VOCAB: usize = 256;

/// Where the label vector enters the expert mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasMode {
    /// `Σ s_e (ffn_e + B_e)`: the bias is weighted by the routing score.
    Inner,
    /// `Σ s_e ffn_e + (1/k) Σ_selected B_e`: the bias bypasses the score.
    Outer,
    None,
}

impl BiasMode {
    pub const ALL: [BiasMode; 3] = [BiasMode::Inner, BiasMode::Outer, BiasMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::Inner => "inner",
            BiasMode::Outer => "outer",
            BiasMode::None => "none",
        }
    }
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BiasMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bias_mode '{s}' (expected inner, outer or none)")))
    }
}

/// Memory lobe switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LobeMode {
    Off,
    /// Bidirectional attention over the whole flow.
    On,
    /// Causally masked variant.
    Causal,
}

impl LobeMode {
    pub const ALL: [LobeMode; 3] = [LobeMode::Off, LobeMode::On, LobeMode::Causal];

    pub fn as_str(self) -> &'static str {
        match self {
            LobeMode::Off => "off",
            LobeMode::On => "on",
            LobeMode::Causal => "causal",
        }
    }
}

impl fmt::Display for LobeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LobeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "false" => Ok(LobeMode::Off),
            "on" | "true" => Ok(LobeMode::On),
            "causal" => Ok(LobeMode::Causal),
            _ => Err(Error::Config(format!("unknown memory_lobe '{s}' (expected off, on or causal)"))),
        }
    }
}

/// Sequence mixing used by the decoder blocks and the memory lobe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenMixer {
    /// Exact kernel attention.
    Kernel(KernelId),
    /// Scaled softmax attention, always evaluated quadratically.
    FullOracle,
}

impl TokenMixer {
    pub const FULL_ORACLE: &'static str = "full-oracle";
}

impl fmt::Display for TokenMixer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenMixer::Kernel(k) => write!(f, "{k}"),
            TokenMixer::FullOracle => f.write_str(Self::FULL_ORACLE),
        }
    }
}

impl FromStr for TokenMixer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == Self::FULL_ORACLE {
            return Ok(TokenMixer::FullOracle);
        }
        s.parse().map(TokenMixer::Kernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Expert hidden width.
    pub d_ff: usize,
    pub bias_mode: BiasMode,
    pub kernel: TokenMixer,
    pub attention_path: AttentionPath,
    pub hyper_link: bool,
    pub memory_lobe: LobeMode,
    pub final_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small default sized for single-core training in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            n_experts: 4,
            top_k: 2,
            d_ff: 128,
            bias_mode: BiasMode::Inner,
            kernel: TokenMixer::Kernel(KernelId::HadamardExp),
            attention_path: AttentionPath::Linear,
            hyper_link: true,
            memory_lobe: LobeMode::On,
            final_norm: false,
            seed: 0,
        }
    }

    /// Four layers of width 256 with four heads and four experts. Only
    /// meant for parameter counting.
    pub fn six_layer() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            n_experts: 4,
            d_ff: 512,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "paper-6" => Ok(ModelConfig::six_layer()),
            _ => Err(Error::Config(format!("unknown preset '{name}' (expected desk or paper-6)"))),
        }
    }

    /// Parses flat `key=value` lines on top of the desk defaults. Blank
    /// lines and `#` comments are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_layers" => self.n_layers = parse_num(key, value)?,
            "d_model" => self.d_model = parse_num(key, value)?,
            "n_heads" => self.n_heads = parse_num(key, value)?,
            "n_experts" => self.n_experts = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "d_ff" => self.d_ff = parse_num(key, value)?,
            "bias_mode" => self.bias_mode = value.parse()?,
            "kernel" => self.kernel = value.parse()?,
            "attention_path" => self.attention_path = value.parse()?,
            "hyper_link" => self.hyper_link = parse_bool(key, value)?,
            "memory_lobe" => self.memory_lobe = value.parse()?,
            "final_norm" => self.final_norm = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if let TokenMixer::Kernel(k) = self.kernel {
            k.feature_dim(self.head_dim())?;
        }
        if !self.hyper_link && self.memory_lobe != LobeMode::Off {
            return Err(Error::Config(
                "memory_lobe requires hyper_link; the flow it reads exists only without the attention residual".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total parameter count:
    ///
    /// ```text
    /// 2·V·D                               embedding + output projection
    /// + n_layers · ( D                    pre-norm gain
    ///              + D   if !hyper_link   second norm gain
    ///              + D·E                  router
    ///              + E·(3·D·F + D)        gated experts + label vectors
    ///              + 3·D² if lobe         memory maps )
    /// + D if final_norm
    /// ```
    pub fn param_count(&self) -> usize {
        let (d, e, f) = (self.d_model, self.n_experts, self.d_ff);
        let mut per_layer = d + d * e + e * (3 * d * f + d);
        if !self.hyper_link {
            per_layer += d;
        }
        if self.memory_lobe != LobeMode::Off {
            per_layer += 3 * d * d;
        }
        2 * VOCAB * d + self.n_layers * per_layer + if self.final_norm { d } else { 0 }
    }

    /// `key=value` lines in a fixed order; parses back to `self`.
    pub fn to_kv(&self) -> String {
        self.kv_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub(crate) fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_experts", self.n_experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("bias_mode", self.bias_mode.to_string()),
            ("kernel", self.kernel.to_string()),
            ("attention_path", self.attention_path.to_string()),
            ("hyper_link", self.hyper_link.to_string()),
            ("memory_lobe", self.memory_lobe.to_string()),
            ("final_norm", self.final_norm.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub(crate) fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, rejecting malformed lines and repeated keys.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: key '{k}' given twice", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

pub(crate) fn parse_num<N: FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{value}' is not a valid number")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{value}' is not a boolean"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.bias_mode = BiasMode::Outer;
        cfg.memory_lobe = LobeMode::Causal;
        cfg.kernel = TokenMixer::Kernel(KernelId::SumSqDist);
        cfg.seed = 42;
        assert_eq!(ModelConfig::from_kv_str(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn parser_rejects_bad_input() {
        assert!(ModelConfig::from_kv_str("n_layers=2\nn_layers=3").is_err());
        assert!(ModelConfig::from_kv_str("depth=2").is_err());
        assert!(ModelConfig::from_kv_str("n_layers").is_err());
        assert!(ModelConfig::from_kv_str("top_k=5").is_err());
        assert!(ModelConfig::from_kv_str("n_heads=3").is_err());
        assert!(ModelConfig::from_kv_str("hyper_link=false").is_err());
        let oracle = ModelConfig::from_kv_str("kernel=full-oracle").unwrap();
        assert_eq!(oracle.kernel, TokenMixer::FullOracle);
        assert!(ModelConfig::from_kv_str("kernel=softmax").is_err());
        let cfg = ModelConfig::from_kv_str("# comment\n\nhyper_link=false\nmemory_lobe=off # inline\n").unwrap();
        assert!(!cfg.hyper_link);
    }

    #[test]
    fn lobe_adds_three_square_maps_per_layer() {
        for preset in [ModelConfig::desk(), ModelConfig::six_layer()] {
            let mut off = preset.clone();
            off.memory_lobe = LobeMode::Off;
            let d = preset.d_model;
            assert_eq!(preset.param_count() - off.param_count(), preset.n_layers * 3 * d * d);
        }
    }

    #[test]
    fn six_layer_preset_count_is_fixed() {
        // 2·256·256 + 4·(256 + 1024 + 4·(3·256·512 + 256) + 3·256²)
        assert_eq!(ModelConfig::six_layer().param_count(), 7_218_176);
    }
}
