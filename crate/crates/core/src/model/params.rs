use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BiasMode, LobeMode, ModelConfig, VOCAB};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Gated two-layer network `((x W_in) ⊙ σ(x W_gate)) W_out` with its
/// label vector `B_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<P> {
    /// `D x F`.
    pub w_in: P,
    /// `D x F`.
    pub w_gate: P,
    /// `F x D`.
    pub w_out: P,
    /// `1 x D`.
    pub label: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer<P> {
    /// `D x E`.
    pub router: P,
    pub experts: Vec<Expert<P>>,
    pub bias_mode: BiasMode,
    pub top_k: usize,
}

/// Three `D x D` maps producing the lobe's queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLobe<P> {
    pub q_map: P,
    pub k_map: P,
    pub v_map: P,
    pub causal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<P> {
    /// RMS gain, `1 x D`.
    pub norm: P,
    /// Gain of the pre-MoE norm, present only without hyper-link.
    pub norm2: Option<P>,
    pub moe: MoeLayer<P>,
    pub lobe: Option<MemoryLobe<P>>,
    pub hyper_link: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyGpt<P> {
    pub config: ModelConfig,
    /// `256 x D`.
    pub embedding: P,
    pub layers: Vec<DecoderLayer<P>>,
    pub final_norm: Option<P>,
    /// `D x 256`.
    pub output: P,
}

impl<P> Expert<P> {
    fn try_map<Q>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<Expert<Q>> {
        Ok(Expert {
            w_in: f(&format!("{pre}.w_in"), &self.w_in)?,
            w_gate: f(&format!("{pre}.w_gate"), &self.w_gate)?,
            w_out: f(&format!("{pre}.w_out"), &self.w_out)?,
            label: f(&format!("{pre}.label"), &self.label)?,
        })
    }
}

impl<P> MoeLayer<P> {
    pub fn try_map<Q>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<MoeLayer<Q>> {
        let router = f(&format!("{pre}.router"), &self.router)?;
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| e.try_map(&format!("{pre}.experts.{i}"), f))
            .collect::<Result<_>>()?;
        Ok(MoeLayer {
            router,
            experts,
            bias_mode: self.bias_mode,
            top_k: self.top_k,
        })
    }

    pub fn named(&self, pre: &str) -> Vec<(String, &P)> {
        let mut out = vec![(format!("{pre}.router"), &self.router)];
        for (i, e) in self.experts.iter().enumerate() {
            let p = format!("{pre}.experts.{i}");
            out.push((format!("{p}.w_in"), &e.w_in));
            out.push((format!("{p}.w_gate"), &e.w_gate));
            out.push((format!("{p}.w_out"), &e.w_out));
            out.push((format!("{p}.label"), &e.label));
        }
        out
    }

    pub fn named_mut(&mut self, pre: &str) -> Vec<(String, &mut P)> {
        let mut out = vec![(format!("{pre}.router"), &mut self.router)];
        for (i, e) in self.experts.iter_mut().enumerate() {
            let p = format!("{pre}.experts.{i}");
            out.push((format!("{p}.w_in"), &mut e.w_in));
            out.push((format!("{p}.w_gate"), &mut e.w_gate));
            out.push((format!("{p}.w_out"), &mut e.w_out));
            out.push((format!("{p}.label"), &mut e.label));
        }
        out
    }
}

impl<P> MemoryLobe<P> {
    pub fn try_map<Q>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<MemoryLobe<Q>> {
        Ok(MemoryLobe {
            q_map: f(&format!("{pre}.q_map"), &self.q_map)?,
            k_map: f(&format!("{pre}.k_map"), &self.k_map)?,
            v_map: f(&format!("{pre}.v_map"), &self.v_map)?,
            causal: self.causal,
        })
    }

    pub fn named(&self, pre: &str) -> Vec<(String, &P)> {
        vec![
            (format!("{pre}.q_map"), &self.q_map),
            (format!("{pre}.k_map"), &self.k_map),
            (format!("{pre}.v_map"), &self.v_map),
        ]
    }

    pub fn named_mut(&mut self, pre: &str) -> Vec<(String, &mut P)> {
        vec![
            (format!("{pre}.q_map"), &mut self.q_map),
            (format!("{pre}.k_map"), &mut self.k_map),
            (format!("{pre}.v_map"), &mut self.v_map),
        ]
    }
}

impl<P> DecoderLayer<P> {
    pub fn try_map<Q>(&self, pre: &str, f: &mut impl FnMut(&str, &P) -> Result<Q>) -> Result<DecoderLayer<Q>> {
        Ok(DecoderLayer {
            norm: f(&format!("{pre}.norm"), &self.norm)?,
            norm2: self.norm2.as_ref().map(|p| f(&format!("{pre}.norm2"), p)).transpose()?,
            moe: self.moe.try_map(&format!("{pre}.moe"), f)?,
            lobe: self.lobe.as_ref().map(|l| l.try_map(&format!("{pre}.lobe"), f)).transpose()?,
            hyper_link: self.hyper_link,
        })
    }

    pub fn named(&self, pre: &str) -> Vec<(String, &P)> {
        let mut out = vec![(format!("{pre}.norm"), &self.norm)];
        if let Some(n) = &self.norm2 {
            out.push((format!("{pre}.norm2"), n));
        }
        out.extend(self.moe.named(&format!("{pre}.moe")));
        if let Some(l) = &self.lobe {
            out.extend(l.named(&format!("{pre}.lobe")));
        }
        out
    }

    pub fn named_mut(&mut self, pre: &str) -> Vec<(String, &mut P)> {
        let mut out = vec![(format!("{pre}.norm"), &mut self.norm)];
        if let Some(n) = &mut self.norm2 {
            out.push((format!("{pre}.norm2"), n));
        }
        out.extend(self.moe.named_mut(&format!("{pre}.moe")));
        if let Some(l) = &mut self.lobe {
            out.extend(l.named_mut(&format!("{pre}.lobe")));
        }
        out
    }
}

impl<P> ToyGpt<P> {
    /// Builds a model of the same structure from each named parameter.
    pub fn try_map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<ToyGpt<Q>> {
        let embedding = f("embedding", &self.embedding)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
            .collect::<Result<_>>()?;
        Ok(ToyGpt {
            config: self.config.clone(),
            embedding,
            layers,
            final_norm: self.final_norm.as_ref().map(|p| f("final_norm", p)).transpose()?,
            output: f("output", &self.output)?,
        })
    }

    /// Every parameter with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("layers.{i}")));
        }
        if let Some(n) = &self.final_norm {
            out.push(("final_norm".into(), n));
        }
        out.push(("output".into(), &self.output));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("layers.{i}")));
        }
        if let Some(n) = &mut self.final_norm {
            out.push(("final_norm".into(), n));
        }
        out.push(("output".into(), &mut self.output));
        out
    }
}

impl<T: Real> ToyGpt<Matrix<T>> {
    /// Random initialization from `config.seed`.
    ///
    /// Gains start at one and label vectors at zero, so every bias mode
    /// starts from the same function. Weight matrices are Gaussian with
    /// standard deviation `1/sqrt(fan_in)`; the embedding has unit scale
    /// and the output projection a small one.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let (d, e, f) = (config.d_model, config.n_experts, config.d_ff);
        let mut gauss = |rows: usize, cols: usize, std: f64| gaussian::<T, _>(rows, cols, std, &mut rng);
        let ones = || Matrix::from_fn(1, d, |_, _| 1.0);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let embedding = gauss(VOCAB, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let router = gauss(d, e, fan(d));
            let experts = (0..e)
                .map(|_| Expert {
                    w_in: gauss(d, f, fan(d)),
                    w_gate: gauss(d, f, fan(d)),
                    w_out: gauss(f, d, fan(f)),
                    label: Matrix::zeros(1, d),
                })
                .collect();
            let lobe = match config.memory_lobe {
                LobeMode::Off => None,
                mode => Some(MemoryLobe {
                    q_map: gauss(d, d, fan(d)),
                    k_map: gauss(d, d, fan(d)),
                    v_map: gauss(d, d, fan(d)),
                    causal: mode == LobeMode::Causal,
                }),
            };
            layers.push(DecoderLayer {
                norm: ones(),
                norm2: (!config.hyper_link).then(ones),
                moe: MoeLayer {
                    router,
                    experts,
                    bias_mode: config.bias_mode,
                    top_k: config.top_k,
                },
                lobe,
                hyper_link: config.hyper_link,
            });
        }
        let output = gauss(d, VOCAB, 0.02);
        Ok(ToyGpt {
            config: config.clone(),
            embedding,
            layers,
            final_norm: config.final_norm.then(ones),
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ToyGpt<Matrix<U>> {
        self.try_map(|_, m| Ok(m.cast())).expect("cast cannot fail")
    }

    /// Checks every parameter shape against `config`.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = ToyGpt::<Matrix<T>>::shapes_for(&self.config)?;
        let got: Vec<(String, (usize, usize))> = self.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
        if got != reference {
            return Err(Error::Format(format!(
                "parameter layout does not match the configuration ({} tensors, expected {})",
                got.len(),
                reference.len()
            )));
        }
        Ok(())
    }

    /// Names and shapes implied by `config`, in [`ToyGpt::named`] order.
    pub fn shapes_for(config: &ModelConfig) -> Result<Vec<(String, (usize, usize))>> {
        let zero = ToyGpt::<()>::skeleton(config)?;
        let (d, e, f) = (config.d_model, config.n_experts, config.d_ff);
        Ok(zero
            .named()
            .into_iter()
            .map(|(name, _)| {
                let leaf = name.rsplit('.').next().unwrap_or("");
                let shape = match leaf {
                    "embedding" => (VOCAB, d),
                    "output" => (d, VOCAB),
                    "norm" | "norm2" | "final_norm" | "label" => (1, d),
                    "router" => (d, e),
                    "w_in" | "w_gate" => (d, f),
                    "w_out" => (f, d),
                    _ => (d, d),
                };
                (name, shape)
            })
            .collect())
    }
}

impl ToyGpt<()> {
    /// Structure without values.
    pub(crate) fn skeleton(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayer {
                norm: (),
                norm2: (!config.hyper_link).then_some(()),
                moe: MoeLayer {
                    router: (),
                    experts: (0..config.n_experts)
                        .map(|_| Expert {
                            w_in: (),
                            w_gate: (),
                            w_out: (),
                            label: (),
                        })
                        .collect(),
                    bias_mode: config.bias_mode,
                    top_k: config.top_k,
                },
                lobe: (config.memory_lobe != LobeMode::Off).then_some(MemoryLobe {
                    q_map: (),
                    k_map: (),
                    v_map: (),
                    causal: config.memory_lobe == LobeMode::Causal,
                }),
                hyper_link: config.hyper_link,
            })
            .collect();
        Ok(ToyGpt {
            config: config.clone(),
            embedding: (),
            layers,
            final_norm: config.final_norm.then_some(()),
            output: (),
        })
    }
}

/// Fills a matrix with `N(0, std)` draws; exposed for tests that build
/// layers by hand.
pub fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}
