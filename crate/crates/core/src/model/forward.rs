use super::config::{BiasMode, ModelConfig, TokenMixer, VOCAB};
use super::params::{DecoderLayer, MemoryLobe, MoeLayer, ToyGpt};
use crate::attention::{attention_on_tape, softmax_attention_on_tape, AttentionConfig, AttentionPath};
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Matrix, Real, Tape, Tensor3, Var};

/// `eps` inside the RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Weight of the load-balance term in the training loss.
pub const AUX_WEIGHT: f64 = 0.01;

/// How decoder blocks and lobes mix positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixerConfig {
    pub mixer: TokenMixer,
    pub heads: usize,
    pub path: AttentionPath,
}

impl MixerConfig {
    pub fn of(cfg: &ModelConfig) -> Self {
        MixerConfig {
            mixer: cfg.kernel,
            heads: cfg.n_heads,
            path: cfg.attention_path,
        }
    }

    /// Attention settings for the exact kernels; `None` for softmax.
    pub fn attention(&self, causal: bool) -> Option<AttentionConfig> {
        match self.mixer {
            TokenMixer::Kernel(k) => Some(AttentionConfig::new(k, self.heads, causal)),
            TokenMixer::FullOracle => None,
        }
    }
}

/// Which attention call inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Site {
    Block(usize),
    Lobe(usize),
}

/// Supplies self-attention for the layers. Whole-sequence evaluation and
/// token-by-token decoding differ only here.
pub(crate) trait Attend<T: Real> {
    fn attend(&mut self, tape: &mut Tape<T>, site: Site, q: Var, k: Var, v: Var, causal: bool) -> Result<Var>;
}

/// All positions at once, `batch` sequences stacked row-wise.
pub(crate) struct WholeSequence {
    pub mix: MixerConfig,
    pub batch: usize,
}

impl<T: Real> Attend<T> for WholeSequence {
    fn attend(&mut self, tape: &mut Tape<T>, _site: Site, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        match self.mix.attention(causal) {
            Some(cfg) => attention_on_tape(tape, q, k, v, self.batch, &cfg, self.mix.path),
            None => softmax_attention_on_tape(tape, q, k, v, self.batch, self.mix.heads, causal),
        }
    }
}

/// Expert choice per row: the `k` largest logits, ties to the lower index.
pub(crate) fn select_top_k<T: Real>(logits: &Matrix<T>, k: usize) -> Vec<Vec<usize>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].to_f64().total_cmp(&row[a].to_f64()).then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect()
}

/// Softmax over each row's selected logits; zero elsewhere.
struct RouteOp {
    picks: Vec<Vec<usize>>,
}

impl RouteOp {
    fn forward<T: Real>(&self, logits: &Matrix<T>) -> Matrix<T> {
        let n = logits.cols();
        let mut out = vec![0.0; logits.len()];
        for (r, picks) in self.picks.iter().enumerate() {
            let row = logits.row(r);
            let max = picks.iter().map(|&e| row[e].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = picks.iter().map(|&e| (row[e].to_f64() - max).exp()).sum();
            for &e in picks {
                out[r * n + e] = (row[e].to_f64() - max).exp() / z;
            }
        }
        Matrix::from_fn(logits.rows(), n, |r, c| out[r * n + c])
    }
}

impl<T: Real> CustomOp<T> for RouteOp {
    fn name(&self) -> &'static str {
        "top-k-route"
    }

    fn backward(&self, inputs: &[&Matrix<T>], output: &Matrix<T>, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let n = inputs[0].cols();
        let mut grad = vec![0.0; inputs[0].len()];
        for (r, picks) in self.picks.iter().enumerate() {
            let s = output.row(r);
            let dot: f64 = picks.iter().map(|&e| s[e].to_f64() * g[r * n + e]).sum();
            for &e in picks {
                grad[r * n + e] = s[e].to_f64() * (g[r * n + e] - dot);
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Tape results of one MoE call.
pub(crate) struct MoeVars {
    pub y: Var,
    pub aux: Var,
    pub scores: Var,
}

pub(crate) fn moe_on_tape<T: Real>(tape: &mut Tape<T>, moe: &MoeLayer<Var>, x: Var) -> Result<MoeVars> {
    let (n, d) = tape.value(x).shape();
    let e_count = moe.experts.len();
    if moe.top_k == 0 || moe.top_k > e_count {
        return Err(Error::Config(format!("top_k {} outside 1..={e_count}", moe.top_k)));
    }
    let logits = tape.matmul(x, moe.router)?;
    let picks = select_top_k(tape.value(logits), moe.top_k);
    let route = RouteOp { picks };
    let scores_value = route.forward(tape.value(logits));
    let mut counts = vec![0usize; e_count];
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); e_count];
    for (r, p) in route.picks.iter().enumerate() {
        for &e in p {
            counts[e] += 1;
            rows_of[e].push(r);
        }
    }
    let scores = tape.custom(&[logits], scores_value, Box::new(route))?;

    let probs = tape.softmax_rows(logits)?;
    let mean_probs = tape.col_mean(probs)?;
    let frac: Vec<f64> = counts
        .iter()
        .map(|&c| e_count as f64 * c as f64 / (n * moe.top_k) as f64)
        .collect();
    let aux = tape.dot_const(mean_probs, &frac)?;

    let mut y: Option<Var> = None;
    for (e, expert) in moe.experts.iter().enumerate() {
        let rows = &rows_of[e];
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, rows)?;
        let a = tape.matmul(xe, expert.w_in)?;
        let gate_pre = tape.matmul(xe, expert.w_gate)?;
        let gate = tape.sigmoid(gate_pre)?;
        let hidden = tape.mul(a, gate)?;
        let out = tape.matmul(hidden, expert.w_out)?;
        let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        let w = tape.gather_elems(scores, &coords)?;
        let contrib = match moe.bias_mode {
            BiasMode::Inner => {
                let biased = tape.add_row(out, expert.label)?;
                tape.mul_col(biased, w)?
            }
            BiasMode::Outer => {
                let weighted = tape.mul_col(out, w)?;
                let share = tape.scale(expert.label, 1.0 / moe.top_k as f64)?;
                tape.add_row(weighted, share)?
            }
            BiasMode::None => tape.mul_col(out, w)?,
        };
        let placed = tape.scatter_rows(contrib, rows, n)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, placed)?,
            None => placed,
        });
    }
    let y = match y {
        Some(y) => y,
        None => tape.leaf(Matrix::zeros(n, d)),
    };
    Ok(MoeVars { y, aux, scores })
}

pub(crate) fn lobe_on_tape<T: Real>(
    tape: &mut Tape<T>,
    lobe: &MemoryLobe<Var>,
    flow: Var,
    site: usize,
    attend: &mut dyn Attend<T>,
) -> Result<Var> {
    let q = tape.matmul(flow, lobe.q_map)?;
    let k = tape.matmul(flow, lobe.k_map)?;
    let v = tape.matmul(flow, lobe.v_map)?;
    attend.attend(tape, Site::Lobe(site), q, k, v, lobe.causal)
}

/// Intermediate values of one decoder layer.
pub(crate) struct LayerVars {
    pub x_norm: Var,
    pub attn: Var,
    pub ffn_out: Var,
    pub lob_out: Option<Var>,
    pub y: Var,
    pub aux: Var,
}

pub(crate) fn layer_on_tape<T: Real>(
    tape: &mut Tape<T>,
    layer: &DecoderLayer<Var>,
    index: usize,
    x: Var,
    attend: &mut dyn Attend<T>,
) -> Result<LayerVars> {
    let x_norm = tape.rms_norm(x, layer.norm, RMS_EPS)?;
    let attn = attend.attend(tape, Site::Block(index), x_norm, x_norm, x_norm, true)?;
    if layer.hyper_link {
        let moe = moe_on_tape(tape, &layer.moe, attn)?;
        let lob_out = match &layer.lobe {
            Some(lobe) => Some(lobe_on_tape(tape, lobe, moe.y, index, attend)?),
            None => None,
        };
        let mut y = tape.add(x, moe.y)?;
        if let Some(l) = lob_out {
            y = tape.add(y, l)?;
        }
        Ok(LayerVars {
            x_norm,
            attn,
            ffn_out: moe.y,
            lob_out,
            y,
            aux: moe.aux,
        })
    } else {
        let norm2 = layer
            .norm2
            .ok_or_else(|| Error::Config("layer without hyper-link needs a second norm".into()))?;
        let h = tape.add(x, attn)?;
        let h_norm = tape.rms_norm(h, norm2, RMS_EPS)?;
        let moe = moe_on_tape(tape, &layer.moe, h_norm)?;
        let y = tape.add(h, moe.y)?;
        Ok(LayerVars {
            x_norm,
            attn,
            ffn_out: moe.y,
            lob_out: None,
            y,
            aux: moe.aux,
        })
    }
}

/// Logits `[rows x 256]` and the summed auxiliary loss.
pub(crate) fn gpt_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &ToyGpt<Var>,
    ids: &[usize],
    attend: &mut dyn Attend<T>,
) -> Result<(Var, Var)> {
    let mut x = tape.embedding(model.embedding, ids)?;
    let mut aux: Option<Var> = None;
    for (i, layer) in model.layers.iter().enumerate() {
        let out = layer_on_tape(tape, layer, i, x, attend)?;
        x = out.y;
        aux = Some(match aux {
            Some(a) => tape.add(a, out.aux)?,
            None => out.aux,
        });
    }
    if let Some(g) = model.final_norm {
        x = tape.rms_norm(x, g, RMS_EPS)?;
    }
    let logits = tape.matmul(x, model.output)?;
    let aux = match aux {
        Some(a) => a,
        None => tape.leaf(Matrix::zeros(1, 1)),
    };
    Ok((logits, aux))
}

/// Records every parameter of `model` as a leaf.
pub(crate) fn leaves<T: Real>(tape: &mut Tape<T>, model: &ToyGpt<Matrix<T>>) -> ToyGpt<Var> {
    model
        .try_map(|_, m| Ok(tape.leaf(m.clone())))
        .expect("leaf creation cannot fail")
}

fn flatten<T: Real>(x: &Tensor3<T>) -> Matrix<T> {
    x.clone().into_matrix()
}

fn unflatten<T: Real>(tape: &Tape<T>, v: Var, batch: usize, len: usize) -> Result<Tensor3<T>> {
    Tensor3::from_matrix(batch, len, tape.value(v).clone())
}

fn check_width<T: Real>(x: &Tensor3<T>, d: usize, what: &str) -> Result<()> {
    if x.dim() != d {
        return Err(Error::Shape(format!("{what}: input width {} but parameters expect {d}", x.dim())));
    }
    Ok(())
}

/// `x / sqrt(mean(x²) + 1e-6) ⊙ gain` at every position.
pub fn rms_norm<T: Real>(x: &Tensor3<T>, gain: &[T]) -> Result<Tensor3<T>> {
    check_width(x, gain.len(), "rms_norm")?;
    let mut tape = Tape::new();
    let xv = tape.leaf(flatten(x));
    let g = tape.leaf(Matrix::new(1, gain.len(), gain.to_vec())?);
    let y = tape.rms_norm(xv, g, RMS_EPS)?;
    unflatten(&tape, y, x.batch(), x.len())
}

/// Routed expert mixture and its load-balance loss
/// `E · Σ_e f_e p_e`, where `f_e` is the fraction of routing slots given
/// to expert `e` and `p_e` its mean router probability.
pub fn moe_forward<T: Real>(x: &Tensor3<T>, layer: &MoeLayer<Matrix<T>>) -> Result<(Tensor3<T>, f64)> {
    check_width(x, layer.router.rows(), "moe_forward")?;
    let mut tape = Tape::new();
    let params = layer.try_map("moe", &mut |_, m| Ok(tape.leaf(m.clone())))?;
    let xv = tape.leaf(flatten(x));
    let out = moe_on_tape(&mut tape, &params, xv)?;
    let aux = tape.value(out.aux).get(0, 0).to_f64();
    Ok((unflatten(&tape, out.y, x.batch(), x.len())?, aux))
}

/// Renormalized routing scores `[B·L x E]`, zero for unselected experts.
pub fn routing_scores<T: Real>(x: &Tensor3<T>, layer: &MoeLayer<Matrix<T>>) -> Result<Matrix<T>> {
    check_width(x, layer.router.rows(), "routing_scores")?;
    let mut tape = Tape::new();
    let params = layer.try_map("moe", &mut |_, m| Ok(tape.leaf(m.clone())))?;
    let xv = tape.leaf(flatten(x));
    let out = moe_on_tape(&mut tape, &params, xv)?;
    Ok(tape.value(out.scores).clone())
}

/// Maps `flow` through the lobe's three maps and attends over it.
pub fn memory_lobe<T: Real>(flow: &Tensor3<T>, lobe: &MemoryLobe<Matrix<T>>, mix: &MixerConfig) -> Result<Tensor3<T>> {
    check_width(flow, lobe.q_map.rows(), "memory_lobe")?;
    let mut tape = Tape::new();
    let params = lobe.try_map("lobe", &mut |_, m| Ok(tape.leaf(m.clone())))?;
    let fv = tape.leaf(flatten(flow));
    let mut attend = WholeSequence {
        mix: *mix,
        batch: flow.batch(),
    };
    let y = lobe_on_tape(&mut tape, &params, fv, 0, &mut attend)?;
    unflatten(&tape, y, flow.batch(), flow.len())
}

/// Every intermediate of [`decoder_layer_forward`].
#[derive(Clone, Debug)]
pub struct LayerTrace<T: Real> {
    pub x_norm: Tensor3<T>,
    pub attn: Tensor3<T>,
    pub ffn_out: Tensor3<T>,
    pub lob_out: Option<Tensor3<T>>,
    pub y: Tensor3<T>,
    pub aux: f64,
}

pub fn decoder_layer_trace<T: Real>(
    x: &Tensor3<T>,
    layer: &DecoderLayer<Matrix<T>>,
    mix: &MixerConfig,
) -> Result<LayerTrace<T>> {
    check_width(x, layer.norm.cols(), "decoder_layer_forward")?;
    let mut tape = Tape::new();
    let params = layer.try_map("layer", &mut |_, m| Ok(tape.leaf(m.clone())))?;
    let xv = tape.leaf(flatten(x));
    let mut attend = WholeSequence { mix: *mix, batch: x.batch() };
    let out = layer_on_tape(&mut tape, &params, 0, xv, &mut attend)?;
    let (b, l) = (x.batch(), x.len());
    Ok(LayerTrace {
        x_norm: unflatten(&tape, out.x_norm, b, l)?,
        attn: unflatten(&tape, out.attn, b, l)?,
        ffn_out: unflatten(&tape, out.ffn_out, b, l)?,
        lob_out: out.lob_out.map(|v| unflatten(&tape, v, b, l)).transpose()?,
        y: unflatten(&tape, out.y, b, l)?,
        aux: tape.value(out.aux).get(0, 0).to_f64(),
    })
}

pub fn decoder_layer_forward<T: Real>(
    x: &Tensor3<T>,
    layer: &DecoderLayer<Matrix<T>>,
    mix: &MixerConfig,
) -> Result<(Tensor3<T>, f64)> {
    let t = decoder_layer_trace(x, layer, mix)?;
    Ok((t.y, t.aux))
}

/// Checks a `[B, L]` batch of token ids and flattens it row-major.
pub fn flatten_tokens(tokens: &[Vec<usize>]) -> Result<(usize, usize, Vec<usize>)> {
    let batch = tokens.len();
    let len = tokens.first().map_or(0, Vec::len);
    if batch == 0 || len == 0 {
        return Err(Error::Input("token batch is empty".into()));
    }
    if tokens.iter().any(|t| t.len() != len) {
        return Err(Error::Input("token rows differ in length".into()));
    }
    let ids: Vec<usize> = tokens.concat();
    if let Some(&bad) = ids.iter().find(|&&t| t >= VOCAB) {
        return Err(Error::Input(format!("token id {bad} is outside the {VOCAB}-entry vocabulary")));
    }
    Ok((batch, len, ids))
}

/// Logits `[B, L, 256]` and the summed auxiliary loss of all layers.
pub fn gpt_forward<T: Real>(tokens: &[Vec<usize>], model: &ToyGpt<Matrix<T>>) -> Result<(Tensor3<T>, f64)> {
    let (batch, len, ids) = flatten_tokens(tokens)?;
    let mut tape = Tape::new();
    let params = leaves(&mut tape, model);
    let mut attend = WholeSequence {
        mix: MixerConfig::of(&model.config),
        batch,
    };
    let (logits, aux) = gpt_on_tape(&mut tape, &params, &ids, &mut attend)?;
    Ok((unflatten(&tape, logits, batch, len)?, tape.value(aux).get(0, 0).to_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_low() {
        let m = Matrix::<f64>::new(2, 4, vec![1.0, 3.0, 3.0, 0.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(select_top_k(&m, 2), vec![vec![1, 2], vec![0, 1]]);
    }

    #[test]
    fn route_scores_are_renormalized() {
        let m = Matrix::<f64>::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let op = RouteOp {
            picks: select_top_k(&m, 2),
        };
        let s = op.forward(&m);
        let want = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((s.get(0, 2) - want).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
