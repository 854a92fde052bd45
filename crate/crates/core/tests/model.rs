use ela_core::attention::{linear_bidirectional, linear_causal, quadratic_oracle, AttentionConfig, AttentionPath};
use ela_core::kernels::KernelId;
use ela_core::model::{
    decoder_layer_forward, decoder_layer_trace, gaussian, gpt_forward, load_checkpoint, memory_lobe, moe_forward,
    rms_norm, routing_scores, save_checkpoint, BiasMode, DecoderLayer, Expert, LobeMode, MemoryLobe, MixerConfig,
    ModelConfig, MoeLayer, StreamState, TokenMixer, ToyGpt,
};
use ela_core::numerics::{Matrix, Tensor3};
use ela_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mix(kernel: KernelId, heads: usize) -> MixerConfig {
    MixerConfig {
        mixer: TokenMixer::Kernel(kernel),
        heads,
        path: AttentionPath::Linear,
    }
}

fn moe(d: usize, e: usize, f: usize, top_k: usize, bias_mode: BiasMode, r: &mut ChaCha8Rng) -> MoeLayer<Matrix<f64>> {
    MoeLayer {
        router: gaussian(d, e, 1.0, r),
        experts: (0..e)
            .map(|_| Expert {
                w_in: gaussian(d, f, 0.5, r),
                w_gate: gaussian(d, f, 0.5, r),
                w_out: gaussian(f, d, 0.5, r),
                label: gaussian(1, d, 1.0, r),
            })
            .collect(),
        bias_mode,
        top_k,
    }
}

fn lobe(d: usize, causal: bool, r: &mut ChaCha8Rng) -> MemoryLobe<Matrix<f64>> {
    MemoryLobe {
        q_map: gaussian(d, d, 0.4, r),
        k_map: gaussian(d, d, 0.4, r),
        v_map: gaussian(d, d, 0.4, r),
        causal,
    }
}

// Plain-loop references.

fn row_matmul(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    (0..w.cols()).map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum()).collect()
}

fn expert_ref(x: &[f64], e: &Expert<Matrix<f64>>) -> Vec<f64> {
    let a = row_matmul(x, &e.w_in);
    let g = row_matmul(x, &e.w_gate);
    let h: Vec<f64> = a.iter().zip(&g).map(|(a, g)| a / (1.0 + (-g).exp())).collect();
    row_matmul(&h, &e.w_out)
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn tensor_of(x: &Tensor3<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor3<f64> {
    let rows: Vec<f64> = (0..x.batch())
        .flat_map(|b| (0..x.len()).map(move |l| (b, l)))
        .flat_map(|(b, l)| f(x.row(b, l)))
        .collect();
    let d = rows.len() / (x.batch() * x.len());
    Tensor3::new(x.batch(), x.len(), d, rows).unwrap()
}

fn map_tensor(x: &Tensor3<f64>, w: &Matrix<f64>) -> Tensor3<f64> {
    tensor_of(x, |r| row_matmul(r, w))
}

fn add(a: &Tensor3<f64>, b: &Tensor3<f64>) -> Tensor3<f64> {
    let v = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
    Tensor3::new(a.batch(), a.len(), a.dim(), v).unwrap()
}

#[test]
fn rms_norm_examples() {
    let ones = Tensor3::<f64>::from_fn(2, 3, 8, |_, _, _| 1.0);
    let g = vec![1.0; 8];
    assert!(rms_norm(&ones, &g).unwrap().max_abs_diff(&ones) <= 1e-5);

    let x = Tensor3::<f64>::randn(2, 5, 8, &mut rng(1));
    let x10 = x.map(|v| 10.0 * v);
    let y = rms_norm(&x, &g).unwrap();
    assert!(rms_norm(&x10, &g).unwrap().max_abs_diff(&y) <= 1e-5);

    let gain: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 / 8.0).collect();
    let got = rms_norm(&x, &gain).unwrap();
    let want = tensor_of(&x, |r| {
        let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        r.iter().zip(&gain).map(|(v, g)| v / (ms + 1e-6).sqrt() * g).collect()
    });
    assert!(got.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn single_expert_variants_coincide() {
    let mut r = rng(2);
    let x = Tensor3::<f64>::randn(2, 4, 6, &mut r);
    let inner = moe(6, 1, 5, 1, BiasMode::Inner, &mut r);
    let outer = MoeLayer {
        bias_mode: BiasMode::Outer,
        ..inner.clone()
    };
    let (yi, aux) = moe_forward(&x, &inner).unwrap();
    let (yo, _) = moe_forward(&x, &outer).unwrap();
    let e = &inner.experts[0];
    let want = tensor_of(&x, |row| {
        expert_ref(row, e).iter().zip(e.label.as_slice()).map(|(a, b)| a + b).collect()
    });
    assert!(yi.max_abs_diff(&want) <= 1e-12);
    assert!(yo.max_abs_diff(&want) <= 1e-12);
    assert!((aux - 1.0).abs() < 1e-12, "one expert is perfectly balanced");
}

#[test]
fn zero_experts_without_bias_give_zero() {
    let mut r = rng(3);
    let mut layer = moe(6, 4, 8, 2, BiasMode::None, &mut r);
    for e in &mut layer.experts {
        e.w_in = Matrix::zeros(6, 8);
        e.w_gate = Matrix::zeros(6, 8);
        e.w_out = Matrix::zeros(8, 6);
    }
    let x = Tensor3::<f64>::randn(1, 7, 6, &mut r);
    let (y, _) = moe_forward(&x, &layer).unwrap();
    assert!(y.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn dense_routing_matches_weighted_sum() {
    let mut r = rng(4);
    let x = Tensor3::<f64>::randn(2, 9, 8, &mut r);
    for mode in BiasMode::ALL {
        let layer = moe(8, 4, 12, 4, mode, &mut r);
        let (y, _) = moe_forward(&x, &layer).unwrap();
        let want = tensor_of(&x, |row| {
            let s = softmax(&row_matmul(row, &layer.router));
            let mut out = vec![0.0; 8];
            for (e, ex) in layer.experts.iter().enumerate() {
                let f = expert_ref(row, ex);
                for (d, o) in out.iter_mut().enumerate() {
                    *o += match mode {
                        BiasMode::Inner => s[e] * (f[d] + ex.label.get(0, d)),
                        BiasMode::Outer => s[e] * f[d] + ex.label.get(0, d) / 4.0,
                        BiasMode::None => s[e] * f[d],
                    };
                }
            }
            out
        });
        assert!(y.max_abs_diff(&want) <= 1e-6, "{mode}");
    }
}

#[test]
fn equal_scores_close_the_bias_bracket() {
    let mut r = rng(5);
    let x = Tensor3::<f64>::randn(2, 6, 8, &mut r);
    for (e, k) in [(1, 1), (4, 4), (3, 3)] {
        let mut inner = moe(8, e, 10, k, BiasMode::Inner, &mut r);
        inner.router = Matrix::zeros(8, e);
        let outer = MoeLayer {
            bias_mode: BiasMode::Outer,
            ..inner.clone()
        };
        let scores = routing_scores(&x, &inner).unwrap();
        assert!(scores.as_slice().iter().all(|&s| (s - 1.0 / k as f64).abs() < 1e-15));
        let (yi, _) = moe_forward(&x, &inner).unwrap();
        let (yo, _) = moe_forward(&x, &outer).unwrap();
        assert!(yi.max_abs_diff(&yo) <= 1e-10, "E={e}");
    }
}

#[test]
fn top_k_over_experts_is_config_error() {
    let mut r = rng(6);
    let layer = moe(4, 2, 4, 3, BiasMode::Inner, &mut r);
    let x = Tensor3::<f64>::randn(1, 2, 4, &mut r);
    assert!(matches!(moe_forward(&x, &layer), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_scores_are_a_distribution(seed in 0u64..10_000, e in 1usize..6, k_frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let k = 1 + ((e - 1) as f64 * k_frac).round() as usize;
        let layer = moe(4, e, 4, k, BiasMode::Inner, &mut r);
        let x = Tensor3::<f64>::randn(1, 5, 4, &mut r).map(|v| 3.0 * v);
        let s = routing_scores(&x, &layer).unwrap();
        for row in 0..s.rows() {
            let row = s.row(row);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row.iter().filter(|&&v| v > 0.0).count() <= k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn lobe_examples() {
    let mut r = rng(7);
    let l = lobe(8, false, &mut r);
    let zero = Tensor3::<f64>::zeros(1, 5, 8);
    let y = memory_lobe(&zero, &l, &mix(KernelId::HadamardExp, 2)).unwrap();
    assert!(y.as_slice().iter().all(|&v| v == 0.0));

    let one = Tensor3::<f64>::randn(2, 1, 8, &mut r);
    let y = memory_lobe(&one, &l, &mix(KernelId::SumSqDist, 2)).unwrap();
    assert!(y.max_abs_diff(&map_tensor(&one, &l.v_map)) <= 1e-12);
}

#[test]
fn lobe_matches_quadratic_oracle() {
    let mut r = rng(8);
    let flow = Tensor3::<f64>::randn(2, 33, 8, &mut r);
    for kernel in [KernelId::HadamardExp, KernelId::SumSqDist, KernelId::MagnitudeDirection] {
        let l = lobe(8, false, &mut r);
        let got = memory_lobe(&flow, &l, &mix(kernel, 2)).unwrap();
        let (q, k, v) = (map_tensor(&flow, &l.q_map), map_tensor(&flow, &l.k_map), map_tensor(&flow, &l.v_map));
        let want = quadratic_oracle(&q, &k, &v, &AttentionConfig::new(kernel, 2, false)).unwrap();
        assert_eq!(got.shape(), flow.shape());
        assert!(got.max_abs_diff(&want) <= 1e-10, "{kernel}");
    }
}

fn layer(d: usize, hyper: bool, lobe_mode: LobeMode, r: &mut ChaCha8Rng) -> DecoderLayer<Matrix<f64>> {
    DecoderLayer {
        norm: gaussian(1, d, 1.0, r),
        norm2: (!hyper).then(|| gaussian(1, d, 1.0, r)),
        moe: moe(d, 4, 2 * d, 2, BiasMode::Inner, r),
        lobe: match lobe_mode {
            LobeMode::Off => None,
            m => Some(lobe(d, m == LobeMode::Causal, r)),
        },
        hyper_link: hyper,
    }
}

#[test]
fn zeroed_layer_without_lobe_is_identity() {
    let mut r = rng(9);
    let mut lay = layer(8, true, LobeMode::Off, &mut r);
    for e in &mut lay.moe.experts {
        e.w_out = Matrix::zeros(16, 8);
        e.label = Matrix::zeros(1, 8);
    }
    let x = Tensor3::<f64>::randn(2, 10, 8, &mut r);
    let (y, _) = decoder_layer_forward(&x, &lay, &mix(KernelId::HadamardExp, 2)).unwrap();
    assert_eq!(y.as_slice(), x.as_slice());
}

#[test]
fn layer_composes_its_blocks() {
    let mut r = rng(10);
    let x = Tensor3::<f64>::randn(2, 20, 8, &mut r);
    let m = mix(KernelId::HadamardExp, 2);
    let acfg = AttentionConfig::new(KernelId::HadamardExp, 2, true);
    for lobe_mode in LobeMode::ALL {
        let lay = layer(8, true, lobe_mode, &mut r);
        let (y, _) = decoder_layer_forward(&x, &lay, &m).unwrap();
        let xn = rms_norm(&x, lay.norm.as_slice()).unwrap();
        let attn = linear_causal(&xn, &xn, &xn, &acfg).unwrap();
        let (ffn, _) = moe_forward(&attn, &lay.moe).unwrap();
        let mut want = add(&x, &ffn);
        if let Some(l) = &lay.lobe {
            let (q, k, v) = (map_tensor(&ffn, &l.q_map), map_tensor(&ffn, &l.k_map), map_tensor(&ffn, &l.v_map));
            let lob = if l.causal {
                linear_causal(&q, &k, &v, &acfg).unwrap()
            } else {
                linear_bidirectional(&q, &k, &v, &acfg).unwrap()
            };
            want = add(&want, &lob);
        }
        assert!(y.max_abs_diff(&want) <= 1e-10, "{lobe_mode}");
    }

    let lay = layer(8, false, LobeMode::Off, &mut r);
    let (y, _) = decoder_layer_forward(&x, &lay, &m).unwrap();
    let xn = rms_norm(&x, lay.norm.as_slice()).unwrap();
    let h = add(&x, &linear_causal(&xn, &xn, &xn, &acfg).unwrap());
    let hn = rms_norm(&h, lay.norm2.as_ref().unwrap().as_slice()).unwrap();
    let want = add(&h, &moe_forward(&hn, &lay.moe).unwrap().0);
    assert!(y.max_abs_diff(&want) <= 1e-10);
}

#[test]
fn layer_output_is_the_sum_of_its_addends() {
    let mut r = rng(11);
    for lobe_mode in [LobeMode::On, LobeMode::Causal] {
        let lay = layer(8, true, lobe_mode, &mut r);
        let x = Tensor3::<f64>::randn(1, 16, 8, &mut r);
        let t = decoder_layer_trace(&x, &lay, &mix(KernelId::SumSqDist, 2)).unwrap();
        let lob = t.lob_out.as_ref().unwrap();
        let recombined: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(t.ffn_out.as_slice())
            .zip(lob.as_slice())
            .map(|((a, b), c)| a + b + c)
            .collect();
        assert_eq!(recombined.as_slice(), t.y.as_slice());
        let flow: Vec<f64> = t
            .y
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .zip(lob.as_slice())
            .map(|((y, x), l)| y - x - l)
            .collect();
        assert!(flow.iter().zip(t.ffn_out.as_slice()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

fn small(lobe: LobeMode, kernel: TokenMixer) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        n_experts: 3,
        d_ff: 24,
        memory_lobe: lobe,
        kernel,
        seed: 3,
        ..ModelConfig::desk()
    }
}

#[test]
fn gpt_shapes_and_determinism() {
    let model = ToyGpt::<Matrix<f64>>::init(&small(LobeMode::On, TokenMixer::Kernel(KernelId::HadamardExp))).unwrap();
    let (logits, aux) = gpt_forward(&[vec![7]], &model).unwrap();
    assert_eq!(logits.shape(), [1, 1, 256]);
    assert!(aux.is_finite());
    let prompt: Vec<usize> = b"hello there".iter().map(|&b| b as usize).collect();
    let (logits, _) = gpt_forward(&[prompt.clone(), prompt], &model).unwrap();
    for l in 0..logits.len() {
        assert_eq!(logits.row(0, l), logits.row(1, l));
    }
    assert!(matches!(gpt_forward(&[vec![1, 256]], &model), Err(Error::Input(_))));
    assert!(matches!(gpt_forward(&[vec![1, 2], vec![3]], &model), Err(Error::Input(_))));
}

#[test]
fn gpt_logits_are_causal() {
    let mut r = rng(12);
    let base: Vec<usize> = (0..40).map(|_| r.random_range(0..256)).collect();
    let mixers = [
        TokenMixer::Kernel(KernelId::HadamardExp),
        TokenMixer::Kernel(KernelId::SumSqDist),
        TokenMixer::FullOracle,
    ];
    for kernel in mixers {
        for lobe in [LobeMode::Off, LobeMode::Causal] {
            let model = ToyGpt::<Matrix<f32>>::init(&small(lobe, kernel)).unwrap();
            let (y0, _) = gpt_forward(std::slice::from_ref(&base), &model).unwrap();
            for j in [0, 1, 17, 39] {
                let mut edited = base.clone();
                edited[j] = (edited[j] + 101) % 256;
                let (y1, _) = gpt_forward(&[edited], &model).unwrap();
                for i in 0..j {
                    assert_eq!(y0.row(0, i), y1.row(0, i), "{kernel} {lobe} j={j} i={i}");
                }
                assert_ne!(y0.row(0, j), y1.row(0, j));
            }
        }
    }
}

#[test]
fn bidirectional_lobe_sees_the_future() {
    let model = ToyGpt::<Matrix<f64>>::init(&small(LobeMode::On, TokenMixer::Kernel(KernelId::HadamardExp))).unwrap();
    let (y0, _) = gpt_forward(&[vec![1, 2, 3, 4]], &model).unwrap();
    let (y1, _) = gpt_forward(&[vec![1, 2, 3, 9]], &model).unwrap();
    assert_ne!(y0.row(0, 0), y1.row(0, 0));
}

#[test]
fn streaming_matches_whole_sequence_bitwise() {
    let tokens: Vec<usize> = b"the quick brown fox jumps over the lazy dog, again and again"
        .iter()
        .map(|&b| b as usize)
        .collect();
    for kernel in [KernelId::HadamardExp, KernelId::SumSqDist, KernelId::MagnitudeDirection] {
        for lobe in [LobeMode::Off, LobeMode::Causal] {
            let cfg = small(lobe, TokenMixer::Kernel(kernel));
            let m32 = ToyGpt::<Matrix<f32>>::init(&cfg).unwrap();
            let (full, _) = gpt_forward(std::slice::from_ref(&tokens), &m32).unwrap();
            let mut st = StreamState::new(&cfg).unwrap();
            let bytes = st.state_bytes();
            for (t, &tok) in tokens.iter().enumerate() {
                let y = st.step(&m32, tok).unwrap();
                assert_eq!(y.as_slice(), full.row(0, t), "{kernel} {lobe} t={t}");
            }
            assert_eq!(st.state_bytes(), bytes);
            assert_eq!(st.position(), tokens.len());
        }
    }
    let unsupported = [
        small(LobeMode::On, TokenMixer::Kernel(KernelId::HadamardExp)),
        small(LobeMode::Off, TokenMixer::FullOracle),
        ModelConfig {
            attention_path: AttentionPath::Quadratic,
            ..small(LobeMode::Off, TokenMixer::Kernel(KernelId::HadamardExp))
        },
    ];
    for cfg in unsupported {
        assert!(!StreamState::supported(&cfg));
        assert!(matches!(StreamState::new(&cfg), Err(Error::Config(_))));
    }
}

#[test]
fn quadratic_path_matches_linear_path() {
    let tokens: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 256).collect();
    let cfg = small(LobeMode::On, TokenMixer::Kernel(KernelId::HadamardExp));
    let lin = ToyGpt::<Matrix<f64>>::init(&cfg).unwrap();
    let quad = ToyGpt::<Matrix<f64>>::init(&ModelConfig {
        attention_path: AttentionPath::Quadratic,
        ..cfg
    })
    .unwrap();
    let (a, _) = gpt_forward(std::slice::from_ref(&tokens), &lin).unwrap();
    let (b, _) = gpt_forward(&[tokens], &quad).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn memory_lobe_adds_three_square_maps_per_layer() {
    for base in [ModelConfig::desk(), small(LobeMode::Off, TokenMixer::FullOracle)] {
        let count = |lobe| {
            ToyGpt::<Matrix<f32>>::init(&ModelConfig {
                memory_lobe: lobe,
                ..base.clone()
            })
            .unwrap()
            .param_count()
        };
        let d = base.d_model;
        assert_eq!(count(LobeMode::On) - count(LobeMode::Off), base.n_layers * 3 * d * d);
        assert_eq!(count(LobeMode::Causal), count(LobeMode::On));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = ToyGpt::<Matrix<f32>>::init(&small(LobeMode::Causal, TokenMixer::FullOracle)).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap(), model);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("missing")), Err(Error::Io { .. })));
}
