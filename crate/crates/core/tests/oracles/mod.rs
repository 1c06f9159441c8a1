//! Independent reference computations and the criterion checks built on
//! them, shared by the test targets and the acceptance runner.
#![allow(dead_code)]

pub mod decoding;
pub mod gradients;

use nue_core::autodiff::Tape;
use nue_core::bridge::{
    downsample_len, label_runs, non_blank_frames, Bridge, DOWNSAMPLE_MIN_FRAMES,
};
use nue_core::config::{BridgeMode, LmConfig, LoraConfig, LoraTargets, ModelConfig, Objective};
use nue_core::ctc::{ctc_loss, min_frames};
use nue_core::eval::{cer, levenshtein, normalize_text};
use nue_core::lm::{DecoderLm, PromptedInput};
use nue_core::lora;
use nue_core::model::AsrModel;
use nue_core::params::ParamStore;
use nue_core::synth::{synth_utterance, SynthProfile};
use nue_core::tokenizer::Vocab;
use nue_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A criterion result: a summary on success, the first violation otherwise.
pub type Outcome = Result<String, String>;

/// Full-matrix edit distance, independent of the rolling-row implementation.
pub fn dp_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

/// Negative log of the summed probability of every frame path whose
/// collapse is the target.
pub fn enumerate_ctc(lp: &[Vec<f64>], target: &[u32], blank: u32) -> f64 {
    let (t, c) = (lp.len(), lp[0].len());
    let mut total = 0.0;
    let mut path = vec![0u32; t];
    for code in 0..c.pow(t as u32) {
        let mut k = code;
        for p in path.iter_mut() {
            *p = (k % c) as u32;
            k /= c;
        }
        let mut out = Vec::new();
        let mut prev = None;
        for &p in &path {
            if Some(p) != prev && p != blank {
                out.push(p);
            }
            prev = Some(p);
        }
        if out == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &p)| lp[i][p as usize])
                .sum::<f64>()
                .exp();
        }
    }
    -total.ln()
}

pub fn log_softmax_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            r.iter().map(|v| v - lse).collect()
        })
        .collect()
}

/// CTC loss against enumeration on random feasible instances with
/// `T ≤ 6`, `V ≤ 4`, `|y| ≤ 3`.
pub fn ctc_matches_enumeration(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut done, mut worst) = (0, 0.0f64);
    while done < cases {
        let t = rng.random_range(1..=6);
        let v = rng.random_range(2..=4);
        let blank = (v - 1) as u32;
        let len = rng.random_range(0..=3);
        let target: Vec<u32> = (0..len).map(|_| rng.random_range(0..blank)).collect();
        if min_frames(&target).max(1) > t {
            continue;
        }
        let raw = Tensor::<f64>::randn(vec![t, v], 1.5, &mut rng);
        let lp = log_softmax_rows(&(0..t).map(|i| raw.row(i).to_vec()).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&lp).map_err(|e| e.to_string())?);
        let l = ctc_loss(&mut tape, x, &target, blank).map_err(|e| e.to_string())?;
        let (got, want) = (tape.value(l).item(), enumerate_ctc(&lp, &target, blank));
        let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        if !(rel <= 1e-6) {
            return Err(format!(
                "T={t} V={v} y={target:?}: {got} vs enumeration {want}"
            ));
        }
        worst = worst.max(rel);
        done += 1;
    }
    Ok(format!("{cases} instances, max rel err {worst:.2e}"))
}

/// Output lengths of the three bridges on random label sequences, checked
/// against their closed forms; the two CTC modes never exceed `T`.
pub fn compression_laws(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blank = 4u32;
    let bridges: Vec<(ParamStore<f32>, Bridge)> = [
        BridgeMode::Downsample,
        BridgeMode::CtcRemove,
        BridgeMode::CtcAverage,
    ]
    .into_iter()
    .map(|m| {
        let mut store = ParamStore::new();
        let b = Bridge::new(&mut store, m, 4, 3, &mut rng);
        (store, b)
    })
    .collect();
    for case in 0..cases {
        let t = rng.random_range(1..120);
        let blank_rate = rng.random_range(0.0..1.0);
        let labels: Vec<u32> = (0..t)
            .map(|_| {
                if rng.random_bool(blank_rate) {
                    blank
                } else {
                    rng.random_range(0..blank)
                }
            })
            .collect();
        let feats = Tensor::<f32>::randn(vec![t, 4], 1.0, &mut rng);
        let mut lens = Vec::new();
        for (store, b) in &bridges {
            let mut tape = Tape::new();
            let x = tape.constant(feats.clone());
            lens.push(
                b.forward(&mut tape, store, x, Some(&labels), blank)
                    .ok()
                    .map(|v| tape.shape(v)[0]),
            );
        }
        let non_blank = labels.iter().filter(|&&l| l != blank).count();
        let mut runs = 0;
        let mut prev = None;
        for &l in &labels {
            if l != blank && Some(l) != prev {
                runs += 1;
            }
            prev = Some(l);
        }
        let down = (t >= DOWNSAMPLE_MIN_FRAMES).then(|| ((t - 4) / 2 + 1 - 4) / 2 + 1);
        let ok = lens[0] == down
            && downsample_len(t) == down
            && lens[1] == Some(non_blank)
            && non_blank_frames(&labels, blank).len() == non_blank
            && lens[2] == Some(runs)
            && label_runs(&labels, blank).len() == runs
            && runs <= non_blank
            && non_blank <= t;
        if !ok {
            return Err(format!(
                "case {case}: T={t} lengths {lens:?}, expected {down:?}/{non_blank}/{runs}"
            ));
        }
    }
    Ok(format!("{cases} instances"))
}

/// Per-head logits `q_i · k_j` after rotating at absolute offset `offset`.
pub fn rotary_logits(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    heads: usize,
    rot: usize,
    offset: usize,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let qr = tape.rotary(qv, heads, rot, offset);
    let kr = tape.rotary(kv, heads, rot, offset);
    let (qd, kd) = (tape.value(qr).clone(), tape.value(kr).clone());
    let (t, d) = (q.rows(), q.cols());
    let dh = d / heads;
    let mut out = Vec::new();
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let qi = &qd.row(i)[h * dh..(h + 1) * dh];
                let kj = &kd.row(j)[h * dh..(h + 1) * dh];
                out.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum());
            }
        }
    }
    out
}

/// Attention logits are unchanged when every position moves by a common
/// offset, within 1e-5.
pub fn rotary_shift_invariance(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.random_range(1..4);
        let dh = 2 * rng.random_range(1..5);
        let rot = 2 * rng.random_range(1..=dh / 2);
        let t = rng.random_range(1..8);
        let q = Tensor::<f64>::randn(vec![t, heads * dh], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(vec![t, heads * dh], 1.0, &mut rng);
        let start = rng.random_range(0..50);
        let shift = rng.random_range(1..500);
        let a = rotary_logits(&q, &k, heads, rot, start);
        let b = rotary_logits(&q, &k, heads, rot, start + shift);
        worst = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(worst, f64::max);
    }
    if worst <= 1e-5 {
        Ok(format!("{cases} instances, max abs diff {worst:.2e}"))
    } else {
        Err(format!("logits moved by {worst:.2e} under a common shift"))
    }
}

pub fn small_lm(vocab: usize, seed: u64) -> (ParamStore<f64>, DecoderLm) {
    let cfg = LmConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: vocab,
        ..LmConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = DecoderLm::new(&mut store, &cfg, &mut rng).unwrap();
    (store, lm)
}

/// The loss at position `t` has exactly zero gradient with respect to every
/// later input row, and changing a later token leaves earlier logits
/// bit-identical.
pub fn causality(models: u64) -> Outcome {
    for seed in 0..models {
        let (store, lm) = small_lm(7, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let len = 6;
        let x0 = Tensor::<f64>::randn(vec![len, 8], 1.0, &mut rng);
        for t in 0..len {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let logits = lm
                .forward(&mut tape, &store, x)
                .map_err(|e| e.to_string())?;
            let loss = tape.cross_entropy(logits, &[(t, 3)]);
            let g = tape
                .backward(loss)
                .map_err(|e| e.to_string())?
                .wrt(&tape, x);
            if let Some(r) = (t + 1..len).find(|&r| g.row(r).iter().any(|&v| v != 0.0)) {
                return Err(format!(
                    "model {seed}: input row {r} reaches the loss at position {t}"
                ));
            }
            if g.row(t).iter().all(|&v| v == 0.0) {
                return Err(format!(
                    "model {seed}: position {t} has no gradient from its own input"
                ));
            }
        }
        let run = |tokens: &[u32]| {
            let input = PromptedInput::for_inference(0, tokens);
            let mut tape = Tape::new();
            let x = lm.embed_input(&mut tape, &store, None, &input);
            let l = lm.forward(&mut tape, &store, x).unwrap();
            tape.value(l).clone()
        };
        let (a, b) = (run(&[4, 5, 6, 4]), run(&[4, 5, 6, 5]));
        if (0..4).any(|r| a.row(r) != b.row(r)) {
            return Err(format!(
                "model {seed}: a later token changed an earlier logit"
            ));
        }
    }
    Ok(format!("{models} models x 6 positions"))
}

pub fn tiny_config(bridge: BridgeMode, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.conv_channels = vec![4; 7];
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ff = 16;
    cfg.encoder.n_layers = 1;
    cfg.lm.d_model = 8;
    cfg.lm.n_heads = 2;
    cfg.lm.d_ff = 16;
    cfg.lm.n_layers = 1;
    cfg.bridge = bridge;
    cfg.seed = seed;
    cfg
}

pub fn joint_loss_value(model: &AsrModel<f64>, samples: &[f32], text: &[u32]) -> f64 {
    let mut tape = Tape::new();
    let f = model
        .encoder
        .wave_encode(&mut tape, &model.store, samples)
        .unwrap();
    let l = model
        .loss(&mut tape, f, text, Objective::Joint, 0.5)
        .unwrap();
    tape.value(l.total).item()
}

pub fn prompt_logits(model: &AsrModel<f64>, samples: &[f32]) -> Tensor<f64> {
    let (prompt, _) = model.speech_prompt(samples).unwrap();
    let input = PromptedInput::for_training(prompt.rows(), &[4, 5, 6]).unwrap();
    let mut tape = Tape::new();
    let p = tape.constant(prompt);
    let x = model
        .lm
        .embed_input(&mut tape, &model.store, Some(p), &input);
    let l = model.lm.forward(&mut tape, &model.store, x).unwrap();
    tape.value(l).clone()
}

/// Freshly attached adapters leave every output bit-identical, a zero
/// merge leaves every weight bit-identical, and merging trained-looking
/// adapters matches the adapted model within 1e-5.
pub fn lora_identity_and_merge(inputs: usize, seed: u64) -> Outcome {
    let vocab = Vocab::build(["abcd"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts: Vec<(Vec<f32>, Vec<u32>)> = (0..inputs)
        .map(|i| {
            let len = rng.random_range(3..6);
            let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(4..8)).collect();
            let p = SynthProfile {
                seed: seed.wrapping_add(i as u64),
                ..SynthProfile::default()
            };
            (synth_utterance(&tokens, &p).unwrap().samples, tokens)
        })
        .collect();
    let base = AsrModel::<f64>::new(tiny_config(BridgeMode::CtcAverage, seed), vocab)
        .map_err(|e| e.to_string())?;
    let mut adapted = base.clone();
    let cfg = LoraConfig {
        rank: 4,
        alpha: 8.0,
        targets: LoraTargets {
            encoder: true,
            bridge: true,
            lm: true,
        },
    };
    lora::attach(&mut adapted, &cfg, &mut rng).map_err(|e| e.to_string())?;
    for (x, y) in &utts {
        if joint_loss_value(&base, x, y).to_bits() != joint_loss_value(&adapted, x, y).to_bits()
            || !prompt_logits(&base, x).bit_eq(&prompt_logits(&adapted, x))
        {
            return Err("attached adapters changed an output at init".into());
        }
    }
    let at_init = lora::merge(&adapted).map_err(|e| e.to_string())?;
    if let Some((_, p)) = base
        .store
        .iter()
        .find(|(id, p)| !p.value.bit_eq(at_init.store.get(*id)))
    {
        return Err(format!("zero merge changed `{}`", p.name));
    }
    for id in lora::adapter_ids(&adapted) {
        if adapted.store.name(id).ends_with("lora_b") {
            let shape = adapted.store.get(id).shape().to_vec();
            *adapted.store.get_mut(id) = Tensor::randn(shape, 0.3, &mut rng);
        }
    }
    let merged = lora::merge(&adapted).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (x, y) in &utts {
        worst = worst.max(prompt_logits(&adapted, x).max_abs_diff(&prompt_logits(&merged, x)));
        worst =
            worst.max((joint_loss_value(&adapted, x, y) - joint_loss_value(&merged, x, y)).abs());
    }
    if prompt_logits(&base, &utts[0].0).bit_eq(&prompt_logits(&merged, &utts[0].0)) {
        return Err("randomised adapters had no effect".into());
    }
    if worst <= 1e-5 {
        Ok(format!(
            "identity bit-exact on {inputs} inputs, merge max diff {worst:.2e}"
        ))
    } else {
        Err(format!("merged vs adapted differ by {worst:.2e}"))
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: [char; 9] = ['a', 'b', 'c', 'x', ' ', ',', '.', '!', 'é'];
    (0..rng.random_range(0..13))
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect()
}

/// Levenshtein against the full DP table, metric axioms, corpus pooling by
/// hand, and the worked examples.
pub fn eval_oracle(pairs: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let (a, b, c) = (
            random_text(&mut rng),
            random_text(&mut rng),
            random_text(&mut rng),
        );
        let ab = levenshtein(&a, &b);
        let (la, lb) = (a.chars().count(), b.chars().count());
        let ok = ab == dp_distance(&a, &b)
            && ab == levenshtein(&b, &a)
            && levenshtein(&a, &a) == 0
            && (ab > 0 || a == b)
            && levenshtein(&a, &c) <= ab + levenshtein(&b, &c)
            && ab >= la.abs_diff(lb)
            && ab <= la.max(lb);
        if !ok {
            return Err(format!("pair {i}: {a:?} / {b:?}"));
        }
    }
    for batch in 0..50 {
        let n = rng.random_range(1..8);
        let refs: Vec<String> = (0..n).map(|_| random_text(&mut rng)).collect();
        let hyps: Vec<String> = (0..n).map(|_| random_text(&mut rng)).collect();
        let s = cer(&refs, &hyps).map_err(|e| e.to_string())?;
        let (mut d, mut len, mut ex) = (0, 0, 0);
        for (r, h) in refs.iter().zip(&hyps) {
            let (r, h) = (normalize_text(r), normalize_text(h));
            if r.is_empty() {
                ex += 1;
                continue;
            }
            d += dp_distance(&r, &h);
            len += r.chars().count();
        }
        if (s.distance, s.ref_chars, s.excluded) != (d, len, ex) {
            return Err(format!(
                "batch {batch}: pooled {:?} vs hand {:?}",
                (s.distance, s.ref_chars, s.excluded),
                (d, len, ex)
            ));
        }
    }
    let examples = [
        (levenshtein("kitten", "sitting") == 3, "kitten/sitting"),
        (levenshtein("", "abc") == 3, "empty/abc"),
        (
            (cer(&["hello world"], &["helo world"]).unwrap().cer() - 0.1).abs() < 1e-12,
            "hello world CER",
        ),
        (
            (cer(&["abcdefghij", "klmnopqrst"], &["abcdefghiX", "klmnopqrYZ"])
                .unwrap()
                .cer()
                - 0.15)
                .abs()
                < 1e-12,
            "pooling",
        ),
        (
            normalize_text("hello, world!") == "helloworld" && normalize_text("a-b'c") == "abc",
            "normalisation",
        ),
    ];
    if let Some((_, name)) = examples.iter().find(|(ok, _)| !ok) {
        return Err(format!("worked example failed: {name}"));
    }
    Ok(format!("{pairs} pairs, 50 pooled batches, worked examples"))
}
