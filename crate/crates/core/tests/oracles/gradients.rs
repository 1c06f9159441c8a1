//! Finite-difference checks of every differentiable tape op and of the full
//! joint training loss, in f64.

use nue_core::autodiff::{Tape, Var};
use nue_core::config::{BridgeMode, ModelConfig, Objective};
use nue_core::ctc::ctc_loss;
use nue_core::gradcheck::{check_leaves, check_params, Report};
use nue_core::model::AsrModel;
use nue_core::synth::{synth_utterance, SynthProfile};
use nue_core::tokenizer::Vocab;
use nue_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Reduces `out` to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct cotangent.
fn weighted(t: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.constant(randn(t.shape(out), &mut rng));
    let p = t.mul(out, w);
    t.sum(p)
}

/// Runs `cases` seeded cases; `build` draws the inputs for a seed and the
/// closure it returns records the op.
fn check_op<B, F>(out: &mut Vec<(String, Report)>, cases: u64, name: &str, build: B)
where
    B: Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, F),
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut worst = Report::default();
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = build(&mut rng);
        let r = check_leaves(&inputs, EPS, FLOOR, |t, v| {
            let out = f(t, v)?;
            Ok(if t.shape(out).is_empty() {
                out
            } else {
                weighted(t, out, seed)
            })
        })
        .unwrap_or(Report {
            max_rel: f64::INFINITY,
            max_abs: f64::INFINITY,
            coords: 0,
        });
        worst.merge(r);
    }
    out.push((name.to_string(), worst));
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn elementwise_ops(out: &mut Vec<(String, Report)>, cases: u64) {
    check_op(out, cases, "add", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng), randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.add(v[0], v[1])),
        )
    });
    check_op(out, cases, "sub", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng), randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.sub(v[0], v[1])),
        )
    });
    check_op(out, cases, "mul", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng), randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.mul(v[0], v[1])),
        )
    });
    check_op(out, cases, "mul_self", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.mul(v[0], v[0])),
        )
    });
    check_op(out, cases, "scale", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.scale(v[0], -1.7)),
        )
    });
    check_op(out, cases, "gelu", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng).map(|x| 3.0 * x)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.gelu(v[0])),
        )
    });
    check_op(out, cases, "log_add_exp", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r * c], rng), randn(&[r * c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.log_add_exp(v[0], v[1])),
        )
    });
}

fn linear_algebra_ops(out: &mut Vec<(String, Report)>, cases: u64) {
    check_op(out, cases, "add_bias", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng), randn(&[c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.add_bias(v[0], v[1])),
        )
    });
    check_op(out, cases, "matmul", |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![randn(&[m, k], rng), randn(&[k, n], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.matmul(v[0], v[1])),
        )
    });
    check_op(out, cases, "matmul_nt", |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..5);
        (
            vec![randn(&[m, k], rng), randn(&[n, k], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.matmul_nt(v[0], v[1])),
        )
    });
    check_op(out, cases, "transpose", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.transpose(v[0])),
        )
    });
    check_op(out, cases, "reshape", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.reshape(v[0], &[c, r])),
        )
    });
    check_op(out, cases, "conv1d", |rng| {
        let c_in = rng.random_range(1..4);
        let c_out = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..4);
        let len = k + rng.random_range(0..8);
        (
            vec![randn(&[c_in, len], rng), randn(&[c_out, c_in, k], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| t.conv1d(v[0], v[1], stride),
        )
    });
    check_op(out, cases, "layer_norm", |rng| {
        let r = rng.random_range(1..4);
        let c = rng.random_range(2..7);
        (
            vec![randn(&[r, c], rng), randn(&[c], rng), randn(&[c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.layer_norm(v[0], v[1], v[2], 1e-5)),
        )
    });
}

fn normalisation_and_reduction_ops(out: &mut Vec<(String, Report)>, cases: u64) {
    check_op(out, cases, "softmax", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.softmax(v[0])),
        )
    });
    check_op(out, cases, "log_softmax", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.log_softmax(v[0])),
        )
    });
    check_op(out, cases, "sum", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.sum(v[0])),
        )
    });
    check_op(out, cases, "mean", |rng| {
        let (r, c) = dims(rng);
        (
            vec![randn(&[r, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.mean(v[0])),
        )
    });
    check_op(out, cases, "cross_entropy", |rng| {
        let (r, c) = dims(rng);
        let c = c + 1;
        let pairs: Vec<(usize, usize)> = (0..rng.random_range(1..6))
            .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
            .collect();
        (
            vec![randn(&[r, c], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.cross_entropy(v[0], &pairs)),
        )
    });
}

fn indexing_ops(out: &mut Vec<(String, Report)>, cases: u64) {
    check_op(out, cases, "rows", |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..rng.random_range(1..7))
            .map(|_| rng.random_range(0..r))
            .collect();
        (
            vec![randn(&[r, c], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.rows(v[0], &idx)),
        )
    });
    check_op(out, cases, "slice_rows", |rng| {
        let (r, c) = dims(rng);
        let s = rng.random_range(0..r);
        let e = rng.random_range(s + 1..=r);
        (
            vec![randn(&[r, c], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.slice_rows(v[0], s, e)),
        )
    });
    check_op(out, cases, "group_mean", |rng| {
        let r = rng.random_range(1..8);
        let c = rng.random_range(1..4);
        let mut groups = Vec::new();
        let mut s = 0;
        while s < r {
            let e = rng.random_range(s + 1..=r);
            if rng.random_bool(0.7) {
                groups.push((s, e));
            }
            s = e;
        }
        if groups.is_empty() {
            groups.push((0, r));
        }
        (
            vec![randn(&[r, c], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.group_mean(v[0], &groups)),
        )
    });
    check_op(out, cases, "concat_rows", |rng| {
        let c = rng.random_range(1..4);
        let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
        (
            vec![randn(&[a, c], rng), randn(&[b, c], rng)],
            |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.concat_rows(&[v[0], v[1], v[0]])),
        )
    });
    check_op(out, cases, "pick", |rng| {
        let n = rng.random_range(1..8);
        let idx: Vec<usize> = (0..rng.random_range(1..8))
            .map(|_| rng.random_range(0..n))
            .collect();
        (
            vec![randn(&[n], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.pick(v[0], &idx)),
        )
    });
    check_op(out, cases, "shift_neg_inf", |rng| {
        let n = rng.random_range(1..8);
        let by = rng.random_range(0..3);
        // The shifted-in -inf entries are made finite again by log_add_exp.
        (
            vec![randn(&[n], rng), randn(&[n], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| {
                let s = t.shift_neg_inf(v[0], by);
                Ok(t.log_add_exp(s, v[1]))
            },
        )
    });
}

fn attention_and_rotary_ops(out: &mut Vec<(String, Report)>, cases: u64) {
    for causal in [false, true] {
        check_op(
            out,
            cases,
            if causal {
                "attention_causal"
            } else {
                "attention"
            },
            move |rng| {
                let heads = rng.random_range(1..3);
                let d = heads * rng.random_range(1..4);
                let tq = rng.random_range(1..5);
                let tk = if causal { tq } else { rng.random_range(1..5) };
                (
                    vec![
                        randn(&[tq, d], rng),
                        randn(&[tk, d], rng),
                        randn(&[tk, d], rng),
                    ],
                    move |t: &mut Tape<'_, f64>, v: &[Var]| {
                        Ok(t.attention(v[0], v[1], v[2], heads, causal))
                    },
                )
            },
        );
    }
    check_op(out, cases, "rotary", |rng| {
        let heads = rng.random_range(1..3);
        let hd = 2 * rng.random_range(1..4);
        let rot = 2 * rng.random_range(1..=hd / 2);
        let rows = rng.random_range(1..5);
        let offset = rng.random_range(0..7);
        (
            vec![randn(&[rows, heads * hd], rng)],
            move |t: &mut Tape<'_, f64>, v: &[Var]| Ok(t.rotary(v[0], heads, rot, offset)),
        )
    });
}

fn ctc_loss_op(out: &mut Vec<(String, Report)>, cases: u64) {
    check_op(out, cases, "ctc_loss", |rng| {
        let v = rng.random_range(2..5);
        let blank = (v - 1) as u32;
        let len = rng.random_range(0..4);
        let target: Vec<u32> = (0..len).map(|_| rng.random_range(0..blank)).collect();
        let t_len = nue_core::ctc::min_frames(&target).max(1) + rng.random_range(0..4);
        (
            vec![randn(&[t_len, v], rng)],
            move |t: &mut Tape<'_, f64>, x: &[Var]| {
                let lp = t.log_softmax(x[0]);
                ctc_loss(t, lp, &target, blank)
            },
        )
    });
}

/// Worst error of each op over `cases` seeds.
pub fn op_reports(cases: u64) -> Vec<(String, Report)> {
    let mut out = Vec::new();
    elementwise_ops(&mut out, cases);
    linear_algebra_ops(&mut out, cases);
    normalisation_and_reduction_ops(&mut out, cases);
    indexing_ops(&mut out, cases);
    attention_and_rotary_ops(&mut out, cases);
    ctc_loss_op(&mut out, cases);
    out
}

/// Every op and the joint loss within `TOL`.
pub fn suite(cases: u64) -> super::Outcome {
    let mut reports = op_reports(cases);
    reports.push(("joint_loss".into(), joint_loss(cases)));
    let worst = reports.iter().map(|(_, r)| r.max_rel).fold(0.0, f64::max);
    let coords: usize = reports.iter().map(|(_, r)| r.coords).sum();
    let bad: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !(r.max_rel < TOL) || r.coords == 0)
        .map(|(n, r)| format!("{n} ({:.2e})", r.max_rel))
        .collect();
    if bad.is_empty() {
        Ok(format!(
            "{} checks x {cases} seeds, {coords} coords, max rel err {worst:.2e}",
            reports.len()
        ))
    } else {
        Err(format!("over tolerance: {}", bad.join(", ")))
    }
}

pub fn tiny_config(bridge: BridgeMode, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.conv_channels = vec![3; 7];
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ff = 12;
    cfg.encoder.n_layers = 1;
    cfg.encoder.freeze_conv = false;
    cfg.lm.d_model = 8;
    cfg.lm.n_heads = 2;
    cfg.lm.d_ff = 12;
    cfg.lm.n_layers = 1;
    cfg.bridge = bridge;
    cfg.seed = seed;
    cfg
}

/// Joint loss of the whole model from raw samples, with the conv stack
/// trainable, checked on a few coordinates of every parameter tensor.
pub fn joint_loss(cases: u64) -> Report {
    let vocab = Vocab::build(["abcd"]).unwrap();
    let mut worst = Report::default();
    for seed in 0..cases {
        let mode = [
            BridgeMode::Downsample,
            BridgeMode::CtcRemove,
            BridgeMode::CtcAverage,
        ][seed as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text: Vec<u32> = (0..3).map(|_| rng.random_range(4..8)).collect();
        let profile = SynthProfile {
            seed,
            ..SynthProfile::default()
        };
        let samples = synth_utterance(&text, &profile).unwrap().samples;
        let mut model = AsrModel::<f64>::new(tiny_config(mode, seed), vocab.clone()).unwrap();
        let coords: Vec<_> = model
            .store
            .ids()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|id| (id, rng.random_range(0..model.store.get(id).len())))
            .collect();
        let r = check_params(
            &mut model,
            |m| &mut m.store,
            &coords,
            EPS,
            FLOOR,
            |tape, m| {
                let feats = m.encoder.wave_encode(tape, &m.store, &samples)?;
                Ok(m.loss(tape, feats, &text, Objective::Joint, 0.5)?.total)
            },
        )
        .unwrap_or(Report {
            max_rel: f64::INFINITY,
            max_abs: f64::INFINITY,
            coords: 0,
        });
        worst.merge(r);
    }
    worst
}
