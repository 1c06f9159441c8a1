//! The `nue-asr` command line.
//!
//! Settings resolve in order: built-in defaults, `--config` file, `--set`
//! overrides, then dedicated flags.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nue_core::config::{LoraTargets, Strategy};
use nue_core::eval::{self, LengthGroups, Scored};
use nue_core::synth::SynthProfile;
use nue_core::tokenizer::Vocab;
use nue_core::trainer::{Example, LogRecord};
use rand::Rng;

use crate::checkpoint;
use crate::corpus::{generate_corpus, CorpusSpec};
use crate::error::{AsrError, IoContext, Result};
use crate::manifest::{load_manifest, Entry};
use crate::pipeline;
use crate::report;
use crate::runconfig::RunConfig;
use crate::wav::{read_wav, wav_seconds};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "nue-asr",
    version,
    about = "Train, adapt and run a small end-to-end speech recognizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded tone-coded corpus and its manifest.
    SynthData(SynthArgs),
    /// Train a model on a manifest and write a checkpoint and a log.
    Train(TrainArgs),
    /// Train LoRA adapters over a base checkpoint and write them alone.
    Adapt(AdaptArgs),
    /// Transcribe every manifest entry, one line each.
    Transcribe(TranscribeArgs),
    /// Score transcripts against a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    utts: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Character inventory; tokens are assigned in sorted order.
    #[arg(long, default_value = "abcdefghijklmnop")]
    chars: String,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Characters whose tone frequencies rotate cyclically (a shifted domain).
    #[arg(long, default_value = "")]
    permute: String,
    /// Probability that a position draws from the permuted characters.
    #[arg(long, default_value_t = 0.0)]
    focus_rate: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = ["downsample", "ctc_remove", "ctc_average"])]
    bridge: Option<String>,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    freeze_lm: bool,
    /// Train LoRA adapters on the LM instead of its weights.
    #[arg(long)]
    peft_lm: bool,
    /// Adapter rank for `--peft-lm`.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    /// Base checkpoint; never modified.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Adapter checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 32)]
    rank: usize,
    /// Adapter scale numerator; defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated subset of encoder, bridge, lm.
    #[arg(long, default_value = "encoder,lm")]
    targets: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TranscribeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Adapter checkpoint applied over `--ckpt`.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Transcript file, one line per manifest entry.
    #[arg(long)]
    out: PathBuf,
    /// Per-utterance timing records; defaults to the output path plus `.timing.jsonl`.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = ["greedy", "beam", "top_k", "nucleus"])]
    strategy: Option<String>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Transcript file aligned with the manifest.
    #[arg(long)]
    hyps: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Timing records from `transcribe`, for the real-time factor.
    #[arg(long)]
    timings: Option<PathBuf>,
    /// Utterances, from the start, that the real-time factor covers.
    #[arg(long, default_value_t = 100)]
    rtf_utts: usize,
    #[arg(long, default_value_t = 5.1)]
    short_below: f64,
    #[arg(long, default_value_t = 15.9)]
    long_from: f64,
}

/// Whether seeds default to fixed values (`NUE_DETERMINISTIC`, default 1).
fn deterministic() -> std::result::Result<bool, String> {
    match std::env::var("NUE_DETERMINISTIC") {
        Err(std::env::VarError::NotPresent) => Ok(true),
        Ok(v) if v == "1" => Ok(true),
        Ok(v) if v == "0" => Ok(false),
        Ok(v) => Err(format!("NUE_DETERMINISTIC must be 0 or 1, got `{v}`")),
        Err(e) => Err(format!("NUE_DETERMINISTIC: {e}")),
    }
}

/// An explicit seed, or a fresh one when determinism is off.
fn resolve_seed(flag: Option<u64>, det: bool) -> Option<u64> {
    flag.or_else(|| {
        (!det).then(|| {
            let s = rand::rng().random();
            eprintln!("seed: {s}");
            s
        })
    })
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &args.config {
        rc.apply_file(p)?;
    }
    for kv in &args.set {
        rc.apply_override(kv)?;
    }
    Ok(rc)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn examples(entries: &[Entry], vocab: &Vocab) -> Result<Vec<Example<f32>>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Example::new(
                format!("{i}:{}", e.audio.display()),
                read_wav(&e.audio)?.samples,
                vocab.encode(&e.text),
            ))
        })
        .collect()
}

struct LogSink {
    file: fs::File,
    path: PathBuf,
    every: usize,
    err: Option<std::io::Error>,
}

impl LogSink {
    fn create(path: PathBuf, total_steps: usize) -> Result<Self> {
        let file = fs::File::create(&path).at(&path)?;
        Ok(LogSink {
            file,
            path,
            every: (total_steps / 20).max(1),
            err: None,
        })
    }

    fn record(&mut self, r: &LogRecord) {
        if self.err.is_none() {
            if let Err(e) = writeln!(self.file, "{r}") {
                self.err = Some(e);
            }
        }
        if r.step % self.every == 0 {
            eprintln!("step {r}");
        }
    }

    fn finish(self) -> Result<()> {
        match self.err {
            Some(e) => Err(e).at(&self.path),
            None => Ok(()),
        }
    }
}

fn total_steps(rc: &RunConfig, n: usize) -> usize {
    nue_core::trainer::Trainer::<f32>::steps_per_epoch(&rc.train, n) * rc.train.epochs
}

fn synth_data(a: SynthArgs, det: bool) -> Result<()> {
    let vocab = Vocab::build([a.chars.as_str()])?;
    let mut profile = SynthProfile {
        noise_std: a.noise,
        ..SynthProfile::default()
    };
    let focus: Vec<u32> = a
        .permute
        .chars()
        .map(|c| {
            vocab
                .id(c)
                .ok_or_else(|| AsrError::Config(format!("`{c}` is not among --chars")))
        })
        .collect::<Result<_>>()?;
    profile.permute(&focus);
    let spec = CorpusSpec {
        utterances: a.utts,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: resolve_seed(a.seed, det).unwrap_or(0),
        focus,
        focus_rate: a.focus_rate,
    };
    let records = generate_corpus(&vocab, &spec, &profile, &a.out)?;
    eprintln!(
        "wrote {} utterances to {}",
        records.len(),
        a.out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn train(a: TrainArgs, det: bool) -> Result<()> {
    let mut rc = run_config(&a.config)?;
    if let Some(b) = &a.bridge {
        rc.set("bridge.mode", b)?;
    }
    rc.train.freeze_encoder |= a.freeze_encoder;
    rc.train.freeze_lm |= a.freeze_lm;
    rc.train.peft_lm |= a.peft_lm;
    if let Some(r) = a.rank {
        rc.train.lora_rank = r;
        rc.train.lora_alpha = r as f64;
    }
    if let Some(s) = resolve_seed(a.seed, det) {
        rc.train.seed = s;
        rc.model.seed = s;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        rc.train.peak_lr = lr;
    }
    let entries = load_manifest(&a.manifest)?;
    let vocab = Vocab::build(entries.iter().map(|e| e.text.as_str()))?;
    let data = examples(&entries, &vocab)?;
    let mut sink = LogSink::create(
        a.log.unwrap_or_else(|| with_suffix(&a.out, ".log")),
        total_steps(&rc, data.len()),
    )?;
    eprintln!(
        "training on {} utterances, vocabulary {:?}",
        data.len(),
        vocab.char_string()
    );
    let (model, _) = pipeline::train(&rc, vocab, data, |r| sink.record(r))?;
    sink.finish()?;
    checkpoint::save_checkpoint(&model, Some(&rc.train), &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn adapt(a: AdaptArgs, det: bool) -> Result<()> {
    let mut rc = run_config(&a.config)?;
    rc.lora.rank = a.rank;
    rc.lora.alpha = a.alpha.unwrap_or(a.rank as f64);
    rc.lora.targets = LoraTargets::parse(&a.targets)?;
    if let Some(s) = resolve_seed(a.seed, det) {
        rc.train.seed = s;
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        rc.train.peak_lr = lr;
    }
    let mut model = checkpoint::load_checkpoint(&a.base)?.model;
    let entries = load_manifest(&a.manifest)?;
    let data = examples(&entries, &model.vocab)?;
    let mut sink = LogSink::create(
        a.log.unwrap_or_else(|| with_suffix(&a.out, ".log")),
        total_steps(&rc, data.len()),
    )?;
    pipeline::adapt(&mut model, &rc.lora, &rc.train, data, |r| sink.record(r))?;
    sink.finish()?;
    checkpoint::save_adapters(&model, Some(&rc.train), &a.out)?;
    eprintln!(
        "wrote {} ({} trainable scalars)",
        a.out.display(),
        model.store.trainable_count()
    );
    Ok(())
}

fn transcribe(a: TranscribeArgs, det: bool) -> Result<()> {
    let mut rc = run_config(&a.config)?;
    if let Some(s) = &a.strategy {
        rc.decode.strategy = s.parse::<Strategy>()?;
    }
    if let Some(b) = a.beam_size {
        rc.decode.beam_size = b;
    }
    if let Some(s) = resolve_seed(a.seed, det) {
        rc.decode.seed = s;
    }
    let mut model = checkpoint::load_checkpoint(&a.ckpt)?.model;
    if let Some(p) = &a.adapter {
        checkpoint::load_adapters(&mut model, p)?;
    }
    rc.decode.validate(model.vocab.lm_size())?;
    let entries = load_manifest(&a.manifest)?;
    let mut out = String::new();
    let mut times = String::new();
    let mut failed = 0;
    for (i, e) in entries.iter().enumerate() {
        let result = read_wav(&e.audio).and_then(|w| pipeline::transcribe(&model, &w, &rc.decode));
        let timing = match result {
            Ok(t) => {
                out.push_str(&t.text);
                serde_json::json!({ "audio_seconds": t.audio_seconds, "decode_seconds": t.decode_seconds })
            }
            Err(err) => {
                failed += 1;
                eprintln!("error: entry {} ({}): {err}", i + 1, e.audio.display());
                serde_json::json!({ "audio_seconds": null, "decode_seconds": null })
            }
        };
        out.push('\n');
        times.push_str(&timing.to_string());
        times.push('\n');
    }
    fs::write(&a.out, out).at(&a.out)?;
    let tp = a
        .timings
        .unwrap_or_else(|| with_suffix(&a.out, ".timing.jsonl"));
    fs::write(&tp, times).at(&tp)?;
    eprintln!(
        "transcribed {} of {} entries",
        entries.len() - failed,
        entries.len()
    );
    Ok(())
}

fn read_timings(path: &Path, limit: usize) -> Result<Option<f64>> {
    let text = fs::read_to_string(path).at(path)?;
    let (mut dec, mut aud) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().take(limit).enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| AsrError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let (Some(d), Some(a)) = (v["decode_seconds"].as_f64(), v["audio_seconds"].as_f64()) {
            dec.push(d);
            aud.push(a);
        }
    }
    if dec.is_empty() {
        return Ok(None);
    }
    Ok(Some(eval::rtf(&dec, &aud)?))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let entries = load_manifest(&a.manifest)?;
    let text = fs::read_to_string(&a.hyps).at(&a.hyps)?;
    let hyps: Vec<&str> = text.lines().collect();
    if hyps.len() != entries.len() {
        return Err(AsrError::Config(format!(
            "{} has {} lines but the manifest has {} entries",
            a.hyps.display(),
            hyps.len(),
            entries.len()
        )));
    }
    let seconds = entries
        .iter()
        .map(|e| wav_seconds(&e.audio))
        .collect::<Result<Vec<f64>>>()?;
    let items: Vec<Scored<'_>> = entries
        .iter()
        .zip(&hyps)
        .zip(&seconds)
        .map(|((e, h), &s)| Scored {
            reference: &e.text,
            hypothesis: h,
            audio_seconds: s,
        })
        .collect();
    let rtf = match &a.timings {
        Some(p) => read_timings(p, a.rtf_utts)?,
        None => None,
    };
    let groups = LengthGroups {
        short_below: a.short_below,
        long_from: a.long_from,
    };
    if !(groups.short_below <= groups.long_from) {
        return Err(AsrError::Config(
            "--short-below must not exceed --long-from".into(),
        ));
    }
    let r = eval::evaluate(&items, groups, rtf);
    if let Some(p) = &a.out {
        fs::write(p, report::to_json(&r) + "\n").at(p)?;
    }
    print!("{}", report::to_table(&r));
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let det = match deterministic() {
        Ok(d) => d,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a, det),
        Command::Train(a) => train(a, det),
        Command::Adapt(a) => adapt(a, det),
        Command::Transcribe(a) => transcribe(a, det),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
