//! The command line as a subprocess: exit codes, determinism and the
//! synth → train → transcribe → evaluate → adapt pipeline.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{scratch, TINY_CONFIG};

fn nue(args: &[&str]) -> Output {
    nue_env(args, None)
}

fn nue_env(args: &[&str], deterministic: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nue-asr"));
    c.args(args);
    match deterministic {
        Some(v) => c.env("NUE_DETERMINISTIC", v),
        None => c.env_remove("NUE_DETERMINISTIC"),
    };
    c.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let o = nue(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(code(&nue(&["synth-data", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&nue(&[])), 1);
    assert_eq!(
        code(&nue(&[
            "train",
            "--manifest",
            "m",
            "--out",
            "o",
            "--bridge",
            "pyramid"
        ])),
        1
    );
    assert_eq!(
        code(&nue_env(&["synth-data", "--out", "x"], Some("maybe"))),
        1
    );
    let help = nue(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("synth-data"));
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = scratch("cli-runtime");
    let dir = tmp.path();
    let o = nue(&[
        "evaluate",
        "--manifest",
        s(&dir.join("none.jsonl")),
        "--hyps",
        "h",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("error"));
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "lm.depth = 3\n").unwrap();
    let o = nue(&[
        "train",
        "--manifest",
        "m",
        "--out",
        "o",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("unknown key `lm.depth`"),
        "{}",
        stderr(&o)
    );
    let o = nue(&[
        "synth-data",
        "--out",
        s(&dir.join("c")),
        "--utts",
        "2",
        "--max-len",
        "65",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_data_is_reproducible() {
    let tmp = scratch("cli-synth");
    let dir = tmp.path();
    let (a, b, c) = (dir.join("a"), dir.join("b"), dir.join("c"));
    for (out, det) in [(&a, None), (&b, Some("1"))] {
        let o = nue_env(
            &["synth-data", "--seed", "7", "--utts", "30", "--out", s(out)],
            det,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let files = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = walk(d)
            .into_iter()
            .map(|p| {
                (
                    p.strip_prefix(d).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
    assert_eq!(files(&a).len(), 31);
    // Without a seed, determinism off draws a fresh seed.
    let o = nue_env(&["synth-data", "--utts", "30", "--out", s(&c)], Some("0"));
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("seed: "));
    assert_ne!(files(&a), files(&c));
}

fn walk(d: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn full_pipeline() {
    let tmp = scratch("cli-pipeline");
    let dir = tmp.path();
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let (train_dir, test_dir, shift_dir) = (dir.join("train"), dir.join("test"), dir.join("shift"));
    let chars = ["--chars", "abcdefgh", "--min-len", "2", "--max-len", "4"];
    for (out, seed, n) in [(&train_dir, "1", "24"), (&test_dir, "2", "6")] {
        let mut args = vec!["synth-data", "--seed", seed, "--utts", n, "--out", s(out)];
        args.extend(chars);
        assert_eq!(code(&nue(&args)), 0);
    }
    let mut args = vec![
        "synth-data",
        "--seed",
        "3",
        "--utts",
        "8",
        "--out",
        s(&shift_dir),
        "--permute",
        "bdf",
        "--focus-rate",
        "0.5",
    ];
    args.extend(chars);
    assert_eq!(code(&nue(&args)), 0);

    let ckpt = dir.join("model.ckpt");
    let o = nue(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&train_dir.join("manifest.jsonl")),
        "--out",
        s(&ckpt),
        "--bridge",
        "ctc_average",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.join("model.ckpt.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for line in log.lines() {
        let fields: Vec<&str> = line.split(", ").collect();
        assert_eq!(fields.len(), 5, "{line}");
        assert!(fields.iter().all(|f| f.parse::<f64>().is_ok()), "{line}");
    }
    let ckpt_bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(&ckpt_bytes[..4], b"NUEA");

    // Same seed, same checkpoint and log.
    let ckpt2 = dir.join("again.ckpt");
    let o = nue(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&train_dir.join("manifest.jsonl")),
        "--out",
        s(&ckpt2),
        "--bridge",
        "ctc_average",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&ckpt2).unwrap(), ckpt_bytes);
    assert_eq!(
        std::fs::read_to_string(dir.join("again.ckpt.log")).unwrap(),
        log
    );

    // One unreadable entry yields an empty line, not a skip.
    let test_manifest = test_dir.join("manifest.jsonl");
    std::fs::write(test_dir.join("audio/00002.wav"), b"RIFF").unwrap();
    let hyps = dir.join("hyps.txt");
    let o = nue(&[
        "transcribe",
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&test_manifest),
        "--out",
        s(&hyps),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("error: entry 3"), "{}", stderr(&o));
    let text = std::fs::read_to_string(&hyps).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert_eq!(text.lines().nth(2), Some(""));
    let timings = dir.join("hyps.txt.timing.jsonl");
    assert_eq!(
        std::fs::read_to_string(&timings).unwrap().lines().count(),
        6
    );

    // The broken entry cannot be timed, so evaluate it on a repaired copy.
    std::fs::copy(
        train_dir.join("audio/00000.wav"),
        test_dir.join("audio/00002.wav"),
    )
    .unwrap();
    let report = dir.join("report.json");
    let o = nue(&[
        "evaluate",
        "--manifest",
        s(&test_manifest),
        "--hyps",
        s(&hyps),
        "--timings",
        s(&timings),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("all") && table.contains("RTF"), "{table}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["cer"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["utterances"].as_u64(), Some(6));
    assert!(json["rtf"].as_f64().unwrap() > 0.0);

    // Adaptation leaves the base file alone and writes a small adapter file.
    let adapter = dir.join("shift.lora");
    let o = nue(&[
        "adapt",
        "--base",
        s(&ckpt),
        "--manifest",
        s(&shift_dir.join("manifest.jsonl")),
        "--out",
        s(&adapter),
        "--rank",
        "2",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);
    let adapter_len = std::fs::metadata(&adapter).unwrap().len() as usize;
    assert!(adapter_len > 0 && adapter_len < ckpt_bytes.len());
    let o = nue(&[
        "transcribe",
        "--ckpt",
        s(&ckpt),
        "--adapter",
        s(&adapter),
        "--manifest",
        s(&shift_dir.join("manifest.jsonl")),
        "--out",
        s(&dir.join("shift.txt")),
        "--strategy",
        "beam",
        "--beam-size",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(dir.join("shift.txt"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    // The default rank is 32, which exceeds this model's width.
    let o = nue(&[
        "adapt",
        "--base",
        s(&ckpt),
        "--manifest",
        s(&shift_dir.join("manifest.jsonl")),
        "--out",
        s(&dir.join("r32.lora")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rank 32"), "{}", stderr(&o));
    assert_eq!(std::fs::read(&ckpt).unwrap(), ckpt_bytes);
}
