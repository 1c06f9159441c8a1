//! Scoring: text normalisation, Levenshtein distance, pooled CER, length
//! groups, edit-distance quartiles and real-time factor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keeps letters and digits; drops punctuation, symbols and whitespace.
pub fn normalize_text(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).collect()
}

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_slices(&a, &b)
}

pub fn levenshtein_slices<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus-pooled error counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CerStats {
    pub distance: usize,
    pub ref_chars: usize,
    pub utterances: usize,
    /// Pairs skipped because the normalised reference was empty.
    pub excluded: usize,
}

impl CerStats {
    pub fn cer(&self) -> f64 {
        if self.ref_chars == 0 {
            0.0
        } else {
            self.distance as f64 / self.ref_chars as f64
        }
    }

    fn add(&mut self, distance: usize, ref_chars: usize) {
        self.distance += distance;
        self.ref_chars += ref_chars;
        self.utterances += 1;
    }
}

/// Σ distance / Σ reference length over normalised pairs.
pub fn cer<S: AsRef<str>, T: AsRef<str>>(refs: &[S], hyps: &[T]) -> Result<CerStats> {
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let mut stats = CerStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        let r = normalize_text(r.as_ref());
        if r.is_empty() {
            stats.excluded += 1;
            continue;
        }
        let h = normalize_text(h.as_ref());
        stats.add(levenshtein(&r, &h), r.chars().count());
    }
    Ok(stats)
}

/// Σ decode time / Σ audio duration.
pub fn rtf(decode_seconds: &[f64], audio_seconds: &[f64]) -> Result<f64> {
    if decode_seconds.len() != audio_seconds.len() {
        return Err(Error::InvalidInput("decode and audio time lists differ in length".into()));
    }
    if audio_seconds.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidInput("audio durations must be positive".into()));
    }
    let audio: f64 = audio_seconds.iter().sum();
    if audio == 0.0 {
        return Err(Error::InvalidInput("total audio duration is zero".into()));
    }
    Ok(decode_seconds.iter().sum::<f64>() / audio)
}

/// Utterance length groups split at two boundaries (seconds): short is
/// `< b1`, mid is `b1 ≤ d < b2`, long is `≥ b2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthGroups {
    pub short_below: f64,
    pub long_from: f64,
}

impl Default for LengthGroups {
    fn default() -> Self {
        LengthGroups { short_below: 5.1, long_from: 15.9 }
    }
}

impl LengthGroups {
    pub const NAMES: [&'static str; 3] = ["short", "mid", "long"];

    pub fn group(&self, seconds: f64) -> usize {
        if seconds < self.short_below {
            0
        } else if seconds < self.long_from {
            1
        } else {
            2
        }
    }
}

/// Quartiles (linear interpolation between order statistics) and extremes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn quartiles(values: &[f64]) -> Distribution {
    if values.is_empty() {
        return Distribution::default();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Distribution { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub utterances: usize,
    pub cer: f64,
    pub distance: usize,
    pub ref_chars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub cer: f64,
    pub distance: usize,
    pub ref_chars: usize,
    pub excluded: usize,
    pub boundaries: LengthGroups,
    pub groups: Vec<GroupReport>,
    pub edit_distance: Distribution,
    pub rtf: Option<f64>,
}

/// One scored utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored<'a> {
    pub reference: &'a str,
    pub hypothesis: &'a str,
    pub audio_seconds: f64,
}

pub fn evaluate(items: &[Scored<'_>], boundaries: LengthGroups, rtf: Option<f64>) -> EvalReport {
    let mut total = CerStats::default();
    let mut groups = [CerStats::default(), CerStats::default(), CerStats::default()];
    let mut distances = Vec::new();
    for it in items {
        let r = normalize_text(it.reference);
        if r.is_empty() {
            total.excluded += 1;
            continue;
        }
        let d = levenshtein(&r, &normalize_text(it.hypothesis));
        let n = r.chars().count();
        total.add(d, n);
        groups[boundaries.group(it.audio_seconds)].add(d, n);
        distances.push(d as f64);
    }
    EvalReport {
        utterances: total.utterances,
        cer: total.cer(),
        distance: total.distance,
        ref_chars: total.ref_chars,
        excluded: total.excluded,
        boundaries,
        groups: groups
            .iter()
            .zip(LengthGroups::NAMES)
            .map(|(g, name)| GroupReport {
                name: name.into(),
                utterances: g.utterances,
                cer: g.cer(),
                distance: g.distance,
                ref_chars: g.ref_chars,
            })
            .collect(),
        edit_distance: quartiles(&distances),
        rtf,
    }
}
