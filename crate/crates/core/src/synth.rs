//! Tone-coded synthetic speech.
//!
//! Each token becomes a fixed-length sinusoid at a token-specific frequency,
//! separated by short silences, with seeded Gaussian noise on top.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Mono PCM samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !(s.abs() <= 1.0)) {
            return Err(Error::InvalidInput("waveform samples must lie in [-1, 1]".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthProfile {
    pub sample_rate: u32,
    pub base_hz: f64,
    pub step_hz: f64,
    /// Per-token frequency replacements.
    pub overrides: BTreeMap<u32, f64>,
    pub tone_ms: u32,
    pub gap_ms: u32,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile {
            sample_rate: 16_000,
            base_hz: 300.0,
            step_hz: 35.0,
            overrides: BTreeMap::new(),
            tone_ms: 80,
            gap_ms: 10,
            amplitude: 0.3,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SynthProfile {
    pub fn frequency(&self, token: u32) -> f64 {
        self.overrides.get(&token).copied().unwrap_or(self.base_hz + self.step_hz * token as f64)
    }

    /// Cyclically permutes the frequencies of `tokens`: each one takes the
    /// frequency of its successor in the list.
    pub fn permute(&mut self, tokens: &[u32]) {
        let freqs: Vec<f64> = tokens.iter().map(|&t| self.frequency(t)).collect();
        for (k, &t) in tokens.iter().enumerate() {
            self.overrides.insert(t, freqs[(k + 1) % freqs.len()]);
        }
    }

    fn samples_for(&self, ms: u32) -> Result<usize> {
        let n = self.sample_rate as u64 * ms as u64;
        if n % 1000 != 0 {
            return Err(Error::InvalidConfig(format!(
                "{ms} ms at {} Hz is not a whole number of samples",
                self.sample_rate
            )));
        }
        Ok((n / 1000) as usize)
    }

    pub fn tone_samples(&self) -> Result<usize> {
        self.samples_for(self.tone_ms)
    }

    pub fn gap_samples(&self) -> Result<usize> {
        self.samples_for(self.gap_ms)
    }

    /// Sample count of an `n`-token utterance.
    pub fn utterance_len(&self, n: usize) -> Result<usize> {
        Ok(n * self.tone_samples()? + n.saturating_sub(1) * self.gap_samples()?)
    }
}

/// Renders `tokens` as a tone sequence. Deterministic in `(tokens, profile)`.
pub fn synth_utterance(tokens: &[u32], profile: &SynthProfile) -> Result<Waveform> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot synthesise an empty token sequence".into()));
    }
    let tone = profile.tone_samples()?;
    let gap = profile.gap_samples()?;
    let nyquist = profile.sample_rate as f64 / 2.0;
    let rate = profile.sample_rate as f64;
    let noise = Normal::new(0.0, profile.noise_std)
        .map_err(|_| Error::InvalidConfig("noise std must be finite and non-negative".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut samples = Vec::with_capacity(profile.utterance_len(tokens.len())?);
    for (i, &t) in tokens.iter().enumerate() {
        let f = profile.frequency(t);
        if !(f > 0.0 && f < nyquist) {
            return Err(Error::InvalidInput(format!("token {t} frequency {f} Hz is outside (0, {nyquist})")));
        }
        if i > 0 {
            samples.extend(core::iter::repeat_n(0.0f64, gap));
        }
        let w = 2.0 * core::f64::consts::PI * f / rate;
        samples.extend((0..tone).map(|n| profile.amplitude * libm::sin(w * n as f64)));
    }
    let out = samples
        .into_iter()
        .map(|s| {
            let v = if profile.noise_std > 0.0 { s + noise.sample(&mut rng) } else { s };
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Waveform::new(out, profile.sample_rate)
}
