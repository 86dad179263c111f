//! Audio ingestion and 80-dim log-mel filterbank features.
//!
//! 25 ms Hann window, 10 ms hop, 512-point FFT, HTK mel scale over 0-8000 Hz,
//! natural log with a 1e-10 floor, then per-utterance mean/variance
//! normalization of every feature.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;
pub const HOP_SECONDS: f64 = 0.010;
pub const WINDOW_SECONDS: f64 = 0.025;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate { got: sample_rate });
        }
        if samples.is_empty() {
            return Err(Error::AudioFormat("no samples".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::AudioFormat(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16 kHz mono 16-bit PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::AudioFormat(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate { got: spec.sample_rate });
    }
    if spec.channels != 1 {
        return Err(Error::AudioFormat(format!(
            "expected mono, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::AudioFormat(format!(
            "expected 16-bit PCM, got {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::AudioFormat(e.to_string()))?;
    AudioBuffer::new(samples, SAMPLE_RATE)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::AudioFormat(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Number of feature frames produced for `samples` input samples.
pub fn frame_count(samples: usize) -> Option<usize> {
    (samples >= WINDOW_SAMPLES).then(|| 1 + (samples - WINDOW_SAMPLES) / HOP_SAMPLES)
}

#[derive(Debug)]
pub struct FeatureMatrix {
    /// `[T, 80]`.
    pub frames: Tensor,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over the `N_FFT/2 + 1` power bins, `[80, 257]`.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let n_bins = N_FFT / 2 + 1;
    let max_mel = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(max_mel * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f > lo && f <= center {
                        (f - lo) / (center - lo)
                    } else if f > center && f < hi {
                        (hi - f) / (hi - center)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Non-zero span of each filter: first bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..WINDOW_SAMPLES)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos())
            .collect();
        LogMelExtractor {
            fft,
            window,
            filters: mel_filterbank()
                .into_iter()
                .map(|row| {
                    let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                    let last = row.iter().rposition(|&w| w != 0.0).map_or(first, |l| l + 1);
                    (first, row[first..last].to_vec())
                })
                .collect(),
        }
    }

    /// Log-mel energies before normalization, `[T, 80]`.
    pub fn log_mel_raw(&self, audio: &AudioBuffer) -> Result<Tensor> {
        let samples = audio.samples();
        let t = frame_count(samples.len()).ok_or(Error::AudioTooShort {
            samples: samples.len(),
            min: WINDOW_SAMPLES,
        })?;
        let mut out = Tensor::zeros(&[t, N_MELS]);
        let od = out.data_mut();
        let mut buf = vec![Complex::new(0.0f64, 0.0); N_FFT];
        let mut power = vec![0.0f64; N_FFT / 2 + 1];
        for f in 0..t {
            let start = f * HOP_SAMPLES;
            for (i, b) in buf.iter_mut().enumerate() {
                let re = if i < WINDOW_SAMPLES {
                    samples[start + i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *b = Complex::new(re, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, (first, filt)) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                od[f * N_MELS + m] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<FeatureMatrix> {
        let raw = self.log_mel_raw(audio)?;
        Ok(FeatureMatrix {
            frames: normalize_per_feature(raw),
            hop_seconds: HOP_SECONDS,
            window_seconds: WINDOW_SECONDS,
        })
    }
}

pub fn log_mel(audio: &AudioBuffer) -> Result<FeatureMatrix> {
    LogMelExtractor::new().log_mel(audio)
}

/// Per-column `(x - mean) / (std + 1e-5)` over all frames.
pub fn normalize_per_feature(mut feats: Tensor) -> Tensor {
    let (t, d) = (feats.shape()[0], feats.shape()[1]);
    let data = feats.data_mut();
    // Row-major passes; each column still accumulates in frame order.
    let mut mean = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let denom: Vec<f64> = var.iter().map(|s| (s / t as f64).sqrt() + NORM_EPS).collect();
    for row in data.chunks_exact_mut(d) {
        for ((v, m), den) in row.iter_mut().zip(&mean).zip(&denom) {
            *v = ((*v as f64 - m) / den) as f32;
        }
    }
    feats
}

/// Deterministic noise-plus-tones test signal of `round(duration_s * 16000)`
/// samples, bounded well inside [-1, 1].
pub fn synth_audio(duration_s: f64, seed: u64) -> Result<AudioBuffer> {
    if duration_s <= 0.0 || !duration_s.is_finite() {
        return Err(Error::Config(format!("duration must be positive, got {duration_s}")));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(100.0..4000.0), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let sr = SAMPLE_RATE as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            // Slow 0.5 Hz envelope keeps the spectrum from being stationary.
            let env = 0.6 + 0.4 * (std::f64::consts::TAU * 0.5 * t).sin();
            let tone: f64 = tones
                .iter()
                .map(|(f, ph)| (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            let noise: f64 = rng.gen_range(-1.0..1.0);
            (0.2 * env * tone + 0.1 * noise) as f32
        })
        .collect();
    AudioBuffer::new(samples, SAMPLE_RATE)
}
