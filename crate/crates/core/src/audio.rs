//! Mono PCM waveforms, 16-bit WAV I/O and harmonic test-signal synthesis.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::num::Real;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Lowest and highest fundamental accepted by the synthesizer, in Hz.
pub const MIN_SYNTH_F0: f64 = 50.0;
pub const MAX_SYNTH_F0: f64 = 500.0;

const PEAK_LEVEL: f64 = 0.9;
const ENVELOPE_FLOOR: f64 = 0.02;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("f0 {0} Hz outside [50, 500]")]
    InvalidF0(f64),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> Waveform<T> {
    /// Builds a waveform, rejecting non-finite or out-of-range samples.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > T::one()) {
            return Err(AudioError::InvalidWaveform(format!(
                "sample {i} is {} (must be finite and within [-1, 1])",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Builds a waveform, clamping samples into `[-1, 1]` and zeroing non-finite ones.
    pub fn from_clipped(samples: Vec<T>, sample_rate: u32) -> Result<Self, AudioError> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.max(-T::one()).min(T::one()) } else { T::zero() })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn silence(num_samples: usize, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![T::zero(); num_samples], sample_rate)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    /// Converts the sample type, e.g. `f32` to `f64`.
    pub fn cast<U: Real>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|&s| U::lit(s.to_f64_lossy())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a 16-bit PCM mono RIFF/WAVE file.
pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<Waveform<T>, AudioError> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

/// Writes a 16-bit PCM mono RIFF/WAVE file, clipping to `[-1, 1]` before quantization.
pub fn write_wav<T: Real>(w: &Waveform<T>, path: impl AsRef<Path>) -> Result<(), AudioError> {
    fs::write(path, encode_wav(w))?;
    Ok(())
}

fn quantize<T: Real>(s: T) -> i16 {
    let x = s.to_f64_lossy().clamp(-1.0, 1.0) * 32768.0;
    x.round().clamp(-32768.0, 32767.0) as i16
}

pub fn encode_wav<T: Real>(w: &Waveform<T>) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav<T: Real>(bytes: &[u8]) -> Result<Waveform<T>, AudioError> {
    let malformed = |m: &str| AudioError::MalformedHeader(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body.checked_add(size).ok_or_else(|| malformed("chunk size overflow"))?;
        match id {
            b"fmt " => {
                if size < 16 || end > bytes.len() {
                    return Err(malformed("truncated fmt chunk"));
                }
                format = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    format.ok_or_else(|| malformed("data chunk before fmt chunk"))?;
                if tag != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!("format tag {tag} (only PCM)")));
                }
                if channels != 1 {
                    return Err(AudioError::UnsupportedEncoding(format!("{channels} channels (only mono)")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedEncoding(format!("{bits} bits per sample (only 16)")));
                }
                if rate == 0 {
                    return Err(malformed("zero sample rate"));
                }
                let end = end.min(bytes.len());
                let scale = T::lit(1.0 / 32768.0);
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| T::lit(i16::from_le_bytes([c[0], c[1]]) as f64) * scale)
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(malformed("no data chunk"))
}

/// A resonance in the synthetic spectral envelope: centre frequency and linear gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormantPeak {
    pub hz: f64,
    pub gain: f64,
}

impl FormantPeak {
    pub fn new(hz: f64, gain: f64) -> Self {
        Self { hz, gain }
    }

    fn bandwidth(&self) -> f64 {
        80.0 + 0.08 * self.hz
    }
}

/// Amplitude of the synthetic envelope at `hz`: flat without peaks, otherwise a floor
/// plus one Gaussian bump per peak (a parabola in the log domain around each peak).
pub fn envelope_at(peaks: &[FormantPeak], hz: f64) -> f64 {
    if peaks.is_empty() {
        return 1.0;
    }
    ENVELOPE_FLOOR
        + peaks
            .iter()
            .map(|p| {
                let d = (hz - p.hz) / p.bandwidth();
                p.gain * (-0.5 * d * d).exp()
            })
            .sum::<f64>()
}

/// One piece of a piecewise-stationary harmonic signal; `f0 = None` is silence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSegment {
    pub f0: Option<f64>,
    pub formants: Vec<FormantPeak>,
    pub duration: f64,
}

/// Sum of harmonics of `f0` below Nyquist, shaped by the formant envelope and
/// peak-normalized to 0.9.
pub fn synth_harmonic<T: Real>(
    f0: f64,
    formant_peaks: &[FormantPeak],
    duration: f64,
    sample_rate: u32,
) -> Result<Waveform<T>, AudioError> {
    synth_segments(
        &[SynthSegment { f0: Some(f0), formants: formant_peaks.to_vec(), duration }],
        sample_rate,
    )
}

/// Concatenates harmonic segments with a phase-continuous fundamental.
pub fn synth_segments<T: Real>(segments: &[SynthSegment], sample_rate: u32) -> Result<Waveform<T>, AudioError> {
    if sample_rate == 0 {
        return Err(AudioError::InvalidWaveform("sample rate must be positive".into()));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut out: Vec<f64> = Vec::new();
    let mut phase = 0.0f64;
    let mut consumed = 0.0f64;
    for seg in segments {
        if !(seg.duration > 0.0) {
            return Err(AudioError::InvalidWaveform(format!("segment duration {} must be positive", seg.duration)));
        }
        // Segment boundaries are placed on the cumulative timeline to avoid drift.
        let start = (consumed * sr).round() as usize;
        consumed += seg.duration;
        let n = (consumed * sr).round() as usize - start;
        match seg.f0 {
            None => out.extend(std::iter::repeat_n(0.0, n)),
            Some(f0) => {
                if !(MIN_SYNTH_F0..=MAX_SYNTH_F0).contains(&f0) {
                    return Err(AudioError::InvalidF0(f0));
                }
                let count = ((nyquist - 1e-9) / f0).floor() as usize;
                let amps: Vec<f64> = (1..=count).map(|k| envelope_at(&seg.formants, k as f64 * f0)).collect();
                let step = std::f64::consts::TAU * f0 / sr;
                for _ in 0..n {
                    let x: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).cos()).sum();
                    out.push(x);
                    phase = (phase + step) % std::f64::consts::TAU;
                }
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { PEAK_LEVEL / peak } else { 0.0 };
    Waveform::new(out.into_iter().map(|s| T::lit(s * gain)).collect(), sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_round_trips() {
        let w = Waveform::<f64>::silence(16_000, 16_000).unwrap();
        let bytes = encode_wav(&w);
        assert!(bytes[44..].iter().all(|&b| b == 0));
        let back: Waveform<f64> = decode_wav(&bytes).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn full_scale_clips_to_max_code() {
        let w = Waveform::new(vec![1.0f64, -1.0], 16_000).unwrap();
        let bytes = encode_wav(&w);
        assert_eq!(i16::from_le_bytes([bytes[44], bytes[45]]), 32767);
        assert_eq!(i16::from_le_bytes([bytes[46], bytes[47]]), -32768);
    }

    #[test]
    fn max_code_normalizes_below_one() {
        let mut bytes = encode_wav(&Waveform::new(vec![0.0f64], 8_000).unwrap());
        bytes[44..46].copy_from_slice(&32767i16.to_le_bytes());
        let w: Waveform<f64> = decode_wav(&bytes).unwrap();
        assert_eq!(w.samples()[0], 32767.0 / 32768.0);
        assert_eq!(w.sample_rate(), 8_000);
    }

    #[test]
    fn rejects_stereo_and_non_pcm() {
        let mut bytes = encode_wav(&Waveform::new(vec![0.0f64; 4], 16_000).unwrap());
        bytes[22] = 2;
        assert!(matches!(decode_wav::<f64>(&bytes), Err(AudioError::UnsupportedEncoding(_))));
        bytes[22] = 1;
        bytes[20] = 3;
        assert!(matches!(decode_wav::<f64>(&bytes), Err(AudioError::UnsupportedEncoding(_))));
        assert!(matches!(decode_wav::<f64>(b"RIFX....WAVE"), Err(AudioError::MalformedHeader(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let bytes = encode_wav(&Waveform::new(vec![0.5f64, -0.25], 16_000).unwrap());
        let mut with_list = bytes[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&bytes[36..]);
        let w: Waveform<f64> = decode_wav(&with_list).unwrap();
        assert_eq!(w.samples(), &[0.5, -0.25]);
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(Waveform::new(vec![1.5f64], 16_000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0f64], 0).is_err());
        let w = Waveform::from_clipped(vec![1.5f64, f64::NAN, -3.0], 16_000).unwrap();
        assert_eq!(w.samples(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn synth_length_and_peak() {
        let w: Waveform<f64> = synth_harmonic(120.0, &[], 1.0, 16_000).unwrap();
        assert_eq!(w.len(), 16_000);
        let peak = w.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
        assert!(matches!(synth_harmonic::<f64>(40.0, &[], 1.0, 16_000), Err(AudioError::InvalidF0(_))));
        assert!(matches!(synth_harmonic::<f64>(501.0, &[], 1.0, 16_000), Err(AudioError::InvalidF0(_))));
    }

    #[test]
    fn synth_is_periodic() {
        // 160 Hz at 16 kHz has an integer period of 100 samples.
        let w: Waveform<f64> = synth_harmonic(160.0, &[FormantPeak::new(700.0, 1.0)], 0.2, 16_000).unwrap();
        let s = w.samples();
        for n in 0..(s.len() - 100) {
            assert!((s[n] - s[n + 100]).abs() < 1e-9);
        }
    }

    #[test]
    fn envelope_peaks_at_formant() {
        let peaks = [FormantPeak::new(700.0, 1.0), FormantPeak::new(1200.0, 0.5)];
        let best = (0..4000).map(|f| f as f64).fold((0.0, 0.0), |acc, f| {
            let a = envelope_at(&peaks, f);
            if a > acc.1 { (f, a) } else { acc }
        });
        // The 1200 Hz bump's tail pulls the maximum slightly upward.
        assert!((best.0 - 700.0).abs() <= 10.0, "{}", best.0);
    }
}
