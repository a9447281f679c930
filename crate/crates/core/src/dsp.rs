//! Pitch tracking, voiced-median statistics and log-mel features.

use std::io::{self, Read, Write};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio::Waveform;
use crate::num::Real;

pub const NUM_MEL: usize = 80;
pub const FEATURE_MAGIC: &[u8; 4] = b"VXFT";

const LOG_FLOOR: f64 = 1e-10;
const MEL_LOW_HZ: f64 = 20.0;
const CONSTANT_COLUMN_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("waveform of {samples} samples is shorter than one {frame_len}-sample frame")]
    TooShort { samples: usize, frame_len: usize },
    #[error("invalid frame geometry: {0}")]
    InvalidFrame(String),
    #[error("no voiced frames")]
    AllUnvoiced,
    #[error("malformed feature file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Autocorrelation pitch-tracker settings. Frequencies are in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchConfig {
    pub min_hz: f64,
    pub max_hz: f64,
    /// Frames whose best normalized autocorrelation falls below this are unvoiced.
    pub voicing_threshold: f64,
    /// Frames quieter than this RMS are unvoiced.
    pub rms_gate: f64,
    /// Cutoff of the low-pass applied before autocorrelation. High partials decorrelate
    /// at integer lags when the period is fractional, which invites octave errors.
    pub lowpass_hz: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { min_hz: 50.0, max_hz: 500.0, voicing_threshold: 0.3, rms_gate: 1e-4, lowpass_hz: 1000.0 }
    }
}

/// Zero-phase Hamming-windowed sinc low-pass.
fn lowpass(x: &[f64], sample_rate: f64, cutoff_hz: f64) -> Vec<f64> {
    let fc = cutoff_hz / sample_rate;
    if fc >= 0.5 {
        return x.to_vec();
    }
    let half = (3.0 / fc).ceil() as isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|k| {
            let sinc = if k == 0 { 2.0 * fc } else { (std::f64::consts::TAU * fc * k as f64).sin() / (std::f64::consts::PI * k as f64) };
            let w = 0.54 + 0.46 * (std::f64::consts::PI * k as f64 / half as f64).cos();
            sinc * w
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let lo = (i - half).max(0);
            let hi = (i + half).min(n - 1);
            (lo..=hi).map(|j| x[j as usize] * taps[(j - i + half) as usize]).sum::<f64>() / gain
        })
        .collect()
}

impl PitchConfig {
    /// Smallest analysis window covering two periods of `min_hz`.
    pub fn min_frame_len(&self, sample_rate: u32) -> usize {
        (2.0 * sample_rate as f64 / self.min_hz).ceil() as usize
    }
}

/// Per-frame fundamental frequency; `0.0` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour<T> {
    pub frame_hz: Vec<T>,
    pub hop: usize,
    pub frame_len: usize,
}

impl<T: Real> F0Contour<T> {
    pub fn voiced(&self) -> impl Iterator<Item = T> + '_ {
        self.frame_hz.iter().copied().filter(|f| *f > T::zero())
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced().count()
    }

    /// Centre sample of frame `i`.
    pub fn frame_center(&self, i: usize) -> usize {
        i * self.hop + self.frame_len / 2
    }
}

/// Number of whole frames of `frame_len` at `hop` in `num_samples`.
pub fn frame_count(num_samples: usize, frame_len: usize, hop: usize) -> usize {
    if num_samples < frame_len {
        0
    } else {
        (num_samples - frame_len) / hop + 1
    }
}

pub fn estimate_f0_contour<T: Real>(w: &Waveform<T>, frame_len: usize, hop: usize) -> Result<F0Contour<T>, DspError> {
    estimate_f0_contour_with(w, frame_len, hop, &PitchConfig::default())
}

/// Normalized-autocorrelation pitch tracker with parabolic peak refinement.
pub fn estimate_f0_contour_with<T: Real>(
    w: &Waveform<T>,
    frame_len: usize,
    hop: usize,
    cfg: &PitchConfig,
) -> Result<F0Contour<T>, DspError> {
    let sr = w.sample_rate();
    if hop == 0 {
        return Err(DspError::InvalidFrame("hop must be positive".into()));
    }
    if frame_len < cfg.min_frame_len(sr) {
        return Err(DspError::InvalidFrame(format!(
            "frame_len {frame_len} below two periods of {} Hz ({})",
            cfg.min_hz,
            cfg.min_frame_len(sr)
        )));
    }
    let raw: Vec<f64> = w.samples().iter().map(|s| s.to_f64_lossy()).collect();
    let samples = lowpass(&raw, sr as f64, cfg.lowpass_hz);
    let frames = frame_count(samples.len(), frame_len, hop);
    if frames == 0 {
        return Err(DspError::TooShort { samples: samples.len(), frame_len });
    }
    let min_lag = ((sr as f64 / cfg.max_hz).floor() as usize).max(1);
    let max_lag = ((sr as f64 / cfg.min_hz).ceil() as usize).min(frame_len - 2);

    let fft_len = (2 * frame_len).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut frame = vec![0.0f64; frame_len];
    let mut energy_prefix = vec![0.0f64; frame_len + 1];
    let mut nacf = vec![0.0f64; max_lag + 2];

    let mut frame_hz = Vec::with_capacity(frames);
    for i in 0..frames {
        frame.copy_from_slice(&samples[i * hop..i * hop + frame_len]);
        let mean_sq = frame.iter().map(|x| x * x).sum::<f64>() / frame_len as f64;
        if mean_sq.sqrt() < cfg.rms_gate {
            frame_hz.push(T::zero());
            continue;
        }
        for (n, x) in frame.iter().enumerate() {
            energy_prefix[n + 1] = energy_prefix[n] + x * x;
        }
        for (b, x) in buf.iter_mut().zip(frame.iter().chain(std::iter::repeat(&0.0))) {
            *b = Complex::new(*x, 0.0);
        }
        forward.process(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex::new(b.norm_sqr(), 0.0);
        }
        inverse.process(&mut buf);
        let total = energy_prefix[frame_len];
        for lag in min_lag.saturating_sub(1)..=(max_lag + 1).min(frame_len - 1) {
            let head = energy_prefix[frame_len - lag];
            let tail = total - energy_prefix[lag];
            let denom = (head * tail).sqrt();
            nacf[lag] = if denom > 0.0 { buf[lag].re / fft_len as f64 / denom } else { 0.0 };
        }
        frame_hz.push(T::lit(pick_pitch(&nacf, min_lag, max_lag, sr as f64, cfg)));
    }
    Ok(F0Contour { frame_hz, hop, frame_len })
}

/// Chooses the first local maximum within 90% of the best normalized autocorrelation,
/// which avoids locking onto multiples of the true period.
fn pick_pitch(nacf: &[f64], min_lag: usize, max_lag: usize, sr: f64, cfg: &PitchConfig) -> f64 {
    let is_peak = |l: usize| nacf[l] >= nacf[l - 1] && nacf[l] >= nacf[l + 1] && nacf[l] > 0.0;
    let lo = min_lag.max(1);
    let best = (lo..=max_lag).filter(|&l| is_peak(l)).map(|l| nacf[l]).fold(f64::NEG_INFINITY, f64::max);
    if !(best >= cfg.voicing_threshold) {
        return 0.0;
    }
    let Some(lag) = (lo..=max_lag).find(|&l| is_peak(l) && nacf[l] >= 0.9 * best) else {
        return 0.0;
    };
    let (a, b, c) = (nacf[lag - 1], nacf[lag], nacf[lag + 1]);
    let curvature = a - 2.0 * b + c;
    let offset = if curvature.abs() > 1e-12 { (0.5 * (a - c) / curvature).clamp(-0.5, 0.5) } else { 0.0 };
    let hz = sr / (lag as f64 + offset);
    if hz < cfg.min_hz || hz > cfg.max_hz {
        0.0
    } else {
        hz
    }
}

/// Median of the voiced frames; the mean of the two central values for even counts.
pub fn voiced_median<T: Real>(c: &F0Contour<T>) -> Result<T, DspError> {
    let mut voiced: Vec<T> = c.voiced().collect();
    if voiced.is_empty() {
        return Err(DspError::AllUnvoiced);
    }
    voiced.sort_by(|a, b| a.partial_cmp(b).expect("finite f0"));
    let n = voiced.len();
    Ok(if n % 2 == 1 { voiced[n / 2] } else { (voiced[n / 2 - 1] + voiced[n / 2]) / T::lit(2.0) })
}

/// Convenience: voiced median f0 with default frame geometry (40 ms window, 10 ms hop).
pub fn median_f0<T: Real>(w: &Waveform<T>) -> Result<T, DspError> {
    let sr = w.sample_rate() as usize;
    let frame_len = PitchConfig::default().min_frame_len(w.sample_rate());
    let contour = estimate_f0_contour(w, frame_len, (sr / 100).max(1))?;
    voiced_median(&contour)
}

/// `T × 80` log-mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    data: Vec<T>,
    rows: usize,
    pub normalized: bool,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn from_rows(data: Vec<T>, rows: usize, normalized: bool) -> Result<Self, DspError> {
        if data.len() != rows * NUM_MEL {
            return Err(DspError::Malformed(format!("{} values for {rows} rows of {NUM_MEL}", data.len())));
        }
        Ok(Self { data, rows, normalized })
    }

    pub fn num_frames(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * NUM_MEL..(i + 1) * NUM_MEL]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn column_stats(&self, col: usize) -> (f64, f64) {
        let n = self.rows as f64;
        let mean = (0..self.rows).map(|r| self.data[r * NUM_MEL + col].to_f64_lossy()).sum::<f64>() / n;
        let var = (0..self.rows)
            .map(|r| (self.data[r * NUM_MEL + col].to_f64_lossy() - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var)
    }

    /// Per-utterance cepstral mean and variance normalization. Constant columns become zero.
    pub fn cmvn(&self) -> Self {
        let mut data = self.data.clone();
        for col in 0..NUM_MEL {
            let (mean, var) = self.column_stats(col);
            let std = var.sqrt();
            for r in 0..self.rows {
                let v = &mut data[r * NUM_MEL + col];
                *v = if std > CONSTANT_COLUMN_STD { T::lit((v.to_f64_lossy() - mean) / std) } else { T::zero() };
            }
        }
        Self { data, rows: self.rows, normalized: true }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), DspError> {
        out.write_all(FEATURE_MAGIC)?;
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(NUM_MEL as u32).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary layout written by [`FeatureMatrix::write_to`]. The normalization
    /// flag is not stored and comes back as `false`.
    pub fn read_from(mut input: impl Read) -> Result<Self, DspError> {
        let mut head = [0u8; 12];
        input.read_exact(&mut head)?;
        if &head[0..4] != FEATURE_MAGIC {
            return Err(DspError::Malformed("bad magic".into()));
        }
        let rows = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if cols != NUM_MEL {
            return Err(DspError::Malformed(format!("{cols} columns, expected {NUM_MEL}")));
        }
        let mut raw = vec![0u8; rows * cols * 4];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        Self::from_rows(data, rows, false)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the `fft_len / 2 + 1` power-spectrum bins.
pub fn mel_filterbank(sample_rate: u32, fft_len: usize) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..NUM_MEL + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / fft_len as f64;
    (0..NUM_MEL)
        .map(|m| {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=fft_len / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f <= centre {
                        (f - left) / (centre - left)
                    } else if f > centre && f < right {
                        (right - f) / (right - centre)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Frame geometry of the log-mel front end: 25 ms windows every 10 ms.
pub fn logmel_geometry(sample_rate: u32) -> (usize, usize) {
    let sr = sample_rate as f64;
    ((0.025 * sr).round() as usize, (0.010 * sr).round() as usize)
}

/// 80-band log-mel energies (Hann window, power spectrum, natural log floored at 1e-10),
/// optionally followed by per-utterance CMVN.
pub fn logmel_features<T: Real>(w: &Waveform<T>, apply_cmvn: bool) -> Result<FeatureMatrix<T>, DspError> {
    let (win, hop) = logmel_geometry(w.sample_rate());
    let samples = w.samples();
    let rows = frame_count(samples.len(), win, hop);
    if rows == 0 {
        return Err(DspError::TooShort { samples: samples.len(), frame_len: win });
    }
    let fft_len = win.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let window: Vec<f64> =
        (0..win).map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / win as f64).cos()).collect();
    let bank = mel_filterbank(w.sample_rate(), fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut power = vec![0.0f64; fft_len / 2 + 1];
    let mut data = Vec::with_capacity(rows * NUM_MEL);
    for r in 0..rows {
        let frame = &samples[r * hop..r * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win { Complex::new(frame[i].to_f64_lossy() * window[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for filter in &bank {
            let e: f64 = filter.iter().map(|&(k, wt)| power[k] * wt).sum();
            data.push(T::lit(e.max(LOG_FLOOR).ln()));
        }
    }
    let m = FeatureMatrix { data, rows, normalized: false };
    Ok(if apply_cmvn { m.cmvn() } else { m })
}

/// Estimates the frequency of the strongest spectral-envelope peak between `lo_hz` and
/// `hi_hz` of a harmonic signal: harmonic amplitudes are read off a long-window spectrum
/// and a parabola is fitted through the log amplitudes of the loudest harmonic and its
/// neighbours.
pub fn envelope_peak_hz<T: Real>(w: &Waveform<T>, lo_hz: f64, hi_hz: f64) -> Result<f64, DspError> {
    let f0 = median_f0(w)?.to_f64_lossy();
    let sr = w.sample_rate() as f64;
    let x: Vec<f64> = w.samples().iter().map(|s| s.to_f64_lossy()).collect();
    let n = x.len();
    let fft_len = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..fft_len)
        .map(|i| {
            let v = if i < n { x[i] * (0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()) } else { 0.0 };
            Complex::new(v, 0.0)
        })
        .collect();
    FftPlanner::<f64>::new().plan_fft_forward(fft_len).process(&mut buf);
    let bin_hz = sr / fft_len as f64;
    let harmonic_amp = |h: usize| -> f64 {
        let centre = h as f64 * f0;
        let a = ((centre - f0 / 4.0) / bin_hz).floor().max(0.0) as usize;
        let b = (((centre + f0 / 4.0) / bin_hz).ceil() as usize).min(fft_len / 2);
        (a..=b).map(|k| buf[k].norm()).fold(0.0, f64::max)
    };
    let count = ((sr / 2.0) / f0).floor() as usize;
    let amps: Vec<f64> = (1..=count).map(harmonic_amp).collect();
    let candidates = (1..count.saturating_sub(1)).filter(|&i| {
        let hz = (i + 1) as f64 * f0;
        hz >= lo_hz && hz <= hi_hz
    });
    let Some(i) = candidates.max_by(|&a, &b| amps[a].total_cmp(&amps[b])) else {
        return Err(DspError::InvalidFrame(format!("no harmonic between {lo_hz} and {hi_hz} Hz")));
    };
    let (a, b, c) = (amps[i - 1].max(1e-300).ln(), amps[i].max(1e-300).ln(), amps[i + 1].max(1e-300).ln());
    let curvature = a - 2.0 * b + c;
    let offset = if curvature.abs() > 1e-12 { (0.5 * (a - c) / curvature).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(((i + 1) as f64 + offset) * f0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_harmonic, FormantPeak};

    fn sine(hz: f64, secs: f64, sr: u32) -> Waveform<f64> {
        let n = (secs * sr as f64) as usize;
        let s = (0..n).map(|i| 0.5 * (std::f64::consts::TAU * hz * i as f64 / sr as f64).sin()).collect();
        Waveform::new(s, sr).unwrap()
    }

    #[test]
    fn bright_voices_keep_their_octave() {
        // Fractional periods with strong partials near Nyquist.
        for f0 in [97.3, 141.1, 163.7, 187.9] {
            let peaks = [FormantPeak::new(650.0, 1.0), FormantPeak::new(4400.0, 0.5), FormantPeak::new(7000.0, 0.5)];
            let w: Waveform<f64> = synth_harmonic(f0, &peaks, 0.3, 16_000).unwrap();
            let c = estimate_f0_contour(&w, 640, 160).unwrap();
            assert!(c.voiced().all(|hz| (hz / f0 - 1.0).abs() < 0.02), "{f0}: {:?}", c.frame_hz);
        }
    }

    #[test]
    fn lowpass_keeps_low_and_removes_high() {
        let sr = 16_000;
        let low = sine(300.0, 0.2, sr);
        let high = sine(6000.0, 0.2, sr);
        let rms = |x: &[f64]| (x[400..2800].iter().map(|v| v * v).sum::<f64>() / 2400.0).sqrt();
        let l = lowpass(low.samples(), sr as f64, 1000.0);
        let h = lowpass(high.samples(), sr as f64, 1000.0);
        assert!((rms(&l) / rms(low.samples()) - 1.0).abs() < 0.01);
        assert!(rms(&h) / rms(high.samples()) < 1e-3);
    }

    #[test]
    fn pure_tone_pitch() {
        let c = estimate_f0_contour(&sine(200.0, 1.0, 16_000), 640, 160).unwrap();
        assert_eq!(c.frame_hz.len(), (16_000 - 640) / 160 + 1);
        assert!(c.voiced_count() == c.frame_hz.len());
        for f in c.voiced() {
            assert!((f - 200.0).abs() <= 2.0, "{f}");
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let w = Waveform::<f64>::silence(8_000, 16_000).unwrap();
        let c = estimate_f0_contour(&w, 640, 160).unwrap();
        assert_eq!(c.voiced_count(), 0);
        assert!(matches!(voiced_median(&c), Err(DspError::AllUnvoiced)));
    }

    #[test]
    fn harmonic_median() {
        let w: Waveform<f64> = synth_harmonic(120.0, &[], 1.0, 16_000).unwrap();
        let m = median_f0(&w).unwrap();
        assert!((m - 120.0).abs() <= 2.0, "{m}");
    }

    #[test]
    fn geometry_errors() {
        let w = sine(200.0, 0.01, 16_000);
        assert!(matches!(estimate_f0_contour(&w, 640, 160), Err(DspError::TooShort { .. })));
        assert!(matches!(estimate_f0_contour(&sine(200.0, 1.0, 16_000), 100, 160), Err(DspError::InvalidFrame(_))));
        assert!(matches!(estimate_f0_contour(&sine(200.0, 1.0, 16_000), 640, 0), Err(DspError::InvalidFrame(_))));
    }

    fn contour(v: &[f64]) -> F0Contour<f64> {
        F0Contour { frame_hz: v.to_vec(), hop: 160, frame_len: 640 }
    }

    #[test]
    fn median_examples() {
        assert_eq!(voiced_median(&contour(&[100.0, 110.0, 120.0, 0.0, 130.0, 140.0])).unwrap(), 120.0);
        assert_eq!(voiced_median(&contour(&[0.0, 0.0, 250.0])).unwrap(), 250.0);
        assert_eq!(voiced_median(&contour(&[100.0, 200.0])).unwrap(), 150.0);
    }

    #[test]
    fn logmel_shape_and_cmvn() {
        let w: Waveform<f64> = synth_harmonic(150.0, &[FormantPeak::new(700.0, 1.0)], 1.0, 16_000).unwrap();
        let raw = logmel_features(&w, false).unwrap();
        assert_eq!(raw.num_frames(), 98);
        assert_eq!(raw.row(0).len(), NUM_MEL);
        assert!(logmel_features(&Waveform::<f64>::silence(399, 16_000).unwrap(), false).is_err());
    }

    #[test]
    fn mel_filters_are_non_empty() {
        for f in mel_filterbank(16_000, 512) {
            assert!(!f.is_empty());
        }
    }

    #[test]
    fn cmvn_constant_columns_become_zero() {
        let m = FeatureMatrix::from_rows(vec![3.0f64; 4 * NUM_MEL], 4, false).unwrap().cmvn();
        assert!(m.as_slice().iter().all(|v| *v == 0.0));
        assert!(m.normalized);
    }

    #[test]
    fn feature_file_layout() {
        let m = FeatureMatrix::from_rows((0..2 * NUM_MEL).map(|i| i as f64 * 0.5).collect(), 2, false).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"VXFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 80);
        assert_eq!(bytes.len(), 12 + 2 * 80 * 4);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 0.5);
        let back = FeatureMatrix::<f64>::read_from(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert!(FeatureMatrix::<f64>::read_from(&b"VXFX\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn envelope_peak_single_formant() {
        let w: Waveform<f64> = synth_harmonic(120.0, &[FormantPeak::new(700.0, 1.0)], 1.0, 16_000).unwrap();
        let peak = envelope_peak_hz(&w, 200.0, 3000.0).unwrap();
        assert!((peak - 700.0).abs() <= 31.25, "{peak}");
    }
}
