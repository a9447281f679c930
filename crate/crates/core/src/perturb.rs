//! "Opposite" voice manipulation: move the speaker's median f0 into the other
//! gender's range and stretch the spectral envelope accordingly.
//!
//! Pitch is shifted with TD-PSOLA; the envelope is then warped in the STFT domain by
//! resampling a peak-interpolated log envelope along linear frequency.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::dsp::{self, DspError, F0Contour, PitchConfig};
use crate::num::Real;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("{name} = {value} outside [{lo}, {hi}]")]
    OutOfRangeFactor { name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("no voiced frames, cannot place pitch marks")]
    AllUnvoiced,
    #[error("source median must be positive, got {0}")]
    ZeroSourceMedian(f64),
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dsp(DspError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

impl From<DspError> for PerturbError {
    fn from(e: DspError) -> Self {
        match e {
            DspError::AllUnvoiced => PerturbError::AllUnvoiced,
            other => PerturbError::Dsp(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeakerGender {
    F,
    M,
}

impl SpeakerGender {
    pub fn opposite(self) -> Self {
        match self {
            SpeakerGender::F => SpeakerGender::M,
            SpeakerGender::M => SpeakerGender::F,
        }
    }

    /// Class index used by the discriminator (F = 0, M = 1).
    pub fn index(self) -> usize {
        match self {
            SpeakerGender::F => 0,
            SpeakerGender::M => 1,
        }
    }
}

impl fmt::Display for SpeakerGender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerGender::F => "F",
            SpeakerGender::M => "M",
        })
    }
}

impl FromStr for SpeakerGender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "F" | "f" => Ok(SpeakerGender::F),
            "M" | "m" => Ok(SpeakerGender::M),
            other => Err(format!("unknown gender {other:?} (expected F or M)")),
        }
    }
}

/// Mean and standard deviation of a target median-f0 distribution, in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchTarget {
    pub mean: f64,
    pub std: f64,
}

impl PitchTarget {
    /// The ±3σ interval that truncated draws are confined to.
    pub fn range(&self) -> (f64, f64) {
        (self.mean - 3.0 * self.std, self.mean + 3.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Probability of manipulating an utterance on each call.
    pub p: f64,
    pub feminine_target: PitchTarget,
    pub masculine_target: PitchTarget,
    /// Envelope stretch for M→F.
    pub formant_up: f64,
    /// Envelope stretch for F→M.
    pub formant_down: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            feminine_target: PitchTarget { mean: 250.0, std: 17.0 },
            masculine_target: PitchTarget { mean: 140.0, std: 20.0 },
            formant_up: 1.2,
            formant_down: 0.8,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn with_p(p: f64) -> Self {
        Self { p, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let bad = |m: String| Err(PerturbError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1]", self.p));
        }
        for (name, t) in [("feminine_target", self.feminine_target), ("masculine_target", self.masculine_target)] {
            if !(t.std > 0.0) || !(t.mean > 0.0) {
                return bad(format!("{name} needs positive mean and std"));
            }
        }
        if !(self.formant_up > 1.0 && self.formant_down < 1.0 && self.formant_down > 0.0) {
            return bad(format!(
                "need formant_up > 1 > formant_down > 0, got {} / {}",
                self.formant_up, self.formant_down
            ));
        }
        Ok(())
    }

    pub fn target(&self, gender: SpeakerGender) -> PitchTarget {
        match gender {
            SpeakerGender::F => self.feminine_target,
            SpeakerGender::M => self.masculine_target,
        }
    }

    /// Formant stretch when converting a `source` speaker to the opposite gender.
    pub fn formant_scale_from(&self, source: SpeakerGender) -> f64 {
        match source {
            SpeakerGender::M => self.formant_up,
            SpeakerGender::F => self.formant_down,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent random stream for one utterance in one epoch.
pub fn utterance_rng(seed: u64, utterance: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(splitmix64(utterance) ^ epoch.rotate_left(32)));
    rng
}

/// Draws a target median from the gender's normal distribution, redrawing outside ±3σ.
pub fn sample_target_median<R: Rng + ?Sized>(target_gender: SpeakerGender, cfg: &PerturbConfig, rng: &mut R) -> f64 {
    let t = cfg.target(target_gender);
    let normal = Normal::new(t.mean, t.std).expect("validated std");
    let (lo, hi) = t.range();
    loop {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

pub fn compute_alpha(source_median: f64, target_median: f64) -> Result<f64, PerturbError> {
    if !(source_median > 0.0) {
        return Err(PerturbError::ZeroSourceMedian(source_median));
    }
    Ok(target_median / source_median)
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), PerturbError> {
    if (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(PerturbError::OutOfRangeFactor { name, value, lo, hi })
    }
}

/// Analysis geometry shared by the manipulation and the median estimate.
fn analysis_contour<T: Real>(w: &Waveform<T>) -> Result<F0Contour<T>, PerturbError> {
    let frame_len = PitchConfig::default().min_frame_len(w.sample_rate());
    let hop = (w.sample_rate() as usize / 100).max(1);
    let c = dsp::estimate_f0_contour(w, frame_len, hop)?;
    if c.voiced_count() == 0 {
        return Err(PerturbError::AllUnvoiced);
    }
    Ok(c)
}

/// Scales the f0 contour by `alpha` and stretches the spectral envelope by
/// `formant_scale`. The output has the input's length.
pub fn pitch_formant_shift<T: Real>(w: &Waveform<T>, alpha: f64, formant_scale: f64) -> Result<Waveform<T>, PerturbError> {
    check_range("alpha", alpha, 0.25, 4.0)?;
    check_range("formant_scale", formant_scale, 0.5, 2.0)?;
    let contour = analysis_contour(w)?;
    let x: Vec<f64> = w.samples().iter().map(|s| s.to_f64_lossy()).collect();
    let sr = w.sample_rate() as f64;
    let mut y = if alpha == 1.0 { x } else { psola(&x, sr, &contour, alpha) };
    if formant_scale != 1.0 {
        // Envelope peaks are picked at the harmonic spacing of the shifted voice; a finer
        // spacing lets weak inter-harmonic components shape the envelope.
        let out_f0 = alpha * dsp::voiced_median(&contour)?.to_f64_lossy();
        y = warp_envelope(&y, sr, formant_scale, 0.6 * out_f0);
    }
    let peak = y.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        y.iter_mut().for_each(|s| *s *= 0.99 / peak);
    }
    Ok(Waveform::from_clipped(y.into_iter().map(T::lit).collect(), w.sample_rate())?)
}

/// Per-sample local period in samples (`None` in unvoiced regions), taken from the
/// frame whose hop-wide neighbourhood contains the sample.
fn local_periods<T: Real>(n: usize, sr: f64, c: &F0Contour<T>) -> Vec<Option<f64>> {
    let frames = c.frame_hz.len();
    (0..n)
        .map(|i| {
            let centre0 = c.frame_len / 2;
            let idx = if i <= centre0 { 0 } else { ((i - centre0 + c.hop / 2) / c.hop).min(frames - 1) };
            let f = c.frame_hz[idx].to_f64_lossy();
            (f > 0.0).then(|| sr / f)
        })
        .collect()
}

fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (len - 1) as f64).cos()).collect()
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> usize {
    (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap_or(lo)
}

fn psola<T: Real>(x: &[f64], sr: f64, contour: &F0Contour<T>, alpha: f64) -> Vec<f64> {
    let n = x.len();
    let periods = local_periods(n, sr, contour);
    let mut out = vec![0.0; n];
    let mut weight = vec![0.0; n];

    let mut i = 0;
    while i < n {
        if periods[i].is_none() {
            out[i] += x[i];
            weight[i] += 1.0;
            i += 1;
            continue;
        }
        let start = i;
        while i < n && periods[i].is_some() {
            i += 1;
        }
        let end = i;

        // Analysis marks: anchored at a waveform maximum, then stepped by the tracked
        // period. Snapping every mark to a maximum jitters when several peaks per period
        // are nearly equal, and repeated grains then carry that jitter as a subharmonic.
        let mut marks: Vec<usize> = Vec::new();
        let p0 = periods[start].unwrap();
        let mut t = argmax(x, start, (start + p0.ceil() as usize).min(end)) as f64;
        while (t.round() as usize) < end {
            let ti = t.round() as usize;
            marks.push(ti);
            t += periods[ti].unwrap_or(p0);
        }

        // Synthesis marks every period/alpha; each takes the nearest analysis grain.
        let mut s = marks[0] as f64;
        let mut k = 0usize;
        while (s.round() as usize) < end {
            let si = s.round() as usize;
            while k + 1 < marks.len() && (marks[k + 1] as f64 - s).abs() <= (marks[k] as f64 - s).abs() {
                k += 1;
            }
            let centre = marks[k];
            let p = periods[centre].unwrap_or(p0).round() as usize;
            let win = hann(2 * p + 1);
            for (m, wv) in win.iter().enumerate() {
                let src = centre as isize + m as isize - p as isize;
                let dst = si as isize + m as isize - p as isize;
                if src < 0 || dst < 0 || src as usize >= n || dst as usize >= n {
                    continue;
                }
                out[dst as usize] += x[src as usize] * wv;
                weight[dst as usize] += wv;
            }
            let local = periods[si.min(n - 1)].unwrap_or(p0);
            s += local / alpha;
        }
    }
    out.iter().zip(&weight).map(|(o, w)| o / w.max(1.0)).collect()
}

/// Log-magnitude envelope through the spectral peaks: bins that dominate a ±`guard`
/// neighbourhood are joined by linear interpolation (flat beyond the outermost peaks).
fn peak_envelope(log_mag: &[f64], guard: usize) -> Vec<f64> {
    let len = log_mag.len();
    let peaks: Vec<usize> = (0..len)
        .filter(|&k| {
            let lo = k.saturating_sub(guard);
            let hi = (k + guard + 1).min(len);
            (lo..hi).all(|j| log_mag[j] <= log_mag[k])
        })
        .collect();
    if peaks.is_empty() {
        return log_mag.to_vec();
    }
    let mut env = vec![0.0; len];
    for (k, e) in env.iter_mut().enumerate() {
        let right = peaks.partition_point(|&p| p < k);
        *e = if right == 0 {
            log_mag[peaks[0]]
        } else if right == peaks.len() {
            log_mag[peaks[peaks.len() - 1]]
        } else {
            let (a, b) = (peaks[right - 1], peaks[right]);
            let t = (k - a) as f64 / (b - a) as f64;
            log_mag[a] * (1.0 - t) + log_mag[b] * t
        };
    }
    env
}

fn warp_envelope(x: &[f64], sr: f64, scale: f64, guard_hz: f64) -> Vec<f64> {
    let n = x.len();
    let fft_len = ((0.064 * sr) as usize).next_power_of_two();
    let hop = fft_len / 4;
    let half = fft_len / 2;
    let guard = ((guard_hz.max(40.0) / (sr / fft_len as f64)).round() as usize).max(1);
    let window: Vec<f64> = (0..fft_len).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / fft_len as f64).cos()).collect();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);

    // Frames start before the signal so that every sample is covered by four windows.
    let offset = fft_len - hop;
    let padded_len = n + 2 * offset;
    let mut out = vec![0.0; padded_len];
    let mut norm = vec![0.0; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut start = 0;
    while start + fft_len <= padded_len {
        for (j, b) in buf.iter_mut().enumerate() {
            let src = (start + j) as isize - offset as isize;
            let v = if src >= 0 && (src as usize) < n { x[src as usize] } else { 0.0 };
            *b = Complex::new(v * window[j], 0.0);
        }
        forward.process(&mut buf);
        let log_mag: Vec<f64> = buf[..=half].iter().map(|c| (c.norm() + 1e-12).ln()).collect();
        let env = peak_envelope(&log_mag, guard);
        for k in 0..=half {
            let pos = (k as f64 / scale).min(half as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(half);
            let t = pos - lo as f64;
            let warped = env[lo] * (1.0 - t) + env[hi] * t;
            let gain = (warped - env[k]).exp();
            buf[k] *= gain;
            if k > 0 && k < half {
                buf[fft_len - k] = buf[k].conj();
            }
        }
        inverse.process(&mut buf);
        for j in 0..fft_len {
            out[start + j] += buf[j].re / fft_len as f64 * window[j];
            norm[start + j] += window[j] * window[j];
        }
        start += hop;
    }
    (0..n).map(|i| out[i + offset] / norm[i + offset].max(1e-3)).collect()
}

/// One epoch's decision for one utterance: with probability `cfg.p`, shift the voice
/// toward the opposite gender. Returns the (possibly unchanged) waveform and whether it
/// was manipulated.
pub fn apply_opposite<T: Real, R: Rng + ?Sized>(
    w: &Waveform<T>,
    speaker_gender: SpeakerGender,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<(Waveform<T>, bool), PerturbError> {
    cfg.validate()?;
    let roll: f64 = rng.random();
    if roll >= cfg.p {
        return Ok((w.clone(), false));
    }
    let target = speaker_gender.opposite();
    let target_median = sample_target_median(target, cfg, rng);
    let source_median = dsp::voiced_median(&analysis_contour(w)?)?.to_f64_lossy();
    let alpha = compute_alpha(source_median, target_median)?;
    let shifted = pitch_formant_shift(w, alpha, cfg.formant_scale_from(speaker_gender))?;
    Ok((shifted, true))
}
