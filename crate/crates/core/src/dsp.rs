//! Non-learned signal primitives: STFT magnitudes, A-weighted loudness,
//! mel/MFCC features, Hann windows, and framewise-to-samplewise
//! interpolation.
//!
//! Everything here is pure and safe for unrestricted parallel use. The
//! differentiable variants of the STFT, the mel projection, and the
//! upsampler live in [`crate::graph`] and share the same numeric kernels.

use crate::error::{Error, Result};
use crate::fft;
use serde::{Deserialize, Serialize};

/// All audio in this crate is mono 16 kHz.
pub const SAMPLE_RATE: u32 = 16000;

/// Frame hop of the synthesis parameters (32 ms).
pub const HOP_MS: u32 = 32;

/// Analysis window for loudness and the encoder features (64 ms).
pub const LOUDNESS_FRAME_MS: u32 = 64;

/// Loudness floor in dB.
pub const LOUDNESS_FLOOR_DB: f64 = -120.0;

/// Mono audio at a fixed sample rate.
#[derive(Clone, Debug)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("audio contains non-finite samples"));
        }
        Ok(AudioBuffer { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Row-major matrix of f64, used for spectrograms, feature frames, and
/// per-frame control arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Multiscale STFT configuration for the spectral loss: a family of Hann
/// frame lengths with a shared hop fraction.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StftConfig {
    pub frame_lengths_ms: Vec<u32>,
    pub hop_fraction: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_lengths_ms: vec![8, 16, 32, 64, 128, 256],
            hop_fraction: 0.5,
        }
    }
}

impl StftConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.frame_lengths_ms.is_empty() {
            return Err(Error::invalid("StftConfig: need at least one frame length"));
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return Err(Error::invalid("StftConfig: hop fraction must be in (0, 1]"));
        }
        for &ms in &self.frame_lengths_ms {
            let len = ms_to_samples(ms, sample_rate)?;
            if (len as f64 * self.hop_fraction).fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "StftConfig: {ms} ms frame with hop fraction {} is not a whole sample count",
                    self.hop_fraction
                )));
            }
        }
        Ok(())
    }

    /// (frame_len, hop) pairs in samples.
    pub fn window_sizes(&self, sample_rate: u32) -> Result<Vec<(usize, usize)>> {
        self.validate(sample_rate)?;
        self.frame_lengths_ms
            .iter()
            .map(|&ms| {
                let len = ms_to_samples(ms, sample_rate)?;
                Ok((len, (len as f64 * self.hop_fraction) as usize))
            })
            .collect()
    }
}

/// Convert milliseconds to a whole sample count, rejecting fractional
/// results.
pub fn ms_to_samples(ms: u32, sample_rate: u32) -> Result<usize> {
    let num = ms as u64 * sample_rate as u64;
    if num % 1000 != 0 {
        return Err(Error::invalid(format!(
            "{ms} ms is not a whole number of samples at {sample_rate} Hz"
        )));
    }
    Ok((num / 1000) as usize)
}

/// Periodic Hann window (sums to a constant at 50% overlap).
pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / len as f64).cos()))
        .collect()
}

/// Symmetric Hann window (for FIR tap shaping).
pub fn hann_symmetric(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / (len - 1) as f64).cos()))
        .collect()
}

/// Hann-windowed magnitude spectrogram: `ceil(N/hop)` frames ×
/// `frame_len/2+1` bins, tail zero-padded. Exact `sqrt(re^2+im^2)`, so
/// silence maps to exactly zero.
pub fn stft_magnitude(x: &AudioBuffer, frame_ms: u32, hop_ms: u32) -> Result<Matrix> {
    if frame_ms == 0 || hop_ms == 0 {
        return Err(Error::invalid("stft: frame length and hop must be positive"));
    }
    let frame_len = ms_to_samples(frame_ms, x.sample_rate)?;
    let hop = ms_to_samples(hop_ms, x.sample_rate)?;
    stft_magnitude_samples(&x.samples, frame_len, hop)
}

pub(crate) fn stft_magnitude_samples(x: &[f64], frame_len: usize, hop: usize) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::invalid("stft: empty signal"));
    }
    let window = hann_periodic(frame_len);
    let (frames, n_frames) = fft::frame_signal(x, frame_len, hop);
    let spectra = fft::windowed_spectra(&frames, n_frames, frame_len, &window);
    let n_bins = frame_len / 2 + 1;
    let mags: Vec<f64> = spectra
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .collect();
    Ok(Matrix::new(mags, n_frames, n_bins))
}

/// A-weighting magnitude response (IEC 61672), normalized so the weight at
/// 1 kHz is exactly 0 dB.
pub fn a_weighting_db(f_hz: f64) -> f64 {
    20.0 * (a_weight_linear(f_hz) / a_weight_linear(1000.0)).log10()
}

fn a_weight_linear(f: f64) -> f64 {
    let f2 = f * f;
    let num = 12194.0_f64.powi(2) * f2 * f2;
    let den = (f2 + 20.6_f64.powi(2))
        * ((f2 + 107.7_f64.powi(2)) * (f2 + 737.9_f64.powi(2))).sqrt()
        * (f2 + 12194.0_f64.powi(2));
    num / den
}

/// Framewise A-weighted loudness in dB: 10*log10 of the A-weighted one-sided
/// power spectrum, scaled so a full-scale 1 kHz sine reads near 0 dB, floored
/// at [`LOUDNESS_FLOOR_DB`]. One value per hop, `ceil(N/hop)` frames.
pub fn a_weighted_loudness(x: &AudioBuffer, hop_ms: u32, frame_ms: u32) -> Result<Vec<f64>> {
    if frame_ms == 0 || hop_ms == 0 {
        return Err(Error::invalid("loudness: frame length and hop must be positive"));
    }
    let frame_len = ms_to_samples(frame_ms, x.sample_rate)?;
    let hop = ms_to_samples(hop_ms, x.sample_rate)?;
    let window = hann_periodic(frame_len);
    let (frames, n_frames) = fft::frame_signal(&x.samples, frame_len, hop);
    let spectra = fft::windowed_spectra(&frames, n_frames, frame_len, &window);
    let n_bins = frame_len / 2 + 1;

    let norm = 1.0 / a_weight_linear(1000.0).powi(2);
    let weights: Vec<f64> = (0..n_bins)
        .map(|k| {
            let f = k as f64 * x.sample_rate as f64 / frame_len as f64;
            let ra = a_weight_linear(f);
            // Interior bins carry both halves of the spectrum.
            let mult = if k == 0 || k == frame_len / 2 { 1.0 } else { 2.0 };
            mult * ra * ra * norm
        })
        .collect();
    let wsum: f64 = window.iter().sum();
    let scale = 2.0 / (wsum * wsum);

    Ok((0..n_frames)
        .map(|t| {
            let row = &spectra[t * n_bins..(t + 1) * n_bins];
            let p: f64 = row
                .iter()
                .zip(&weights)
                .map(|(c, w)| w * (c.re * c.re + c.im * c.im))
                .sum();
            (10.0 * (p * scale).max(1e-12).log10()).max(LOUDNESS_FLOOR_DB)
        })
        .collect())
}

/// Triangular mel filterbank over FFT bins (HTK mel scale).
#[derive(Debug)]
pub struct MelFilterbank {
    /// Row-major `n_mels × n_bins` weights.
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_bins: usize, fmin: f64, fmax: f64, sample_rate: u32) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(Error::invalid(format!(
                "mel filterbank: need 0 <= fmin < fmax <= Nyquist, got {fmin}..{fmax}"
            )));
        }
        let frame_len = (n_bins - 1) * 2;
        let mel_lo = hz_to_mel(fmin);
        let mel_hi = hz_to_mel(fmax);
        let centers: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / frame_len as f64;
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(MelFilterbank { weights, n_mels, n_bins })
    }
}

/// MFCC analysis settings.
#[derive(Clone, Copy, Debug)]
pub struct MfccConfig {
    pub frame_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub n_coeffs: usize,
}

impl MfccConfig {
    /// Evaluation-side config: 128 ms frames, 32 ms hop, 128 mel bins over
    /// 20–8000 Hz, first 30 coefficients.
    pub fn eval() -> Self {
        MfccConfig { frame_ms: 128, hop_ms: 32, n_mels: 128, fmin: 20.0, fmax: 8000.0, n_coeffs: 30 }
    }

    /// Encoder-side config: same framing as loudness, 64 mel bins, 30
    /// coefficients.
    pub fn encoder() -> Self {
        MfccConfig {
            frame_ms: LOUDNESS_FRAME_MS,
            hop_ms: HOP_MS,
            n_mels: 64,
            fmin: 20.0,
            fmax: 8000.0,
            n_coeffs: 30,
        }
    }
}

/// Mel-frequency cepstral coefficients: orthonormal DCT-II of the log-mel
/// power spectrogram, truncated to `n_coeffs`. Returns `T × n_coeffs`.
pub fn mfcc(x: &AudioBuffer, cfg: &MfccConfig) -> Result<Matrix> {
    if cfg.n_coeffs > cfg.n_mels {
        return Err(Error::invalid(format!(
            "mfcc: {} coefficients exceed {} mel bands",
            cfg.n_coeffs, cfg.n_mels
        )));
    }
    let frame_len = ms_to_samples(cfg.frame_ms, x.sample_rate)?;
    let hop = ms_to_samples(cfg.hop_ms, x.sample_rate)?;
    let n_bins = frame_len / 2 + 1;
    let fb = MelFilterbank::new(cfg.n_mels, n_bins, cfg.fmin, cfg.fmax, x.sample_rate)?;

    let window = hann_periodic(frame_len);
    let (frames, n_frames) = fft::frame_signal(&x.samples, frame_len, hop);
    let spectra = fft::windowed_spectra(&frames, n_frames, frame_len, &window);

    let mut out = Matrix::zeros(n_frames, cfg.n_coeffs);
    let mut mel_row = vec![0.0; cfg.n_mels];
    for t in 0..n_frames {
        let row = &spectra[t * n_bins..(t + 1) * n_bins];
        for m in 0..cfg.n_mels {
            let w = &fb.weights[m * n_bins..(m + 1) * n_bins];
            let p: f64 = row
                .iter()
                .zip(w)
                .map(|(c, wv)| wv * (c.re * c.re + c.im * c.im))
                .sum();
            mel_row[m] = p.max(1e-10).ln();
        }
        let coeffs = dct2_orthonormal(&mel_row);
        out.data[t * cfg.n_coeffs..(t + 1) * cfg.n_coeffs]
            .copy_from_slice(&coeffs[..cfg.n_coeffs]);
    }
    Ok(out)
}

/// Orthonormal DCT-II. For a constant input `c`, coefficient 0 is
/// `c * sqrt(N)` and the rest vanish.
pub fn dct2_orthonormal(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (i, &v) in x.iter().enumerate() {
            s += v * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        *o = s * scale;
    }
    out
}

/// Piecewise-linear interpolation from frame values to sample positions.
/// Frame centers sit at `t*hop + hop/2`; positions outside the outer centers
/// hold the endpoint values. Sampling the result at the centers returns the
/// input exactly.
pub fn upsample_framewise(values: &[f64], hop: usize, total: usize) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::invalid("upsample_framewise: need at least 2 frames"));
    }
    if hop == 0 {
        return Err(Error::invalid("upsample_framewise: hop must be positive"));
    }
    let mut out = vec![0.0; total];
    upsample_linear(values, hop, &mut out);
    Ok(out)
}

pub(crate) fn upsample_linear(values: &[f64], hop: usize, out: &mut [f64]) {
    let t_max = values.len() - 1;
    let half = hop as f64 / 2.0;
    let inv_hop = 1.0 / hop as f64;
    for (n, o) in out.iter_mut().enumerate() {
        let u = ((n as f64 - half) * inv_hop).clamp(0.0, t_max as f64);
        let i = u as usize;
        if i >= t_max {
            *o = values[t_max];
        } else {
            let frac = u - i as f64;
            *o = values[i] + frac * (values[i + 1] - values[i]);
        }
    }
}

pub(crate) fn upsample_linear_adjoint(d_out: &[f64], hop: usize, n_frames: usize, d_values: &mut [f64]) {
    let t_max = n_frames - 1;
    let half = hop as f64 / 2.0;
    let inv_hop = 1.0 / hop as f64;
    for (n, &g) in d_out.iter().enumerate() {
        let u = ((n as f64 - half) * inv_hop).clamp(0.0, t_max as f64);
        let i = u as usize;
        if i >= t_max {
            d_values[t_max] += g;
        } else {
            let frac = u - i as f64;
            d_values[i] += g * (1.0 - frac);
            d_values[i + 1] += g * frac;
        }
    }
}

/// Crude framewise autocorrelation F0 estimate (fallback when no reference
/// pitch is available for a training clip). One value per hop.
pub fn autocorr_f0(x: &AudioBuffer, frame_ms: u32, hop_ms: u32, fmin: f64, fmax: f64) -> Result<Vec<f64>> {
    let frame_len = ms_to_samples(frame_ms, x.sample_rate)?;
    let hop = ms_to_samples(hop_ms, x.sample_rate)?;
    let sr = x.sample_rate as f64;
    let lag_min = (sr / fmax).floor().max(1.0) as usize;
    let lag_max = ((sr / fmin).ceil() as usize).min(frame_len - 1);
    if lag_min >= lag_max {
        return Err(Error::invalid("autocorr_f0: invalid pitch range for frame length"));
    }
    let (frames, n_frames) = fft::frame_signal(&x.samples, frame_len, hop);
    let mut out = vec![0.0; n_frames];
    for t in 0..n_frames {
        let frame = &frames[t * frame_len..(t + 1) * frame_len];
        let mean = frame.iter().sum::<f64>() / frame_len as f64;
        let centered: Vec<f64> = frame.iter().map(|&v| v - mean).collect();
        let r0: f64 = centered.iter().map(|&v| v * v).sum();
        if r0 <= 1e-12 {
            out[t] = fmin;
            continue;
        }
        let mut best_lag = lag_min;
        let mut best = f64::NEG_INFINITY;
        let mut acf = vec![0.0; lag_max + 1];
        for lag in lag_min..=lag_max {
            let r: f64 = centered[..frame_len - lag]
                .iter()
                .zip(&centered[lag..])
                .map(|(a, b)| a * b)
                .sum();
            acf[lag] = r / r0;
            if acf[lag] > best {
                best = acf[lag];
                best_lag = lag;
            }
        }
        // Parabolic refinement around the peak.
        let lag = if best_lag > lag_min && best_lag < lag_max {
            let (ym, y0, yp) = (acf[best_lag - 1], acf[best_lag], acf[best_lag + 1]);
            let denom = ym - 2.0 * y0 + yp;
            if denom.abs() > 1e-12 {
                best_lag as f64 + 0.5 * (ym - yp) / denom
            } else {
                best_lag as f64
            }
        } else {
            best_lag as f64
        };
        out[t] = sr / lag;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn sine(freq: f64, amp: f64, n: usize) -> AudioBuffer {
        let sr = SAMPLE_RATE as f64;
        AudioBuffer::new(
            (0..n)
                .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / sr).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn stft_silence_is_zero() {
        let x = AudioBuffer::new(vec![0.0; 8000], SAMPLE_RATE).unwrap();
        let m = stft_magnitude(&x, 32, 16).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_peak_bin_for_1khz() {
        // 256 ms frame at 16 kHz = 4096 samples; 1 kHz lands on bin 256.
        let x = sine(1000.0, 1.0, 16000);
        let m = stft_magnitude(&x, 256, 128).unwrap();
        let row = m.row(1);
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 256);
    }

    #[test]
    fn stft_parseval_per_frame() {
        let mut rng = SeededRng::new(1);
        let x = AudioBuffer::new(rng.normal_vec(2048), SAMPLE_RATE).unwrap();
        let frame_len = 512;
        let m = stft_magnitude_samples(&x.samples, frame_len, 256).unwrap();
        let window = hann_periodic(frame_len);
        // First frame is fully inside the signal.
        let windowed: Vec<f64> = x.samples[..frame_len]
            .iter()
            .zip(&window)
            .map(|(a, b)| a * b)
            .collect();
        let time_energy: f64 = windowed.iter().map(|v| v * v).sum();
        let mut spec_energy = 0.0;
        for k in 0..m.cols {
            let mult = if k == 0 || k == frame_len / 2 { 1.0 } else { 2.0 };
            spec_energy += mult * m.get(0, k) * m.get(0, k);
        }
        spec_energy /= frame_len as f64;
        let rel = (spec_energy - time_energy).abs() / time_energy;
        assert!(rel < 1e-8, "Parseval relative error {rel}");
    }

    #[test]
    fn stft_rejects_zero_hop() {
        let x = sine(440.0, 1.0, 1024);
        assert!(stft_magnitude(&x, 32, 0).is_err());
        assert!(stft_magnitude(&x, 0, 16).is_err());
    }

    #[test]
    fn loudness_gain_offset() {
        let x = sine(440.0, 0.5, 16000);
        let x2 = AudioBuffer::new(x.samples.iter().map(|v| v * 2.0).collect(), SAMPLE_RATE).unwrap();
        let l1 = a_weighted_loudness(&x, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
        let l2 = a_weighted_loudness(&x2, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
        let expect = 20.0 * 2f64.log10();
        for (a, b) in l1.iter().zip(&l2) {
            assert!(((b - a) - expect).abs() < 1e-9, "offset {}", b - a);
        }
    }

    #[test]
    fn loudness_a_weights_midband_over_bass() {
        // Same-power sines: 1 kHz should read louder than 100 Hz by roughly
        // the A-weight difference (~19 dB).
        let hi = sine(1000.0, 0.5, 32000);
        let lo = sine(100.0, 0.5, 32000);
        let lh = a_weighted_loudness(&hi, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
        let ll = a_weighted_loudness(&lo, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
        let diff = lh[10] - ll[10];
        assert!(diff > 15.0 && diff < 23.0, "diff {diff}");
    }

    #[test]
    fn loudness_frame_count_12s() {
        let x = AudioBuffer::new(vec![0.1; 192000], SAMPLE_RATE).unwrap();
        let l = a_weighted_loudness(&x, 32, 64).unwrap();
        assert_eq!(l.len(), 375);
    }

    #[test]
    fn a_weighting_reference_points() {
        assert!(a_weighting_db(1000.0).abs() < 1e-9);
        let a100 = a_weighting_db(100.0);
        assert!((a100 + 19.1).abs() < 0.5, "A(100 Hz) = {a100}");
    }

    #[test]
    fn mfcc_eval_config_shape() {
        let x = AudioBuffer::new(vec![0.01; 192000], SAMPLE_RATE).unwrap();
        let m = mfcc(&x, &MfccConfig::eval()).unwrap();
        assert_eq!((m.rows, m.cols), (375, 30));
    }

    #[test]
    fn mfcc_rejects_more_coeffs_than_mels() {
        let x = sine(440.0, 0.5, 8000);
        let cfg = MfccConfig { n_coeffs: 65, n_mels: 64, ..MfccConfig::encoder() };
        assert!(mfcc(&x, &cfg).is_err());
    }

    #[test]
    fn mfcc_deterministic_and_polarity_invariant() {
        let mut rng = SeededRng::new(2);
        let x = AudioBuffer::new(rng.normal_vec(16000), SAMPLE_RATE).unwrap();
        let flipped =
            AudioBuffer::new(x.samples.iter().map(|v| -v).collect(), SAMPLE_RATE).unwrap();
        let a = mfcc(&x, &MfccConfig::encoder()).unwrap();
        let b = mfcc(&x, &MfccConfig::encoder()).unwrap();
        let c = mfcc(&flipped, &MfccConfig::encoder()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn dct_of_constant() {
        let n = 64;
        let c = 0.37;
        let out = dct2_orthonormal(&vec![c; n]);
        assert!((out[0] - c * (n as f64).sqrt()).abs() < 1e-12);
        for &v in &out[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let up = upsample_framewise(&[3.0, 3.0, 3.0], 4, 12).unwrap();
        assert!(up.iter().all(|&v| v == 3.0));

        let up = upsample_framewise(&[0.0, 1.0], 4, 8).unwrap();
        // Centers at samples 2 and 6; ramp between them.
        assert_eq!(&up[2..6], &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(up[6], 1.0);
        assert_eq!(up[7], 1.0);
        assert_eq!(up[0], 0.0);
    }

    #[test]
    fn upsample_round_trip_at_centers() {
        let values = [0.3, -1.2, 4.5, 0.0, 2.2];
        let hop = 10;
        let up = upsample_framewise(&values, hop, 50).unwrap();
        for (t, &v) in values.iter().enumerate() {
            assert_eq!(up[t * hop + hop / 2], v);
        }
    }

    #[test]
    fn upsample_needs_two_frames() {
        assert!(upsample_framewise(&[1.0], 4, 8).is_err());
    }

    #[test]
    fn autocorr_finds_a_sine() {
        let x = sine(220.0, 0.7, 16000);
        let f0 = autocorr_f0(&x, 64, 32, 60.0, 1000.0).unwrap();
        for &f in &f0[2..f0.len() - 2] {
            assert!((f - 220.0).abs() < 5.0, "estimate {f}");
        }
    }

    proptest! {
        #[test]
        fn upsample_is_linear(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let u: Vec<f64> = rng.normal_vec(6);
            let v: Vec<f64> = rng.normal_vec(6);
            let (a, b) = (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));
            let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let up_combo = upsample_framewise(&combo, 5, 30).unwrap();
            let up_u = upsample_framewise(&u, 5, 30).unwrap();
            let up_v = upsample_framewise(&v, 5, 30).unwrap();
            for i in 0..30 {
                let expect = a * up_u[i] + b * up_v[i];
                prop_assert!((up_combo[i] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn loudness_gain_offset_any_gain(gain in 0.05f64..20.0) {
            let mut rng = SeededRng::new(7);
            let x = AudioBuffer::new(
                rng.normal_vec(4096).iter().map(|v| v * 0.1).collect::<Vec<_>>(),
                SAMPLE_RATE,
            ).unwrap();
            let scaled = AudioBuffer::new(
                x.samples.iter().map(|v| v * gain).collect::<Vec<_>>(),
                SAMPLE_RATE,
            ).unwrap();
            let l1 = a_weighted_loudness(&x, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
            let l2 = a_weighted_loudness(&scaled, HOP_MS, LOUDNESS_FRAME_MS).unwrap();
            let expect = 20.0 * gain.log10();
            for (a, b) in l1.iter().zip(&l2) {
                // Both sides must be above the floor for the offset to hold.
                if *a > LOUDNESS_FLOOR_DB + 1.0 && *b > LOUDNESS_FLOOR_DB + 1.0 {
                    prop_assert!(((b - a) - expect).abs() < 1e-9);
                }
            }
        }
    }
}
