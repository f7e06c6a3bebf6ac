//! Harmonic-plus-noise source synthesizer: an additive sinusoid bank driven
//! by F0 and per-harmonic amplitudes, a subtractive noise path built from
//! frame-wise FIR magnitude responses, and an optional convolutional reverb.
//! Fully differentiable through [`crate::graph`]; the plain entry points here
//! run the same ops on constant inputs.

use crate::dsp::{hann_periodic, hann_symmetric, AudioBuffer, Matrix};
use crate::error::{Error, Result};
use crate::graph::{conv_truncated, DiffGraph, DiffValue, Shape};
use crate::rng::SeededRng;
use std::sync::Arc;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Decoder outputs driving the synthesizer, all aligned to T frames.
#[derive(Clone, Debug)]
pub struct ControlSignals {
    /// Global amplitude per frame, strictly positive.
    pub amplitude: Vec<f64>,
    /// Per-frame distribution over K harmonics; rows sum to 1.
    pub harmonic_distribution: Matrix,
    /// Per-frame nonnegative filter magnitude over M bands.
    pub noise_magnitudes: Matrix,
}

impl ControlSignals {
    pub fn n_frames(&self) -> usize {
        self.amplitude.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.amplitude.len();
        if self.harmonic_distribution.rows != t || self.noise_magnitudes.rows != t {
            return Err(Error::invalid(format!(
                "control signals misaligned: amplitude {} frames, harmonics {}, noise {}",
                t, self.harmonic_distribution.rows, self.noise_magnitudes.rows
            )));
        }
        for r in 0..t {
            let row = self.harmonic_distribution.row(r);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("harmonic distribution has negative entries"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "harmonic distribution row {r} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Learned reverb impulse response. The first tap is pinned to 1 (dry path)
/// whenever the reverb is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct ReverbIR {
    pub taps: Vec<f64>,
    pub enabled: bool,
}

impl ReverbIR {
    pub fn disabled() -> Self {
        ReverbIR { taps: Vec::new(), enabled: false }
    }

    pub fn new_enabled(len: usize) -> Self {
        let mut taps = vec![0.0; len.max(1)];
        taps[0] = 1.0;
        ReverbIR { taps, enabled: true }
    }

    /// Re-pin the dry tap; called after load and after training updates.
    pub fn pin_dry_tap(&mut self) {
        if self.enabled {
            if self.taps.is_empty() {
                self.taps.push(1.0);
            } else {
                self.taps[0] = 1.0;
            }
        }
    }
}

/// Fixed white-noise frames for the subtractive path: unit-variance Gaussian
/// noise, Hann-windowed per frame for 50% overlap-add, fully determined by
/// the seed. Treated as constants under differentiation.
#[derive(Debug)]
pub struct NoiseFrames {
    /// `n_frames × frame_len`, window already applied.
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub n_samples: usize,
}

impl NoiseFrames {
    pub fn generate(seed: u64, n_frames: usize, hop: usize, n_samples: usize) -> Self {
        let frame_len = hop * 2;
        let window = hann_periodic(frame_len);
        let mut rng = SeededRng::new(seed);
        let mut frames = vec![0.0; n_frames * frame_len];
        for frame in frames.chunks_mut(frame_len) {
            for (v, w) in frame.iter_mut().zip(&window) {
                *v = w * rng.normal();
            }
        }
        NoiseFrames { frames, n_frames, frame_len, hop, n_samples }
    }
}

/// Frequency-sampling FIR design as a fixed linear map from M one-sided
/// magnitude bands to `fir_len` taps: inverse DFT of the symmetric zero-phase
/// spectrum, circular shift to causal, symmetric Hann on the taps.
#[derive(Debug)]
pub struct FirDesign {
    /// Row-major `fir_len × n_bands`.
    phi: Vec<f64>,
    pub fir_len: usize,
    pub n_bands: usize,
}

impl FirDesign {
    pub fn new(fir_len: usize) -> Result<Self> {
        if fir_len < 2 || fir_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "FIR length must be even and at least 2, got {fir_len}"
            )));
        }
        let n_bands = fir_len / 2 + 1;
        let window = hann_symmetric(fir_len);
        let inv_l = 1.0 / fir_len as f64;
        let mut phi = vec![0.0; fir_len * n_bands];
        for n in 0..fir_len {
            let shifted = (n + fir_len / 2) % fir_len;
            for j in 0..n_bands {
                let weight = if j == 0 || j == fir_len / 2 { 1.0 } else { 2.0 };
                let angle = TWO_PI * j as f64 * shifted as f64 * inv_l;
                phi[n * n_bands + j] = window[n] * inv_l * weight * angle.cos();
            }
        }
        Ok(FirDesign { phi, fir_len, n_bands })
    }

    /// Taps for one frame's magnitude bands.
    pub fn design(&self, mags: &[f64], out: &mut [f64]) {
        debug_assert_eq!(mags.len(), self.n_bands);
        debug_assert_eq!(out.len(), self.fir_len);
        for (n, o) in out.iter_mut().enumerate() {
            let row = &self.phi[n * self.n_bands..(n + 1) * self.n_bands];
            *o = row.iter().zip(mags).map(|(a, b)| a * b).sum();
        }
    }

    /// Adjoint of [`FirDesign::design`]: accumulates `Phi^T d_taps` into the
    /// magnitude gradient.
    pub fn design_adjoint(&self, d_taps: &[f64], d_mags: &mut [f64]) {
        for (n, &dt) in d_taps.iter().enumerate() {
            if dt != 0.0 {
                let row = &self.phi[n * self.n_bands..(n + 1) * self.n_bands];
                for (dm, &p) in d_mags.iter_mut().zip(row) {
                    *dm += dt * p;
                }
            }
        }
    }
}

fn infer_hop(n_samples: usize, n_frames: usize) -> Result<usize> {
    if n_frames < 2 {
        return Err(Error::invalid("need at least 2 frames"));
    }
    if n_samples % n_frames != 0 {
        return Err(Error::invalid(format!(
            "{n_samples} samples is not a whole number of {n_frames} frames"
        )));
    }
    Ok(n_samples / n_frames)
}

/// Graph fragment for the harmonic part: upsample F0, accumulate phase, run
/// the sinusoid bank. `amp` is `(T,1)`, `dist` is `(T,K)`.
pub fn harmonic_graph(
    g: &mut DiffGraph,
    f0: DiffValue,
    amp: DiffValue,
    dist: DiffValue,
    hop: usize,
    sample_rate: f64,
    n_samples: usize,
) -> Result<DiffValue> {
    let f0_samples = g.upsample(f0, hop, n_samples)?;
    let omega = g.mul_scalar(f0_samples, TWO_PI / sample_rate);
    g.harmonic_bank(omega, amp, dist, f0_samples, hop, sample_rate)
}

/// Graph fragment for the noise part.
pub fn noise_graph(
    g: &mut DiffGraph,
    mags: DiffValue,
    noise: Arc<NoiseFrames>,
    fir: Arc<FirDesign>,
) -> Result<DiffValue> {
    g.noise_bank(mags, noise, fir)
}

/// Sum of sinusoids at integer multiples of F0 with piecewise-linear
/// frequencies and amplitudes, zero initial phase. Harmonics whose
/// instantaneous frequency exceeds Nyquist are silenced. Negative F0 passes
/// through unclamped.
pub fn harmonic_synth(
    f0: &[f64],
    controls: &ControlSignals,
    n_samples: usize,
    sample_rate: u32,
) -> Result<AudioBuffer> {
    let t = f0.len();
    if controls.n_frames() != t {
        return Err(Error::invalid(format!(
            "f0 has {t} frames but controls have {}",
            controls.n_frames()
        )));
    }
    let hop = infer_hop(n_samples, t)?;
    let k = controls.harmonic_distribution.cols;
    let mut g = DiffGraph::new();
    let f0_v = g.constant(f0.to_vec(), Shape::vector(t))?;
    let amp = g.constant(controls.amplitude.clone(), Shape::vector(t))?;
    let dist = g.constant(
        controls.harmonic_distribution.data.clone(),
        Shape::matrix(t, k),
    )?;
    let out = harmonic_graph(&mut g, f0_v, amp, dist, hop, sample_rate as f64, n_samples)?;
    AudioBuffer::new(g.data(out).to_vec(), sample_rate)
}

/// Subtractive noise: per frame, build a zero-phase FIR from the magnitude
/// response, filter a fixed Hann-windowed white-noise frame, overlap-add at
/// 50%. Deterministic given the seed.
pub fn noise_synth(
    noise_magnitudes: &Matrix,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioBuffer> {
    let t = noise_magnitudes.rows;
    let m = noise_magnitudes.cols;
    if m < 2 {
        return Err(Error::invalid("noise synthesis needs at least 2 bands"));
    }
    let hop = infer_hop(n_samples, t)?;
    let fir = Arc::new(FirDesign::new((m - 1) * 2)?);
    let noise = Arc::new(NoiseFrames::generate(seed, t, hop, n_samples));
    let mut g = DiffGraph::new();
    let mags = g.constant(noise_magnitudes.data.clone(), Shape::matrix(t, m))?;
    let out = noise_graph(&mut g, mags, noise, fir)?;
    AudioBuffer::new(g.data(out).to_vec(), sample_rate)
}

/// Linear convolution with the impulse response, truncated to the input
/// length. Identity when the reverb is disabled.
pub fn apply_reverb(x: &AudioBuffer, ir: &ReverbIR) -> AudioBuffer {
    if !ir.enabled || ir.taps.is_empty() {
        return x.clone();
    }
    AudioBuffer {
        samples: conv_truncated(&x.samples, &ir.taps, x.samples.len()),
        sample_rate: x.sample_rate,
    }
}

/// Full source synthesis: harmonic part plus filtered noise, then optional
/// reverb.
pub fn synthesize(
    f0: &[f64],
    controls: &ControlSignals,
    ir: &ReverbIR,
    n_samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioBuffer> {
    let harmonic = harmonic_synth(f0, controls, n_samples, sample_rate)?;
    let noise = noise_synth(&controls.noise_magnitudes, n_samples, sample_rate, seed)?;
    let dry: Vec<f64> = harmonic
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(a, b)| a + b)
        .collect();
    let dry = AudioBuffer { samples: dry, sample_rate };
    Ok(apply_reverb(&dry, ir))
}
