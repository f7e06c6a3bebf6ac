//! The mixture model: R source synthesizers driven by per-source synthesis
//! parameters, summed sample-wise into one signal, plus the multiscale
//! spectral loss against an observed mixture that the fitting step
//! minimizes.

use crate::dsp::{self, hann_periodic, AudioBuffer, StftConfig};
use crate::error::{Error, Result};
use crate::fft;
use crate::graph::{DiffGraph, DiffValue, Shape, LOG_FLOOR, MAG_EPS};
use crate::nets::{self, SynthModel, SynthParams};
use crate::synth::{self, FirDesign, NoiseFrames};
use std::sync::Arc;

/// R sources with their synthesizer models (which may alias one shared
/// model), the noise seed, and the output length.
#[derive(Clone)]
pub struct MixtureState {
    pub sources: Vec<SynthParams>,
    pub models: Vec<Arc<SynthModel>>,
    pub seed: u64,
    pub n_samples: usize,
}

impl MixtureState {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("mixture needs at least one source"));
        }
        if self.models.len() != self.sources.len() {
            return Err(Error::invalid(format!(
                "{} sources but {} models",
                self.sources.len(),
                self.models.len()
            )));
        }
        let t = self.sources[0].n_frames();
        let sr = self.models[0].config.sample_rate;
        let hop = self.models[0].config.hop();
        for (r, (p, m)) in self.sources.iter().zip(&self.models).enumerate() {
            p.validate()?;
            if p.n_frames() != t {
                return Err(Error::invalid(format!("source {r} has a different frame count")));
            }
            if p.latent_dim() != m.config.latent_dim {
                return Err(Error::invalid(format!(
                    "source {r}: latent dim {} vs model {}",
                    p.latent_dim(),
                    m.config.latent_dim
                )));
            }
            if m.config.sample_rate != sr || m.config.hop() != hop {
                return Err(Error::invalid(format!("source {r}: model rate/hop differs")));
            }
        }
        if self.n_samples != t * hop {
            return Err(Error::invalid(format!(
                "{} samples does not equal {} frames x {} hop",
                self.n_samples, t, hop
            )));
        }
        Ok(())
    }

    /// Noise seed for source `r`, decorrelated across stems.
    pub fn source_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

/// Synthesize every stem and their sample-wise sum. The sum runs in
/// ascending source order, so `mixture == fold(stems, +)` holds bitwise.
pub fn synthesize_mixture(state: &MixtureState) -> Result<(AudioBuffer, Vec<AudioBuffer>)> {
    state.validate()?;
    let sr = state.models[0].config.sample_rate;
    let mut stems = Vec::with_capacity(state.n_sources());
    for (r, (params, model)) in state.sources.iter().zip(&state.models).enumerate() {
        let controls = nets::decode(params, model)?;
        let stem = synth::synthesize(
            &params.f0,
            &controls,
            &model.reverb,
            state.n_samples,
            sr,
            state.source_seed(r),
        )?;
        stems.push(stem);
    }
    let mut mix = vec![0.0; state.n_samples];
    for stem in &stems {
        for (m, s) in mix.iter_mut().zip(&stem.samples) {
            *m += s;
        }
    }
    Ok((AudioBuffer { samples: mix, sample_rate: sr }, stems))
}

/// Plain multiscale spectral loss between two signals: per scale, L1 between
/// magnitude spectrograms plus L1 between floored log magnitudes. Symmetric
/// and exactly zero for identical inputs.
pub fn multiscale_spectral_loss(a: &AudioBuffer, b: &AudioBuffer, cfg: &StftConfig) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "signal lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0;
    for (frame_len, hop) in cfg.window_sizes(a.sample_rate)? {
        let ma = dsp::stft_magnitude_samples(&a.samples, frame_len, hop)?;
        let mb = dsp::stft_magnitude_samples(&b.samples, frame_len, hop)?;
        let mut lin = 0.0;
        let mut log = 0.0;
        for (&x, &y) in ma.data.iter().zip(&mb.data) {
            lin += (x - y).abs();
            log += (x.max(LOG_FLOOR).ln() - y.max(LOG_FLOOR).ln()).abs();
        }
        total += lin + log;
    }
    Ok(total)
}

struct WindowPlan {
    frame_len: usize,
    hop: usize,
    window: Arc<Vec<f64>>,
    target_mag: Vec<f64>,
    target_log: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
}

/// Per-source leaf handles inside a loss graph.
pub struct SourceHandles {
    pub f0: DiffValue,
    pub z: DiffValue,
    pub loudness: DiffValue,
}

/// A built loss graph: call [`DiffGraph::backward`] on `loss`, then read
/// leaf gradients through `sources`.
pub struct MixtureLoss {
    pub graph: DiffGraph,
    pub loss: DiffValue,
    pub sources: Vec<SourceHandles>,
}

impl MixtureLoss {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss)
    }
}

/// Everything about one fitting problem that stays fixed across iterations:
/// the observed mixture's target spectrograms, the frozen models, the FIR
/// design, and the per-source noise realizations.
pub struct MixtureProblem {
    models: Vec<Arc<SynthModel>>,
    noise: Vec<Arc<NoiseFrames>>,
    firs: Vec<Arc<FirDesign>>,
    windows: Vec<WindowPlan>,
    pub n_samples: usize,
    pub n_frames: usize,
    hop: usize,
    sample_rate: u32,
}

impl MixtureProblem {
    pub fn new(
        observed: &AudioBuffer,
        models: &[Arc<SynthModel>],
        n_frames: usize,
        seed: u64,
        cfg: &StftConfig,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("mixture needs at least one source"));
        }
        let sr = models[0].config.sample_rate;
        let hop = models[0].config.hop();
        let n_samples = n_frames * hop;
        if observed.len() != n_samples {
            return Err(Error::invalid(format!(
                "observed mixture has {} samples, expected {} ({} frames x {} hop)",
                observed.len(),
                n_samples,
                n_frames,
                hop
            )));
        }

        let mut windows = Vec::new();
        for (frame_len, whop) in cfg.window_sizes(sr)? {
            // Targets go through the exact numeric path of the
            // differentiable STFT (same epsilon inside the magnitude), so a
            // model that reproduces the observed signal bitwise sees a loss
            // of exactly zero and exactly zero gradients.
            let window = hann_periodic(frame_len);
            let (frames, n_frames) = fft::frame_signal(&observed.samples, frame_len, whop);
            let spectra = fft::windowed_spectra(&frames, n_frames, frame_len, &window);
            let n_bins = frame_len / 2 + 1;
            let target_mag: Vec<f64> = spectra
                .iter()
                .map(|c| (c.re * c.re + c.im * c.im + MAG_EPS * MAG_EPS).sqrt())
                .collect();
            let target_log: Vec<f64> =
                target_mag.iter().map(|&m| m.max(LOG_FLOOR).ln()).collect();
            windows.push(WindowPlan {
                frame_len,
                hop: whop,
                window: Arc::new(window),
                n_frames,
                n_bins,
                target_mag,
                target_log,
            });
        }

        let mut noise = Vec::new();
        let mut firs = Vec::new();
        for (r, model) in models.iter().enumerate() {
            noise.push(Arc::new(NoiseFrames::generate(
                seed.wrapping_add(r as u64),
                n_frames,
                hop,
                n_samples,
            )));
            firs.push(Arc::new(FirDesign::new(model.config.fir_len())?));
        }

        Ok(MixtureProblem {
            models: models.to_vec(),
            noise,
            firs,
            windows,
            n_samples,
            n_frames,
            hop,
            sample_rate: sr,
        })
    }

    /// Build the full differentiable graph for the current parameters:
    /// decode -> synthesize per source, ordered sum, multiscale loss against
    /// the cached targets.
    pub fn build_loss(&self, sources: &[SynthParams]) -> Result<MixtureLoss> {
        if sources.len() != self.models.len() {
            return Err(Error::invalid(format!(
                "{} parameter sets for {} models",
                sources.len(),
                self.models.len()
            )));
        }
        let mut g = DiffGraph::new();
        let mut handles = Vec::with_capacity(sources.len());
        let mut mix: Option<DiffValue> = None;

        for (r, (params, model)) in sources.iter().zip(&self.models).enumerate() {
            params.validate()?;
            let t = self.n_frames;
            if params.n_frames() != t || params.latent_dim() != model.config.latent_dim {
                return Err(Error::invalid(format!("source {r}: parameter shape mismatch")));
            }
            let f0 = g.leaf(params.f0.clone(), Shape::vector(t))?;
            let z = g.leaf(params.z.data.clone(), Shape::matrix(t, params.z.cols))?;
            let loud = g.leaf(params.loudness.clone(), Shape::vector(t))?;
            let weights = nets::bind_weights(&mut g, model, false)?;
            let (amp, dist, noise_mags) = nets::decode_graph(&mut g, &weights, f0, z, loud)?;
            let harmonic = synth::harmonic_graph(
                &mut g,
                f0,
                amp,
                dist,
                self.hop,
                self.sample_rate as f64,
                self.n_samples,
            )?;
            let noisy = synth::noise_graph(&mut g, noise_mags, self.noise[r].clone(), self.firs[r].clone())?;
            let mut stem = g.add(harmonic, noisy)?;
            if model.reverb.enabled {
                let ir = g.constant(model.reverb.taps.clone(), Shape::vector(model.reverb.taps.len()))?;
                stem = g.conv_trunc(stem, ir)?;
            }
            mix = Some(match mix {
                None => stem,
                Some(acc) => g.add(acc, stem)?,
            });
            handles.push(SourceHandles { f0, z, loudness: loud });
        }

        let mix = mix.expect("at least one source");
        let loss = self.attach_loss(&mut g, mix)?;
        Ok(MixtureLoss { graph: g, loss, sources: handles })
    }

    /// Attach the multiscale loss terms for an already-built signal value
    /// against the cached target spectrograms; returns the scalar loss.
    pub fn attach_loss(&self, g: &mut DiffGraph, signal: DiffValue) -> Result<DiffValue> {
        if signal.len() != self.n_samples {
            return Err(Error::invalid(format!(
                "signal has {} samples, targets were built for {}",
                signal.len(),
                self.n_samples
            )));
        }
        let mut loss: Option<DiffValue> = None;
        for plan in &self.windows {
            let frames = g.frame_signal(signal, plan.frame_len, plan.hop)?;
            let mags = g.dft_magnitude(frames, plan.window.clone())?;
            let shape = Shape::matrix(plan.n_frames, plan.n_bins);
            let target = g.constant(plan.target_mag.clone(), shape)?;
            let lin = g.l1_distance(mags, target)?;
            let logm = g.log_floored(mags);
            let target_log = g.constant(plan.target_log.clone(), shape)?;
            let lg = g.l1_distance(logm, target_log)?;
            let term = g.add(lin, lg)?;
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        loss.ok_or_else(|| Error::invalid("no loss windows configured"))
    }
}

/// One-shot loss construction for a mixture state against an observed
/// signal. For iterative fitting, build a [`MixtureProblem`] once and call
/// [`MixtureProblem::build_loss`] per step.
pub fn mixture_loss(
    state: &MixtureState,
    observed: &AudioBuffer,
    cfg: &StftConfig,
) -> Result<MixtureLoss> {
    state.validate()?;
    let problem = MixtureProblem::new(
        observed,
        &state.models,
        state.sources[0].n_frames(),
        state.seed,
        cfg,
    )?;
    problem.build_loss(&state.sources)
}
