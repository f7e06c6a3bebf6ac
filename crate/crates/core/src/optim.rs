//! Adam with a stepped learning-rate schedule, the mixture fitting loop
//! (models frozen, per-source synthesis parameters free), and autoencoder
//! pretraining (weights free, parameters extracted from the clips).

use crate::dsp::{AudioBuffer, StftConfig};
use crate::error::{Error, Result};
use crate::mixture::MixtureProblem;
use crate::nets::{self, SynthModel, SynthParams};
use crate::synth::{self, FirDesign, NoiseFrames};
use crate::graph::Shape;
use std::sync::Arc;

/// Adam moments and schedule. Bias-corrected update with
/// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: Vec<(usize, f64)>,
}

impl AdamState {
    /// `sizes` gives one entry per parameter tensor; `schedule` is a list of
    /// `(iteration, rate)` breakpoints with strictly increasing iterations.
    pub fn new(sizes: &[usize], schedule: Vec<(usize, f64)>) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::invalid("Adam schedule must not be empty"));
        }
        if !schedule.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::invalid("Adam schedule steps must be strictly increasing"));
        }
        Ok(AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        })
    }

    /// Learning rate in effect at a given iteration: the last breakpoint at
    /// or before it.
    pub fn rate_at(&self, iteration: usize) -> f64 {
        let mut rate = self.schedule[0].1;
        for &(at, r) in &self.schedule {
            if at <= iteration {
                rate = r;
            }
        }
        rate
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update over all tensors, in place. Rejects
/// non-finite gradients; the caller attaches the iteration number.
pub fn adam_step(state: &mut AdamState, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} tensors, {} gradients, state over {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::invalid("adam_step: tensor/gradient length mismatch"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("adam_step: non-finite gradient"));
        }
    }

    let rate = state.rate_at(state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Which of the three parameter groups the fitting step may move.
#[derive(Clone, Copy, Debug)]
pub struct FreeVars {
    pub f0: bool,
    pub z: bool,
    pub loudness: bool,
}

impl Default for FreeVars {
    fn default() -> Self {
        FreeVars { f0: true, z: true, loudness: true }
    }
}

/// Fitting-step configuration. Defaults: 3000 iterations, learning rate 0.1
/// dropping to 0.01 at iteration 1000 and 0.001 at 2000, all six loss
/// windows, every parameter group free.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub iterations: usize,
    pub schedule: Vec<(usize, f64)>,
    pub loss_windows: StftConfig,
    pub free: FreeVars,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 3000,
            schedule: default_schedule(),
            loss_windows: StftConfig::default(),
            free: FreeVars::default(),
        }
    }
}

pub fn default_schedule() -> Vec<(usize, f64)> {
    vec![(0, 0.1), (1000, 0.01), (2000, 0.001)]
}

pub struct FitResult {
    pub params: Vec<SynthParams>,
    /// Loss evaluated at the parameters entering each iteration.
    pub loss_trace: Vec<f64>,
}

/// Minimize the multiscale spectral loss between the model mixture and
/// `observed` over the per-source synthesis parameters. The models stay
/// frozen; `seed` fixes the noise realization.
pub fn fit_mixture(
    observed: &AudioBuffer,
    models: &[Arc<SynthModel>],
    init: &[SynthParams],
    cfg: &FitConfig,
    seed: u64,
) -> Result<FitResult> {
    if init.is_empty() || init.len() != models.len() {
        return Err(Error::invalid(format!(
            "fit: {} initial parameter sets for {} models",
            init.len(),
            models.len()
        )));
    }
    let t = init[0].n_frames();
    let problem = MixtureProblem::new(observed, models, t, seed, &cfg.loss_windows)?;
    let checksums: Vec<u64> = models.iter().map(|m| m.weights_checksum()).collect();

    let mut current: Vec<SynthParams> = init.to_vec();

    // Flatten the free parameter groups into the Adam tensor list; frozen
    // groups are never touched, so they stay bitwise equal to the init.
    let mut sizes = Vec::new();
    for p in &current {
        if cfg.free.f0 {
            sizes.push(p.f0.len());
        }
        if cfg.free.z {
            sizes.push(p.z.data.len());
        }
        if cfg.free.loudness {
            sizes.push(p.loudness.len());
        }
    }
    if sizes.is_empty() {
        return Err(Error::invalid("fit: no free variables"));
    }
    let mut adam = AdamState::new(&sizes, cfg.schedule.clone())?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut built = problem.build_loss(&current)?;
        let loss = built.value();
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, trace });
        }
        let loss_v = built.loss;
        built.graph.backward(loss_v)?;

        let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
        for (p, h) in current.iter().zip(&built.sources) {
            if cfg.free.f0 {
                tensors.push(p.f0.clone());
                grads.push(built.graph.grad(h.f0));
            }
            if cfg.free.z {
                tensors.push(p.z.data.clone());
                grads.push(built.graph.grad(h.z));
            }
            if cfg.free.loudness {
                tensors.push(p.loudness.clone());
                grads.push(built.graph.grad(h.loudness));
            }
        }
        adam_step(&mut adam, &mut tensors, &grads)
            .map_err(|_| Error::NonFiniteGrad { iteration })?;

        let mut it = tensors.into_iter();
        for p in current.iter_mut() {
            if cfg.free.f0 {
                p.f0 = it.next().unwrap();
            }
            if cfg.free.z {
                p.z.data = it.next().unwrap();
            }
            if cfg.free.loudness {
                p.loudness = it.next().unwrap();
            }
        }
    }

    for (model, &before) in models.iter().zip(&checksums) {
        assert_eq!(
            model.weights_checksum(),
            before,
            "synthesizer weights changed during fitting"
        );
    }

    Ok(FitResult { params: current, loss_trace: trace })
}

/// One training clip: audio plus its reference F0 track at the model hop.
#[derive(Clone)]
pub struct TrainClip {
    pub audio: AudioBuffer,
    pub f0: Vec<f64>,
}

/// Pretraining configuration. Defaults follow the fitting-step loss windows
/// with 3000 epochs at rate 0.001 and a global-norm gradient clip of 100.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_windows: StftConfig,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3000,
            learning_rate: 0.001,
            loss_windows: StftConfig::default(),
            grad_clip_norm: 100.0,
            seed: 0,
        }
    }
}

/// Train encoder, decoder (and reverb, when enabled) so each clip's
/// reconstruction loss drops: clips are visited sequentially with one Adam
/// step per clip. Returns the trained model and the mean loss per epoch.
pub fn pretrain(
    dataset: &[TrainClip],
    model: &SynthModel,
    cfg: &PretrainConfig,
) -> Result<(SynthModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretrain: empty dataset"));
    }
    let hop = model.config.hop();
    let sr = model.config.sample_rate;

    let fir = Arc::new(FirDesign::new(model.config.fir_len())?);
    let mut clips = Vec::with_capacity(dataset.len());
    for (i, clip) in dataset.iter().enumerate() {
        if clip.audio.sample_rate != sr {
            return Err(Error::invalid(format!(
                "clip {i}: sample rate {} differs from model {}",
                clip.audio.sample_rate, sr
            )));
        }
        if clip.audio.len() % hop != 0 {
            return Err(Error::invalid(format!(
                "clip {i}: length {} is not a whole number of hops",
                clip.audio.len()
            )));
        }
        let n_frames = clip.audio.len() / hop;
        if clip.f0.len() != n_frames {
            return Err(Error::invalid(format!(
                "clip {i}: f0 reference has {} frames, audio has {}",
                clip.f0.len(),
                n_frames
            )));
        }
        let models = vec![Arc::new(model.clone())];
        let problem = MixtureProblem::new(
            &clip.audio,
            &models,
            n_frames,
            cfg.seed.wrapping_add(i as u64),
            &cfg.loss_windows,
        )?;
        clips.push(ClipContext {
            feats: nets::encoder_features(&clip.audio)?,
            loudness: nets::extract_loudness(&clip.audio)?,
            f0: clip.f0.clone(),
            problem,
            noise: Arc::new(NoiseFrames::generate(
                cfg.seed.wrapping_add(i as u64),
                n_frames,
                hop,
                clip.audio.len(),
            )),
            fir: fir.clone(),
            n_frames,
        });
    }

    let mut work = model.clone();
    let mut tensors = work.trainable_tensors();
    let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(&sizes, vec![(0, cfg.learning_rate)])?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for clip in &clips {
            work.set_trainable_tensors(&tensors)?;
            let (loss, mut grads) = clip_step(&work, clip)?;
            epoch_sum += loss;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: adam.step_count(), trace: epoch_losses });
            }
            clip_global_norm(&mut grads, cfg.grad_clip_norm);
            adam_step(&mut adam, &mut tensors, &grads)
                .map_err(|_| Error::NonFiniteGrad { iteration: adam.step_count() })?;
            pin_reverb_tap(&work, &mut tensors);
        }
        epoch_losses.push(epoch_sum / clips.len() as f64);
    }
    work.set_trainable_tensors(&tensors)?;
    work.reverb.pin_dry_tap();
    Ok((work, epoch_losses))
}

/// Per-clip constants: encoder features, loudness, loss targets, noise.
struct ClipContext {
    feats: crate::dsp::Matrix,
    loudness: Vec<f64>,
    f0: Vec<f64>,
    problem: MixtureProblem,
    noise: Arc<NoiseFrames>,
    fir: Arc<FirDesign>,
    n_frames: usize,
}

/// Reconstruction loss and weight gradients for one clip.
fn clip_step(work: &SynthModel, clip: &ClipContext) -> Result<(f64, Vec<Vec<f64>>)> {
        let t = clip.n_frames;
        let mut g = crate::graph::DiffGraph::new();
        let weights = nets::bind_weights(&mut g, work, true)?;
        let feats = g.constant(clip.feats.data.clone(), Shape::matrix(t, clip.feats.cols))?;
        let z = nets::encoder_graph(&mut g, &weights, feats)?;
        let f0 = g.constant(clip.f0.clone(), Shape::vector(t))?;
        let loud = g.constant(clip.loudness.clone(), Shape::vector(t))?;
        let (amp, dist, noise_mags) = nets::decode_graph(&mut g, &weights, f0, z, loud)?;
        let sr = work.config.sample_rate;
        let harmonic = synth::harmonic_graph(
            &mut g,
            f0,
            amp,
            dist,
            work.config.hop(),
            sr as f64,
            clip.noise.n_samples,
        )?;
        let noisy = synth::noise_graph(&mut g, noise_mags, clip.noise.clone(), clip.fir.clone())?;
        let mut recon = g.add(harmonic, noisy)?;
        if let Some(ir) = weights.reverb {
            recon = g.conv_trunc(recon, ir)?;
        }
        let loss = clip.problem.attach_loss(&mut g, recon)?;
        let value = g.value(loss);
        g.backward(loss)?;
        let grads = weights.leaves.iter().map(|&l| g.grad(l)).collect();
        Ok((value, grads))
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// The dry tap of an enabled reverb is not trainable.
fn pin_reverb_tap(work: &SynthModel, tensors: &mut [Vec<f64>]) {
    if work.reverb.enabled {
        if let Some(last) = tensors.last_mut() {
            if let Some(first) = last.first_mut() {
                *first = 1.0;
            }
        }
    }
}
