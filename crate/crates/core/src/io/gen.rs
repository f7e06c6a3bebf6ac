//! Synthetic data generation: random note sequences rendered through the
//! model's own synthesizer from known synthesis parameters, so recovery
//! experiments have an exact optimum and full ground truth.

use crate::dsp::{AudioBuffer, Matrix};
use crate::error::{Error, Result};
use crate::mixture::{synthesize_mixture, MixtureState};
use crate::nets::{SynthModel, SynthParams};
use crate::rng::SeededRng;
use crate::score::{self, midi_to_hz, NoteEvent, ScoreTrack};
use std::sync::Arc;

/// Scenario for [`gen_synthetic`].
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub n_sources: usize,
    pub duration_s: f64,
    /// Probability of inserting a rest between notes.
    pub rest_prob: f64,
    /// Per-source inclusive MIDI pitch ranges; cycled when fewer than R.
    pub pitch_ranges: Vec<(u8, u8)>,
    /// Uniform note duration bounds in seconds.
    pub note_len_s: (f64, f64),
    /// Loudness anchors for the ground-truth walk (model units).
    pub l_high: f64,
    pub l_low: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_sources: 2,
            duration_s: 12.0,
            rest_prob: 0.1,
            pitch_ranges: vec![(55, 79), (43, 67)],
            note_len_s: (0.4, 1.2),
            l_high: score::L_HIGH_DEFAULT,
            l_low: score::L_LOW_DEFAULT,
        }
    }
}

pub struct GenOutput {
    pub mixture: AudioBuffer,
    pub stems: Vec<AudioBuffer>,
    pub truth: Vec<SynthParams>,
    pub score: Vec<ScoreTrack>,
    pub n_frames: usize,
}

fn frame_count(spec_duration_s: f64, sample_rate: u32, hop: usize) -> Result<usize> {
    let n_frames = (spec_duration_s * sample_rate as f64 / hop as f64).round() as usize;
    if n_frames < 2 {
        return Err(Error::invalid("duration too short for two frames"));
    }
    Ok(n_frames)
}

fn random_track(
    spec: &GenSpec,
    source: usize,
    duration_s: f64,
    rng: &mut SeededRng,
) -> Result<ScoreTrack> {
    let (lo, hi) = spec.pitch_ranges[source % spec.pitch_ranges.len()];
    if lo > hi {
        return Err(Error::invalid(format!("source {source}: empty pitch range {lo}..{hi}")));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut pitch = lo as i32 + rng.below((hi - lo + 1) as usize) as i32;
    let mut first = true;
    while t < duration_s {
        if !first && rng.uniform() < spec.rest_prob {
            t += rng.range(0.2, 0.6);
            continue;
        }
        first = false;
        let len = rng.range(spec.note_len_s.0, spec.note_len_s.1);
        let end = (t + len).min(duration_s);
        if end - t > 0.05 {
            events.push(NoteEvent {
                onset_s: t,
                offset_s: end,
                midi_note: pitch as u8,
            });
        }
        t = end;
        // Melodic random walk within the range.
        let step = rng.below(11) as i32 - 5;
        pitch = (pitch + step).clamp(lo as i32, hi as i32);
    }
    if events.is_empty() {
        return Err(Error::invalid(format!("source {source}: no notes generated")));
    }
    Ok(ScoreTrack { source_index: source, events })
}

fn truth_from_roll(
    roll: &score::PianoRoll,
    spec: &GenSpec,
    latent_dim: usize,
    rng: &mut SeededRng,
) -> Result<SynthParams> {
    let t = roll.n_frames();
    let f0 = score::init_f0(roll)?;

    // Loudness: a slow walk around l_high on active frames, the silence
    // level elsewhere; active frames stay clear of the voicing threshold.
    let mut loudness = Vec::with_capacity(t);
    let mut level: f64 = spec.l_high + 0.3 * rng.normal();
    for &p in &roll.notes {
        level += 0.08 * rng.normal();
        level = level.clamp(spec.l_low + 1.5, -0.5);
        loudness.push(if p >= 0 { level } else { spec.l_low });
    }

    // Timbre latent: per-dimension random walk, bounded.
    let mut z = vec![0.0; t * latent_dim];
    for d in 0..latent_dim {
        let mut v: f64 = rng.normal();
        for ti in 0..t {
            v = (v + 0.05 * rng.normal()).clamp(-3.0, 3.0);
            z[ti * latent_dim + d] = v;
        }
    }

    Ok(SynthParams { f0, z: Matrix::new(z, t, latent_dim), loudness })
}

/// Generate a synthetic mixture: random monophonic scores per source, known
/// ground-truth synthesis parameters, stems and mixture rendered through the
/// model. Same seed, same bytes.
pub fn gen_synthetic(spec: &GenSpec, model: &Arc<SynthModel>, seed: u64) -> Result<GenOutput> {
    if spec.n_sources == 0 {
        return Err(Error::invalid("need at least one source"));
    }
    if !(0.0..=0.9).contains(&spec.rest_prob) {
        return Err(Error::invalid("rest probability must be in [0, 0.9]"));
    }
    let nyquist = model.config.sample_rate as f64 / 2.0;
    for &(lo, hi) in &spec.pitch_ranges {
        if midi_to_hz(hi as f64) >= nyquist {
            return Err(Error::invalid(format!(
                "pitch {hi} maps to {:.0} Hz, at or above Nyquist ({nyquist} Hz)",
                midi_to_hz(hi as f64)
            )));
        }
        let _ = lo;
    }

    let hop = model.config.hop();
    let n_frames = frame_count(spec.duration_s, model.config.sample_rate, hop)?;
    let n_samples = n_frames * hop;
    let duration_s = n_samples as f64 / model.config.sample_rate as f64;

    let mut rng = SeededRng::new(seed);
    let mut tracks = Vec::with_capacity(spec.n_sources);
    let mut truth = Vec::with_capacity(spec.n_sources);
    for r in 0..spec.n_sources {
        let track = random_track(spec, r, duration_s, &mut rng)?;
        let roll = score::rasterize(&track, n_frames, model.config.hop_ms)?;
        truth.push(truth_from_roll(&roll, spec, model.config.latent_dim, &mut rng)?);
        tracks.push(track);
    }

    let state = MixtureState {
        sources: truth.clone(),
        models: vec![model.clone(); spec.n_sources],
        seed,
        n_samples,
    };
    let (mixture, stems) = synthesize_mixture(&state)?;
    Ok(GenOutput { mixture, stems, truth, score: tracks, n_frames })
}

/// Generate monophonic training clips with ground-truth parameters; clip
/// `i` renders with noise seed `seed + i`.
pub fn gen_clips(
    n_clips: usize,
    duration_s: f64,
    model: &Arc<SynthModel>,
    seed: u64,
) -> Result<Vec<(AudioBuffer, SynthParams)>> {
    let spec = GenSpec { n_sources: 1, duration_s, rest_prob: 0.0, ..GenSpec::default() };
    let mut out = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let g = gen_synthetic(&spec, model, seed.wrapping_add(i as u64))?;
        out.push((g.mixture, g.truth.into_iter().next().unwrap()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;

    fn small_model() -> Arc<SynthModel> {
        Arc::new(
            SynthModel::new_random(
                ModelConfig {
                    n_harmonics: 8,
                    n_noise_bands: 9,
                    latent_dim: 4,
                    decoder_hidden: 16,
                    decoder_layers: 2,
                    encoder_hidden: 8,
                    ..ModelConfig::default()
                },
                5,
            )
            .unwrap(),
        )
    }

    #[test]
    fn twelve_second_two_source_shapes() {
        let model = small_model();
        let out = gen_synthetic(&GenSpec::default(), &model, 0).unwrap();
        assert_eq!(out.mixture.len(), 192000);
        assert_eq!(out.n_frames, 375);
        assert_eq!(out.stems.len(), 2);
        assert_eq!(out.truth[0].n_frames(), 375);
        assert_eq!(out.score.len(), 2);
    }

    #[test]
    fn same_seed_same_bytes() {
        let model = small_model();
        let spec = GenSpec { duration_s: 2.0, ..GenSpec::default() };
        let a = gen_synthetic(&spec, &model, 7).unwrap();
        let b = gen_synthetic(&spec, &model, 7).unwrap();
        assert_eq!(a.mixture.samples, b.mixture.samples);
        assert_eq!(a.truth[0].f0, b.truth[0].f0);
        assert_eq!(a.score[0], b.score[0]);
        let c = gen_synthetic(&spec, &model, 8).unwrap();
        assert_ne!(a.mixture.samples, c.mixture.samples);
    }

    #[test]
    fn stems_sum_to_mixture_bitwise() {
        let model = small_model();
        let spec = GenSpec { duration_s: 2.0, ..GenSpec::default() };
        let out = gen_synthetic(&spec, &model, 3).unwrap();
        let mut acc = vec![0.0; out.mixture.len()];
        for stem in &out.stems {
            for (a, s) in acc.iter_mut().zip(&stem.samples) {
                *a += s;
            }
        }
        assert_eq!(out.mixture.samples, acc);
    }

    #[test]
    fn ground_truth_f0_matches_score_init() {
        let model = small_model();
        let spec = GenSpec { duration_s: 2.0, ..GenSpec::default() };
        let out = gen_synthetic(&spec, &model, 11).unwrap();
        for (track, truth) in out.score.iter().zip(&out.truth) {
            let roll = score::rasterize(track, out.n_frames, model.config.hop_ms).unwrap();
            let f0 = score::init_f0(&roll).unwrap();
            assert_eq!(truth.f0, f0);
        }
    }

    #[test]
    fn nyquist_pitch_rejected() {
        let model = small_model();
        let spec = GenSpec {
            pitch_ranges: vec![(120, 127)],
            duration_s: 1.0,
            ..GenSpec::default()
        };
        assert!(gen_synthetic(&spec, &model, 0).is_err());
    }

    #[test]
    fn clips_are_monophonic_with_truth() {
        let model = small_model();
        let clips = gen_clips(3, 1.0, &model, 2).unwrap();
        assert_eq!(clips.len(), 3);
        for (audio, params) in &clips {
            assert_eq!(audio.len(), params.n_frames() * model.config.hop());
            assert!(params.f0.iter().all(|&f| f > 0.0));
        }
    }
}
