//! Learned components: the timbre encoder (MFCC -> latent) and the decoder
//! (synthesis parameters -> control signals), plus model (de)serialization.
//!
//! The decoder is a per-frame MLP over `[scaled F0, z, scaled loudness]`
//! with layer normalization and a softplus nonlinearity, ending in three
//! heads: global amplitude (positive, bounded), harmonic distribution
//! (softmax over K), and noise-filter magnitudes (positive, bounded).

use crate::dsp::{self, AudioBuffer, Matrix, MfccConfig};
use crate::error::{Error, Result};
use crate::graph::{DiffGraph, DiffValue, Shape};
use crate::rng::SeededRng;
use crate::synth::{ControlSignals, ReverbIR};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One synthesis-parameter unit of loudness corresponds to this many dB of
/// A-weighted loudness, mapping the [-120, 0] dB range onto roughly
/// [-10, 0].
pub const LOUDNESS_UNIT_DB: f64 = 12.0;

/// Exponent of the positive squashing nonlinearity on the amplitude and
/// noise heads: `2 * sigmoid(x)^ln(10) + 1e-7`, strictly positive and
/// bounded above by 2.
pub const EXP_SIGMOID_EXPONENT: f64 = std::f64::consts::LN_10;

const MODEL_VERSION: &str = "mixsynth-model/1";

/// Per-source synthesis parameters: the optimization variables of the
/// fitting step. All three share the frame axis T.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Fundamental frequency per frame, Hz. May go negative during fitting;
    /// flooring happens only on the evaluation side.
    pub f0: Vec<f64>,
    /// Timbre latent, `T × D`.
    pub z: Matrix,
    /// Loudness per frame in model units (A-weighted dB / 12).
    pub loudness: Vec<f64>,
}

impl SynthParams {
    pub fn n_frames(&self) -> usize {
        self.f0.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.z.cols
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.f0.len();
        if self.z.rows != t || self.loudness.len() != t {
            return Err(Error::invalid(format!(
                "synthesis parameters misaligned: f0 {} frames, z {}, loudness {}",
                t,
                self.z.rows,
                self.loudness.len()
            )));
        }
        if t < 2 {
            return Err(Error::invalid("synthesis parameters need at least 2 frames"));
        }
        let finite = self.f0.iter().chain(&self.z.data).chain(&self.loudness);
        if finite.clone().any(|v| !v.is_finite()) {
            return Err(Error::invalid("synthesis parameters contain non-finite values"));
        }
        Ok(())
    }
}

/// Structural hyperparameters of a synthesizer model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub hop_ms: u32,
    /// K, number of harmonics.
    pub n_harmonics: usize,
    /// M, one-sided noise-filter bands; the FIR length is `(M-1)*2`.
    pub n_noise_bands: usize,
    /// D, timbre latent size.
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub encoder_hidden: usize,
    pub reverb_len: usize,
    pub reverb_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sample_rate: dsp::SAMPLE_RATE,
            hop_ms: dsp::HOP_MS,
            n_harmonics: 64,
            n_noise_bands: 65,
            latent_dim: 16,
            decoder_hidden: 256,
            decoder_layers: 3,
            encoder_hidden: 128,
            reverb_len: 8000,
            reverb_enabled: false,
        }
    }
}

impl ModelConfig {
    pub fn hop(&self) -> usize {
        (self.hop_ms as u64 * self.sample_rate as u64 / 1000) as usize
    }

    pub fn fir_len(&self) -> usize {
        (self.n_noise_bands - 1) * 2
    }

    fn decoder_input_dim(&self) -> usize {
        self.latent_dim + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_harmonics == 0
            || self.n_noise_bands < 2
            || self.latent_dim == 0
            || self.decoder_hidden == 0
            || self.decoder_layers == 0
            || self.encoder_hidden == 0
        {
            return Err(Error::invalid("model config has a zero-sized component"));
        }
        if (self.hop_ms as u64 * self.sample_rate as u64) % 1000 != 0 {
            return Err(Error::invalid("model hop is not a whole sample count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// Row-major `in_dim × out_dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    fn random(in_dim: usize, out_dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        DenseLayer {
            w: (0..in_dim * out_dim).map(|_| std * rng.normal()).collect(),
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    /// Plain forward for the non-graph paths.
    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            let row = x.row(r);
            let o = &mut out.data[r * self.out_dim..(r + 1) * self.out_dim];
            o.copy_from_slice(&self.b);
            for (i, &xv) in row.iter().enumerate() {
                let wrow = &self.w[i * self.out_dim..(i + 1) * self.out_dim];
                for (ov, &wv) in o.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
        out
    }
}

/// Decoder trunk layer: dense, layer norm, softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct NormedLayer {
    pub dense: DenseLayer,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Trained synthesizer weights: timbre encoder, decoder with three output
/// heads, and an optional reverb impulse response. Immutable during fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthModel {
    pub config: ModelConfig,
    pub encoder: Vec<DenseLayer>,
    pub decoder: Vec<NormedLayer>,
    pub head_amp: DenseLayer,
    pub head_harm: DenseLayer,
    pub head_noise: DenseLayer,
    pub reverb: ReverbIR,
}

impl SynthModel {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let he = |n: usize| (2.0 / n as f64).sqrt();

        let encoder = vec![
            DenseLayer::random(MFCC_COEFFS, config.encoder_hidden, he(MFCC_COEFFS), &mut rng),
            DenseLayer::random(
                config.encoder_hidden,
                config.latent_dim,
                (1.0 / config.encoder_hidden as f64).sqrt(),
                &mut rng,
            ),
        ];

        let mut decoder = Vec::with_capacity(config.decoder_layers);
        let mut in_dim = config.decoder_input_dim();
        for _ in 0..config.decoder_layers {
            decoder.push(NormedLayer {
                dense: DenseLayer::random(in_dim, config.decoder_hidden, he(in_dim), &mut rng),
                gamma: vec![1.0; config.decoder_hidden],
                beta: vec![0.0; config.decoder_hidden],
            });
            in_dim = config.decoder_hidden;
        }

        let head_std = 0.1;
        let head_amp = DenseLayer::random(config.decoder_hidden, 1, head_std, &mut rng);
        let head_harm =
            DenseLayer::random(config.decoder_hidden, config.n_harmonics, head_std, &mut rng);
        let head_noise =
            DenseLayer::random(config.decoder_hidden, config.n_noise_bands, head_std, &mut rng);

        let reverb = if config.reverb_enabled {
            ReverbIR::new_enabled(config.reverb_len)
        } else {
            ReverbIR::disabled()
        };

        Ok(SynthModel {
            config,
            encoder,
            decoder,
            head_amp,
            head_harm,
            head_noise,
            reverb,
        })
    }

    /// All trainable tensors in a fixed order (the serialization order).
    pub fn trainable_tensors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        for l in &self.decoder {
            out.push(l.dense.w.clone());
            out.push(l.dense.b.clone());
            out.push(l.gamma.clone());
            out.push(l.beta.clone());
        }
        for h in [&self.head_amp, &self.head_harm, &self.head_noise] {
            out.push(h.w.clone());
            out.push(h.b.clone());
        }
        if self.reverb.enabled {
            out.push(self.reverb.taps.clone());
        }
        out
    }

    /// Write tensors produced by [`SynthModel::trainable_tensors`] back.
    pub fn set_trainable_tensors(&mut self, tensors: &[Vec<f64>]) -> Result<()> {
        let mut it = tensors.iter();
        let mut take = |len: usize| -> Result<Vec<f64>> {
            let t = it
                .next()
                .ok_or_else(|| Error::invalid("tensor list too short for model"))?;
            if t.len() != len {
                return Err(Error::invalid(format!(
                    "tensor length {} does not match model slot of {}",
                    t.len(),
                    len
                )));
            }
            Ok(t.clone())
        };
        for l in &mut self.encoder {
            l.w = take(l.w.len())?;
            l.b = take(l.b.len())?;
        }
        for l in &mut self.decoder {
            l.dense.w = take(l.dense.w.len())?;
            l.dense.b = take(l.dense.b.len())?;
            l.gamma = take(l.gamma.len())?;
            l.beta = take(l.beta.len())?;
        }
        for h in [&mut self.head_amp, &mut self.head_harm, &mut self.head_noise] {
            h.w = take(h.w.len())?;
            h.b = take(h.b.len())?;
        }
        if self.reverb.enabled {
            self.reverb.taps = take(self.reverb.taps.len())?;
            self.reverb.pin_dry_tap();
        }
        if it.next().is_some() {
            return Err(Error::invalid("tensor list too long for model"));
        }
        Ok(())
    }

    /// Cheap bit-level fingerprint of all weights, for freeze assertions.
    pub fn weights_checksum(&self) -> u64 {
        let mut acc = 0u64;
        for t in self.trainable_tensors() {
            for v in t {
                acc = acc.rotate_left(7) ^ v.to_bits();
            }
        }
        acc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json_bytes(&bytes)
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut weights = Vec::new();
        for (name, shape, data) in self.weight_entries() {
            weights.push(WeightEntry {
                name,
                shape,
                data: B64.encode(f64s_to_le_bytes(data)),
            });
        }
        let file = ModelFile {
            version: MODEL_VERSION.to_string(),
            config: self.config.clone(),
            weights,
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(bytes)?;
        if file.version != MODEL_VERSION {
            return Err(Error::ModelSchema(format!(
                "unsupported version {:?}, expected {:?}",
                file.version, MODEL_VERSION
            )));
        }
        file.config.validate()?;
        let mut model = SynthModel::new_random(file.config, 0)?;

        let expected: Vec<(String, Vec<usize>)> = model
            .weight_entries()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect();
        if file.weights.len() != expected.len() {
            return Err(Error::ModelSchema(format!(
                "expected {} weight entries, found {}",
                expected.len(),
                file.weights.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for (entry, (name, shape)) in file.weights.iter().zip(&expected) {
            if &entry.name != name {
                return Err(Error::ModelSchema(format!(
                    "field {:?}: expected {:?} at this position",
                    entry.name, name
                )));
            }
            if &entry.shape != shape {
                return Err(Error::ModelSchema(format!(
                    "field {:?}: expected shape {:?}, got {:?}",
                    entry.name, shape, entry.shape
                )));
            }
            let raw = B64
                .decode(&entry.data)
                .map_err(|e| Error::ModelSchema(format!("field {:?}: bad base64: {e}", entry.name)))?;
            let values = le_bytes_to_f64s(&raw).ok_or_else(|| {
                Error::ModelSchema(format!("field {:?}: blob is not 8-byte aligned", entry.name))
            })?;
            let expect_len: usize = shape.iter().product();
            if values.len() != expect_len {
                return Err(Error::ModelSchema(format!(
                    "field {:?}: {} values for shape {:?}",
                    entry.name,
                    values.len(),
                    shape
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelSchema(format!(
                    "field {:?}: contains non-finite weights",
                    entry.name
                )));
            }
            tensors.push(values);
        }
        model.set_trainable_tensors(&tensors)?;
        if model.reverb.enabled && model.reverb.taps.first() != Some(&1.0) {
            return Err(Error::ModelSchema(
                "field \"reverb.ir\": first tap must be 1".to_string(),
            ));
        }
        Ok(model)
    }

    fn weight_entries(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.w"), vec![l.in_dim, l.out_dim], &l.w));
            out.push((format!("encoder.{i}.b"), vec![l.out_dim], &l.b));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((
                format!("decoder.{i}.w"),
                vec![l.dense.in_dim, l.dense.out_dim],
                &l.dense.w,
            ));
            out.push((format!("decoder.{i}.b"), vec![l.dense.out_dim], &l.dense.b));
            out.push((format!("decoder.{i}.gamma"), vec![l.gamma.len()], &l.gamma));
            out.push((format!("decoder.{i}.beta"), vec![l.beta.len()], &l.beta));
        }
        for (name, h) in [
            ("head_amp", &self.head_amp),
            ("head_harm", &self.head_harm),
            ("head_noise", &self.head_noise),
        ] {
            out.push((format!("{name}.w"), vec![h.in_dim, h.out_dim], &h.w));
            out.push((format!("{name}.b"), vec![h.out_dim], &h.b));
        }
        if self.reverb.enabled {
            out.push(("reverb.ir".to_string(), vec![self.reverb.taps.len()], &self.reverb.taps));
        }
        out
    }
}

const MFCC_COEFFS: usize = 30;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    config: ModelConfig,
    weights: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    data: String,
}

fn f64s_to_le_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn le_bytes_to_f64s(bytes: &[u8]) -> Option<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

// ── graph construction ──────────────────────────────────────────────────

/// Tape handles for every model tensor, in [`SynthModel::trainable_tensors`]
/// order when trainable.
pub struct WeightBinding {
    pub encoder: Vec<(DiffValue, DiffValue)>,
    pub decoder: Vec<(DiffValue, DiffValue, DiffValue, DiffValue)>,
    pub head_amp: (DiffValue, DiffValue),
    pub head_harm: (DiffValue, DiffValue),
    pub head_noise: (DiffValue, DiffValue),
    pub reverb: Option<DiffValue>,
    /// Leaf handles in tensor order (empty when bound as constants).
    pub leaves: Vec<DiffValue>,
}

/// Put every model tensor on the tape, as gradient-carrying leaves when
/// `trainable` (pretraining) or as constants (fitting).
pub fn bind_weights(g: &mut DiffGraph, model: &SynthModel, trainable: bool) -> Result<WeightBinding> {
    let mut leaves = Vec::new();
    let mut put = |g: &mut DiffGraph, data: &[f64], shape: Shape| -> Result<DiffValue> {
        let v = if trainable {
            g.leaf(data.to_vec(), shape)?
        } else {
            g.constant(data.to_vec(), shape)?
        };
        if trainable {
            leaves.push(v);
        }
        Ok(v)
    };

    let mut encoder = Vec::new();
    for l in &model.encoder {
        let w = put(g, &l.w, Shape::matrix(l.in_dim, l.out_dim))?;
        let b = put(g, &l.b, Shape::vector(l.out_dim))?;
        encoder.push((w, b));
    }
    let mut decoder = Vec::new();
    for l in &model.decoder {
        let w = put(g, &l.dense.w, Shape::matrix(l.dense.in_dim, l.dense.out_dim))?;
        let b = put(g, &l.dense.b, Shape::vector(l.dense.out_dim))?;
        let gamma = put(g, &l.gamma, Shape::vector(l.gamma.len()))?;
        let beta = put(g, &l.beta, Shape::vector(l.beta.len()))?;
        decoder.push((w, b, gamma, beta));
    }
    let mut head = |g: &mut DiffGraph, h: &DenseLayer| -> Result<(DiffValue, DiffValue)> {
        Ok((
            put(g, &h.w, Shape::matrix(h.in_dim, h.out_dim))?,
            put(g, &h.b, Shape::vector(h.out_dim))?,
        ))
    };
    let head_amp = head(g, &model.head_amp)?;
    let head_harm = head(g, &model.head_harm)?;
    let head_noise = head(g, &model.head_noise)?;
    let reverb = if model.reverb.enabled {
        Some(put(g, &model.reverb.taps, Shape::vector(model.reverb.taps.len()))?)
    } else {
        None
    };

    Ok(WeightBinding {
        encoder,
        decoder,
        head_amp,
        head_harm,
        head_noise,
        reverb,
        leaves,
    })
}

/// Positive bounded squashing for the amplitude and noise heads.
pub fn exp_sigmoid(g: &mut DiffGraph, x: DiffValue) -> DiffValue {
    let s = g.sigmoid(x);
    let p = g.powf(s, EXP_SIGMOID_EXPONENT);
    let scaled = g.mul_scalar(p, 2.0);
    g.add_scalar(scaled, 1e-7)
}

/// Decoder as a graph fragment. `f0` and `loudness` are `(T,1)`, `z` is
/// `(T,D)`. Returns `(amplitude (T,1), harmonic distribution (T,K), noise
/// magnitudes (T,M))`.
pub fn decode_graph(
    g: &mut DiffGraph,
    weights: &WeightBinding,
    f0: DiffValue,
    z: DiffValue,
    loudness: DiffValue,
) -> Result<(DiffValue, DiffValue, DiffValue)> {
    // F0 enters on a MIDI-like log scale / 127, loudness in model units / 10.
    let ratio = g.mul_scalar(f0, 1.0 / 440.0);
    let lg = g.log_floored(ratio);
    let semis = g.mul_scalar(lg, 12.0 / std::f64::consts::LN_2);
    let midi = g.add_scalar(semis, 69.0);
    let f0_feat = g.mul_scalar(midi, 1.0 / 127.0);
    let loud_feat = g.mul_scalar(loudness, 0.1);

    let mut h = g.concat_cols(&[f0_feat, z, loud_feat])?;
    for (w, b, gamma, beta) in &weights.decoder {
        let a = g.affine(h, *w, *b)?;
        let n = g.layer_norm(a, *gamma, *beta)?;
        h = g.softplus(n);
    }
    let amp_raw = g.affine(h, weights.head_amp.0, weights.head_amp.1)?;
    let amp = exp_sigmoid(g, amp_raw);
    let harm_raw = g.affine(h, weights.head_harm.0, weights.head_harm.1)?;
    let dist = g.softmax_rows(harm_raw);
    let noise_raw = g.affine(h, weights.head_noise.0, weights.head_noise.1)?;
    let noise = exp_sigmoid(g, noise_raw);
    Ok((amp, dist, noise))
}

/// Encoder as a graph fragment: MFCC features `(T,30)` -> latent `(T,D)`.
pub fn encoder_graph(
    g: &mut DiffGraph,
    weights: &WeightBinding,
    feats: DiffValue,
) -> Result<DiffValue> {
    let (w0, b0) = weights.encoder[0];
    let (w1, b1) = weights.encoder[1];
    let h = g.affine(feats, w0, b0)?;
    let h = g.softplus(h);
    g.affine(h, w1, b1)
}

// ── plain entry points ──────────────────────────────────────────────────

/// Map synthesis parameters to control signals through the decoder.
pub fn decode(params: &SynthParams, model: &SynthModel) -> Result<ControlSignals> {
    params.validate()?;
    if params.latent_dim() != model.config.latent_dim {
        return Err(Error::invalid(format!(
            "params have latent dim {}, model expects {}",
            params.latent_dim(),
            model.config.latent_dim
        )));
    }
    let t = params.n_frames();
    let mut g = DiffGraph::new();
    let weights = bind_weights(&mut g, model, false)?;
    let f0 = g.constant(params.f0.clone(), Shape::vector(t))?;
    let z = g.constant(params.z.data.clone(), Shape::matrix(t, params.z.cols))?;
    let loud = g.constant(params.loudness.clone(), Shape::vector(t))?;
    let (amp, dist, noise) = decode_graph(&mut g, &weights, f0, z, loud)?;
    Ok(ControlSignals {
        amplitude: g.data(amp).to_vec(),
        harmonic_distribution: Matrix::new(
            g.data(dist).to_vec(),
            t,
            model.config.n_harmonics,
        ),
        noise_magnitudes: Matrix::new(g.data(noise).to_vec(), t, model.config.n_noise_bands),
    })
}

/// MFCC features consumed by the timbre encoder.
pub fn encoder_features(x: &AudioBuffer) -> Result<Matrix> {
    dsp::mfcc(x, &MfccConfig::encoder())
}

/// Timbre latent from audio: MFCCs through the encoder MLP, `T × D` at the
/// model hop.
pub fn encode_timbre(x: &AudioBuffer, model: &SynthModel) -> Result<Matrix> {
    let hop = model.config.hop();
    if x.len() % hop != 0 {
        return Err(Error::invalid(format!(
            "audio length {} is not a whole number of {}-sample hops",
            x.len(),
            hop
        )));
    }
    let feats = encoder_features(x)?;
    let h = model.encoder[0].forward(&feats);
    let h = Matrix::new(
        h.data.iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p()).collect(),
        h.rows,
        h.cols,
    );
    Ok(model.encoder[1].forward(&h))
}

/// Loudness in model units (A-weighted dB / [`LOUDNESS_UNIT_DB`]) at the
/// 32 ms hop.
pub fn extract_loudness(x: &AudioBuffer) -> Result<Vec<f64>> {
    Ok(dsp::a_weighted_loudness(x, dsp::HOP_MS, dsp::LOUDNESS_FRAME_MS)?
        .into_iter()
        .map(|db| db / LOUDNESS_UNIT_DB)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use proptest::prelude::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_harmonics: 4,
            n_noise_bands: 5,
            latent_dim: 3,
            decoder_hidden: 8,
            decoder_layers: 2,
            encoder_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn random_params(t: usize, d: usize, seed: u64) -> SynthParams {
        let mut rng = SeededRng::new(seed);
        SynthParams {
            f0: (0..t).map(|_| rng.range(100.0, 800.0)).collect(),
            z: Matrix::new(rng.normal_vec(t * d), t, d),
            loudness: (0..t).map(|_| rng.range(-8.0, -1.0)).collect(),
        }
    }

    #[test]
    fn zero_final_encoder_layer_gives_zero_latent() {
        let mut model = SynthModel::new_random(small_config(), 1).unwrap();
        model.encoder[1].w.iter_mut().for_each(|v| *v = 0.0);
        model.encoder[1].b.iter_mut().for_each(|v| *v = 0.0);
        let x = AudioBuffer::new(vec![0.1; 512 * 8], dsp::SAMPLE_RATE).unwrap();
        let z = encode_timbre(&x, &model).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_timbre_shape_and_determinism() {
        let model = SynthModel::new_random(small_config(), 2).unwrap();
        let mut rng = SeededRng::new(3);
        let x = AudioBuffer::new(
            rng.normal_vec(192000).iter().map(|v| v * 0.1).collect::<Vec<_>>(),
            dsp::SAMPLE_RATE,
        )
        .unwrap();
        let z1 = encode_timbre(&x, &model).unwrap();
        let z2 = encode_timbre(&x, &model).unwrap();
        assert_eq!((z1.rows, z1.cols), (375, 3));
        assert_eq!(z1, z2);
    }

    #[test]
    fn encode_timbre_rejects_partial_hop() {
        let model = SynthModel::new_random(small_config(), 2).unwrap();
        let x = AudioBuffer::new(vec![0.0; 1000], dsp::SAMPLE_RATE).unwrap();
        assert!(encode_timbre(&x, &model).is_err());
    }

    #[test]
    fn encoder_and_decoder_are_independent() {
        // A gain change moves the latent (through the 0th MFCC path) but the
        // decoder is a pure function of its own inputs.
        let model = SynthModel::new_random(small_config(), 4).unwrap();
        let mut rng = SeededRng::new(5);
        let x = AudioBuffer::new(
            rng.normal_vec(512 * 8).iter().map(|v| v * 0.1).collect::<Vec<_>>(),
            dsp::SAMPLE_RATE,
        )
        .unwrap();
        let louder = AudioBuffer::new(
            x.samples.iter().map(|v| v * 2.0).collect::<Vec<_>>(),
            dsp::SAMPLE_RATE,
        )
        .unwrap();
        let z1 = encode_timbre(&x, &model).unwrap();
        let z2 = encode_timbre(&louder, &model).unwrap();
        assert_ne!(z1, z2);

        let params = random_params(8, 3, 6);
        let c1 = decode(&params, &model).unwrap();
        let c2 = decode(&params, &model).unwrap();
        assert_eq!(c1.amplitude, c2.amplitude);
        assert_eq!(c1.harmonic_distribution, c2.harmonic_distribution);
    }

    #[test]
    fn decode_outputs_satisfy_synth_invariants() {
        let model = SynthModel::new_random(small_config(), 7).unwrap();
        let params = random_params(12, 3, 8);
        let controls = decode(&params, &model).unwrap();
        controls.validate().unwrap();
        assert!(controls.amplitude.iter().all(|&a| a > 0.0 && a <= 2.0 + 1e-7));
        assert!(controls.noise_magnitudes.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn decode_rejects_non_finite_params() {
        let model = SynthModel::new_random(small_config(), 9).unwrap();
        let mut params = random_params(6, 3, 10);
        params.z.data[2] = f64::NAN;
        assert!(decode(&params, &model).is_err());
    }

    #[test]
    fn decode_grad_check() {
        let model = SynthModel::new_random(small_config(), 11).unwrap();
        let t = 3;
        let d = model.config.latent_dim;
        // O(1) leaf coordinates, mapped to physical ranges inside the
        // builder so one finite-difference step suits every coordinate.
        let mut rng = SeededRng::new(12);
        let point: Vec<f64> = (0..t + t * d + t).map(|_| rng.normal()).collect();

        let err = grad_check(
            move |g, leaf| {
                let weights = bind_weights(g, &model, false)?;
                let f0_raw = g.slice(leaf, 0, t)?;
                let f0s = g.mul_scalar(f0_raw, 80.0);
                let f0 = g.add_scalar(f0s, 300.0);
                let zf = g.slice(leaf, t, t * d)?;
                let z = g.reshape(zf, Shape::matrix(t, d))?;
                let loud_raw = g.slice(leaf, t + t * d, t)?;
                let louds = g.mul_scalar(loud_raw, 2.0);
                let loud = g.add_scalar(louds, -5.0);
                let (amp, dist, noise) = decode_graph(g, &weights, f0, z, loud)?;
                // Weighted sums make every head contribute to the scalar.
                let s1 = g.sum_reduce(amp);
                let wd = g.constant(
                    (0..dist.len()).map(|i| 0.1 + (i % 5) as f64 * 0.3).collect(),
                    dist.shape(),
                )?;
                let dw = g.mul(dist, wd)?;
                let s2 = g.sum_reduce(dw);
                let s3 = g.sum_reduce(noise);
                let a = g.add(s1, s2)?;
                Ok(g.add(a, s3)?)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn pretraining_weight_grad_check() {
        // Gradients w.r.t. the weights themselves (leaf-bound model).
        let model = SynthModel::new_random(small_config(), 13).unwrap();
        let params = random_params(3, 3, 14);
        let tensors = model.trainable_tensors();
        let flat: Vec<f64> = tensors.iter().flatten().copied().collect();
        let t = params.n_frames();
        let d = params.latent_dim();

        let err = grad_check(
            move |g, leaf| {
                // Rebuild the binding from slices of the flat leaf.
                let mut offset = 0;
                let mut sliced = Vec::new();
                for tensor in &tensors {
                    let s = g.slice(leaf, offset, tensor.len())?;
                    offset += tensor.len();
                    sliced.push(s);
                }
                let mut idx = 0;
                let mut next = |g: &mut DiffGraph, shape: Shape| -> Result<DiffValue> {
                    let v = g.reshape(sliced[idx], shape)?;
                    idx += 1;
                    Ok(v)
                };
                let mut encoder = Vec::new();
                for l in &model.encoder {
                    let w = next(g, Shape::matrix(l.in_dim, l.out_dim))?;
                    let b = next(g, Shape::vector(l.out_dim))?;
                    encoder.push((w, b));
                }
                let mut decoder = Vec::new();
                for l in &model.decoder {
                    let w = next(g, Shape::matrix(l.dense.in_dim, l.dense.out_dim))?;
                    let b = next(g, Shape::vector(l.dense.out_dim))?;
                    let gamma = next(g, Shape::vector(l.gamma.len()))?;
                    let beta = next(g, Shape::vector(l.beta.len()))?;
                    decoder.push((w, b, gamma, beta));
                }
                let head_amp = (next(g, Shape::matrix(model.head_amp.in_dim, 1))?, next(g, Shape::vector(1))?);
                let head_harm = (
                    next(g, Shape::matrix(model.head_harm.in_dim, model.head_harm.out_dim))?,
                    next(g, Shape::vector(model.head_harm.out_dim))?,
                );
                let head_noise = (
                    next(g, Shape::matrix(model.head_noise.in_dim, model.head_noise.out_dim))?,
                    next(g, Shape::vector(model.head_noise.out_dim))?,
                );
                let weights = WeightBinding {
                    encoder,
                    decoder,
                    head_amp,
                    head_harm,
                    head_noise,
                    reverb: None,
                    leaves: Vec::new(),
                };
                let f0 = g.constant(params.f0.clone(), Shape::vector(t))?;
                let z = g.constant(params.z.data.clone(), Shape::matrix(t, d))?;
                let loud = g.constant(params.loudness.clone(), Shape::vector(t))?;
                let (amp, dist, noise) = decode_graph(g, &weights, f0, z, loud)?;
                let s1 = g.sum_reduce(amp);
                let wd = g.constant(
                    (0..dist.len()).map(|i| 0.2 + (i % 3) as f64 * 0.4).collect(),
                    dist.shape(),
                )?;
                let dw = g.mul(dist, wd)?;
                let s2 = g.sum_reduce(dw);
                let s3 = g.sum_reduce(noise);
                let a = g.add(s1, s2)?;
                Ok(g.add(a, s3)?)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn model_round_trip_is_byte_identical() {
        let model = SynthModel::new_random(small_config(), 15).unwrap();
        let bytes = model.to_json_bytes().unwrap();
        let reloaded = SynthModel::from_json_bytes(&bytes).unwrap();
        let bytes2 = reloaded.to_json_bytes().unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(model, reloaded);
    }

    #[test]
    fn model_load_rejects_wrong_head_width() {
        let model = SynthModel::new_random(small_config(), 16).unwrap();
        let mut text = String::from_utf8(model.to_json_bytes().unwrap()).unwrap();
        // Declare K=6 in the config while the stored head keeps width 4.
        text = text.replace("\"n_harmonics\": 4", "\"n_harmonics\": 6");
        let err = SynthModel::from_json_bytes(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("head_harm"), "{err}");
    }

    #[test]
    fn model_load_rejects_truncated_file() {
        let model = SynthModel::new_random(small_config(), 17).unwrap();
        let bytes = model.to_json_bytes().unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(SynthModel::from_json_bytes(truncated).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_rows_stay_on_simplex(seed in 0u64..500) {
            let model = SynthModel::new_random(small_config(), 18).unwrap();
            let mut rng = SeededRng::new(seed);
            let t = 4;
            let params = SynthParams {
                f0: (0..t).map(|_| rng.range(50.0, 2000.0)).collect(),
                z: Matrix::new(rng.normal_vec(t * 3).iter().map(|v| v * 10.0).collect::<Vec<_>>(), t, 3),
                loudness: (0..t).map(|_| rng.range(-30.0, 10.0)).collect(),
            };
            let controls = decode(&params, &model).unwrap();
            for r in 0..t {
                let row = controls.harmonic_distribution.row(r);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            prop_assert!(controls.amplitude.iter().all(|v| v.is_finite()));
            prop_assert!(controls.noise_magnitudes.data.iter().all(|v| v.is_finite()));
        }
    }
}
