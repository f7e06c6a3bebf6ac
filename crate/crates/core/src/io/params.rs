//! Synthesis-parameter files: a JSON header plus base64 little-endian f64
//! blobs per source, byte-stable across round trips.

use crate::dsp::Matrix;
use crate::error::{Error, Result};
use crate::nets::SynthParams;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::path::Path;

const PARAMS_VERSION: &str = "mixsynth-params/1";

/// Header of a parameter file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamHeader {
    pub sample_rate: u32,
    pub hop_ms: u32,
    pub frames: usize,
    pub latent_dim: usize,
    pub n_sources: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    version: String,
    #[serde(flatten)]
    header: ParamHeader,
    sources: Vec<SourceBlobs>,
}

#[derive(Serialize, Deserialize)]
struct SourceBlobs {
    f0: String,
    z: String,
    loudness: String,
}

fn encode(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode(s: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::invalid(format!("param blob {what}: bad base64: {e}")))?;
    if bytes.len() != expect * 8 {
        return Err(Error::invalid(format!(
            "param blob {what}: {} bytes, expected {}",
            bytes.len(),
            expect * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn params_to_bytes(params: &[SynthParams], sample_rate: u32, hop_ms: u32) -> Result<Vec<u8>> {
    if params.is_empty() {
        return Err(Error::invalid("no sources to save"));
    }
    let frames = params[0].n_frames();
    let latent_dim = params[0].latent_dim();
    for (r, p) in params.iter().enumerate() {
        p.validate()?;
        if p.n_frames() != frames || p.latent_dim() != latent_dim {
            return Err(Error::invalid(format!("source {r}: inconsistent shapes")));
        }
    }
    let file = ParamFile {
        version: PARAMS_VERSION.to_string(),
        header: ParamHeader {
            sample_rate,
            hop_ms,
            frames,
            latent_dim,
            n_sources: params.len(),
        },
        sources: params
            .iter()
            .map(|p| SourceBlobs {
                f0: encode(&p.f0),
                z: encode(&p.z.data),
                loudness: encode(&p.loudness),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<(Vec<SynthParams>, ParamHeader)> {
    let file: ParamFile = serde_json::from_slice(bytes)?;
    if file.version != PARAMS_VERSION {
        return Err(Error::invalid(format!(
            "unsupported params version {:?}, expected {:?}",
            file.version, PARAMS_VERSION
        )));
    }
    let h = &file.header;
    if file.sources.len() != h.n_sources {
        return Err(Error::invalid(format!(
            "header says {} sources, file has {}",
            h.n_sources,
            file.sources.len()
        )));
    }
    let mut out = Vec::with_capacity(file.sources.len());
    for (r, blobs) in file.sources.iter().enumerate() {
        let p = SynthParams {
            f0: decode(&blobs.f0, h.frames, &format!("source {r} f0"))?,
            z: Matrix::new(
                decode(&blobs.z, h.frames * h.latent_dim, &format!("source {r} z"))?,
                h.frames,
                h.latent_dim,
            ),
            loudness: decode(&blobs.loudness, h.frames, &format!("source {r} loudness"))?,
        };
        p.validate()?;
        out.push(p);
    }
    Ok((out, file.header.clone()))
}

pub fn save_params(params: &[SynthParams], sample_rate: u32, hop_ms: u32, path: &Path) -> Result<()> {
    std::fs::write(path, params_to_bytes(params, sample_rate, hop_ms)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(Vec<SynthParams>, ParamHeader)> {
    params_from_bytes(&std::fs::read(path)?)
}
