//! Mono 16 kHz WAV reading and writing, PCM16 and IEEE float32.

use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(msg: impl Into<String>) -> Error {
    Error::Wav(msg.into())
}

/// Read a mono 16 kHz WAV file (PCM16 or float32). Other rates or channel
/// counts are rejected with a remediation hint.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(wav_err(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(wav_err("fmt chunk too short"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = pos + 8 + size + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| wav_err("missing fmt chunk"))?;
    let data = data.ok_or_else(|| wav_err("missing data chunk"))?;

    if channels != 1 {
        return Err(wav_err(format!(
            "expected mono audio, got {channels} channels — downmix the file to one channel"
        )));
    }
    if rate != SAMPLE_RATE {
        return Err(wav_err(format!(
            "expected {SAMPLE_RATE} Hz, got {rate} Hz — resample the file to {SAMPLE_RATE} Hz first"
        )));
    }

    let samples: Vec<f64> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => {
            return Err(wav_err(format!(
                "unsupported encoding (format {format}, {bits}-bit) — use PCM16 or float32"
            )))
        }
    };
    AudioBuffer::new(samples, rate)
}

/// Write a mono WAV file in the requested sample format.
pub fn write_wav(path: &Path, x: &AudioBuffer, format: WavFormat) -> Result<()> {
    let n = x.len() as u32;
    let (format_code, bits, data_len): (u16, u16, u32) = match format {
        WavFormat::Pcm16 => (1, 16, n * 2),
        WavFormat::Float32 => (3, 32, n * 4),
    };
    let byte_rate = x.sample_rate * (bits as u32 / 8);
    let block_align = bits / 8;

    // Float files carry a fact chunk.
    let fact_len: u32 = if format == WavFormat::Float32 { 12 } else { 0 };
    let riff_size = 4 + (8 + 16) + fact_len + (8 + data_len);

    let mut out = Vec::with_capacity(riff_size as usize + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_size.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&x.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    if format == WavFormat::Float32 {
        out.extend_from_slice(b"fact");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match format {
        WavFormat::Pcm16 => {
            for &s in &x.samples {
                let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WavFormat::Float32 => {
            for &s in &x.samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
