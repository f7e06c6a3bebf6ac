//! Evaluation metrics: mean absolute errors in F0 (cents, on voiced
//! frames), MFCC, and A-weighted loudness (dB), with optional
//! best-permutation source assignment.

use crate::dsp::{self, AudioBuffer, MfccConfig};
use crate::error::{Error, Result};
use crate::nets::SynthParams;
use crate::score::PianoRoll;
use serde::Serialize;

/// Estimated F0 values are floored here before the cents error; fits may
/// drive F0 negative.
pub const F0_FLOOR_HZ: f64 = 1e-7;

/// Mean absolute F0 error in cents over masked (voiced) frames:
/// `|1200 * log2(max(est, 1e-7) / ref)|`.
pub fn f0_mae_cents(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    if est.len() != reference.len() || mask.len() != est.len() {
        return Err(Error::invalid(format!(
            "f0_mae_cents: lengths differ (est {}, ref {}, mask {})",
            est.len(),
            reference.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&e, &r), &m) in est.iter().zip(reference).zip(mask) {
        if m {
            sum += (1200.0 * (e.max(F0_FLOOR_HZ) / r).log2()).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "f0_mae_cents: empty voiced mask, the mean is undefined",
        ));
    }
    Ok(sum / count as f64)
}

/// Mean absolute MFCC difference between two signals under the evaluation
/// analysis config (128 ms frames, 32 ms hop, 128 mel bins over 20–8000 Hz,
/// 30 coefficients).
pub fn mfcc_mae(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "mfcc_mae: signal lengths differ ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let cfg = MfccConfig::eval();
    let a = dsp::mfcc(est, &cfg)?;
    let b = dsp::mfcc(reference, &cfg)?;
    let n = a.data.len();
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n as f64)
}

/// Mean absolute framewise A-weighted loudness difference in dB.
pub fn loudness_mae_db(est: &AudioBuffer, reference: &AudioBuffer) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid(format!(
            "loudness_mae_db: signal lengths differ ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let a = dsp::a_weighted_loudness(est, dsp::HOP_MS, dsp::LOUDNESS_FRAME_MS)?;
    let b = dsp::a_weighted_loudness(reference, dsp::HOP_MS, dsp::LOUDNESS_FRAME_MS)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Voiced mask from ground-truth loudness: frames more than one model unit
/// above the silence level count as active.
pub fn activity_mask_from_loudness(loudness: &[f64], l_low: f64) -> Vec<bool> {
    loudness.iter().map(|&l| l > l_low + 1.0).collect()
}

/// Voiced mask from a rasterized score: note-active frames.
pub fn activity_mask_from_roll(roll: &PianoRoll) -> Vec<bool> {
    roll.notes.iter().map(|&p| p >= 0).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SourceEval {
    pub source: usize,
    pub f0_mae_cents: f64,
    pub mfcc_mae: f64,
    pub loudness_mae_db: f64,
    pub voiced_frames: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_source: Vec<SourceEval>,
    pub mean_f0_mae_cents: f64,
    pub mean_mfcc_mae: f64,
    pub mean_loudness_mae_db: f64,
    /// Estimate index assigned to each reference source.
    pub assignment: Vec<usize>,
}

impl EvalReport {
    /// Aligned text table, one row per source plus the mean.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8}{:>12}{:>10}{:>16}{:>10}\n",
            "source", "F0 [cent]", "MFCC", "Loudness [dB]", "voiced"
        ));
        for s in &self.per_source {
            out.push_str(&format!(
                "{:<8}{:>12.3}{:>10.4}{:>16.3}{:>10}\n",
                s.source, s.f0_mae_cents, s.mfcc_mae, s.loudness_mae_db, s.voiced_frames
            ));
        }
        out.push_str(&format!(
            "{:<8}{:>12.3}{:>10.4}{:>16.3}{:>10}\n",
            "mean",
            self.mean_f0_mae_cents,
            self.mean_mfcc_mae,
            self.mean_loudness_mae_db,
            ""
        ));
        out
    }
}

/// How estimated sources are matched to reference sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Trust the source order (score-informed fits).
    ByIndex,
    /// Exhaustive best permutation under summed F0 cents MAE (R <= 4).
    BestF0,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..n {
            let mut q: Vec<usize> = p.iter().map(|&v| if v >= slot { v + 1 } else { v }).collect();
            q.insert(0, slot);
            out.push(q);
        }
    }
    out
}

/// Full evaluation of estimated parameters and resynthesized stems against
/// references. `masks[r]` is the voiced mask of reference source `r`.
pub fn evaluate(
    est_params: &[SynthParams],
    ref_params: &[SynthParams],
    est_stems: &[AudioBuffer],
    ref_stems: &[AudioBuffer],
    masks: &[Vec<bool>],
    assignment: Assignment,
) -> Result<EvalReport> {
    let r = ref_params.len();
    if est_params.len() != r || est_stems.len() != r || ref_stems.len() != r || masks.len() != r {
        return Err(Error::invalid(
            "evaluate: estimate/reference/stems/mask counts differ",
        ));
    }

    let perm = match assignment {
        Assignment::ByIndex => (0..r).collect::<Vec<_>>(),
        Assignment::BestF0 => {
            if r > 4 {
                return Err(Error::invalid(
                    "best-permutation assignment supports at most 4 sources; use index assignment",
                ));
            }
            let mut best: Option<(f64, Vec<usize>)> = None;
            for perm in permutations(r) {
                let mut total = 0.0;
                for (ref_idx, &est_idx) in perm.iter().enumerate() {
                    total += f0_mae_cents(
                        &est_params[est_idx].f0,
                        &ref_params[ref_idx].f0,
                        &masks[ref_idx],
                    )?;
                }
                if best.as_ref().is_none_or(|(b, _)| total < *b) {
                    best = Some((total, perm));
                }
            }
            best.expect("at least one permutation").1
        }
    };

    let mut per_source = Vec::with_capacity(r);
    for (ref_idx, &est_idx) in perm.iter().enumerate() {
        let voiced = masks[ref_idx].iter().filter(|&&m| m).count();
        per_source.push(SourceEval {
            source: ref_idx,
            f0_mae_cents: f0_mae_cents(
                &est_params[est_idx].f0,
                &ref_params[ref_idx].f0,
                &masks[ref_idx],
            )?,
            mfcc_mae: mfcc_mae(&est_stems[est_idx], &ref_stems[ref_idx])?,
            loudness_mae_db: loudness_mae_db(&est_stems[est_idx], &ref_stems[ref_idx])?,
            voiced_frames: voiced,
        });
    }
    let mean = |f: fn(&SourceEval) -> f64| {
        per_source.iter().map(f).sum::<f64>() / per_source.len() as f64
    };
    Ok(EvalReport {
        mean_f0_mae_cents: mean(|s| s.f0_mae_cents),
        mean_mfcc_mae: mean(|s| s.mfcc_mae),
        mean_loudness_mae_db: mean(|s| s.loudness_mae_db),
        per_source,
        assignment: perm,
    })
}
