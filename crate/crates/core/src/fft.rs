//! Shared FFT plumbing: a per-thread plan cache plus the framing and
//! windowed-magnitude helpers used by both the plain DSP functions and the
//! differentiable graph ops, so the two paths agree bitwise.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> =
        RefCell::new(HashMap::new());
}

/// Fetch a cached FFT plan for `len` (plans are reused across graphs).
pub fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let inverse = direction == FftDirection::Inverse;
    PLANS.with(|cell| {
        let mut map = cell.borrow_mut();
        map.entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                match direction {
                    FftDirection::Forward => planner.plan_fft_forward(len),
                    FftDirection::Inverse => planner.plan_fft_inverse(len),
                }
            })
            .clone()
    })
}

/// Slice `x` into overlapping frames of `frame_len` samples every `hop`
/// samples, zero-padding the tail. Frame count is `ceil(len / hop)`.
pub fn frame_signal(x: &[f64], frame_len: usize, hop: usize) -> (Vec<f64>, usize) {
    let n_frames = x.len().div_ceil(hop).max(1);
    let mut frames = vec![0.0; n_frames * frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        let take = frame_len.min(x.len().saturating_sub(start));
        frames[t * frame_len..t * frame_len + take].copy_from_slice(&x[start..start + take]);
    }
    (frames, n_frames)
}

/// One-sided spectra of windowed frames. Returns `n_frames × (frame_len/2+1)`
/// complex bins; magnitudes are derived by the callers so each can pick its
/// own epsilon policy.
pub fn windowed_spectra(
    frames: &[f64],
    n_frames: usize,
    frame_len: usize,
    window: &[f64],
) -> Vec<Complex<f64>> {
    assert_eq!(window.len(), frame_len);
    let n_bins = frame_len / 2 + 1;
    let fft = plan(frame_len, FftDirection::Forward);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
    let mut out = vec![Complex::new(0.0, 0.0); n_frames * n_bins];
    for t in 0..n_frames {
        let row = &frames[t * frame_len..(t + 1) * frame_len];
        for n in 0..frame_len {
            buf[n] = Complex::new(row[n] * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out[t * n_bins..(t + 1) * n_bins].copy_from_slice(&buf[..n_bins]);
    }
    out
}
