//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`DiffGraph`] records every primitive operation applied to [`DiffValue`]
//! handles in construction order; [`DiffGraph::backward`] sweeps the record
//! once in reverse and accumulates gradients by the chain rule. The op set is
//! exactly what the synthesizer, the control networks, and the multiscale
//! spectral loss need — this is not a general tensor library.
//!
//! All values are 64-bit. Ops are pure and the backward sweep is a fixed
//! sequential traversal, so identical graphs produce bitwise-identical
//! gradients.

use crate::dsp::{upsample_linear, upsample_linear_adjoint, MelFilterbank};
use crate::error::{Error, Result};
use crate::fft;
use crate::synth::{FirDesign, NoiseFrames};
use rustfft::num_complex::Complex;
use rustfft::FftDirection;
use std::fmt;
use std::sync::Arc;

/// Floor applied inside the log op so near-silent spectrogram bins keep a
/// finite value and a bounded gradient.
pub const LOG_FLOOR: f64 = 1e-6;

/// Epsilon inside the differentiable magnitude `sqrt(re^2 + im^2 + EPS^2)`;
/// plain |.| has no gradient at zero.
pub const MAG_EPS: f64 = 1e-12;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Row-major array shape. Vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Handle to a recorded value: node id plus shape. Data and gradient live in
/// the owning [`DiffGraph`].
#[derive(Clone, Copy, Debug)]
pub struct DiffValue {
    id: usize,
    shape: Shape,
}

impl DiffValue {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    LogFloored(usize),
    Sin(usize),
    Sigmoid(usize),
    Softplus(usize),
    Pow(usize, f64),
    Cumsum(usize),
    Upsample {
        x: usize,
        hop: usize,
    },
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    Frame {
        x: usize,
        frame_len: usize,
        hop: usize,
    },
    DftMag {
        x: usize,
        window: Arc<Vec<f64>>,
        spectra: Vec<Complex<f64>>,
    },
    MelProject {
        x: usize,
        fb: Arc<MelFilterbank>,
    },
    SumReduce(usize),
    L1Dist(usize, usize),
    Col {
        x: usize,
        col: usize,
    },
    ConcatCols(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Fused additive bank: exclusive wrapped phase accumulation of `omega`,
    /// per-harmonic amplitude upsampling, Nyquist masking, sinusoid sum.
    HarmonicBank {
        omega: usize,
        amp: usize,
        dist: usize,
        f0_samples: usize,
        hop: usize,
        sample_rate: f64,
        phase: Vec<f64>,
    },
    /// Fused filtered-noise bank: per-frame FIR from magnitude bands,
    /// convolution with fixed windowed noise frames, overlap-add.
    NoiseBank {
        mags: usize,
        noise: Arc<NoiseFrames>,
        fir: Arc<FirDesign>,
    },
    /// Linear convolution truncated to the input length (reverb).
    ConvTrunc {
        x: usize,
        ir: usize,
    },
}

struct Node {
    op: Op,
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Recorded computation: an ordered list of primitive ops, acyclic by
/// construction (operands always precede their consumers).
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl Default for DiffGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        DiffGraph { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Value data for a handle.
    pub fn data(&self, v: DiffValue) -> &[f64] {
        &self.nodes[v.id].data
    }

    /// Scalar convenience accessor.
    pub fn value(&self, v: DiffValue) -> f64 {
        self.nodes[v.id].data[0]
    }

    /// Gradient for a handle; all-zero until a backward pass has run.
    pub fn grad(&self, v: DiffValue) -> Vec<f64> {
        match &self.nodes[v.id].grad {
            Some(g) => g.clone(),
            None => vec![0.0; v.len()],
        }
    }

    fn push(&mut self, op: Op, shape: Shape, data: Vec<f64>, needs_grad: bool) -> DiffValue {
        debug_assert_eq!(data.len(), shape.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            needs_grad,
        });
        DiffValue { id, shape }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Record an optimization variable; gradients will be accumulated for it.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Result<DiffValue> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "leaf",
                format!("data length {} vs shape {}", data.len(), shape),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data, true))
    }

    /// Record a constant; backward never propagates into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Result<DiffValue> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "constant",
                format!("data length {} vs shape {}", data.len(), shape),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn scalar_constant(&mut self, v: f64) -> DiffValue {
        self.push(Op::Leaf, Shape::scalar(), vec![v], false)
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: DiffValue,
        b: DiffValue,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<DiffValue> {
        if a.shape != b.shape {
            return Err(Error::shape(name, format!("{} vs {}", a.shape, b.shape)));
        }
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(op(a.id, b.id), a.shape, data, needs))
    }

    pub fn add(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ── scalar broadcast and elementwise unary ops ──────────────────────

    fn unary(
        &mut self,
        a: DiffValue,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> DiffValue {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| f(x)).collect();
        let needs = self.nodes[a.id].needs_grad;
        self.push(op(a.id), a.shape, data, needs)
    }

    pub fn add_scalar(&mut self, a: DiffValue, c: f64) -> DiffValue {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn mul_scalar(&mut self, a: DiffValue, c: f64) -> DiffValue {
        self.unary(a, |x| x * c, |i| Op::MulScalar(i, c))
    }

    pub fn exp(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// `ln(max(x, LOG_FLOOR))`; zero gradient in the floored region.
    pub fn log_floored(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::LogFloored)
    }

    pub fn sin(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn sigmoid(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: DiffValue) -> DiffValue {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn powf(&mut self, a: DiffValue, p: f64) -> DiffValue {
        self.unary(a, |x| x.powf(p), |i| Op::Pow(i, p))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Inclusive prefix sum along a vector.
    pub fn cumsum(&mut self, a: DiffValue) -> Result<DiffValue> {
        if !a.shape.is_vector() {
            return Err(Error::shape("cumsum", format!("expected vector, got {}", a.shape)));
        }
        let mut data = Vec::with_capacity(a.len());
        let mut acc = 0.0;
        for &x in &self.nodes[a.id].data {
            acc += x;
            data.push(acc);
        }
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(Op::Cumsum(a.id), a.shape, data, needs))
    }

    /// Piecewise-linear upsampling from frame rate to sample rate; frame
    /// centers sit at `t*hop + hop/2`, endpoints held beyond the outer
    /// centers.
    pub fn upsample(&mut self, a: DiffValue, hop: usize, total: usize) -> Result<DiffValue> {
        if !a.shape.is_vector() || a.len() < 2 {
            return Err(Error::shape(
                "upsample",
                format!("expected vector of at least 2 frames, got {}", a.shape),
            ));
        }
        if hop == 0 {
            return Err(Error::invalid("upsample: hop must be positive"));
        }
        let mut data = vec![0.0; total];
        upsample_linear(&self.nodes[a.id].data, hop, &mut data);
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(Op::Upsample { x: a.id, hop }, Shape::vector(total), data, needs))
    }

    /// `x @ w + b` with `x: (T, in)`, `w: (in, out)`, `b: (out,)` broadcast
    /// over rows.
    pub fn affine(&mut self, x: DiffValue, w: DiffValue, b: DiffValue) -> Result<DiffValue> {
        let (t, d_in) = (x.shape.rows, x.shape.cols);
        let (w_in, d_out) = (w.shape.rows, w.shape.cols);
        if d_in != w_in || b.len() != d_out {
            return Err(Error::shape(
                "affine",
                format!("x {} w {} b {}", x.shape, w.shape, b.shape),
            ));
        }
        let xs = &self.nodes[x.id].data;
        let ws = &self.nodes[w.id].data;
        let bs = &self.nodes[b.id].data;
        let mut data = vec![0.0; t * d_out];
        for r in 0..t {
            let row = &mut data[r * d_out..(r + 1) * d_out];
            row.copy_from_slice(bs);
            for i in 0..d_in {
                let xv = xs[r * d_in + i];
                let wrow = &ws[i * d_out..(i + 1) * d_out];
                for (o, wv) in wrow.iter().enumerate() {
                    row[o] += xv * wv;
                }
            }
        }
        let needs = self.needs(&[x.id, w.id, b.id]);
        Ok(self.push(
            Op::Affine { x: x.id, w: w.id, b: b.id },
            Shape::matrix(t, d_out),
            data,
            needs,
        ))
    }

    /// Slice a signal into overlapping zero-padded frames: `(N,) -> (F, frame_len)`.
    pub fn frame_signal(&mut self, x: DiffValue, frame_len: usize, hop: usize) -> Result<DiffValue> {
        if !x.shape.is_vector() {
            return Err(Error::shape("frame", format!("expected vector, got {}", x.shape)));
        }
        if frame_len == 0 || hop == 0 {
            return Err(Error::invalid("frame: frame_len and hop must be positive"));
        }
        let (frames, n_frames) = fft::frame_signal(&self.nodes[x.id].data, frame_len, hop);
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(
            Op::Frame { x: x.id, frame_len, hop },
            Shape::matrix(n_frames, frame_len),
            frames,
            needs,
        ))
    }

    /// Windowed one-sided DFT magnitude per frame:
    /// `(F, L) -> (F, L/2+1)`, magnitude `sqrt(re^2 + im^2 + MAG_EPS^2)`.
    pub fn dft_magnitude(&mut self, x: DiffValue, window: Arc<Vec<f64>>) -> Result<DiffValue> {
        let (n_frames, frame_len) = (x.shape.rows, x.shape.cols);
        if window.len() != frame_len {
            return Err(Error::shape(
                "dft_magnitude",
                format!("window length {} vs frame length {}", window.len(), frame_len),
            ));
        }
        let n_bins = frame_len / 2 + 1;
        let spectra = fft::windowed_spectra(&self.nodes[x.id].data, n_frames, frame_len, &window);
        let data: Vec<f64> = spectra
            .iter()
            .map(|c| (c.re * c.re + c.im * c.im + MAG_EPS * MAG_EPS).sqrt())
            .collect();
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(
            Op::DftMag { x: x.id, window, spectra },
            Shape::matrix(n_frames, n_bins),
            data,
            needs,
        ))
    }

    /// Project magnitude rows through a mel filterbank: `(F, bins) -> (F, mels)`.
    pub fn mel_project(&mut self, x: DiffValue, fb: Arc<MelFilterbank>) -> Result<DiffValue> {
        let (n_frames, n_bins) = (x.shape.rows, x.shape.cols);
        if n_bins != fb.n_bins {
            return Err(Error::shape(
                "mel_project",
                format!("input has {} bins, filterbank expects {}", n_bins, fb.n_bins),
            ));
        }
        let n_mels = fb.n_mels;
        let xs = &self.nodes[x.id].data;
        let mut data = vec![0.0; n_frames * n_mels];
        for t in 0..n_frames {
            let row = &xs[t * n_bins..(t + 1) * n_bins];
            let out = &mut data[t * n_mels..(t + 1) * n_mels];
            for m in 0..n_mels {
                let w = &fb.weights[m * n_bins..(m + 1) * n_bins];
                out[m] = w.iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        let needs = self.nodes[x.id].needs_grad;
        Ok(self.push(
            Op::MelProject { x: x.id, fb },
            Shape::matrix(n_frames, n_mels),
            data,
            needs,
        ))
    }

    /// Sum all entries into a scalar.
    pub fn sum_reduce(&mut self, a: DiffValue) -> DiffValue {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::SumReduce(a.id), Shape::scalar(), vec![s], needs)
    }

    /// L1 distance `sum |a - b|` as a scalar.
    pub fn l1_distance(&mut self, a: DiffValue, b: DiffValue) -> Result<DiffValue> {
        if a.shape != b.shape {
            return Err(Error::shape("l1_distance", format!("{} vs {}", a.shape, b.shape)));
        }
        let s: f64 = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(Op::L1Dist(a.id, b.id), Shape::scalar(), vec![s], needs))
    }

    /// Extract one matrix column as a vector.
    pub fn col(&mut self, a: DiffValue, col: usize) -> Result<DiffValue> {
        if col >= a.shape.cols {
            return Err(Error::shape(
                "col",
                format!("column {} out of range for {}", col, a.shape),
            ));
        }
        let (rows, cols) = (a.shape.rows, a.shape.cols);
        let data: Vec<f64> = (0..rows).map(|r| self.nodes[a.id].data[r * cols + col]).collect();
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(Op::Col { x: a.id, col }, Shape::vector(rows), data, needs))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[DiffValue]) -> Result<DiffValue> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let rows = parts[0].shape.rows;
        if parts.iter().any(|p| p.shape.rows != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!(
                    "row counts differ: {:?}",
                    parts.iter().map(|p| p.shape.rows).collect::<Vec<_>>()
                ),
            ));
        }
        let cols: usize = parts.iter().map(|p| p.shape.cols).sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.shape.cols;
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&self.nodes[p.id].data[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Op::ConcatCols(ids), Shape::matrix(rows, cols), data, needs))
    }

    /// Contiguous slice of the flattened data, returned as a vector.
    pub fn slice(&mut self, a: DiffValue, start: usize, len: usize) -> Result<DiffValue> {
        if start + len > a.len() {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} out of {} elements", start, start + len, a.len()),
            ));
        }
        let data = self.nodes[a.id].data[start..start + len].to_vec();
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(Op::Slice { x: a.id, start }, Shape::vector(len), data, needs))
    }

    /// Reinterpret the data with a new shape of equal length.
    pub fn reshape(&mut self, a: DiffValue, shape: Shape) -> Result<DiffValue> {
        if shape.len() != a.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} has {} elements, target {} has {}", a.shape, a.len(), shape, shape.len()),
            ));
        }
        let data = self.nodes[a.id].data.clone();
        let needs = self.nodes[a.id].needs_grad;
        Ok(self.push(Op::Reshape(a.id), shape, data, needs))
    }

    /// Row-wise softmax (shift-stable).
    pub fn softmax_rows(&mut self, a: DiffValue) -> DiffValue {
        let (rows, cols) = (a.shape.rows, a.shape.cols);
        let xs = &self.nodes[a.id].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.nodes[a.id].needs_grad;
        self.push(Op::SoftmaxRows(a.id), a.shape, data, needs)
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: DiffValue, gamma: DiffValue, beta: DiffValue) -> Result<DiffValue> {
        let (rows, cols) = (x.shape.rows, x.shape.cols);
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("x {} gamma {} beta {}", x.shape, gamma.shape, beta.shape),
            ));
        }
        const EPS: f64 = 1e-5;
        let xs = &self.nodes[x.id].data;
        let gs = &self.nodes[gamma.id].data;
        let bs = &self.nodes[beta.id].data;
        let mut data = vec![0.0; rows * cols];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            let out = &mut data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                out[c] = gs[c] * (row[c] - m) * is + bs[c];
            }
        }
        let needs = self.needs(&[x.id, gamma.id, beta.id]);
        Ok(self.push(
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, mean, inv_std },
            x.shape,
            data,
            needs,
        ))
    }

    // ── fused synthesis ops ─────────────────────────────────────────────

    /// Additive sinusoid bank. `omega` holds per-sample phase increments in
    /// radians; the op accumulates an exclusive, wrapped phase (zero initial
    /// phase), upsamples per-harmonic amplitudes `amp[t] * dist[t,k]` from
    /// frame rate, zeroes any harmonic whose instantaneous frequency exceeds
    /// Nyquist, and sums `a_k(n) * sin((k+1) * phase(n))`.
    ///
    /// `f0_samples` is read only to evaluate the Nyquist mask; the mask is a
    /// constant with respect to differentiation.
    pub fn harmonic_bank(
        &mut self,
        omega: DiffValue,
        amp: DiffValue,
        dist: DiffValue,
        f0_samples: DiffValue,
        hop: usize,
        sample_rate: f64,
    ) -> Result<DiffValue> {
        let n = omega.len();
        let t_frames = amp.shape.rows;
        if !omega.shape.is_vector() || !amp.shape.is_vector() || !f0_samples.shape.is_vector() {
            return Err(Error::shape(
                "harmonic_bank",
                format!("omega {} amp {} f0 {}", omega.shape, amp.shape, f0_samples.shape),
            ));
        }
        if dist.shape.rows != t_frames || f0_samples.len() != n {
            return Err(Error::shape(
                "harmonic_bank",
                format!(
                    "amp {} dist {} f0_samples {} omega {}",
                    amp.shape, dist.shape, f0_samples.shape, omega.shape
                ),
            ));
        }
        if t_frames < 2 {
            return Err(Error::invalid("harmonic_bank: need at least 2 frames"));
        }
        let k = dist.shape.cols;
        let nyquist = sample_rate / 2.0;

        // Exclusive prefix phase, wrapped into [0, 2pi) every step so sine
        // arguments stay small for all harmonics.
        let omegas = &self.nodes[omega.id].data;
        let mut phase = vec![0.0; n];
        let mut acc = 0.0f64;
        for i in 0..n {
            phase[i] = acc;
            acc += omegas[i];
            acc -= TWO_PI * (acc / TWO_PI).floor();
        }

        let amps = &self.nodes[amp.id].data;
        let dists = &self.nodes[dist.id].data;
        let f0s = &self.nodes[f0_samples.id].data;
        let mut out = vec![0.0; n];
        let mut a_col = vec![0.0; t_frames];
        let mut a_smp = vec![0.0; n];
        for h in 0..k {
            let mult = (h + 1) as f64;
            for t in 0..t_frames {
                a_col[t] = amps[t] * dists[t * k + h];
            }
            upsample_linear(&a_col, hop, &mut a_smp);
            for i in 0..n {
                if (mult * f0s[i]).abs() <= nyquist {
                    out[i] += a_smp[i] * (mult * phase[i]).sin();
                }
            }
        }

        let needs = self.needs(&[omega.id, amp.id, dist.id]);
        Ok(self.push(
            Op::HarmonicBank {
                omega: omega.id,
                amp: amp.id,
                dist: dist.id,
                f0_samples: f0_samples.id,
                hop,
                sample_rate,
                phase,
            },
            Shape::vector(n),
            out,
            needs,
        ))
    }

    /// Filtered-noise bank over fixed noise frames; differentiable in the
    /// per-frame magnitude bands only.
    pub fn noise_bank(
        &mut self,
        mags: DiffValue,
        noise: Arc<NoiseFrames>,
        fir: Arc<FirDesign>,
    ) -> Result<DiffValue> {
        let (t_frames, m) = (mags.shape.rows, mags.shape.cols);
        if m != fir.n_bands {
            return Err(Error::shape(
                "noise_bank",
                format!("mags {} vs FIR with {} bands", mags.shape, fir.n_bands),
            ));
        }
        if t_frames != noise.n_frames {
            return Err(Error::shape(
                "noise_bank",
                format!("mags {} vs {} noise frames", mags.shape, noise.n_frames),
            ));
        }
        let n = noise.n_samples;
        let f_len = noise.frame_len;
        let l = fir.fir_len;
        let ms = &self.nodes[mags.id].data;
        let mut out = vec![0.0; n];
        let mut h = vec![0.0; l];
        let mut y = vec![0.0; f_len + l - 1];
        for t in 0..t_frames {
            fir.design(&ms[t * m..(t + 1) * m], &mut h);
            let frame = &noise.frames[t * f_len..(t + 1) * f_len];
            y.iter_mut().for_each(|v| *v = 0.0);
            for (lag, &hv) in h.iter().enumerate() {
                if hv != 0.0 {
                    for (i, &nv) in frame.iter().enumerate() {
                        y[i + lag] += hv * nv;
                    }
                }
            }
            // Compensate the causal FIR delay so the filtered frame stays
            // aligned with its analysis frame.
            let offset = t as isize * noise.hop as isize - (l / 2) as isize;
            for (j, &yv) in y.iter().enumerate() {
                let pos = offset + j as isize;
                if pos >= 0 && (pos as usize) < n {
                    out[pos as usize] += yv;
                }
            }
        }
        let needs = self.nodes[mags.id].needs_grad;
        Ok(self.push(
            Op::NoiseBank { mags: mags.id, noise, fir },
            Shape::vector(n),
            out,
            needs,
        ))
    }

    /// Linear convolution of `x` with `ir`, truncated to `x`'s length.
    pub fn conv_trunc(&mut self, x: DiffValue, ir: DiffValue) -> Result<DiffValue> {
        if !x.shape.is_vector() || !ir.shape.is_vector() {
            return Err(Error::shape(
                "conv_trunc",
                format!("x {} ir {}", x.shape, ir.shape),
            ));
        }
        let n = x.len();
        let data = conv_truncated(&self.nodes[x.id].data, &self.nodes[ir.id].data, n);
        let needs = self.needs(&[x.id, ir.id]);
        Ok(self.push(Op::ConvTrunc { x: x.id, ir: ir.id }, Shape::vector(n), data, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep: fills `grad` with `dLoss/dValue` for every value the
    /// loss depends on; values outside that cone keep a zero gradient.
    pub fn backward(&mut self, loss: DiffValue) -> Result<()> {
        if !loss.shape.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulate `f` into the gradient buffer of node `j`, unless `j` is
        // a constant.
        macro_rules! acc {
            ($j:expr, |$buf:ident| $body:expr) => {
                if nodes[$j].needs_grad {
                    let $buf = grads[$j]
                        .get_or_insert_with(|| vec![0.0; nodes[$j].data.len()]);
                    $body
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv });
                acc!(*b, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv });
            }
            Op::Sub(a, b) => {
                acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv });
                acc!(*b, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o -= gv });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                acc!(*a, |buf| for k in 0..g.len() { buf[k] += g[k] * db[k] });
                acc!(*b, |buf| for k in 0..g.len() { buf[k] += g[k] * da[k] });
            }
            Op::Div(a, b) => {
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                acc!(*a, |buf| for k in 0..g.len() { buf[k] += g[k] / db[k] });
                acc!(*b, |buf| for k in 0..g.len() {
                    buf[k] -= g[k] * da[k] / (db[k] * db[k])
                });
            }
            Op::AddScalar(a) => {
                acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv });
            }
            Op::MulScalar(a, c) => {
                acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv * c });
            }
            Op::Exp(a) => {
                let out = &nodes[i].data;
                acc!(*a, |buf| for k in 0..g.len() { buf[k] += g[k] * out[k] });
            }
            Op::LogFloored(a) => {
                let xin = &nodes[*a].data;
                acc!(*a, |buf| for k in 0..g.len() {
                    if xin[k] > LOG_FLOOR {
                        buf[k] += g[k] / xin[k];
                    }
                });
            }
            Op::Sin(a) => {
                let xin = &nodes[*a].data;
                acc!(*a, |buf| for k in 0..g.len() { buf[k] += g[k] * xin[k].cos() });
            }
            Op::Sigmoid(a) => {
                let out = &nodes[i].data;
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * out[k] * (1.0 - out[k])
                });
            }
            Op::Softplus(a) => {
                let xin = &nodes[*a].data;
                acc!(*a, |buf| for k in 0..g.len() { buf[k] += g[k] * sigmoid(xin[k]) });
            }
            Op::Pow(a, p) => {
                let xin = &nodes[*a].data;
                acc!(*a, |buf| for k in 0..g.len() {
                    buf[k] += g[k] * p * xin[k].powf(p - 1.0)
                });
            }
            Op::Cumsum(a) => {
                acc!(*a, |buf| {
                    let mut run = 0.0;
                    for k in (0..g.len()).rev() {
                        run += g[k];
                        buf[k] += run;
                    }
                });
            }
            Op::Upsample { x, hop } => {
                let frames = nodes[*x].data.len();
                acc!(*x, |buf| upsample_linear_adjoint(g, *hop, frames, buf));
            }
            Op::Affine { x, w, b } => {
                let (t, d_in) = (nodes[*x].shape.rows, nodes[*x].shape.cols);
                let d_out = nodes[*w].shape.cols;
                let xs = &nodes[*x].data;
                let ws = &nodes[*w].data;
                acc!(*x, |buf| {
                    for r in 0..t {
                        let gr = &g[r * d_out..(r + 1) * d_out];
                        let br = &mut buf[r * d_in..(r + 1) * d_in];
                        for iin in 0..d_in {
                            let wrow = &ws[iin * d_out..(iin + 1) * d_out];
                            br[iin] += wrow.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc!(*w, |buf| {
                    for r in 0..t {
                        let gr = &g[r * d_out..(r + 1) * d_out];
                        for iin in 0..d_in {
                            let xv = xs[r * d_in + iin];
                            let brow = &mut buf[iin * d_out..(iin + 1) * d_out];
                            for (bv, &gv) in brow.iter_mut().zip(gr) {
                                *bv += xv * gv;
                            }
                        }
                    }
                });
                acc!(*b, |buf| {
                    for r in 0..t {
                        let gr = &g[r * d_out..(r + 1) * d_out];
                        for (bv, &gv) in buf.iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::Frame { x, frame_len, hop } => {
                let n = nodes[*x].data.len();
                let n_frames = nodes[i].shape.rows;
                acc!(*x, |buf| {
                    for t in 0..n_frames {
                        let start = t * hop;
                        let take = (*frame_len).min(n.saturating_sub(start));
                        let gr = &g[t * frame_len..t * frame_len + take];
                        for (o, &gv) in buf[start..start + take].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::DftMag { x, window, spectra } => {
                let n_frames = nodes[i].shape.rows;
                let n_bins = nodes[i].shape.cols;
                let frame_len = window.len();
                let mags = &nodes[i].data;
                let ifft = fft::plan(frame_len, FftDirection::Inverse);
                let mut scratch = vec![Complex::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
                let mut buf = vec![Complex::new(0.0, 0.0); frame_len];
                acc!(*x, |out| {
                    for t in 0..n_frames {
                        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                        for k in 0..n_bins {
                            let idx = t * n_bins + k;
                            let c = spectra[idx];
                            let scale = g[idx] / mags[idx];
                            buf[k] = Complex::new(c.re * scale, c.im * scale);
                        }
                        // Adjoint of the one-sided DFT: real part of the
                        // unnormalized inverse transform of the bin gradients.
                        ifft.process_with_scratch(&mut buf, &mut scratch);
                        let row = &mut out[t * frame_len..(t + 1) * frame_len];
                        for n in 0..frame_len {
                            row[n] += buf[n].re * window[n];
                        }
                    }
                });
            }
            Op::MelProject { x, fb } => {
                let n_frames = nodes[i].shape.rows;
                let (n_mels, n_bins) = (fb.n_mels, fb.n_bins);
                acc!(*x, |buf| {
                    for t in 0..n_frames {
                        let gr = &g[t * n_mels..(t + 1) * n_mels];
                        let br = &mut buf[t * n_bins..(t + 1) * n_bins];
                        for m in 0..n_mels {
                            let w = &fb.weights[m * n_bins..(m + 1) * n_bins];
                            let gv = gr[m];
                            if gv != 0.0 {
                                for (bv, &wv) in br.iter_mut().zip(w) {
                                    *bv += gv * wv;
                                }
                            }
                        }
                    }
                });
            }
            Op::SumReduce(a) => {
                let gv = g[0];
                acc!(*a, |buf| for o in buf.iter_mut() { *o += gv });
            }
            Op::L1Dist(a, b) => {
                let gv = g[0];
                let (da, db) = (&nodes[*a].data, &nodes[*b].data);
                acc!(*a, |buf| for k in 0..buf.len() {
                    buf[k] += gv * sign(da[k] - db[k])
                });
                acc!(*b, |buf| for k in 0..buf.len() {
                    buf[k] -= gv * sign(da[k] - db[k])
                });
            }
            Op::Col { x, col } => {
                let cols = nodes[*x].shape.cols;
                acc!(*x, |buf| for (r, &gv) in g.iter().enumerate() {
                    buf[r * cols + col] += gv;
                });
            }
            Op::ConcatCols(ids) => {
                let rows = nodes[i].shape.rows;
                let cols = nodes[i].shape.cols;
                let mut offset = 0;
                for &j in ids {
                    let pc = nodes[j].shape.cols;
                    acc!(j, |buf| for r in 0..rows {
                        let gr = &g[r * cols + offset..r * cols + offset + pc];
                        for (bv, &gv) in buf[r * pc..(r + 1) * pc].iter_mut().zip(gr) {
                            *bv += gv;
                        }
                    });
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                acc!(*x, |buf| for (k, &gv) in g.iter().enumerate() {
                    buf[start + k] += gv;
                });
            }
            Op::Reshape(a) => {
                acc!(*a, |buf| for (o, &gv) in buf.iter_mut().zip(g) { *o += gv });
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = (nodes[i].shape.rows, nodes[i].shape.cols);
                let y = &nodes[i].data;
                acc!(*a, |buf| for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let br = &mut buf[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        br[c] += yr[c] * (gr[c] - dot);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                let (rows, cols) = (nodes[i].shape.rows, nodes[i].shape.cols);
                let xs = &nodes[*x].data;
                let gs = &nodes[*gamma].data;
                acc!(*x, |buf| for r in 0..rows {
                    let is = inv_std[r];
                    let m = mean[r];
                    let xr = &xs[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..cols {
                        let xh = (xr[c] - m) * is;
                        s1 += gr[c] * gs[c];
                        s2 += gr[c] * gs[c] * xh;
                    }
                    let inv_cols = 1.0 / cols as f64;
                    let br = &mut buf[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let xh = (xr[c] - m) * is;
                        br[c] += is * (gr[c] * gs[c] - s1 * inv_cols - xh * s2 * inv_cols);
                    }
                });
                acc!(*gamma, |buf| for r in 0..rows {
                    let is = inv_std[r];
                    let m = mean[r];
                    for c in 0..cols {
                        buf[c] += g[r * cols + c] * (xs[r * cols + c] - m) * is;
                    }
                });
                acc!(*beta, |buf| for r in 0..rows {
                    for c in 0..cols {
                        buf[c] += g[r * cols + c];
                    }
                });
            }
            Op::HarmonicBank { omega, amp, dist, f0_samples, hop, sample_rate, phase } => {
                let n = nodes[i].data.len();
                let t_frames = nodes[*amp].shape.rows;
                let k = nodes[*dist].shape.cols;
                let nyquist = sample_rate / 2.0;
                let amps = &nodes[*amp].data;
                let dists = &nodes[*dist].data;
                let f0s = &nodes[*f0_samples].data;

                let mut d_phase = vec![0.0; n];
                let mut a_col = vec![0.0; t_frames];
                let mut a_smp = vec![0.0; n];
                let mut d_a_smp = vec![0.0; n];
                let mut d_a_col = vec![0.0; t_frames];
                let amp_needs = nodes[*amp].needs_grad;
                let dist_needs = nodes[*dist].needs_grad;
                let omega_needs = nodes[*omega].needs_grad;

                for h in 0..k {
                    let mult = (h + 1) as f64;
                    for t in 0..t_frames {
                        a_col[t] = amps[t] * dists[t * k + h];
                    }
                    upsample_linear(&a_col, *hop, &mut a_smp);
                    for idx in 0..n {
                        if (mult * f0s[idx]).abs() <= nyquist {
                            let (s, c) = (mult * phase[idx]).sin_cos();
                            d_a_smp[idx] = g[idx] * s;
                            if omega_needs {
                                d_phase[idx] += g[idx] * a_smp[idx] * c * mult;
                            }
                        } else {
                            d_a_smp[idx] = 0.0;
                        }
                    }
                    if amp_needs || dist_needs {
                        d_a_col.iter_mut().for_each(|v| *v = 0.0);
                        upsample_linear_adjoint(&d_a_smp, *hop, t_frames, &mut d_a_col);
                        if amp_needs {
                            acc!(*amp, |buf| for t in 0..t_frames {
                                buf[t] += d_a_col[t] * dists[t * k + h];
                            });
                        }
                        if dist_needs {
                            acc!(*dist, |buf| for t in 0..t_frames {
                                buf[t * k + h] += d_a_col[t] * amps[t];
                            });
                        }
                    }
                }
                // Exclusive prefix sum adjoint: omega[m] collects the phase
                // gradients of all later samples.
                acc!(*omega, |buf| {
                    let mut run = 0.0;
                    for idx in (0..n).rev() {
                        buf[idx] += run;
                        run += d_phase[idx];
                    }
                });
            }
            Op::NoiseBank { mags, noise, fir } => {
                let t_frames = noise.n_frames;
                let m = fir.n_bands;
                let l = fir.fir_len;
                let f_len = noise.frame_len;
                let n = noise.n_samples;
                acc!(*mags, |buf| {
                    let mut d_y = vec![0.0; f_len + l - 1];
                    let mut d_h = vec![0.0; l];
                    for t in 0..t_frames {
                        let offset = t as isize * noise.hop as isize - (l / 2) as isize;
                        for (j, dy) in d_y.iter_mut().enumerate() {
                            let pos = offset + j as isize;
                            *dy = if pos >= 0 && (pos as usize) < n {
                                g[pos as usize]
                            } else {
                                0.0
                            };
                        }
                        let frame = &noise.frames[t * f_len..(t + 1) * f_len];
                        for (lag, dh) in d_h.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (idx, &nv) in frame.iter().enumerate() {
                                s += nv * d_y[idx + lag];
                            }
                            *dh = s;
                        }
                        fir.design_adjoint(&d_h, &mut buf[t * m..(t + 1) * m]);
                    }
                });
            }
            Op::ConvTrunc { x, ir } => {
                let n = nodes[i].data.len();
                let xs = &nodes[*x].data;
                let irs = &nodes[*ir].data;
                acc!(*x, |buf| {
                    for (lag, &hv) in irs.iter().enumerate() {
                        if hv != 0.0 {
                            for mth in 0..n.saturating_sub(lag) {
                                buf[mth] += hv * g[mth + lag];
                            }
                        }
                    }
                });
                acc!(*ir, |buf| {
                    for (lag, bv) in buf.iter_mut().enumerate() {
                        if lag >= n {
                            break;
                        }
                        let mut s = 0.0;
                        for idx in lag..n {
                            s += xs[idx - lag] * g[idx];
                        }
                        *bv += s;
                    }
                });
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn conv_truncated(x: &[f64], ir: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (lag, &hv) in ir.iter().enumerate() {
        if lag >= n {
            break;
        }
        if hv != 0.0 {
            for (i, &xv) in x[..n - lag].iter().enumerate() {
                out[i + lag] += hv * xv;
            }
        }
    }
    out
}

/// Compare the analytic gradient of a scalar-valued graph against central
/// finite differences at `point`. Returns the maximum over coordinates of
/// `|analytic - numeric| / (|numeric| + 1e-9)`.
pub fn grad_check<F>(mut build: F, point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&mut DiffGraph, DiffValue) -> Result<DiffValue>,
{
    let eval = |build: &mut F, p: &[f64]| -> Result<f64> {
        let mut g = DiffGraph::new();
        let leaf = g.leaf(p.to_vec(), Shape::vector(p.len()))?;
        let loss = build(&mut g, leaf)?;
        if !loss.shape().is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_string()));
        }
        Ok(g.value(loss))
    };

    let analytic = {
        let mut g = DiffGraph::new();
        let leaf = g.leaf(point.to_vec(), Shape::vector(point.len()))?;
        let loss = build(&mut g, leaf)?;
        g.backward(loss)?;
        g.grad(leaf)
    };

    let mut max_err: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = eval(&mut build, &probe)?;
        probe[i] = orig - step;
        let down = eval(&mut build, &probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-9);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp;
    use crate::rng::SeededRng;

    #[test]
    fn add_elementwise() {
        let mut g = DiffGraph::new();
        let a = g.leaf(vec![1.0, 2.0], Shape::vector(2)).unwrap();
        let b = g.leaf(vec![3.0, 4.0], Shape::vector(2)).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op() {
        let mut g = DiffGraph::new();
        let a = g.leaf(vec![1.0, 2.0], Shape::vector(2)).unwrap();
        let b = g.leaf(vec![3.0], Shape::vector(1)).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("2x1") && err.contains("1x1"), "{err}");
    }

    #[test]
    fn cumsum_prefix() {
        let mut g = DiffGraph::new();
        let a = g.leaf(vec![1.0, 1.0, 1.0], Shape::vector(3)).unwrap();
        let c = g.cumsum(a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dft_magnitude_pure_cosine() {
        // Cosine at an exact bin frequency, rectangular window: magnitude
        // N/2 at that bin.
        let n = 256;
        let k = 7;
        let x: Vec<f64> = (0..n)
            .map(|i| (TWO_PI * k as f64 * i as f64 / n as f64).cos())
            .collect();
        let mut g = DiffGraph::new();
        let v = g.constant(x, Shape::matrix(1, n)).unwrap();
        let mags = g.dft_magnitude(v, Arc::new(vec![1.0; n])).unwrap();
        let m = g.data(mags);
        assert!((m[k] - n as f64 / 2.0).abs() < 1e-9, "peak bin {}", m[k]);
        assert!(m[k + 1] < 1e-9);
    }

    #[test]
    fn backward_square() {
        let mut g = DiffGraph::new();
        let x = g.leaf(vec![3.0], Shape::scalar()).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), vec![6.0]);
    }

    #[test]
    fn backward_sigmoid_sum() {
        let mut g = DiffGraph::new();
        let x = g.leaf(vec![0.0; 4], Shape::vector(4)).unwrap();
        let s = g.sigmoid(x);
        let loss = g.sum_reduce(s);
        g.backward(loss).unwrap();
        for gv in g.grad(x) {
            assert!((gv - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = DiffGraph::new();
        let x = g.leaf(vec![1.0, 2.0], Shape::vector(2)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_values_keep_zero_grad() {
        let mut g = DiffGraph::new();
        let x = g.leaf(vec![2.0], Shape::scalar()).unwrap();
        let unused = g.leaf(vec![5.0], Shape::scalar()).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused), vec![0.0]);
    }

    #[test]
    fn grad_check_l2_norm() {
        let mut rng = SeededRng::new(7);
        let point: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let s = g.sum_reduce(sq);
                Ok(g.powf(s, 0.5))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let err = grad_check(
            |g, _x| Ok(g.scalar_constant(4.2)),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every primitive op against central differences at random points.
    #[test]
    fn grad_check_primitive_ops() {
        let mut rng = SeededRng::new(42);
        let mut cases: Vec<(&str, Box<dyn FnMut(&mut DiffGraph, DiffValue) -> Result<DiffValue>>)> = vec![
            ("add", Box::new(|g, x| {
                let c = g.constant(vec![0.3, -0.4, 1.1, 0.9, 2.0, -1.0], Shape::vector(6))?;
                let y = g.add(x, c)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            })),
            ("sub_div", Box::new(|g, x| {
                let c = g.constant(vec![1.3, 1.4, 2.1, 0.9, 2.0, 1.7], Shape::vector(6))?;
                let d = g.div(x, c)?;
                let s = g.sub(d, c)?;
                let s = g.mul(s, s)?;
                Ok(g.sum_reduce(s))
            })),
            ("mul_scalar_add_scalar", Box::new(|g, x| {
                let y = g.mul_scalar(x, 2.5);
                let y = g.add_scalar(y, -0.7);
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            })),
            ("exp", Box::new(|g, x| {
                let y = g.exp(x);
                Ok(g.sum_reduce(y))
            })),
            ("log_floored", Box::new(|g, x| {
                let y = g.mul(x, x)?;
                let y = g.add_scalar(y, 0.5);
                let y = g.log_floored(y);
                Ok(g.sum_reduce(y))
            })),
            ("sin", Box::new(|g, x| {
                let y = g.sin(x);
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            })),
            ("sigmoid", Box::new(|g, x| {
                let y = g.sigmoid(x);
                Ok(g.sum_reduce(y))
            })),
            ("softplus", Box::new(|g, x| {
                let y = g.softplus(x);
                Ok(g.sum_reduce(y))
            })),
            ("pow", Box::new(|g, x| {
                let y = g.mul(x, x)?;
                let y = g.add_scalar(y, 0.5);
                let y = g.powf(y, 1.7);
                Ok(g.sum_reduce(y))
            })),
            ("cumsum", Box::new(|g, x| {
                let y = g.cumsum(x)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            })),
            ("upsample", Box::new(|g, x| {
                let y = g.upsample(x, 4, 24)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            })),
            ("sum_reduce", Box::new(|g, x| Ok(g.sum_reduce(x)))),
            ("l1_distance", Box::new(|g, x| {
                let c = g.constant(vec![0.5, -0.2, 0.9, -1.4, 0.1, 0.8], Shape::vector(6))?;
                g.l1_distance(x, c)
            })),
            ("reshape_slice_col_concat", Box::new(|g, x| {
                let m = g.reshape(x, Shape::matrix(3, 2))?;
                let c0 = g.col(m, 0)?;
                let c1 = g.col(m, 1)?;
                let cat = g.concat_cols(&[c1, c0])?;
                let flat = g.reshape(cat, Shape::vector(6))?;
                let s = g.slice(flat, 1, 4)?;
                let s = g.mul(s, s)?;
                Ok(g.sum_reduce(s))
            })),
            ("softmax_rows", Box::new(|g, x| {
                let m = g.reshape(x, Shape::matrix(2, 3))?;
                let sm = g.softmax_rows(m);
                let w = g.constant(vec![1.0, -2.0, 0.5, 0.3, 1.2, -0.4], Shape::matrix(2, 3))?;
                let p = g.mul(sm, w)?;
                Ok(g.sum_reduce(p))
            })),
        ];

        for (name, build) in cases.iter_mut() {
            let point: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let err = grad_check(build, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn grad_check_affine_and_layer_norm() {
        let mut rng = SeededRng::new(3);
        // 10 = x (2x3) + w (3x2) ... split the flat leaf inside the builder.
        let point: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let err = grad_check(
            |g, p| {
                let xs = g.slice(p, 0, 6)?;
                let x = g.reshape(xs, Shape::matrix(2, 3))?;
                let ws = g.slice(p, 6, 6)?;
                let w = g.reshape(ws, Shape::matrix(3, 2))?;
                let b = g.slice(p, 12, 2)?;
                let gamma = g.slice(p, 14, 2)?;
                let gamma = g.add_scalar(gamma, 1.5);
                let beta = g.slice(p, 16, 2)?;
                let y = g.affine(x, w, b)?;
                let y = g.layer_norm(y, gamma, beta)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn grad_check_frame_dft_mel() {
        let mut rng = SeededRng::new(11);
        let point: Vec<f64> = (0..48).map(|_| rng.normal()).collect();
        let window = Arc::new(dsp::hann_periodic(16));
        let fb = Arc::new(MelFilterbank::new(4, 9, 200.0, 7000.0, 16000).unwrap());
        let err = grad_check(
            move |g, x| {
                let frames = g.frame_signal(x, 16, 8)?;
                let mags = g.dft_magnitude(frames, window.clone())?;
                let mel = g.mel_project(mags, fb.clone())?;
                let lg = g.log_floored(mel);
                Ok(g.sum_reduce(lg))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn grad_check_conv_trunc() {
        let mut rng = SeededRng::new(5);
        let point: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let err = grad_check(
            |g, p| {
                let x = g.slice(p, 0, 8)?;
                let ir = g.slice(p, 8, 4)?;
                let y = g.conv_trunc(x, ir)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_reduce(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn backward_linearity() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let point = vec![0.7, -0.3, 1.2];
        let (a, b) = (2.5, -1.25);

        let grad_of = |scale_f: f64, scale_g: f64| -> Vec<f64> {
            let mut g = DiffGraph::new();
            let x = g.leaf(point.clone(), Shape::vector(3)).unwrap();
            let f = {
                let sq = g.mul(x, x).unwrap();
                g.sum_reduce(sq)
            };
            let h = {
                let s = g.sin(x);
                g.sum_reduce(s)
            };
            let sf = g.mul_scalar(f, scale_f);
            let sg = g.mul_scalar(h, scale_g);
            let total = g.add(sf, sg).unwrap();
            g.backward(total).unwrap();
            g.grad(x)
        };

        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        for i in 0..3 {
            let expect = a * gf[i] + b * gg[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_deterministic_across_builds() {
        let run = || {
            let mut rng = SeededRng::new(99);
            let point: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
            let mut g = DiffGraph::new();
            let x = g.leaf(point, Shape::vector(32)).unwrap();
            let frames = g.frame_signal(x, 8, 4).unwrap();
            let window = Arc::new(dsp::hann_periodic(8));
            let mags = g.dft_magnitude(frames, window).unwrap();
            let lg = g.log_floored(mags);
            let loss = g.sum_reduce(lg);
            g.backward(loss).unwrap();
            g.grad(x)
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(g1, g2, "gradients must be bitwise identical");
    }
}
