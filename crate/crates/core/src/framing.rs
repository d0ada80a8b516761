//! Frame segmentation, windowing, and the overlap-add / overlap-save block
//! engines every frequency-domain filter runs inside.
//!
//! A signal is consumed in chunks of `R` new samples. Each analysis step
//! shifts the chunk into a `K`-sample buffer and returns its `K`-point DFT.
//! Frames keep all `K` bins (not `K/2 + 1`) so the per-bin recursions stay
//! uniform across DC and Nyquist.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Relative conjugate-symmetry tolerance for frames that must synthesize to
/// a real signal.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Tolerance on [`check_cola`] deviation accepted for OLA configurations.
pub const COLA_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Overlap-add: windowed frames, circular per-bin filtering, delay `K`.
    Ola,
    /// Overlap-save: rectangular frames, linear convolution of length
    /// `K - R + 1`, delay `R`.
    Ols,
}

impl fmt::Display for FrameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameMode::Ola => "ola",
            FrameMode::Ols => "ols",
        })
    }
}

impl FromStr for FrameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ola" => Ok(FrameMode::Ola),
            "ols" => Ok(FrameMode::Ols),
            other => Err(Error::config(
                "framing.mode",
                format!("unknown frame mode `{other}` (expected `ola` or `ols`)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    SqrtHann,
    Rectangular,
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowKind::SqrtHann => "sqrt-hann",
            WindowKind::Rectangular => "rectangular",
        })
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sqrt-hann" => Ok(WindowKind::SqrtHann),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(Error::config(
                "framing.window",
                format!("unsupported window `{other}` (expected `sqrt-hann` or `rectangular`)"),
            )),
        }
    }
}

/// Block-processing geometry shared by analysis, synthesis and the filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameConfig {
    /// DFT size `K` in samples.
    pub dft_size: usize,
    /// Frame shift `R` in samples.
    pub frame_shift: usize,
    /// Number of frame taps `L` per bin.
    pub taps: usize,
    pub mode: FrameMode,
    pub window: WindowKind,
    /// Sample rate in Hz.
    pub sample_rate: u32,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self::ola_multi_tap()
    }
}

impl FrameConfig {
    pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

    /// Multi-tap OLA: `K = 512`, `R = 128`, `L = 8`, sqrt-Hann.
    pub fn ola_multi_tap() -> Self {
        Self {
            dft_size: 512,
            frame_shift: 128,
            taps: 8,
            mode: FrameMode::Ola,
            window: WindowKind::SqrtHann,
            sample_rate: Self::DEFAULT_SAMPLE_RATE,
        }
    }

    /// Single-tap OLS: `K = 1408`, `R = 512`, `L = 1`.
    pub fn ols_single_tap() -> Self {
        Self {
            dft_size: 1408,
            frame_shift: 512,
            taps: 1,
            mode: FrameMode::Ols,
            window: WindowKind::Rectangular,
            sample_rate: Self::DEFAULT_SAMPLE_RATE,
        }
    }

    /// Multi-tap OLS: `K = 896`, `R = 512`, `L = 2`.
    pub fn ols_multi_tap() -> Self {
        Self {
            dft_size: 896,
            frame_shift: 512,
            taps: 2,
            mode: FrameMode::Ols,
            window: WindowKind::Rectangular,
            sample_rate: Self::DEFAULT_SAMPLE_RATE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, r) = (self.dft_size, self.frame_shift);
        if k < 2 {
            return Err(Error::config("framing.dft_size", "K must be at least 2"));
        }
        if r == 0 || r > k {
            return Err(Error::config(
                "framing.frame_shift",
                format!("frame shift must satisfy 1 <= R <= K (got R = {r}, K = {k})"),
            ));
        }
        if self.taps == 0 {
            return Err(Error::config("framing.taps", "taps L must be at least 1"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config(
                "framing.sample_rate",
                "sample rate must be positive",
            ));
        }
        match self.mode {
            FrameMode::Ols => {
                if r > k - 1 {
                    return Err(Error::config(
                        "framing.frame_shift",
                        format!("OLS requires R <= K - 1 (got R = {r}, K = {k})"),
                    ));
                }
                if self.window != WindowKind::Rectangular {
                    return Err(Error::config(
                        "framing.window",
                        "OLS analysis is unwindowed; use `rectangular`",
                    ));
                }
            }
            FrameMode::Ola => {
                let deviation = check_cola(&make_window(self)?, r)?;
                if deviation > COLA_TOLERANCE {
                    return Err(Error::config(
                        "framing.frame_shift",
                        format!(
                            "{} window is not constant-overlap-add at R = {r} (deviation {deviation:.3e})",
                            self.window
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `R / K`.
    pub fn overlap_ratio(&self) -> f64 {
        self.frame_shift as f64 / self.dft_size as f64
    }

    /// Unique reference samples seen by one filter update: `K + (L - 1) R`.
    pub fn effective_input_length(&self) -> usize {
        self.dft_size + (self.taps - 1) * self.frame_shift
    }

    /// Impulse response length representable by one tap under OLS, `K - R + 1`.
    pub fn modelled_rir_len(&self) -> usize {
        self.dft_size - self.frame_shift + 1
    }

    /// Length of the equivalent time-domain response spanned by all taps.
    pub fn modelled_span(&self) -> usize {
        (self.taps - 1) * self.frame_shift + self.modelled_rir_len()
    }

    /// Algorithmic delay in samples: `R` for OLS, `K` for OLA.
    pub fn algorithmic_delay(&self) -> usize {
        match self.mode {
            FrameMode::Ols => self.frame_shift,
            FrameMode::Ola => self.dft_size,
        }
    }

    /// Sample offset between the emitted stream and the input stream.
    ///
    /// Both engines buffer one chunk of `R` samples; OLA additionally holds
    /// back `K - R` samples until every overlapping frame has been added.
    pub fn stream_lag(&self) -> usize {
        self.algorithmic_delay() - self.frame_shift
    }

    /// Frames emitted before the overlap structure is complete.
    pub fn warmup_frames(&self) -> usize {
        self.dft_size.div_ceil(self.frame_shift) - 1
    }
}

/// Analysis (and, for OLA, synthesis) window of length `K`.
pub fn make_window(config: &FrameConfig) -> Result<Vec<f64>> {
    let k = config.dft_size;
    if k < 2 {
        return Err(Error::config("framing.dft_size", "K must be at least 2"));
    }
    Ok(match config.window {
        // Half-sample shifted periodic Hann: symmetric about the frame centre
        // and its square overlap-adds to a constant for any R dividing K/2.
        WindowKind::SqrtHann => (0..k)
            .map(|n| (PI * (n as f64 + 0.5) / k as f64).sin())
            .collect(),
        WindowKind::Rectangular => vec![1.0; k],
    })
}

/// Overlap sums of `w²` at each phase `0..R`.
fn overlap_sums(window: &[f64], shift: usize) -> Vec<f64> {
    (0..shift)
        .map(|phase| {
            window
                .iter()
                .skip(phase)
                .step_by(shift)
                .map(|w| w * w)
                .sum()
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Maximum relative deviation of the interior overlap sum `Σ_m w²[n - mR]`
/// from its median `C`.
pub fn check_cola(window: &[f64], shift: usize) -> Result<f64> {
    if shift == 0 || shift > window.len() {
        return Err(Error::config(
            "framing.frame_shift",
            format!(
                "COLA check requires 1 <= R <= K (got R = {shift}, K = {})",
                window.len()
            ),
        ));
    }
    let sums = overlap_sums(window, shift);
    let c = median(&sums);
    if c <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(sums.iter().map(|s| (s - c).abs() / c).fold(0.0, f64::max))
}

/// Which time-domain signal a frame was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Reference,
    Microphone,
    Echo,
    EchoEstimate,
    Error,
    Other,
}

/// One DFT frame of `K` complex bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub index: u64,
    pub bins: Vec<Complex64>,
    pub origin: Origin,
}

impl SpectralFrame {
    pub fn zeros(index: u64, dft_size: usize, origin: Origin) -> Self {
        Self {
            index,
            bins: vec![Complex64::new(0.0, 0.0); dft_size],
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// `max_k |X_k - conj(X_{K-k})| / max_k |X_k|`, or 0 for an all-zero frame.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let k = self.bins.len();
        let peak = self.bins.iter().map(|b| b.norm()).fold(0.0, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let worst = (0..k)
            .map(|i| (self.bins[i] - self.bins[(k - i) % k].conj()).norm())
            .fold(0.0, f64::max);
        worst / peak
    }
}

/// Forward/inverse DFT pair of a fixed size. Inverse is normalized by `1/K`.
#[derive(Clone)]
pub struct Dft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl fmt::Debug for Dft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dft").field("len", &self.len()).finish()
    }
}

impl Dft {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            forward,
            inverse,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&mut self, buf: &mut [Complex64]) {
        self.forward.process_with_scratch(buf, &mut self.scratch);
    }

    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        self.inverse.process_with_scratch(buf, &mut self.scratch);
        let scale = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    /// DFT of a real sequence.
    pub fn forward_real(&mut self, samples: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }
}

/// Per-bin history of the `L` most recent reference frames, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceHistory {
    taps: usize,
    bins: usize,
    /// `data[k * L + j] = X_{ℓ-j, k}`.
    data: Vec<Complex64>,
}

impl ReferenceHistory {
    pub fn new(bins: usize, taps: usize) -> Self {
        Self {
            taps,
            bins,
            data: vec![Complex64::new(0.0, 0.0); bins * taps],
        }
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Shift every bin by one frame and insert `frame` as the newest tap.
    pub fn push(&mut self, frame: &SpectralFrame) -> Result<()> {
        check_len("reference history", self.bins, frame.len())?;
        let l = self.taps;
        for (k, chunk) in self.data.chunks_exact_mut(l).enumerate() {
            chunk.copy_within(0..l - 1, 1);
            chunk[0] = frame.bins[k];
        }
        Ok(())
    }

    /// The `L` taps of bin `k`, newest first.
    pub fn bin(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.taps..(k + 1) * self.taps]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }
}

/// Streaming analysis: chunk of `R` samples in, spectral frame out.
#[derive(Debug, Clone)]
pub struct Analyzer {
    config: FrameConfig,
    window: Vec<f64>,
    buffer: Vec<f64>,
    dft: Dft,
    next_index: u64,
    origin: Origin,
}

impl Analyzer {
    pub fn new(config: &FrameConfig, origin: Origin) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: *config,
            window: make_window(config)?,
            buffer: vec![0.0; config.dft_size],
            dft: Dft::new(config.dft_size),
            next_index: 0,
            origin,
        })
    }

    /// Unwindowed contents of the `K`-sample buffer, oldest first.
    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    /// Advance by one chunk and return the DFT of the (windowed) most recent
    /// `K` samples.
    pub fn analysis_step(&mut self, chunk: &[f64]) -> Result<SpectralFrame> {
        let (k, r) = (self.config.dft_size, self.config.frame_shift);
        check_len("analysis chunk", r, chunk.len())?;
        self.buffer.copy_within(r.., 0);
        self.buffer[k - r..].copy_from_slice(chunk);
        let mut bins: Vec<Complex64> = self
            .buffer
            .iter()
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        self.dft.forward(&mut bins);
        let frame = SpectralFrame {
            index: self.next_index,
            bins,
            origin: self.origin,
        };
        self.next_index += 1;
        Ok(frame)
    }
}

/// IDFT to real samples, counting frames whose bins are not conjugate
/// symmetric. The imaginary part is discarded either way.
fn inverse_real(dft: &mut Dft, frame: &SpectralFrame, warnings: &mut u64) -> Vec<f64> {
    if frame.conjugate_asymmetry() > SYMMETRY_TOLERANCE {
        *warnings += 1;
        log::debug!(
            "frame {} is not conjugate symmetric; discarding imaginary part",
            frame.index
        );
    }
    let mut buf = frame.bins.clone();
    dft.inverse(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Weighted overlap-add synthesis with the analysis window reused on output.
#[derive(Debug, Clone)]
pub struct OlaSynthesizer {
    shift: usize,
    window: Vec<f64>,
    norm: f64,
    accumulator: Vec<f64>,
    dft: Dft,
    asymmetry_warnings: u64,
}

impl OlaSynthesizer {
    pub fn new(config: &FrameConfig) -> Result<Self> {
        config.validate()?;
        let window = make_window(config)?;
        let norm = median(&overlap_sums(&window, config.frame_shift));
        Ok(Self {
            shift: config.frame_shift,
            window,
            norm,
            accumulator: vec![0.0; config.dft_size],
            dft: Dft::new(config.dft_size),
            asymmetry_warnings: 0,
        })
    }

    pub fn synthesis_step(&mut self, frame: &SpectralFrame) -> Result<Vec<f64>> {
        check_len("OLA synthesis frame", self.window.len(), frame.len())?;
        let time = inverse_real(&mut self.dft, frame, &mut self.asymmetry_warnings);
        for ((acc, t), w) in self.accumulator.iter_mut().zip(&time).zip(&self.window) {
            *acc += t * w / self.norm;
        }
        let out = self.accumulator[..self.shift].to_vec();
        self.accumulator.copy_within(self.shift.., 0);
        let k = self.accumulator.len();
        self.accumulator[k - self.shift..].fill(0.0);
        Ok(out)
    }

    pub fn asymmetry_warnings(&self) -> u64 {
        self.asymmetry_warnings
    }
}

/// Overlap-save synthesis: keep the last `R` samples of each IDFT.
#[derive(Debug, Clone)]
pub struct OlsSynthesizer {
    dft_size: usize,
    shift: usize,
    dft: Dft,
    asymmetry_warnings: u64,
}

impl OlsSynthesizer {
    pub fn new(config: &FrameConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dft_size: config.dft_size,
            shift: config.frame_shift,
            dft: Dft::new(config.dft_size),
            asymmetry_warnings: 0,
        })
    }

    pub fn synthesis_step(&mut self, frame: &SpectralFrame) -> Result<Vec<f64>> {
        check_len("OLS synthesis frame", self.dft_size, frame.len())?;
        let time = inverse_real(&mut self.dft, frame, &mut self.asymmetry_warnings);
        Ok(time[self.dft_size - self.shift..].to_vec())
    }

    pub fn asymmetry_warnings(&self) -> u64 {
        self.asymmetry_warnings
    }
}

/// Synthesis engine selected by [`FrameMode`].
#[derive(Debug, Clone)]
pub enum Synthesizer {
    Ola(OlaSynthesizer),
    Ols(OlsSynthesizer),
}

impl Synthesizer {
    pub fn new(config: &FrameConfig) -> Result<Self> {
        Ok(match config.mode {
            FrameMode::Ola => Synthesizer::Ola(OlaSynthesizer::new(config)?),
            FrameMode::Ols => Synthesizer::Ols(OlsSynthesizer::new(config)?),
        })
    }

    pub fn synthesis_step(&mut self, frame: &SpectralFrame) -> Result<Vec<f64>> {
        match self {
            Synthesizer::Ola(s) => s.synthesis_step(frame),
            Synthesizer::Ols(s) => s.synthesis_step(frame),
        }
    }

    pub fn asymmetry_warnings(&self) -> u64 {
        match self {
            Synthesizer::Ola(s) => s.asymmetry_warnings(),
            Synthesizer::Ols(s) => s.asymmetry_warnings(),
        }
    }
}

/// Split `signal` into chunks of `shift` samples, zero-padding the tail so
/// that at least `min_len` samples are covered.
pub fn chunks_padded(signal: &[f64], shift: usize, min_len: usize) -> Vec<Vec<f64>> {
    let total = min_len.max(signal.len()).div_ceil(shift) * shift;
    let mut padded = signal.to_vec();
    padded.resize(total, 0.0);
    padded.chunks_exact(shift).map(<[f64]>::to_vec).collect()
}
