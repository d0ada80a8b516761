//! Adaptive echo-path estimators.
//!
//! The centrepiece is the frequency-domain adaptive Kalman filter (FDKF): an
//! independent Kalman recursion per DFT bin over an `L`-tap filter state
//! `Ĥ_{ℓ,k}` with a common scalar state-error covariance `P_{ℓ,k}`.
//! Per frame and bin, in this order:
//!
//! ```text
//! D̂   = X̂ᵀ Ĥ_{ℓ-1}                 E = Y - D̂
//! Ψˢⁿ = β Ψˢⁿ + (1 - β) |E|²
//! K   = ρ P X* / (ρ P ‖X‖² + Ψˢⁿ + ε)          ρ = R/K
//! Ĥ_ℓ = A Ĥ_{ℓ-1} + A K E
//! P   = A² P (1 - ρ XᵀK) + (P + |Ĥ_{ℓ-1}|²)(1 - A²)
//! ```
//!
//! The gain can be swapped for a frequency-domain NLMS gain or a
//! variable-stepsize (VSS) gain with externally supplied scaling factors, and
//! the adaptation error can be replaced by the true echo residual `D - D̂`
//! (oracle adaptation). Under overlap-save framing the adaptation error is
//! restricted to the `R` valid output samples and the filter update to the
//! `K - R + 1` modelled taps.
//!
//! [`NlmsState`] is the sample-by-sample time-domain NLMS baseline.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::framing::{Dft, FrameConfig, FrameMode, Origin, ReferenceHistory, SpectralFrame};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Parameters of the Kalman recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdkfParams {
    /// State-transition factor `A`, used for frames beyond the schedule.
    pub transition: f64,
    /// Optional per-frame factors `A_ℓ`, indexed by frame number.
    pub transition_schedule: Option<Vec<f64>>,
    /// Smoothing factor `β` of the observation-noise estimate.
    pub smoothing: f64,
    /// `R / K`.
    pub overlap_ratio: f64,
    pub taps: usize,
    /// Initial state-error covariance `P₀`.
    pub initial_covariance: f64,
    /// Gain regularization relative to the running mean of `‖X‖²`.
    pub regularization: f64,
}

impl FdkfParams {
    pub const DEFAULT_TRANSITION: f64 = 0.999;
    pub const DEFAULT_SMOOTHING: f64 = 0.5;
    pub const DEFAULT_INITIAL_COVARIANCE: f64 = 1.0;
    pub const DEFAULT_REGULARIZATION: f64 = 1e-10;

    pub fn for_frames(frames: &FrameConfig) -> Self {
        Self {
            transition: Self::DEFAULT_TRANSITION,
            transition_schedule: None,
            smoothing: Self::DEFAULT_SMOOTHING,
            overlap_ratio: frames.overlap_ratio(),
            taps: frames.taps,
            initial_covariance: Self::DEFAULT_INITIAL_COVARIANCE,
            regularization: Self::DEFAULT_REGULARIZATION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_a = |a: f64, field: &str| {
            if a > 0.0 && a <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(
                    field,
                    format!("state transition must satisfy 0 < A <= 1 (got {a})"),
                ))
            }
        };
        check_a(self.transition, "fdkf.transition")?;
        if let Some(schedule) = &self.transition_schedule {
            for &a in schedule {
                check_a(a, "fdkf.transition_schedule")?;
            }
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(
                "fdkf.smoothing",
                format!(
                    "smoothing must satisfy 0 <= beta < 1 (got {})",
                    self.smoothing
                ),
            ));
        }
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio <= 1.0) {
            return Err(Error::config(
                "fdkf.overlap_ratio",
                format!("R/K must lie in (0, 1] (got {})", self.overlap_ratio),
            ));
        }
        if self.taps == 0 {
            return Err(Error::config("fdkf.taps", "taps L must be at least 1"));
        }
        if !(self.initial_covariance > 0.0 && self.initial_covariance.is_finite()) {
            return Err(Error::config(
                "fdkf.initial_covariance",
                format!("P0 must be positive (got {})", self.initial_covariance),
            ));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::config(
                "fdkf.regularization",
                format!("regularization must be >= 0 (got {})", self.regularization),
            ));
        }
        Ok(())
    }

    /// `A_ℓ` for frame `frame`.
    pub fn transition_at(&self, frame: u64) -> f64 {
        self.transition_schedule
            .as_ref()
            .and_then(|s| s.get(frame as usize).copied())
            .unwrap_or(self.transition)
    }
}

/// Per-bin scaling factors injected from outside the filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BinFactors {
    Uniform(f64),
    PerBin(Vec<f64>),
}

impl BinFactors {
    pub fn get(&self, bin: usize) -> f64 {
        match self {
            BinFactors::Uniform(v) => *v,
            BinFactors::PerBin(v) => v[bin],
        }
    }

    fn check(&self, bins: Option<usize>, field: &str, range: impl Fn(f64) -> bool) -> Result<()> {
        let values: &[f64] = match self {
            BinFactors::Uniform(v) => std::slice::from_ref(v),
            BinFactors::PerBin(v) => {
                if let Some(bins) = bins {
                    if v.len() != bins {
                        return Err(Error::config(
                            field,
                            format!("expected {bins} per-bin factors, got {}", v.len()),
                        ));
                    }
                }
                v
            }
        };
        match values.iter().find(|&&v| !(v.is_finite() && range(v))) {
            Some(bad) => Err(Error::config(field, format!("factor {bad} out of range"))),
            None => Ok(()),
        }
    }
}

/// How the update weight `K_{ℓ,k}` is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum GainLaw {
    /// Closed-form Kalman gain from `P` and `Ψˢⁿ`.
    Kalman,
    /// `K = μ X* / (‖X‖² + ε)` with per-bin stepsize `μ ∈ [0, 2]`.
    FdNlms { stepsize: BinFactors },
    /// `K = mᵘ X* / (ψ + |mᵉ E|² + δ)` with `ψ` the recursively averaged
    /// reference power.
    Vss {
        lambda: f64,
        delta: f64,
        step_factor: BinFactors,
        error_factor: BinFactors,
    },
}

impl GainLaw {
    pub const DEFAULT_VSS_LAMBDA: f64 = 0.9;

    pub fn name(&self) -> &'static str {
        match self {
            GainLaw::Kalman => "kalman",
            GainLaw::FdNlms { .. } => "fd_nlms",
            GainLaw::Vss { .. } => "vss",
        }
    }

    /// `bins` checks per-bin factor lengths when known.
    pub fn validate(&self, bins: Option<usize>) -> Result<()> {
        match self {
            GainLaw::Kalman => Ok(()),
            GainLaw::FdNlms { stepsize } => {
                stepsize.check(bins, "gain.fd_nlms.stepsize", |v| (0.0..=2.0).contains(&v))
            }
            GainLaw::Vss {
                lambda,
                delta,
                step_factor,
                error_factor,
            } => {
                if !(0.0..1.0).contains(lambda) {
                    return Err(Error::config(
                        "gain.vss.lambda",
                        format!("lambda must satisfy 0 <= lambda < 1 (got {lambda})"),
                    ));
                }
                if !(*delta > 0.0 && delta.is_finite()) {
                    return Err(Error::config(
                        "gain.vss.delta",
                        format!("delta must be positive (got {delta})"),
                    ));
                }
                step_factor.check(bins, "gain.vss.step_factor", |_| true)?;
                error_factor.check(bins, "gain.vss.error_factor", |_| true)
            }
        }
    }
}

/// Counters for numerical safeguards that fired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `ρ Re(XᵀK)` fell outside `[0, 1]` and was clamped.
    pub gain_product_clamps: u64,
    /// `P` went negative after its update and was clamped to 0.
    pub covariance_clamps: u64,
}

/// Overlap-save projections: the adaptation error keeps only the last `R`
/// time samples, the filter update only the first `K - R + 1` taps.
#[derive(Debug, Clone)]
struct OlsConstraint {
    shift: usize,
    rir_len: usize,
    dft: Dft,
    scratch: Vec<Complex64>,
}

impl OlsConstraint {
    fn new(frames: &FrameConfig) -> Self {
        Self {
            shift: frames.frame_shift,
            rir_len: frames.modelled_rir_len(),
            dft: Dft::new(frames.dft_size),
            scratch: vec![ZERO; frames.dft_size],
        }
    }

    fn project_error(&mut self, bins: &mut [Complex64]) {
        let k = bins.len();
        self.dft.inverse(bins);
        bins[..k - self.shift].fill(ZERO);
        // The retained samples of a real frame are real.
        bins.iter_mut().for_each(|b| b.im = 0.0);
        self.dft.forward(bins);
    }

    /// Constrain tap `tap` of a bin-major `[k * L + j]` buffer.
    fn project_taps(&mut self, data: &mut [Complex64], taps: usize, tap: usize) {
        for (k, s) in self.scratch.iter_mut().enumerate() {
            *s = data[k * taps + tap];
        }
        self.dft.inverse(&mut self.scratch);
        self.scratch[self.rir_len..].fill(ZERO);
        self.scratch.iter_mut().for_each(|b| b.im = 0.0);
        self.dft.forward(&mut self.scratch);
        for (k, s) in self.scratch.iter().enumerate() {
            data[k * taps + tap] = *s;
        }
    }
}

/// Complete per-bin state of an FDKF instance.
#[derive(Debug, Clone)]
pub struct FdkfState {
    bins: usize,
    taps: usize,
    /// `Ĥ`, bin-major: `filter[k * L + j]`.
    filter: Vec<Complex64>,
    covariance: Vec<f64>,
    observation_noise: Vec<f64>,
    /// `ψ` of the VSS gain.
    reference_power: Vec<f64>,
    history: ReferenceHistory,
    frame: u64,
    excitation_sum: f64,
    constraint: Option<OlsConstraint>,
    diagnostics: Diagnostics,
    gain: Vec<Complex64>,
    update: Vec<Complex64>,
}

impl FdkfState {
    /// State for a framing configuration; OLS framing enables the
    /// overlap-save constraints.
    pub fn new(frames: &FrameConfig, params: &FdkfParams) -> Result<Self> {
        frames.validate()?;
        params.validate()?;
        if params.taps != frames.taps {
            return Err(Error::config(
                "fdkf.taps",
                format!(
                    "params have {} taps, framing has {}",
                    params.taps, frames.taps
                ),
            ));
        }
        let mut state = Self::unconstrained(frames.dft_size, params)?;
        if frames.mode == FrameMode::Ols {
            state.constraint = Some(OlsConstraint::new(frames));
        }
        Ok(state)
    }

    /// Pure per-bin recursion over `bins` bins without any block constraint.
    pub fn unconstrained(bins: usize, params: &FdkfParams) -> Result<Self> {
        params.validate()?;
        let taps = params.taps;
        Ok(Self {
            bins,
            taps,
            filter: vec![ZERO; bins * taps],
            covariance: vec![params.initial_covariance; bins],
            observation_noise: vec![0.0; bins],
            reference_power: vec![0.0; bins],
            history: ReferenceHistory::new(bins, taps),
            frame: 0,
            excitation_sum: 0.0,
            constraint: None,
            diagnostics: Diagnostics::default(),
            gain: vec![ZERO; taps],
            update: vec![ZERO; bins * taps],
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    /// Frames processed so far.
    pub fn frame(&self) -> u64 {
        self.frame
    }

    /// Bin-major filter taps `Ĥ[k * L + j]`.
    pub fn filter(&self) -> &[Complex64] {
        &self.filter
    }

    pub fn filter_mut(&mut self) -> &mut [Complex64] {
        &mut self.filter
    }

    pub fn filter_bin(&self, k: usize) -> &[Complex64] {
        &self.filter[k * self.taps..(k + 1) * self.taps]
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn covariance_mut(&mut self) -> &mut [f64] {
        &mut self.covariance
    }

    pub fn observation_noise(&self) -> &[f64] {
        &self.observation_noise
    }

    pub fn reference_power(&self) -> &[f64] {
        &self.reference_power
    }

    pub fn history(&self) -> &ReferenceHistory {
        &self.history
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// Frobenius norm of the whole filter state.
    pub fn filter_norm(&self) -> f64 {
        self.filter.iter().map(|h| h.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Equivalent time-domain response under the overlap-save convention:
    /// tap `j` contributes the first `K - R + 1` samples of its IDFT, delayed
    /// by `j R`.
    pub fn impulse_response(&self, frames: &FrameConfig, dft: &mut Dft) -> Vec<f64> {
        let n = frames.modelled_rir_len();
        let mut out = vec![0.0; frames.modelled_span()];
        let mut buf = vec![ZERO; self.bins];
        for j in 0..self.taps {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = self.filter[k * self.taps + j];
            }
            dft.inverse(&mut buf);
            let offset = j * frames.frame_shift;
            for (o, b) in out[offset..offset + n].iter_mut().zip(&buf) {
                *o += b.re;
            }
        }
        out
    }
}

/// `Xᵀ H` over the taps of one bin.
pub fn echo_estimate(reference: &[Complex64], filter: &[Complex64]) -> Complex64 {
    reference.iter().zip(filter).map(|(x, h)| x * h).sum()
}

fn excitation(reference: &[Complex64]) -> f64 {
    reference.iter().map(|x| x.norm_sqr()).sum()
}

/// Kalman gain of one bin:
/// `K = ρ P X* / (ρ P ‖X‖² + Ψˢⁿ + ε)`, or zero if the denominator vanishes.
pub fn kalman_gain(
    reference: &[Complex64],
    covariance: f64,
    observation_noise: f64,
    overlap_ratio: f64,
    regularization: f64,
    gain: &mut [Complex64],
) {
    let weighted = overlap_ratio * covariance;
    let denom = weighted * excitation(reference) + observation_noise + regularization;
    if denom > 0.0 {
        let scale = weighted / denom;
        for (g, x) in gain.iter_mut().zip(reference) {
            *g = x.conj() * scale;
        }
    } else {
        gain.fill(ZERO);
    }
}

/// Frequency-domain NLMS gain of one bin: `K = μ X* / (‖X‖² + ε)`.
pub fn fd_nlms_gain(
    reference: &[Complex64],
    stepsize: f64,
    regularization: f64,
    gain: &mut [Complex64],
) {
    let denom = excitation(reference) + regularization;
    if denom > 0.0 {
        let scale = stepsize / denom;
        for (g, x) in gain.iter_mut().zip(reference) {
            *g = x.conj() * scale;
        }
    } else {
        gain.fill(ZERO);
    }
}

/// Variable-stepsize gain of one bin. Updates the averaged reference power
/// `ψ ← λ ψ + (1 - λ) ‖X‖²` and returns it.
#[allow(clippy::too_many_arguments)]
pub fn vss_gain(
    reference: &[Complex64],
    reference_power: f64,
    step_factor: f64,
    error_factor: f64,
    lambda: f64,
    delta: f64,
    error: Complex64,
    gain: &mut [Complex64],
) -> f64 {
    let psi = lambda * reference_power + (1.0 - lambda) * excitation(reference);
    let scale = step_factor / (psi + (error_factor * error).norm_sqr() + delta);
    for (g, x) in gain.iter_mut().zip(reference) {
        *g = x.conj() * scale;
    }
    psi
}

/// `Ψˢⁿ_ℓ = β Ψˢⁿ_{ℓ-1} + (1 - β) |E_ℓ|²`.
pub fn update_observation_noise(previous: f64, error: Complex64, smoothing: f64) -> f64 {
    smoothing * previous + (1.0 - smoothing) * error.norm_sqr()
}

/// `Ĥ_ℓ = A Ĥ_{ℓ-1} + A K E` for the taps of one bin.
pub fn filter_state_update(
    filter: &mut [Complex64],
    gain: &[Complex64],
    error: Complex64,
    transition: f64,
) {
    for (h, g) in filter.iter_mut().zip(gain) {
        *h = transition * *h + transition * g * error;
    }
}

/// Outcome of one covariance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceUpdate {
    pub covariance: f64,
    pub product_clamped: bool,
    pub covariance_clamped: bool,
}

/// `P_{ℓ+1} = A² P_ℓ (1 - ρ XᵀK) + (P_ℓ + |Ĥ_{ℓ-1}|²)(1 - A²)`.
///
/// `filter_power` is the mean of `|Ĥ_{ℓ-1}|²` over the taps.
pub fn covariance_update(
    covariance: f64,
    reference: &[Complex64],
    gain: &[Complex64],
    overlap_ratio: f64,
    transition: f64,
    filter_power: f64,
) -> CovarianceUpdate {
    let raw = overlap_ratio * echo_estimate(reference, gain).re;
    let product = raw.clamp(0.0, 1.0);
    let a2 = transition * transition;
    let process_noise = (covariance + filter_power) * (1.0 - a2);
    let next = a2 * covariance * (1.0 - product) + process_noise;
    CovarianceUpdate {
        covariance: next.max(0.0),
        // Rounding can push an exact 0 or 1 by a few ulps.
        product_clamped: !(-1e-12..=1.0 + 1e-12).contains(&raw),
        covariance_clamped: next < 0.0,
    }
}

/// `E^o = D - D̂`.
pub fn oracle_error_substitute(
    echo: &SpectralFrame,
    echo_estimate: &SpectralFrame,
) -> Result<SpectralFrame> {
    check_len("oracle echo frame", echo_estimate.len(), echo.len())?;
    Ok(SpectralFrame {
        index: echo_estimate.index,
        bins: echo
            .bins
            .iter()
            .zip(&echo_estimate.bins)
            .map(|(d, dh)| d - dh)
            .collect(),
        origin: Origin::Error,
    })
}

/// Which error drives the gain and the state update.
#[derive(Debug, Clone, Copy, Default)]
pub enum ErrorSource<'a> {
    /// The observed error `E = Y - D̂`.
    #[default]
    Observed,
    /// The true echo residual `D - D̂`, given the true echo frame `D`.
    Oracle(Option<&'a SpectralFrame>),
}

/// Per-step inputs beyond the signal frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepInputs<'a> {
    pub error_source: ErrorSource<'a>,
    /// Replaces the smoothed `Ψˢⁿ` estimate with given per-bin values.
    pub observation_noise: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub error: SpectralFrame,
    pub echo_estimate: SpectralFrame,
}

/// Error and echo estimate of the current frame; the state is not modified.
/// The reference history must already contain frame `ℓ`.
pub fn fdkf_error(y: &SpectralFrame, state: &FdkfState) -> Result<StepOutput> {
    check_len("microphone frame", state.bins, y.len())?;
    let mut echo = SpectralFrame::zeros(y.index, state.bins, Origin::EchoEstimate);
    let mut error = SpectralFrame::zeros(y.index, state.bins, Origin::Error);
    for k in 0..state.bins {
        let dh = echo_estimate(state.history.bin(k), state.filter_bin(k));
        echo.bins[k] = dh;
        error.bins[k] = y.bins[k] - dh;
    }
    Ok(StepOutput {
        error,
        echo_estimate: echo,
    })
}

/// One full frame of the recursion: advance the reference history, error,
/// observation noise, gain, filter update, covariance update.
pub fn fdkf_step(
    y: &SpectralFrame,
    x: &SpectralFrame,
    state: &mut FdkfState,
    params: &FdkfParams,
    gain_law: &GainLaw,
    inputs: &StepInputs<'_>,
) -> Result<StepOutput> {
    check_len("reference frame", state.bins, x.len())?;
    check_len("microphone frame", state.bins, y.len())?;
    if let Some(noise) = inputs.observation_noise {
        check_len("observation noise", state.bins, noise.len())?;
    }
    let truth = match inputs.error_source {
        ErrorSource::Observed => None,
        ErrorSource::Oracle(Some(d)) => {
            check_len("oracle echo frame", state.bins, d.len())?;
            Some(d)
        }
        ErrorSource::Oracle(None) => {
            return Err(Error::config(
                "filters.oracle",
                "oracle adaptation requires the true echo frame",
            ))
        }
    };

    state.history.push(x)?;
    let mut out = fdkf_error(y, state)?;
    let mut adapt = match truth {
        Some(d) => oracle_error_substitute(d, &out.echo_estimate)?,
        None => out.error.clone(),
    };
    if let Some(constraint) = state.constraint.as_mut() {
        constraint.project_error(&mut out.error.bins);
        if truth.is_some() {
            constraint.project_error(&mut adapt.bins);
        } else {
            adapt.bins.copy_from_slice(&out.error.bins);
        }
    }

    let bins = state.bins;
    let taps = state.taps;
    let frame_excitation: f64 = (0..bins)
        .map(|k| excitation(state.history.bin(k)))
        .sum::<f64>()
        / bins as f64;
    state.excitation_sum += frame_excitation;
    let epsilon = params.regularization * state.excitation_sum / (state.frame + 1) as f64;
    let a = params.transition_at(state.frame);
    let mut any_update = false;

    for k in 0..bins {
        let e = adapt.bins[k];
        state.observation_noise[k] = match inputs.observation_noise {
            Some(given) => given[k],
            None => update_observation_noise(state.observation_noise[k], e, params.smoothing),
        };
        let reference = state.history.bin(k);
        let gain = &mut state.gain;
        match gain_law {
            GainLaw::Kalman => kalman_gain(
                reference,
                state.covariance[k],
                state.observation_noise[k],
                params.overlap_ratio,
                epsilon,
                gain,
            ),
            GainLaw::FdNlms { stepsize } => fd_nlms_gain(reference, stepsize.get(k), epsilon, gain),
            GainLaw::Vss {
                lambda,
                delta,
                step_factor,
                error_factor,
            } => {
                state.reference_power[k] = vss_gain(
                    reference,
                    state.reference_power[k],
                    step_factor.get(k),
                    error_factor.get(k),
                    *lambda,
                    *delta,
                    e,
                    gain,
                );
            }
        }

        let h = &state.filter[k * taps..(k + 1) * taps];
        let filter_power = h.iter().map(|v| v.norm_sqr()).sum::<f64>() / taps as f64;
        for (u, g) in state.update[k * taps..(k + 1) * taps]
            .iter_mut()
            .zip(&*gain)
        {
            *u = g * e;
            any_update |= *u != ZERO;
        }

        let cov = covariance_update(
            state.covariance[k],
            reference,
            gain,
            params.overlap_ratio,
            a,
            filter_power,
        );
        state.covariance[k] = cov.covariance;
        state.diagnostics.gain_product_clamps += u64::from(cov.product_clamped);
        state.diagnostics.covariance_clamps += u64::from(cov.covariance_clamped);
    }

    if any_update {
        if let Some(constraint) = state.constraint.as_mut() {
            for j in 0..taps {
                constraint.project_taps(&mut state.update, taps, j);
            }
        }
    }
    for (h, u) in state.filter.iter_mut().zip(&state.update) {
        *h = a * *h + a * u;
    }

    state.frame += 1;
    Ok(out)
}

/// An FDKF bound to its parameters, gain law and adaptation mode.
#[derive(Debug, Clone)]
pub struct Fdkf {
    params: FdkfParams,
    gain_law: GainLaw,
    oracle: bool,
    state: FdkfState,
}

impl Fdkf {
    pub fn new(frames: &FrameConfig, params: FdkfParams, gain_law: GainLaw) -> Result<Self> {
        gain_law.validate(Some(frames.dft_size))?;
        let state = FdkfState::new(frames, &params)?;
        Ok(Self {
            params,
            gain_law,
            oracle: false,
            state,
        })
    }

    /// Adapt on `D - D̂` instead of `Y - D̂`.
    pub fn with_oracle_adaptation(mut self) -> Self {
        self.oracle = true;
        self
    }

    pub fn is_oracle(&self) -> bool {
        self.oracle
    }

    pub fn params(&self) -> &FdkfParams {
        &self.params
    }

    pub fn gain_law(&self) -> &GainLaw {
        &self.gain_law
    }

    /// Mutable access for injecting per-frame gain factors.
    pub fn gain_law_mut(&mut self) -> &mut GainLaw {
        &mut self.gain_law
    }

    pub fn state(&self) -> &FdkfState {
        &self.state
    }

    /// Process one frame. `echo` is required for oracle adaptation and
    /// ignored otherwise.
    pub fn step(
        &mut self,
        y: &SpectralFrame,
        x: &SpectralFrame,
        echo: Option<&SpectralFrame>,
    ) -> Result<StepOutput> {
        let inputs = StepInputs {
            error_source: if self.oracle {
                ErrorSource::Oracle(echo)
            } else {
                ErrorSource::Observed
            },
            observation_noise: None,
        };
        fdkf_step(y, x, &mut self.state, &self.params, &self.gain_law, &inputs)
    }
}

/// Time-domain NLMS with regularized stepsize `μ₀ / (‖x‖² + δ)`.
#[derive(Debug, Clone)]
pub struct NlmsState {
    coefficients: Vec<f64>,
    /// Doubled ring buffer; `ring[pos..pos + N]` is `x(n), x(n-1), …`.
    ring: Vec<f64>,
    pos: usize,
    energy: f64,
    since_refresh: usize,
    stepsize: f64,
    regularization: f64,
}

impl NlmsState {
    pub fn new(length: usize, stepsize: f64, regularization: f64) -> Result<Self> {
        if length == 0 {
            return Err(Error::config(
                "nlms.length",
                "filter length must be at least 1",
            ));
        }
        if !(stepsize > 0.0 && stepsize < 2.0) {
            return Err(Error::config(
                "nlms.stepsize",
                format!("stepsize must satisfy 0 < mu0 < 2 (got {stepsize})"),
            ));
        }
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(Error::config(
                "nlms.regularization",
                format!("regularization must be >= 0 (got {regularization})"),
            ));
        }
        Ok(Self {
            coefficients: vec![0.0; length],
            ring: vec![0.0; 2 * length],
            pos: 0,
            energy: 0.0,
            since_refresh: 0,
            stepsize,
            regularization,
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Process one sample pair and return the error `e = y - xᵀĥ`.
    pub fn nlms_step(&mut self, x: f64, y: f64) -> f64 {
        let n = self.coefficients.len();
        self.pos = (self.pos + n - 1) % n;
        let oldest = self.ring[self.pos];
        self.ring[self.pos] = x;
        self.ring[self.pos + n] = x;
        self.since_refresh += 1;
        if self.since_refresh >= n {
            // Bound the drift of the running energy.
            self.energy = self.window().iter().map(|v| v * v).sum();
            self.since_refresh = 0;
        } else {
            self.energy = (self.energy + x * x - oldest * oldest).max(0.0);
        }

        let window = &self.ring[self.pos..self.pos + n];
        let estimate: f64 = window
            .iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum();
        let error = y - estimate;
        let denom = self.energy + self.regularization;
        if denom > 0.0 && error != 0.0 {
            let step = self.stepsize * error / denom;
            for (h, v) in self.coefficients.iter_mut().zip(window) {
                *h += step * v;
            }
        }
        error
    }

    fn window(&self) -> &[f64] {
        let n = self.coefficients.len();
        &self.ring[self.pos..self.pos + n]
    }
}
