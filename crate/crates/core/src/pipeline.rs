//! Stream whole signals through a block filter or the NLMS baseline.
//!
//! The returned error signal is aligned with the input: sample `n` of `e`
//! corresponds to sample `n` of `y`, with the OLA hold-back removed.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::filters::{Diagnostics, Fdkf, NlmsState};
use crate::framing::{chunks_padded, Analyzer, Dft, FrameConfig, FrameMode, Origin, Synthesizer};
use crate::metrics::{misalignment, Trace};

/// Input signals plus whatever ground truth is available.
#[derive(Debug, Clone, Copy)]
pub struct Streams<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    /// True echo, needed for oracle adaptation.
    pub echo: Option<&'a [f64]>,
    /// `(start sample, RIR)` trajectory for misalignment tracking.
    pub rirs: Option<&'a [(usize, Vec<f64>)]>,
}

impl Streams<'_> {
    fn validate(&self) -> Result<()> {
        check_len("reference vs microphone", self.y.len(), self.x.len())?;
        if let Some(d) = self.echo {
            check_len("echo vs microphone", self.y.len(), d.len())?;
        }
        Ok(())
    }

    fn rir_at(&self, sample: usize) -> Option<&[f64]> {
        self.rirs?
            .iter()
            .rev()
            .find(|(start, _)| *start <= sample)
            .map(|(_, h)| h.as_slice())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterRun {
    /// Error signal, same length as `y`.
    pub e: Vec<f64>,
    /// Echo estimate `y - e`.
    pub d_hat: Vec<f64>,
    /// Misalignment in dB, indexed by the last input sample of each update.
    pub misalignment: Option<Trace>,
    /// Some true RIR was longer than the modelled response.
    pub misalignment_truncated: bool,
    pub diagnostics: Diagnostics,
    pub asymmetry_warnings: u64,
    /// Samples removed from the front of the raw output stream.
    pub alignment: usize,
}

fn echo_estimate(y: &[f64], e: &[f64]) -> Vec<f64> {
    y.iter().zip(e).map(|(y, e)| y - e).collect()
}

/// Run a frequency-domain filter. Misalignment is tracked for OLS framing
/// when the true RIR is known; OLA has no equivalent time-domain response.
pub fn run_fdkf(frames: &FrameConfig, mut filter: Fdkf, streams: &Streams) -> Result<FilterRun> {
    streams.validate()?;
    let len = streams.y.len();
    let lag = frames.stream_lag();
    let shift = frames.frame_shift;

    let mut x_analysis = Analyzer::new(frames, Origin::Reference)?;
    let mut y_analysis = Analyzer::new(frames, Origin::Microphone)?;
    let mut d_analysis = match (filter.is_oracle(), streams.echo) {
        (true, Some(_)) => Some(Analyzer::new(frames, Origin::Echo)?),
        _ => None,
    };
    let mut synthesis = Synthesizer::new(frames)?;
    let track = frames.mode == FrameMode::Ols && streams.rirs.is_some();
    let mut dft = Dft::new(frames.dft_size);

    let x_chunks = chunks_padded(streams.x, shift, len + lag);
    let y_chunks = chunks_padded(streams.y, shift, len + lag);
    let d_chunks = streams.echo.map(|d| chunks_padded(d, shift, len + lag));

    let mut raw = Vec::with_capacity(x_chunks.len() * shift);
    let mut trace = track.then(Trace::default);
    let mut truncated = false;
    for (i, (xc, yc)) in x_chunks.iter().zip(&y_chunks).enumerate() {
        let x = x_analysis.analysis_step(xc)?;
        let y = y_analysis.analysis_step(yc)?;
        let d = match (&mut d_analysis, &d_chunks) {
            (Some(a), Some(chunks)) => Some(a.analysis_step(&chunks[i])?),
            _ => None,
        };
        let out = filter.step(&y, &x, d.as_ref())?;
        raw.extend(synthesis.synthesis_step(&out.error)?);

        let last = (i + 1) * shift - 1;
        if let Some(trace) = trace.as_mut() {
            if last < len {
                if let Some(h) = streams.rir_at(last) {
                    let h_hat = filter.state().impulse_response(frames, &mut dft);
                    if let Some(m) = misalignment(h, &h_hat) {
                        trace.push(last, m.db);
                        truncated |= m.truncated;
                    }
                }
            }
        }
    }
    let e = raw[lag..lag + len].to_vec();
    Ok(FilterRun {
        d_hat: echo_estimate(streams.y, &e),
        e,
        misalignment: trace,
        misalignment_truncated: truncated,
        diagnostics: filter.state().diagnostics(),
        asymmetry_warnings: synthesis.asymmetry_warnings(),
        alignment: lag,
    })
}

/// Run the sample-by-sample NLMS baseline, sampling misalignment every
/// `misalignment_every` samples when the true RIR is known.
pub fn run_nlms(
    mut filter: NlmsState,
    streams: &Streams,
    misalignment_every: usize,
) -> Result<FilterRun> {
    streams.validate()?;
    let every = misalignment_every.max(1);
    let mut trace = streams.rirs.map(|_| Trace::default());
    let mut truncated = false;
    let mut e = Vec::with_capacity(streams.y.len());
    for (n, (&x, &y)) in streams.x.iter().zip(streams.y).enumerate() {
        e.push(filter.nlms_step(x, y));
        if (n + 1) % every == 0 {
            if let (Some(trace), Some(h)) = (trace.as_mut(), streams.rir_at(n)) {
                if let Some(m) = misalignment(h, filter.coefficients()) {
                    trace.push(n, m.db);
                    truncated |= m.truncated;
                }
            }
        }
    }
    Ok(FilterRun {
        d_hat: echo_estimate(streams.y, &e),
        e,
        misalignment: trace,
        misalignment_truncated: truncated,
        diagnostics: Diagnostics::default(),
        asymmetry_warnings: 0,
        alignment: 0,
    })
}
