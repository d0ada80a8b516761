//! TOML experiment configuration.
//!
//! A file is parsed into [`RawConfig`], where every key is optional, and
//! then resolved into a fully materialized [`ExperimentConfig`]. Unknown keys
//! are rejected. [`ExperimentConfig::to_toml`] writes the materialized form,
//! which resolves back to the same configuration.
//!
//! ```toml
//! seed = 7
//! filters = ["fdkf", "oracle_fdkf", "nlms"]
//!
//! [framing]
//! mode = "ols"          # K = 1408, R = 512 for taps = 1; K = 896 for taps = 2
//! taps = 1
//!
//! [scenario]
//! ser_db = 0.0
//! snr_db = 20.0         # or "none"
//! sections = [{ kind = "stfe", duration = 8.0 }]
//! nonlinearity = { kind = "sef", alpha = 1.0 }
//! far_end = { kind = "wgn" }
//! rir = [{ at = 0.0, rt60 = 0.2 }, { at = 4.0, rt60 = 0.2, seed = 11 }]
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BitDepth;
use crate::echosim::{
    derived_rir_seed, Activity, NonlinearitySpec, RirChange, RirSpec, ScenarioSpec, SectionSpec,
    SigmoidParams, SourceSpec,
};
use crate::error::{Error, Result};
use crate::filters::{BinFactors, FdkfParams, GainLaw};
use crate::framing::{FrameConfig, FrameMode, WindowKind};
use crate::metrics::ErleConfig;

/// Filters the runner can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Fdkf,
    /// FDKF adapted with the true near-end-free error.
    OracleFdkf,
    /// Time-domain NLMS baseline.
    Nlms,
    /// FDKF recursion with the fd-NLMS gain.
    FdkfFdNlms,
    /// FDKF recursion with the variable-stepsize gain.
    FdkfVss,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Fdkf,
        FilterKind::OracleFdkf,
        FilterKind::Nlms,
        FilterKind::FdkfFdNlms,
        FilterKind::FdkfVss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Fdkf => "fdkf",
            FilterKind::OracleFdkf => "oracle_fdkf",
            FilterKind::Nlms => "nlms",
            FilterKind::FdkfFdNlms => "fdkf_fd_nlms",
            FilterKind::FdkfVss => "fdkf_vss",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("filters", format!("unknown filter `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFraming {
    pub mode: Option<FrameMode>,
    pub dft_size: Option<usize>,
    pub frame_shift: Option<usize>,
    pub taps: Option<usize>,
    pub window: Option<WindowKind>,
    pub sample_rate: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFdkf {
    pub transition: Option<f64>,
    pub transition_schedule: Option<Vec<f64>>,
    pub smoothing: Option<f64>,
    pub overlap_ratio: Option<f64>,
    pub initial_covariance: Option<f64>,
    pub regularization: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGain {
    pub fd_nlms_stepsize: Option<BinFactors>,
    pub vss_lambda: Option<f64>,
    pub vss_delta: Option<f64>,
    pub vss_step_factor: Option<BinFactors>,
    pub vss_error_factor: Option<BinFactors>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawNlms {
    pub stepsize: Option<f64>,
    /// Defaults to the longest RIR of the scenario.
    pub length: Option<usize>,
    pub regularization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSection {
    pub kind: Activity,
    pub duration: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRir {
    pub at: Option<f64>,
    pub rt60: Option<f64>,
    pub length: Option<usize>,
    pub seed: Option<u64>,
    pub allow_any_rt60: Option<bool>,
}

/// Either a number in dB or the string `"none"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawSnr {
    Db(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RawNonlinearity {
    None,
    Sef { alpha: Option<f64> },
    Sigmoid(SigmoidParams),
}

impl RawNonlinearity {
    fn resolve(&self) -> NonlinearitySpec {
        match self {
            RawNonlinearity::None => NonlinearitySpec::None,
            RawNonlinearity::Sef { alpha } => NonlinearitySpec::Sef { alpha: *alpha },
            RawNonlinearity::Sigmoid(p) => NonlinearitySpec::Sigmoid(*p),
        }
    }

    fn from_spec(spec: &NonlinearitySpec) -> Self {
        match spec {
            NonlinearitySpec::None => RawNonlinearity::None,
            NonlinearitySpec::Sef { alpha } => RawNonlinearity::Sef { alpha: *alpha },
            NonlinearitySpec::Sigmoid(p) => RawNonlinearity::Sigmoid(*p),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawScenario {
    pub ser_db: Option<f64>,
    pub snr_db: Option<RawSnr>,
    pub sections: Option<Vec<RawSection>>,
    pub nonlinearity: Option<RawNonlinearity>,
    pub far_end: Option<SourceSpec>,
    pub near_end: Option<SourceSpec>,
    pub noise: Option<SourceSpec>,
    pub rir: Option<Vec<RawRir>>,
}

/// Recorded signals instead of a synthetic scenario. Only the reference
/// and microphone are required; metrics needing a missing component are
/// skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFiles {
    pub reference: PathBuf,
    pub microphone: PathBuf,
    pub echo: Option<PathBuf>,
    pub near_end: Option<PathBuf>,
    pub noise: Option<PathBuf>,
    /// Section plan; one double-talk section spanning the signal if absent.
    pub sections: Option<Vec<RawSection>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMetrics {
    pub erle: Option<ErleConfig>,
    pub warmup_seconds: Option<f64>,
    pub final_window_seconds: Option<f64>,
    pub trace_stride: Option<usize>,
    pub misalignment_threshold_db: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub wav_depth: BitDepth,
    /// Write the scenario components next to the filter outputs.
    pub write_scenario: bool,
    /// Write the per-filter enhanced signals.
    pub write_audio: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            wav_depth: BitDepth::Float32,
            write_scenario: true,
            write_audio: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub seeds: Option<Vec<u64>>,
    pub ser_db: Option<Vec<f64>>,
    pub nonlinearity: Option<Vec<RawNonlinearity>>,
}

/// File-level configuration with every key optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub filters: Option<Vec<FilterKind>>,
    #[serde(default)]
    pub framing: RawFraming,
    #[serde(default)]
    pub fdkf: RawFdkf,
    #[serde(default)]
    pub gain: RawGain,
    #[serde(default)]
    pub nlms: RawNlms,
    pub scenario: Option<RawScenario>,
    pub input: Option<InputFiles>,
    #[serde(default)]
    pub metrics: RawMetrics,
    pub output: Option<OutputConfig>,
    pub grid: Option<RawGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlmsConfig {
    pub stepsize: f64,
    pub length: Option<usize>,
    pub regularization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub erle: ErleConfig,
    pub warmup_seconds: f64,
    pub final_window_seconds: f64,
    /// Trace decimation for CSV output; aggregates use the emitted points.
    pub trace_stride: usize,
    /// Level for the time-to-misalignment statistic.
    pub misalignment_threshold_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub seeds: Vec<u64>,
    pub ser_db: Vec<f64>,
    pub nonlinearity: Vec<RawNonlinearity>,
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        self.seeds.len() * self.ser_db.len() * self.nonlinearity.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Synthetic(ScenarioSpec),
    Files(InputFiles),
}

/// A validated experiment with every default materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub filters: Vec<FilterKind>,
    pub frames: FrameConfig,
    pub fdkf: FdkfParams,
    pub fd_nlms: GainLaw,
    pub vss: GainLaw,
    pub nlms: NlmsConfig,
    pub source: ScenarioSource,
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
    pub grid: GridConfig,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_FILTERS: [FilterKind; 2] = [FilterKind::Fdkf, FilterKind::Nlms];
pub const DEFAULT_FD_NLMS_STEPSIZE: f64 = 0.5;
pub const DEFAULT_VSS_DELTA: f64 = 1e-6;
pub const DEFAULT_VSS_STEP_FACTOR: f64 = 0.5;
pub const DEFAULT_VSS_ERROR_FACTOR: f64 = 1.0;
pub const DEFAULT_NLMS_STEPSIZE: f64 = 1.0;
pub const DEFAULT_NLMS_REGULARIZATION: f64 = 1e-6;

fn resolve_frames(raw: &RawFraming) -> Result<FrameConfig> {
    let mode = raw.mode.unwrap_or(FrameMode::Ola);
    let frames = match mode {
        FrameMode::Ola => {
            let taps = raw.taps.unwrap_or(8);
            let dft_size = raw.dft_size.unwrap_or(512);
            FrameConfig {
                dft_size,
                frame_shift: raw.frame_shift.unwrap_or(dft_size / 4),
                taps,
                mode,
                window: raw.window.unwrap_or(WindowKind::SqrtHann),
                sample_rate: raw.sample_rate.unwrap_or(FrameConfig::DEFAULT_SAMPLE_RATE),
            }
        }
        FrameMode::Ols => {
            let taps = raw.taps.unwrap_or(1);
            let dft_size = match (raw.dft_size, taps) {
                (Some(k), _) => k,
                (None, 1) => FrameConfig::ols_single_tap().dft_size,
                (None, 2) => FrameConfig::ols_multi_tap().dft_size,
                (None, l) => {
                    return Err(Error::config(
                        "framing.dft_size",
                        format!("no default DFT size for OLS with {l} taps; set dft_size"),
                    ))
                }
            };
            FrameConfig {
                dft_size,
                frame_shift: raw.frame_shift.unwrap_or(512),
                taps,
                mode,
                window: raw.window.unwrap_or(WindowKind::Rectangular),
                sample_rate: raw.sample_rate.unwrap_or(FrameConfig::DEFAULT_SAMPLE_RATE),
            }
        }
    };
    frames.validate()?;
    Ok(frames)
}

fn resolve_sections(raw: &[RawSection]) -> Vec<SectionSpec> {
    raw.iter()
        .map(|s| SectionSpec {
            kind: s.kind,
            duration: s.duration,
        })
        .collect()
}

fn raw_sections(sections: &[SectionSpec]) -> Vec<RawSection> {
    sections
        .iter()
        .map(|s| RawSection {
            kind: s.kind,
            duration: s.duration,
        })
        .collect()
}

fn resolve_scenario(raw: &RawScenario, seed: u64, sample_rate: u32) -> Result<ScenarioSpec> {
    let mut spec = ScenarioSpec::standard(sample_rate, seed);
    if let Some(sections) = &raw.sections {
        spec.sections = resolve_sections(sections);
    }
    if let Some(ser) = raw.ser_db {
        spec.ser_db = ser;
    }
    match &raw.snr_db {
        None => {}
        Some(RawSnr::Db(v)) => spec.snr_db = Some(*v),
        Some(RawSnr::Keyword(k)) if k == "none" => spec.snr_db = None,
        Some(RawSnr::Keyword(k)) => {
            return Err(Error::config(
                "scenario.snr_db",
                format!("expected a number or \"none\" (got \"{k}\")"),
            ))
        }
    }
    if let Some(nl) = &raw.nonlinearity {
        spec.nonlinearity = nl.resolve();
    }
    for (slot, value) in [
        (&mut spec.far_end, &raw.far_end),
        (&mut spec.near_end, &raw.near_end),
        (&mut spec.noise, &raw.noise),
    ] {
        if let Some(v) = value {
            *slot = v.clone();
        }
    }
    if let Some(rirs) = &raw.rir {
        spec.rir_schedule = rirs
            .iter()
            .enumerate()
            .map(|(i, r)| RirChange {
                at: r.at.unwrap_or(0.0),
                rir: RirSpec {
                    rt60: r.rt60.unwrap_or(ScenarioSpec::DEFAULT_RT60),
                    length: r.length.unwrap_or(ScenarioSpec::DEFAULT_RIR_LENGTH),
                    sample_rate,
                    seed: r.seed.unwrap_or_else(|| derived_rir_seed(seed, i)),
                    allow_any_rt60: r.allow_any_rt60.unwrap_or(false),
                },
            })
            .collect();
    }
    spec.validate()?;
    Ok(spec)
}

fn raw_scenario(spec: &ScenarioSpec) -> RawScenario {
    RawScenario {
        ser_db: Some(spec.ser_db),
        snr_db: Some(match spec.snr_db {
            Some(v) => RawSnr::Db(v),
            None => RawSnr::Keyword("none".into()),
        }),
        sections: Some(raw_sections(&spec.sections)),
        nonlinearity: Some(RawNonlinearity::from_spec(&spec.nonlinearity)),
        far_end: Some(spec.far_end.clone()),
        near_end: Some(spec.near_end.clone()),
        noise: Some(spec.noise.clone()),
        rir: Some(
            spec.rir_schedule
                .iter()
                .map(|c| RawRir {
                    at: Some(c.at),
                    rt60: Some(c.rir.rt60),
                    length: Some(c.rir.length),
                    seed: Some(c.rir.seed),
                    allow_any_rt60: Some(c.rir.allow_any_rt60),
                })
                .collect(),
        ),
    }
}

fn rebase(path: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn rebase_source(source: &mut Option<SourceSpec>, base: Option<&Path>) {
    if let Some(SourceSpec::Wav { path }) = source {
        *path = rebase(path, base);
    }
}

impl RawConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Self::parse(&text, path)?;
        raw.rebase_paths(path.parent());
        Ok(raw)
    }

    /// Make relative file paths relative to `base` (the config's directory).
    pub fn rebase_paths(&mut self, base: Option<&Path>) {
        if let Some(out) = &mut self.output_dir {
            *out = rebase(out, base);
        }
        if let Some(input) = &mut self.input {
            for p in [&mut input.reference, &mut input.microphone] {
                *p = rebase(p, base);
            }
            for p in [&mut input.echo, &mut input.near_end, &mut input.noise]
                .into_iter()
                .flatten()
            {
                *p = rebase(p, base);
            }
        }
        if let Some(sc) = &mut self.scenario {
            rebase_source(&mut sc.far_end, base);
            rebase_source(&mut sc.near_end, base);
            rebase_source(&mut sc.noise, base);
        }
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let seed = self.seed.unwrap_or(DEFAULT_SEED);
        let frames = resolve_frames(&self.framing)?;

        let defaults = FdkfParams::for_frames(&frames);
        let f = &self.fdkf;
        let fdkf = FdkfParams {
            transition: f.transition.unwrap_or(defaults.transition),
            transition_schedule: f.transition_schedule.clone(),
            smoothing: f.smoothing.unwrap_or(defaults.smoothing),
            overlap_ratio: f.overlap_ratio.unwrap_or(defaults.overlap_ratio),
            taps: frames.taps,
            initial_covariance: f.initial_covariance.unwrap_or(defaults.initial_covariance),
            regularization: f.regularization.unwrap_or(defaults.regularization),
        };

        let g = &self.gain;
        let fd_nlms = GainLaw::FdNlms {
            stepsize: g
                .fd_nlms_stepsize
                .clone()
                .unwrap_or(BinFactors::Uniform(DEFAULT_FD_NLMS_STEPSIZE)),
        };
        let vss = GainLaw::Vss {
            lambda: g.vss_lambda.unwrap_or(GainLaw::DEFAULT_VSS_LAMBDA),
            delta: g.vss_delta.unwrap_or(DEFAULT_VSS_DELTA),
            step_factor: g
                .vss_step_factor
                .clone()
                .unwrap_or(BinFactors::Uniform(DEFAULT_VSS_STEP_FACTOR)),
            error_factor: g
                .vss_error_factor
                .clone()
                .unwrap_or(BinFactors::Uniform(DEFAULT_VSS_ERROR_FACTOR)),
        };

        let nlms = NlmsConfig {
            stepsize: self.nlms.stepsize.unwrap_or(DEFAULT_NLMS_STEPSIZE),
            length: self.nlms.length,
            regularization: self
                .nlms
                .regularization
                .unwrap_or(DEFAULT_NLMS_REGULARIZATION),
        };

        let source = match (&self.scenario, &self.input) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "input",
                    "`scenario` and `input` are mutually exclusive",
                ))
            }
            (None, Some(files)) => ScenarioSource::Files(files.clone()),
            (scenario, None) => ScenarioSource::Synthetic(resolve_scenario(
                &scenario.clone().unwrap_or_default(),
                seed,
                frames.sample_rate,
            )?),
        };

        let m = &self.metrics;
        let metrics = MetricsConfig {
            erle: m.erle.unwrap_or_default(),
            warmup_seconds: m.warmup_seconds.unwrap_or(0.25),
            final_window_seconds: m.final_window_seconds.unwrap_or(1.0),
            trace_stride: m.trace_stride.unwrap_or(16),
            misalignment_threshold_db: m.misalignment_threshold_db.unwrap_or(-10.0),
        };

        let grid = self.grid.clone().unwrap_or_default();
        let grid = GridConfig {
            seeds: grid.seeds.unwrap_or_else(|| vec![1, 2, 3]),
            ser_db: grid.ser_db.unwrap_or_else(|| vec![-6.0, 0.0, 6.0]),
            nonlinearity: grid
                .nonlinearity
                .unwrap_or_else(|| vec![RawNonlinearity::None]),
        };

        let config = ExperimentConfig {
            seed,
            output_dir: self.output_dir.clone(),
            filters: self
                .filters
                .clone()
                .unwrap_or_else(|| DEFAULT_FILTERS.to_vec()),
            frames,
            fdkf,
            fd_nlms,
            vss,
            nlms,
            source,
            metrics,
            output: self.output.unwrap_or_default(),
            grid,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Read, resolve and validate a configuration file. Relative paths inside
/// the file are taken relative to its directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    RawConfig::from_path(path)?.resolve()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.frames.validate()?;
        self.fdkf.validate()?;
        if self.fdkf.taps != self.frames.taps {
            return Err(Error::config("fdkf.taps", "taps must match framing.taps"));
        }
        self.fd_nlms.validate(Some(self.frames.dft_size))?;
        self.vss.validate(Some(self.frames.dft_size))?;
        if self.filters.is_empty() {
            return Err(Error::config("filters", "select at least one filter"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.filters.iter().find(|f| !seen.insert(**f)) {
            return Err(Error::config(
                "filters",
                format!("filter `{dup}` listed twice"),
            ));
        }
        if !(self.nlms.stepsize > 0.0 && self.nlms.stepsize < 2.0) {
            return Err(Error::config(
                "nlms.stepsize",
                format!("need 0 < mu < 2 (got {})", self.nlms.stepsize),
            ));
        }
        if self.nlms.length == Some(0) {
            return Err(Error::config("nlms.length", "length must be at least 1"));
        }
        if !(self.nlms.regularization >= 0.0 && self.nlms.regularization.is_finite()) {
            return Err(Error::config("nlms.regularization", "must be >= 0"));
        }
        self.metrics.erle.validate()?;
        let m = &self.metrics;
        if !(m.warmup_seconds >= 0.0 && m.warmup_seconds.is_finite()) {
            return Err(Error::config("metrics.warmup_seconds", "must be >= 0"));
        }
        if !(m.final_window_seconds > 0.0 && m.final_window_seconds.is_finite()) {
            return Err(Error::config("metrics.final_window_seconds", "must be > 0"));
        }
        if m.trace_stride == 0 {
            return Err(Error::config("metrics.trace_stride", "must be at least 1"));
        }
        if !m.misalignment_threshold_db.is_finite() {
            return Err(Error::config(
                "metrics.misalignment_threshold_db",
                "must be finite",
            ));
        }
        match &self.source {
            ScenarioSource::Synthetic(spec) => {
                spec.validate()?;
                if spec.sample_rate != self.frames.sample_rate {
                    return Err(Error::config(
                        "framing.sample_rate",
                        "scenario and framing sample rates differ",
                    ));
                }
            }
            ScenarioSource::Files(files) => {
                if self.filters.contains(&FilterKind::OracleFdkf) && files.echo.is_none() {
                    return Err(Error::config(
                        "input.echo",
                        "oracle_fdkf needs the true echo signal",
                    ));
                }
                for s in files.sections.iter().flatten() {
                    if !(s.duration > 0.0 && s.duration.is_finite()) {
                        return Err(Error::config(
                            "input.sections",
                            "durations must be positive",
                        ));
                    }
                }
            }
        }
        if self.grid.cells() == 0 {
            return Err(Error::config("grid", "grid must have at least one cell"));
        }
        for nl in &self.grid.nonlinearity {
            nl.resolve().validate()?;
        }
        Ok(())
    }

    /// The materialized configuration in file form, without `output_dir`.
    pub fn to_raw(&self) -> RawConfig {
        let f = &self.frames;
        let (fd_nlms_stepsize, vss_parts) = match (&self.fd_nlms, &self.vss) {
            (
                GainLaw::FdNlms { stepsize },
                GainLaw::Vss {
                    lambda,
                    delta,
                    step_factor,
                    error_factor,
                },
            ) => (
                Some(stepsize.clone()),
                (
                    Some(*lambda),
                    Some(*delta),
                    Some(step_factor.clone()),
                    Some(error_factor.clone()),
                ),
            ),
            _ => (None, (None, None, None, None)),
        };
        let (scenario, input) = match &self.source {
            ScenarioSource::Synthetic(spec) => (Some(raw_scenario(spec)), None),
            ScenarioSource::Files(files) => (None, Some(files.clone())),
        };
        RawConfig {
            seed: Some(self.seed),
            output_dir: None,
            filters: Some(self.filters.clone()),
            framing: RawFraming {
                mode: Some(f.mode),
                dft_size: Some(f.dft_size),
                frame_shift: Some(f.frame_shift),
                taps: Some(f.taps),
                window: Some(f.window),
                sample_rate: Some(f.sample_rate),
            },
            fdkf: RawFdkf {
                transition: Some(self.fdkf.transition),
                transition_schedule: self.fdkf.transition_schedule.clone(),
                smoothing: Some(self.fdkf.smoothing),
                overlap_ratio: Some(self.fdkf.overlap_ratio),
                initial_covariance: Some(self.fdkf.initial_covariance),
                regularization: Some(self.fdkf.regularization),
            },
            gain: RawGain {
                fd_nlms_stepsize,
                vss_lambda: vss_parts.0,
                vss_delta: vss_parts.1,
                vss_step_factor: vss_parts.2,
                vss_error_factor: vss_parts.3,
            },
            nlms: RawNlms {
                stepsize: Some(self.nlms.stepsize),
                length: self.nlms.length,
                regularization: Some(self.nlms.regularization),
            },
            scenario,
            input,
            metrics: RawMetrics {
                erle: Some(self.metrics.erle),
                warmup_seconds: Some(self.metrics.warmup_seconds),
                final_window_seconds: Some(self.metrics.final_window_seconds),
                trace_stride: Some(self.metrics.trace_stride),
                misalignment_threshold_db: Some(self.metrics.misalignment_threshold_db),
            },
            output: Some(self.output),
            grid: Some(RawGrid {
                seeds: Some(self.grid.seeds.clone()),
                ser_db: Some(self.grid.ser_db.clone()),
                nonlinearity: Some(self.grid.nonlinearity.clone()),
            }),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_raw()).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn scenario_spec(&self) -> Option<&ScenarioSpec> {
        match &self.source {
            ScenarioSource::Synthetic(spec) => Some(spec),
            ScenarioSource::Files(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        RawConfig::parse(text, Path::new("test.toml"))?.resolve()
    }

    #[test]
    fn empty_file_gives_paper_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.frames, FrameConfig::ola_multi_tap());
        assert_eq!(c.fdkf.transition, 0.999);
        assert_eq!(c.fdkf.overlap_ratio, 0.25);
        assert_eq!(c.filters, DEFAULT_FILTERS.to_vec());
        let spec = c.scenario_spec().unwrap();
        assert_eq!(spec.sections.len(), 3);
        assert_eq!(spec.total_samples(), 3 * 8 * 16_000);
    }

    #[test]
    fn ols_defaults_depend_on_taps() {
        let c = parse("[framing]\nmode = \"ols\"\ntaps = 2\n").unwrap();
        assert_eq!((c.frames.dft_size, c.frames.frame_shift), (896, 512));
        assert_eq!(c.frames.window, WindowKind::Rectangular);
        let c = parse("[framing]\nmode = \"ols\"\n").unwrap();
        assert_eq!((c.frames.dft_size, c.frames.taps), (1408, 1));
        assert!(parse("[framing]\nmode = \"ols\"\ntaps = 3\n").is_err());
        assert!(parse("[framing]\nmode = \"ols\"\nwindow = \"sqrt-hann\"\n").is_err());
    }

    #[test]
    fn constraint_violations_name_the_field() {
        let err = parse("[fdkf]\ntransition = 1.5\n").unwrap_err().to_string();
        assert!(
            err.contains("fdkf.transition") && err.contains("0 < A <= 1"),
            "{err}"
        );
        let err = parse("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("bogus"));
        assert!(parse("[scenario]\nsnr_db = \"loud\"\n").is_err());
        assert!(parse("filters = [\"fdkf\", \"fdkf\"]\n").is_err());
        assert!(parse("filters = [\"kalman\"]\n").is_err());
        assert!(
            parse("[scenario]\n[input]\nreference = \"x.wav\"\nmicrophone = \"y.wav\"\n").is_err()
        );
    }

    #[test]
    fn materialized_config_reloads_identically() {
        let text = r#"
            seed = 42
            filters = ["fdkf", "oracle_fdkf", "nlms", "fdkf_fd_nlms", "fdkf_vss"]
            [framing]
            mode = "ols"
            [fdkf]
            transition_schedule = [0.5, 0.9]
            [gain]
            fd_nlms_stepsize = 0.25
            [scenario]
            snr_db = "none"
            nonlinearity = { kind = "sigmoid", gain = 2.0 }
            sections = [{ kind = "stfe", duration = 2.0 }, { kind = "dt", duration = 1.5 }]
            rir = [{ rt60 = 0.2 }, { at = 1.0, rt60 = 0.4, length = 300 }]
            [grid]
            seeds = [5]
            nonlinearity = [{ kind = "none" }, { kind = "sef" }]
        "#;
        let first = parse(text).unwrap();
        let echoed = first.to_toml().unwrap();
        let second = parse(&echoed).unwrap();
        assert_eq!(first, second);
        assert_eq!(echoed, second.to_toml().unwrap());
        let default = parse("").unwrap();
        assert_eq!(parse(&default.to_toml().unwrap()).unwrap(), default);
    }

    #[test]
    fn rir_seeds_follow_the_scenario_seed() {
        let a = parse("seed = 1\n[scenario]\nrir = [{}]\n").unwrap();
        let b = parse("seed = 2\n[scenario]\nrir = [{}]\n").unwrap();
        let c = parse("seed = 2\n[scenario]\nrir = [{ seed = 9 }]\n").unwrap();
        let seed = |c: &ExperimentConfig| c.scenario_spec().unwrap().rir_schedule[0].rir.seed;
        assert_ne!(seed(&a), seed(&b));
        assert_eq!(seed(&c), 9);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut raw = RawConfig::parse(
            "output_dir = \"out\"\n[input]\nreference = \"x.wav\"\nmicrophone = \"/abs/y.wav\"\n",
            Path::new("c.toml"),
        )
        .unwrap();
        raw.rebase_paths(Some(Path::new("/data/exp")));
        assert_eq!(raw.output_dir.unwrap(), PathBuf::from("/data/exp/out"));
        let input = raw.input.unwrap();
        assert_eq!(input.reference, PathBuf::from("/data/exp/x.wav"));
        assert_eq!(input.microphone, PathBuf::from("/abs/y.wav"));
    }
}
