//! Synthetic acoustic-echo scenarios with every ground-truth component kept.
//!
//! A scenario is a sequence of activity sections (far-end single talk,
//! near-end single talk, double talk). The far-end signal `x` is passed
//! through an optional memoryless loudspeaker nonlinearity and convolved with
//! a synthetic room impulse response that may switch at given instants; the
//! microphone signal is `y = s + n + d`.

use std::f64::consts::{LN_10, PI};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::audio_io::read_wav;
use crate::error::{Error, Result};

/// Reverberation times covered by the synthetic RIR generator by default.
pub const RT60_RANGE: (f64, f64) = (0.05, 0.6);

/// Loudspeaker SEF shapes drawn per scenario when none is fixed.
pub const DEFAULT_SEF_ALPHAS: [f64; 4] = [0.5, 1.0, 10.0, 999.0];

/// Frames of this duration decide near-end activity for SER/SNR calibration.
const ACTIVITY_FRAME_SECONDS: f64 = 0.02;
/// Activity threshold relative to the loudest frame of a section (−40 dB).
const ACTIVITY_THRESHOLD: f64 = 1e-4;
/// Peak level of the stored components after the common headroom gain.
const HEADROOM_PEAK: f64 = 0.99;

// Independent random streams derived from one scenario seed.
const STREAM_FAR_END: u64 = 1;
const STREAM_NEAR_END: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_ALPHA: u64 = 4;
const STREAM_RIR: u64 = 16;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exponentially decaying Gaussian noise room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct RirSpec {
    /// Reverberation time (60 dB energy decay) in seconds.
    pub rt60: f64,
    pub length: usize,
    pub sample_rate: u32,
    pub seed: u64,
    /// Accept `rt60` outside [`RT60_RANGE`].
    pub allow_any_rt60: bool,
}

impl RirSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rt60 > 0.0 && self.rt60.is_finite()) {
            return Err(Error::config(
                "rir.rt60",
                format!("rt60 must be positive (got {})", self.rt60),
            ));
        }
        if !self.allow_any_rt60 && !(RT60_RANGE.0..=RT60_RANGE.1).contains(&self.rt60) {
            return Err(Error::config(
                "rir.rt60",
                format!(
                    "rt60 {} s outside [{}, {}] s (set allow_any_rt60 to override)",
                    self.rt60, RT60_RANGE.0, RT60_RANGE.1
                ),
            ));
        }
        if self.length == 0 {
            return Err(Error::config("rir.length", "RIR length must be at least 1"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config(
                "rir.sample_rate",
                "sample rate must be positive",
            ));
        }
        Ok(())
    }

    /// Amplitude decay constant in samples: 60 dB energy decay over `rt60`.
    pub fn decay_constant(&self) -> f64 {
        self.rt60 * f64::from(self.sample_rate) / (3.0 * LN_10)
    }
}

/// `h[n] = g[n] e^{-n/τ}`, `g` white Gaussian, normalized to unit energy.
pub fn synth_rir(spec: &RirSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let tau = spec.decay_constant();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut h: Vec<f64> = (0..spec.length)
        .map(|n| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * (-(n as f64) / tau).exp()
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    if energy > 0.0 {
        let scale = energy.sqrt().recip();
        h.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(h)
}

/// Parameters of the asymmetric sigmoidal loudspeaker model: hard clipping
/// at `±clip`, polynomial `b = linear·x − quadratic·x²`, then
/// `gain · (2 / (1 + e^{−a b}) − 1)` with slope `a` chosen by the sign of `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigmoidParams {
    pub clip: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub gain: f64,
    pub slope_positive: f64,
    pub slope_negative: f64,
}

impl Default for SigmoidParams {
    fn default() -> Self {
        Self {
            clip: 0.8,
            linear: 1.5,
            quadratic: 0.3,
            gain: 4.0,
            slope_positive: 4.0,
            slope_negative: 0.5,
        }
    }
}

impl SigmoidParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.clip,
            self.linear,
            self.quadratic,
            self.gain,
            self.slope_positive,
            self.slope_negative,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "nonlinearity.sigmoid",
                "parameters must be finite",
            ));
        }
        if self.clip <= 0.0 || self.gain <= 0.0 || self.linear <= 0.0 {
            return Err(Error::config(
                "nonlinearity.sigmoid",
                "clip, gain and linear must be positive",
            ));
        }
        if self.slope_positive <= 0.0 || self.slope_negative <= 0.0 {
            return Err(Error::config(
                "nonlinearity.sigmoid",
                "slopes must be positive",
            ));
        }
        // b(x) must stay monotone over the clipped range.
        if self.quadratic < 0.0 || 2.0 * self.quadratic * self.clip > self.linear {
            return Err(Error::config(
                "nonlinearity.sigmoid",
                "need 0 <= quadratic <= linear / (2 clip) for a monotone map",
            ));
        }
        Ok(())
    }
}

/// Memoryless loudspeaker nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearitySpec {
    None,
    /// Scaled error function; `alpha = None` draws from [`DEFAULT_SEF_ALPHAS`].
    Sef {
        alpha: Option<f64>,
    },
    Sigmoid(SigmoidParams),
}

impl NonlinearitySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NonlinearitySpec::None => Ok(()),
            NonlinearitySpec::Sef { alpha: Some(a) } if !(*a > 0.0 && a.is_finite()) => {
                Err(Error::config(
                    "nonlinearity.alpha",
                    format!("alpha must be positive (got {a})"),
                ))
            }
            NonlinearitySpec::Sef { .. } => Ok(()),
            NonlinearitySpec::Sigmoid(p) => p.validate(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NonlinearitySpec::None => "none".into(),
            NonlinearitySpec::Sef { alpha: Some(a) } => format!("sef{a}"),
            NonlinearitySpec::Sef { alpha: None } => "sef".into(),
            NonlinearitySpec::Sigmoid(_) => "sigmoid".into(),
        }
    }
}

/// `∫₀ˣ exp(z² / (2α²)) dz` for one sample.
pub fn sef(x: f64, alpha: f64) -> f64 {
    let magnitude = x.abs();
    if magnitude == 0.0 {
        return 0.0;
    }
    let value = if magnitude / alpha <= 3.0 {
        sef_series(magnitude, alpha)
    } else {
        let scale = 2.0 * alpha * alpha;
        adaptive_simpson(&|z: f64| (z * z / scale).exp(), 0.0, magnitude, 1e-13, 50)
    };
    value.copysign(x)
}

/// Termwise integral of the Maclaurin series: `x Σ uⁿ / (n! (2n + 1))`,
/// `u = x² / (2α²)`.
fn sef_series(x: f64, alpha: f64) -> f64 {
    let u = x * x / (2.0 * alpha * alpha);
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..200 {
        term *= u / n as f64;
        let contribution = term / (2 * n + 1) as f64;
        sum += contribution;
        if (n as f64) > u && contribution < 1e-17 * sum {
            break;
        }
    }
    x * sum
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol * (left + right).abs() {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, depth)
}

pub fn sef_distort(x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(
            "nonlinearity.alpha",
            format!("alpha must be positive (got {alpha})"),
        ));
    }
    Ok(x.iter().map(|&v| sef(v, alpha)).collect())
}

pub fn sigmoid(x: f64, p: &SigmoidParams) -> f64 {
    let clipped = x.clamp(-p.clip, p.clip);
    let b = p.linear * clipped - p.quadratic * clipped * clipped;
    let slope = if b > 0.0 {
        p.slope_positive
    } else {
        p.slope_negative
    };
    p.gain * (2.0 / (1.0 + (-slope * b).exp()) - 1.0)
}

pub fn sigmoid_distort(x: &[f64], params: &SigmoidParams) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v, params)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    /// Far-end single talk.
    Stfe,
    /// Near-end single talk.
    Stne,
    /// Double talk.
    Dt,
}

impl Activity {
    pub fn far_end_active(self) -> bool {
        matches!(self, Activity::Stfe | Activity::Dt)
    }

    pub fn near_end_active(self) -> bool {
        matches!(self, Activity::Stne | Activity::Dt)
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activity::Stfe => "stfe",
            Activity::Stne => "stne",
            Activity::Dt => "dt",
        })
    }
}

impl FromStr for Activity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stfe" => Ok(Activity::Stfe),
            "stne" => Ok(Activity::Stne),
            "dt" => Ok(Activity::Dt),
            other => Err(Error::config(
                "scenario.sections",
                format!("unknown section kind `{other}`"),
            )),
        }
    }
}

/// A section of a generated signal, `[start, end)` in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub kind: Activity,
    pub start: usize,
    pub end: usize,
}

impl Section {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionSpec {
    pub kind: Activity,
    /// Seconds.
    pub duration: f64,
}

/// Where a scenario signal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// White Gaussian noise.
    Wgn,
    /// Pink noise amplitude-modulated at 4 Hz, a stand-in for speech.
    SpeechShaped,
    /// Mono WAV file, tiled or truncated to the scenario length.
    Wav {
        path: PathBuf,
    },
    Silence,
}

impl SourceSpec {
    pub fn generate(&self, len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(match self {
            SourceSpec::Wgn => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
            SourceSpec::SpeechShaped => speech_shaped_noise(len, sample_rate, rng),
            SourceSpec::Silence => vec![0.0; len],
            SourceSpec::Wav { path } => {
                let buffer = read_wav(path, Some(sample_rate))?;
                if buffer.samples.is_empty() {
                    return Err(Error::config(
                        "scenario.source",
                        format!("source file {} is empty", path.display()),
                    ));
                }
                buffer.samples.iter().copied().cycle().take(len).collect()
            }
        })
    }
}

/// Pink-weighted noise (Kellet's filter) with a 4 Hz syllabic envelope.
fn speech_shaped_noise(len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phase = Uniform::new(0.0, 2.0 * PI)
        .expect("valid range")
        .sample(rng);
    let mut b = [0.0f64; 7];
    (0..len)
        .map(|n| {
            let white: f64 = StandardNormal.sample(rng);
            b[0] = 0.99886 * b[0] + white * 0.0555179;
            b[1] = 0.99332 * b[1] + white * 0.0750759;
            b[2] = 0.96900 * b[2] + white * 0.1538520;
            b[3] = 0.86650 * b[3] + white * 0.3104856;
            b[4] = 0.55000 * b[4] + white * 0.5329522;
            b[5] = -0.7616 * b[5] - white * 0.0168980;
            let pink = b[..6].iter().sum::<f64>() + b[6] + white * 0.5362;
            b[6] = white * 0.115926;
            let t = n as f64 / f64::from(sample_rate);
            let envelope = 0.1 + 0.9 * 0.5 * (1.0 - (2.0 * PI * 4.0 * t + phase).cos());
            pink * envelope
        })
        .collect()
}

/// An echo-path change at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct RirChange {
    /// Seconds from the start of the scenario.
    pub at: f64,
    pub rir: RirSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub sample_rate: u32,
    pub sections: Vec<SectionSpec>,
    /// Near-end speech to echo ratio in dB, measured over double talk.
    pub ser_db: f64,
    /// Near-end speech to noise ratio in dB; `None` disables noise.
    pub snr_db: Option<f64>,
    pub rir_schedule: Vec<RirChange>,
    pub nonlinearity: NonlinearitySpec,
    pub far_end: SourceSpec,
    pub near_end: SourceSpec,
    pub noise: SourceSpec,
    pub seed: u64,
}

impl ScenarioSpec {
    pub const DEFAULT_RIR_LENGTH: usize = 512;
    pub const DEFAULT_RT60: f64 = 0.3;

    /// Three 8 s sections STFE, STNE, DT with a single RIR.
    pub fn standard(sample_rate: u32, seed: u64) -> Self {
        Self {
            sample_rate,
            sections: [Activity::Stfe, Activity::Stne, Activity::Dt]
                .into_iter()
                .map(|kind| SectionSpec {
                    kind,
                    duration: 8.0,
                })
                .collect(),
            ser_db: 0.0,
            snr_db: Some(20.0),
            rir_schedule: vec![RirChange {
                at: 0.0,
                rir: RirSpec {
                    rt60: Self::DEFAULT_RT60,
                    length: Self::DEFAULT_RIR_LENGTH,
                    sample_rate,
                    seed: derived_rir_seed(seed, 0),
                    allow_any_rt60: false,
                },
            }],
            nonlinearity: NonlinearitySpec::None,
            far_end: SourceSpec::SpeechShaped,
            near_end: SourceSpec::SpeechShaped,
            noise: SourceSpec::Wgn,
            seed,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.section_bounds().last().map_or(0, |s| s.end)
    }

    pub fn section_bounds(&self) -> Vec<Section> {
        let fs = f64::from(self.sample_rate);
        let mut start = 0;
        self.sections
            .iter()
            .map(|s| {
                let len = (s.duration * fs).round() as usize;
                let section = Section {
                    kind: s.kind,
                    start,
                    end: start + len,
                };
                start += len;
                section
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config(
                "scenario.sample_rate",
                "sample rate must be positive",
            ));
        }
        if self.sections.is_empty() {
            return Err(Error::config(
                "scenario.sections",
                "at least one section is required",
            ));
        }
        for s in &self.sections {
            if !(s.duration > 0.0 && s.duration.is_finite()) {
                return Err(Error::config(
                    "scenario.sections",
                    format!("section durations must be positive (got {})", s.duration),
                ));
            }
        }
        if !self.ser_db.is_finite() || self.snr_db.is_some_and(|v| !v.is_finite()) {
            return Err(Error::config("scenario.ser_db", "SER/SNR must be finite"));
        }
        if self.rir_schedule.is_empty() {
            return Err(Error::config(
                "scenario.rir",
                "at least one RIR is required",
            ));
        }
        let total = self.total_samples() as f64 / f64::from(self.sample_rate);
        let mut previous = f64::NEG_INFINITY;
        for change in &self.rir_schedule {
            change.rir.validate()?;
            if change.rir.sample_rate != self.sample_rate {
                return Err(Error::config(
                    "scenario.rir",
                    format!(
                        "RIR sample rate {} differs from scenario rate {}",
                        change.rir.sample_rate, self.sample_rate
                    ),
                ));
            }
            if !(change.at >= 0.0 && change.at < total) {
                return Err(Error::config(
                    "scenario.rir.at",
                    format!(
                        "switch time {} s outside the signal (0..{total} s)",
                        change.at
                    ),
                ));
            }
            if change.at <= previous {
                return Err(Error::config(
                    "scenario.rir.at",
                    "switch times must increase",
                ));
            }
            previous = change.at;
        }
        self.nonlinearity.validate()
    }
}

/// Seed of the `index`-th RIR when the configuration does not fix one.
pub fn derived_rir_seed(scenario_seed: u64, index: usize) -> u64 {
    use rand::Rng;
    // 63 bits so the value survives a round trip through TOML integers.
    stream_rng(scenario_seed, STREAM_RIR + index as u64).next_u64() >> 1
}

/// Sample-by-sample convolution with an echo path that can be replaced.
#[derive(Debug, Clone)]
pub struct EchoPath {
    rir: Vec<f64>,
    ring: Vec<f64>,
    pos: usize,
}

impl EchoPath {
    pub fn new(rir: Vec<f64>) -> Self {
        let n = rir.len().max(1);
        Self {
            rir,
            ring: vec![0.0; 2 * n],
            pos: 0,
        }
    }

    /// Replace the RIR. Convolution memory restarts from zero, so the output
    /// only depends on input from the switch onward.
    pub fn apply_rir_switch(&mut self, rir: Vec<f64>) {
        *self = Self::new(rir);
    }

    pub fn next(&mut self, x: f64) -> f64 {
        let n = self.ring.len() / 2;
        self.pos = (self.pos + n - 1) % n;
        self.ring[self.pos] = x;
        self.ring[self.pos + n] = x;
        self.ring[self.pos..self.pos + n]
            .iter()
            .zip(&self.rir)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Echo for a schedule of `(switch sample, RIR)` pairs sorted by sample.
pub fn render_echo(x: &[f64], schedule: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut path: Option<EchoPath> = None;
    let mut next = 0;
    for (n, (&xn, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        while next < schedule.len() && schedule[next].0 <= n {
            let rir = schedule[next].1.clone();
            match path.as_mut() {
                Some(p) => p.apply_rir_switch(rir),
                None => path = Some(EchoPath::new(rir)),
            }
            next += 1;
        }
        if let Some(p) = path.as_mut() {
            *o = p.next(xn);
        }
    }
    out
}

/// A generated test signal bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sample_rate: u32,
    /// Far-end reference.
    pub x: Vec<f64>,
    /// Loudspeaker signal after the nonlinearity.
    pub x_distorted: Vec<f64>,
    /// Echo.
    pub d: Vec<f64>,
    /// Near-end speech.
    pub s: Vec<f64>,
    /// Near-end noise.
    pub n: Vec<f64>,
    /// Microphone.
    pub y: Vec<f64>,
    /// `(start sample, RIR)` trajectory.
    pub rirs: Vec<(usize, Vec<f64>)>,
    pub sections: Vec<Section>,
    /// SEF shape actually used, if any.
    pub sef_alpha: Option<f64>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The RIR active at `sample`.
    pub fn rir_at(&self, sample: usize) -> Option<&[f64]> {
        self.rirs
            .iter()
            .rev()
            .find(|(start, _)| *start <= sample)
            .map(|(_, h)| h.as_slice())
    }

    /// Longest RIR in the trajectory.
    pub fn max_rir_len(&self) -> usize {
        self.rirs.iter().map(|(_, h)| h.len()).max().unwrap_or(0)
    }

    /// SHA-256 over the sample rate, sections and the bits of every component.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.sample_rate.to_le_bytes());
        for s in &self.sections {
            hasher.update(s.kind.to_string().as_bytes());
            hasher.update((s.start as u64).to_le_bytes());
            hasher.update((s.end as u64).to_le_bytes());
        }
        for signal in [&self.x, &self.d, &self.s, &self.n, &self.y] {
            for v in signal {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Per-sample activity of `signal` within `section`: 20 ms frames whose
/// energy is within 40 dB of the section's loudest frame.
pub fn activity_mask(signal: &[f64], section: &Section, sample_rate: u32) -> Vec<bool> {
    let frame = ((ACTIVITY_FRAME_SECONDS * f64::from(sample_rate)).round() as usize).max(1);
    let part = &signal[section.start..section.end];
    let energies: Vec<f64> = part
        .chunks(frame)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
        .collect();
    let peak = energies.iter().copied().fold(0.0, f64::max);
    let mut mask = Vec::with_capacity(part.len());
    for (c, e) in part.chunks(frame).zip(&energies) {
        let active = peak > 0.0 && *e >= ACTIVITY_THRESHOLD * peak;
        mask.extend(std::iter::repeat(active).take(c.len()));
    }
    mask
}

/// Mean powers of `a` and `b` over the samples where `a` is active within
/// the given sections.
fn masked_powers(
    a: &[f64],
    b: &[f64],
    sections: &[Section],
    sample_rate: u32,
) -> Option<(f64, f64)> {
    let (mut pa, mut pb, mut count) = (0.0, 0.0, 0usize);
    for section in sections {
        let mask = activity_mask(a, section, sample_rate);
        for (i, active) in mask.into_iter().enumerate() {
            if active {
                let n = section.start + i;
                pa += a[n] * a[n];
                pb += b[n] * b[n];
                count += 1;
            }
        }
    }
    (count > 0).then(|| (pa / count as f64, pb / count as f64))
}

fn sections_where(sections: &[Section], pred: impl Fn(Activity) -> bool) -> Vec<Section> {
    sections.iter().copied().filter(|s| pred(s.kind)).collect()
}

/// Sections over which the speech-to-echo ratio is defined: double talk if
/// present, otherwise every section with near-end activity.
fn ser_sections(sections: &[Section]) -> Vec<Section> {
    let dt = sections_where(sections, |k| k == Activity::Dt);
    if dt.is_empty() {
        sections_where(sections, Activity::near_end_active)
    } else {
        dt
    }
}

/// Measured `P_s / P_d` in dB over the SER sections (near-end active samples).
pub fn measure_ser_db(scenario: &Scenario) -> Option<f64> {
    let (ps, pd) = masked_powers(
        &scenario.s,
        &scenario.d,
        &ser_sections(&scenario.sections),
        scenario.sample_rate,
    )?;
    (ps > 0.0 && pd > 0.0).then(|| 10.0 * (ps / pd).log10())
}

/// Measured SNR in dB: near-end speech (or, without near-end speech, echo)
/// power against noise power over the reference signal's active samples.
pub fn measure_snr_db(scenario: &Scenario) -> Option<f64> {
    let (ps, pn) = snr_powers(
        scenario.sample_rate,
        &scenario.sections,
        &scenario.s,
        &scenario.d,
        &scenario.n,
    )?;
    (ps > 0.0 && pn > 0.0).then(|| 10.0 * (ps / pn).log10())
}

fn snr_powers(
    sample_rate: u32,
    sections: &[Section],
    s: &[f64],
    d: &[f64],
    n: &[f64],
) -> Option<(f64, f64)> {
    let near = sections_where(sections, Activity::near_end_active);
    let speech_present = s.iter().any(|&v| v != 0.0);
    if speech_present && !near.is_empty() {
        masked_powers(s, n, &near, sample_rate)
    } else {
        masked_powers(
            d,
            n,
            &sections_where(sections, Activity::far_end_active),
            sample_rate,
        )
    }
}

fn peak(signal: &[f64]) -> f64 {
    signal.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn zero_outside(signal: &mut [f64], sections: &[Section], keep: impl Fn(Activity) -> bool) {
    for s in sections {
        if !keep(s.kind) {
            signal[s.start..s.end].fill(0.0);
        }
    }
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let fs = spec.sample_rate;
    let len = spec.total_samples();
    let sections = spec.section_bounds();

    let mut x = spec
        .far_end
        .generate(len, fs, &mut stream_rng(spec.seed, STREAM_FAR_END))?;
    let x_peak = peak(&x);
    if x_peak > 0.0 {
        x.iter_mut().for_each(|v| *v /= x_peak);
    }
    zero_outside(&mut x, &sections, Activity::far_end_active);

    let (mut x_distorted, sef_alpha) = match &spec.nonlinearity {
        NonlinearitySpec::None => (x.clone(), None),
        NonlinearitySpec::Sef { alpha } => {
            let alpha = match alpha {
                Some(a) => *a,
                None => {
                    let idx = Uniform::new(0, DEFAULT_SEF_ALPHAS.len())
                        .expect("non-empty set")
                        .sample(&mut stream_rng(spec.seed, STREAM_ALPHA));
                    DEFAULT_SEF_ALPHAS[idx]
                }
            };
            (sef_distort(&x, alpha)?, Some(alpha))
        }
        NonlinearitySpec::Sigmoid(p) => (sigmoid_distort(&x, p), None),
    };

    let rirs = spec
        .rir_schedule
        .iter()
        .map(|change| {
            let start = (change.at * f64::from(fs)).round() as usize;
            Ok((start, synth_rir(&change.rir)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = render_echo(&x_distorted, &rirs);

    let mut s = spec
        .near_end
        .generate(len, fs, &mut stream_rng(spec.seed, STREAM_NEAR_END))?;
    zero_outside(&mut s, &sections, Activity::near_end_active);
    match masked_powers(&s, &d, &ser_sections(&sections), fs) {
        Some((ps, pd)) if ps > 0.0 && pd > 0.0 => {
            let gain = (pd * 10f64.powf(spec.ser_db / 10.0) / ps).sqrt();
            s.iter_mut().for_each(|v| *v *= gain);
        }
        _ => log::warn!(
            "SER undefined for this scenario (silent speech or echo); near-end left unscaled"
        ),
    }

    let mut n = vec![0.0; len];
    if let Some(snr) = spec.snr_db {
        n = spec
            .noise
            .generate(len, fs, &mut stream_rng(spec.seed, STREAM_NOISE))?;
        match snr_powers(fs, &sections, &s, &d, &n) {
            Some((ps, pn)) if ps > 0.0 && pn > 0.0 => {
                let gain = (ps / (pn * 10f64.powf(snr / 10.0))).sqrt();
                n.iter_mut().for_each(|v| *v *= gain);
            }
            _ => log::warn!("SNR undefined for this scenario; noise left unscaled"),
        }
    }

    // One common gain keeps every stored component within full scale.
    let y_unscaled: Vec<f64> = (0..len).map(|i| s[i] + n[i] + d[i]).collect();
    let loudest = [&x, &x_distorted, &d, &s, &n, &y_unscaled]
        .iter()
        .map(|v| peak(v))
        .fold(0.0, f64::max);
    if loudest > HEADROOM_PEAK {
        let g = HEADROOM_PEAK / loudest;
        for signal in [&mut x, &mut x_distorted, &mut d, &mut s, &mut n] {
            signal.iter_mut().for_each(|v| *v *= g);
        }
    }
    let y = (0..len).map(|i| s[i] + n[i] + d[i]).collect();

    Ok(Scenario {
        sample_rate: fs,
        x,
        x_distorted,
        d,
        s,
        n,
        y,
        rirs,
        sections,
        sef_alpha,
    })
}
