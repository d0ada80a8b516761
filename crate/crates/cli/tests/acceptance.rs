//! Acceptance gate: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fdkf_cli::batch::run_batch;
use fdkf_core::audio_io::config::RawConfig;
use fdkf_core::echosim::{
    build_scenario, derived_rir_seed, sef, sef_distort, Activity, RirChange, Scenario,
    ScenarioSpec, SectionSpec, SourceSpec,
};
use fdkf_core::filters::{
    fd_nlms_gain, fdkf_step, kalman_gain, vss_gain, ErrorSource, Fdkf, FdkfParams, FdkfState,
    GainLaw, NlmsState, StepInputs,
};
use fdkf_core::framing::{
    chunks_padded, Analyzer, Dft, FrameConfig, Origin, SpectralFrame, Synthesizer,
};
use fdkf_core::metrics::{
    aggregate_sections, erle, AggregateOptions, ErleConfig, SectionAggregate, Trace,
};
use fdkf_core::pipeline::{run_fdkf, run_nlms, FilterRun, Streams};
use num_complex::Complex64;
use rayon::prelude::*;

const FS: u32 = 16_000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// SplitMix64 with Box-Muller normals; independent of the library RNGs.
struct TestRng(u64);

impl TestRng {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (u, v) = (self.uniform(), self.uniform());
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    fn normals(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }

    fn complex(&mut self) -> Complex64 {
        Complex64::new(self.normal(), self.normal())
    }
}

fn direct_convolution(x: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|n| (0..h.len().min(n + 1)).map(|j| h[j] * x[n - j]).sum())
        .collect()
}

fn relative_l2(actual: &[f64], expected: &[f64]) -> f64 {
    let err: f64 = actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let norm: f64 = expected.iter().map(|b| b * b).sum();
    (err / norm).sqrt()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn ols_convolution() -> Verdict {
    let frames = FrameConfig::ols_single_tap();
    let (k, r) = (frames.dft_size, frames.frame_shift);
    let mut rng = TestRng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = rng.normals(FS as usize);
        let mut h = rng.normals(k - r + 1);
        let expected = direct_convolution(&x, &h);

        h.resize(k, 0.0);
        let response = Dft::new(k).forward_real(&h);
        let mut analysis = Analyzer::new(&frames, Origin::Reference).unwrap();
        let mut synthesis = Synthesizer::new(&frames).unwrap();
        let mut out = Vec::with_capacity(x.len() + r);
        for chunk in chunks_padded(&x, r, x.len()) {
            let mut frame = analysis.analysis_step(&chunk).unwrap();
            frame
                .bins
                .iter_mut()
                .zip(&response)
                .for_each(|(b, h)| *b *= h);
            out.extend(synthesis.synthesis_step(&frame).unwrap());
        }
        worst = worst.max(relative_l2(&out[..x.len()], &expected));
    }
    verdict(
        worst < 1e-10,
        format!("max relative L2 error {worst:.2e} over 100 pairs"),
    )
}

fn ola_reconstruction() -> Verdict {
    let frames = FrameConfig::ola_multi_tap();
    let (k, r) = (frames.dft_size, frames.frame_shift);
    let lag = frames.stream_lag();
    let mut rng = TestRng(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rng.normals(FS as usize);
        let mut analysis = Analyzer::new(&frames, Origin::Microphone).unwrap();
        let mut synthesis = Synthesizer::new(&frames).unwrap();
        let mut out = Vec::new();
        for chunk in chunks_padded(&x, r, x.len() + lag) {
            let frame = analysis.analysis_step(&chunk).unwrap();
            out.extend(synthesis.synthesis_step(&frame).unwrap());
        }
        let interior = k..x.len() - k;
        let rebuilt = &out[interior.start + lag..interior.end + lag];
        worst = worst.max(relative_l2(rebuilt, &x[interior]));
    }
    verdict(
        worst < 1e-10,
        format!("max interior relative error {worst:.2e} over 10 signals"),
    )
}

/// Textbook scalar Kalman filter for `y = x h + v` with `h' = A h + w`:
/// measurement update, then time update with `Q = (1 - A²)(P + |ĥ|²)`.
struct ScalarKalman {
    h: Complex64,
    p: f64,
    a: f64,
}

impl ScalarKalman {
    fn step(&mut self, x: Complex64, y: Complex64, r: f64) -> Complex64 {
        let innovation = y - x * self.h;
        let s = x.norm_sqr() * self.p + r;
        let gain = x.conj() * (self.p / s);
        let posterior_h = self.h + gain * innovation;
        let posterior_p = (1.0 - (x * gain).re) * self.p;
        let q = (1.0 - self.a * self.a) * (self.p + self.h.norm_sqr());
        self.h = self.a * posterior_h;
        self.p = self.a * self.a * posterior_p + q;
        innovation
    }
}

fn scalar_kalman_equivalence() -> Verdict {
    let params = FdkfParams {
        transition: 0.99,
        transition_schedule: None,
        smoothing: 0.5,
        overlap_ratio: 1.0,
        taps: 1,
        initial_covariance: 1.0,
        regularization: 0.0,
    };
    let mut state = FdkfState::unconstrained(1, &params).unwrap();
    let mut oracle = ScalarKalman {
        h: Complex64::new(0.0, 0.0),
        p: params.initial_covariance,
        a: params.transition,
    };
    let mut rng = TestRng(3);
    let h_true = Complex64::new(0.8, -0.3);
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let x = rng.complex();
        let noise = 0.1 + rng.uniform();
        let y = h_true * x + rng.complex() * (noise / 2.0).sqrt();
        let frame = |v: Complex64, origin| SpectralFrame {
            index: i,
            bins: vec![v],
            origin,
        };
        let observation = [noise];
        let inputs = StepInputs {
            error_source: ErrorSource::Observed,
            observation_noise: Some(&observation),
        };
        let out = fdkf_step(
            &frame(y, Origin::Microphone),
            &frame(x, Origin::Reference),
            &mut state,
            &params,
            &GainLaw::Kalman,
            &inputs,
        )
        .unwrap();
        let innovation = oracle.step(x, y, noise);
        worst = worst
            .max((out.error.bins[0] - innovation).norm())
            .max((state.filter()[0] - oracle.h).norm())
            .max((state.covariance()[0] - oracle.p).abs());
    }
    verdict(
        worst < 1e-12,
        format!("max deviation {worst:.2e} over 1000 steps"),
    )
}

fn stfe_spec(seed: u64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::standard(FS, seed);
    spec.sections = vec![SectionSpec {
        kind: Activity::Stfe,
        duration: 8.0,
    }];
    spec.far_end = SourceSpec::Wgn;
    spec.near_end = SourceSpec::Silence;
    spec.snr_db = Some(20.0);
    spec.rir_schedule[0].rir.rt60 = 0.2;
    spec
}

fn run_ols_fdkf(scenario: &Scenario, oracle: bool) -> FilterRun {
    let frames = FrameConfig::ols_single_tap();
    run_filter(&frames, scenario, oracle)
}

fn run_filter(frames: &FrameConfig, scenario: &Scenario, oracle: bool) -> FilterRun {
    let mut filter = Fdkf::new(frames, FdkfParams::for_frames(frames), GainLaw::Kalman).unwrap();
    if oracle {
        filter = filter.with_oracle_adaptation();
    }
    let streams = Streams {
        x: &scenario.x,
        y: &scenario.y,
        echo: Some(&scenario.d),
        rirs: Some(&scenario.rirs),
    };
    run_fdkf(frames, filter, &streams).unwrap()
}

fn erle_trace(scenario: &Scenario, run: &FilterRun) -> Vec<f64> {
    erle(&scenario.d, &run.d_hat, &ErleConfig::default()).unwrap()
}

fn sections(scenario: &Scenario, trace: &Trace) -> Vec<SectionAggregate> {
    aggregate_sections(trace, &scenario.sections, &AggregateOptions::for_rate(FS))
}

fn fdkf_convergence() -> Verdict {
    let results: Vec<(f64, f64)> = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let scenario = build_scenario(&stfe_spec(seed)).unwrap();
            let run = run_ols_fdkf(&scenario, false);
            let erle = sections(&scenario, &Trace::dense(erle_trace(&scenario, &run)))[0]
                .final_mean
                .unwrap();
            let mis = sections(&scenario, run.misalignment.as_ref().unwrap())[0]
                .final_mean
                .unwrap();
            (erle, mis)
        })
        .collect();
    let erle = mean(results.iter().map(|r| r.0));
    let mis = mean(results.iter().map(|r| r.1));
    verdict(
        erle >= 15.0 && mis <= -10.0,
        format!("final-second ERLE {erle:.2} dB (>= 15), misalignment {mis:.2} dB (<= -10)"),
    )
}

fn reconvergence_dip() -> Verdict {
    let traces: Vec<Vec<f64>> = (1..=10u64)
        .into_par_iter()
        .map(|seed| {
            let mut spec = stfe_spec(seed);
            let mut rir = spec.rir_schedule[0].rir.clone();
            rir.seed = derived_rir_seed(seed, 1);
            spec.rir_schedule.push(RirChange { at: 4.0, rir });
            let scenario = build_scenario(&spec).unwrap();
            let run = run_ols_fdkf(&scenario, false);
            erle_trace(&scenario, &run)
        })
        .collect();
    let len = traces[0].len();
    let averaged: Vec<f64> = (0..len)
        .map(|n| mean(traces.iter().map(|t| t[n])))
        .collect();
    let window = |from: f64, to: f64| {
        let (a, b) = (
            (from * f64::from(FS)) as usize,
            (to * f64::from(FS)) as usize,
        );
        mean(averaged[a..b].iter().copied())
    };
    let before = window(3.0, 4.0);
    let dip = window(4.0, 4.25);
    let end = window(7.5, 8.0);
    verdict(
        before - dip >= 3.0 && end >= before - 3.0,
        format!("pre-switch {before:.2} dB, after switch {dip:.2} dB, section end {end:.2} dB"),
    )
}

fn dt_section_mean(scenario: &Scenario, trace: &Trace) -> f64 {
    sections(scenario, trace)
        .iter()
        .find(|s| s.kind == Activity::Dt)
        .and_then(|s| s.mean)
        .unwrap()
}

fn oracle_superiority() -> Verdict {
    let frames = FrameConfig::ola_multi_tap();
    let cells: Vec<(u64, f64)> = (1..=10u64)
        .flat_map(|seed| [-6.0, 0.0, 6.0].map(|ser| (seed, ser)))
        .collect();
    let margins: Vec<f64> = cells
        .par_iter()
        .map(|&(seed, ser)| {
            let mut spec = ScenarioSpec::standard(FS, seed);
            spec.ser_db = ser;
            let scenario = build_scenario(&spec).unwrap();
            let [plain, oracle] = [false, true].map(|o| {
                let run = run_filter(&frames, &scenario, o);
                dt_section_mean(&scenario, &Trace::dense(erle_trace(&scenario, &run)))
            });
            oracle - plain
        })
        .collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let wins = margins.iter().filter(|&&m| m >= 0.0).count();
    verdict(
        wins == cells.len(),
        format!(
            "oracle ahead in {wins}/{} cells, smallest margin {worst:.2} dB, mean margin {:.2} dB",
            cells.len(),
            mean(margins.iter().copied())
        ),
    )
}

fn double_talk_robustness() -> Verdict {
    let frames = FrameConfig::ols_single_tap();
    let results: Vec<(f64, f64)> = (1..=5u64)
        .into_par_iter()
        .map(|seed| {
            let mut spec = ScenarioSpec::standard(FS, seed);
            spec.sections = [Activity::Stfe, Activity::Dt]
                .map(|kind| SectionSpec {
                    kind,
                    duration: 8.0,
                })
                .to_vec();
            let scenario = build_scenario(&spec).unwrap();
            let degradation = |trace: &Trace| {
                let agg = sections(&scenario, trace);
                agg[1].mean.unwrap() - agg[0].final_mean.unwrap()
            };
            let fdkf = run_ols_fdkf(&scenario, false);
            let nlms = run_nlms(
                NlmsState::new(scenario.max_rir_len(), 1.0, 1e-6).unwrap(),
                &Streams {
                    x: &scenario.x,
                    y: &scenario.y,
                    echo: None,
                    rirs: Some(&scenario.rirs),
                },
                frames.frame_shift,
            )
            .unwrap();
            (
                degradation(fdkf.misalignment.as_ref().unwrap()),
                degradation(nlms.misalignment.as_ref().unwrap()),
            )
        })
        .collect();
    let fdkf = mean(results.iter().map(|r| r.0));
    let nlms = mean(results.iter().map(|r| r.1));
    let paired = results.iter().filter(|r| r.0 < r.1).count();
    verdict(
        fdkf < nlms,
        format!(
            "mean misalignment degradation FDKF {fdkf:.2} dB vs NLMS {nlms:.2} dB; FDKF smaller in {paired}/{} pairs",
            results.len()
        ),
    )
}

fn zero_excitation_freeze() -> Verdict {
    let frames = FrameConfig::ols_single_tap();
    let params = FdkfParams::for_frames(&frames);
    let r = frames.frame_shift;
    let trained = 31;
    let mut rng = TestRng(8);
    let h: Vec<f64> = (0..300)
        .map(|n| rng.normal() * (-(n as f64) / 60.0).exp())
        .collect();
    let mut x = rng.normals(trained * r);
    x.resize(2 * trained * r, 0.0);
    let y: Vec<f64> = direct_convolution(&x, &h)
        .iter()
        .map(|d| d + 0.01 * rng.normal())
        .collect();

    let mut filter = Fdkf::new(&frames, params.clone(), GainLaw::Kalman).unwrap();
    let mut xa = Analyzer::new(&frames, Origin::Reference).unwrap();
    let mut ya = Analyzer::new(&frames, Origin::Microphone).unwrap();
    let mut norms = Vec::new();
    let mut flushed = None;
    for (i, (xc, yc)) in x.chunks(r).zip(y.chunks(r)).enumerate() {
        let xf = xa.analysis_step(xc).unwrap();
        let yf = ya.analysis_step(yc).unwrap();
        filter.step(&yf, &xf, None).unwrap();
        norms.push(filter.state().filter_norm());
        if flushed.is_none() && xa.buffer().iter().all(|&v| v == 0.0) {
            flushed = Some(i);
        }
    }
    let start = flushed.unwrap();
    let reference = norms[start];
    let mut worst = 0.0f64;
    for (n, &norm) in norms[start..].iter().enumerate() {
        let expected = params.transition.powi(n as i32) * reference;
        worst = worst.max((norm - expected).abs() / expected);
    }
    verdict(
        reference > 0.0 && worst < 1e-12,
        format!(
            "{} zero-excitation frames after the buffer flush, max relative deviation {worst:.2e}",
            norms.len() - start
        ),
    )
}

fn gain_closed_forms() -> Verdict {
    let one = |v: f64| [Complex64::new(v, 0.0)];
    let mut gain = [Complex64::new(0.0, 0.0)];
    kalman_gain(&one(1.0), 2.0, 1.0, 0.5, 0.0, &mut gain);
    let kalman = (gain[0] - 0.5).norm();
    fd_nlms_gain(&[Complex64::new(3.0, 4.0)], 1.0, 0.0, &mut gain);
    let nlms = (gain[0] - Complex64::new(3.0, -4.0) / 25.0).norm();
    vss_gain(
        &one(2.0),
        0.0,
        1.0,
        0.0,
        0.0,
        1e-300,
        Complex64::new(0.7, 0.2),
        &mut gain,
    );
    let vss = (gain[0] - 0.5).norm();
    let worst = kalman.max(nlms).max(vss);
    verdict(
        worst < 1e-12,
        format!("deviations Kalman {kalman:.1e}, fd-NLMS {nlms:.1e}, VSS {vss:.1e}"),
    )
}

/// Composite Simpson rule with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn sef_accuracy() -> Verdict {
    let quadrature = simpson(|z| (z * z / 2.0).exp(), 0.0, 1.0, 200_000);
    let value = sef_distort(&[1.0], 1.0).unwrap()[0];
    let error = (value - quadrature).abs();
    let linearity = (0..=2000)
        .map(|i| -1.0 + i as f64 / 1000.0)
        .map(|x| (sef(x, 999.0) - x).abs())
        .fold(0.0, f64::max);
    verdict(
        error < 1e-8 && linearity < 1e-6,
        format!("sef(1, 1) error {error:.2e} vs quadrature, alpha = 999 linearity deviation {linearity:.2e}"),
    )
}

fn erle_calibration() -> Verdict {
    let mut rng = TestRng(11);
    let d = rng.normals(10 * FS as usize);
    let d_hat: Vec<f64> = d.iter().map(|v| v - 0.1f64.sqrt() * rng.normal()).collect();
    let trace = erle(&d, &d_hat, &ErleConfig::default()).unwrap();
    let steady = mean(trace[FS as usize..].iter().copied());
    verdict(
        (steady - 10.0).abs() <= 0.5,
        format!("steady-state ERLE {steady:.3} dB (10 +- 0.5)"),
    )
}

fn files_below(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else if path.file_name().is_some_and(|n| n != "timings.json") {
                let bytes = std::fs::read(&path).unwrap();
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    files
}

fn batch_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let raw = RawConfig::default();
    let [a, b] = ["a", "b"].map(|name| {
        let dir = tmp.path().join(name);
        run_batch(&raw, &dir).unwrap();
        files_below(&dir)
    });
    let tables = a
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "json"))
        .count();
    let differing: Vec<_> = a
        .keys()
        .chain(b.keys())
        .filter(|p| a.get(*p) != b.get(*p))
        .collect();
    verdict(
        differing.is_empty() && tables > 0,
        match differing.first() {
            None => format!("{} files identical ({tables} CSV/JSON)", a.len()),
            Some(p) => format!("{} files differ, first {}", differing.len(), p.display()),
        },
    )
}

type Check = fn() -> Verdict;

const CRITERIA: [(&str, Option<u64>, Check); 12] = [
    ("OLS block convolution", Some(5), ols_convolution),
    ("OLA perfect reconstruction", Some(2), ola_reconstruction),
    ("scalar Kalman equivalence", None, scalar_kalman_equivalence),
    ("FDKF convergence", Some(30), fdkf_convergence),
    ("reconvergence dip", None, reconvergence_dip),
    ("oracle superiority", Some(120), oracle_superiority),
    ("double-talk robustness", None, double_talk_robustness),
    ("zero-excitation freeze", None, zero_excitation_freeze),
    ("gain closed forms", None, gain_closed_forms),
    ("SEF accuracy", None, sef_accuracy),
    ("ERLE calibration", None, erle_calibration),
    ("batch determinism", None, batch_determinism),
];

fn main() -> ExitCode {
    let mut failures = 0;
    for (i, (name, limit, check)) in CRITERIA.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let elapsed = started.elapsed();
        let mut result = outcome.unwrap_or_else(|_| verdict(false, "panicked".into()));
        if let Some(secs) = limit {
            if elapsed > Duration::from_secs(*secs) {
                result.pass = false;
                result
                    .detail
                    .push_str(&format!("; over the {secs} s budget"));
            }
        }
        failures += usize::from(!result.pass);
        println!(
            "criterion {:>2} {} {name}: {} ({:.2} s)",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        CRITERIA.len() - failures
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
