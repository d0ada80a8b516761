//! A single experiment: one scenario, every configured filter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fdkf_core::audio_io::config::{ExperimentConfig, FilterKind, RawConfig};
use fdkf_core::audio_io::table::{format_optional, format_value, write_json, Table};
use fdkf_core::audio_io::{write_wav, AudioBuffer};
use fdkf_core::echosim::{Activity, Section};
use fdkf_core::filters::{Diagnostics, Fdkf, NlmsState};
use fdkf_core::metrics::{aggregate_sections, erle, log_mse, AggregateOptions, Trace};
use fdkf_core::pipeline::{run_fdkf, run_nlms, FilterRun, Streams};
use fdkf_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{ErrorReport, Result};
use crate::scenario::{load_scenario, LoadedScenario};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionMetrics {
    pub index: usize,
    pub kind: Activity,
    pub start: usize,
    pub end: usize,
    pub erle_mean: Option<f64>,
    pub erle_final: Option<f64>,
    pub misalignment_mean: Option<f64>,
    pub misalignment_final: Option<f64>,
    /// No trace point survived the warm-up exclusion.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub name: String,
    /// Output kind to path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    pub log_mse_db: Option<f64>,
    pub sections: Vec<SectionMetrics>,
    /// First time the misalignment reaches the configured threshold.
    pub time_to_misalignment_s: Option<f64>,
    pub misalignment_truncated: bool,
    pub diagnostics: Diagnostics,
    pub asymmetry_warnings: u64,
    /// Samples removed from the front of the synthesized output.
    pub alignment_samples: usize,
    pub algorithmic_delay_samples: usize,
    pub clipped_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub status: RunStatus,
    pub error: Option<ErrorReport>,
    pub seed: u64,
    /// Materialized configuration, also written to `config.toml`.
    pub config: Option<RawConfig>,
    /// SHA-256 over the scenario signals.
    pub scenario_digest: Option<String>,
    pub sample_rate: u32,
    pub sections: Vec<Section>,
    pub scenario_files: BTreeMap<String, String>,
    /// Wall-clock timings live in a separate file so that the manifest is
    /// reproducible.
    pub timings: String,
    pub filters: Vec<FilterResult>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub scenario_seconds: f64,
    pub filters: BTreeMap<String, f64>,
}

/// Build and run one filter on a loaded scenario.
pub fn run_filter(
    kind: FilterKind,
    config: &ExperimentConfig,
    loaded: &LoadedScenario,
) -> Result<FilterRun> {
    let sc = &loaded.scenario;
    let frames = &config.frames;
    let streams = Streams {
        x: &sc.x,
        y: &sc.y,
        echo: loaded.known.echo.then_some(sc.d.as_slice()),
        rirs: loaded.known.rir.then_some(sc.rirs.as_slice()),
    };
    let fdkf = |gain| Fdkf::new(frames, config.fdkf.clone(), gain);
    let run = match kind {
        FilterKind::Fdkf => run_fdkf(frames, fdkf(fdkf_core::filters::GainLaw::Kalman)?, &streams)?,
        FilterKind::OracleFdkf => {
            if streams.echo.is_none() {
                return Err(Error::config("filters", "oracle_fdkf needs the true echo").into());
            }
            let filter = fdkf(fdkf_core::filters::GainLaw::Kalman)?.with_oracle_adaptation();
            run_fdkf(frames, filter, &streams)?
        }
        FilterKind::FdkfFdNlms => run_fdkf(frames, fdkf(config.fd_nlms.clone())?, &streams)?,
        FilterKind::FdkfVss => run_fdkf(frames, fdkf(config.vss.clone())?, &streams)?,
        FilterKind::Nlms => {
            let length = config.nlms.length.unwrap_or_else(|| {
                let longest = sc.max_rir_len();
                if longest > 0 {
                    longest
                } else {
                    frames.modelled_span()
                }
            });
            let nlms = NlmsState::new(length, config.nlms.stepsize, config.nlms.regularization)?;
            run_nlms(nlms, &streams, frames.frame_shift)?
        }
    };
    Ok(run)
}

fn aggregate_options(config: &ExperimentConfig, sample_rate: u32) -> AggregateOptions {
    let fs = f64::from(sample_rate);
    AggregateOptions {
        warmup: (config.metrics.warmup_seconds * fs).round() as usize,
        final_window: (config.metrics.final_window_seconds * fs).round() as usize,
    }
}

fn trace_table(trace: &Trace, sample_rate: u32, column: &str) -> Result<Table> {
    let mut table = Table::new(["sample", "time_s", column]);
    let fs = f64::from(sample_rate);
    for (i, v) in trace.points() {
        table.push(vec![
            i.to_string(),
            format_value(i as f64 / fs),
            format_value(v),
        ])?;
    }
    Ok(table)
}

/// Metrics for one filter run, with traces written to `dir`.
fn evaluate(
    kind: FilterKind,
    run: &FilterRun,
    config: &ExperimentConfig,
    loaded: &LoadedScenario,
    dir: &Path,
) -> Result<FilterResult> {
    let sc = &loaded.scenario;
    let name = kind.name();
    let fs = sc.sample_rate;
    let options = aggregate_options(config, fs);
    let mut outputs = BTreeMap::new();

    let mut clipped = 0;
    if config.output.write_audio {
        let file = format!("{name}_e.wav");
        let buffer = AudioBuffer {
            samples: run.e.clone(),
            sample_rate: fs,
        };
        clipped = write_wav(&buffer, dir.join(&file), config.output.wav_depth)?;
        outputs.insert("e".to_owned(), file);
    }

    let erle_trace = if loaded.known.echo {
        let dense = erle(&sc.d, &run.d_hat, &config.metrics.erle)?;
        let trace = Trace::dense(dense).decimate(config.metrics.trace_stride);
        let file = format!("{name}_erle.csv");
        trace_table(&trace, fs, "erle_db")?.write(dir.join(&file))?;
        outputs.insert("erle".to_owned(), file);
        Some(trace)
    } else {
        None
    };

    if let Some(trace) = &run.misalignment {
        let file = format!("{name}_misalignment.csv");
        trace_table(trace, fs, "misalignment_db")?.write(dir.join(&file))?;
        outputs.insert("misalignment".to_owned(), file);
    }

    let erle_agg = erle_trace
        .as_ref()
        .map(|t| aggregate_sections(t, &sc.sections, &options));
    let mis_agg = run
        .misalignment
        .as_ref()
        .map(|t| aggregate_sections(t, &sc.sections, &options));
    let sections = sc
        .sections
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let e = erle_agg.as_ref().map(|a| &a[i]);
            let m = mis_agg.as_ref().map(|a| &a[i]);
            SectionMetrics {
                index: i,
                kind: s.kind,
                start: s.start,
                end: s.end,
                erle_mean: e.and_then(|a| a.mean),
                erle_final: e.and_then(|a| a.final_mean),
                misalignment_mean: m.and_then(|a| a.mean),
                misalignment_final: m.and_then(|a| a.final_mean),
                empty: e.or(m).map_or(true, |a| a.empty),
            }
        })
        .collect();

    let log_mse_db = if loaded.known.near_end && loaded.known.noise {
        Some(log_mse(&run.e, &sc.s, &sc.n)?)
    } else {
        None
    };
    let time_to_misalignment_s = run.misalignment.as_ref().and_then(|t| {
        t.first_at_or_below(config.metrics.misalignment_threshold_db, 0)
            .map(|i| i as f64 / f64::from(fs))
    });

    Ok(FilterResult {
        name: name.to_owned(),
        outputs,
        log_mse_db,
        sections,
        time_to_misalignment_s,
        misalignment_truncated: run.misalignment_truncated,
        diagnostics: run.diagnostics,
        asymmetry_warnings: run.asymmetry_warnings,
        alignment_samples: run.alignment,
        algorithmic_delay_samples: match kind {
            FilterKind::Nlms => 0,
            _ => config.frames.algorithmic_delay(),
        },
        clipped_samples: clipped,
    })
}

fn write_scenario_files(
    loaded: &LoadedScenario,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<BTreeMap<String, String>> {
    let sc = &loaded.scenario;
    let mut files = BTreeMap::new();
    let known = loaded.known;
    let signals: [(&str, &[f64], bool); 6] = [
        ("x", &sc.x, true),
        ("x_distorted", &sc.x_distorted, known.rir),
        ("d", &sc.d, known.echo),
        ("s", &sc.s, known.near_end),
        ("n", &sc.n, known.noise),
        ("y", &sc.y, true),
    ];
    for (name, samples, present) in signals {
        if !present {
            continue;
        }
        let file = format!("scenario_{name}.wav");
        let buffer = AudioBuffer {
            samples: samples.to_vec(),
            sample_rate: sc.sample_rate,
        };
        write_wav(&buffer, dir.join(&file), config.output.wav_depth)?;
        files.insert(name.to_owned(), file);
    }
    if known.rir {
        let mut table = Table::new(["rir_index", "start_sample", "tap", "value"]);
        for (i, (start, h)) in sc.rirs.iter().enumerate() {
            for (tap, v) in h.iter().enumerate() {
                table.push(vec![
                    i.to_string(),
                    start.to_string(),
                    tap.to_string(),
                    format_value(*v),
                ])?;
            }
        }
        table.write(dir.join("scenario_rirs.csv"))?;
        files.insert("rirs".to_owned(), "scenario_rirs.csv".to_owned());
    }
    Ok(files)
}

fn empty_manifest(config: &ExperimentConfig) -> RunManifest {
    RunManifest {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        status: RunStatus::Failed,
        error: None,
        seed: config.seed,
        config: Some(config.to_raw()),
        scenario_digest: None,
        sample_rate: config.frames.sample_rate,
        sections: Vec::new(),
        scenario_files: BTreeMap::new(),
        timings: TIMINGS_FILE.to_owned(),
        filters: Vec::new(),
    }
}

fn run_inner(config: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let config_text = config.to_toml()?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config_text).map_err(|e| Error::Io {
        path: config_path,
        source: e,
    })?;

    let mut timings = Timings::default();
    let started = Instant::now();
    let loaded = load_scenario(config)?;
    timings.scenario_seconds = started.elapsed().as_secs_f64();
    manifest.scenario_digest = Some(loaded.scenario.digest());
    manifest.sections = loaded.scenario.sections.clone();
    if config.output.write_scenario {
        manifest.scenario_files = write_scenario_files(&loaded, config, dir)?;
    }

    for &kind in &config.filters {
        let started = Instant::now();
        let run = run_filter(kind, config, &loaded)?;
        let result = evaluate(kind, &run, config, &loaded, dir)?;
        timings
            .filters
            .insert(kind.name().to_owned(), started.elapsed().as_secs_f64());
        log::info!("{}: {:.2} s", kind, started.elapsed().as_secs_f64());
        manifest.filters.push(result);
    }
    write_json(&timings, dir.join(TIMINGS_FILE))?;
    Ok(())
}

/// Run every configured filter and write all outputs plus `manifest.json`
/// into `dir`. On failure a manifest with status `failed` is still written
/// when possible.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunManifest> {
    let mut manifest = empty_manifest(config);
    match run_inner(config, dir, &mut manifest) {
        Ok(()) => {
            manifest.status = RunStatus::Ok;
            write_json(&manifest, dir.join(MANIFEST_FILE))?;
            Ok(manifest)
        }
        Err(err) => {
            manifest.error = Some(err.report());
            manifest.filters.clear();
            if let Err(write_err) = write_json(&manifest, dir.join(MANIFEST_FILE)) {
                log::warn!("could not write failure manifest: {write_err}");
            }
            Err(err)
        }
    }
}

/// Rows of per-filter, per-section aggregates, shared by run and batch
/// summaries.
pub fn summary_columns() -> Vec<&'static str> {
    vec![
        "filter",
        "section",
        "kind",
        "erle_mean_db",
        "erle_final_db",
        "misalignment_mean_db",
        "misalignment_final_db",
        "log_mse_db",
        "time_to_misalignment_s",
    ]
}

pub fn summary_cells(filter: &FilterResult, section: &SectionMetrics) -> Vec<String> {
    vec![
        filter.name.clone(),
        section.index.to_string(),
        section.kind.to_string(),
        format_optional(section.erle_mean),
        format_optional(section.erle_final),
        format_optional(section.misalignment_mean),
        format_optional(section.misalignment_final),
        format_optional(filter.log_mse_db),
        format_optional(filter.time_to_misalignment_s),
    ]
}
