//! Scenario acquisition: synthesized from the config or read from files.

use fdkf_core::audio_io::config::{ExperimentConfig, InputFiles, ScenarioSource};
use fdkf_core::audio_io::read_wav;
use fdkf_core::echosim::{build_scenario, Activity, Scenario, Section};
use fdkf_core::Error;

use crate::error::Result;

/// Which ground-truth components are real rather than zero placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnownComponents {
    pub echo: bool,
    pub near_end: bool,
    pub noise: bool,
    pub rir: bool,
}

impl KnownComponents {
    pub const ALL: Self = Self {
        echo: true,
        near_end: true,
        noise: true,
        rir: true,
    };
}

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub known: KnownComponents,
}

pub fn load_scenario(config: &ExperimentConfig) -> Result<LoadedScenario> {
    match &config.source {
        ScenarioSource::Synthetic(spec) => Ok(LoadedScenario {
            scenario: build_scenario(spec)?,
            known: KnownComponents::ALL,
        }),
        ScenarioSource::Files(files) => from_files(files, config.frames.sample_rate),
    }
}

fn from_files(files: &InputFiles, sample_rate: u32) -> Result<LoadedScenario> {
    let x = read_wav(&files.reference, Some(sample_rate))?.samples;
    let y = read_wav(&files.microphone, Some(sample_rate))?.samples;
    if x.len() != y.len() {
        return Err(Error::Shape {
            context: "reference vs microphone file",
            expected: y.len(),
            actual: x.len(),
        }
        .into());
    }
    let optional = |path: &Option<std::path::PathBuf>| -> Result<Option<Vec<f64>>> {
        match path {
            None => Ok(None),
            Some(p) => {
                let samples = read_wav(p, Some(sample_rate))?.samples;
                if samples.len() != y.len() {
                    return Err(Error::Shape {
                        context: "component file vs microphone",
                        expected: y.len(),
                        actual: samples.len(),
                    }
                    .into());
                }
                Ok(Some(samples))
            }
        }
    };
    let d = optional(&files.echo)?;
    let s = optional(&files.near_end)?;
    let n = optional(&files.noise)?;
    let known = KnownComponents {
        echo: d.is_some(),
        near_end: s.is_some(),
        noise: n.is_some(),
        rir: false,
    };

    let len = y.len();
    let sections = match &files.sections {
        None => vec![Section {
            kind: Activity::Dt,
            start: 0,
            end: len,
        }],
        Some(plan) => {
            let mut start = 0;
            let sections: Vec<Section> = plan
                .iter()
                .map(|s| {
                    let end =
                        (start + (s.duration * f64::from(sample_rate)).round() as usize).min(len);
                    let section = Section {
                        kind: s.kind,
                        start,
                        end,
                    };
                    start = end;
                    section
                })
                .collect();
            if start != len {
                log::warn!(
                    "input sections cover {start} of {len} samples; aggregates ignore the rest"
                );
            }
            sections
        }
    };

    Ok(LoadedScenario {
        scenario: Scenario {
            sample_rate,
            x_distorted: x.clone(),
            x,
            d: d.unwrap_or_else(|| vec![0.0; len]),
            s: s.unwrap_or_else(|| vec![0.0; len]),
            n: n.unwrap_or_else(|| vec![0.0; len]),
            y,
            rirs: Vec::new(),
            sections,
            sef_alpha: None,
        },
        known,
    })
}
