//! Paired comparison of filters across manifests of identical scenarios.
//!
//! Every filter in every manifest becomes a contender keyed
//! `label/filter`, where the label is the manifest's directory name (for a
//! batch, the batch directory). Contenders are paired scenario by scenario
//! through the scenario digest; each pair and metric gets the mean
//! difference and a two-sided sign test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fdkf_core::audio_io::table::{format_optional, format_value, read_json, Table};
use fdkf_core::echosim::Activity;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::batch::{cell_manifests, BatchManifest};
use crate::error::{CliError, Result};
use crate::run::{FilterResult, RunManifest, RunStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub section: Option<usize>,
    pub kind: Option<Activity>,
    /// Scenarios where both contenders have a value.
    pub pairs: usize,
    /// Mean of `a - b`.
    pub mean_delta: Option<f64>,
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// Two-sided sign-test p-value; ties are dropped.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub contenders: Vec<String>,
    pub scenarios: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Two-sided sign test for `positive` against `negative` outcomes.
pub fn sign_test(positive: usize, negative: usize) -> f64 {
    let n = (positive + negative) as u64;
    if n == 0 {
        return 1.0;
    }
    let k = positive.min(negative) as u64;
    let binomial = Binomial::new(0.5, n).expect("valid binomial parameters");
    (2.0 * binomial.cdf(k)).min(1.0)
}

struct Entry {
    label: String,
    manifest: RunManifest,
}

fn label_of(path: &Path) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_owned())
}

fn load_entries(paths: &[PathBuf]) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for path in paths {
        let value: serde_json::Value = read_json(path)?;
        if value.get("cells").is_some() {
            let batch: BatchManifest = read_json(path)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let label = label_of(path);
            for cell in cell_manifests(&batch, dir) {
                entries.push(Entry {
                    label: label.clone(),
                    manifest: read_json(&cell)?,
                });
            }
        } else {
            let manifest: RunManifest = read_json(path)?;
            if manifest.status != RunStatus::Ok {
                return Err(CliError::Usage(format!(
                    "{} is a failed run",
                    path.display()
                )));
            }
            entries.push(Entry {
                label: label_of(path),
                manifest,
            });
        }
    }
    Ok(entries)
}

type Contenders = BTreeMap<String, BTreeMap<String, FilterResult>>;
type SectionKinds = BTreeMap<String, Vec<Activity>>;

/// Group filter results into contenders keyed by name, then by scenario.
fn contenders(entries: &[Entry]) -> Result<(Vec<String>, Contenders, SectionKinds)> {
    let mut order = Vec::new();
    let mut map: Contenders = BTreeMap::new();
    let mut kinds = BTreeMap::new();
    let mut used: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for entry in entries {
        let digest = entry
            .manifest
            .scenario_digest
            .clone()
            .ok_or_else(|| CliError::Usage("manifest without scenario digest".into()))?;
        kinds
            .entry(digest.clone())
            .or_insert_with(|| entry.manifest.sections.iter().map(|s| s.kind).collect());
        let taken = used.entry(digest.clone()).or_default();
        for filter in &entry.manifest.filters {
            let base = format!("{}/{}", entry.label, filter.name);
            let mut key = base.clone();
            let mut n = 1;
            while taken.contains(&key) {
                n += 1;
                key = format!("{base}#{n}");
            }
            taken.insert(key.clone());
            if !map.contains_key(&key) {
                order.push(key.clone());
            }
            map.entry(key)
                .or_default()
                .insert(digest.clone(), filter.clone());
        }
    }
    Ok((order, map, kinds))
}

type Extractor = fn(&FilterResult, usize) -> Option<f64>;

const SECTION_METRICS: [(&str, Extractor); 4] = [
    ("erle_mean_db", |f, i| {
        f.sections.get(i).and_then(|s| s.erle_mean)
    }),
    ("erle_final_db", |f, i| {
        f.sections.get(i).and_then(|s| s.erle_final)
    }),
    ("misalignment_mean_db", |f, i| {
        f.sections.get(i).and_then(|s| s.misalignment_mean)
    }),
    ("misalignment_final_db", |f, i| {
        f.sections.get(i).and_then(|s| s.misalignment_final)
    }),
];

const GLOBAL_METRICS: [(&str, Extractor); 2] = [
    ("log_mse_db", |f, _| f.log_mse_db),
    ("time_to_misalignment_s", |f, _| f.time_to_misalignment_s),
];

fn compare_pair(
    a: &BTreeMap<String, FilterResult>,
    b: &BTreeMap<String, FilterResult>,
    extract: Extractor,
    section: usize,
) -> (usize, Option<f64>, usize, usize, usize) {
    let mut deltas = Vec::new();
    for (digest, fa) in a {
        let fb = &b[digest];
        if let (Some(va), Some(vb)) = (extract(fa, section), extract(fb, section)) {
            deltas.push(va - vb);
        }
    }
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    let ties = deltas.len() - positive - negative;
    let mean = (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
    (deltas.len(), mean, positive, negative, ties)
}

/// Compare all contenders found in the given run or batch manifests.
pub fn compare_manifests(paths: &[PathBuf]) -> Result<CompareReport> {
    let entries = load_entries(paths)?;
    let (order, map, kinds) = contenders(&entries)?;
    if order.len() < 2 {
        return Err(CliError::Usage(
            "need at least two filter results to compare".into(),
        ));
    }
    let digests = |key: &String| map[key].keys().cloned().collect::<BTreeSet<_>>();
    let sections = kinds.values().next().cloned().unwrap_or_default();
    let mut rows = Vec::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            if digests(a) != digests(b) {
                return Err(CliError::ScenarioMismatch(format!(
                    "`{a}` and `{b}` were run on different scenarios"
                )));
            }
            let mut push = |metric: &str, section: Option<usize>, extract: Extractor| {
                let (pairs, mean_delta, positive, negative, ties) =
                    compare_pair(&map[a], &map[b], extract, section.unwrap_or(0));
                rows.push(ComparisonRow {
                    a: a.clone(),
                    b: b.clone(),
                    metric: metric.to_owned(),
                    section,
                    kind: section.and_then(|s| sections.get(s).copied()),
                    pairs,
                    mean_delta,
                    positive,
                    negative,
                    ties,
                    p_value: sign_test(positive, negative),
                });
            };
            for s in 0..sections.len() {
                for (metric, extract) in SECTION_METRICS {
                    push(metric, Some(s), extract);
                }
            }
            for (metric, extract) in GLOBAL_METRICS {
                push(metric, None, extract);
            }
        }
    }
    Ok(CompareReport {
        contenders: order,
        scenarios: kinds.len(),
        rows,
    })
}

impl CompareReport {
    pub fn to_table(&self) -> Result<Table> {
        let mut table = Table::new([
            "a",
            "b",
            "metric",
            "section",
            "kind",
            "pairs",
            "mean_delta",
            "positive",
            "negative",
            "ties",
            "p_value",
        ]);
        for r in &self.rows {
            table.push(vec![
                r.a.clone(),
                r.b.clone(),
                r.metric.clone(),
                r.section.map(|s| s.to_string()).unwrap_or_default(),
                r.kind.map(|k| k.to_string()).unwrap_or_default(),
                r.pairs.to_string(),
                format_optional(r.mean_delta),
                r.positive.to_string(),
                r.negative.to_string(),
                r.ties.to_string(),
                format_value(r.p_value),
            ])?;
        }
        Ok(table)
    }

    /// The row for one pair, metric and section, in either order of the pair
    /// (the delta sign follows the stored order).
    pub fn find(
        &self,
        a: &str,
        b: &str,
        metric: &str,
        section: Option<usize>,
    ) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| {
            ((r.a == a && r.b == b) || (r.a == b && r.b == a))
                && r.metric == metric
                && r.section == section
        })
    }
}
