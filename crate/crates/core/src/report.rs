//! Result tables, the latency/MCC frontier and run manifests.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BackendDescriptor;
use crate::metrics::MetricsReport;
use crate::profile::ProfileReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("dataset {0:?} has no content hash; refusing to start the run")]
    MissingDatasetHash(String),
    #[error("no reports to render")]
    Empty,
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest hash mismatch: recorded {recorded}, recomputed {recomputed}")]
    HashMismatch {
        recorded: String,
        recomputed: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `<dataset>__<model>__<mode>.<ext>`, with path separators in model ids replaced.
pub fn artifact_name(dataset: &str, model: &str, mode: &str, ext: &str) -> String {
    let clean = |s: &str| s.replace(['/', '\\', ':'], "-");
    format!(
        "{}__{}__{}.{}",
        clean(dataset),
        clean(model),
        clean(mode),
        ext
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedTable {
    pub markdown: String,
    pub csv: String,
}

fn columns(r: &MetricsReport) -> [f64; 3] {
    [r.mcc, r.f1_err, r.f1_not]
}

/// One row per report. Within each dataset the best value of every column is
/// bold; exact ties are all bold. The CSV keeps full precision.
pub fn render_results_table(reports: &[MetricsReport]) -> Result<RenderedTable, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    let best = |dataset: &str, col: usize| {
        reports
            .iter()
            .filter(|r| r.dataset == dataset)
            .map(|r| columns(r)[col])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut md = String::from(
        "| Dataset | Model | Mode | MCC | F1-ERR | F1-NOT |\n|---|---|---|---:|---:|---:|\n",
    );
    let mut csv = String::from(
        "dataset,model,mode,mcc,f1_err,f1_not,accuracy,mcc_ci_lo,mcc_ci_hi,f1_err_ci_lo,f1_err_ci_hi,n,invalid,manifest_hash\n",
    );
    for r in reports {
        let cells: Vec<String> = columns(r)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if *v == best(&r.dataset, i) {
                    format!("**{v:.2}**")
                } else {
                    format!("{v:.2}")
                }
            })
            .collect();
        writeln!(
            md,
            "| {} | {} | {} | {} |",
            r.dataset,
            r.model,
            r.mode,
            cells.join(" | ")
        )
        .unwrap();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.dataset),
            csv_field(&r.model),
            csv_field(&r.mode),
            r.mcc,
            r.f1_err,
            r.f1_not,
            r.accuracy,
            r.ci_mcc.0,
            r.ci_mcc.1,
            r.ci_f1_err.0,
            r.ci_f1_err.1,
            r.n,
            r.invalid,
            r.manifest_hash
        )
        .unwrap();
    }
    Ok(RenderedTable { markdown: md, csv })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Compute table: latency, throughput and memory per profiled configuration.
pub fn render_profile_table(reports: &[ProfileReport]) -> RenderedTable {
    let mut md = String::from("| Model | Mode | Latency (ms) | Throughput (pairs/s) | Peak memory (MiB) | Memory source |\n|---|---|---:|---:|---:|---|\n");
    let mut csv = String::from(
        "model,mode,latency_ms,first_attempt_ms,throughput_sps,peak_memory_bytes,memory_source,serialized_backend,hardware,manifest_hash\n",
    );
    for r in reports {
        let mem = r
            .peak_memory_bytes
            .map(|b| format!("{:.0}", b as f64 / (1024.0 * 1024.0)))
            .unwrap_or_else(|| "n/a".into());
        let source = serde_json::to_value(r.memory_source).unwrap();
        let source = source.as_str().unwrap_or_default();
        writeln!(
            md,
            "| {} | {} | {:.0} | {:.1} | {} | {} |",
            r.model, r.mode, r.latency_ms, r.throughput_sps, mem, source
        )
        .unwrap();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.model),
            csv_field(&r.mode),
            r.latency_ms,
            r.first_attempt_ms,
            r.throughput_sps,
            r.peak_memory_bytes
                .map(|b| b.to_string())
                .unwrap_or_default(),
            source,
            r.serialized_backend,
            csv_field(&r.hardware),
            r.manifest_hash
        )
        .unwrap();
    }
    RenderedTable { markdown: md, csv }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub label: String,
    pub latency_ms: f64,
    pub mcc: f64,
    #[serde(default)]
    pub manifest_hash: String,
}

impl FrontierPoint {
    pub fn new(label: impl Into<String>, latency_ms: f64, mcc: f64) -> FrontierPoint {
        FrontierPoint {
            label: label.into(),
            latency_ms,
            mcc,
            manifest_hash: String::new(),
        }
    }

    /// Lower-or-equal latency and higher-or-equal MCC, strictly better in one.
    pub fn dominates(&self, other: &FrontierPoint) -> bool {
        self.latency_ms <= other.latency_ms
            && self.mcc >= other.mcc
            && (self.latency_ms < other.latency_ms || self.mcc > other.mcc)
    }
}

/// Non-dominated points ordered by latency (input order among equal latencies).
pub fn pareto_frontier(points: &[FrontierPoint]) -> Vec<FrontierPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].latency_ms.total_cmp(&points[b].latency_ms));
    let mut out = Vec::new();
    let mut best_faster = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let lat = points[order[i]].latency_ms;
        let mut j = i;
        while j < order.len() && points[order[j]].latency_ms.total_cmp(&lat) == Ordering::Equal {
            j += 1;
        }
        let group = &order[i..j];
        let top = group
            .iter()
            .map(|&k| points[k].mcc)
            .fold(f64::NEG_INFINITY, f64::max);
        if top > best_faster {
            out.extend(
                group
                    .iter()
                    .filter(|&&k| points[k].mcc == top)
                    .map(|&k| points[k].clone()),
            );
        }
        best_faster = best_faster.max(top);
        i = j;
    }
    out
}

/// Joins metrics and profiles on (model, mode) for one dataset.
pub fn frontier_points(
    metrics: &[MetricsReport],
    profiles: &[ProfileReport],
    dataset: &str,
) -> Vec<FrontierPoint> {
    metrics
        .iter()
        .filter(|m| m.dataset == dataset)
        .filter_map(|m| {
            profiles
                .iter()
                .find(|p| p.model == m.model && p.mode == m.mode)
                .map(|p| FrontierPoint {
                    manifest_hash: m.manifest_hash.clone(),
                    ..FrontierPoint::new(format!("{}/{}", m.model, m.mode), p.latency_ms, m.mcc)
                })
        })
        .collect()
}

pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut s = String::from("label,latency_ms,mcc,manifest_hash\n");
    for p in points {
        writeln!(
            s,
            "{},{},{},{}",
            csv_field(&p.label),
            p.latency_ms,
            p.mcc,
            p.manifest_hash
        )
        .unwrap();
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub exemplar: u64,
    pub vote: u64,
    pub bootstrap: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHash {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// Inputs for a manifest; dataset hashes may still be missing.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub datasets: Vec<(String, String, Option<String>)>,
    pub backend: BackendDescriptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seeds: Seeds,
    pub datasets: Vec<DatasetHash>,
    pub backend: BackendDescriptor,
    pub code_version: String,
    pub created_unix_ms: u64,
    pub hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    config: &'a serde_json::Value,
    seeds: &'a Seeds,
    datasets: Vec<(&'a str, &'a str)>,
    backend: &'a BackendDescriptor,
    code_version: &'a str,
}

impl RunManifest {
    /// sha256 over the canonical JSON of everything except the timestamp and
    /// dataset paths (content hashes identify the data).
    pub fn compute_hash(&self) -> String {
        let v = serde_json::to_value(Hashed {
            config: &self.config,
            seeds: &self.seeds,
            datasets: self
                .datasets
                .iter()
                .map(|d| (d.name.as_str(), d.sha256.as_str()))
                .collect(),
            backend: &self.backend,
            code_version: &self.code_version,
        })
        .expect("manifest serializes");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn verify(&self) -> Result<(), ReportError> {
        let recomputed = self.compute_hash();
        if recomputed == self.hash {
            Ok(())
        } else {
            Err(ReportError::HashMismatch {
                recorded: self.hash.clone(),
                recomputed,
            })
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String, ReportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Builds the manifest; refuses when any dataset lacks a content hash.
pub fn build_manifest(ctx: &RunContext) -> Result<RunManifest, ReportError> {
    let datasets = ctx
        .datasets
        .iter()
        .map(|(name, path, hash)| {
            Ok(DatasetHash {
                name: name.clone(),
                path: path.clone(),
                sha256: hash
                    .clone()
                    .ok_or_else(|| ReportError::MissingDatasetHash(name.clone()))?,
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    let mut m = RunManifest {
        config: ctx.config.clone(),
        seeds: ctx.seeds.clone(),
        datasets,
        backend: ctx.backend.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        hash: String::new(),
    };
    m.hash = m.compute_hash();
    Ok(m)
}

/// Builds the manifest and writes it to `path`.
pub fn emit_manifest(ctx: &RunContext, path: &Path) -> Result<RunManifest, ReportError> {
    let m = build_manifest(ctx)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(path, json + "\n").map_err(io_err(path))?;
    Ok(m)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
