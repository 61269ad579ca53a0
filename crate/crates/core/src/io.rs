//! Persisted file formats: dataset CSV with its JSON sidecar, reference-curve
//! CSV, chain traces, posterior sample sets, chain diagnostics, model
//! checkpoints, evaluation reports, sweep curves, and the checksummed run
//! manifest.
//!
//! Floats are written in shortest round-trip form, so re-reading a file
//! recovers the original bits and identical runs produce identical bytes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cvae::CvaeModel;
use crate::evaluation::{DvrShiftPoint, EvalReport, SweepPoint, TrainSizePoint, PARAM_NAMES};
use crate::kinetics::{KineticParams, NoiseModel, ReferenceTac, UniformGrid};
use crate::kinetics::{reference_tac_from_table, KineticsError};
use crate::mcmc::{GewekeReport, PosteriorSamples, SourceTag, TraceRow};
use crate::priors::{Dataset, PriorConfig, SimulatedSample};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("csv error on {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("json error on {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("malformed {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

fn parse_field<T: Real>(path: &Path, text: &str, column: &str) -> Result<T, IoError> {
    T::parse_str(text).ok_or_else(|| IoError::Format {
        path: path.to_path_buf(),
        reason: format!("cannot parse {column} value {text:?}"),
    })
}

/// Serializes any value as pretty JSON (with a trailing newline).
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    w.write_all(b"\n").map_err(file_err(path))?;
    Ok(())
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------- datasets

/// Provenance sidecar written next to every dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct DatasetSidecar<T> {
    pub prior: PriorConfig<T>,
    pub seed: u64,
    pub size: usize,
    pub truncation_acceptance: f64,
    pub noise: NoiseModel<T>,
}

/// One row per sample: dvr, k2_per_min, r1, noise_sigma, y_1..y_N.
pub fn write_dataset_csv<T: Real>(path: &Path, dataset: &Dataset<T>) -> Result<(), IoError> {
    let n_frames = dataset.samples.first().map_or(0, |s| s.y.len());
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec![
        "dvr".to_string(),
        "k2_per_min".to_string(),
        "r1".to_string(),
        "noise_sigma".to_string(),
    ];
    header.extend((1..=n_frames).map(|i| format!("y_{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    let mut record = Vec::with_capacity(header.len());
    for s in &dataset.samples {
        record.clear();
        record.push(s.params.dvr.to_string());
        record.push(s.params.k2_per_min.to_string());
        record.push(s.params.r1.to_string());
        record.push(s.noise_sigma.to_string());
        record.extend(s.y.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

/// Reads the rows of a dataset CSV (the sidecar carries the provenance).
pub fn read_dataset_csv<T: Real>(path: &Path) -> Result<Vec<SimulatedSample<T>>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.len() < 5
        || &headers[0] != "dvr"
        || &headers[1] != "k2_per_min"
        || &headers[2] != "r1"
        || &headers[3] != "noise_sigma"
    {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            reason: "expected header dvr,k2_per_min,r1,noise_sigma,y_1..".into(),
        });
    }
    let n_frames = headers.len() - 4;
    let mut samples = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        if row.len() != headers.len() {
            return Err(IoError::Format {
                path: path.to_path_buf(),
                reason: format!("row has {} fields, expected {}", row.len(), headers.len()),
            });
        }
        let params = KineticParams {
            dvr: parse_field(path, &row[0], "dvr")?,
            k2_per_min: parse_field(path, &row[1], "k2_per_min")?,
            r1: parse_field(path, &row[2], "r1")?,
        };
        let noise_sigma = parse_field(path, &row[3], "noise_sigma")?;
        let mut y = Vec::with_capacity(n_frames);
        for i in 0..n_frames {
            y.push(parse_field(path, &row[4 + i], "y")?);
        }
        samples.push(SimulatedSample { params, noise_sigma, y });
    }
    Ok(samples)
}

// ---------------------------------------------------- reference curve table

/// Two-column CSV (time_s, value), header row required.
pub fn read_reference_tac_csv<T: Real>(
    path: &Path,
    grid: UniformGrid<T>,
) -> Result<ReferenceTac<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.len() != 2 || &headers[0] != "time_s" || &headers[1] != "value" {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            reason: "expected header time_s,value".into(),
        });
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        times.push(parse_field::<T>(path, &row[0], "time_s")?);
        values.push(parse_field::<T>(path, &row[1], "value")?);
    }
    reference_tac_from_table(&times, &values, grid).map_err(IoError::from)
}

pub fn write_reference_tac_csv<T: Real>(path: &Path, tac: &ReferenceTac<T>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["time_s", "value"]).map_err(csv_err(path))?;
    for (i, v) in tac.values.iter().enumerate() {
        w.write_record([tac.grid.time(i).to_string(), v.to_string()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

// ------------------------------------------------------------ chain outputs

pub fn write_trace_csv<T: Real>(path: &Path, trace: &[TraceRow<T>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["iteration", "dvr", "k2_per_min", "r1", "noise_sigma", "log_post", "accepted"])
        .map_err(csv_err(path))?;
    for row in trace {
        w.write_record([
            row.iteration.to_string(),
            row.dvr.to_string(),
            row.k2_per_min.to_string(),
            row.r1.to_string(),
            row.noise_sigma.to_string(),
            row.log_post.to_string(),
            u8::from(row.accepted).to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

/// Posterior draws: source, measurement_id, dvr, k2_per_min, r1, noise_sigma
/// (noise_sigma left empty for methods that do not sample it).
pub fn write_posterior_csv<T: Real>(path: &Path, samples: &PosteriorSamples<T>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["source", "measurement_id", "dvr", "k2_per_min", "r1", "noise_sigma"])
        .map_err(csv_err(path))?;
    let source = samples.source.to_string();
    let id = samples.measurement_id.to_string();
    for (i, d) in samples.draws.iter().enumerate() {
        let sigma = samples
            .noise_sigmas
            .as_ref()
            .map(|s| s[i].to_string())
            .unwrap_or_default();
        w.write_record([
            source.clone(),
            id.clone(),
            d[0].to_string(),
            d[1].to_string(),
            d[2].to_string(),
            sigma,
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn read_posterior_csv<T: Real>(path: &Path) -> Result<PosteriorSamples<T>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.len() != 6 || &headers[0] != "source" {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            reason: "expected header source,measurement_id,dvr,k2_per_min,r1,noise_sigma".into(),
        });
    }
    let mut source: Option<SourceTag> = None;
    let mut measurement_id = 0usize;
    let mut draws = Vec::new();
    let mut sigmas: Vec<T> = Vec::new();
    let mut any_sigma = false;
    for row in r.records() {
        let row = row.map_err(csv_err(path))?;
        let tag: SourceTag = row[0].parse().map_err(|reason| IoError::Format {
            path: path.to_path_buf(),
            reason,
        })?;
        match source {
            None => source = Some(tag),
            Some(s) if s == tag => {}
            Some(s) => {
                return Err(IoError::Format {
                    path: path.to_path_buf(),
                    reason: format!("mixed source tags {s} and {tag}"),
                })
            }
        }
        measurement_id = row[1].parse().map_err(|_| IoError::Format {
            path: path.to_path_buf(),
            reason: format!("bad measurement_id {:?}", &row[1]),
        })?;
        draws.push([
            parse_field(path, &row[2], "dvr")?,
            parse_field(path, &row[3], "k2_per_min")?,
            parse_field(path, &row[4], "r1")?,
        ]);
        if !row[5].is_empty() {
            any_sigma = true;
            sigmas.push(parse_field(path, &row[5], "noise_sigma")?);
        }
    }
    if any_sigma && sigmas.len() != draws.len() {
        return Err(IoError::Format {
            path: path.to_path_buf(),
            reason: "noise_sigma present for some rows only".into(),
        });
    }
    let source = source.ok_or_else(|| IoError::Format {
        path: path.to_path_buf(),
        reason: "empty posterior file".into(),
    })?;
    Ok(PosteriorSamples {
        draws,
        noise_sigmas: any_sigma.then_some(sigmas),
        source,
        measurement_id,
    })
}

/// Per-chain convergence summary written next to each trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics<T> {
    pub measurement_id: usize,
    pub acceptance_rate: f64,
    pub final_proposal_scales: Vec<T>,
    pub geweke: GewekeReport<T>,
}

// -------------------------------------------------------------- checkpoints

pub fn write_model_json<T: Real>(path: &Path, model: &CvaeModel<T>) -> Result<(), IoError> {
    write_json(path, model)
}

pub fn read_model_json<T: Real>(path: &Path) -> Result<CvaeModel<T>, IoError> {
    read_json(path)
}

// ------------------------------------------------------------- eval reports

/// Table-style CSV: one row per (metric, parameter), one column per method.
pub fn write_eval_csv<T: Real>(path: &Path, report: &EvalReport<T>) -> Result<(), IoError> {
    let methods = [SourceTag::CvaeVanilla, SourceTag::CvaeDualEncoder, SourceTag::CvaeDualDecoder];
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["metric".to_string(), "setting".to_string(), "parameter".to_string()];
    header.extend(methods.iter().map(|m| m.to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    for (metric, pick) in [
        ("delta_mu", 0usize),
        ("delta_sigma", 1),
        ("d_kl", 2),
    ] {
        for (p, name) in PARAM_NAMES.iter().enumerate() {
            let mut record =
                vec![metric.to_string(), report.setting.to_string(), (*name).to_string()];
            for m in methods {
                let cell = report
                    .method(m)
                    .map(|mr| {
                        let pe = &mr.params[p];
                        match pick {
                            0 => pe.delta_mu.to_string(),
                            1 => pe.delta_sigma.to_string(),
                            _ => pe.d_kl.to_string(),
                        }
                    })
                    .unwrap_or_default();
                record.push(cell);
            }
            w.write_record(&record).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

// -------------------------------------------------------------- sweep files

pub fn write_hyper_sweep_csv<T: Real>(path: &Path, points: &[SweepPoint<T>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["grid_value", "d_kl_mean", "d_kl_std", "d_kl_dvr", "d_kl_k2_per_min", "d_kl_r1"])
        .map_err(csv_err(path))?;
    for p in points {
        w.write_record([
            p.grid_value.to_string(),
            p.d_kl_mean.to_string(),
            p.d_kl_std.to_string(),
            p.per_param_mean[0].to_string(),
            p.per_param_mean[1].to_string(),
            p.per_param_mean[2].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn write_size_sweep_csv<T: Real>(path: &Path, points: &[TrainSizePoint<T>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "train_size",
        "d_kl_mean",
        "d_kl_std_across_tests",
        "d_kl_dvr",
        "d_kl_k2_per_min",
        "d_kl_r1",
    ])
    .map_err(csv_err(path))?;
    for p in points {
        w.write_record([
            p.size.to_string(),
            p.d_kl_mean.to_string(),
            p.d_kl_std_across_tests.to_string(),
            p.per_param_mean[0].to_string(),
            p.per_param_mean[1].to_string(),
            p.per_param_mean[2].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

pub fn write_dvr_sweep_csv<T: Real>(path: &Path, points: &[DvrShiftPoint<T>]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["dvr_star", "d_kl_mean", "d_kl_dvr", "d_kl_k2_per_min", "d_kl_r1"])
        .map_err(csv_err(path))?;
    for p in points {
        w.write_record([
            p.dvr_star.to_string(),
            p.d_kl_mean.to_string(),
            p.per_param_mean[0].to_string(),
            p.per_param_mean[1].to_string(),
            p.per_param_mean[2].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))?;
    Ok(())
}

// ------------------------------------------------------------- run manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub files: Vec<ManifestEntry>,
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<(), IoError> {
    for entry in fs::read_dir(dir).map_err(file_err(dir))? {
        let entry = entry.map_err(file_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, root, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Checksums every file under `dir` (except the manifest itself) and writes
/// `manifest.json` listing them sorted by relative path.
pub fn write_manifest(dir: &Path) -> Result<RunManifest, IoError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut entries = Vec::new();
    for path in files {
        let rel = path.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
        if rel == "manifest.json" {
            continue;
        }
        let bytes = fs::read(&path).map_err(file_err(&path))?;
        let digest = Sha256::digest(&bytes);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect::<String>();
        entries.push(ManifestEntry { path: rel, bytes: bytes.len() as u64, sha256 });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest { files: entries };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
