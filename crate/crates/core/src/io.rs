//! On-disk formats: instance directories (a TOML manifest plus CSV tables),
//! detection output, ROC tables and JSON summaries.
//!
//! Indices in every file are 0-based. Floats are written with Rust's
//! shortest round-trip formatting, so a write/read cycle is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::ConfidenceBand;
use crate::error::{Error, Result};
use crate::eval::RocCurve;
use crate::models::ModelId;
use crate::types::{
    validate_instance, AnomalyMask, Entry, GenerationSpec, Instance, ModelParams, RateMatrix,
    SparseObservations, Truth,
};

pub const MANIFEST_NAME: &str = "instance.toml";
const OBSERVATIONS_NAME: &str = "observations.csv";
const RATES_NAME: &str = "rates.csv";
const MASK_NAME: &str = "mask.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.display().to_string(),
                source,
            },
            other => format_err(path, format!("{other:?}")),
        }
    } else {
        format_err(path, e)
    }
}

/// Ground-truth parameters as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub model: ModelId,
    pub p_anom: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Always 0: row and column indices in the tables are 0-based.
    pub indexing: u8,
    pub n: usize,
    pub m: usize,
    pub observations: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRecord {
    row: usize,
    col: usize,
    count: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    row: usize,
    col: usize,
}

pub fn write_observations(path: &Path, obs: &SparseObservations) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for e in obs.entries() {
        w.serialize(ObservationRecord {
            row: e.row,
            col: e.col,
            count: e.count as i64,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_observations(path: &Path, n: usize, m: usize) -> Result<SparseObservations> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, &mut r, &["row", "col", "count"])?;
    let mut entries = Vec::new();
    for rec in r.deserialize::<ObservationRecord>() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.count < 0 {
            return Err(Error::NegativeCount {
                row: rec.row,
                col: rec.col,
                count: rec.count,
            });
        }
        entries.push(Entry {
            row: rec.row,
            col: rec.col,
            count: rec.count as u64,
        });
    }
    SparseObservations::from_entries(n, m, entries)
}

fn check_header<R: std::io::Read>(path: &Path, r: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(format_err(
            path,
            format!("expected header `{}`, found `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

/// Dense matrix as headerless rows of comma-separated values.
pub fn write_dense(path: &Path, values: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for i in 0..values.nrows() {
        w.write_record((0..values.ncols()).map(|j| values[(i, j)].to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dense(path: &Path, n: usize, m: usize) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut values = Vec::with_capacity(n * m);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != m {
            return Err(format_err(path, format!("row {rows} has {} columns, expected {m}", rec.len())));
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("not a number: `{field}`")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(format_err(path, format!("{rows} rows, expected {n}")));
    }
    Ok(DMatrix::from_row_slice(n, m, &values))
}

pub fn write_mask(path: &Path, mask: &AnomalyMask) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (row, col) in mask.iter() {
        w.serialize(MaskRecord { row, col }).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_mask(path: &Path, n: usize, m: usize) -> Result<AnomalyMask> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, &mut r, &["row", "col"])?;
    let mut positions = Vec::new();
    for rec in r.deserialize::<MaskRecord>() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        positions.push((rec.row, rec.col));
    }
    AnomalyMask::new(n, m, positions)
}

/// Writes `dir/instance.toml` and its tables, creating `dir` if needed.
pub fn write_instance(dir: &Path, instance: &Instance, generation: Option<&GenerationSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let obs = &instance.obs;
    write_observations(&dir.join(OBSERVATIONS_NAME), obs)?;
    let mut manifest = Manifest {
        indexing: 0,
        n: obs.n(),
        m: obs.m(),
        observations: OBSERVATIONS_NAME.into(),
        rates: None,
        mask: None,
        truth: None,
        generation: generation.cloned(),
    };
    if let Some(t) = &instance.truth {
        write_dense(&dir.join(RATES_NAME), t.rates.as_matrix())?;
        write_mask(&dir.join(MASK_NAME), &t.mask)?;
        manifest.rates = Some(RATES_NAME.into());
        manifest.mask = Some(MASK_NAME.into());
        manifest.truth = Some(TruthManifest {
            model: t.model,
            p_anom: t.params.p_anom,
            alpha: t.params.alpha.clone(),
        });
    }
    write_toml(&dir.join(MANIFEST_NAME), &manifest)
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| format_err(path, e))?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| format_err(path, e))
}

/// Accepts either an instance directory or the path of its manifest.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn read_instance(path: &Path) -> Result<Instance> {
    let manifest_file = manifest_path(path);
    let manifest: Manifest = read_toml(&manifest_file)?;
    if manifest.indexing != 0 {
        return Err(format_err(&manifest_file, "only 0-based indexing is supported"));
    }
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let obs = read_observations(&base.join(&manifest.observations), manifest.n, manifest.m)?;
    let truth = match (&manifest.truth, &manifest.rates, &manifest.mask) {
        (Some(t), Some(rates), Some(mask)) => Some(Truth {
            rates: RateMatrix::new(read_dense(&base.join(rates), manifest.n, manifest.m)?)?,
            mask: read_mask(&base.join(mask), manifest.n, manifest.m)?,
            params: ModelParams::new(t.p_anom, t.alpha.clone())?,
            model: t.model,
        }),
        (None, _, _) => None,
        _ => {
            return Err(format_err(
                &manifest_file,
                "ground truth needs `rates`, `mask` and `[truth]` together",
            ))
        }
    };
    validate_instance(obs, truth)
}

#[derive(Debug, Serialize)]
struct DetectionRecord {
    row: usize,
    col: usize,
    t: f64,
    #[serde(rename = "f_L")]
    f_l: f64,
    f_point: f64,
    #[serde(rename = "f_R")]
    f_r: f64,
    selected: u8,
}

/// `row,col,t,f_L,f_point,f_R,selected` for every observed entry.
pub fn write_detection(path: &Path, band: &ConfidenceBand, t: &[f64], mask: &AnomalyMask) -> Result<()> {
    if t.len() != band.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} selection values for {} band entries",
            t.len(),
            band.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (e, t) in band.entries.iter().zip(t) {
        w.serialize(DetectionRecord {
            row: e.row,
            col: e.col,
            t: *t,
            f_l: e.f_l,
            f_point: e.f_point,
            f_r: e.f_r,
            selected: mask.contains(e.row, e.col) as u8,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-entry anomaly scores `row,col,score`.
pub fn write_scores(path: &Path, obs: &SparseObservations, scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["row", "col", "score"]).map_err(|e| csv_err(path, e))?;
    for (e, s) in obs.entries().iter().zip(scores) {
        w.write_record([e.row.to_string(), e.col.to_string(), s.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// `param,fpr,tpr`, one row per curve point.
pub fn write_roc(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in &roc.points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_roc(path: &Path) -> Result<Vec<crate::eval::RocPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    check_header(path, &mut r, &["param", "fpr", "tpr"])?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}
