//! File formats: the binary tensor container, CSV schemas for catalogs and
//! per-sample records, and the JSON run manifest.
//!
//! Tensor layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       8         magic "DIMSCOPE"
//! 8       4         version (u32) = 1
//! 12      1         dtype (u8) = 1, f64 little-endian
//! 13      1         rank (u8), 1..=4
//! 14      8*rank    dims (u64 each)
//! ...     8*Πdims   payload, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{CatalogEntry, Cell, FrClass, IntervalTable};
use crate::domain::{Exclusion, IdEstimate, Method, Outcome};
use crate::energy::EnergyRecord;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"DIMSCOPE";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F64_LE: u8 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let count = element_count(&dims)
            .ok_or_else(|| Error::invalid(format!("tensor dims {dims:?} overflow")))?;
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::invalid(format!("tensor rank must be 1..=4, got {}", dims.len())));
        }
        if count != values.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} need {count} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode_tensor(dims: &[usize], values: &[f64]) -> Result<Vec<u8>> {
    let t = Tensor::new(dims.to_vec(), values.to_vec())?;
    let mut out = Vec::with_capacity(14 + 8 * dims.len() + 8 * values.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F64_LE);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let take = |offset: usize, len: usize, what: &str| {
        bytes.get(offset..offset + len).ok_or_else(|| {
            fail(
                bytes.len(),
                format!("truncated {what}: needed {len} bytes at offset {offset}"),
            )
        })
    };
    if take(0, 8, "magic")? != TENSOR_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(take(8, 4, "version")?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(fail(8, format!("unsupported version {version}")));
    }
    let dtype = take(12, 1, "dtype")?[0];
    if dtype != DTYPE_F64_LE {
        return Err(fail(12, format!("unsupported dtype code {dtype}")));
    }
    let rank = take(13, 1, "rank")?[0] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fail(13, format!("rank {rank} outside 1..=4")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 14 + 8 * i;
        let raw = u64::from_le_bytes(take(off, 8, "dims")?.try_into().unwrap());
        let d = usize::try_from(raw).map_err(|_| fail(off, format!("dim {raw} overflows")))?;
        dims.push(d);
    }
    let header = 14 + 8 * rank;
    let count = element_count(&dims)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| fail(14, format!("dims {dims:?} overflow")))?;
    let payload = take(header, count * 8, "payload")?;
    if bytes.len() != header + count * 8 {
        return Err(fail(
            header + count * 8,
            format!("{} trailing bytes", bytes.len() - header - count * 8),
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, values })
}

pub fn write_tensor(path: impl AsRef<Path>, dims: &[usize], values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(dims, values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Option<usize> {
    headers
        .iter()
        .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
}

/// Sample ids, one per row, from the `id` column (or the first column).
pub fn read_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = column(&headers, &["id", "sample_id"]).unwrap_or(0);
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| Error::csv(path, e))?;
            Ok(r.get(col).unwrap_or_default().to_string())
        })
        .collect()
}

pub fn write_ids(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["id"]).map_err(|e| Error::csv(path, e))?;
    for id in ids {
        w.write_record([id]).map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}

/// Minimum consensus level kept at catalog ingest.
pub const MIN_CONSENSUS: f64 = 0.65;
/// Sources must be strictly larger than this (arcseconds).
pub const MIN_ANGULAR_SIZE: f64 = 20.0;

#[derive(Debug, Clone, Default)]
pub struct CatalogRead {
    pub entries: Vec<CatalogEntry>,
    /// Rows removed by the quality cuts, with the reason.
    pub rejected: Vec<(CatalogEntry, String)>,
}

/// Read a catalog, applying the consensus and angular-size cuts when those
/// columns are present. Unknown columns are ignored.
pub fn read_catalog_csv(path: impl AsRef<Path>) -> Result<CatalogRead> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let id_col = column(&headers, &["id", "sample_id"]).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        reason: "catalog has no id column".into(),
    })?;
    let fr_col = column(&headers, &["fr_class"]);
    let cons_col = column(&headers, &["consensus", "consensus_level"]);
    let size_col = column(&headers, &["angular_size"]);
    let snr_col = column(&headers, &["snr"]);
    let mut out = CatalogRead::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty());
        let number = |c: Option<usize>, what: &str| -> Result<Option<f64>> {
            field(c)
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::invalid(format!("{}: line {line}: bad {what} {s:?}", path.display()))
                    })
                })
                .transpose()
        };
        let sample_id = rec.get(id_col).unwrap_or_default().to_string();
        if sample_id.is_empty() {
            return Err(Error::invalid(format!("{}: line {line}: empty id", path.display())));
        }
        let fr_class = field(fr_col).map_or(Ok(FrClass::Unlabeled), str::parse)?;
        let consensus_level = number(cons_col, "consensus")?;
        let angular_size = number(size_col, "angular_size")?;
        let snr = number(snr_col, "snr")?;
        let reason = match (consensus_level, angular_size) {
            (Some(c), _) if c < MIN_CONSENSUS => Some(format!("consensus {c} < {MIN_CONSENSUS}")),
            (_, Some(a)) if a <= MIN_ANGULAR_SIZE => Some(format!("angular size {a} <= {MIN_ANGULAR_SIZE}")),
            _ => None,
        };
        let entry = CatalogEntry {
            sample_id,
            fr_class,
            consensus_level,
            angular_size,
            snr,
        };
        match reason {
            Some(why) => out.rejected.push((entry, why)),
            None => out.entries.push(entry),
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    sample_id: String,
    method: Method,
    estimate: Option<f64>,
    k_hat: Option<usize>,
    gap_index: Option<usize>,
    truncated: Option<bool>,
    low_confidence: Option<bool>,
    status: String,
    reason: String,
}

pub fn write_estimates_csv(path: impl AsRef<Path>, method: Method, outcomes: &[Outcome]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for o in outcomes {
        let row = match o {
            Ok(e) => EstimateRow {
                sample_id: e.sample_id.clone(),
                method: e.method,
                estimate: Some(e.value),
                k_hat: Some(e.k_hat),
                gap_index: e.gap_index,
                truncated: Some(e.truncated),
                low_confidence: Some(e.low_confidence),
                status: "ok".into(),
                reason: String::new(),
            },
            Err(x) => EstimateRow {
                sample_id: x.sample_id.clone(),
                method,
                estimate: None,
                k_hat: None,
                gap_index: None,
                truncated: None,
                low_confidence: None,
                status: "excluded".into(),
                reason: x.reason.clone(),
            },
        };
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}

/// Per-sample estimates as written by [`write_estimates_csv`] (spectra are
/// stored separately).
pub fn read_estimates_csv(path: impl AsRef<Path>) -> Result<Vec<Outcome>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<EstimateRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if row.status == "ok" {
            let (Some(value), Some(k_hat)) = (row.estimate, row.k_hat) else {
                return Err(Error::invalid(format!(
                    "{}: sample {} marked ok without an estimate",
                    path.display(),
                    row.sample_id
                )));
            };
            out.push(Ok(IdEstimate {
                sample_id: row.sample_id,
                method: row.method,
                value,
                k_hat,
                spectrum: Vec::new(),
                gap_index: row.gap_index,
                truncated: row.truncated.unwrap_or(false),
                low_confidence: row.low_confidence.unwrap_or(false),
                params: BTreeMap::new(),
            }));
        } else {
            out.push(Err(Exclusion {
                sample_id: row.sample_id,
                reason: row.reason,
            }));
        }
    }
    Ok(out)
}

/// Long-format spectra: one `(sample_id, index, value)` row per singular value,
/// index starting at 1.
pub fn write_spectra_csv<'a>(
    path: impl AsRef<Path>,
    spectra: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["sample_id", "index", "value"])
        .map_err(|e| Error::csv(path, e))?;
    for (id, values) in spectra {
        for (i, v) in values.iter().enumerate() {
            w.write_record([id.to_string(), (i + 1).to_string(), v.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    finish(w, path)
}

pub fn read_spectra_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        index: usize,
        value: f64,
    }
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let v = out.entry(row.sample_id.clone()).or_default();
        if row.index != v.len() + 1 {
            return Err(Error::invalid(format!(
                "{}: spectrum of {} is not listed in index order",
                path.display(),
                row.sample_id
            )));
        }
        v.push(row.value);
    }
    Ok(out)
}

pub fn write_energy_csv(path: impl AsRef<Path>, records: &[EnergyRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    finish(w, path)
}

pub fn read_energy_csv(path: impl AsRef<Path>) -> Result<Vec<EnergyRecord>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    grouping: String,
    method: String,
    interval: u32,
    estimate: String,
    n: usize,
    excluded_count: usize,
    note: String,
}

/// Interval tables in long form: one row per (table, interval). N/A cells
/// are written as `NA` with the reason in `note`.
pub fn write_interval_tables_csv(path: impl AsRef<Path>, tables: &[IntervalTable]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for t in tables {
        for (&interval, cell) in &t.cells {
            let (estimate, n, excluded_count, note) = match cell {
                Cell::Value { estimate, n, excluded } => (estimate.to_string(), *n, *excluded, String::new()),
                Cell::NotApplicable { reason, n, excluded } => ("NA".to_string(), *n, *excluded, reason.clone()),
            };
            w.serialize(TableRow {
                grouping: t.grouping.clone(),
                method: t.method.clone(),
                interval,
                estimate,
                n,
                excluded_count,
                note,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
    }
    finish(w, path)
}

/// Published-style tables: columns `method, interval, value` (value may be
/// `NA`), with an optional `grouping` column (`mean` / `std`). Rows are
/// grouped into one table per (grouping, method) in first-seen order.
pub fn read_fixture_tables(path: impl AsRef<Path>) -> Result<Vec<IntervalTable>> {
    let path = path.as_ref();
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    let need = |names: &[&str]| {
        column(&headers, names).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("fixture is missing the {} column", names[0]),
        })
    };
    let method_col = need(&["method"])?;
    let interval_col = need(&["interval"])?;
    let value_col = need(&["value", "estimate"])?;
    let grouping_col = column(&headers, &["grouping"]);
    let mut tables: Vec<IntervalTable> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::invalid(format!("{}: line {line}: bad {what}", path.display()));
        let method = rec.get(method_col).unwrap_or_default().to_string();
        let grouping = grouping_col
            .and_then(|c| rec.get(c))
            .unwrap_or("unspecified")
            .to_string();
        let interval: u32 = rec
            .get(interval_col)
            .unwrap_or_default()
            .parse()
            .map_err(|_| bad("interval"))?;
        let raw = rec.get(value_col).unwrap_or_default();
        let cell = if raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("n/a") {
            Cell::NotApplicable {
                reason: "not applicable (insufficient samples)".into(),
                n: 0,
                excluded: 0,
            }
        } else {
            Cell::Value {
                estimate: raw.parse().map_err(|_| bad("value"))?,
                n: 0,
                excluded: 0,
            }
        };
        let idx = match tables
            .iter()
            .position(|t| t.method == method && t.grouping == grouping)
        {
            Some(i) => i,
            None => {
                tables.push(IntervalTable::new(method, grouping));
                tables.len() - 1
            }
        };
        if tables[idx].cells.insert(interval, cell).is_some() {
            return Err(bad("duplicate interval"));
        }
    }
    Ok(tables)
}

/// Machine-readable record of one CLI run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command_line: Vec<String>,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub decisions: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &RunManifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
