//! Reporting layer: SNR, catalog joins, per-interval aggregation, trend
//! checks and plot data.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classical::{mle_id_aggregate, ppca_id_global};
use crate::domain::{ImageGrid, Method, Outcome, PointSet};
use crate::energy::EnergyRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrClass {
    FrI,
    FrII,
    Unlabeled,
}

impl FrClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrI => "FRI",
            Self::FrII => "FRII",
            Self::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for FrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FrClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "fri" | "fr1" => Ok(Self::FrI),
            "frii" | "fr2" => Ok(Self::FrII),
            "" | "unlabeled" | "unlabelled" | "none" => Ok(Self::Unlabeled),
            _ => Err(Error::invalid(format!("unknown FR class {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub sample_id: String,
    pub fr_class: FrClass,
    pub consensus_level: Option<f64>,
    /// Arcseconds.
    pub angular_size: Option<f64>,
    pub snr: Option<f64>,
}

/// Gaussian-consistent MAD scale.
pub const MAD_SCALE: f64 = 1.4826;
pub const DEFAULT_BORDER_WIDTH: usize = 5;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pixels within `width` of any edge. Covers the whole image when the
/// cutout is smaller than two border widths.
pub fn border_ring(img: &ImageGrid, width: usize) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if r.min(c).min(h - 1 - r).min(w - 1 - c) < width {
                out.push(img.pixel(r, c));
            }
        }
    }
    out
}

/// Peak over robust border noise. The inner `Err` is an exclusion reason.
pub fn estimate_snr(img: &ImageGrid, border_width: usize) -> Result<std::result::Result<f64, String>> {
    if border_width == 0 {
        return Err(Error::invalid("SNR border width must be at least 1"));
    }
    let mut ring = border_ring(img, border_width);
    let center = median(&mut ring);
    let mut dev: Vec<f64> = ring.iter().map(|v| (v - center).abs()).collect();
    let noise = MAD_SCALE * median(&mut dev);
    if noise == 0.0 {
        return Ok(Err("zero border MAD".into()));
    }
    let peak = img.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let snr = peak / noise;
    if !(snr > 0.0 && snr.is_finite()) {
        return Ok(Err(format!("non-positive SNR {snr}")));
    }
    Ok(Ok(snr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Value { estimate: f64, n: usize, excluded: usize },
    NotApplicable { reason: String, n: usize, excluded: usize },
}

impl Cell {
    pub fn estimate(&self) -> Option<f64> {
        match self {
            Self::Value { estimate, .. } => Some(*estimate),
            Self::NotApplicable { .. } => None,
        }
    }
}

pub const NA_INSUFFICIENT: &str = "insufficient samples";
pub const NA_EMPTY: &str = "empty interval";

/// Interval index → aggregate, one table per (method, grouping).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTable {
    pub method: String,
    /// Which energy statistic the intervals come from: `mean` or `std`.
    pub grouping: String,
    pub cells: BTreeMap<u32, Cell>,
}

impl IntervalTable {
    pub fn new(method: impl Into<String>, grouping: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            grouping: grouping.into(),
            cells: BTreeMap::new(),
        }
    }

    pub fn values(&self) -> Vec<(u32, f64)> {
        self.cells
            .iter()
            .filter_map(|(&i, c)| c.estimate().map(|v| (i, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Mean,
    Std,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Std => "std",
        }
    }

    pub fn label(self, r: &EnergyRecord) -> u32 {
        match self {
            Self::Mean => r.mean_interval,
            Self::Std => r.std_interval,
        }
    }
}

fn interval_members(records: &[EnergyRecord], grouping: Grouping) -> Result<BTreeMap<u32, Vec<&EnergyRecord>>> {
    if records.is_empty() {
        return Err(Error::invalid("no energy records to group by"));
    }
    let mut seen = HashMap::new();
    let mut by = BTreeMap::<u32, Vec<&EnergyRecord>>::new();
    for r in records {
        if seen.insert(r.id.as_str(), ()).is_some() {
            return Err(Error::invalid(format!("duplicate energy record for {}", r.id)));
        }
        let label = grouping.label(r);
        if label == 0 {
            return Err(Error::invalid(format!("{}: interval labels start at 1", r.id)));
        }
        by.entry(label).or_default().push(r);
    }
    let max = *by.keys().next_back().expect("non-empty");
    for i in 1..=max {
        by.entry(i).or_default();
    }
    Ok(by)
}

/// Per-interval aggregate of per-sample estimates. Diffusion and LPCA take
/// the mean of per-point values, MLE the inverse of the mean inverse.
/// Samples with an energy record but no estimate count as excluded.
pub fn aggregate_by_interval(
    outcomes: &[Outcome],
    records: &[EnergyRecord],
    method: Method,
    grouping: Grouping,
    label: &str,
) -> Result<IntervalTable> {
    if method == Method::Ppca {
        return Err(Error::invalid("PPCA is aggregated from points; use aggregate_ppca_by_interval"));
    }
    let energy_ids: HashMap<&str, ()> = records.iter().map(|r| (r.id.as_str(), ())).collect();
    let mut by_id: HashMap<&str, &Outcome> = HashMap::new();
    for o in outcomes {
        let id = crate::domain::outcome_id(o);
        if !energy_ids.contains_key(id) {
            return Err(Error::invalid(format!("estimate {id} has no energy record")));
        }
        if by_id.insert(id, o).is_some() {
            return Err(Error::invalid(format!("duplicate estimate for {id}")));
        }
    }
    let mut table = IntervalTable::new(label, grouping.as_str());
    for (interval, members) in interval_members(records, grouping)? {
        let mut vals = Vec::new();
        let mut excluded = 0;
        for r in &members {
            match by_id.get(r.id.as_str()) {
                Some(Ok(e)) => vals.push(e.value),
                _ => excluded += 1,
            }
        }
        let n = vals.len();
        let cell = if vals.is_empty() {
            Cell::NotApplicable {
                reason: NA_EMPTY.into(),
                n,
                excluded,
            }
        } else {
            let estimate = match method {
                Method::Mle => mle_id_aggregate(&vals, excluded)?.estimate,
                _ => vals.iter().sum::<f64>() / n as f64,
            };
            Cell::Value { estimate, n, excluded }
        };
        table.cells.insert(interval, cell);
    }
    Ok(table)
}

/// Global PPCA on each interval's points; too few points gives N/A.
pub fn aggregate_ppca_by_interval(pts: &PointSet, records: &[EnergyRecord], grouping: Grouping, label: &str) -> Result<IntervalTable> {
    let index: HashMap<&str, usize> = pts.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut table = IntervalTable::new(label, grouping.as_str());
    for (interval, members) in interval_members(records, grouping)? {
        let rows: Vec<usize> = members.iter().filter_map(|r| index.get(r.id.as_str()).copied()).collect();
        let n = rows.len();
        let excluded = members.len() - n;
        let cell = if n == 0 {
            Cell::NotApplicable {
                reason: NA_EMPTY.into(),
                n,
                excluded,
            }
        } else {
            match ppca_id_global(&pts.select(&rows)?) {
                Ok(r) => Cell::Value {
                    estimate: r.q_star as f64,
                    n,
                    excluded,
                },
                Err(Error::InsufficientSamples { .. }) => Cell::NotApplicable {
                    reason: NA_INSUFFICIENT.into(),
                    n,
                    excluded,
                },
                Err(e) => return Err(e),
            }
        };
        table.cells.insert(interval, cell);
    }
    Ok(table)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman ρ with average ranks for ties; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("spearman: length mismatch"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("spearman: need at least 2 pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman: non-finite value"));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub const MIN_TREND_CELLS: usize = 3;

/// Spearman ρ between interval index and estimate over the non-N/A cells.
pub fn trend_check(table: &IntervalTable) -> Result<f64> {
    let vals = table.values();
    if vals.len() < MIN_TREND_CELLS {
        return Err(Error::invalid(format!(
            "{} ({}): trend needs at least {MIN_TREND_CELLS} non-N/A cells, got {}",
            table.method,
            table.grouping,
            vals.len()
        )));
    }
    let x: Vec<f64> = vals.iter().map(|&(i, _)| i as f64).collect();
    let y: Vec<f64> = vals.iter().map(|&(_, v)| v).collect();
    spearman(&x, &y)
}

/// One row of the SNR-vs-iD scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sample_id: String,
    pub fr_class: FrClass,
    pub snr: Option<f64>,
    pub estimate: Option<f64>,
    /// `ok`, or the reason the point is not plotted.
    pub status: String,
}

impl ScatterRow {
    fn plotted(&self) -> Option<(f64, f64)> {
        match (self.status.as_str(), self.snr, self.estimate) {
            ("ok", Some(s), Some(e)) => Some((s, e)),
            _ => None,
        }
    }
}

/// Join estimates with catalog labels and SNR. Every estimate yields one
/// row; SNR comes from `snr` first, then the catalog.
pub fn join_scatter(outcomes: &[Outcome], catalog: &[CatalogEntry], snr: &HashMap<String, std::result::Result<f64, String>>) -> Vec<ScatterRow> {
    let cat: HashMap<&str, &CatalogEntry> = catalog.iter().map(|c| (c.sample_id.as_str(), c)).collect();
    outcomes
        .iter()
        .map(|o| {
            let id = crate::domain::outcome_id(o);
            let entry = cat.get(id);
            let fr_class = entry.map_or(FrClass::Unlabeled, |c| c.fr_class);
            let (snr_val, snr_reason) = match snr.get(id) {
                Some(Ok(v)) => (Some(*v), None),
                Some(Err(r)) => (None, Some(format!("snr excluded: {r}"))),
                None => match entry.and_then(|c| c.snr) {
                    Some(v) => (Some(v), None),
                    None => (None, Some("no snr".to_string())),
                },
            };
            let (estimate, est_reason) = match o {
                Ok(e) => (Some(e.value), None),
                Err(x) => (None, Some(format!("estimate excluded: {}", x.reason))),
            };
            let status = match (est_reason, snr_reason) {
                (Some(r), _) | (None, Some(r)) => r,
                (None, None) => match (snr_val, estimate) {
                    (Some(s), Some(e)) if s > 0.0 && e > 0.0 => "ok".to_string(),
                    _ => "non-positive value on log axis".to_string(),
                },
            };
            ScatterRow {
                sample_id: id.to_string(),
                fr_class,
                snr: snr_val,
                estimate,
                status,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn colour(c: FrClass) -> &'static str {
    match c {
        FrClass::FrI => "#1f77b4",
        FrClass::FrII => "#d62728",
        FrClass::Unlabeled => "#7f7f7f",
    }
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn log_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = (lo.log10().floor(), hi.log10().ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Log-log scatter, one `<circle>` per plotted row.
pub fn scatter_svg(rows: &[ScatterRow]) -> String {
    let pts: Vec<(FrClass, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.plotted().map(|(s, e)| (r.fr_class, s, e)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1) = if pts.is_empty() { (0.0, 1.0) } else { log_range(pts.iter().map(|p| p.1)) };
    let (y0, y1) = if pts.is_empty() { (0.0, 1.0) } else { log_range(pts.iter().map(|p| p.2)) };
    let px = |v: f64| MARGIN + (v.log10() - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |v: f64| H - MARGIN - (v.log10() - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}"/></g>"#,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11" text-anchor="middle">"#);
    for e in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}">1e{e}</text>"#, H - MARGIN + 16.0);
    }
    for e in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(e));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}">1e{e}</text>"#, MARGIN - 22.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">SNR (log)</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})">intrinsic dimension (log)</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</g>\n<g class=\"legend\" font-family=\"sans-serif\" font-size=\"11\">\n");
    for (i, c) in [FrClass::FrI, FrClass::FrII, FrClass::Unlabeled].into_iter().enumerate() {
        let y = 20.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="8" height="8" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - 110.0,
            y - 8.0,
            colour(c),
            W - 96.0,
            y,
            c
        );
    }
    s.push_str("</g>\n<g class=\"points\">\n");
    for (c, snr, est) in &pts {
        let _ = writeln!(
            s,
            r#"<circle class="{c}" cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
            px(*snr),
            py(*est),
            colour(*c)
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Grouped bars per interval, one series per table.
pub fn interval_bars_svg(tables: &[IntervalTable]) -> String {
    let max_interval = tables.iter().filter_map(|t| t.cells.keys().next_back().copied()).max().unwrap_or(1);
    let max_val = tables
        .iter()
        .flat_map(|t| t.values())
        .map(|(_, v)| v)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let series = tables.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / max_interval as f64;
    let bar = slot * 0.8 / series;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = H - MARGIN,
        r = W - MARGIN
    );
    let palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    for (k, t) in tables.iter().enumerate() {
        let fill = palette[k % palette.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="8" height="8" fill="{fill}"/><text x="{}" y="{}">{} ({})</text>"#,
            MARGIN + 10.0,
            12.0 + 14.0 * k as f64,
            MARGIN + 24.0,
            20.0 + 14.0 * k as f64,
            t.method,
            t.grouping
        );
        for (i, v) in t.values() {
            let h = v.max(0.0) / max_val * (H - 2.0 * MARGIN - 14.0 * series);
            let x = MARGIN + slot * (i - 1) as f64 + slot * 0.1 + bar * k as f64;
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{fill}"/>"#,
                H - MARGIN - h
            );
        }
    }
    for i in 1..=max_interval {
        let x = MARGIN + slot * (i as f64 - 0.5);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{i}</text>"#, H - MARGIN + 16.0);
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub struct PlotInputs<'a> {
    pub scatter: &'a [ScatterRow],
    pub tables: &'a [IntervalTable],
    /// `(sample_id, spectrum)` for the samples whose spectra are exported.
    pub spectra: &'a [(String, Vec<f64>)],
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `snr_vs_id.csv`/`.svg`, `interval_bars.csv`/`.svg` and
/// `score_spectra.csv` for whichever inputs are non-empty.
pub fn emit_plots(inputs: &PlotInputs<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if inputs.scatter.is_empty() && inputs.tables.is_empty() && inputs.spectra.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    if !inputs.scatter.is_empty() {
        let path = out_dir.join("snr_vs_id.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["sample_id", "fr_class", "snr", "estimate", "status"])
            .map_err(|e| Error::csv(&path, e))?;
        for r in inputs.scatter {
            w.write_record([
                r.sample_id.as_str(),
                r.fr_class.as_str(),
                &fmt_opt(r.snr),
                &fmt_opt(r.estimate),
                &r.status,
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
        let path = out_dir.join("snr_vs_id.svg");
        write_text(&path, &scatter_svg(inputs.scatter))?;
        written.push(path);
    }
    if !inputs.tables.is_empty() {
        let path = out_dir.join("interval_bars.csv");
        crate::io::write_interval_tables_csv(&path, inputs.tables)?;
        written.push(path);
        let path = out_dir.join("interval_bars.svg");
        write_text(&path, &interval_bars_svg(inputs.tables))?;
        written.push(path);
    }
    if !inputs.spectra.is_empty() {
        let path = out_dir.join("score_spectra.csv");
        crate::io::write_spectra_csv(&path, inputs.spectra.iter().map(|(id, v)| (id.as_str(), v.as_slice())))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion_id::{batch_estimate, estimate_id_at_point, DiffusionIdParams};
    use crate::domain::{Exclusion, IdEstimate};
    use crate::scoremodel::AnalyticGaussianScore;
    use crate::synth::{analytic_covariance, sample_manifold, ManifoldKind, ManifoldSpec};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn est(id: &str, method: Method, value: f64) -> Outcome {
        Ok(IdEstimate {
            sample_id: id.into(),
            method,
            value,
            k_hat: value.round() as usize,
            spectrum: vec![],
            gap_index: None,
            truncated: false,
            low_confidence: false,
            params: BTreeMap::new(),
        })
    }

    fn rec(id: &str, mean_interval: u32) -> EnergyRecord {
        EnergyRecord {
            id: id.into(),
            mean: 0.0,
            std: 0.0,
            mean_interval,
            std_interval: 1,
        }
    }

    #[test]
    fn fr_class_parsing() {
        assert_eq!("FRI".parse::<FrClass>().unwrap(), FrClass::FrI);
        assert_eq!("FR II".parse::<FrClass>().unwrap(), FrClass::FrII);
        assert_eq!("".parse::<FrClass>().unwrap(), FrClass::Unlabeled);
        assert!("FRIII".parse::<FrClass>().is_err());
    }

    #[test]
    fn snr_examples() {
        // 11x11, border ring alternating +-a with a = 2/1.4826 so noise = 2
        let a = 2.0 / MAD_SCALE;
        let mut px = vec![0.0; 121];
        let mut k = 0;
        for r in 0..11 {
            for c in 0..11 {
                if r.min(c).min(10 - r).min(10 - c) < 5 {
                    px[r * 11 + c] = if k % 2 == 0 { a } else { -a };
                    k += 1;
                }
            }
        }
        px[5 * 11 + 5] = 100.0;
        // ring has 120 pixels (even), 60 of each sign: median 0, MAD a
        let img = ImageGrid::new("p", 11, 11, px).unwrap();
        let snr = estimate_snr(&img, 5).unwrap().unwrap();
        assert!((snr - 50.0).abs() < 1e-9);

        let flat = ImageGrid::new("c", 8, 8, vec![3.0; 64]).unwrap();
        assert!(estimate_snr(&flat, 5).unwrap().is_err());
        assert!(estimate_snr(&flat, 0).is_err());
    }

    #[test]
    fn snr_gaussian_blob() {
        let mut rng = crate::domain::SeedPolicy::new(11).rng(0);
        let (n, amp, sigma) = (64usize, 40.0, 1.5);
        let px: Vec<f64> = (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f64 - 31.5, (i % n) as f64 - 31.5);
                let noise: f64 = rng.sample(StandardNormal);
                amp * (-(r * r + c * c) / (2.0 * 16.0)).exp() + sigma * noise
            })
            .collect();
        let img = ImageGrid::new("blob", n, n, px).unwrap();
        let snr = estimate_snr(&img, 5).unwrap().unwrap();
        let target = amp / sigma;
        assert!((snr - target).abs() < 0.2 * target, "snr {snr} vs {target}");
    }

    #[test]
    fn aggregate_examples() {
        let outs = vec![
            est("a", Method::Diffusion, 2.0),
            est("b", Method::Diffusion, 2.0),
            est("c", Method::Diffusion, 5.0),
            est("d", Method::Diffusion, 5.0),
        ];
        let recs = vec![rec("a", 1), rec("b", 1), rec("c", 2), rec("d", 2)];
        let t = aggregate_by_interval(&outs, &recs, Method::Diffusion, Grouping::Mean, "diffusion").unwrap();
        assert_eq!(t.values(), vec![(1, 2.0), (2, 5.0)]);

        let mle = vec![est("a", Method::Mle, 2.0), est("b", Method::Mle, 4.0)];
        let t = aggregate_by_interval(&mle, &recs[..2], Method::Mle, Grouping::Mean, "mle").unwrap();
        assert!((t.values()[0].1 - 8.0 / 3.0).abs() < 1e-12);

        // gap at interval 2 and an excluded sample
        let outs = vec![
            est("a", Method::Lpca, 1.0),
            Err(Exclusion {
                sample_id: "b".into(),
                reason: "x".into(),
            }),
            est("c", Method::Lpca, 3.0),
        ];
        let recs = vec![rec("a", 1), rec("b", 1), rec("c", 3)];
        let t = aggregate_by_interval(&outs, &recs, Method::Lpca, Grouping::Mean, "lpca").unwrap();
        assert_eq!(t.cells.len(), 3);
        assert!(matches!(&t.cells[&1], Cell::Value { n: 1, excluded: 1, .. }));
        assert!(matches!(&t.cells[&2], Cell::NotApplicable { reason, .. } if reason == NA_EMPTY));

        let stray = vec![est("z", Method::Lpca, 1.0)];
        assert!(aggregate_by_interval(&stray, &recs, Method::Lpca, Grouping::Mean, "lpca").is_err());
    }

    #[test]
    fn ppca_small_interval_is_na() {
        let spec = ManifoldSpec::new(ManifoldKind::SubspaceGaussian, 10, 2, 40).with_noise(0.05).with_seed(3);
        let set = sample_manifold(&spec).unwrap();
        let recs: Vec<EnergyRecord> = set
            .points
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| rec(id, if i < 3 { 1 } else { 2 }))
            .collect();
        let t = aggregate_ppca_by_interval(&set.points, &recs, Grouping::Mean, "ppca").unwrap();
        assert!(matches!(&t.cells[&1], Cell::NotApplicable { reason, n: 3, .. } if reason == NA_INSUFFICIENT));
        assert_eq!(t.cells[&2].estimate(), Some(2.0));
    }

    #[test]
    fn two_population_diffusion_trend() {
        let params = DiffusionIdParams::new(0.01, 48, 5);
        let mut outs = Vec::new();
        let mut recs = Vec::new();
        for (interval, k) in [(1u32, 2usize), (2, 6)] {
            let spec = ManifoldSpec::new(ManifoldKind::SubspaceGaussian, 12, k, 20)
                .with_scale_decay(1.0)
                .with_seed(k as u64);
            let set = sample_manifold(&spec).unwrap();
            let (mean, cov) = analytic_covariance(&spec).unwrap();
            let oracle = AnalyticGaussianScore::new(mean, cov).unwrap();
            for o in batch_estimate(&oracle, &set.points, &params, Some(2)).unwrap() {
                let mut e = o.unwrap();
                e.sample_id = format!("k{k}-{}", e.sample_id);
                recs.push(rec(&e.sample_id, interval));
                outs.push(Ok(e));
            }
        }
        let t = aggregate_by_interval(&outs, &recs, Method::Diffusion, Grouping::Mean, "diffusion").unwrap();
        assert_eq!(t.values(), vec![(1, 2.0), (2, 6.0)]);
        assert!(trend_check(&t).is_err());
    }

    /// Direct Pearson-on-ranks for tie-free data: 1 − 6Σd²/(n(n²−1)).
    fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64)
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn trend_examples() {
        let mut t = IntervalTable::new("MLE5", "mean");
        for (i, v) in [9.249, 9.927, 12.261, 13.437, 17.958, 21.655, 26.092, 40.034].iter().enumerate() {
            t.cells.insert(
                i as u32 + 1,
                Cell::Value {
                    estimate: *v,
                    n: 0,
                    excluded: 0,
                },
            );
        }
        assert_eq!(trend_check(&t).unwrap(), 1.0);
        for c in t.cells.values_mut() {
            if let Cell::Value { estimate, .. } = c {
                *estimate = -*estimate;
            }
        }
        assert_eq!(trend_check(&t).unwrap(), -1.0);
        for c in t.cells.values_mut() {
            *c = Cell::Value {
                estimate: 4.0,
                n: 0,
                excluded: 0,
            };
        }
        assert_eq!(trend_check(&t).unwrap(), 0.0);
        t.cells.retain(|&i, _| i < 3);
        assert!(trend_check(&t).is_err());
    }

    #[test]
    fn spearman_ties() {
        // ranks of y: 1, 2.5, 2.5, 4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]).unwrap();
        let expected = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn scatter_and_plots() {
        let outs = vec![est("a", Method::Mle, 3.0), est("b", Method::Mle, 7.0), est("c", Method::Mle, 5.0)];
        let catalog = vec![
            CatalogEntry {
                sample_id: "a".into(),
                fr_class: FrClass::FrI,
                consensus_level: None,
                angular_size: None,
                snr: Some(12.0),
            },
            CatalogEntry {
                sample_id: "b".into(),
                fr_class: "".parse().unwrap(),
                consensus_level: None,
                angular_size: None,
                snr: Some(40.0),
            },
        ];
        let rows = join_scatter(&outs, &catalog, &HashMap::new());
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].fr_class, FrClass::Unlabeled);
        assert_eq!(rows[2].status, "no snr");
        let svg = scatter_svg(&rows);
        assert_eq!(svg.matches("<circle").count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(
            &PlotInputs {
                scatter: &rows[..2],
                tables: &[],
                spectra: &[],
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(files.len(), 2);
        let csv = fs::read_to_string(dir.path().join("snr_vs_id.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(emit_plots(
            &PlotInputs {
                scatter: &[],
                tables: &[],
                spectra: &[]
            },
            dir.path()
        )
        .is_err());
    }

    #[test]
    fn spectrum_export_shows_drop() {
        let spec = ManifoldSpec::new(ManifoldKind::SubspaceGaussian, 3, 1, 5).with_scale_decay(1.0).with_seed(2);
        let set = sample_manifold(&spec).unwrap();
        let (mean, cov) = analytic_covariance(&spec).unwrap();
        let oracle = AnalyticGaussianScore::new(mean, cov).unwrap();
        // same seeded case as the single-point d=3 example
        let e = estimate_id_at_point(&oracle, set.points.row(0), &DiffusionIdParams::new(0.01, 12, 3)).unwrap();
        assert_eq!(e.gap_index, Some(2));
        let dir = tempfile::tempdir().unwrap();
        let spectra = vec![(e.sample_id.clone(), e.spectrum.clone())];
        emit_plots(
            &PlotInputs {
                scatter: &[],
                tables: &[],
                spectra: &spectra,
            },
            dir.path(),
        )
        .unwrap();
        let back = crate::io::read_spectra_csv(dir.path().join("score_spectra.csv")).unwrap();
        let s = &back[&e.sample_id];
        assert_eq!(s.len(), 3);
        assert!(s[1] > 100.0 * s[2]);
    }

    proptest! {
        #[test]
        fn spearman_matches_direct_formula(y in prop::collection::hash_set(-1000i32..1000, 3..12)) {
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
            let r = spearman(&x, &y).unwrap();
            prop_assert!((r - spearman_no_ties(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn snr_scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
            let mut rng = crate::domain::SeedPolicy::new(seed).rng(0);
            let px: Vec<f64> = (0..144).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut px = px;
            px[6 * 12 + 6] = 10.0;
            let a = estimate_snr(&ImageGrid::new("x", 12, 12, px.clone()).unwrap(), 5).unwrap().unwrap();
            let scaled: Vec<f64> = px.iter().map(|v| v * s).collect();
            let b = estimate_snr(&ImageGrid::new("x", 12, 12, scaled).unwrap(), 5).unwrap().unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
