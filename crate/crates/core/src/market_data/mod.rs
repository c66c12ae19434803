//! Panel ingestion, feature construction, universe selection and synthetic
//! market generation.
//!
//! # CSV schema (version 1)
//!
//! Assets file, one row per asset-day:
//!
//! ```text
//! date,asset_id,close,shares,total_return,eps,listed
//! 2001-01-02,AAA,10.5,1000000,0.0031,0.42,1
//! ```
//!
//! `eps` may be empty. `listed` is `1`/`0` (or `true`/`false`). Dates are ISO
//! `YYYY-MM-DD`; every asset date must appear in the index file.
//!
//! Index file, one row per trading day, dates strictly increasing:
//!
//! ```text
//! date,index_total_return,risk_free_annual
//! 2001-01-02,0.0012,0.051
//! ```

mod features;
mod panel;
mod synth;

pub use features::{
    compute_beta_vol, compute_exposures, compute_momentum, compute_size, rolling_beta_vol,
    select_universe, standardize_cross_section, ExposureSet, FeatureParams, BETA_WINDOW,
    MOMENTUM_HISTORY, MOMENTUM_LOOKBACK, MOMENTUM_SKIP,
};
pub use panel::{FactorPanel, PanelOptions};
pub use synth::{
    synth_generate, ExposureProcess, FactorProcess, MarketSpec, MispricingSpec, SynthConfig,
    SynthOutput,
};

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Trading days per year; also the day-count for `dt`.
pub const TRADING_DAYS: f64 = 252.0;

pub const ASSET_COLUMNS: [&str; 7] = [
    "date",
    "asset_id",
    "close",
    "shares",
    "total_return",
    "eps",
    "listed",
];
pub const INDEX_COLUMNS: [&str; 3] = ["date", "index_total_return", "risk_free_annual"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchemaVersion {
    #[default]
    V1,
}

/// Daily asset and index data aligned on the index calendar.
///
/// Asset fields are `T × n` matrices (days by assets, assets sorted by id);
/// missing values are `NaN` and `present` marks which asset-days had a row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub dates: Vec<NaiveDate>,
    pub asset_ids: Vec<String>,
    pub close: DMatrix<f64>,
    pub shares: DMatrix<f64>,
    pub total_return: DMatrix<f64>,
    pub eps: DMatrix<f64>,
    pub listed: DMatrix<bool>,
    pub present: DMatrix<bool>,
    pub index_total_return: Vec<f64>,
    pub risk_free_annual: Vec<f64>,
}

impl RawPanel {
    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> usize {
        self.asset_ids.len()
    }

    /// Number of asset-day rows.
    pub fn row_count(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    pub fn is_listed(&self, day: usize, asset: usize) -> bool {
        self.present[(day, asset)] && self.listed[(day, asset)]
    }

    /// First `days` days of the panel.
    pub fn truncate(&self, days: usize) -> RawPanel {
        let t = days.min(self.days());
        let n = self.assets();
        RawPanel {
            dates: self.dates[..t].to_vec(),
            asset_ids: self.asset_ids.clone(),
            close: self.close.rows(0, t).into_owned(),
            shares: self.shares.rows(0, t).into_owned(),
            total_return: self.total_return.rows(0, t).into_owned(),
            eps: self.eps.rows(0, t).into_owned(),
            listed: DMatrix::from_fn(t, n, |i, j| self.listed[(i, j)]),
            present: DMatrix::from_fn(t, n, |i, j| self.present[(i, j)]),
            index_total_return: self.index_total_return[..t].to_vec(),
            risk_free_annual: self.risk_free_annual[..t].to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        for w in self.dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!("dates not strictly increasing at {}", w[1])));
            }
        }
        for (k, v) in self.index_total_return.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite index return on {}", self.dates[k])));
            }
        }
        Ok(())
    }
}

fn header_index(headers: &csv::StringRecord, required: &[&str], path: &str) -> Result<Vec<usize>> {
    required
        .iter()
        .map(|col| {
            headers
                .iter()
                .position(|h| h.trim() == *col)
                .ok_or_else(|| Error::MissingColumn {
                    path: path.to_string(),
                    column: col.to_string(),
                })
        })
        .collect()
}

fn parse_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_f64(raw: &str, what: &str, path: &str, line: u64) -> Result<f64> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {what} `{raw}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite {what}")));
    }
    Ok(v)
}

fn parse_opt_f64(raw: &str, what: &str, path: &str, line: u64) -> Result<f64> {
    if raw.trim().is_empty() {
        Ok(f64::NAN)
    } else {
        parse_f64(raw, what, path, line)
    }
}

fn parse_date(raw: &str, path: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
        .map_err(|_| parse_err(path, line, format!("cannot parse date `{raw}`")))
}

fn parse_bool(raw: &str, path: &str, line: u64) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(parse_err(path, line, format!("cannot parse listed flag `{other}`"))),
    }
}

struct AssetRow {
    close: f64,
    shares: f64,
    total_return: f64,
    eps: f64,
    listed: bool,
}

pub fn load_panel(assets_path: &Path, index_path: &Path, version: SchemaVersion) -> Result<RawPanel> {
    let SchemaVersion::V1 = version;
    let ipath = index_path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(index_path)?;
    let cols = header_index(rdr.headers()?, &INDEX_COLUMNS, &ipath)?;
    let mut dates = Vec::new();
    let mut index_total_return = Vec::new();
    let mut risk_free_annual = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let date = parse_date(&rec[cols[0]], &ipath, line)?;
        if let Some(prev) = dates.last() {
            if date <= *prev {
                return Err(parse_err(&ipath, line, format!("date {date} not after {prev}")));
            }
        }
        dates.push(date);
        index_total_return.push(parse_f64(&rec[cols[1]], "index_total_return", &ipath, line)?);
        risk_free_annual.push(parse_f64(&rec[cols[2]], "risk_free_annual", &ipath, line)?);
    }
    let day_of: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let apath = assets_path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(assets_path)?;
    let cols = header_index(rdr.headers()?, &ASSET_COLUMNS, &apath)?;
    let mut rows: BTreeMap<String, BTreeMap<usize, AssetRow>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let date = parse_date(&rec[cols[0]], &apath, line)?;
        let day = *day_of
            .get(&date)
            .ok_or_else(|| parse_err(&apath, line, format!("date {date} not in index calendar")))?;
        let asset = rec[cols[1]].trim().to_string();
        if asset.is_empty() {
            return Err(parse_err(&apath, line, "empty asset_id"));
        }
        let close = parse_opt_f64(&rec[cols[2]], "close", &apath, line)?;
        if close.is_finite() && close <= 0.0 {
            return Err(parse_err(&apath, line, "close must be positive"));
        }
        let row = AssetRow {
            close,
            shares: parse_opt_f64(&rec[cols[3]], "shares", &apath, line)?,
            total_return: parse_f64(&rec[cols[4]], "total_return", &apath, line)?,
            eps: parse_opt_f64(&rec[cols[5]], "eps", &apath, line)?,
            listed: parse_bool(&rec[cols[6]], &apath, line)?,
        };
        let entry = rows.entry(asset.clone()).or_default();
        if entry.insert(day, row).is_some() {
            return Err(Error::DuplicateKey {
                asset,
                date: date.to_string(),
            });
        }
    }

    let t = dates.len();
    let n = rows.len();
    let mut panel = RawPanel {
        dates,
        asset_ids: rows.keys().cloned().collect(),
        close: DMatrix::from_element(t, n, f64::NAN),
        shares: DMatrix::from_element(t, n, f64::NAN),
        total_return: DMatrix::from_element(t, n, f64::NAN),
        eps: DMatrix::from_element(t, n, f64::NAN),
        listed: DMatrix::from_element(t, n, false),
        present: DMatrix::from_element(t, n, false),
        index_total_return,
        risk_free_annual,
    };
    for (j, days) in rows.values().enumerate() {
        for (&k, r) in days {
            panel.close[(k, j)] = r.close;
            panel.shares[(k, j)] = r.shares;
            panel.total_return[(k, j)] = r.total_return;
            panel.eps[(k, j)] = r.eps;
            panel.listed[(k, j)] = r.listed;
            panel.present[(k, j)] = true;
        }
    }
    panel.validate()?;
    Ok(panel)
}

/// Float text at 12 significant digits, shortest form; empty for NaN.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return String::new();
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    format!("{rounded}")
}

/// Shortest float text that parses back to the same bits; empty for NaN.
pub fn fmt_exact(v: f64) -> String {
    if v.is_nan() { String::new() } else { format!("{v}") }
}

/// Writes the two schema files; rows ordered by date, then asset id.
pub fn write_panel(panel: &RawPanel, assets_path: &Path, index_path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(assets_path)?);
    writeln!(out, "{}", ASSET_COLUMNS.join(","))?;
    for (k, date) in panel.dates.iter().enumerate() {
        for (j, id) in panel.asset_ids.iter().enumerate() {
            if !panel.present[(k, j)] {
                continue;
            }
            writeln!(
                out,
                "{date},{id},{},{},{},{},{}",
                fmt_sig(panel.close[(k, j)]),
                fmt_sig(panel.shares[(k, j)]),
                fmt_sig(panel.total_return[(k, j)]),
                fmt_sig(panel.eps[(k, j)]),
                u8::from(panel.listed[(k, j)])
            )?;
        }
    }
    out.flush()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(index_path)?);
    writeln!(out, "{}", INDEX_COLUMNS.join(","))?;
    for (k, date) in panel.dates.iter().enumerate() {
        writeln!(
            out,
            "{date},{},{}",
            fmt_sig(panel.index_total_return[k]),
            fmt_sig(panel.risk_free_annual[k])
        )?;
    }
    out.flush()?;
    Ok(())
}
