//! Performance statistics: annual Sharpe ratios, rolling drawdowns,
//! percentile tables and per-run activity summaries.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::market_data::{fmt_exact, fmt_sig, TRADING_DAYS};
use crate::{Error, Result};

pub const SHARPE_STD_FLOOR: f64 = 1e-12;
/// Years with fewer observations are flagged in reports.
pub const MIN_YEAR_OBS: usize = 60;
pub const DRAWDOWN_WINDOW: usize = 252;

/// `mean/std·√252` with the sample standard deviation.
///
/// A series with std below the floor has no defined ratio (`None`)
/// unless its mean is exactly zero, which scores 0.
pub fn sharpe_annual(daily: &[f64]) -> Option<f64> {
    if daily.len() < 2 {
        return None;
    }
    let n = daily.len() as f64;
    let mean = daily.iter().sum::<f64>() / n;
    let var = daily.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd >= SHARPE_STD_FLOOR) {
        return if mean == 0.0 { Some(0.0) } else { None };
    }
    Some(mean / sd * TRADING_DAYS.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearSharpe {
    pub year: i32,
    pub sharpe: Option<f64>,
    pub observations: usize,
    pub flagged: bool,
}

/// Index ranges of consecutive calendar years in `dates`.
pub fn year_spans(dates: &[NaiveDate]) -> Vec<(i32, std::ops::Range<usize>)> {
    let mut spans: Vec<(i32, std::ops::Range<usize>)> = Vec::new();
    for (k, d) in dates.iter().enumerate() {
        match spans.last_mut() {
            Some((y, r)) if *y == d.year() => r.end = k + 1,
            _ => spans.push((d.year(), k..k + 1)),
        }
    }
    spans
}

pub fn annual_sharpes(dates: &[NaiveDate], daily: &[f64]) -> Vec<YearSharpe> {
    year_spans(dates)
        .into_iter()
        .map(|(year, r)| YearSharpe {
            year,
            sharpe: sharpe_annual(&daily[r.clone()]),
            observations: r.len(),
            flagged: r.len() < MIN_YEAR_OBS,
        })
        .collect()
}

/// Mean of the defined annual ratios.
pub fn mean_annual_sharpe(years: &[YearSharpe]) -> Option<f64> {
    let vals: Vec<f64> = years.iter().filter_map(|y| y.sharpe).collect();
    if vals.is_empty() { None } else { Some(vals.iter().sum::<f64>() / vals.len() as f64) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drawdown {
    pub equity: Vec<f64>,
    pub drawdown: Vec<f64>,
    pub max_drawdown: f64,
}

/// Drawdown of the compounded equity curve against its trailing
/// `window`-observation peak. The curve starts at 1.0 before the first
/// return, and that starting level counts toward the early windows.
pub fn rolling_drawdown(returns: &[f64], window: usize) -> Result<Drawdown> {
    if window == 0 {
        return Err(Error::invalid("rolling_drawdown: window must be positive"));
    }
    let mut levels = Vec::with_capacity(returns.len() + 1);
    levels.push(1.0);
    for r in returns {
        if !r.is_finite() {
            return Err(Error::invalid("rolling_drawdown: non-finite return"));
        }
        levels.push(levels.last().unwrap() * (1.0 + r));
    }
    // monotone deque of indices into `levels` with decreasing values
    let mut peaks: VecDeque<usize> = VecDeque::new();
    let mut drawdown = Vec::with_capacity(returns.len());
    let mut max_drawdown = 0.0f64;
    for (j, level) in levels.iter().enumerate() {
        while peaks.back().is_some_and(|&b| levels[b] <= *level) {
            peaks.pop_back();
        }
        peaks.push_back(j);
        if j == 0 {
            continue;
        }
        let oldest = j.saturating_sub(window);
        while peaks.front().is_some_and(|&f| f < oldest) {
            peaks.pop_front();
        }
        let dd = level / levels[*peaks.front().unwrap()] - 1.0;
        max_drawdown = max_drawdown.min(dd);
        drawdown.push(dd);
    }
    Ok(Drawdown { equity: levels[1..].to_vec(), drawdown, max_drawdown })
}

/// Linear-interpolation percentile (`q` in [0, 1]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub mode: String,
    pub tc_bps: f64,
    pub ws: usize,
    pub count: usize,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

/// Grid cell of a percentile table: `(mode, tc_bps, ws)`.
pub type GridKey = (String, f64, usize);

/// Quartiles of the annual Sharpe ratios of each `(mode, tc, ws)` group;
/// entries sharing a key are pooled and rows keep first-appearance order.
pub fn percentile_table(groups: &[(GridKey, Vec<f64>)]) -> Vec<PercentileRow> {
    let mut pooled: Vec<(&GridKey, Vec<f64>)> = Vec::new();
    for (key, vals) in groups {
        let finite = vals.iter().copied().filter(|v| v.is_finite());
        match pooled.iter_mut().find(|(k, _)| *k == key) {
            Some((_, acc)) => acc.extend(finite),
            None => pooled.push((key, finite.collect())),
        }
    }
    pooled
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|((mode, tc, ws), v)| PercentileRow {
            mode: mode.clone(),
            tc_bps: *tc,
            ws: *ws,
            count: v.len(),
            p25: percentile(&v, 0.25).unwrap(),
            p50: percentile(&v, 0.50).unwrap(),
            p75: percentile(&v, 0.75).unwrap(),
        })
        .collect()
}

pub fn write_percentile_csv(rows: &[PercentileRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "mode,tc_bps,ws,count,p25,p50,p75")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{},{}", r.mode, fmt_sig(r.tc_bps), r.ws, r.count, fmt_sig(r.p25), fmt_sig(r.p50), fmt_sig(r.p75))?;
    }
    out.flush()?;
    Ok(())
}

/// Right-aligned text rendering, two decimals for the quartiles.
pub fn render_percentile_text(rows: &[PercentileRow]) -> String {
    let header = ["mode", "tc_bps", "ws", "n", "p25", "p50", "p75"];
    let cells: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.mode.clone(),
                fmt_sig(r.tc_bps),
                r.ws.to_string(),
                r.count.to_string(),
                format!("{:.2}", r.p25),
                format!("{:.2}", r.p50),
                format!("{:.2}", r.p75),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut text = String::new();
    let line = |text: &mut String, row: &[&str]| {
        let parts: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(text, "{}", parts.join("  "));
    };
    line(&mut text, &header);
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut text, &refs);
    }
    text
}

/// One day of trading activity behind a ledger row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityRow {
    pub date: NaiveDate,
    /// Sum of absolute position changes.
    pub traded: f64,
    /// Positions opened.
    pub entries: usize,
    /// Assets held.
    pub held: usize,
    /// Universe members that day.
    pub universe: usize,
    /// `traded` over the notional it is charged against.
    pub turnover: f64,
}

impl ActivityRow {
    pub fn invested_fraction(&self) -> f64 {
        if self.universe == 0 { 0.0 } else { self.held as f64 / self.universe as f64 }
    }
}

pub const ACTIVITY_COLUMNS: [&str; 7] = ["date", "traded", "entries", "held", "universe", "turnover", "invested_fraction"];

pub fn write_activity_csv(rows: &[ActivityRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", ACTIVITY_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.date,
            fmt_exact(r.traded),
            r.entries,
            r.held,
            r.universe,
            fmt_exact(r.turnover),
            fmt_exact(r.invested_fraction())
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodStats {
    /// Calendar year, or `None` for the whole sample.
    pub year: Option<i32>,
    pub observations: usize,
    pub flagged: bool,
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub trades: usize,
    pub turnover: f64,
    pub invested_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSummary {
    pub annual: Vec<PeriodStats>,
    pub aggregate: PeriodStats,
    pub mean_annual_sharpe: Option<f64>,
    pub pooled_sharpe: Option<f64>,
}

/// Per-year and whole-sample statistics of a daily net excess series.
///
/// Drawdowns come from one rolling curve over the whole sample; a year's
/// figure is the worst point that falls inside it.
pub fn perf_summary(dates: &[NaiveDate], net: &[f64], activity: &[ActivityRow]) -> Result<PerfSummary> {
    if dates.len() != net.len() || activity.len() != net.len() {
        return Err(Error::DimensionMismatch {
            context: "perf_summary",
            expected: (dates.len(), 1),
            actual: (net.len(), activity.len()),
        });
    }
    let dd = rolling_drawdown(net, DRAWDOWN_WINDOW)?;
    let stats = |year: Option<i32>, r: std::ops::Range<usize>| {
        let acts = &activity[r.clone()];
        let invested = if acts.is_empty() {
            0.0
        } else {
            100.0 * acts.iter().map(ActivityRow::invested_fraction).sum::<f64>() / acts.len() as f64
        };
        PeriodStats {
            year,
            observations: r.len(),
            flagged: r.len() < MIN_YEAR_OBS,
            sharpe: sharpe_annual(&net[r.clone()]),
            max_drawdown: dd.drawdown[r.clone()].iter().copied().fold(0.0, f64::min),
            trades: acts.iter().map(|a| a.entries).sum(),
            turnover: acts.iter().map(|a| a.turnover).sum(),
            invested_pct: invested,
        }
    };
    let annual: Vec<PeriodStats> = year_spans(dates).into_iter().map(|(y, r)| stats(Some(y), r)).collect();
    let aggregate = stats(None, 0..net.len());
    let sharpes: Vec<f64> = annual.iter().filter_map(|s| s.sharpe).collect();
    let mean_annual_sharpe = if sharpes.is_empty() { None } else { Some(sharpes.iter().sum::<f64>() / sharpes.len() as f64) };
    Ok(PerfSummary { pooled_sharpe: aggregate.sharpe, annual, aggregate, mean_annual_sharpe })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharpe_degenerate_cases() {
        assert_eq!(sharpe_annual(&[0.0; 30]), Some(0.0));
        assert_eq!(sharpe_annual(&[0.001; 30]), None);
        assert_eq!(sharpe_annual(&[0.01, -0.01, 0.01, -0.01]), Some(0.0));
        assert_eq!(sharpe_annual(&[0.5]), None);
    }

    #[test]
    fn drawdown_single_drop() {
        let mut r = vec![0.0; 20];
        r[7] = -0.1;
        let d = rolling_drawdown(&r, 252).unwrap();
        assert!((d.max_drawdown + 0.1).abs() < 1e-15);
        assert!(rolling_drawdown(&[0.01, 0.0, 0.02], 252).unwrap().drawdown.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_day_loss_counts_against_start() {
        let d = rolling_drawdown(&[-0.1, 0.0], 252).unwrap();
        assert!((d.drawdown[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn percentile_definitions() {
        let v = [4.0, 0.0, 2.0, 1.0, 3.0];
        assert_eq!(percentile(&v, 0.25), Some(1.0));
        assert_eq!(percentile(&v, 0.5), Some(2.0));
        assert_eq!(percentile(&v, 0.75), Some(3.0));
        assert_eq!(percentile(&[7.5], 0.25), Some(7.5));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
