//! Mean-reversion signals on the gap between realized and filtered returns.
//!
//! For each asset the spread is the rolling `WS`-day sum of `r − r_filt`;
//! its z-score against the preceding `z_window` spreads drives a
//! flat/long/short state machine with forced closes on the last trading day
//! of each year and ahead of delistings.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{fmt_sig, FactorPanel};

/// Smallest standard deviation used when normalizing a spread.
pub const Z_STD_FLOOR: f64 = 1e-8;
/// Window of the reversal benchmark's rolling return sums.
pub const BENCHMARK_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub ws: usize,
    pub long_z: f64,
    pub short_z: f64,
    pub z_window: usize,
    pub exit_level: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            ws: 5,
            long_z: 1.5,
            short_z: 2.0,
            z_window: 60,
            exit_level: 0.0,
        }
    }
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.ws < 1 {
            p.push("ws must be at least 1".to_string());
        }
        if !(self.long_z > 0.0) || !(self.short_z > 0.0) {
            p.push(format!(
                "entry thresholds must be positive (long {}, short {})",
                self.long_z, self.short_z
            ));
        }
        if self.z_window < 5 {
            p.push(format!("z_window = {} < 5", self.z_window));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    Model,
    Benchmark,
}

/// One asset's position: side in {−1, 0, +1} plus entry details.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PositionState {
    pub side: i8,
    pub entry_day: Option<usize>,
    pub entry_z: Option<f64>,
}

impl PositionState {
    fn flat() -> Self {
        Self::default()
    }

    fn open(side: i8, day: usize, z: f64) -> Self {
        Self {
            side,
            entry_day: Some(day),
            entry_z: Some(z),
        }
    }
}

/// Rolling `ws`-day sum of `returns − filtered`; `NaN` until `ws` finite
/// pairs are available.
pub fn spread(returns: &[f64], filtered: &[f64], ws: usize) -> Vec<f64> {
    let gap: Vec<f64> = returns.iter().zip(filtered).map(|(r, f)| r - f).collect();
    rolling_sum(&gap, ws)
}

fn rolling_sum(x: &[f64], window: usize) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            if k + 1 < window {
                return f64::NAN;
            }
            let w = &x[k + 1 - window..=k];
            if w.iter().all(|v| v.is_finite()) {
                w.iter().sum()
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Spread standardized by the mean and sample standard deviation of the
/// `z_window` spreads before it; `NaN` until those exist.
pub fn zscore(spread: &[f64], z_window: usize) -> Vec<f64> {
    (0..spread.len())
        .map(|k| {
            if k < z_window || !spread[k].is_finite() {
                return f64::NAN;
            }
            let w = &spread[k - z_window..k];
            if w.iter().any(|v| !v.is_finite()) {
                return f64::NAN;
            }
            let n = z_window as f64;
            let mean = w[0] + w.iter().map(|v| v - w[0]).sum::<f64>() / n;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (spread[k] - mean) / var.sqrt().max(Z_STD_FLOOR)
        })
        .collect()
}

/// Advances one asset's position by a day.
///
/// Rules, first match wins: close ahead of a delisting; close on the last
/// trading day of the year; hold when `z` is undefined; from flat, go long
/// at `z ≤ −L` or short at `z ≥ S`; close a long at `z ≥ exit`, a short at
/// `z ≤ −exit`. A close never re-enters on the same day.
pub fn step_position(
    state: PositionState,
    z: f64,
    is_last_trading_day_of_year: bool,
    delists_next: bool,
    params: &StrategyParams,
    day: usize,
) -> PositionState {
    if delists_next || is_last_trading_day_of_year {
        return PositionState::flat();
    }
    if !z.is_finite() {
        return state;
    }
    match state.side {
        0 if z <= -params.long_z => PositionState::open(1, day, z),
        0 if z >= params.short_z => PositionState::open(-1, day, z),
        1 if z >= params.exit_level => PositionState::flat(),
        -1 if z <= -params.exit_level => PositionState::flat(),
        _ => state,
    }
}

/// Positions for one asset from its z path; entries also require
/// `tradable[k]`.
pub fn positions_from_z(
    z: &[f64],
    year_end: &[bool],
    delists_next: &[bool],
    tradable: &[bool],
    params: &StrategyParams,
) -> Vec<i8> {
    let mut state = PositionState::flat();
    (0..z.len())
        .map(|k| {
            let zk = if tradable[k] || state.side != 0 { z[k] } else { f64::NAN };
            state = step_position(state, zk, year_end[k], delists_next[k], params, k);
            state.side
        })
        .collect()
}

/// Rolling `window`-day return sums minus their cross-sectional mean over
/// the assets flagged valid (and with a defined sum) that day.
pub fn benchmark_spread(total_returns: &DMatrix<f64>, valid: &DMatrix<bool>, window: usize) -> DMatrix<f64> {
    let (t, n) = total_returns.shape();
    let mut sums = DMatrix::from_element(t, n, f64::NAN);
    for i in 0..n {
        let col: Vec<f64> = total_returns.column(i).iter().copied().collect();
        for (k, v) in rolling_sum(&col, window).into_iter().enumerate() {
            if valid[(k, i)] {
                sums[(k, i)] = v;
            }
        }
    }
    for k in 0..t {
        let row: Vec<f64> = sums.row(k).iter().copied().filter(|v| v.is_finite()).collect();
        if row.is_empty() {
            continue;
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        for i in 0..n {
            sums[(k, i)] -= mean;
        }
    }
    sums
}

#[derive(Debug, Clone)]
pub struct Signals {
    pub spread: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub positions: DMatrix<i8>,
}

impl Signals {
    /// Rows where a spread exists or a position is held.
    pub fn write_csv(&self, panel: &FactorPanel, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "date,asset_id,spread,z,position")?;
        for (k, date) in panel.dates.iter().enumerate() {
            for (i, id) in panel.asset_ids.iter().enumerate() {
                let (s, p) = (self.spread[(k, i)], self.positions[(k, i)]);
                if s.is_finite() || p != 0 {
                    writeln!(out, "{date},{id},{},{},{p}", fmt_sig(s), fmt_sig(self.z[(k, i)]))?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Full-panel signal sweep.
///
/// Model mode reads `r_filt` (required) and forms spreads from excess
/// returns; benchmark mode uses only total returns. Entries require the
/// asset to be in the universe that day.
pub fn run_signals(
    panel: &FactorPanel,
    r_filt: Option<&DMatrix<f64>>,
    params: &StrategyParams,
    mode: SignalMode,
) -> Result<Signals> {
    params.validate()?;
    let (t, n) = (panel.days(), panel.assets());
    let spread_m = match mode {
        SignalMode::Model => {
            let rf = r_filt.ok_or_else(|| Error::invalid("model signals need filtered returns"))?;
            if rf.shape() != (t, n) {
                return Err(Error::DimensionMismatch {
                    context: "run_signals filtered returns",
                    expected: (t, n),
                    actual: rf.shape(),
                });
            }
            let cols: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let r: Vec<f64> = panel.excess_returns.column(i).iter().copied().collect();
                    let f: Vec<f64> = rf.column(i).iter().copied().collect();
                    spread(&r, &f, params.ws)
                })
                .collect();
            DMatrix::from_fn(t, n, |k, i| cols[i][k])
        }
        SignalMode::Benchmark => {
            let valid = DMatrix::from_fn(t, n, |k, i| panel.in_universe[(k, i)]);
            benchmark_spread(&panel.total_returns, &valid, BENCHMARK_WINDOW)
        }
    };
    let cols: Vec<(Vec<f64>, Vec<i8>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s: Vec<f64> = spread_m.column(i).iter().copied().collect();
            let z = zscore(&s, params.z_window);
            let delist: Vec<bool> = panel.delists_next.column(i).iter().copied().collect();
            let tradable: Vec<bool> = panel.in_universe.column(i).iter().copied().collect();
            let pos = positions_from_z(&z, &panel.year_end, &delist, &tradable, params);
            (z, pos)
        })
        .collect();
    Ok(Signals {
        z: DMatrix::from_fn(t, n, |k, i| cols[i].0[k]),
        positions: DMatrix::from_fn(t, n, |k, i| cols[i].1[k]),
        spread: spread_m,
    })
}
