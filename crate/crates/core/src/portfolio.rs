//! Position ledger, excess-return accounting with transaction costs,
//! beta hedging and the blended long-only / long-short allocation.
//!
//! Positions decided at the close of day `k-1` are held over day `k`; the
//! ledger row for day `k` carries their realized return and the cost of
//! the trades that established them.

use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::market_data::{fmt_exact, FactorPanel, TRADING_DAYS};
use crate::{Error, Result};

pub const BPS: f64 = 1e-4;
pub const DEFAULT_TC_BPS: f64 = 5.0;
/// Beta assumed for a held asset whose beta estimate is missing.
pub const FALLBACK_BETA: f64 = 1.0;
/// Longest look-back, in years, for the blend estimates.
pub const BLEND_MAX_YEARS: usize = 10;

pub const LEDGER_COLUMNS: [&str; 10] =
    ["date", "l", "s", "pi", "gross", "cost", "hedge_pnl", "net_excess", "beta_port", "P"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerConfig {
    pub tc_bps: f64,
    pub hedge: bool,
    /// Charge rf on the index leg so the hedge P&L stays an excess return.
    pub hedge_financing: bool,
    /// Cost per unit of index notional traded.
    pub hedge_tc_bps: f64,
    pub dt: f64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self { tc_bps: DEFAULT_TC_BPS, hedge: true, hedge_financing: true, hedge_tc_bps: 0.0, dt: 1.0 / TRADING_DAYS }
    }
}

impl LedgerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tc_bps.is_finite() && self.tc_bps >= 0.0) {
            problems.push(format!("tc_bps must be finite and >= 0, got {}", self.tc_bps));
        }
        if !(self.hedge_tc_bps.is_finite() && self.hedge_tc_bps >= 0.0) {
            problems.push(format!("hedge_tc_bps must be finite and >= 0, got {}", self.hedge_tc_bps));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            problems.push(format!("dt must be positive, got {}", self.dt));
        }
        if problems.is_empty() { Ok(()) } else { Err(Error::Config(problems)) }
    }
}

/// Legs of one period's stock return, each already divided by Π.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReturnComponents {
    pub long_leg: f64,
    pub short_leg: f64,
    pub short_rebate: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PeriodReturn {
    pub long_notional: f64,
    pub short_notional: f64,
    pub pi: f64,
    pub gross: f64,
    pub cost: f64,
    pub net_excess: f64,
    pub components: ReturnComponents,
}

fn long_short(positions: &[f64]) -> (f64, f64) {
    positions.iter().fold((0.0, 0.0), |(l, s), p| if *p > 0.0 { (l + p, s) } else { (l, s - p) })
}

/// Gross notional `max(l, s)` of a position vector.
pub fn gross_notional(positions: &[f64]) -> f64 {
    let (l, s) = long_short(positions);
    l.max(s)
}

/// One period's stock-leg return.
///
/// `positions` are the sizes held over the period (positive long), and
/// `changes` the trades that established them. Longs earn `R - rf·dt`,
/// shorts pay `R + rf·dt` and receive `rf·dt` on their proceeds. When
/// nothing is held but trades occurred, costs are divided by
/// `fallback_pi`, the gross notional the trades closed out.
pub fn period_return(
    positions: &[f64],
    changes: &[f64],
    asset_returns: &[f64],
    rf_annual: f64,
    dt: f64,
    tc_bps: f64,
    fallback_pi: f64,
) -> Result<PeriodReturn> {
    if positions.len() != asset_returns.len() || changes.len() != positions.len() {
        return Err(Error::DimensionMismatch {
            context: "period_return",
            expected: (positions.len(), 1),
            actual: (asset_returns.len(), changes.len()),
        });
    }
    let scalars = [rf_annual, dt, tc_bps, fallback_pi];
    if scalars.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("period_return: non-finite rate, step or cost"));
    }
    for (i, ((p, d), r)) in positions.iter().zip(changes).zip(asset_returns).enumerate() {
        if !p.is_finite() || !d.is_finite() || (*p != 0.0 && !r.is_finite()) {
            return Err(Error::invalid(format!("period_return: non-finite input for asset {i}")));
        }
    }
    let (l, s) = long_short(positions);
    let pi = l.max(s);
    let rf_step = rf_annual * dt;
    let traded: f64 = changes.iter().map(|d| d.abs()).sum();
    let tc = tc_bps * BPS;
    if pi == 0.0 {
        let cost = if traded > 0.0 {
            if fallback_pi <= 0.0 {
                return Err(Error::invalid("period_return: trades with no notional to charge them against"));
            }
            tc * traded / fallback_pi
        } else {
            0.0
        };
        return Ok(PeriodReturn { cost, net_excess: -cost, ..PeriodReturn::default() });
    }
    let (mut long_sum, mut short_sum) = (0.0, 0.0);
    for (p, r) in positions.iter().zip(asset_returns) {
        if *p > 0.0 {
            long_sum += p * (r - rf_step);
        } else if *p < 0.0 {
            short_sum += -p * (-r - rf_step);
        }
    }
    let components = ReturnComponents {
        long_leg: long_sum / pi,
        short_leg: short_sum / pi,
        short_rebate: rf_step * s / pi,
    };
    let gross = components.long_leg + components.short_leg + components.short_rebate;
    let cost = tc * traded / pi;
    Ok(PeriodReturn { long_notional: l, short_notional: s, pi, gross, cost, net_excess: gross - cost, components })
}

/// Weighted-average portfolio beta `β·positions / Π`; zero when flat.
pub fn portfolio_beta(positions: &[f64], betas: &[f64], pi: f64) -> Result<f64> {
    if positions.len() != betas.len() {
        return Err(Error::DimensionMismatch {
            context: "portfolio_beta",
            expected: (positions.len(), 1),
            actual: (betas.len(), 1),
        });
    }
    if pi == 0.0 {
        return Ok(0.0);
    }
    if !(pi.is_finite() && pi > 0.0) {
        return Err(Error::invalid(format!("portfolio_beta: gross notional {pi}")));
    }
    let mut dot = 0.0;
    for (p, b) in positions.iter().zip(betas) {
        if *p != 0.0 {
            if !b.is_finite() {
                return Err(Error::invalid("portfolio_beta: non-finite beta on a held asset"));
            }
            dot += p * b;
        }
    }
    Ok(dot / pi)
}

/// Index notional `P = -β_port·Π` that neutralizes the book's beta.
pub fn hedge_notional(beta_port: f64, pi: f64) -> f64 {
    let p = -beta_port * pi;
    if p == 0.0 { 0.0 } else { p }
}

/// Index-leg P&L per unit of gross notional.
pub fn hedge_pnl(p: f64, pi: f64, index_return: f64, rf_annual: f64, dt: f64, financed: bool) -> f64 {
    if pi == 0.0 || p == 0.0 {
        return 0.0;
    }
    let carry = if financed { rf_annual * dt } else { 0.0 };
    p * (index_return - carry) / pi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub date: NaiveDate,
    pub l: f64,
    pub s: f64,
    pub pi: f64,
    pub gross: f64,
    pub cost: f64,
    pub hedge_pnl: f64,
    pub net_excess: f64,
    pub beta_port: f64,
    pub p: f64,
    /// Sum of absolute position changes behind this row's holdings.
    pub traded: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    pub rows: Vec<LedgerRow>,
    /// Held positions that had no return on their holding day (earned 0).
    pub missing_returns: usize,
}

impl Ledger {
    pub fn net_excess(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.net_excess).collect()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.rows.iter().map(|r| r.date).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", LEDGER_COLUMNS.join(","))?;
        for r in &self.rows {
            let nums = [r.l, r.s, r.pi, r.gross, r.cost, r.hedge_pnl, r.net_excess, r.beta_port, r.p];
            let cells: Vec<String> = nums.iter().map(|v| fmt_exact(*v)).collect();
            writeln!(out, "{},{}", r.date, cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Sequential fold of a position path into the daily ledger.
///
/// Row `k` holds `positions[k-1]`, financed at day `k`'s rate and hedged
/// with betas known at day `k-1`; day 0 holds nothing.
pub fn build_ledger(panel: &FactorPanel, positions: &DMatrix<i8>, cfg: &LedgerConfig) -> Result<Ledger> {
    cfg.validate()?;
    let (t, n) = (panel.days(), panel.assets());
    if positions.shape() != (t, n) {
        return Err(Error::DimensionMismatch { context: "build_ledger positions", expected: (t, n), actual: positions.shape() });
    }
    let mut rows = Vec::with_capacity(t);
    let mut missing_returns = 0;
    let mut prev_pi = 0.0;
    let mut prev_p = 0.0;
    for k in 0..t {
        let date = panel.dates[k];
        if k == 0 {
            rows.push(LedgerRow {
                date, l: 0.0, s: 0.0, pi: 0.0, gross: 0.0, cost: 0.0, hedge_pnl: 0.0,
                net_excess: 0.0, beta_port: 0.0, p: 0.0, traded: 0.0,
            });
            continue;
        }
        let held: Vec<f64> = (0..n).map(|i| positions[(k - 1, i)] as f64).collect();
        let changes: Vec<f64> = (0..n)
            .map(|i| {
                let before = if k >= 2 { positions[(k - 2, i)] } else { 0 };
                (positions[(k - 1, i)] - before) as f64
            })
            .collect();
        let mut rets = Vec::with_capacity(n);
        let mut betas = Vec::with_capacity(n);
        for (i, h) in held.iter().enumerate() {
            let r = panel.total_returns[(k, i)];
            if *h != 0.0 && !r.is_finite() {
                missing_returns += 1;
                rets.push(0.0);
            } else {
                rets.push(if r.is_finite() { r } else { 0.0 });
            }
            let b = panel.betas[(k - 1, i)];
            betas.push(if b.is_finite() { b } else { FALLBACK_BETA });
        }
        let rf = panel.risk_free_annual[k];
        let pr = period_return(&held, &changes, &rets, rf, cfg.dt, cfg.tc_bps, prev_pi)?;
        let (beta_port, p, hedge, hedge_cost) = if cfg.hedge {
            let beta_port = portfolio_beta(&held, &betas, pr.pi)?;
            let p = hedge_notional(beta_port, pr.pi);
            let pnl = hedge_pnl(p, pr.pi, panel.index_total_returns[k], rf, cfg.dt, cfg.hedge_financing);
            let base = if pr.pi > 0.0 { pr.pi } else { prev_pi };
            let hc = if base > 0.0 { cfg.hedge_tc_bps * BPS * (p - prev_p).abs() / base } else { 0.0 };
            (beta_port, p, pnl, hc)
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        let cost = pr.cost + hedge_cost;
        rows.push(LedgerRow {
            date,
            l: pr.long_notional,
            s: pr.short_notional,
            pi: pr.pi,
            gross: pr.gross,
            cost,
            hedge_pnl: hedge,
            net_excess: pr.gross - cost + hedge,
            beta_port,
            p,
            traded: changes.iter().map(|d| d.abs()).sum(),
        });
        prev_pi = pr.pi;
        prev_p = p;
    }
    Ok(Ledger { rows, missing_returns })
}

/// Max-Sharpe split `w_i ∝ μ_i/σ_i²` between the long-only and long/short
/// streams; equal weights when a variance is not positive or the scores
/// sum to zero.
pub fn blended_weights(mu_l: f64, var_l: f64, mu_ls: f64, var_ls: f64) -> (f64, f64) {
    let inputs = [mu_l, var_l, mu_ls, var_ls];
    if inputs.iter().any(|v| !v.is_finite()) || var_l <= 0.0 || var_ls <= 0.0 {
        return (0.5, 0.5);
    }
    let (s_l, s_ls) = (mu_l / var_l, mu_ls / var_ls);
    let total = s_l + s_ls;
    if total == 0.0 || !total.is_finite() {
        return (0.5, 0.5);
    }
    (s_l / total, s_ls / total)
}

/// Annual blend decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendState {
    pub year: i32,
    /// Annualized estimates; absent in the first year.
    pub mu_l: Option<f64>,
    pub var_l: Option<f64>,
    pub mu_ls: Option<f64>,
    pub var_ls: Option<f64>,
    pub w_l: f64,
    pub w_ls: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendSeries {
    pub returns: Vec<f64>,
    pub states: Vec<BlendState>,
}

/// Annualized mean and variance of daily returns.
fn annualized_moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean * TRADING_DAYS, var * TRADING_DAYS)
}

/// Blended daily series with weights set at the start of each calendar
/// year from up to [`BLEND_MAX_YEARS`] prior years; the first year is
/// split equally.
pub fn blend_series(dates: &[NaiveDate], long_only: &[f64], long_short: &[f64]) -> Result<BlendSeries> {
    if dates.len() != long_only.len() || dates.len() != long_short.len() {
        return Err(Error::DimensionMismatch {
            context: "blend_series",
            expected: (dates.len(), 2),
            actual: (long_only.len(), long_short.len()),
        });
    }
    let mut returns = Vec::with_capacity(dates.len());
    let mut states = Vec::new();
    let mut year_starts: Vec<usize> = Vec::new();
    let mut w = (0.5, 0.5);
    for (k, date) in dates.iter().enumerate() {
        if k == 0 || date.year() != dates[k - 1].year() {
            year_starts.push(k);
            let y = year_starts.len() - 1;
            let state = if y == 0 {
                BlendState { year: date.year(), mu_l: None, var_l: None, mu_ls: None, var_ls: None, w_l: 0.5, w_ls: 0.5 }
            } else {
                let from = year_starts[y.saturating_sub(BLEND_MAX_YEARS)];
                let (mu_l, var_l) = annualized_moments(&long_only[from..k]);
                let (mu_ls, var_ls) = annualized_moments(&long_short[from..k]);
                let (w_l, w_ls) = blended_weights(mu_l, var_l, mu_ls, var_ls);
                let known = |v: f64| v.is_finite().then_some(v);
                BlendState { year: date.year(), mu_l: known(mu_l), var_l: known(var_l), mu_ls: known(mu_ls), var_ls: known(var_ls), w_l, w_ls }
            };
            w = (state.w_l, state.w_ls);
            states.push(state);
        }
        returns.push(w.0 * long_only[k] + w.1 * long_short[k]);
    }
    Ok(BlendSeries { returns, states })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_long_earns_asset_return() {
        let pr = period_return(&[1.0], &[0.0], &[0.013], 0.0, 1.0 / 252.0, 0.0, 0.0).unwrap();
        assert_eq!(pr.net_excess, 0.013);
    }

    #[test]
    fn long_short_identical_assets_cancel() {
        let pr = period_return(&[1.0, -1.0], &[0.0, 0.0], &[0.02, 0.02], 0.0, 1.0 / 252.0, 0.0, 0.0).unwrap();
        assert_eq!(pr.pi, 1.0);
        assert_eq!(pr.net_excess, 0.0);
    }

    #[test]
    fn short_leg_is_rf_neutral() {
        let pr = period_return(&[-1.0], &[0.0], &[0.0], 0.05, 1.0 / 252.0, 0.0, 0.0).unwrap();
        assert!(pr.net_excess.abs() < 1e-18);
    }

    #[test]
    fn trades_without_notional_are_an_error() {
        assert!(period_return(&[0.0], &[1.0], &[0.0], 0.0, 1.0, 5.0, 0.0).is_err());
        assert!(period_return(&[1.0], &[0.0], &[f64::NAN], 0.0, 1.0, 5.0, 0.0).is_err());
    }

    #[test]
    fn blend_fixtures() {
        assert_eq!(blended_weights(0.1, 0.04, 0.1, 0.04), (0.5, 0.5));
        assert_eq!(blended_weights(0.0, 0.04, 0.06, 0.01), (0.0, 1.0));
        assert_eq!(blended_weights(0.08, 0.04, 0.06, 0.01), (0.25, 0.75));
        assert_eq!(blended_weights(0.08, 0.0, 0.06, 0.01), (0.5, 0.5));
    }

    #[test]
    fn hedge_notional_signs() {
        assert_eq!(hedge_notional(1.0, 1.0), -1.0);
        assert_eq!(hedge_notional(0.0, 3.0), 0.0);
        assert_eq!(hedge_notional(-0.0, 3.0).to_bits(), 0.0f64.to_bits());
    }
}
