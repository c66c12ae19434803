use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{compute_exposures, select_universe, standardize_cross_section, ExposureSet, FeatureParams};
use super::{RawPanel, TRADING_DAYS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelOptions {
    /// Priced characteristics, in column order; `None` takes every
    /// characteristic in the exposure set.
    pub factors: Option<Vec<String>>,
    pub universe_size: usize,
    pub standardize: bool,
    /// Adds a constant column named `intercept`.
    pub intercept: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            factors: None,
            universe_size: 2000,
            standardize: true,
            intercept: false,
        }
    }
}

/// Engine-ready view of a market: per-day exposure matrices aligned with
/// returns, universe membership, hedge betas and calendar flags.
///
/// Exposure row `i` of day `k` is `NaN` when asset `i` is outside the
/// universe or lacks any characteristic on day `k`.
#[derive(Debug, Clone)]
pub struct FactorPanel {
    pub dates: Vec<NaiveDate>,
    pub asset_ids: Vec<String>,
    pub factor_names: Vec<String>,
    pub exposures: Vec<DMatrix<f64>>,
    pub total_returns: DMatrix<f64>,
    pub excess_returns: DMatrix<f64>,
    pub betas: DMatrix<f64>,
    pub in_universe: DMatrix<bool>,
    /// Listed today with no listing tomorrow.
    pub delists_next: DMatrix<bool>,
    /// Last trading day of its calendar year.
    pub year_end: Vec<bool>,
    pub index_total_returns: Vec<f64>,
    pub index_excess_returns: Vec<f64>,
    pub risk_free_annual: Vec<f64>,
}

fn next_weekday(d: NaiveDate) -> NaiveDate {
    let mut n = d.succ_opt().expect("date in range");
    while matches!(n.weekday(), Weekday::Sat | Weekday::Sun) {
        n = n.succ_opt().expect("date in range");
    }
    n
}

impl FactorPanel {
    /// Builds exposures from raw prices, shares and earnings.
    pub fn from_raw(raw: &RawPanel, params: &FeatureParams, opts: &PanelOptions) -> Result<Self> {
        let exposures = compute_exposures(raw, params)?;
        Self::from_parts(raw, &exposures, opts)
    }

    /// Uses precomputed characteristics (e.g. from the synthetic generator).
    pub fn from_parts(raw: &RawPanel, set: &ExposureSet, opts: &PanelOptions) -> Result<Self> {
        let (t, n) = (raw.days(), raw.assets());
        for v in set.values.iter().chain(std::iter::once(&set.beta)) {
            if v.shape() != (t, n) {
                return Err(Error::DimensionMismatch {
                    context: "exposure set",
                    expected: (t, n),
                    actual: v.shape(),
                });
            }
        }
        let names: Vec<String> = match &opts.factors {
            Some(f) => f.clone(),
            None => set.names.clone(),
        };
        let mut columns = Vec::with_capacity(names.len());
        for name in &names {
            let col = set
                .get(name)
                .ok_or_else(|| Error::invalid(format!("unknown characteristic `{name}`")))?;
            columns.push((name.as_str(), col));
        }
        let m = names.len() + usize::from(opts.intercept);
        if m == 0 {
            return Err(Error::invalid("no priced characteristics selected"));
        }

        let mut in_universe = DMatrix::from_element(t, n, false);
        let mut exposures = Vec::with_capacity(t);
        for k in 0..t {
            let members = select_universe(raw, opts.universe_size, k);
            for &j in &members {
                in_universe[(k, j)] = true;
            }
            let mut x = DMatrix::from_element(n, m, f64::NAN);
            for (c, (name, col)) in columns.iter().enumerate() {
                let mut cross: Vec<f64> = members.iter().map(|&j| col[(k, j)]).collect();
                if opts.standardize {
                    standardize_cross_section(&mut cross, *name == "size");
                }
                for (&j, v) in members.iter().zip(cross) {
                    x[(j, c)] = v;
                }
            }
            if opts.intercept {
                for &j in &members {
                    x[(j, m - 1)] = 1.0;
                }
            }
            for i in 0..n {
                if x.row(i).iter().any(|v| !v.is_finite()) {
                    x.row_mut(i).fill(f64::NAN);
                }
            }
            exposures.push(x);
        }

        let rf_daily: Vec<f64> = raw.risk_free_annual.iter().map(|r| r / TRADING_DAYS).collect();
        let total_returns = DMatrix::from_fn(t, n, |k, j| {
            if raw.is_listed(k, j) {
                raw.total_return[(k, j)]
            } else {
                f64::NAN
            }
        });
        let excess_returns = DMatrix::from_fn(t, n, |k, j| total_returns[(k, j)] - rf_daily[k]);
        let delists_next = DMatrix::from_fn(t, n, |k, j| {
            raw.is_listed(k, j) && k + 1 < t && !(raw.is_listed(k + 1, j) && total_returns[(k + 1, j)].is_finite())
        });
        let year_end = (0..t)
            .map(|k| {
                let next = if k + 1 < t { raw.dates[k + 1] } else { next_weekday(raw.dates[k]) };
                next.year() != raw.dates[k].year()
            })
            .collect();
        let mut factor_names = names;
        if opts.intercept {
            factor_names.push("intercept".to_string());
        }
        Ok(Self {
            dates: raw.dates.clone(),
            asset_ids: raw.asset_ids.clone(),
            factor_names,
            exposures,
            total_returns,
            excess_returns,
            betas: set.beta.clone(),
            in_universe,
            delists_next,
            year_end,
            index_total_returns: raw.index_total_return.clone(),
            index_excess_returns: raw
                .index_total_return
                .iter()
                .zip(&rf_daily)
                .map(|(r, f)| r - f)
                .collect(),
            risk_free_annual: raw.risk_free_annual.clone(),
        })
    }

    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn factors(&self) -> usize {
        self.factor_names.len()
    }

    /// First `days` days; per-day flags computed on the full panel are kept.
    pub fn truncate(&self, days: usize) -> FactorPanel {
        let t = days.min(self.days());
        let n = self.assets();
        let rows_bool = |m: &DMatrix<bool>| DMatrix::from_fn(t, n, |i, j| m[(i, j)]);
        FactorPanel {
            dates: self.dates[..t].to_vec(),
            asset_ids: self.asset_ids.clone(),
            factor_names: self.factor_names.clone(),
            exposures: self.exposures[..t].to_vec(),
            total_returns: self.total_returns.rows(0, t).into_owned(),
            excess_returns: self.excess_returns.rows(0, t).into_owned(),
            betas: self.betas.rows(0, t).into_owned(),
            in_universe: rows_bool(&self.in_universe),
            delists_next: rows_bool(&self.delists_next),
            year_end: self.year_end[..t].to_vec(),
            index_total_returns: self.index_total_returns[..t].to_vec(),
            index_excess_returns: self.index_excess_returns[..t].to_vec(),
            risk_free_annual: self.risk_free_annual[..t].to_vec(),
        }
    }
}
