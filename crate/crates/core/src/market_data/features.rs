use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{RawPanel, TRADING_DAYS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trailing regression window for beta and volatility (two years).
pub const BETA_WINDOW: usize = 504;
/// Momentum look-back start (twelve months).
pub const MOMENTUM_LOOKBACK: usize = 252;
/// Most recent days excluded from momentum (one month).
pub const MOMENTUM_SKIP: usize = 21;
/// Days of history before momentum is reported.
pub const MOMENTUM_HISTORY: usize = 273;

const MAD_SCALE: f64 = 1.4826;
const WINSOR_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub beta_window: usize,
    pub momentum_lookback: usize,
    pub momentum_skip: usize,
    pub momentum_history: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            beta_window: BETA_WINDOW,
            momentum_lookback: MOMENTUM_LOOKBACK,
            momentum_skip: MOMENTUM_SKIP,
            momentum_history: MOMENTUM_HISTORY,
        }
    }
}

/// Raw (unstandardized) per asset-day characteristics.
///
/// Each characteristic is a `T × n` matrix with `NaN` marking missing
/// coverage. `names[j]` labels `values[j]`; `beta` is held separately because
/// it is used for hedging, not priced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSet {
    pub names: Vec<String>,
    pub values: Vec<DMatrix<f64>>,
    pub beta: DMatrix<f64>,
}

impl ExposureSet {
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.names.iter().position(|n| n == name).map(|j| &self.values[j])
    }

    /// First `days` days of every characteristic.
    pub fn truncate(&self, days: usize) -> ExposureSet {
        let t = days.min(self.beta.nrows());
        ExposureSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.rows(0, t).into_owned()).collect(),
            beta: self.beta.rows(0, t).into_owned(),
        }
    }

    /// Whether `name` is available for `asset` on `day`.
    pub fn covered(&self, name: &str, day: usize, asset: usize) -> bool {
        match name {
            "beta" => self.beta[(day, asset)].is_finite(),
            _ => self.get(name).is_some_and(|v| v[(day, asset)].is_finite()),
        }
    }
}

/// Regression of `asset` on `index` over the full slices: `(slope, SSE / n)`.
///
/// `None` when fewer than `window` pairs are supplied or the index has no
/// variation; only the trailing `window` pairs are used.
pub fn compute_beta_vol(asset: &[f64], index: &[f64], window: usize) -> Option<(f64, f64)> {
    if asset.len() != index.len() || asset.len() < window || window < 2 {
        return None;
    }
    let y = &asset[asset.len() - window..];
    let x = &index[index.len() - window..];
    if y.iter().chain(x).any(|v| !v.is_finite()) {
        return None;
    }
    let n = window as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    Some((slope, (sse / n).max(0.0)))
}

/// Trailing beta and volatility for every day of one asset.
///
/// Entry `k` uses the `window` most recent days ending at `k`; any missing
/// observation inside the window leaves the entry missing.
pub fn rolling_beta_vol(asset: &[f64], index: &[f64], window: usize) -> Vec<Option<(f64, f64)>> {
    let mut out = vec![None; asset.len()];
    let mut run = 0usize;
    for k in 0..asset.len() {
        if asset[k].is_finite() && index[k].is_finite() {
            run += 1;
        } else {
            run = 0;
        }
        if run >= window {
            out[k] = compute_beta_vol(&asset[k + 1 - window..=k], &index[k + 1 - window..=k], window);
        }
    }
    out
}

/// Compounded return over days `[k - lookback, k - skip)`.
///
/// Missing until day `k` has `history` days of data behind it (inclusive) or
/// when any return in the window is missing.
pub fn compute_momentum(returns: &[f64], k: usize, params: &FeatureParams) -> Option<f64> {
    if k >= returns.len() || k + 1 < params.momentum_history || k < params.momentum_lookback {
        return None;
    }
    let window = &returns[k - params.momentum_lookback..k - params.momentum_skip];
    if window.iter().any(|r| !r.is_finite()) {
        return None;
    }
    Some(window.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0)
}

pub fn compute_size(price: f64, shares: f64) -> f64 {
    price * shares
}

/// Top `n` listed assets by size on `day`, ties to the smaller id.
///
/// Returns asset column indices in ascending order.
pub fn select_universe(panel: &RawPanel, n: usize, day: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = (0..panel.assets())
        .filter(|&j| panel.is_listed(day, j))
        .filter_map(|j| {
            let s = compute_size(panel.close[(day, j)], panel.shares[(day, j)]);
            s.is_finite().then_some((s, j))
        })
        .collect();
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| panel.asset_ids[a.1].cmp(&panel.asset_ids[b.1]))
    });
    let mut picked: Vec<usize> = cands.into_iter().take(n).map(|c| c.1).collect();
    picked.sort_unstable();
    picked
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// In-place cross-sectional standardization of the finite entries.
///
/// Optionally takes logs (non-positive values become missing), winsorizes
/// at ±3 robust z-scores (median ± 3·1.4826·MAD), then z-scores with the
/// population standard deviation. A flat cross-section maps to zeros.
pub fn standardize_cross_section(values: &mut [f64], log: bool) {
    if log {
        for v in values.iter_mut() {
            *v = if *v > 0.0 { v.ln() } else { f64::NAN };
        }
    }
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    finite.sort_by(f64::total_cmp);
    let med = median(&finite);
    let mut dev: Vec<f64> = finite.iter().map(|v| (v - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let mad = MAD_SCALE * median(&dev);
    if mad > 0.0 {
        let (lo, hi) = (med - WINSOR_Z * mad, med + WINSOR_Z * mad);
        for v in values.iter_mut().filter(|v| v.is_finite()) {
            *v = v.clamp(lo, hi);
        }
    }
    let count = finite.len() as f64;
    let mean = values.iter().filter(|v| v.is_finite()).sum::<f64>() / count;
    let var = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / count;
    let sd = var.sqrt();
    for v in values.iter_mut().filter(|v| v.is_finite()) {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Beta, volatility, momentum, size and value for every asset-day.
///
/// Regressions use excess returns over the daily risk-free rate; momentum
/// uses total returns; value is earnings yield (`eps / close`).
pub fn compute_exposures(panel: &RawPanel, params: &FeatureParams) -> Result<ExposureSet> {
    if params.momentum_skip >= params.momentum_lookback {
        return Err(Error::invalid("momentum skip must be shorter than the look-back"));
    }
    let (t, n) = (panel.days(), panel.assets());
    let rf: Vec<f64> = panel.risk_free_annual.iter().map(|r| r / TRADING_DAYS).collect();
    let index_excess: Vec<f64> = panel
        .index_total_return
        .iter()
        .zip(&rf)
        .map(|(r, f)| r - f)
        .collect();

    type BetaVolMomentum = (Vec<Option<(f64, f64)>>, Vec<Option<f64>>);
    let columns: Vec<BetaVolMomentum> = (0..n)
        .into_par_iter()
        .map(|j| {
            let total: Vec<f64> = (0..t)
                .map(|k| {
                    if panel.is_listed(k, j) {
                        panel.total_return[(k, j)]
                    } else {
                        f64::NAN
                    }
                })
                .collect();
            let excess: Vec<f64> = total.iter().zip(&rf).map(|(r, f)| r - f).collect();
            let bv = rolling_beta_vol(&excess, &index_excess, params.beta_window);
            let mom = (0..t).map(|k| compute_momentum(&total, k, params)).collect();
            (bv, mom)
        })
        .collect();

    let mut beta = DMatrix::from_element(t, n, f64::NAN);
    let mut vol = DMatrix::from_element(t, n, f64::NAN);
    let mut mom = DMatrix::from_element(t, n, f64::NAN);
    for (j, (bv, m)) in columns.into_iter().enumerate() {
        for k in 0..t {
            if let Some((b, v)) = bv[k] {
                beta[(k, j)] = b;
                vol[(k, j)] = v;
            }
            if let Some(x) = m[k] {
                mom[(k, j)] = x;
            }
        }
    }
    let listed_or_nan = |k: usize, j: usize, v: f64| if panel.is_listed(k, j) { v } else { f64::NAN };
    let size = DMatrix::from_fn(t, n, |k, j| {
        listed_or_nan(k, j, compute_size(panel.close[(k, j)], panel.shares[(k, j)]))
    });
    let value = DMatrix::from_fn(t, n, |k, j| listed_or_nan(k, j, panel.eps[(k, j)] / panel.close[(k, j)]));
    Ok(ExposureSet {
        names: ["size", "volatility", "momentum", "value"].map(String::from).to_vec(),
        values: vec![size, vol, mom, value],
        beta,
    })
}
