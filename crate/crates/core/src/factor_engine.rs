//! Conditional factor model: daily cross-sectional regressions, noise
//! estimation and the online filter that turns them into filtered returns.
//!
//! Returns follow `r_{k+1} = X_k f_k + ε_{k+1}` with diagonal idiosyncratic
//! covariance `D`. On day `k` the engine
//!
//! 1. regresses `r_k` on `X_{k-1}` (OLS) for the baseline estimate and residuals,
//! 2. updates its belief about `f_{k-1}` with `r_k`,
//! 3. emits `r_filt_k = X_k · f_filt_{k-1}`,
//! 4. predicts `f_k`, and
//! 5. pushes the day's estimate and residuals into its rolling buffers.
//!
//! The measurement update is carried out on the GLS summary of the cross
//! section, `z = (XᵀD⁻¹X)⁻¹XᵀD⁻¹r` with covariance `(XᵀD⁻¹X)⁻¹`. For a linear
//! measurement with diagonal noise this gives the same posterior as the
//! `n`-dimensional update while keeping every solve `m × m`.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    kf_predict, kf_update, sigma_points, spd_factor, symmetrize, ukf_update, unscented_transform,
    GaussianBelief, SigmaScaling,
};
use crate::market_data::{fmt_sig, FactorPanel};
use crate::transition::{
    neural_fit, rolling_state_cov, sample_variance, weighted_variance, CompanionSystem, LastValue,
    NeuralARModel, NeuralConfig, ScalarPredictor,
};

/// Reciprocal condition of `XᵀX` below which a regression is refused.
pub const OLS_RCOND_MIN: f64 = 1e-10;
/// Floor for each idiosyncratic variance.
pub const OBS_VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Kf,
    Ukf,
    Ols,
}

impl EngineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineMode::Kf => "kf",
            EngineMode::Ukf => "ukf",
            EngineMode::Ols => "ols",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Ols,
    KfFilter,
    UkfFilter,
    KfPredict,
    UkfPredict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub f_hat: DVector<f64>,
    pub residuals: DVector<f64>,
    pub source: EstimateSource,
}

/// One day's regression inputs: yesterday's exposures against today's
/// returns, with rows lacking either masked out.
#[derive(Debug, Clone)]
pub struct FactorObservation {
    pub day: usize,
    pub exposures: DMatrix<f64>,
    pub returns: DVector<f64>,
    pub valid: Vec<bool>,
}

impl FactorObservation {
    /// `(X_{k-1}, r_k)` from the panel; requires `k ≥ 1`.
    pub fn from_panel(panel: &FactorPanel, k: usize) -> Self {
        let x = &panel.exposures[k - 1];
        let r = DVector::from_iterator(panel.assets(), panel.excess_returns.row(k).iter().copied());
        let valid = (0..panel.assets())
            .map(|i| r[i].is_finite() && x.row(i).iter().all(|v| v.is_finite()))
            .collect();
        Self {
            day: k,
            exposures: x.clone(),
            returns: r,
            valid,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Valid rows only, plus their asset indices.
    pub fn compact(&self) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        let m = self.exposures.ncols();
        let x = DMatrix::from_fn(idx.len(), m, |r, c| self.exposures[(idx[r], c)]);
        let y = DVector::from_fn(idx.len(), |r, _| self.returns[idx[r]]);
        (x, y, idx)
    }
}

/// Columns taking part in an (near-)exact linear dependence.
fn collinear_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let m = gram.ncols();
    let eig = gram.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut cols = Vec::new();
    for (e, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda <= OLS_RCOND_MIN * top {
            for j in 0..m {
                if eig.eigenvectors[(j, e)].abs() > 1e-6 && !cols.contains(&j) {
                    cols.push(j);
                }
            }
        }
    }
    if cols.is_empty() {
        cols = (0..m).collect();
    }
    cols.sort_unstable();
    cols
}

/// Least-squares premia for one cross-section, solved through QR.
pub fn cross_sectional_ols(x: &DMatrix<f64>, r: &DVector<f64>) -> Result<FactorEstimate> {
    let (n, m) = x.shape();
    if r.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cross_sectional_ols returns",
            expected: (n, 1),
            actual: (r.len(), 1),
        });
    }
    if n < m || m == 0 {
        return Err(Error::invalid(format!("cross-section of {n} rows for {m} factors")));
    }
    let gram = x.tr_mul(x);
    let eig = gram.clone().symmetric_eigenvalues();
    let hi = eig.iter().cloned().fold(0.0, f64::max);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    if !(hi > 0.0) || lo / hi < OLS_RCOND_MIN {
        return Err(Error::SingularDesign {
            columns: collinear_columns(&gram),
        });
    }
    let qr = x.clone().qr();
    let f_hat = qr
        .r()
        .solve_upper_triangular(&qr.q().tr_mul(r))
        .ok_or(Error::NumericalSingularity {
            context: "cross_sectional_ols",
            rcond: lo / hi,
        })?;
    let residuals = r - x * &f_hat;
    Ok(FactorEstimate {
        f_hat,
        residuals,
        source: EstimateSource::Ols,
    })
}

/// Per-asset idiosyncratic variances from trailing regression residuals.
///
/// Each asset uses its last `min(window, len)` residuals (sample variance,
/// floored). Assets with fewer than two get the median of the others; if no
/// asset qualifies, the pooled variance of every buffered residual is used,
/// and `1.0` when even that is unavailable.
pub fn estimate_obs_cov(buffers: &[VecDeque<f64>], window: usize) -> DVector<f64> {
    let est: Vec<Option<f64>> = buffers
        .iter()
        .map(|b| {
            let take = window.min(b.len());
            (take >= 2).then(|| {
                sample_variance(b.iter().skip(b.len() - take).copied()).max(OBS_VARIANCE_FLOOR)
            })
        })
        .collect();
    let mut known: Vec<f64> = est.iter().flatten().copied().collect();
    let fallback = if known.is_empty() {
        let pooled = sample_variance(buffers.iter().flat_map(|b| b.iter().copied()));
        if pooled > 0.0 {
            pooled.max(OBS_VARIANCE_FLOOR)
        } else {
            1.0
        }
    } else {
        known.sort_by(f64::total_cmp);
        let n = known.len();
        if n % 2 == 1 {
            known[n / 2]
        } else {
            0.5 * (known[n / 2 - 1] + known[n / 2])
        }
    };
    DVector::from_iterator(buffers.len(), est.into_iter().map(|e| e.unwrap_or(fallback)))
}

/// GLS summary `(z, R)` of a cross-section with diagonal noise `d`.
pub fn gls_compress(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, m) = x.shape();
    if r.len() != n || d.len() != n {
        return Err(Error::DimensionMismatch {
            context: "gls_compress",
            expected: (n, n),
            actual: (r.len(), d.len()),
        });
    }
    let mut info = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for i in 0..n {
        let row = x.row(i).transpose();
        let w = 1.0 / d[i];
        info.ger(w, &row, &row, 1.0);
        b.axpy(w * r[i], &row, 1.0);
    }
    let chol = spd_factor(&symmetrize(info), "gls_compress information matrix")?;
    let z = chol.solve(&b);
    let cov = symmetrize(chol.inverse());
    Ok((z, cov))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Days of regression-only warm-up before filtering starts.
    pub cold_start: usize,
    pub psi_window: usize,
    pub obs_window: usize,
    /// Lag window of the companion state in UKF mode.
    pub lags: usize,
    /// Fit neural transitions in UKF mode; otherwise the last value carries.
    pub neural: bool,
    pub neural_config: NeuralConfig,
    /// Regression estimates required before the first neural fit.
    pub refit_min_history: usize,
    pub refit_annually: bool,
    /// Valid rows required beyond the factor count.
    pub min_excess_rows: usize,
    /// Multiplier on the estimated idiosyncratic variances.
    pub obs_noise_scale: f64,
    pub sigma: SigmaScaling,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            cold_start: 21,
            psi_window: 20,
            obs_window: 20,
            lags: 10,
            neural: true,
            neural_config: NeuralConfig::default(),
            refit_min_history: 252,
            refit_annually: true,
            min_excess_rows: 1,
            obs_noise_scale: 1.0,
            sigma: SigmaScaling::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.cold_start < 2 {
            p.push(format!("engine cold_start = {} < 2", self.cold_start));
        }
        if self.psi_window < 2 || self.obs_window < 2 {
            p.push("engine psi_window and obs_window must be at least 2".to_string());
        }
        if self.lags == 0 {
            p.push("engine lags must be at least 1".to_string());
        }
        if self.neural && self.neural_config.lags != self.lags {
            p.push(format!(
                "neural lag window {} differs from engine lags {}",
                self.neural_config.lags, self.lags
            ));
        }
        if self.neural && self.refit_min_history < self.lags + 2 {
            p.push("refit_min_history must exceed lags + 1".to_string());
        }
        if !(self.obs_noise_scale > 0.0) {
            p.push("obs_noise_scale must be positive".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

enum Transition<'a> {
    Carry(LastValue),
    Neural(&'a NeuralARModel),
}

impl ScalarPredictor for Transition<'_> {
    fn predict(&self, window: &[f64]) -> (f64, Option<f64>) {
        match self {
            Transition::Carry(p) => p.predict(window),
            Transition::Neural(m) => m.predict(window),
        }
    }
}

/// Output of one engine step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub r_filt: DVector<f64>,
    pub f_hat: Option<FactorEstimate>,
    pub f_filt: Option<DVector<f64>>,
    pub f_pred: Option<DVector<f64>>,
    pub trace: f64,
    pub psi: Option<DVector<f64>>,
    pub skipped: bool,
}

/// Mutable per-run estimator state.
#[derive(Debug, Clone)]
pub struct ModelRunState {
    mode: EngineMode,
    cfg: EngineConfig,
    n: usize,
    m: usize,
    block: usize,
    belief: Option<GaussianBelief>,
    recent: VecDeque<DVector<f64>>,
    residuals: Vec<VecDeque<f64>>,
    history: Vec<Vec<f64>>,
    models: Option<Vec<NeuralARModel>>,
    fitted_year: Option<i32>,
    regressions: usize,
}

impl ModelRunState {
    pub fn new(mode: EngineMode, cfg: EngineConfig, n: usize, m: usize) -> Result<Self> {
        cfg.validate()?;
        let block = if mode == EngineMode::Ukf { cfg.lags } else { 1 };
        Ok(Self {
            mode,
            n,
            m,
            block,
            belief: None,
            recent: VecDeque::new(),
            residuals: vec![VecDeque::new(); n],
            history: vec![Vec::new(); m],
            models: None,
            fitted_year: None,
            regressions: 0,
            cfg,
        })
    }

    pub fn mode(&self) -> EngineMode {
        self.mode
    }

    /// Current belief over the stacked state, when filtering is active.
    pub fn belief(&self) -> Option<&GaussianBelief> {
        self.belief.as_ref()
    }

    pub fn models(&self) -> Option<&[NeuralARModel]> {
        self.models.as_deref()
    }

    fn state_dim(&self) -> usize {
        self.m * self.block
    }

    fn tops(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |j, _| x[j * self.block])
    }

    fn selector(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.m, self.state_dim());
        for j in 0..self.m {
            h[(j, j * self.block)] = 1.0;
        }
        h
    }

    fn buffer_psi(&self) -> Option<DVector<f64>> {
        if self.recent.len() < 2 {
            return None;
        }
        let hist: Vec<DVector<f64>> = self.recent.iter().cloned().collect();
        rolling_state_cov(&hist, self.cfg.psi_window)
            .ok()
            .map(|c| c.diagonal())
    }

    /// Prior over the latest `block` premia from the regression buffer.
    fn initial_belief(&self, psi: &DVector<f64>) -> Result<GaussianBelief> {
        let dim = self.state_dim();
        let len = self.recent.len();
        let mut mean = DVector::zeros(dim);
        let mut cov = DMatrix::zeros(dim, dim);
        for j in 0..self.m {
            for i in 0..self.block {
                let src = &self.recent[len - 1 - i.min(len - 1)];
                mean[j * self.block + i] = src[j];
                cov[(j * self.block + i, j * self.block + i)] = psi[j];
            }
        }
        GaussianBelief::new(mean, cov)
    }

    fn maybe_refit(&mut self, date: NaiveDate) -> Result<()> {
        if self.mode != EngineMode::Ukf || !self.cfg.neural {
            return Ok(());
        }
        let len = self.history[0].len();
        if len < self.cfg.refit_min_history {
            return Ok(());
        }
        let due = match self.fitted_year {
            None => true,
            Some(y) => self.cfg.refit_annually && date.year() != y,
        };
        if !due {
            return Ok(());
        }
        let cfg = self.cfg.neural_config;
        let base = self.cfg.seed;
        let year = date.year() as u64;
        let models = self
            .history
            .par_iter()
            .enumerate()
            .map(|(j, series)| {
                let seed = base
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(year * 1_000 + j as u64);
                neural_fit(series, &cfg, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        self.models = Some(models);
        self.fitted_year = Some(date.year());
        Ok(())
    }

    fn predict(&self, belief: &GaussianBelief, buffer_psi: &DVector<f64>) -> Result<(GaussianBelief, DVector<f64>)> {
        match self.mode {
            EngineMode::Kf | EngineMode::Ols => {
                let dim = self.state_dim();
                let q = DMatrix::from_diagonal(buffer_psi);
                Ok((kf_predict(belief, &DMatrix::identity(dim, dim), &q)?, buffer_psi.clone()))
            }
            EngineMode::Ukf => {
                let systems: Vec<CompanionSystem<Transition>> = (0..self.m)
                    .map(|j| {
                        let t = match &self.models {
                            Some(ms) => Transition::Neural(&ms[j]),
                            None => Transition::Carry(LastValue),
                        };
                        CompanionSystem::new(t, self.block)
                    })
                    .collect::<Result<_>>()?;
                let set = sigma_points(belief, self.cfg.sigma)?;
                let l = self.block;
                let mut vars = vec![Vec::with_capacity(set.points.len()); self.m];
                let mapped: Vec<DVector<f64>> = set
                    .points
                    .iter()
                    .map(|p| {
                        let mut out = DVector::zeros(p.len());
                        for (j, sys) in systems.iter().enumerate() {
                            let (next, var) = sys.step(&p.as_slice()[j * l..(j + 1) * l]);
                            out.rows_mut(j * l, l).copy_from(&next);
                            vars[j].push(var);
                        }
                        out
                    })
                    .collect();
                let psi = DVector::from_fn(self.m, |j, _| {
                    if vars[j].iter().all(Option::is_some) {
                        let v: Vec<f64> = vars[j].iter().flatten().copied().collect();
                        weighted_variance(&v, &set.wm)
                    } else {
                        buffer_psi[j]
                    }
                });
                let mut q = DMatrix::zeros(belief.dim(), belief.dim());
                for j in 0..self.m {
                    q[(j * l, j * l)] = psi[j];
                }
                Ok((unscented_transform(&mapped, &set.wm, &set.wc, &q)?, psi))
            }
        }
    }

    /// Processes day `obs.day` and returns `r_filt` for it; `x_now` are the
    /// exposures dated `obs.day`.
    pub fn engine_step(
        &mut self,
        obs: &FactorObservation,
        x_now: &DMatrix<f64>,
        date: NaiveDate,
    ) -> Result<StepOutput> {
        if obs.exposures.shape() != (self.n, self.m) || x_now.shape() != (self.n, self.m) {
            return Err(Error::DimensionMismatch {
                context: "engine_step exposures",
                expected: (self.n, self.m),
                actual: obs.exposures.shape(),
            });
        }
        self.maybe_refit(date)?;
        let buffer_psi = self.buffer_psi();

        let regression = if obs.valid_count() >= self.m + self.cfg.min_excess_rows {
            let (x, r, idx) = obs.compact();
            match cross_sectional_ols(&x, &r) {
                Ok(est) => Some((x, r, idx, est)),
                Err(Error::SingularDesign { .. }) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };

        let Some((x, r, idx, est)) = regression else {
            let r_filt = DVector::from_fn(self.n, |i, _| {
                if x_now.row(i).iter().all(|v| v.is_finite()) {
                    0.0
                } else {
                    f64::NAN
                }
            });
            let mut out = StepOutput {
                r_filt,
                f_hat: None,
                f_filt: None,
                f_pred: None,
                trace: f64::NAN,
                psi: buffer_psi.clone(),
                skipped: true,
            };
            if let (Some(b), Some(psi)) = (&self.belief, &buffer_psi) {
                let (pred, used) = self.predict(b, psi)?;
                out.f_pred = Some(self.tops(&pred.mean));
                out.trace = pred.cov.trace();
                out.psi = Some(used);
                self.belief = Some(pred);
            }
            return Ok(out);
        };

        let filtering = self.mode != EngineMode::Ols && self.regressions >= self.cfg.cold_start;
        let mut out = StepOutput {
            r_filt: DVector::zeros(self.n),
            f_hat: None,
            f_filt: None,
            f_pred: None,
            trace: f64::NAN,
            psi: buffer_psi.clone(),
            skipped: false,
        };
        let f_filt = if filtering {
            let psi = buffer_psi.clone().ok_or(Error::InsufficientHistory {
                needed: 2,
                available: self.recent.len(),
            })?;
            let prior = match self.belief.take() {
                Some(b) => b,
                None => self.initial_belief(&psi)?,
            };
            let d_all = estimate_obs_cov(&self.residuals, self.cfg.obs_window);
            let d = DVector::from_fn(idx.len(), |i, _| d_all[idx[i]] * self.cfg.obs_noise_scale);
            let (z, rz) = gls_compress(&x, &r, &d)?;
            let h = self.selector();
            let filtered = match self.mode {
                EngineMode::Ukf => ukf_update(&prior, &z, |s| &h * s, &rz, self.cfg.sigma, None)?.0,
                _ => kf_update(&prior, &z, &h, &rz)?.0,
            };
            let (pred, used) = self.predict(&filtered, &psi)?;
            out.f_pred = Some(self.tops(&pred.mean));
            out.trace = pred.cov.trace();
            out.psi = Some(used);
            self.belief = Some(pred);
            self.tops(&filtered.mean)
        } else {
            out.f_pred = Some(est.f_hat.clone());
            est.f_hat.clone()
        };
        out.r_filt = x_now * &f_filt;

        // buffers
        let keep = (self.cfg.psi_window + 1).max(self.block);
        self.recent.push_back(est.f_hat.clone());
        while self.recent.len() > keep {
            self.recent.pop_front();
        }
        for (row, &i) in idx.iter().enumerate() {
            let buf = &mut self.residuals[i];
            buf.push_back(est.residuals[row]);
            while buf.len() > self.cfg.obs_window {
                buf.pop_front();
            }
        }
        if self.mode == EngineMode::Ukf && self.cfg.neural {
            for j in 0..self.m {
                self.history[j].push(est.f_hat[j]);
            }
        }
        self.regressions += 1;

        out.f_filt = Some(f_filt);
        out.f_hat = Some(est);
        Ok(out)
    }
}

/// Per-day diagnostics of an engine run.
#[derive(Debug, Clone)]
pub struct EngineDay {
    pub date: NaiveDate,
    pub f_hat: Option<DVector<f64>>,
    pub f_filt: Option<DVector<f64>>,
    pub f_pred: Option<DVector<f64>>,
    pub trace: f64,
    pub psi: Option<DVector<f64>>,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct EngineRun {
    pub mode: EngineMode,
    pub factor_names: Vec<String>,
    /// `T × n` filtered returns; day 0 and skipped days are flat (zero).
    pub r_filt: DMatrix<f64>,
    pub days: Vec<EngineDay>,
    /// Transition models in force at the end of the sweep (neural UKF only).
    pub models: Option<Vec<NeuralARModel>>,
}

/// Sweeps the engine over every day of the panel.
pub fn run_engine(panel: &FactorPanel, mode: EngineMode, cfg: &EngineConfig) -> Result<EngineRun> {
    let (t, n, m) = (panel.days(), panel.assets(), panel.factors());
    let mut state = ModelRunState::new(mode, cfg.clone(), n, m)?;
    let mut r_filt = DMatrix::from_element(t, n, f64::NAN);
    let mut days = Vec::with_capacity(t);
    if t == 0 {
        return Ok(EngineRun {
            mode,
            factor_names: panel.factor_names.clone(),
            r_filt,
            days,
            models: None,
        });
    }
    for i in 0..n {
        if panel.exposures[0].row(i).iter().all(|v| v.is_finite()) {
            r_filt[(0, i)] = 0.0;
        }
    }
    days.push(EngineDay {
        date: panel.dates[0],
        f_hat: None,
        f_filt: None,
        f_pred: None,
        trace: f64::NAN,
        psi: None,
        skipped: true,
    });
    for k in 1..t {
        let obs = FactorObservation::from_panel(panel, k);
        let out = state.engine_step(&obs, &panel.exposures[k], panel.dates[k])?;
        r_filt.row_mut(k).copy_from(&out.r_filt.transpose());
        days.push(EngineDay {
            date: panel.dates[k],
            f_hat: out.f_hat.map(|e| e.f_hat),
            f_filt: out.f_filt,
            f_pred: out.f_pred,
            trace: out.trace,
            psi: out.psi,
            skipped: out.skipped,
        });
    }
    Ok(EngineRun {
        mode,
        factor_names: panel.factor_names.clone(),
        r_filt,
        days,
        models: state.models().map(|m| m.to_vec()),
    })
}

/// Diagnostic CSV: `date`, then `f_hat_<name>`, `f_filt_<name>`,
/// `f_pred_<name>` per factor, `trace_sigma`, and `psi_<name>` per factor.
/// Missing values are empty fields.
pub fn write_diagnostics(run: &EngineRun, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names = &run.factor_names;
    let mut header = vec!["date".to_string()];
    for prefix in ["f_hat", "f_filt", "f_pred"] {
        header.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    header.push("trace_sigma".to_string());
    header.extend(names.iter().map(|n| format!("psi_{n}")));
    writeln!(out, "{}", header.join(","))?;
    let cells = |v: &Option<DVector<f64>>| -> Vec<String> {
        match v {
            Some(v) => v.iter().map(|x| fmt_sig(*x)).collect(),
            None => vec![String::new(); names.len()],
        }
    };
    for d in &run.days {
        let mut row = vec![d.date.to_string()];
        row.extend(cells(&d.f_hat));
        row.extend(cells(&d.f_filt));
        row.extend(cells(&d.f_pred));
        row.push(fmt_sig(d.trace));
        row.extend(cells(&d.psi));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn identity_design_recovers_returns() {
        let x = DMatrix::identity(3, 3);
        let r = dvector![0.1, -0.2, 0.05];
        let est = cross_sectional_ols(&x, &r).unwrap();
        assert!((est.f_hat - &r).amax() < 1e-15);
        assert!(est.residuals.amax() < 1e-15);
    }

    #[test]
    fn singular_design_names_columns() {
        let x = dmatrix![1.0, 2.0, 0.3; 2.0, 4.0, -0.1; 3.0, 6.0, 0.7; -1.0, -2.0, 0.2];
        match cross_sectional_ols(&x, &dvector![0.1, 0.2, 0.3, 0.4]) {
            Err(Error::SingularDesign { columns }) => assert_eq!(columns, vec![0, 1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn obs_cov_floors_and_fallback() {
        let flat: VecDeque<f64> = vec![0.01; 20].into();
        let one: VecDeque<f64> = vec![0.3].into();
        let a: VecDeque<f64> = vec![0.0, 0.2].into();
        let b: VecDeque<f64> = vec![0.0, 0.4].into();
        let d = estimate_obs_cov(&[flat, one, a, b], 20);
        assert_eq!(d[0], OBS_VARIANCE_FLOOR);
        // median of {1e-10, 0.02, 0.08}
        assert!((d[1] - 0.02).abs() < 1e-15);
        assert!((d[2] - 0.02).abs() < 1e-15 && (d[3] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn config_validation_collects_problems() {
        let cfg = EngineConfig {
            cold_start: 1,
            lags: 5,
            ..EngineConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
