use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ExposureSet, RawPanel, TRADING_DAYS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FactorProcess {
    RandomWalk { sigma: f64 },
    Ar1 { phi: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureProcess {
    /// Stationary unit-variance AR(1) per asset and factor.
    Ar1 { persistence: f64 },
    /// Every exposure fixed at the given value.
    Constant { value: f64 },
}

/// Common market shock with heterogeneous loadings drawn uniformly from
/// `[beta_low, beta_high]` and rescaled to average one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub sigma: f64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_beta_low")]
    pub beta_low: f64,
    #[serde(default = "default_beta_high")]
    pub beta_high: f64,
}

fn default_beta_low() -> f64 {
    0.5
}

fn default_beta_high() -> f64 {
    1.5
}

/// Mean-reverting price deviation: an Ornstein-Uhlenbeck level per asset
/// whose daily change is added to returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MispricingSpec {
    /// Days for a deviation to halve.
    pub half_life: f64,
    /// Stationary standard deviation of the level.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_factors: usize,
    pub days: usize,
    pub factor_process: FactorProcess,
    pub sigma_r: f64,
    pub exposure: ExposureProcess,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub risk_free_annual: f64,
    pub market: Option<MarketSpec>,
    pub mispricing: Option<MispricingSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_assets: 100,
            n_factors: 4,
            days: 1000,
            factor_process: FactorProcess::RandomWalk { sigma: 0.001 },
            sigma_r: 0.02,
            exposure: ExposureProcess::Ar1 { persistence: 0.99 },
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            risk_free_annual: 0.0,
            market: None,
            mispricing: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_assets == 0 || self.n_factors == 0 {
            problems.push("n_assets and n_factors must be positive".to_string());
        }
        if self.days < 2 {
            problems.push(format!("days = {} < 2", self.days));
        }
        let (phi, sigma_f) = match self.factor_process {
            FactorProcess::RandomWalk { sigma } => (0.0, sigma),
            FactorProcess::Ar1 { phi, sigma } => (phi, sigma),
        };
        if !(0.0..1.0).contains(&phi) {
            problems.push(format!("factor phi = {phi} outside [0, 1)"));
        }
        if !(sigma_f >= 0.0) || !(self.sigma_r >= 0.0) {
            problems.push("noise scales must be non-negative".to_string());
        }
        if let ExposureProcess::Ar1 { persistence } = self.exposure {
            if !(0.0..=1.0).contains(&persistence) {
                problems.push(format!("exposure persistence = {persistence} outside [0, 1]"));
            }
        }
        if let Some(m) = self.market {
            if !(m.sigma >= 0.0) || !(m.beta_low <= m.beta_high) || !(m.beta_low + m.beta_high > 0.0) {
                problems.push("market spec needs sigma >= 0 and 0 < beta_low + beta_high, low <= high".into());
            }
        }
        if let Some(u) = self.mispricing {
            if !(u.half_life > 0.0) || !(u.std >= 0.0) {
                problems.push("mispricing needs half_life > 0 and std >= 0".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub panel: RawPanel,
    /// Exposures `x1..xm`; row `k` pairs with the return realized on day `k + 1`.
    /// `beta` holds each asset's population beta on the generated index.
    pub exposures: ExposureSet,
    /// `factors[k]` is the premium realized in day `k + 1` returns.
    pub factors: Vec<DVector<f64>>,
    /// Market loadings before conversion to index betas.
    pub market_loadings: Vec<f64>,
}

/// Consecutive weekdays starting at `start` (rolled forward off weekends).
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulates a panel from the conditional factor model
/// `r_{k+1} = X_k f_k + ε_{k+1}`, plus optional market and mispricing terms.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (n, m, t) = (cfg.n_assets, cfg.n_factors, cfg.days);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let loadings: Vec<f64> = match cfg.market {
        Some(spec) => {
            let raw: Vec<f64> = (0..n)
                .map(|_| spec.beta_low + (spec.beta_high - spec.beta_low) * rng.random::<f64>())
                .collect();
            let mean = raw.iter().sum::<f64>() / n as f64;
            raw.iter().map(|b| b / mean).collect()
        }
        None => vec![0.0; n],
    };
    let shares: Vec<f64> = (0..n).map(|_| 1e7 * (0.5 * normal(&mut rng)).exp()).collect();
    let mut price: Vec<f64> = (0..n).map(|_| 50.0 * (0.3 * normal(&mut rng)).exp()).collect();

    let persistence = match cfg.exposure {
        ExposureProcess::Ar1 { persistence } => persistence,
        ExposureProcess::Constant { .. } => 1.0,
    };
    let innovation = (1.0 - persistence * persistence).max(0.0).sqrt();
    let mut x = match cfg.exposure {
        ExposureProcess::Ar1 { .. } => DMatrix::from_fn(n, m, |_, _| normal(&mut rng)),
        ExposureProcess::Constant { value } => DMatrix::from_element(n, m, value),
    };
    let mut f = DVector::<f64>::zeros(m);

    let (u_phi, u_innov) = match cfg.mispricing {
        Some(spec) => {
            let phi = 0.5f64.powf(1.0 / spec.half_life);
            (phi, spec.std * (1.0 - phi * phi).sqrt())
        }
        None => (0.0, 0.0),
    };
    let mut u: Vec<f64> = match cfg.mispricing {
        Some(spec) => (0..n).map(|_| spec.std * normal(&mut rng)).collect(),
        None => vec![0.0; n],
    };

    let rf_daily = cfg.risk_free_annual / TRADING_DAYS;
    let mut total = DMatrix::zeros(t, n);
    let mut close = DMatrix::zeros(t, n);
    let mut exposure_values = vec![DMatrix::zeros(t, n); m];
    let mut factors = Vec::with_capacity(t);
    let mut index = Vec::with_capacity(t);

    for k in 0..t {
        let mean_part = &x * &f;
        let market = match cfg.market {
            Some(spec) => spec.drift + spec.sigma * normal(&mut rng),
            None => 0.0,
        };
        let mut sum = 0.0;
        for i in 0..n {
            let eps = cfg.sigma_r * normal(&mut rng);
            let du = if cfg.mispricing.is_some() {
                let next = u_phi * u[i] + u_innov * normal(&mut rng);
                let d = next - u[i];
                u[i] = next;
                d
            } else {
                0.0
            };
            let r = mean_part[i] + eps + loadings[i] * market + du + rf_daily;
            total[(k, i)] = r;
            price[i] *= 1.0 + r;
            close[(k, i)] = price[i];
            sum += r;
        }
        index.push(sum / n as f64);

        if let ExposureProcess::Ar1 { .. } = cfg.exposure {
            for v in x.iter_mut() {
                *v = persistence * *v + innovation * normal(&mut rng);
            }
        }
        f = match cfg.factor_process {
            FactorProcess::RandomWalk { sigma } => f.map(|v| v + sigma * normal(&mut rng)),
            FactorProcess::Ar1 { phi, sigma } => f.map(|v| phi * v + sigma * normal(&mut rng)),
        };
        for (j, values) in exposure_values.iter_mut().enumerate() {
            for i in 0..n {
                values[(k, i)] = x[(i, j)];
            }
        }
        factors.push(f.clone());
    }

    // population regression slope of each asset on the equal-weighted index,
    // ignoring the small factor-driven term
    let idio = cfg.sigma_r.powi(2)
        + cfg
            .mispricing
            .map_or(0.0, |s| 2.0 * s.std * s.std * (1.0 - u_phi));
    let sm2 = cfg.market.map_or(0.0, |s| s.sigma * s.sigma);
    let lbar = loadings.iter().sum::<f64>() / n as f64;
    let denom = lbar * lbar * sm2 + idio / n as f64;
    let index_beta: Vec<f64> = loadings
        .iter()
        .map(|l| {
            if denom > 0.0 {
                (l * lbar * sm2 + idio / n as f64) / denom
            } else {
                1.0
            }
        })
        .collect();

    let panel = RawPanel {
        dates: business_days(cfg.start_date, t),
        asset_ids: (0..n).map(|i| format!("S{i:05}")).collect(),
        close,
        shares: DMatrix::from_fn(t, n, |_, i| shares[i]),
        total_return: total,
        eps: DMatrix::from_element(t, n, f64::NAN),
        listed: DMatrix::from_element(t, n, true),
        present: DMatrix::from_element(t, n, true),
        index_total_return: index,
        risk_free_annual: vec![cfg.risk_free_annual; t],
    };
    Ok(SynthOutput {
        panel,
        exposures: ExposureSet {
            names: (1..=m).map(|j| format!("x{j}")).collect(),
            values: exposure_values,
            beta: DMatrix::from_fn(t, n, |_, i| index_beta[i]),
        },
        factors,
        market_loadings: loadings,
    })
}
