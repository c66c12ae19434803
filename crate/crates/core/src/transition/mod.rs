//! State-evolution models for the latent factor vector.
//!
//! Three transitions are supported: the identity (random walk), a
//! lag-expanded companion form whose top coordinate comes from a scalar
//! predictor, and a small neural autoregression that also reports its own
//! predictive variance.

mod neural;

pub use neural::{neural_fit, neural_predict, NeuralARModel, NeuralConfig, MODEL_FORMAT_VERSION};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to every diagonal entry of an estimated state covariance.
pub const STATE_COV_FLOOR: f64 = 1e-12;

/// Floor applied to variances emitted by a predictor.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Identity,
    Companion,
    NeuralAr,
}

pub fn identity_transition(f: &DVector<f64>) -> DVector<f64> {
    f.clone()
}

/// Diagonal state covariance from the trailing increments `f_{k+1} - f_k`.
pub fn rolling_state_cov(history: &[DVector<f64>], window: usize) -> Result<DMatrix<f64>> {
    rolling_state_cov_with(history, window, identity_transition)
}

/// Diagonal state covariance from the trailing increments `f_{k+1} - g(f_k)`.
///
/// Uses the last `min(window, T - 1)` increments with the `n - 1` sample
/// convention; off-diagonals are zero and the diagonal is floored.
pub fn rolling_state_cov_with<G>(
    history: &[DVector<f64>],
    window: usize,
    g: G,
) -> Result<DMatrix<f64>>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    if history.len() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: history.len(),
        });
    }
    if window < 2 {
        return Err(Error::invalid(format!("state covariance window {window} < 2")));
    }
    let m = history[0].len();
    let count = window.min(history.len() - 1);
    let start = history.len() - 1 - count;
    let increments: Vec<DVector<f64>> = (start..history.len() - 1)
        .map(|k| &history[k + 1] - g(&history[k]))
        .collect();
    let mut cov = DMatrix::zeros(m, m);
    for j in 0..m {
        let vals = increments.iter().map(|d| d[j]);
        cov[(j, j)] = sample_variance(vals).max(STATE_COV_FLOOR);
    }
    Ok(cov)
}

/// Unbiased sample variance; zero for fewer than two values.
pub(crate) fn sample_variance(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = vals.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = vals.clone().sum::<f64>() / n as f64;
    vals.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// One-step scalar forecaster over a lag window ordered most-recent first.
pub trait ScalarPredictor {
    /// Predicted next value and, when the model provides one, its variance.
    fn predict(&self, window: &[f64]) -> (f64, Option<f64>);
}

/// Random-walk forecaster: the next value equals the latest one.
#[derive(Debug, Clone, Copy, Default)]
pub struct LastValue;

impl ScalarPredictor for LastValue {
    fn predict(&self, window: &[f64]) -> (f64, Option<f64>) {
        (window[0], None)
    }
}

impl ScalarPredictor for NeuralARModel {
    fn predict(&self, window: &[f64]) -> (f64, Option<f64>) {
        let (mean, var) = self.forward(window);
        (mean, Some(var))
    }
}

impl<F> ScalarPredictor for F
where
    F: Fn(&[f64]) -> f64,
{
    fn predict(&self, window: &[f64]) -> (f64, Option<f64>) {
        (self(window), None)
    }
}

/// Lag-expanded state `(f_k, …, f_{k-M+1})` evolving as
/// `(g(f_k, …, f_{k-M+1}), f_k, …, f_{k-M+2})`; noise enters the top
/// coordinate only.
#[derive(Debug, Clone)]
pub struct CompanionSystem<P> {
    predictor: P,
    lags: usize,
}

impl<P: ScalarPredictor> CompanionSystem<P> {
    pub fn new(predictor: P, lags: usize) -> Result<Self> {
        if lags == 0 {
            return Err(Error::invalid("companion lag window must be at least 1"));
        }
        Ok(Self { predictor, lags })
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn predictor(&self) -> &P {
        &self.predictor
    }

    pub fn state_map(&self, x: &DVector<f64>) -> DVector<f64> {
        self.step(x.as_slice()).0
    }

    /// Shifted state plus the predictor's variance for the new top entry.
    pub fn step(&self, x: &[f64]) -> (DVector<f64>, Option<f64>) {
        let mut out = DVector::zeros(self.lags);
        let (top, var) = self.predictor.predict(x);
        out[0] = top;
        for i in 1..self.lags {
            out[i] = x[i - 1];
        }
        (out, var)
    }

    /// Noise-injection column `(1, 0, …, 0)ᵀ`.
    pub fn noise_column(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.lags);
        b[0] = 1.0;
        b
    }

    /// Measurement selector row `(1, 0, …, 0)`.
    pub fn selector_row(&self) -> DMatrix<f64> {
        let mut row = DMatrix::zeros(1, self.lags);
        row[(0, 0)] = 1.0;
        row
    }
}

pub fn companion_wrap(model: NeuralARModel) -> CompanionSystem<NeuralARModel> {
    let lags = model.lags;
    CompanionSystem {
        predictor: model,
        lags,
    }
}

/// Weighted average of per-sigma-point variances, floored at
/// [`VARIANCE_FLOOR`].
///
/// Accumulated relative to the first entry; with weights summing to one
/// this equals `Σ w_i v_i`.
pub fn weighted_variance(variances: &[f64], wm: &[f64]) -> f64 {
    let v0 = variances[0];
    let acc: f64 = variances
        .iter()
        .zip(wm)
        .skip(1)
        .map(|(v, w)| w * (v - v0))
        .sum();
    (v0 + acc).max(VARIANCE_FLOOR)
}

/// Process-noise variance for a neural transition: the `wm`-weighted
/// average of the model's variance at each sigma point's lag window.
pub fn aleatoric_psi(model: &NeuralARModel, windows: &[DVector<f64>], wm: &[f64]) -> Result<f64> {
    if windows.len() != wm.len() || windows.is_empty() {
        return Err(Error::invalid(format!(
            "aleatoric_psi: {} windows for {} weights",
            windows.len(),
            wm.len()
        )));
    }
    let vars = windows
        .iter()
        .map(|w| neural_predict(model, w.as_slice()).map(|(_, v)| v))
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_variance(&vars, wm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn identity_returns_input() {
        let f = dvector![0.1, -0.2];
        assert_eq!(identity_transition(&f), f);
        assert_eq!(identity_transition(&dvector![0.0]), dvector![0.0]);
    }

    #[test]
    fn identity_with_kf_predict_is_random_walk() {
        use crate::filters::{kf_predict, GaussianBelief};
        let b = GaussianBelief::new(dvector![0.1, -0.2], DMatrix::identity(2, 2) * 0.5).unwrap();
        let psi = DMatrix::from_diagonal(&dvector![0.01, 0.02]);
        let out = kf_predict(&b, &DMatrix::identity(2, 2), &psi).unwrap();
        assert_eq!(out.mean, identity_transition(&b.mean));
        assert_eq!(out.cov, &b.cov + psi);
    }

    #[test]
    fn constant_history_floors() {
        let h = vec![dvector![0.3, -1.0]; 30];
        let c = rolling_state_cov(&h, 20).unwrap();
        assert_eq!(c, DMatrix::from_diagonal(&dvector![STATE_COV_FLOOR, STATE_COV_FLOOR]));
    }

    #[test]
    fn alternating_history_variance() {
        let h: Vec<_> = (0..41).map(|k| dvector![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let c = rolling_state_cov(&h, 20).unwrap();
        // 10 increments of +2 and 10 of -2 around mean 0
        let expected = 20.0 * 4.0 / 19.0;
        assert!((c[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn two_streams_have_zero_off_diagonal() {
        let h: Vec<_> = (0..25)
            .map(|k| dvector![(k as f64 * 0.3).sin(), (k as f64 * 0.7).cos()])
            .collect();
        let c = rolling_state_cov(&h, 20).unwrap();
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(1, 0)], 0.0);
        assert!(c[(0, 0)] > STATE_COV_FLOOR && c[(1, 1)] > STATE_COV_FLOOR);
    }

    #[test]
    fn short_history_errors() {
        assert!(matches!(
            rolling_state_cov(&[dvector![1.0]], 20),
            Err(Error::InsufficientHistory { .. })
        ));
        assert!(rolling_state_cov(&[dvector![1.0], dvector![2.0]], 1).is_err());
    }

    #[test]
    fn companion_shift_with_zero_predictor() {
        let zero = |_: &[f64]| 0.0;
        let sys = CompanionSystem::new(zero, 3).unwrap();
        assert_eq!(sys.state_map(&dvector![1.5, 2.5, 3.5]), dvector![0.0, 1.5, 2.5]);
        assert_eq!(sys.noise_column(), dvector![1.0, 0.0, 0.0]);
        assert_eq!(sys.selector_row().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn companion_lag_copies_exact() {
        let sys = CompanionSystem::new(|w: &[f64]| 0.5 * w[0] - 0.2 * w[3], 6).unwrap();
        let mut x = dvector![0.1, -0.3, 0.7, 0.2, -0.9, 0.4];
        for _ in 0..20 {
            let y = sys.state_map(&x);
            for i in 1..6 {
                assert_eq!(y[i], x[i - 1]);
            }
            x = y;
        }
    }

    #[test]
    fn weighted_variance_cases() {
        let wm = SigmaWeights::unit(3);
        assert!((weighted_variance(&[0.4; 7], &wm) - 0.4).abs() < 1e-15);
        assert_eq!(weighted_variance(&[0.3, 5.0, 7.0], &[1.0, 0.0, 0.0]), 0.3);
        let vars = [0.2, 0.5, 0.1, 0.9, 0.3, 0.6, 0.25];
        let v = weighted_variance(&vars, &wm);
        assert!((0.1..=0.9).contains(&v));
    }

    struct SigmaWeights;
    impl SigmaWeights {
        fn unit(n: usize) -> Vec<f64> {
            crate::filters::SigmaScaling {
                alpha: 1.0,
                beta: 2.0,
                kappa: 2.0,
            }
            .weights(n)
            .0
        }
    }
}
