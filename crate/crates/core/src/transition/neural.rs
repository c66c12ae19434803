//! One-hidden-layer perceptron forecasting the next value of a scalar series
//! from its last `lags` values, with a second head for log-variance.
//!
//! Training minimizes the Gaussian negative log-likelihood plus an L2 penalty
//! on the weight matrices, full batch, with Adam steps. Inputs and targets are
//! standardized by the training series' mean and standard deviation; the
//! stored model maps raw values to raw mean and raw variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VARIANCE_FLOOR;
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub lags: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            lags: 10,
            hidden: 32,
            dropout: 0.1,
            l2: 1e-5,
            epochs: 500,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralARModel {
    pub version: u32,
    pub lags: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub l2: f64,
    pub shift: f64,
    pub scale: f64,
    /// `hidden × lags`, row-major.
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub w_mean: Vec<f64>,
    pub b_mean: f64,
    pub w_logvar: Vec<f64>,
    pub b_logvar: f64,
    /// Training objective after each epoch.
    pub loss_history: Vec<f64>,
}

const LOGVAR_CLAMP: f64 = 30.0;

impl NeuralARModel {
    /// Raw-unit mean and variance; no input validation.
    pub(crate) fn forward(&self, window: &[f64]) -> (f64, f64) {
        let (h, l) = (self.hidden, self.lags);
        let mut mu = self.b_mean;
        let mut lv = self.b_logvar;
        for j in 0..h {
            let row = &self.w_hidden[j * l..(j + 1) * l];
            let mut z = self.b_hidden[j];
            for (w, x) in row.iter().zip(window) {
                z += w * (x - self.shift) / self.scale;
            }
            let a = z.tanh();
            mu += self.w_mean[j] * a;
            lv += self.w_logvar[j] * a;
        }
        let lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        let mean = mu * self.scale + self.shift;
        let var = (lv.exp() * self.scale * self.scale).max(VARIANCE_FLOOR);
        (mean, var)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        if model.version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported neural model format version {}",
                model.version
            )));
        }
        let ok = model.w_hidden.len() == model.hidden * model.lags
            && model.b_hidden.len() == model.hidden
            && model.w_mean.len() == model.hidden
            && model.w_logvar.len() == model.hidden;
        if !ok {
            return Err(Error::invalid("neural model weight shapes inconsistent"));
        }
        Ok(model)
    }
}

pub fn neural_predict(model: &NeuralARModel, window: &[f64]) -> Result<(f64, f64)> {
    if window.len() != model.lags {
        return Err(Error::DimensionMismatch {
            context: "neural_predict window",
            expected: (model.lags, 1),
            actual: (window.len(), 1),
        });
    }
    if window.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("neural_predict: non-finite input"));
    }
    Ok(model.forward(window))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Flat parameter layout: `[w_hidden | b_hidden | w_mean | b_mean | w_logvar | b_logvar]`.
struct Layout {
    h: usize,
    l: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.h * self.l + 3 * self.h + 2
    }
    fn b_hidden(&self) -> usize {
        self.h * self.l
    }
    fn w_mean(&self) -> usize {
        self.b_hidden() + self.h
    }
    fn b_mean(&self) -> usize {
        self.w_mean() + self.h
    }
    fn w_logvar(&self) -> usize {
        self.b_mean() + 1
    }
    fn b_logvar(&self) -> usize {
        self.w_logvar() + self.h
    }
}

/// Fit on (window of `lags` values, most recent first) → next value pairs.
pub fn neural_fit(series: &[f64], cfg: &NeuralConfig, seed: u64) -> Result<NeuralARModel> {
    let l = cfg.lags;
    if l == 0 || cfg.hidden == 0 {
        return Err(Error::invalid("neural model needs lags ≥ 1 and hidden ≥ 1"));
    }
    if series.len() <= l + 1 {
        return Err(Error::InsufficientHistory {
            needed: l + 2,
            available: series.len(),
        });
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("neural_fit: non-finite series value"));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::invalid(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }

    let n = series.len();
    let shift = series.iter().sum::<f64>() / n as f64;
    let sd = (series.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = sd.max(1e-12);
    let z: Vec<f64> = series.iter().map(|v| (v - shift) / scale).collect();

    let samples = n - l;
    let mut inputs = vec![0.0; samples * l];
    let mut targets = vec![0.0; samples];
    for s in 0..samples {
        let t = s + l;
        for i in 0..l {
            inputs[s * l + i] = z[t - 1 - i];
        }
        targets[s] = z[t];
    }

    let h = cfg.hidden;
    let lay = Layout { h, l };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; lay.len()];
    let lim1 = (6.0 / (l + h) as f64).sqrt();
    for p in &mut params[..lay.b_hidden()] {
        *p = rng.random_range(-lim1..lim1);
    }
    let lim2 = (6.0 / (h + 1) as f64).sqrt();
    for p in &mut params[lay.w_mean()..lay.b_mean()] {
        *p = rng.random_range(-lim2..lim2);
    }
    for p in &mut params[lay.w_logvar()..lay.b_logvar()] {
        *p = rng.random_range(-lim2..lim2);
    }

    let keep = 1.0 - cfg.dropout;
    let mut adam = Adam::new(lay.len(), cfg.learning_rate);
    let mut grad = vec![0.0; lay.len()];
    let mut mask = vec![1.0; h];
    let mut act = vec![0.0; h];
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let inv_b = 1.0 / samples as f64;

    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for s in 0..samples {
            for m in mask.iter_mut() {
                *m = if cfg.dropout > 0.0 && rng.random::<f64>() < cfg.dropout {
                    0.0
                } else {
                    1.0 / keep
                };
            }
            let x = &inputs[s * l..(s + 1) * l];
            let mut mu = params[lay.b_mean()];
            let mut lv = params[lay.b_logvar()];
            for j in 0..h {
                let row = &params[j * l..(j + 1) * l];
                let zj = params[lay.b_hidden() + j] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                act[j] = zj.tanh();
                let a = act[j] * mask[j];
                mu += params[lay.w_mean() + j] * a;
                lv += params[lay.w_logvar() + j] * a;
            }
            let lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            let prec = (-lv).exp();
            let err = mu - targets[s];
            loss += 0.5 * (lv + err * err * prec) * inv_b;

            let d_mu = err * prec * inv_b;
            let d_lv = 0.5 * (1.0 - err * err * prec) * inv_b;
            grad[lay.b_mean()] += d_mu;
            grad[lay.b_logvar()] += d_lv;
            for j in 0..h {
                let a = act[j] * mask[j];
                grad[lay.w_mean() + j] += d_mu * a;
                grad[lay.w_logvar() + j] += d_lv * a;
                let d_a = (d_mu * params[lay.w_mean() + j] + d_lv * params[lay.w_logvar() + j]) * mask[j];
                let d_z = d_a * (1.0 - act[j] * act[j]);
                grad[lay.b_hidden() + j] += d_z;
                for (g, xi) in grad[j * l..(j + 1) * l].iter_mut().zip(x) {
                    *g += d_z * xi;
                }
            }
        }
        let mut penalty = 0.0;
        for range in [0..lay.b_hidden(), lay.w_mean()..lay.b_mean(), lay.w_logvar()..lay.b_logvar()] {
            for i in range {
                penalty += params[i] * params[i];
                grad[i] += 2.0 * cfg.l2 * params[i];
            }
        }
        loss_history.push(loss + cfg.l2 * penalty);
        adam.step(&mut params, &grad);
    }

    Ok(NeuralARModel {
        version: MODEL_FORMAT_VERSION,
        lags: l,
        hidden: h,
        dropout: cfg.dropout,
        l2: cfg.l2,
        shift,
        scale,
        w_hidden: params[..lay.b_hidden()].to_vec(),
        b_hidden: params[lay.b_hidden()..lay.w_mean()].to_vec(),
        w_mean: params[lay.w_mean()..lay.b_mean()].to_vec(),
        b_mean: params[lay.b_mean()],
        w_logvar: params[lay.w_logvar()..lay.b_logvar()].to_vec(),
        b_logvar: params[lay.b_logvar()],
        loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> NeuralConfig {
        NeuralConfig {
            epochs: 60,
            ..NeuralConfig::default()
        }
    }

    #[test]
    fn too_short_series_errors() {
        let err = neural_fit(&[0.0; 11], &NeuralConfig::default(), 1);
        assert!(matches!(err, Err(Error::InsufficientHistory { needed: 12, .. })));
    }

    #[test]
    fn predict_validates_window() {
        let m = neural_fit(&[0.1; 40], &quick(), 3).unwrap();
        assert!(neural_predict(&m, &[0.0; 9]).is_err());
        let mut w = [0.0; 10];
        w[4] = f64::NAN;
        assert!(matches!(neural_predict(&m, &w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_series_predicts_zero_with_floor_variance() {
        let m = neural_fit(&[0.0; 200], &NeuralConfig::default(), 7).unwrap();
        let (mu, var) = neural_predict(&m, &[0.0; 10]).unwrap();
        assert!(mu.abs() < 1e-12);
        assert_eq!(var, VARIANCE_FLOOR);
        let hist = &m.loss_history;
        let head = hist[..50].iter().sum::<f64>() / 50.0;
        let tail = hist[hist.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head);
    }

    #[test]
    fn fit_is_bit_reproducible() {
        let series: Vec<f64> = (0..300).map(|k| (k as f64 * 0.37).sin() * 0.01).collect();
        let a = neural_fit(&series, &quick(), 11).unwrap();
        let b = neural_fit(&series, &quick(), 11).unwrap();
        assert_eq!(a, b);
        let c = neural_fit(&series, &quick(), 12).unwrap();
        assert_ne!(a.w_hidden, c.w_hidden);
    }

    #[test]
    fn json_round_trip() {
        let series: Vec<f64> = (0..100).map(|k| (k as f64 * 0.5).cos()).collect();
        let m = neural_fit(&series, &quick(), 2).unwrap();
        let back = NeuralARModel::from_json(&m.to_json().unwrap()).unwrap();
        let w: Vec<f64> = series[..10].to_vec();
        assert_eq!(neural_predict(&m, &w).unwrap(), neural_predict(&back, &w).unwrap());

        let mut bad = m.clone();
        bad.version = 99;
        assert!(NeuralARModel::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }
}
