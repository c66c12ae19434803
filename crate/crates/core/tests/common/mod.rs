#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statarb_core::filters::{GaussianBelief, LinearSystem};
use statarb_core::market_data::{ExposureSet, FactorPanel, PanelOptions, RawPanel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_vector(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// `M Mᵀ + floor·I`, well conditioned for small `n`.
pub fn random_spd(n: usize, floor: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = uniform_matrix(n, n, rng);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// Stable-ish random system: transition scaled to spectral norm below one.
pub fn random_system(n: usize, p: usize, rng: &mut ChaCha8Rng) -> LinearSystem {
    let a = uniform_matrix(n, n, rng);
    let norm = a.norm();
    LinearSystem {
        transition: a * (0.95 / norm.max(1.0)),
        measurement: uniform_matrix(p, n, rng),
        state_noise: random_spd(n, 0.05, rng) * 0.1,
        measurement_noise: random_spd(p, 0.1, rng) * 0.2,
    }
}

pub fn random_belief(n: usize, rng: &mut ChaCha8Rng) -> GaussianBelief {
    GaussianBelief::new(uniform_vector(n, rng), random_spd(n, 0.1, rng)).unwrap()
}

/// Draw from N(0, cov) through a Cholesky factor.
pub fn gaussian_draw(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let l = cov.clone().cholesky().expect("spd").unpack();
    let z = DVector::from_fn(cov.nrows(), |_, _| StandardNormal.sample(rng));
    l * z
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

/// Panel over explicit total returns (rf = 0) with a single unit exposure.
pub fn fixture_panel(returns: &DMatrix<f64>, start: chrono::NaiveDate) -> FactorPanel {
    let (t, n) = returns.shape();
    let dates: Vec<chrono::NaiveDate> = start.iter_days().filter(|d| {
        use chrono::Datelike;
        d.weekday().number_from_monday() <= 5
    }).take(t).collect();
    let raw = RawPanel {
        dates,
        asset_ids: (0..n).map(|i| format!("A{i}")).collect(),
        close: DMatrix::from_element(t, n, 10.0),
        shares: DMatrix::from_element(t, n, 1.0),
        total_return: returns.clone(),
        eps: DMatrix::from_element(t, n, f64::NAN),
        listed: DMatrix::from_element(t, n, true),
        present: DMatrix::from_element(t, n, true),
        index_total_return: vec![0.0; t],
        risk_free_annual: vec![0.0; t],
    };
    let set = ExposureSet {
        names: vec!["x1".into()],
        values: vec![DMatrix::from_element(t, n, 1.0)],
        beta: DMatrix::from_element(t, n, 1.0),
    };
    let opts = PanelOptions { standardize: false, ..PanelOptions::default() };
    FactorPanel::from_parts(&raw, &set, &opts).unwrap()
}
