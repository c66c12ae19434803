//! Gaussian state estimation: the linear Kalman filter, the unscented
//! transform and the Unscented Kalman filter.
//!
//! All routines are pure functions of their inputs. Covariances returned by
//! any routine here are symmetrized as `(C + Cᵀ) / 2` and have their
//! diagonal clamped at zero, so long filter runs cannot drift into
//! asymmetric or negative-variance territory through rounding alone.
//!
//! Linear solves against innovation covariances go through a Cholesky
//! factorization guarded by a reciprocal-condition estimate; no explicit
//! inverse is ever formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal-condition threshold below which an SPD solve is refused.
pub const RCOND_MIN: f64 = 1e-12;

/// Diagonal jitter added once when a sigma-point square root fails.
pub const SQRT_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "GaussianBelief::new",
                expected: (n, n),
                actual: cov.shape(),
            });
        }
        Ok(Self {
            mean,
            cov: symmetrize(cov),
        })
    }

    /// Zero mean, identity covariance.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// One time step of `x' = A x + e_x`, `y = B x + e_y`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub transition: DMatrix<f64>,
    pub measurement: DMatrix<f64>,
    pub state_noise: DMatrix<f64>,
    pub measurement_noise: DMatrix<f64>,
}

impl LinearSystem {
    pub fn validate(&self) -> Result<()> {
        let n = self.transition.nrows();
        check_shape("LinearSystem transition", &self.transition, (n, n))?;
        check_shape("LinearSystem state noise", &self.state_noise, (n, n))?;
        let p = self.measurement.nrows();
        check_shape("LinearSystem measurement", &self.measurement, (p, n))?;
        check_shape("LinearSystem measurement noise", &self.measurement_noise, (p, p))
    }

    pub fn predict(&self, belief: &GaussianBelief) -> Result<GaussianBelief> {
        kf_predict(belief, &self.transition, &self.state_noise)
    }

    pub fn update(
        &self,
        pred: &GaussianBelief,
        y: &DVector<f64>,
    ) -> Result<(GaussianBelief, GainBundle)> {
        kf_update(pred, y, &self.measurement, &self.measurement_noise)
    }
}

/// Wan / van der Merwe scaling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaScaling {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaScaling {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl SigmaScaling {
    pub fn lambda(&self, n: usize) -> f64 {
        let n = n as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }

    /// Mean and covariance weight vectors for a state of dimension `n`.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let lambda = self.lambda(n);
        let c = n as f64 + lambda;
        let wi = 1.0 / (2.0 * c);
        let mut wm = vec![wi; 2 * n + 1];
        let mut wc = vec![wi; 2 * n + 1];
        wm[0] = lambda / c;
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

#[derive(Debug, Clone)]
pub struct SigmaSet {
    pub points: Vec<DVector<f64>>,
    pub wm: Vec<f64>,
    pub wc: Vec<f64>,
    pub scaling: SigmaScaling,
    pub lambda: f64,
}

impl SigmaSet {
    /// Same weights, points replaced (e.g. by their images under a map).
    pub fn map<F>(&self, f: F) -> SigmaSet
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        SigmaSet {
            points: self.points.iter().map(f).collect(),
            wm: self.wm.clone(),
            wc: self.wc.clone(),
            scaling: self.scaling,
            lambda: self.lambda,
        }
    }
}

/// Kalman gain together with the innovation statistics it was built from.
#[derive(Debug, Clone)]
pub struct GainBundle {
    pub gain: DMatrix<f64>,
    pub innovation_mean: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub cross_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UkfOptions {
    pub scaling: SigmaScaling,
    /// Reuse the propagated sigma points for the measurement stage instead of
    /// redrawing them from the predicted belief.
    pub propagate_sigma_points: bool,
}

#[derive(Debug, Clone)]
pub struct UkfOutput {
    pub filtered: GaussianBelief,
    pub predicted: GaussianBelief,
    pub gain: GainBundle,
}

pub fn symmetrize(mut c: DMatrix<f64>) -> DMatrix<f64> {
    let n = c.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        if c[(i, i)] < 0.0 {
            c[(i, i)] = 0.0;
        }
    }
    c
}

fn check_shape(context: &'static str, m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if m.shape() != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual: m.shape(),
        });
    }
    Ok(())
}

/// Cholesky factorization that refuses ill-conditioned matrices.
///
/// The reciprocal condition is estimated from the factor's diagonal,
/// `(min L_ii / max L_ii)²`.
pub fn spd_factor(m: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{context}: non-finite matrix entry")));
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::NumericalSingularity { context, rcond: 0.0 })?;
    let rcond = factor_rcond(chol.l_dirty());
    if rcond < RCOND_MIN {
        return Err(Error::NumericalSingularity { context, rcond });
    }
    Ok(chol)
}

fn factor_rcond(l: &DMatrix<f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..l.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi == 0.0 {
        0.0
    } else {
        (lo / hi).powi(2)
    }
}

pub fn kf_predict(
    belief: &GaussianBelief,
    transition: &DMatrix<f64>,
    state_noise: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let n = belief.dim();
    check_shape("kf_predict transition", transition, (n, n))?;
    check_shape("kf_predict state noise", state_noise, (n, n))?;
    let mean = transition * &belief.mean;
    let cov = transition * &belief.cov * transition.transpose() + state_noise;
    Ok(GaussianBelief {
        mean,
        cov: symmetrize(cov),
    })
}

pub fn kf_update(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    measurement: &DMatrix<f64>,
    measurement_noise: &DMatrix<f64>,
) -> Result<(GaussianBelief, GainBundle)> {
    let n = pred.dim();
    let p = y.len();
    check_shape("kf_update measurement", measurement, (p, n))?;
    check_shape("kf_update measurement noise", measurement_noise, (p, p))?;

    let b_cov = measurement * &pred.cov;
    let innovation_cov = symmetrize(&b_cov * measurement.transpose() + measurement_noise);
    let chol = spd_factor(&innovation_cov, "kf_update innovation covariance")?;
    // S Gᵀ = B Σ
    let gain = chol.solve(&b_cov).transpose();
    let innovation_mean = measurement * &pred.mean;
    let mean = &pred.mean + &gain * (y - &innovation_mean);
    let cov = (DMatrix::identity(n, n) - &gain * measurement) * &pred.cov;
    let cross_cov = b_cov.transpose();
    Ok((
        GaussianBelief {
            mean,
            cov: symmetrize(cov),
        },
        GainBundle {
            gain,
            innovation_mean,
            innovation_cov,
            cross_cov,
        },
    ))
}

pub fn sigma_points(belief: &GaussianBelief, scaling: SigmaScaling) -> Result<SigmaSet> {
    let n = belief.dim();
    let lambda = scaling.lambda(n);
    let c = n as f64 + lambda;
    if c <= 0.0 {
        return Err(Error::invalid(format!(
            "sigma scaling gives non-positive N + lambda = {c}"
        )));
    }
    let l = match Cholesky::new(belief.cov.clone()) {
        Some(ch) => ch.unpack(),
        None => {
            let jittered = &belief.cov + DMatrix::identity(n, n) * SQRT_JITTER;
            Cholesky::new(jittered)
                .ok_or(Error::NotPositiveDefinite("sigma_points"))?
                .unpack()
        }
    };
    let root = l * c.sqrt();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(belief.mean.clone());
    for i in 0..n {
        points.push(&belief.mean + root.column(i));
    }
    for i in 0..n {
        points.push(&belief.mean - root.column(i));
    }
    let (wm, wc) = scaling.weights(n);
    Ok(SigmaSet {
        points,
        wm,
        wc,
        scaling,
        lambda,
    })
}

/// Weighted mean of sigma points, accumulated relative to the first point.
///
/// Algebraically equal to `Σ wm_i p_i` (weights sum to one), but avoids the
/// cancellation between a large negative `wm_0` and the outer weights that
/// small `alpha` produces.
fn weighted_mean(points: &[DVector<f64>], wm: &[f64]) -> DVector<f64> {
    let p0 = &points[0];
    let mut acc = DVector::zeros(p0.len());
    for (p, w) in points.iter().zip(wm).skip(1) {
        acc += (p - p0) * *w;
    }
    p0 + acc
}

fn weighted_cross(
    a: &[DVector<f64>],
    a_mean: &DVector<f64>,
    b: &[DVector<f64>],
    b_mean: &DVector<f64>,
    wc: &[f64],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a_mean.len(), b_mean.len());
    for ((pa, pb), w) in a.iter().zip(b).zip(wc) {
        let da = pa - a_mean;
        let db = pb - b_mean;
        out.ger(*w, &da, &db, 1.0);
    }
    out
}

pub fn unscented_transform(
    transformed: &[DVector<f64>],
    wm: &[f64],
    wc: &[f64],
    additive_noise: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    if transformed.is_empty() || transformed.len() != wm.len() || wm.len() != wc.len() {
        return Err(Error::invalid(format!(
            "unscented_transform: {} points, {} mean weights, {} cov weights",
            transformed.len(),
            wm.len(),
            wc.len()
        )));
    }
    let d = transformed[0].len();
    if transformed.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("unscented_transform: ragged sigma points"));
    }
    check_shape("unscented_transform noise", additive_noise, (d, d))?;
    let mean = weighted_mean(transformed, wm);
    let cov = weighted_cross(transformed, &mean, transformed, &mean, wc) + additive_noise;
    Ok(GaussianBelief {
        mean,
        cov: symmetrize(cov),
    })
}

/// Time update: propagate sigma points of `belief` through `f`.
///
/// Returns the predicted belief and the propagated sigma set.
pub fn ukf_predict<F>(
    belief: &GaussianBelief,
    f: F,
    state_noise: &DMatrix<f64>,
    scaling: SigmaScaling,
) -> Result<(GaussianBelief, SigmaSet)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sigma = sigma_points(belief, scaling)?.map(f);
    let predicted = unscented_transform(&sigma.points, &sigma.wm, &sigma.wc, state_noise)?;
    if predicted.dim() != belief.dim() {
        return Err(Error::DimensionMismatch {
            context: "ukf_predict state map",
            expected: (belief.dim(), 1),
            actual: (predicted.dim(), 1),
        });
    }
    Ok((predicted, sigma))
}

/// Measurement update of a predicted belief.
///
/// When `propagated` is `Some`, those points (with their weights) are pushed
/// through `g`; otherwise fresh sigma points are drawn from `pred`.
pub fn ukf_update<G>(
    pred: &GaussianBelief,
    y: &DVector<f64>,
    g: G,
    measurement_noise: &DMatrix<f64>,
    scaling: SigmaScaling,
    propagated: Option<&SigmaSet>,
) -> Result<(GaussianBelief, GainBundle)>
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let drawn;
    let sigma = match propagated {
        Some(s) => s,
        None => {
            drawn = sigma_points(pred, scaling)?;
            &drawn
        }
    };
    let z: Vec<DVector<f64>> = sigma.points.iter().map(g).collect();
    let p = y.len();
    if z.iter().any(|zi| zi.len() != p) {
        return Err(Error::DimensionMismatch {
            context: "ukf_update measurement map",
            expected: (p, 1),
            actual: (z[0].len(), 1),
        });
    }
    check_shape("ukf_update measurement noise", measurement_noise, (p, p))?;

    let innovation_mean = weighted_mean(&z, &sigma.wm);
    let innovation_cov = symmetrize(
        weighted_cross(&z, &innovation_mean, &z, &innovation_mean, &sigma.wc) + measurement_noise,
    );
    let cross_cov = weighted_cross(&sigma.points, &pred.mean, &z, &innovation_mean, &sigma.wc);
    let chol = spd_factor(&innovation_cov, "ukf_update innovation covariance")?;
    let gain = chol.solve(&cross_cov.transpose()).transpose();
    let mean = &pred.mean + &gain * (y - &innovation_mean);
    let cov = &pred.cov - &gain * &innovation_cov * gain.transpose();
    Ok((
        GaussianBelief {
            mean,
            cov: symmetrize(cov),
        },
        GainBundle {
            gain,
            innovation_mean,
            innovation_cov,
            cross_cov,
        },
    ))
}

/// One full UKF cycle: predict through `f`, then update on `y` through `g`.
#[allow(clippy::too_many_arguments)]
pub fn ukf_step<F, G>(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    f: F,
    g: G,
    state_noise: &DMatrix<f64>,
    measurement_noise: &DMatrix<f64>,
    opts: UkfOptions,
) -> Result<UkfOutput>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let (predicted, propagated) = ukf_predict(belief, f, state_noise, opts.scaling)?;
    let reuse = opts.propagate_sigma_points.then_some(&propagated);
    let (filtered, gain) = ukf_update(&predicted, y, g, measurement_noise, opts.scaling, reuse)?;
    Ok(UkfOutput {
        filtered,
        predicted,
        gain,
    })
}
