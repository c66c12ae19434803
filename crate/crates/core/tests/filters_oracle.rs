mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statarb_core::filters::*;

/// Explicit Gaussian algebra on the stacked vector z = (x0, w_1..w_T, v_1..v_T).
///
/// `x_k = A^k x0 + Σ_j A^{k-j} w_j`, `y_k = B x_k + v_k`. Returns the linear
/// maps from z to x_T and to the stacked measurements, plus mean/cov of z.
struct Stacked {
    x_last: DMatrix<f64>,
    ys: DMatrix<f64>,
    z_mean: DVector<f64>,
    z_cov: DMatrix<f64>,
}

fn stack(sys: &LinearSystem, prior: &GaussianBelief, steps: usize) -> Stacked {
    let n = prior.dim();
    let p = sys.measurement.nrows();
    let dim = n + steps * n + steps * p;
    let mut z_cov = DMatrix::zeros(dim, dim);
    let mut z_mean = DVector::zeros(dim);
    z_mean.rows_mut(0, n).copy_from(&prior.mean);
    z_cov.view_mut((0, 0), (n, n)).copy_from(&prior.cov);
    for k in 0..steps {
        let o = n + k * n;
        z_cov.view_mut((o, o), (n, n)).copy_from(&sys.state_noise);
        let o = n + steps * n + k * p;
        z_cov.view_mut((o, o), (p, p)).copy_from(&sys.measurement_noise);
    }
    let mut x_map = DMatrix::zeros(n, dim);
    x_map.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    let mut ys = DMatrix::zeros(steps * p, dim);
    for k in 0..steps {
        x_map = &sys.transition * x_map;
        let o = n + k * n;
        for i in 0..n {
            x_map[(i, o + i)] += 1.0;
        }
        let mut y_rows = &sys.measurement * &x_map;
        let ov = n + steps * n + k * p;
        for i in 0..p {
            y_rows[(i, ov + i)] += 1.0;
        }
        ys.view_mut((k * p, 0), (p, dim)).copy_from(&y_rows);
    }
    Stacked {
        x_last: x_map,
        ys,
        z_mean,
        z_cov,
    }
}

fn simulate(sys: &LinearSystem, prior: &GaussianBelief, steps: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut r = rng(seed);
    let mut x = &prior.mean + gaussian_draw(&prior.cov, &mut r);
    (0..steps)
        .map(|_| {
            x = &sys.transition * &x + gaussian_draw(&sys.state_noise, &mut r);
            &sys.measurement * &x + gaussian_draw(&sys.measurement_noise, &mut r)
        })
        .collect()
}

fn run_kf(sys: &LinearSystem, prior: &GaussianBelief, ys: &[DVector<f64>]) -> GaussianBelief {
    ys.iter().fold(prior.clone(), |b, y| {
        let pred = sys.predict(&b).unwrap();
        sys.update(&pred, y).unwrap().0
    })
}

#[test]
fn predict_chain_matches_joint_marginal() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let sys = random_system(3, 2, &mut r);
        let prior = random_belief(3, &mut r);
        let steps = 100;
        let mut b = prior.clone();
        for _ in 0..steps {
            b = sys.predict(&b).unwrap();
        }
        let st = stack(&sys, &prior, steps);
        let mean = &st.x_last * &st.z_mean;
        let cov = &st.x_last * &st.z_cov * st.x_last.transpose();
        assert!((b.mean - mean).amax() < 1e-10);
        assert!(max_abs(&(b.cov - cov)) < 1e-10);
    }
}

#[test]
fn single_update_matches_bayes_conditioning() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let pred = random_belief(2, &mut r);
        let b = uniform_matrix(2, 2, &mut r);
        let omega = random_spd(2, 0.1, &mut r);
        let y = uniform_vector(2, &mut r);
        let (post, _) = kf_update(&pred, &y, &b, &omega).unwrap();

        let sxy = &pred.cov * b.transpose();
        let syy = &b * &pred.cov * b.transpose() + &omega;
        let syy_inv = syy.try_inverse().unwrap();
        let mean = &pred.mean + &sxy * &syy_inv * (&y - &b * &pred.mean);
        let cov = &pred.cov - &sxy * &syy_inv * sxy.transpose();
        assert!((post.mean - mean).amax() < 1e-10);
        assert!(max_abs(&(post.cov - cov)) < 1e-10);
    }
}

#[test]
fn filter_run_matches_joint_conditioning() {
    for (seed, n) in (0..12).zip([1usize, 2, 3].into_iter().cycle()) {
        let mut r = rng(200 + seed);
        let p = 1 + (seed as usize % 2);
        let sys = random_system(n, p, &mut r);
        let prior = random_belief(n, &mut r);
        let steps = 8;
        let ys = simulate(&sys, &prior, steps, seed);
        let kf = run_kf(&sys, &prior, &ys);

        let st = stack(&sys, &prior, steps);
        let y_all = DVector::from_iterator(steps * p, ys.iter().flat_map(|y| y.iter().copied()));
        let cxy = &st.x_last * &st.z_cov * st.ys.transpose();
        let cyy = &st.ys * &st.z_cov * st.ys.transpose();
        let cyy_inv = cyy.try_inverse().unwrap();
        let mean = &st.x_last * &st.z_mean + &cxy * &cyy_inv * (y_all - &st.ys * &st.z_mean);
        let cov = &st.x_last * &st.z_cov * st.x_last.transpose() - &cxy * &cyy_inv * cxy.transpose();
        assert!((kf.mean - mean).amax() < 1e-10, "seed {seed}");
        assert!(max_abs(&(kf.cov - cov)) < 1e-10, "seed {seed}");
    }
}

#[test]
fn ukf_reproduces_kf_on_affine_systems() {
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let n = 1 + seed as usize % 6;
        let p = 1 + seed as usize % 3;
        let sys = random_system(n, p, &mut r);
        let prior = random_belief(n, &mut r);
        let ys = simulate(&sys, &prior, 1000, seed);
        let (mut kf, mut ukf) = (prior.clone(), prior.clone());
        for y in &ys {
            let pred = sys.predict(&kf).unwrap();
            kf = sys.update(&pred, y).unwrap().0;
            let out = ukf_step(
                &ukf,
                y,
                |x| &sys.transition * x,
                |x| &sys.measurement * x,
                &sys.state_noise,
                &sys.measurement_noise,
                UkfOptions::default(),
            )
            .unwrap();
            assert!((&out.predicted.mean - &pred.mean).amax() < 1e-8);
            ukf = out.filtered;
            assert!((&ukf.mean - &kf.mean).amax() < 1e-8, "seed {seed}");
            assert!(max_abs(&(&ukf.cov - &kf.cov)) < 1e-8, "seed {seed}");
        }
    }
}

#[test]
fn unscented_transform_exact_on_affine_maps() {
    for seed in 0..50 {
        let mut r = rng(400 + seed);
        let n = 1 + seed as usize % 5;
        let d = 1 + seed as usize % 4;
        let belief = random_belief(n, &mut r);
        let a = uniform_matrix(d, n, &mut r);
        let c = uniform_vector(d, &mut r);
        let noise = random_spd(d, 0.01, &mut r);
        let set = sigma_points(&belief, SigmaScaling::default()).unwrap().map(|x| &a * x + &c);
        let out = unscented_transform(&set.points, &set.wm, &set.wc, &noise).unwrap();
        assert!((out.mean - (&a * &belief.mean + &c)).amax() < 1e-9);
        let cov = &a * &belief.cov * a.transpose() + &noise;
        assert!(max_abs(&(out.cov - cov)) < 1e-9);
    }
}

#[test]
fn orthogonal_recoordinatization_commutes_with_filter() {
    for seed in 0..5 {
        let mut r = rng(500 + seed);
        let n = 3;
        let sys = random_system(n, 2, &mut r);
        let prior = random_belief(n, &mut r);
        let q = uniform_matrix(n, n, &mut r).qr().q();
        let rotated = LinearSystem {
            transition: &q * &sys.transition * q.transpose(),
            measurement: &sys.measurement * q.transpose(),
            state_noise: &q * &sys.state_noise * q.transpose(),
            measurement_noise: sys.measurement_noise.clone(),
        };
        let rprior = GaussianBelief::new(&q * &prior.mean, &q * &prior.cov * q.transpose()).unwrap();
        let ys = simulate(&sys, &prior, 200, seed);
        let a = run_kf(&sys, &prior, &ys);
        let b = run_kf(&rotated, &rprior, &ys);
        assert!((&q * a.mean - b.mean).amax() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigma_set_reconstructs_belief(seed in 0u64..10_000, n in 1usize..7) {
        let mut r = rng(seed);
        let belief = random_belief(n, &mut r);
        let set = sigma_points(&belief, SigmaScaling::default()).unwrap();
        prop_assert_eq!(&set.points[0], &belief.mean);
        for i in 1..=n {
            let sum = &set.points[i] + &set.points[i + n];
            prop_assert!((sum * 0.5 - &belief.mean).amax() < 1e-12);
        }
        let out = unscented_transform(&set.points, &set.wm, &set.wc, &DMatrix::zeros(n, n)).unwrap();
        // Outer weights are O(1/alpha^2), so point rounding (eps·|mean|) is
        // amplified; alpha = 1 below checks the exact case.
        prop_assert!((out.mean - &belief.mean).amax() < 1e-10);
        prop_assert!(max_abs(&(out.cov - &belief.cov)) < 1e-9);

        let unit = SigmaScaling { alpha: 1.0, beta: 2.0, kappa: 0.0 };
        let set = sigma_points(&belief, unit).unwrap();
        let out = unscented_transform(&set.points, &set.wm, &set.wc, &DMatrix::zeros(n, n)).unwrap();
        prop_assert!((out.mean - &belief.mean).amax() < 1e-14);
    }

    #[test]
    fn filter_covariances_symmetric_nonnegative(seed in 0u64..10_000, n in 1usize..5, p in 1usize..4) {
        let mut r = rng(seed);
        let sys = random_system(n, p, &mut r);
        let prior = random_belief(n, &mut r);
        let ys = simulate(&sys, &prior, 30, seed);
        let mut b = prior;
        for y in &ys {
            let out = ukf_step(&b, y, |x| &sys.transition * x, |x| &sys.measurement * x,
                &sys.state_noise, &sys.measurement_noise, UkfOptions::default()).unwrap();
            for c in [&out.filtered.cov, &out.predicted.cov] {
                prop_assert!(max_abs(&(c - c.transpose())) <= 1e-10);
                prop_assert!(c.diagonal().iter().all(|v| *v >= 0.0));
            }
            b = out.filtered;
        }
    }
}
