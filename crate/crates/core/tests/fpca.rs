use approx::assert_abs_diff_eq;
use pilotdesign_core::fpca::*;
use pilotdesign_core::sim::{simulate_dataset, SimConfig};

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix, returned in
/// decreasing eigenvalue order with eigenvectors as columns.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

fn dense_options() -> FitOptions {
    FitOptions { include_diagonal: true, ..FitOptions::default() }
}

fn two_component_config() -> SimConfig {
    SimConfig { eigenvalues: vec![4.0, 1.0], sigma_e2: 0.0, master_seed: 11, ..SimConfig::default() }
}

#[test]
fn eigenpairs_match_an_independent_weighted_decomposition() {
    let config = SimConfig { grid_points: 5, eigenvalues: vec![3.0, 1.0], sigma_e2: 0.0, ..SimConfig::default() };
    let data = simulate_dataset(&config, 0, 60);
    let fit = fit_pace(
        &SparseDataset::from_dense(config.grid(), &data.u).unwrap(),
        &FitOptions { fve_threshold: 1.0, ..dense_options() },
    )
    .unwrap();
    let w = trapezoid_weights(&fit.grid);
    let a: Vec<Vec<f64>> =
        (0..5).map(|j| (0..5).map(|k| w[j].sqrt() * fit.covariance_at(j, k) * w[k].sqrt()).collect()).collect();
    let (values, vectors) = jacobi(a);
    assert!(fit.components() >= 1);
    for m in 0..fit.components() {
        assert_abs_diff_eq!(fit.eigenvalues[m], values[m], epsilon = 1e-9 * values[0]);
        let psi: Vec<f64> = (0..5).map(|j| vectors[m][j] / w[j].sqrt()).collect();
        let align = inner_product(&w, &psi, &fit.eigenfunctions[m]);
        assert_abs_diff_eq!(align.abs(), 1.0, epsilon = 1e-8);
    }
}

#[test]
fn dense_noiseless_two_component_recovery() {
    let config = two_component_config();
    let data = simulate_dataset(&config, 0, 200);
    let grid = config.grid();
    let fit = fit_pace(&SparseDataset::from_dense(grid.clone(), &data.u).unwrap(), &dense_options()).unwrap();
    assert!(fit.components() >= 2);
    let w = trapezoid_weights(&grid);
    let truth = config.true_model().unwrap();
    // eigenvalues are compared with the variance of the realised scores, so
    // the check is not dominated by the sampling error of 200 draws
    for m in 0..2 {
        let psi = &truth.eigenfunctions[m];
        let scores: Vec<f64> = data
            .x
            .iter()
            .map(|x| {
                let r: Vec<f64> = x.iter().zip(&truth.mean).map(|(a, b)| a - b).collect();
                inner_product(&w, &r, psi)
            })
            .collect();
        let mean = scores.iter().sum::<f64>() / 200.0;
        let realised = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / 199.0;
        let rel = (fit.eigenvalues[m] - realised).abs() / realised;
        assert!(rel < 0.05, "component {m}: {} vs realised {realised}", fit.eigenvalues[m]);
        let align = inner_product(&w, &fit.eigenfunctions[m], psi).abs();
        assert!(align >= 0.99, "component {m}: alignment {align}");
    }
}

#[test]
fn fitted_eigenfunctions_are_orthonormal_and_the_fit_is_deterministic() {
    let config = SimConfig { master_seed: 5, ..SimConfig::default() };
    let data = simulate_dataset(&config, 2, 150);
    let sparse = SparseDataset::from_dense(config.grid(), &data.u).unwrap();
    let a = fit_pace(&sparse, &FitOptions::default()).unwrap();
    let b = fit_pace(&sparse, &FitOptions::default()).unwrap();
    assert_eq!(a, b);
    let w = trapezoid_weights(&a.grid);
    for i in 0..a.components() {
        for j in 0..=i {
            let target = if i == j { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(inner_product(&w, &a.eigenfunctions[i], &a.eigenfunctions[j]), target, epsilon = 1e-6);
        }
    }
    assert!(a.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
    assert!(a.sigma_e2 >= 0.0);
}

#[test]
fn constant_input_has_no_components() {
    let grid: Vec<f64> = (0..8).map(|j| j as f64 / 7.0).collect();
    let rows = vec![vec![-1.25; 8]; 12];
    let fit = fit_pace(&SparseDataset::from_dense(grid, &rows).unwrap(), &FitOptions::default()).unwrap();
    assert_eq!(fit.components(), 0);
    assert!(fit.sigma_e2.abs() < 1e-20);
    assert!(fit.mean.iter().all(|&m| (m + 1.25).abs() < 1e-12));
    let s = SubjectObs::new(vec![1, 4], vec![3.0, 2.0]).unwrap();
    assert!(fit.predict_scores(&s).unwrap().is_empty());
}

fn known_model(sigma2: f64) -> FpcaModel {
    SimConfig { sigma_e2: sigma2, ..SimConfig::default() }.true_model().unwrap()
}

#[test]
fn scalar_scores_follow_the_closed_form() {
    let base = known_model(0.96875);
    for t in [0, 3, 11, 24] {
        let m = FpcaModel::from_components(
            base.grid.clone(),
            base.mean.clone(),
            vec![base.eigenvalues[0]],
            vec![base.eigenfunctions[0].clone()],
            base.sigma_e2,
        )
        .unwrap();
        let u = base.mean[t] + 1.3;
        let xi = m.predict_scores(&SubjectObs::new(vec![t], vec![u]).unwrap()).unwrap();
        let (lam, psi) = (m.eigenvalues[0], m.eigenfunctions[0][t]);
        let expected = lam * psi * (u - m.mean[t]) / (lam * psi * psi + m.sigma_e2);
        assert_abs_diff_eq!(xi[0], expected, epsilon = 1e-12);
    }
}

#[test]
fn scores_vanish_at_the_mean_and_shrink_with_noise() {
    let idx = vec![1, 6, 12, 17, 22];
    let quiet = known_model(0.1);
    let at_mean: Vec<f64> = idx.iter().map(|&j| quiet.mean[j]).collect();
    let zero = quiet.predict_scores(&SubjectObs::new(idx.clone(), at_mean).unwrap()).unwrap();
    assert!(zero.iter().all(|&s| s == 0.0));

    let values: Vec<f64> = idx.iter().map(|&j| quiet.mean[j] + 2.0 * quiet.eigenfunctions[0][j]).collect();
    let s = SubjectObs::new(idx, values).unwrap();
    let mut last = f64::INFINITY;
    for sigma2 in [0.1, 1.0, 10.0, 100.0, 1e4] {
        let xi = known_model(sigma2).predict_scores(&s).unwrap();
        let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < last);
        last = norm;
    }
    assert!(last < 0.05);
}

#[test]
fn full_observation_interpolates_as_noise_vanishes() {
    // small enough to be negligible, large enough that no ridge is needed
    let model = known_model(1e-9);
    let scores = [1.5, -0.7, 0.4, 0.0, -1.1];
    let x = model.recover_trajectory(&scores).unwrap();
    let s = SubjectObs::new((0..25).collect(), x.clone()).unwrap();
    let xi = model.predict_scores(&s).unwrap();
    let back = model.recover_trajectory(&xi).unwrap();
    for (a, b) in back.iter().zip(&x) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }
}

#[test]
fn trajectories_are_affine_in_the_scores() {
    let model = known_model(0.5);
    let s1 = [0.3, -1.0, 2.0, 0.1, 0.0];
    let s2 = [-1.2, 0.5, 0.0, 0.7, 1.1];
    let (a, b) = (1.7, -0.4);
    let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
    let r1 = model.recover_trajectory(&s1).unwrap();
    let r2 = model.recover_trajectory(&s2).unwrap();
    let rm = model.recover_trajectory(&mix).unwrap();
    for j in 0..25 {
        assert_abs_diff_eq!(rm[j], a * r1[j] + b * r2[j] - (a + b - 1.0) * model.mean[j], epsilon = 1e-12);
    }
    assert_eq!(model.recover_trajectory(&[0.0; 5]).unwrap(), model.mean);
}

#[test]
fn true_scores_reproduce_the_curve() {
    let config = SimConfig::default();
    let model = config.true_model().unwrap();
    let data = simulate_dataset(&config, 1, 3);
    let w = trapezoid_weights(&model.grid);
    for x in &data.x {
        let r: Vec<f64> = x.iter().zip(&model.mean).map(|(a, b)| a - b).collect();
        let scores: Vec<f64> = model.eigenfunctions.iter().map(|p| inner_product(&w, &r, p)).collect();
        let back = model.recover_trajectory(&scores).unwrap();
        // quadrature orthonormality on 25 points is approximate
        for (a, b) in back.iter().zip(x) {
            assert_abs_diff_eq!(a, b, epsilon = 0.05);
        }
    }
}
