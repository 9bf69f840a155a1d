use approx::assert_relative_eq;
use obsfit::bspline::BSplineBasis;
use obsfit::density::estimate_density;
use obsfit::experiment::{fit_fixed, ExperimentConfig, TimeConfig};
use obsfit::model_selection::{wasserstein2, wasserstein2_grid};
use obsfit::observation::{observe_ensemble, NoiseModel, ObservationFunction};
use obsfit::state_model::{simulate_ensemble, Coefficient, InitialDistribution, StateModelSpec, TimeGrid};

#[test]
fn deterministic_drift_integrates_exactly() {
    let model = StateModelSpec::new("shift", Coefficient::constant(1.0), Coefficient::constant(0.0));
    let grid = TimeGrid::new(0.01, 100).unwrap();
    let x = simulate_ensemble(&model, &InitialDistribution::PointMass(0.0), grid, 7, 1).unwrap();
    for m in 0..7 {
        assert_relative_eq!(x.get(m, 100), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn sine_observation_is_pointwise() {
    let grid = TimeGrid::new(0.01, 10).unwrap();
    let x = simulate_ensemble(&StateModelSpec::brownian(), &InitialDistribution::PointMass(0.5), grid, 50, 9).unwrap();
    let y = observe_ensemble(&x, &ObservationFunction::Sine, &NoiseModel::None, 2).unwrap();
    for m in 0..50 {
        for l in 0..=10 {
            assert_eq!(x.get(m, l).sin(), y.get(m, l));
        }
    }
}

#[test]
fn density_projection_recovers_a_spline() {
    let grid = TimeGrid::new(0.01, 50).unwrap();
    let x = simulate_ensemble(&StateModelSpec::double_well(), &InitialDistribution::double_well_default(), grid, 2000, 5)
        .unwrap();
    let density = estimate_density(&x, 400).unwrap();
    let basis = BSplineBasis::new(0, 8, density.r_min, density.r_max).unwrap();
    let target: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
    let vals = density.sample(|r| basis.eval(r).values.iter().zip(&target).map(|(b, c)| b * c).sum());
    let c = density.project(&basis, &vals).unwrap();
    for (ci, ti) in c.iter().zip(&target) {
        assert_relative_eq!(*ci, *ti, epsilon = 1e-8);
    }
}

#[test]
fn quantile_grid_w2_tracks_exact_w2() {
    let a: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.53).cos() + 0.2).collect();
    let exact = wasserstein2(&a, &b).unwrap();
    let grid = wasserstein2_grid(&a, &b, 1000).unwrap();
    assert_relative_eq!(exact, grid, max_relative = 1e-9);
}

#[test]
fn small_fixed_fit_is_reasonable() {
    let cfg = ExperimentConfig {
        observation: "sine".into(),
        paths: 5000,
        seed: 2,
        time: TimeConfig { dt: 0.01, steps: 50 },
        ..ExperimentConfig::default()
    };
    let exp = cfg.resolve().unwrap();
    let fit = fit_fixed(&exp, 1, 5).unwrap();
    assert!(fit.relative_error.is_finite());
    assert!(fit.relative_error < 0.5, "relative error {}", fit.relative_error);
    let again = fit_fixed(&exp, 1, 5).unwrap();
    assert_eq!(fit.estimator.coefficients, again.estimator.coefficients);
}
