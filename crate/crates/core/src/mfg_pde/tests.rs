use super::*;
use crate::empirical::moment_of_density;
use crate::model::functions::{scalar, vector};
use crate::model::{
    classify_regime, ComponentField, MomentPolynomial, ScalarForm, ScalingExponents,
};

fn grid(n: usize) -> Grid {
    Grid::uniform(&[-2.0], &[2.0], n).unwrap()
}

fn flags(a: f64, t: f64, ab: f64, tb: f64) -> RegimeFlags {
    classify_regime(&ScalingExponents::new(a, t, ab, tb).unwrap())
}

fn classical() -> RegimeFlags {
    flags(0.0, 0.0, 2.0, 2.0)
}

fn non_local() -> RegimeFlags {
    flags(0.0, 0.0, 1.0, 1.0)
}

fn gaussian(g: &Grid, std: f64) -> Vec<f64> {
    InitialDensity::gaussian_1d(0.0, std).discretize(g).unwrap()
}

fn quadratic_x(weight: f64) -> ScalarForm {
    ScalarForm::Quadratic {
        constant: 0.0,
        linear: vec![0.0, 0.0],
        hessian: vec![vec![weight, 0.0], vec![0.0, 0.0]],
    }
}

fn lq_spec() -> ModelSpec {
    ModelSpec::builder(1, 1.0)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .running_cost(scalar(quadratic_x(1.0)))
        .build()
        .unwrap()
}

/// Classical RK4 on `k' = k^2 / alpha - q`, backward from `k(T) = 0`.
fn riccati_k0(alpha: f64, q: f64, horizon: f64, steps: usize) -> f64 {
    let rhs = |k: f64| k * k / alpha - q;
    let h = -horizon / steps as f64;
    let mut k = 0.0;
    for _ in 0..steps {
        let a = rhs(k);
        let b = rhs(k + 0.5 * h * a);
        let c = rhs(k + 0.5 * h * b);
        let d = rhs(k + h * c);
        k += h / 6.0 * (a + 2.0 * b + 2.0 * c + d);
    }
    k
}

fn assert_mass_and_positivity(d: &DensityField) {
    assert!(d.mass_defect() <= 1e-12, "mass defect {}", d.mass_defect());
    assert!(d.min_value() >= 0.0, "negative density {}", d.min_value());
}

#[test]
fn velocity_is_drift_only_when_vanishing() {
    let g = grid(32);
    let spec = ModelSpec::builder(1, 1.0)
        .drift(vector(ComponentField(vec![ScalarForm::Affine {
            constant: 0.5,
            x: vec![-1.0],
            rho: 0.0,
            t: 0.0,
        }])))
        .self_gain(vector(ComponentField::constant(&[2.0])))
        .cross_gain(vector(ComponentField::constant(&[3.0])))
        .build()
        .unwrap();
    let h: Vec<f64> = g.axis(0).centers().iter().map(|x| x.sin()).collect();
    let v = velocity_field(
        &g,
        &h,
        &gaussian(&g, 0.5),
        &spec,
        &flags(0.0, 1.0, 1.0, 1.0),
        0.0,
    )
    .unwrap();
    for (k, x) in g.axis(0).centers().iter().enumerate() {
        assert_eq!(v[k], 0.5 - x);
    }
}

#[test]
fn classical_velocity_is_gradient_over_alpha() {
    let g = grid(40);
    let spec = ModelSpec::builder(1, 1.0)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .weights(2.0, 0.0)
        .build()
        .unwrap();
    let h: Vec<f64> = g.axis(0).centers().iter().map(|x| x * x).collect();
    let v = velocity_field(&g, &h, &gaussian(&g, 0.5), &spec, &classical(), 0.0).unwrap();
    for (k, x) in g.axis(0).centers().iter().enumerate() {
        assert!((v[k] - 2.0 * x / 2.0).abs() < 1e-12);
    }
}

#[test]
fn nonlocal_kernel_vanishes_for_even_data() {
    let g = grid(64);
    let spec = ModelSpec::builder(1, 1.0)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .cross_gain(vector(ComponentField::constant(&[1.0])))
        .build()
        .unwrap();
    let xs = g.axis(0).centers();
    let h: Vec<f64> = xs.iter().map(|x| (x * x).cos()).collect();
    let dens = gaussian(&g, 0.6);
    let (k, _) = hjb::control_integrals(&g, &spec, &h, &dens, 0.0, 0.0);
    // direct summation of the odd integrand with the same central gradient
    let grads = stencil::gradient_field(&g, &h);
    let direct: f64 = dens.iter().zip(&grads).map(|(a, b)| a * b).sum::<f64>() * g.cell_volume();
    assert!(k.abs() < 1e-12);
    assert!((k - direct).abs() < 1e-15);
    // with h even the velocity is the pure self term, antisymmetric about 0
    let v = velocity_field(&g, &h, &dens, &spec, &non_local(), 0.0).unwrap();
    for i in 0..32 {
        assert!((v[i] + v[63 - i]).abs() < 1e-12);
    }
}

#[test]
fn zero_velocity_leaves_density_unchanged() {
    let g = grid(32);
    let d = gaussian(&g, 0.5);
    let out = transport_forward_step(&g, &d, &vec![0.0; 32], 0.1).unwrap();
    assert_eq!(out, d);
}

#[test]
fn constant_velocity_translates_a_bump() {
    let g = grid(80);
    let dx = g.axis(0).dx();
    let d0 = InitialDensity::Bump {
        center: vec![-1.0],
        radius: 0.4,
    }
    .discretize(&g)
    .unwrap();
    let c = 0.8;
    let dt = 0.5 * dx / c;
    let steps = 40;
    let mut levels = vec![d0.clone()];
    for k in 0..steps {
        let next = transport_forward_step(&g, &levels[k], &vec![c; 80], dt).unwrap();
        levels.push(next);
    }
    let field = DensityField {
        grid: g.clone(),
        dt,
        levels,
    };
    assert_mass_and_positivity(&field);
    let x = MomentPolynomial::power(1);
    let m0 = moment_of_density(&x, &g, &d0).unwrap();
    let m1 = moment_of_density(&x, &g, field.final_level()).unwrap();
    // the mean moves by c t exactly (the bump stays away from the wall)
    assert!((m1 - m0 - c * dt * steps as f64).abs() < 1e-10);
    // a single step moves the mean by c dt, i.e. half a cell
    let m_one = moment_of_density(&x, &g, &field.levels[1]).unwrap();
    assert!((m_one - m0 - c * dt).abs() < 1e-12 && c * dt < dx);
}

#[test]
fn contracting_velocity_reduces_variance() {
    let g = grid(64);
    let d0 = gaussian(&g, 0.5);
    let v: Vec<f64> = g.axis(0).centers().iter().map(|x| -x).collect();
    let d1 = transport_forward_step(&g, &d0, &v, 0.01).unwrap();
    let var = |d: &[f64]| {
        let m = moment_of_density(&MomentPolynomial::power(1), &g, d).unwrap();
        moment_of_density(&MomentPolynomial::power(2), &g, d).unwrap() - m * m
    };
    assert!(var(&d1) < var(&d0));
    assert!(d1.iter().all(|v| *v >= 0.0));
}

#[test]
fn transport_rejects_large_steps() {
    let g = grid(32);
    let err = transport_forward_step(&g, &gaussian(&g, 0.5), &vec![1.0; 32], 1.0).unwrap_err();
    match err {
        Error::Cfl {
            courant, max_speed, ..
        } => {
            assert!(courant > CFL_LIMIT);
            assert_eq!(max_speed, 1.0);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn null_game_value_stays_zero() {
    let g = grid(32);
    let spec = ModelSpec::builder(1, 1.0)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .build()
        .unwrap();
    let d = gaussian(&g, 0.5);
    let h = hjb_backward_step(&g, &vec![0.0; 32], &d, &spec, &non_local(), 0.0, 0.01).unwrap();
    assert!(h.iter().all(|v| *v == 0.0));
}

#[test]
fn running_cost_integrates_linearly() {
    let g = grid(32);
    let c = 0.7;
    let spec = ModelSpec::builder(1, 2.0)
        .running_cost(scalar(ScalarForm::constant(c)))
        .terminal_payoff(scalar(ScalarForm::constant(0.25)))
        .build()
        .unwrap();
    let sol = solve_mfg_fixed_point(
        &spec,
        &classical(),
        &g,
        &gaussian(&g, 0.5),
        &SolverConfig::default(),
    )
    .unwrap();
    for (k, level) in sol.value.levels.iter().enumerate() {
        let t = k as f64 * sol.dt();
        for v in level {
            assert!((v - (0.25 - c * (2.0 - t))).abs() < 1e-12);
        }
    }
}

#[test]
fn lq_value_matches_riccati() {
    let g = grid(201);
    let spec = lq_spec();
    let sol = solve_mfg_fixed_point(
        &spec,
        &classical(),
        &g,
        &gaussian(&g, 0.4),
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(sol.converged);
    let k0 = riccati_k0(1.0, 1.0, 1.0, 10_000);
    assert!((k0 - 1f64.tanh()).abs() < 1e-12);
    let err = g
        .axis(0)
        .centers()
        .iter()
        .zip(&sol.value.levels[0])
        .filter(|(x, _)| x.abs() <= 1.0)
        .map(|(x, h)| (h + k0 * x * x / 2.0).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-3, "sup error {err}");
    assert_mass_and_positivity(&sol.density);
}

#[test]
fn terminal_level_is_exact() {
    let g = grid(48);
    let spec = ModelSpec::builder(1, 0.5)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .terminal_payoff(scalar(ScalarForm::tracking(1, 0, -1.0)))
        .build()
        .unwrap();
    let sol = solve_mfg_fixed_point(
        &spec,
        &non_local(),
        &g,
        &gaussian(&g, 0.5),
        &SolverConfig::default(),
    )
    .unwrap();
    let rho = moment_of_density(spec.moment(), &g, sol.density.final_level()).unwrap();
    let last = &sol.value.levels[sol.steps()];
    let gap = g
        .axis(0)
        .centers()
        .iter()
        .zip(last)
        .map(|(x, h)| (h - spec.terminal_payoff(&[*x], rho)).abs())
        .fold(0.0, f64::max);
    assert_eq!(gap, 0.0);
    let direct = solve_hjb(&spec, &non_local(), &sol.density).unwrap();
    assert_eq!(direct.levels, sol.value.levels);
}

#[test]
fn vanishing_regime_converges_in_one_iteration() {
    let g = grid(48);
    let spec = ModelSpec::builder(1, 1.0)
        .drift(vector(ComponentField::constant(&[0.3])))
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .running_cost(scalar(quadratic_x(1.0)))
        .build()
        .unwrap();
    let sol = solve_mfg_fixed_point(
        &spec,
        &flags(0.0, 1.0, 1.0, 1.0),
        &g,
        &gaussian(&g, 0.3),
        &SolverConfig::default(),
    )
    .unwrap();
    assert!(sol.converged);
    assert_eq!(sol.iterations, 1);
    assert_mass_and_positivity(&sol.density);
}

#[test]
fn flag_gating_ignores_the_density() {
    let g = grid(64);
    let spec = lq_spec();
    let off = flags(0.0, 1.0, 1.0, 1.0);
    let cfg = SolverConfig {
        time_steps: Some(50),
        ..SolverConfig::default()
    };
    let a = solve_mfg_fixed_point(&spec, &off, &g, &gaussian(&g, 0.3), &cfg).unwrap();
    let uniform = InitialDensity::Uniform {
        lower: vec![-1.5],
        upper: vec![1.5],
    }
    .discretize(&g)
    .unwrap();
    let b = solve_mfg_fixed_point(&spec, &off, &g, &uniform, &cfg).unwrap();
    assert_eq!(a.value.levels, b.value.levels);
}

fn coupled_spec() -> ModelSpec {
    ModelSpec::builder(1, 1.0)
        .self_gain(vector(ComponentField::constant(&[1.0])))
        .cross_gain(vector(ComponentField::constant(&[0.5])))
        .running_cost(scalar(ScalarForm::tracking(1, 0, 1.0)))
        .terminal_payoff(scalar(ScalarForm::Affine {
            constant: 0.0,
            x: vec![0.3],
            rho: 0.0,
            t: 0.0,
        }))
        .weights(1.0, 0.5)
        .build()
        .unwrap()
}

#[test]
fn damping_does_not_move_the_fixed_point() {
    let g = grid(64);
    let spec = coupled_spec();
    let d0 = InitialDensity::gaussian_1d(-0.3, 0.3)
        .discretize(&g)
        .unwrap();
    let tol = 1e-8;
    let run = |w: f64| {
        let cfg = SolverConfig {
            damping: w,
            tol,
            time_steps: Some(80),
            ..SolverConfig::default()
        };
        solve_mfg_fixed_point(&spec, &non_local(), &g, &d0, &cfg).unwrap()
    };
    let (a, b) = (run(1.0), run(0.5));
    assert!(a.converged && b.converged);
    assert!(a.iterations > 1);
    assert!(sup_diff(&a.value.levels, &b.value.levels) <= 10.0 * tol);
    assert!(l1_diff(&g, &a.density.levels, &b.density.levels) <= 10.0 * tol);
    assert_mass_and_positivity(&a.density);
    assert_mass_and_positivity(&b.density);
    let last = a.residuals.last().unwrap();
    assert!(last.g_residual <= tol && last.h_residual.unwrap() <= tol);
}

#[test]
fn non_convergence_is_flagged() {
    let g = grid(32);
    let cfg = SolverConfig {
        max_iter: 2,
        tol: 1e-14,
        time_steps: Some(40),
        ..SolverConfig::default()
    };
    let d0 = InitialDensity::gaussian_1d(-0.3, 0.3)
        .discretize(&g)
        .unwrap();
    let sol = solve_mfg_fixed_point(&coupled_spec(), &non_local(), &g, &d0, &cfg).unwrap();
    assert!(!sol.converged);
    assert_eq!(sol.iterations, 2);
    assert_eq!(sol.residuals.len(), 2);
}

#[test]
fn fixed_step_count_violating_cfl_is_an_error() {
    let g = grid(201);
    let cfg = SolverConfig {
        time_steps: Some(5),
        ..SolverConfig::default()
    };
    let err =
        solve_mfg_fixed_point(&lq_spec(), &classical(), &g, &gaussian(&g, 0.4), &cfg).unwrap_err();
    assert!(matches!(err, Error::Cfl { .. }));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn two_dimensional_run_conserves_mass() {
    let g = Grid::uniform(&[0.0, 0.0], &[3.0, 3.0], 24).unwrap();
    let spec = ModelSpec::builder(2, 0.5)
        .drift(vector(ComponentField(vec![
            ScalarForm::Affine {
                constant: 0.0,
                x: vec![0.2, 0.0],
                rho: 0.0,
                t: 0.0,
            },
            ScalarForm::Affine {
                constant: 0.0,
                x: vec![0.0, 0.05],
                rho: 0.0,
                t: 0.0,
            },
        ])))
        .self_gain(vector(ComponentField::constant(&[1.0, -1.0])))
        .cross_gain(vector(ComponentField::constant(&[0.5, 0.0])))
        .running_cost(scalar(ScalarForm::tracking(2, 0, 1.0)))
        .moment(MomentPolynomial::coordinate(2, 0))
        .build()
        .unwrap();
    let init = InitialDensity::Gaussian {
        mean: vec![1.2, 1.2],
        std: vec![0.3],
    };
    let d0 = init.discretize(&g).unwrap();
    let cfg = SolverConfig {
        tol: 1e-6,
        ..SolverConfig::default()
    };
    let sol = solve_mfg_fixed_point(&spec, &non_local(), &g, &d0, &cfg).unwrap();
    assert!(sol.converged);
    assert_mass_and_positivity(&sol.density);
}

#[test]
fn limit_terms_drop_vanishing_coefficients() {
    let t = LimitTerms::new(&non_local(), false, 0.0);
    assert!(t.hjb_self_quadratic && t.hjb_field_advection && t.transport_field);
    assert!(!t.hjb_cross_cost);
    assert!(!t.effective_flags(&non_local()).cross_cost());
    let t = LimitTerms::new(&flags(0.0, 1.0, 1.0, 1.0), false, 1.0);
    assert!(!t.hjb_self_quadratic && !t.hjb_field_advection && !t.hjb_cross_cost);
}

#[test]
fn value_interpolation_reproduces_quadratics() {
    let g = grid(50);
    let levels = vec![
        g.axis(0)
            .centers()
            .iter()
            .map(|x| x * x)
            .collect::<Vec<_>>();
        3
    ];
    let v = ValueField {
        grid: g,
        dt: 0.5,
        levels,
    };
    let mut out = [0.0];
    v.gradient_at(0.7, &[0.33], &mut out);
    assert!((out[0] - 0.66).abs() < 1e-12);
    assert!((v.value_at(0.2, &[0.3]) - 0.09).abs() < 2e-3);
}
