//! Backward value equation: ENO2 one-sided differences, upwinding of the
//! advection by its sign, local Lax-Friedrichs on the quadratic term and
//! Heun's method in reverse time.

use rayon::prelude::*;

use super::stencil::{central_gradient, eno2};
use super::{DensityField, ValueField, CFL_LIMIT};
use crate::empirical::moment_of_density;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ModelSpec, RegimeFlags};

/// Integrals `K = int g m_hat . grad h` and `I = int g (m_hat . grad h)^2`.
pub(crate) fn control_integrals(
    grid: &Grid,
    spec: &ModelSpec,
    h: &[f64],
    g: &[f64],
    t: f64,
    rho: f64,
) -> (f64, f64) {
    let d = grid.dim();
    let (mut x, mut grad, mut mh) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let (mut k_sum, mut i_sum) = (0.0, 0.0);
    for (k, gk) in g.iter().enumerate() {
        grid.center(k, &mut x);
        central_gradient(grid, h, k, &mut grad);
        spec.self_gain(t, &x, rho, &mut mh);
        let q: f64 = mh.iter().zip(&grad).map(|(a, b)| a * b).sum();
        k_sum += gk * q;
        i_sum += gk * q * q;
    }
    let vol = grid.cell_volume();
    (k_sum * vol, i_sum * vol)
}

/// Reverse-time rate `dh/ds` at every cell and the largest Courant rate.
fn hjb_rate(
    grid: &Grid,
    spec: &ModelSpec,
    flags: &RegimeFlags,
    h: &[f64],
    g: &[f64],
    rho: f64,
    t: f64,
) -> (Vec<f64>, f64) {
    let d = grid.dim();
    let alpha = spec.self_weight();
    let (kernel, cross) = if flags.field_coupling() || flags.cross_cost() {
        control_integrals(grid, spec, h, g, t, rho)
    } else {
        (0.0, 0.0)
    };
    let field_shift = if flags.field_coupling() {
        kernel / alpha
    } else {
        0.0
    };
    let cross_term = if flags.cross_cost() {
        spec.cross_weight() / (2.0 * alpha * alpha) * cross
    } else {
        0.0
    };
    let c = 1.0 / (2.0 * alpha);
    let dx: Vec<f64> = grid.axes().iter().map(|a| a.dx()).collect();

    let per_cell: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let mut x = [0.0; 2];
            let mut adv_coef = [0.0; 2];
            let mut buf = [0.0; 2];
            let (mut pm, mut pp) = ([0.0; 2], [0.0; 2]);
            let x = &mut x[..d];
            grid.center(k, x);
            spec.drift(t, x, rho, &mut adv_coef[..d]);
            if flags.field_coupling() {
                spec.cross_gain(t, x, rho, &mut buf[..d]);
                for a in 0..d {
                    adv_coef[a] += buf[a] * field_shift;
                }
            }
            let mut rate = -spec.running_cost(t, x, rho) - cross_term;
            let mut speed = 0.0;
            for a in 0..d {
                (pm[a], pp[a]) = eno2(grid, h, k, a);
                let adv = adv_coef[a];
                rate += if adv > 0.0 { adv * pp[a] } else { adv * pm[a] };
                speed += adv.abs() / dx[a];
            }
            if flags.self_coupling() {
                spec.self_gain(t, x, rho, &mut buf[..d]);
                let mh = &buf[..d];
                let q: f64 = (0..d).map(|a| mh[a] * 0.5 * (pm[a] + pp[a])).sum();
                let qmax: f64 = (0..d)
                    .map(|a| mh[a].abs() * pm[a].abs().max(pp[a].abs()))
                    .sum();
                rate += c * q * q;
                for a in 0..d {
                    let sigma = 2.0 * c * mh[a].abs() * qmax;
                    rate += 0.5 * sigma * (pp[a] - pm[a]);
                    speed += sigma / dx[a];
                }
            }
            (rate, speed)
        })
        .collect();
    let speed = per_cell.iter().fold(0.0f64, |m, p| m.max(p.1));
    (per_cell.into_iter().map(|p| p.0).collect(), speed)
}

fn check_step(courant_rate: f64, dt: f64) -> Result<()> {
    let courant = courant_rate * dt;
    if courant > CFL_LIMIT {
        return Err(Error::Cfl {
            courant,
            limit: CFL_LIMIT,
            max_speed: courant_rate,
        });
    }
    Ok(())
}

/// Courant rate (Courant number per unit time step) of the value equation at one level.
pub fn hjb_courant_rate(
    grid: &Grid,
    h: &[f64],
    g: &[f64],
    spec: &ModelSpec,
    flags: &RegimeFlags,
    t: f64,
) -> Result<f64> {
    let rho = moment_of_density(spec.moment(), grid, g)?;
    Ok(hjb_rate(grid, spec, flags, h, g, rho, t).1)
}

/// One reverse step from `t + dt` to `t`; the moment and the control
/// integrals read `g_level`.
pub fn hjb_backward_step(
    grid: &Grid,
    h_next: &[f64],
    g_level: &[f64],
    spec: &ModelSpec,
    flags: &RegimeFlags,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    let rho = moment_of_density(spec.moment(), grid, g_level)?;
    let (k1, s1) = hjb_rate(grid, spec, flags, h_next, g_level, rho, t + dt);
    check_step(s1, dt)?;
    let stage: Vec<f64> = h_next.iter().zip(&k1).map(|(h, r)| h + dt * r).collect();
    let (k2, s2) = hjb_rate(grid, spec, flags, &stage, g_level, rho, t);
    check_step(s2, dt)?;
    let out: Vec<f64> = h_next
        .iter()
        .zip(k1.iter().zip(&k2))
        .map(|(h, (a, b))| h + 0.5 * dt * (a + b))
        .collect();
    if let Some(k) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Instability(format!(
            "value became non-finite at cell {k}, t = {t:.6}"
        )));
    }
    Ok(out)
}

/// `h(T, x) = p(x, rho_Phi[g(T)])` at every cell centre.
pub fn terminal_value(grid: &Grid, spec: &ModelSpec, g_final: &[f64]) -> Result<Vec<f64>> {
    let rho = moment_of_density(spec.moment(), grid, g_final)?;
    let mut x = vec![0.0; grid.dim()];
    Ok((0..grid.len())
        .map(|k| {
            grid.center(k, &mut x);
            spec.terminal_payoff(&x, rho)
        })
        .collect())
}

/// Full backward sweep against a given density history.
pub fn solve_hjb(
    spec: &ModelSpec,
    flags: &RegimeFlags,
    density: &DensityField,
) -> Result<ValueField> {
    let grid = &density.grid;
    let steps = density.levels.len() - 1;
    let dt = density.dt;
    let mut levels = vec![Vec::new(); steps + 1];
    levels[steps] = terminal_value(grid, spec, &density.levels[steps])?;
    for k in (0..steps).rev() {
        levels[k] = hjb_backward_step(
            grid,
            &levels[k + 1],
            &density.levels[k],
            spec,
            flags,
            k as f64 * dt,
            dt,
        )?;
    }
    Ok(ValueField {
        grid: grid.clone(),
        dt,
        levels,
    })
}
