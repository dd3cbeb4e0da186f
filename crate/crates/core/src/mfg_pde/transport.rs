//! Forward transport of the density: first-order upwind finite volumes with
//! zero-flux walls.

use rayon::prelude::*;

use super::hjb::control_integrals;
use super::stencil::central_gradient;
use super::{DensityField, ValueField, CFL_LIMIT};
use crate::empirical::moment_of_density;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ModelSpec, RegimeFlags};

/// Cell-centre velocity `f + chi_1 m_hat (m_hat . grad h) / alpha_hat + chi_2 m_bar K / alpha_hat`,
/// flattened as `[cell * d + axis]`.
pub fn velocity_field(
    grid: &Grid,
    h_level: &[f64],
    g_level: &[f64],
    spec: &ModelSpec,
    flags: &RegimeFlags,
    t: f64,
) -> Result<Vec<f64>> {
    let d = grid.dim();
    let rho = moment_of_density(spec.moment(), grid, g_level)?;
    let alpha = spec.self_weight();
    let kernel = if flags.field_coupling() {
        control_integrals(grid, spec, h_level, g_level, t, rho).0
    } else {
        0.0
    };
    let mut v = vec![0.0; grid.len() * d];
    v.par_chunks_mut(d).enumerate().for_each(|(k, out)| {
        let (mut x, mut buf, mut grad) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        let x = &mut x[..d];
        grid.center(k, x);
        spec.drift(t, x, rho, out);
        if flags.self_coupling() {
            central_gradient(grid, h_level, k, &mut grad[..d]);
            spec.self_gain(t, x, rho, &mut buf[..d]);
            let q: f64 = (0..d).map(|a| buf[a] * grad[a]).sum::<f64>() / alpha;
            for a in 0..d {
                out[a] += buf[a] * q;
            }
        }
        if flags.field_coupling() {
            spec.cross_gain(t, x, rho, &mut buf[..d]);
            for a in 0..d {
                out[a] += buf[a] * kernel / alpha;
            }
        }
    });
    if v.iter().any(|s| !s.is_finite()) {
        return Err(Error::Instability(format!(
            "non-finite velocity at t = {t:.6}"
        )));
    }
    Ok(v)
}

/// Largest outflow rate `sum_a (v+_{right face} - v-_{left face}) / dx_a` over cells.
pub fn transport_courant_rate(grid: &Grid, velocity: &[f64]) -> (f64, f64) {
    let d = grid.dim();
    let mut out_rate = vec![0.0; grid.len()];
    let mut max_speed = 0.0f64;
    for a in 0..d {
        let stride = grid.stride(a);
        let n = grid.axis(a).cells;
        let dx = grid.axis(a).dx();
        let mut idx = [0usize; 2];
        for k in 0..grid.len() {
            grid.multi_index(k, &mut idx[..d]);
            if idx[a] + 1 == n {
                continue;
            }
            let vf = 0.5 * (velocity[k * d + a] + velocity[(k + stride) * d + a]);
            max_speed = max_speed.max(vf.abs());
            if vf > 0.0 {
                out_rate[k] += vf / dx;
            } else {
                out_rate[k + stride] -= vf / dx;
            }
        }
    }
    (out_rate.into_iter().fold(0.0, f64::max), max_speed)
}

/// One explicit upwind step of `g_t + div(v g) = 0`.
pub fn transport_forward_step(
    grid: &Grid,
    g_level: &[f64],
    velocity: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let d = grid.dim();
    let (rate, max_speed) = transport_courant_rate(grid, velocity);
    let courant = rate * dt;
    if courant > CFL_LIMIT {
        return Err(Error::Cfl {
            courant,
            limit: CFL_LIMIT,
            max_speed,
        });
    }
    let mut out = g_level.to_vec();
    let mut idx = [0usize; 2];
    for a in 0..d {
        let stride = grid.stride(a);
        let n = grid.axis(a).cells;
        let lam = dt / grid.axis(a).dx();
        for k in 0..grid.len() {
            grid.multi_index(k, &mut idx[..d]);
            if idx[a] + 1 == n {
                continue;
            }
            let vf = 0.5 * (velocity[k * d + a] + velocity[(k + stride) * d + a]);
            let flux = if vf > 0.0 {
                vf * g_level[k]
            } else {
                vf * g_level[k + stride]
            };
            out[k] -= lam * flux;
            out[k + stride] += lam * flux;
        }
    }
    Ok(out)
}

/// Forward sweep from `g0` over `steps` levels. Without a value field the
/// velocity is the drift alone.
pub fn solve_transport(
    grid: &Grid,
    spec: &ModelSpec,
    flags: &RegimeFlags,
    g0: &[f64],
    value: Option<&ValueField>,
    dt: f64,
    steps: usize,
) -> Result<DensityField> {
    let decoupled = RegimeFlags::decoupled();
    let zeros = vec![0.0; grid.len()];
    let mut levels = Vec::with_capacity(steps + 1);
    levels.push(g0.to_vec());
    for k in 0..steps {
        let (h, fl) = match value {
            Some(v) => (&v.levels[k], flags),
            None => (&zeros, &decoupled),
        };
        let vel = velocity_field(grid, h, &levels[k], spec, fl, k as f64 * dt)?;
        let next = transport_forward_step(grid, &levels[k], &vel, dt)?;
        levels.push(next);
    }
    Ok(DensityField {
        grid: grid.clone(),
        dt,
        levels,
    })
}
