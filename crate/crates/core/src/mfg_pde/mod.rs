//! The mean-field limit system: a backward value equation
//!
//! `h_t + (f + chi_2 m_bar K / alpha_hat) . grad h
//!     = l - chi_1 (m_hat . grad h)^2 / (2 alpha_hat) + chi_3 alpha_bar / (2 alpha_hat^2) int g (m_hat . grad h)^2`
//!
//! with `h(T) = p(., rho_Phi[g(T)])`, coupled to the forward transport
//! `g_t + div(v g) = 0`, `g(0) = g0`, with `v` from [`velocity_field`] and
//! `K = int g m_hat . grad h`. The pair is solved by damped Picard iteration.

mod hjb;
mod initial;
pub(crate) mod stencil;
mod transport;

use serde::{Deserialize, Serialize};

pub use hjb::{hjb_backward_step, hjb_courant_rate, solve_hjb, terminal_value};
pub use initial::{sample_ensemble, InitialDensity};
pub use transport::{
    solve_transport, transport_courant_rate, transport_forward_step, velocity_field,
};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ModelSpec, RegimeFlags};
use crate::output::Csv;

/// Courant numbers above this abort a step.
pub const CFL_LIMIT: f64 = 0.9;

/// Value `h` at cell centres on the levels `t_k = k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: Grid,
    pub dt: f64,
    pub levels: Vec<Vec<f64>>,
}

/// Density `g` at cell centres on the same levels as the value.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid,
    pub dt: f64,
    pub levels: Vec<Vec<f64>>,
}

fn level_pair(len: usize, dt: f64, t: f64) -> (usize, usize, f64) {
    let last = len - 1;
    let s = (t / dt).clamp(0.0, last as f64);
    let k = (s.floor() as usize).min(last.saturating_sub(1));
    let w = if last == 0 { 0.0 } else { s - k as f64 };
    (k, (k + 1).min(last), w)
}

fn field_csv(grid: &Grid, dt: f64, levels: &[Vec<f64>], name: &str) -> Csv {
    let d = grid.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|a| format!("x{a}")));
    header.push(name.to_string());
    let mut csv = Csv::with_header(&header);
    let mut x = vec![0.0; d];
    let mut row = vec![0.0; d + 2];
    for (k, level) in levels.iter().enumerate() {
        for (c, v) in level.iter().enumerate() {
            grid.center(c, &mut x);
            row[0] = k as f64 * dt;
            row[1..=d].copy_from_slice(&x);
            row[d + 1] = *v;
            csv.row(&row);
        }
    }
    csv
}

impl ValueField {
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    /// Value at `(t, x)`, linear in time and multilinear in space.
    pub fn value_at(&self, t: f64, x: &[f64]) -> f64 {
        let (k0, k1, w) = level_pair(self.levels.len(), self.dt, t);
        let st = self.grid.stencil(x);
        (1.0 - w) * st.apply(&self.levels[k0]) + w * st.apply(&self.levels[k1])
    }

    /// Interpolated central-difference gradient at `(t, x)`.
    pub fn gradient_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let (k0, k1, w) = level_pair(self.levels.len(), self.dt, t);
        let st = self.grid.stencil(x);
        let d = self.grid.dim();
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut g = [0.0; 2];
        for (k, wt) in [(k0, 1.0 - w), (k1, w)] {
            if wt == 0.0 {
                continue;
            }
            for j in 0..st.len {
                stencil::central_gradient(&self.grid, &self.levels[k], st.nodes[j], &mut g[..d]);
                for a in 0..d {
                    out[a] += wt * st.weights[j] * g[a];
                }
            }
        }
    }

    pub fn to_csv(&self) -> Csv {
        field_csv(&self.grid, self.dt, &self.levels, "h")
    }
}

impl DensityField {
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn masses(&self) -> Vec<f64> {
        self.levels.iter().map(|g| self.grid.integrate(g)).collect()
    }

    /// `max_k |int g(t_k) - 1|`.
    pub fn mass_defect(&self) -> f64 {
        self.masses()
            .into_iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest mass held by the outermost ring of cells over all levels.
    pub fn boundary_mass(&self) -> f64 {
        let d = self.grid.dim();
        let mut idx = [0usize; 2];
        let vol = self.grid.cell_volume();
        let boundary: Vec<usize> = (0..self.grid.len())
            .filter(|&k| {
                self.grid.multi_index(k, &mut idx[..d]);
                (0..d).any(|a| idx[a] == 0 || idx[a] + 1 == self.grid.axis(a).cells)
            })
            .collect();
        self.levels
            .iter()
            .map(|g| boundary.iter().map(|&k| g[k]).sum::<f64>() * vol)
            .fold(0.0, f64::max)
    }

    pub fn final_level(&self) -> &[f64] {
        &self.levels[self.steps()]
    }

    pub fn to_csv(&self) -> Csv {
        field_csv(&self.grid, self.dt, &self.levels, "g")
    }
}

fn default_damping() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    200
}
fn default_cfl() -> f64 {
    0.45
}
fn default_min_steps() -> usize {
    20
}
fn default_boundary_tol() -> f64 {
    1e-6
}

/// Picard and time-step settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Courant number the time step is chosen for; steps above [`CFL_LIMIT`] fail.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default = "default_min_steps")]
    pub min_time_steps: usize,
    /// Fixes the number of time steps instead of choosing it from the CFL target.
    #[serde(default)]
    pub time_steps: Option<usize>,
    #[serde(default = "default_boundary_tol")]
    pub boundary_mass_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            cfl: default_cfl(),
            min_time_steps: default_min_steps(),
            time_steps: None,
            boundary_mass_tol: default_boundary_tol(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", "must lie in (0, 1]"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("solver.tol", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be >= 1"));
        }
        if !(self.cfl > 0.0 && self.cfl <= CFL_LIMIT) {
            return Err(Error::config(
                "solver.cfl",
                format!("must lie in (0, {CFL_LIMIT}]"),
            ));
        }
        if self.time_steps == Some(0) || self.min_time_steps == 0 {
            return Err(Error::config("solver.time_steps", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub iteration: usize,
    /// Sup-norm change of `h`; absent on the first iteration.
    pub h_residual: Option<f64>,
    /// Largest L1 change of `g` over the time levels.
    pub g_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MFGSolution {
    pub value: ValueField,
    pub density: DensityField,
    pub iterations: usize,
    pub residuals: Vec<ResidualRecord>,
    pub converged: bool,
    pub boundary_mass: f64,
    /// Picard restarts caused by a step-size violation.
    pub restarts: usize,
}

impl MFGSolution {
    pub fn dt(&self) -> f64 {
        self.value.dt
    }

    pub fn steps(&self) -> usize {
        self.value.steps()
    }
}

/// Which terms the limit system carries, after switching off those whose
/// coefficient vanishes identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LimitTerms {
    pub hjb_drift_advection: bool,
    pub hjb_field_advection: bool,
    pub hjb_self_quadratic: bool,
    pub hjb_cross_cost: bool,
    pub transport_drift: bool,
    pub transport_self: bool,
    pub transport_field: bool,
}

impl LimitTerms {
    pub fn new(flags: &RegimeFlags, cross_gain_vanishes: bool, cross_weight: f64) -> Self {
        let field = flags.field_coupling() && !cross_gain_vanishes;
        Self {
            hjb_drift_advection: true,
            hjb_field_advection: field,
            hjb_self_quadratic: flags.self_coupling(),
            hjb_cross_cost: flags.cross_cost() && cross_weight > 0.0,
            transport_drift: true,
            transport_self: flags.self_coupling(),
            transport_field: field,
        }
    }

    /// Flags with `chi_3` cleared when the cross cost is absent.
    pub fn effective_flags(&self, flags: &RegimeFlags) -> RegimeFlags {
        let mut out = *flags;
        out.chi[1] = self.hjb_field_advection;
        out.chi[2] = self.hjb_cross_cost;
        out
    }
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn l1_diff(grid: &Grid, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() * grid.cell_volume())
        .fold(0.0, f64::max)
}

/// Initial time-step guess from the terminal data and the drift.
fn initial_step(
    grid: &Grid,
    spec: &ModelSpec,
    flags: &RegimeFlags,
    g0: &[f64],
    cfg: &SolverConfig,
) -> Result<f64> {
    let horizon = spec.horizon();
    let mut dt = horizon / cfg.min_time_steps as f64;
    let h_t = terminal_value(grid, spec, g0)?;
    let hjb_rate = hjb_courant_rate(grid, &h_t, g0, spec, flags, horizon)?;
    let vel = velocity_field(grid, &h_t, g0, spec, flags, horizon)?;
    let rate = hjb_rate.max(transport_courant_rate(grid, &vel).0);
    if rate > 0.0 {
        dt = dt.min(cfg.cfl / rate);
    }
    Ok(dt)
}

fn steps_for(horizon: f64, dt: f64) -> usize {
    ((horizon / dt).ceil() as usize).max(1)
}

const MAX_RESTARTS: usize = 10;

/// Damped Picard iteration on the coupled system.
///
/// The first density iterate is `g0` carried by the drift alone. Each sweep
/// solves the value against the current iterate, transports `g0` with that
/// value, and relaxes the iterate towards the result. The returned density is
/// the iterate the returned value was solved against.
pub fn solve_mfg_fixed_point(
    spec: &ModelSpec,
    flags: &RegimeFlags,
    grid: &Grid,
    g0: &[f64],
    cfg: &SolverConfig,
) -> Result<MFGSolution> {
    cfg.validate()?;
    if grid.dim() != spec.dimension() {
        return Err(Error::UnsupportedDimension(grid.dim()));
    }
    crate::empirical::moment_of_density(spec.moment(), grid, g0)?;
    if g0.iter().any(|v| *v < 0.0) {
        return Err(Error::Domain("initial density has negative values".into()));
    }
    let horizon = spec.horizon();
    let mut steps = match cfg.time_steps {
        Some(n) => n,
        None => steps_for(horizon, initial_step(grid, spec, flags, g0, cfg)?),
    };
    let mut restarts = 0;
    loop {
        match picard(spec, flags, grid, g0, cfg, steps) {
            Ok(mut sol) => {
                sol.restarts = restarts;
                if sol.boundary_mass > cfg.boundary_mass_tol {
                    log::warn!(
                        "boundary cells hold mass {:.3e} (> {:.1e}); the box may be too small",
                        sol.boundary_mass,
                        cfg.boundary_mass_tol
                    );
                }
                return Ok(sol);
            }
            Err(Error::Cfl { courant, .. })
                if cfg.time_steps.is_none() && restarts < MAX_RESTARTS =>
            {
                let dt = horizon / steps as f64;
                let new_steps = steps_for(horizon, dt * cfg.cfl / courant).max(steps + 1);
                log::info!(
                    "courant number {courant:.3} with {steps} steps, restarting with {new_steps}"
                );
                steps = new_steps;
                restarts += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn picard(
    spec: &ModelSpec,
    flags: &RegimeFlags,
    grid: &Grid,
    g0: &[f64],
    cfg: &SolverConfig,
    steps: usize,
) -> Result<MFGSolution> {
    let dt = spec.horizon() / steps as f64;
    let mut iterate = solve_transport(grid, spec, flags, g0, None, dt, steps)?;
    let mut previous_h: Option<ValueField> = None;
    let mut residuals = Vec::new();
    for iteration in 1..=cfg.max_iter {
        let value = solve_hjb(spec, flags, &iterate)?;
        let carried = solve_transport(grid, spec, flags, g0, Some(&value), dt, steps)?;
        let g_residual = l1_diff(grid, &carried.levels, &iterate.levels);
        let h_residual = previous_h
            .as_ref()
            .map(|p| sup_diff(&p.levels, &value.levels));
        residuals.push(ResidualRecord {
            iteration,
            h_residual,
            g_residual,
        });
        log::debug!("picard {iteration}: g {g_residual:.3e}, h {h_residual:?}");
        let done = g_residual <= cfg.tol && h_residual.is_none_or(|r| r <= cfg.tol);
        if done || iteration == cfg.max_iter {
            let boundary_mass = iterate.boundary_mass();
            return Ok(MFGSolution {
                value,
                density: iterate,
                iterations: iteration,
                residuals,
                converged: done,
                boundary_mass,
                restarts: 0,
            });
        }
        let w = cfg.damping;
        for (it, new) in iterate.levels.iter_mut().zip(&carried.levels) {
            for (a, b) in it.iter_mut().zip(new) {
                *a = (1.0 - w) * *a + w * b;
            }
        }
        previous_h = Some(value);
    }
    unreachable!("max_iter >= 1 is validated")
}

#[cfg(test)]
mod tests;
