//! Finite-population side: optimal feedback, the reduced table in
//! `(x_i, rho)`, one-step comparisons with the full `N`-player recursion and
//! forward simulation of the closed-loop particle system.

mod full;
mod table;

pub use full::{
    bellman_one_step_full, reduced_one_step, reduction_error, sample_configs, FullValueState,
    SymmetricPayoff, TerminalValues, DEFAULT_FULL_CAP,
};
pub use table::{
    bellman_backward_reduced, max_entropy_weights, NodeAxis, ReducedValueTable, TableGrid,
    TableOptions,
};

use std::path::Path;

use crate::empirical::{empirical_moment, leave_one_out_moments, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::mfg_pde::ValueField;
use crate::model::{scaled_coefficients, DomainBox, ModelSpec, ScalingExponents};
use crate::output::Csv;

/// Maximiser of `u m_hat . grad - alpha_hat u^2 / 2`.
pub fn optimal_control(spec: &ModelSpec, t: f64, x: &[f64], rho: f64, grad: &[f64]) -> Result<f64> {
    let d = spec.dimension();
    if x.len() != d || grad.len() != d {
        return Err(Error::Domain(format!(
            "state and gradient must have {d} entries"
        )));
    }
    let mut m = vec![0.0; d];
    spec.self_gain(t, x, rho, &mut m);
    Ok(m.iter().zip(grad).map(|(a, b)| a * b).sum::<f64>() / spec.self_weight())
}

/// Anything that supplies `grad_x W(t, x, rho)` for the feedback law.
pub trait GradientSource: Sync {
    /// State dimension the gradient is taken in.
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn time_step(&self) -> f64;
    /// `rho` is the moment of the other agents.
    fn gradient(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]);
}

impl GradientSource for ReducedValueTable {
    fn dim(&self) -> usize {
        self.grid.dim()
    }
    fn horizon(&self) -> f64 {
        ReducedValueTable::horizon(self)
    }
    fn time_step(&self) -> f64 {
        self.dt
    }
    fn gradient(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        self.gradient_at(t, x, rho, out)
    }
}

/// The mean-field value ignores the finite-population moment.
impl GradientSource for ValueField {
    fn dim(&self) -> usize {
        self.grid.dim()
    }
    fn horizon(&self) -> f64 {
        ValueField::horizon(self)
    }
    fn time_step(&self) -> f64 {
        self.dt
    }
    fn gradient(&self, t: f64, x: &[f64], _rho: f64, out: &mut [f64]) {
        self.gradient_at(t, x, out)
    }
}

/// Where particles may go before the simulation gives up.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    pub domain: Option<DomainBox>,
    pub margin: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            domain: None,
            margin: 0.0,
        }
    }
}

/// Particle snapshots at `times[k]` and the controls applied on `[times[k], times[k+1])`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<ParticleEnsemble>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_ensemble(&self) -> &ParticleEnsemble {
        self.snapshots
            .last()
            .expect("trajectory has at least the initial snapshot")
    }

    /// Rows `agent, t, x1.., u`; `u` is NaN at the final time, where no control is applied.
    pub fn to_csv(&self) -> Csv {
        let d = self.snapshots[0].dim();
        let mut header = vec!["agent".to_string(), "t".to_string()];
        header.extend((1..=d).map(|a| format!("x{a}")));
        header.push("u".into());
        let mut csv = Csv::with_header(&header);
        let mut row = vec![0.0; d + 2];
        for (k, ens) in self.snapshots.iter().enumerate() {
            for i in 0..ens.len() {
                row[0] = self.times[k];
                row[1..=d].copy_from_slice(ens.state(i));
                row[d + 1] = self.controls.get(k).map_or(f64::NAN, |u| u[i]);
                csv.row_with_int(i as u64 + 1, &row);
            }
        }
        csv
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_csv().write(path)
    }
}

/// Explicit Euler on the closed-loop system
/// `dz_i = f + m_hat u_i + m_bar sum_{k != i} u_k` with
/// `u_i = m_hat . grad W(t, z_i, rho^{N-1}_{Phi,i}) / alpha_hat`, all coefficients
/// scaled for `N = ens0.len()` agents and evaluated at the full moment.
pub fn simulate_forward(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    source: &dyn GradientSource,
    ens0: &ParticleEnsemble,
    dt: f64,
    opts: &SimulationOptions,
) -> Result<Trajectory> {
    let n = ens0.len();
    let d = spec.dimension();
    if ens0.dim() != d || source.dim() != d {
        return Err(Error::Domain(format!(
            "ensemble ({}) and value ({}) dimensions must equal the state dimension {d}",
            ens0.dim(),
            source.dim()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Parameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if dt > source.time_step() * (1.0 + 1e-12) {
        return Err(Error::Parameter(format!(
            "simulation step {dt} is coarser than the value step {}",
            source.time_step()
        )));
    }
    let s = scaled_coefficients(spec, exps, n)?;
    let horizon = s.horizon().min(source.horizon());
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;

    let mut times = vec![ens0.time()];
    let mut snapshots = vec![ens0.clone()];
    let mut controls = Vec::with_capacity(steps);
    let mut state = ens0.states().to_vec();
    let mut g = vec![0.0; d];
    let mut m = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for k in 0..steps {
        let t = k as f64 * dt;
        let current = ParticleEnsemble::new(state.clone(), d, t)?;
        let rho = empirical_moment(s.moment(), &current);
        let others = leave_one_out_moments(s.moment(), &current)?;
        let u: Vec<f64> = (0..n)
            .map(|i| {
                let z = &state[i * d..(i + 1) * d];
                source.gradient(t, z, others[i], &mut g);
                s.self_gain(t, z, rho, &mut m);
                m.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / s.self_weight()
            })
            .collect();
        let total: f64 = u.iter().sum();
        let mut next = state.clone();
        for i in 0..n {
            let z = &state[i * d..(i + 1) * d];
            s.drift(t, z, rho, &mut buf);
            s.self_gain(t, z, rho, &mut m);
            let base = buf.clone();
            s.cross_gain(t, z, rho, &mut buf);
            for a in 0..d {
                next[i * d + a] += dt * (base[a] + m[a] * u[i] + buf[a] * (total - u[i]));
            }
        }
        if let Some(j) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Instability(format!(
                "agent {} has a non-finite state at t = {:.6}",
                j / d + 1,
                t + dt
            )));
        }
        if let Some(domain) = &opts.domain {
            if let Some(i) =
                (0..n).find(|&i| !domain.contains(&next[i * d..(i + 1) * d], opts.margin))
            {
                return Err(Error::DomainTooSmall(format!(
                    "agent {} left the domain at t = {:.6}",
                    i + 1,
                    t + dt
                )));
            }
        }
        controls.push(u);
        state = next;
        times.push(t + dt);
        snapshots.push(ParticleEnsemble::new(state.clone(), d, t + dt)?);
    }
    Ok(Trajectory {
        times,
        snapshots,
        controls,
    })
}
