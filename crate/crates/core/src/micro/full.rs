//! One backward step of the coupled `N`-player dynamic-programming system,
//! evaluated at sampled joint configurations, and the averaged reduced step it
//! is compared against.

use crate::empirical::{leave_one_out_moments, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::model::{scaled_coefficients, ModelSpec, ScalingExponents};
use crate::rng;

/// Largest `N * d` the full system accepts by default.
pub const DEFAULT_FULL_CAP: usize = 64;

const FIXED_POINT_TOL: f64 = 1e-14;
const FIXED_POINT_MAX_ITER: usize = 1000;

/// Per-agent values `V_i(tau + dtau, x)` and their gradients in the joint state.
pub trait TerminalValues: Send + Sync {
    fn value(&self, x: &[f64], n: usize, i: usize) -> f64;
    /// `out[k * d + a] = d V_i / d x_k^a`.
    fn gradient(&self, x: &[f64], n: usize, i: usize, out: &mut [f64]);
}

/// `V_i(x) = p(x_i, rho^N_Phi(x))` with the model's terminal payoff.
pub struct SymmetricPayoff<'a> {
    pub spec: &'a ModelSpec,
}

impl SymmetricPayoff<'_> {
    fn moment(&self, x: &[f64], n: usize) -> f64 {
        let d = self.spec.dimension();
        x.chunks_exact(d)
            .map(|r| self.spec.moment().eval(r))
            .sum::<f64>()
            / n as f64
    }
}

impl TerminalValues for SymmetricPayoff<'_> {
    fn value(&self, x: &[f64], n: usize, i: usize) -> f64 {
        let d = self.spec.dimension();
        self.spec
            .terminal_payoff(&x[i * d..(i + 1) * d], self.moment(x, n))
    }

    fn gradient(&self, x: &[f64], n: usize, i: usize, out: &mut [f64]) {
        let d = self.spec.dimension();
        let rho = self.moment(x, n);
        let xi = &x[i * d..(i + 1) * d];
        let p = self.spec.terminal_payoff_field();
        let dp_drho = p.d_rho(self.spec.horizon(), xi, rho) / n as f64;
        for (k, chunk) in out.chunks_exact_mut(d).enumerate() {
            self.spec.moment().gradient(&x[k * d..(k + 1) * d], chunk);
            chunk.iter_mut().for_each(|v| *v *= dp_drho);
        }
        let mut own = vec![0.0; d];
        p.grad_x(self.spec.horizon(), xi, rho, &mut own);
        for a in 0..d {
            out[i * d + a] += own[a];
        }
    }
}

/// Values and equilibrium controls of all agents at each sampled configuration.
#[derive(Debug, Clone)]
pub struct FullValueState {
    pub agents: usize,
    pub dim: usize,
    pub configs: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl FullValueState {
    /// `<V_i>_N` per configuration.
    pub fn averaged_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect()
    }
}

/// Coefficients of the scaled game frozen at one configuration.
struct Frozen {
    n: usize,
    d: usize,
    drift: Vec<f64>,
    self_gain: Vec<f64>,
    cross_gain: Vec<f64>,
    running: Vec<f64>,
    alpha_hat: f64,
    alpha_bar: f64,
}

impl Frozen {
    fn new(spec: &ModelSpec, n: usize, tau: f64, y: &[f64]) -> Self {
        let d = spec.dimension();
        let rho = y
            .chunks_exact(d)
            .map(|r| spec.moment().eval(r))
            .sum::<f64>()
            / n as f64;
        let mut drift = vec![0.0; n * d];
        let mut self_gain = vec![0.0; n * d];
        let mut cross_gain = vec![0.0; n * d];
        let mut running = vec![0.0; n];
        for i in 0..n {
            let yi = &y[i * d..(i + 1) * d];
            spec.drift(tau, yi, rho, &mut drift[i * d..(i + 1) * d]);
            spec.self_gain(tau, yi, rho, &mut self_gain[i * d..(i + 1) * d]);
            spec.cross_gain(tau, yi, rho, &mut cross_gain[i * d..(i + 1) * d]);
            running[i] = spec.running_cost(tau, yi, rho);
        }
        Self {
            n,
            d,
            drift,
            self_gain,
            cross_gain,
            running,
            alpha_hat: spec.self_weight(),
            alpha_bar: spec.cross_weight(),
        }
    }

    fn advance(&self, y: &[f64], u: &[f64], dtau: f64) -> Vec<f64> {
        let total: f64 = u.iter().sum();
        let mut out = y.to_vec();
        for k in 0..self.n {
            for a in 0..self.d {
                let j = k * self.d + a;
                out[j] += dtau
                    * (self.drift[j]
                        + self.self_gain[j] * u[k]
                        + self.cross_gain[j] * (total - u[k]));
            }
        }
        out
    }

    fn values(&self, terminal: impl Fn(usize) -> f64, u: &[f64], dtau: f64) -> Vec<f64> {
        let sq: f64 = u.iter().map(|v| v * v).sum();
        (0..self.n)
            .map(|i| {
                let cost = self.running[i]
                    + 0.5 * self.alpha_hat * u[i] * u[i]
                    + 0.5 * self.alpha_bar * (sq - u[i] * u[i]);
                terminal(i) - dtau * cost
            })
            .collect()
    }
}

fn iterate_controls(
    mut u: Vec<f64>,
    mut update: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    for _ in 0..FIXED_POINT_MAX_ITER {
        let next = update(&u);
        let change = next
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = 1.0 + next.iter().map(|v| v.abs()).fold(0.0, f64::max);
        u = next;
        if !change.is_finite() {
            return Err(Error::Instability("equilibrium controls diverged".into()));
        }
        if change <= FIXED_POINT_TOL * scale {
            return Ok(u);
        }
    }
    Err(Error::Instability(format!(
        "equilibrium controls did not settle in {FIXED_POINT_MAX_ITER} iterations; reduce the time step"
    )))
}

fn check_full_input(spec: &ModelSpec, n: usize, configs: &[Vec<f64>], cap: usize) -> Result<()> {
    let size = n * spec.dimension();
    if size > cap {
        return Err(Error::SizeCap { size, cap });
    }
    if let Some(c) = configs.iter().position(|c| c.len() != size) {
        return Err(Error::Domain(format!(
            "configuration {c} does not have N * d = {size} entries"
        )));
    }
    Ok(())
}

/// One backward step of the coupled system at each configuration. The
/// equilibrium controls solve the implicit best-response condition
/// `u_i = (m_hat_i . grad_i V_i + sum_{k != i} m_bar_k . grad_k V_i) / alpha_hat`
/// with gradients taken at the advanced state.
pub fn bellman_one_step_full(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
    terminal: &dyn TerminalValues,
    configs: &[Vec<f64>],
    dtau: f64,
    cap: usize,
) -> Result<FullValueState> {
    let scaled = scaled_coefficients(spec, exps, n)?;
    check_full_input(&scaled, n, configs, cap)?;
    let d = scaled.dimension();
    let tau = scaled.horizon() - dtau;
    let mut values = Vec::with_capacity(configs.len());
    let mut controls = Vec::with_capacity(configs.len());
    let mut grad = vec![0.0; n * d];
    for y in configs {
        let fr = Frozen::new(&scaled, n, tau, y);
        let u = iterate_controls(vec![0.0; n], |u| {
            let x_next = fr.advance(y, u, dtau);
            (0..n)
                .map(|i| {
                    terminal.gradient(&x_next, n, i, &mut grad);
                    let mut s = 0.0;
                    for k in 0..n {
                        let gain = if k == i {
                            &fr.self_gain
                        } else {
                            &fr.cross_gain
                        };
                        for a in 0..d {
                            s += gain[k * d + a] * grad[k * d + a];
                        }
                    }
                    s / fr.alpha_hat
                })
                .collect()
        })?;
        let x_next = fr.advance(y, &u, dtau);
        values.push(fr.values(|i| terminal.value(&x_next, n, i), &u, dtau));
        controls.push(u);
    }
    Ok(FullValueState {
        agents: n,
        dim: d,
        configs: configs.to_vec(),
        values,
        controls,
    })
}

/// The averaged reduced step at each configuration: agent `i` sees the
/// others only through `rho^{N-1}_{Phi,i}` of the advanced state, with
/// `W(tau + dtau, x, rho) = p(x, rho)`. Returns `W_i` per configuration.
pub fn reduced_one_step(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
    configs: &[Vec<f64>],
    dtau: f64,
) -> Result<Vec<Vec<f64>>> {
    let scaled = scaled_coefficients(spec, exps, n)?;
    let d = scaled.dimension();
    let tau = scaled.horizon() - dtau;
    let p = scaled.terminal_payoff_field();
    let mut grad = vec![0.0; d];
    configs
        .iter()
        .map(|y| {
            if y.len() != n * d {
                return Err(Error::Domain("configuration has the wrong length".into()));
            }
            let fr = Frozen::new(&scaled, n, tau, y);
            let loo = |x: &[f64]| -> Result<Vec<f64>> {
                let ens = ParticleEnsemble::new(x.to_vec(), d, 0.0)?;
                leave_one_out_moments(scaled.moment(), &ens)
            };
            let u = iterate_controls(vec![0.0; n], |u| {
                let x_next = fr.advance(y, u, dtau);
                let rho = loo(&x_next).unwrap_or_else(|_| vec![f64::NAN; n]);
                (0..n)
                    .map(|i| {
                        p.grad_x(
                            scaled.horizon(),
                            &x_next[i * d..(i + 1) * d],
                            rho[i],
                            &mut grad,
                        );
                        (0..d)
                            .map(|a| fr.self_gain[i * d + a] * grad[a])
                            .sum::<f64>()
                            / fr.alpha_hat
                    })
                    .collect()
            })?;
            let x_next = fr.advance(y, &u, dtau);
            let rho = loo(&x_next)?;
            Ok(fr.values(
                |i| scaled.terminal_payoff(&x_next[i * d..(i + 1) * d], rho[i]),
                &u,
                dtau,
            ))
        })
        .collect()
}

/// `max_c |<V_i>_N - <W_i>_N|` over the configurations after one step from
/// the shared terminal payoff.
pub fn reduction_error(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
    dtau: f64,
    configs: &[Vec<f64>],
    cap: usize,
) -> Result<f64> {
    let full = bellman_one_step_full(spec, exps, n, &SymmetricPayoff { spec }, configs, dtau, cap)?;
    let reduced = reduced_one_step(spec, exps, n, configs, dtau)?;
    Ok(full
        .averaged_values()
        .iter()
        .zip(&reduced)
        .map(|(v, w)| (v - w.iter().sum::<f64>() / n as f64).abs())
        .fold(0.0, f64::max))
}

/// `count` joint configurations uniform on the box, one seeded stream per `N`.
pub fn sample_configs(
    n: usize,
    lower: &[f64],
    upper: &[f64],
    count: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let d = lower.len();
    let mut r = rng::stream(seed, n, 0);
    (0..count)
        .map(|_| {
            (0..n * d)
                .map(|j| {
                    let a = j % d;
                    lower[a] + (upper[a] - lower[a]) * rng::uniform(&mut r)
                })
                .collect()
        })
        .collect()
}
