//! Backward semi-Lagrangian solution of the reduced equation for
//! `W(tau, x, rho)` on a node lattice in `(x, rho)`.
//!
//! Each step follows characteristics of the frozen controls
//! `u = m_hat . grad_x W / alpha_hat`. The population seen by one agent is
//! represented by the maximum-entropy weights on the `x` nodes whose
//! `Phi`-moment equals the current `rho`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scaled_coefficients, ModelSpec, MomentPolynomial, ScalingExponents};
use crate::output::{self, Csv};

/// `nodes` equispaced points including both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAxis {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
}

impl NodeAxis {
    pub fn new(lower: f64, upper: f64, nodes: usize) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::Domain(format!(
                "node axis [{lower}, {upper}] is empty"
            )));
        }
        if nodes < 3 {
            return Err(Error::Domain(format!(
                "node axis needs at least 3 nodes, got {nodes}"
            )));
        }
        Ok(Self {
            lower,
            upper,
            nodes,
        })
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.nodes - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.spacing()
    }

    /// Left node index and weight of the right node, after clamping `v` into the axis.
    fn bracket(&self, v: f64) -> (usize, f64) {
        let s = ((v - self.lower) / self.spacing()).clamp(0.0, (self.nodes - 1) as f64);
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, s - i as f64)
    }
}

/// Lattice of the reduced table: `x` axes then the moment axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableGrid {
    pub x: Vec<NodeAxis>,
    pub rho: NodeAxis,
}

impl TableGrid {
    /// Box `[lower, upper]` with `x_nodes` per axis. The moment axis covers the
    /// range of `Phi` on the box widened by 10% on each side.
    pub fn new(
        phi: &MomentPolynomial,
        lower: &[f64],
        upper: &[f64],
        x_nodes: usize,
        rho_nodes: usize,
    ) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != phi.dim() {
            return Err(Error::Domain(
                "table box does not match the state dimension".into(),
            ));
        }
        if lower.len() > 2 {
            return Err(Error::UnsupportedDimension(lower.len()));
        }
        let x = lower
            .iter()
            .zip(upper)
            .map(|(&l, &u)| NodeAxis::new(l, u, x_nodes))
            .collect::<Result<Vec<_>>>()?;
        let (lo, hi) = phi.range_on_box(lower, upper);
        let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 };
        Ok(Self {
            x,
            rho: NodeAxis::new(lo - pad, hi + pad, rho_nodes)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn x_len(&self) -> usize {
        self.x.iter().map(|a| a.nodes).product()
    }

    pub fn len(&self) -> usize {
        self.x_len() * self.rho.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn x_stride(&self, a: usize) -> usize {
        self.x[..a].iter().map(|ax| ax.nodes).product()
    }

    /// Coordinates of the `x` node with flat index `j`.
    pub fn x_node(&self, j: usize, out: &mut [f64]) {
        let mut r = j;
        for (a, ax) in self.x.iter().enumerate() {
            out[a] = ax.node(r % ax.nodes);
            r /= ax.nodes;
        }
    }

    fn x_index(&self, j: usize, a: usize) -> usize {
        (j / self.x_stride(a)) % self.x[a].nodes
    }
}

/// Knobs for [`bellman_backward_reduced`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableOptions {
    /// Abort when `|grad_x W|` exceeds this.
    pub gradient_cap: f64,
    /// Characteristic feet may leave the box by this fraction of its width
    /// before the solve reports a domain error; inside it they are clamped.
    pub margin: f64,
    /// Upper bound on `dtau * speed / spacing` on every axis.
    pub courant: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            gradient_cap: 1e6,
            margin: 0.1,
            courant: 0.5,
        }
    }
}

/// `W` on the lattice at `tau_k = k dt`, `k = 0..=steps`. Node `(j, r)` has
/// flat index `j + r * x_len` with the first `x` axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedValueTable {
    pub grid: TableGrid,
    pub agents: usize,
    pub dt: f64,
    pub levels: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TableHeader<'a> {
    agents: usize,
    dt: f64,
    steps: usize,
    grid: &'a TableGrid,
    levels_written: &'a [usize],
    columns: Vec<String>,
}

impl ReducedValueTable {
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    fn level_pair(&self, tau: f64) -> (usize, usize, f64) {
        let last = self.steps();
        let s = (tau / self.dt).clamp(0.0, last as f64);
        let k = (s.floor() as usize).min(last.saturating_sub(1));
        (k, (k + 1).min(last), s - k as f64)
    }

    /// Corner nodes and weights of the multilinear stencil at `(x, rho)`.
    fn corners(&self, x: &[f64], rho: f64) -> Vec<(usize, f64)> {
        let d = self.grid.dim();
        let mut brackets: Vec<(usize, f64, usize)> = self
            .grid
            .x
            .iter()
            .enumerate()
            .map(|(a, ax)| {
                let (i, w) = ax.bracket(x[a]);
                (i, w, self.grid.x_stride(a))
            })
            .collect();
        let (ri, rw) = self.grid.rho.bracket(rho);
        brackets.push((ri, rw, self.grid.x_len()));
        (0..1usize << (d + 1))
            .map(|mask| {
                brackets
                    .iter()
                    .enumerate()
                    .fold((0, 1.0), |(idx, wt), (b, &(i, w, s))| {
                        if mask >> b & 1 == 1 {
                            (idx + (i + 1) * s, wt * w)
                        } else {
                            (idx + i * s, wt * (1.0 - w))
                        }
                    })
            })
            .collect()
    }

    fn interpolate(&self, level: &[f64], x: &[f64], rho: f64) -> f64 {
        self.corners(x, rho)
            .into_iter()
            .map(|(n, w)| w * level[n])
            .sum()
    }

    /// `W(tau, x, rho)`, linear in time and multilinear on the lattice.
    pub fn value_at(&self, tau: f64, x: &[f64], rho: f64) -> f64 {
        let (k0, k1, w) = self.level_pair(tau);
        (1.0 - w) * self.interpolate(&self.levels[k0], x, rho)
            + w * self.interpolate(&self.levels[k1], x, rho)
    }

    /// Interpolated node gradients `grad_x W(tau, x, rho)`.
    pub fn gradient_at(&self, tau: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        let (k0, k1, w) = self.level_pair(tau);
        let d = self.grid.dim();
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut g = [0.0; 2];
        for (k, wt) in [(k0, 1.0 - w), (k1, w)] {
            if wt == 0.0 {
                continue;
            }
            for (n, cw) in self.corners(x, rho) {
                node_gradient(&self.grid, &self.levels[k], n, &mut g[..d]);
                for a in 0..d {
                    out[a] += wt * cw * g[a];
                }
            }
        }
    }

    /// Rows `tau, x1.., rho, W` for the requested levels.
    pub fn to_csv(&self, levels: &[usize]) -> Csv {
        let d = self.grid.dim();
        let mut csv = Csv::with_header(&self.columns());
        let mut row = vec![0.0; d + 3];
        let nx = self.grid.x_len();
        for &k in levels {
            for (n, v) in self.levels[k].iter().enumerate() {
                row[0] = k as f64 * self.dt;
                self.grid.x_node(n % nx, &mut row[1..=d]);
                row[d + 1] = self.grid.rho.node(n / nx);
                row[d + 2] = *v;
                csv.row(&row);
            }
        }
        csv
    }

    fn columns(&self) -> Vec<String> {
        let mut c = vec!["tau".to_string()];
        c.extend((1..=self.grid.dim()).map(|a| format!("x{a}")));
        c.push("rho".into());
        c.push("W".into());
        c
    }

    /// Writes `<stem>.csv` with the requested levels and `<stem>.json` describing the lattice.
    pub fn write(&self, dir: &Path, stem: &str, levels: &[usize]) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.to_csv(levels).write(&csv_path)?;
        let header = TableHeader {
            agents: self.agents,
            dt: self.dt,
            steps: self.steps(),
            grid: &self.grid,
            levels_written: levels,
            columns: self.columns(),
        };
        output::write_json(&json_path, &header)?;
        Ok((csv_path, json_path))
    }
}

/// Central differences along `x` inside one `rho` slice, second-order one-sided at the ends.
fn node_gradient(grid: &TableGrid, level: &[f64], n: usize, out: &mut [f64]) {
    let j = n % grid.x_len();
    for (a, ax) in grid.x.iter().enumerate() {
        let s = grid.x_stride(a);
        let i = grid.x_index(j, a);
        let h = ax.spacing();
        out[a] = if i == 0 {
            (-3.0 * level[n] + 4.0 * level[n + s] - level[n + 2 * s]) / (2.0 * h)
        } else if i == ax.nodes - 1 {
            (3.0 * level[n] - 4.0 * level[n - s] + level[n - 2 * s]) / (2.0 * h)
        } else {
            (level[n + s] - level[n - s]) / (2.0 * h)
        };
    }
}

/// Weights `w_j ∝ exp(lambda phi_j)` with `sum w_j phi_j = target`. Targets
/// outside the range of `phi` saturate at the nearest extreme.
pub fn max_entropy_weights(phi: &[f64], target: f64) -> Vec<f64> {
    let lo = phi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * (1.0 + hi.abs()) {
        return vec![1.0 / phi.len() as f64; phi.len()];
    }
    let scale = hi - lo;
    let weights = |lambda: f64| -> Vec<f64> {
        let shift = if lambda >= 0.0 { hi } else { lo };
        let mut w: Vec<f64> = phi
            .iter()
            .map(|p| (lambda * (p - shift) / scale).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        w
    };
    let mean = |w: &[f64]| w.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
    const LAMBDA_MAX: f64 = 700.0;
    let (mut a, mut b) = (-LAMBDA_MAX, LAMBDA_MAX);
    if target <= mean(&weights(a)) {
        return weights(a);
    }
    if target >= mean(&weights(b)) {
        return weights(b);
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean(&weights(mid)) < target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a < 1e-14 {
            break;
        }
    }
    weights(0.5 * (a + b))
}

/// Solves the reduced equation backward from `W(T, x, rho) = p(x, rho)` with
/// step `dtau` (shortened so that it divides the horizon) for `N` agents.
pub fn bellman_backward_reduced(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
    grid: &TableGrid,
    dtau: f64,
    opts: &TableOptions,
) -> Result<ReducedValueTable> {
    if grid.dim() != spec.dimension() {
        return Err(Error::Domain(
            "table lattice does not match the state dimension".into(),
        ));
    }
    if !(dtau > 0.0 && dtau.is_finite()) {
        return Err(Error::Parameter(format!(
            "time step must be positive, got {dtau}"
        )));
    }
    let s = scaled_coefficients(spec, exps, n)?;
    let horizon = s.horizon();
    let steps = ((horizon / dtau) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let d = grid.dim();
    let nx = grid.x_len();
    let nr = grid.rho.nodes;
    let others = (n - 1) as f64;

    let mut nodes = vec![0.0; nx * d];
    for j in 0..nx {
        grid.x_node(j, &mut nodes[j * d..(j + 1) * d]);
    }
    let phi_nodes: Vec<f64> = nodes.chunks_exact(d).map(|x| s.moment().eval(x)).collect();
    let mut dphi = vec![0.0; nx * d];
    for j in 0..nx {
        s.moment()
            .gradient(&nodes[j * d..(j + 1) * d], &mut dphi[j * d..(j + 1) * d]);
    }
    let rho_nodes: Vec<f64> = (0..nr).map(|r| grid.rho.node(r)).collect();
    let weights: Vec<Vec<f64>> = rho_nodes
        .par_iter()
        .map(|&r| max_entropy_weights(&phi_nodes, r))
        .collect();

    let lower: Vec<f64> = grid.x.iter().map(|a| a.lower).collect();
    let upper: Vec<f64> = grid.x.iter().map(|a| a.upper).collect();
    let slack: Vec<f64> = grid
        .x
        .iter()
        .map(|a| opts.margin * (a.upper - a.lower))
        .collect();

    let mut terminal = vec![0.0; nx * nr];
    for r in 0..nr {
        for j in 0..nx {
            terminal[j + r * nx] = s.terminal_payoff(&nodes[j * d..(j + 1) * d], rho_nodes[r]);
        }
    }
    let mut table = ReducedValueTable {
        grid: grid.clone(),
        agents: n,
        dt,
        levels: vec![Vec::new(); steps + 1],
    };
    table.levels[steps] = terminal;

    for k in (0..steps).rev() {
        let tau = k as f64 * dt;
        let next = &table.levels[k + 1];
        let slices: Vec<Result<Vec<f64>>> = (0..nr)
            .into_par_iter()
            .map(|r| {
                let rho = rho_nodes[r];
                let w = &weights[r];
                let mut u = vec![0.0; nx];
                let mut g = [0.0; 2];
                let mut m_hat = vec![0.0; nx * d];
                for j in 0..nx {
                    let x = &nodes[j * d..(j + 1) * d];
                    node_gradient(grid, next, j + r * nx, &mut g[..d]);
                    let norm = g[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if !(norm <= opts.gradient_cap) {
                        return Err(Error::Instability(format!(
                            "|grad_x W| = {norm:e} at tau = {tau:.6}, exceeds the cap {:e}",
                            opts.gradient_cap
                        )));
                    }
                    s.self_gain(tau, x, rho, &mut m_hat[j * d..(j + 1) * d]);
                    u[j] = (0..d).map(|a| m_hat[j * d + a] * g[a]).sum::<f64>() / s.self_weight();
                }
                let u_mean: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
                let u_sq: f64 = w.iter().zip(&u).map(|(a, b)| a * b * b).sum();
                let mut velocity = vec![0.0; nx * d];
                let mut f = [0.0; 2];
                let mut m_bar = [0.0; 2];
                for j in 0..nx {
                    let x = &nodes[j * d..(j + 1) * d];
                    s.drift(tau, x, rho, &mut f[..d]);
                    s.cross_gain(tau, x, rho, &mut m_bar[..d]);
                    for a in 0..d {
                        velocity[j * d + a] = f[a] + m_hat[j * d + a] * u[j] + m_bar[a] * others * u_mean;
                    }
                }
                let rho_rate: f64 = (0..nx)
                    .map(|j| w[j] * (0..d).map(|a| dphi[j * d + a] * velocity[j * d + a]).sum::<f64>())
                    .sum();
                let mut courant = dt * rho_rate.abs() / grid.rho.spacing();
                for j in 0..nx {
                    for (a, ax) in grid.x.iter().enumerate() {
                        courant = courant.max(dt * velocity[j * d + a].abs() / ax.spacing());
                    }
                }
                if !(courant <= opts.courant) {
                    return Err(Error::Cfl {
                        courant,
                        limit: opts.courant,
                        max_speed: velocity.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                    });
                }
                let rho_next = rho + dt * rho_rate;
                let mut foot = [0.0; 2];
                (0..nx)
                    .map(|j| {
                        let x = &nodes[j * d..(j + 1) * d];
                        for a in 0..d {
                            let v = x[a] + dt * velocity[j * d + a];
                            if v < lower[a] - slack[a] || v > upper[a] + slack[a] {
                                return Err(Error::DomainTooSmall(format!(
                                    "characteristic from x = {x:?} reaches {v} on axis {} at tau = {tau:.6}",
                                    a + 1
                                )));
                            }
                            foot[a] = v.clamp(lower[a], upper[a]);
                        }
                        let cost = s.running_cost(tau, x, rho)
                            + 0.5 * s.self_weight() * u[j] * u[j]
                            + 0.5 * s.cross_weight() * others * u_sq;
                        Ok(table.interpolate(next, &foot[..d], rho_next) - dt * cost)
                    })
                    .collect()
            })
            .collect();
        let mut level = Vec::with_capacity(nx * nr);
        for slice in slices {
            level.extend(slice?);
        }
        table.levels[k] = level;
    }
    Ok(table)
}
