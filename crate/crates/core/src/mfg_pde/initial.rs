//! Built-in initial densities and sampling of particle ensembles from them.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::empirical::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    /// Product Gaussian; `std` has one entry per axis or a single shared entry.
    Gaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `prod_k cos^2(pi (x_k - c_k) / (2 r))` on `|x_k - c_k| < r`.
    Bump {
        center: Vec<f64>,
        radius: f64,
    },
}

impl InitialDensity {
    pub fn gaussian_1d(mean: f64, std: f64) -> Self {
        InitialDensity::Gaussian {
            mean: vec![mean],
            std: vec![std],
        }
    }

    fn check_len(v: &[f64], d: usize, name: &str) -> Result<()> {
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::config(
                format!("initial.{name}"),
                format!("expected {d} entries, got {}", v.len()),
            ))
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            InitialDensity::Gaussian { mean, std } => {
                Self::check_len(mean, d, "mean")?;
                if std.len() != 1 {
                    Self::check_len(std, d, "std")?;
                }
                if std.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::config("initial.std", "must be > 0"));
                }
            }
            InitialDensity::Uniform { lower, upper } => {
                Self::check_len(lower, d, "lower")?;
                Self::check_len(upper, d, "upper")?;
                if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                    return Err(Error::config("initial", "uniform needs lower < upper"));
                }
            }
            InitialDensity::Bump { center, radius } => {
                Self::check_len(center, d, "center")?;
                if !(*radius > 0.0) {
                    return Err(Error::config("initial.radius", "must be > 0"));
                }
            }
        }
        Ok(())
    }

    fn unnormalized(&self, x: &[f64]) -> f64 {
        match self {
            InitialDensity::Gaussian { mean, std } => x
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let s = if std.len() == 1 { std[0] } else { std[k] };
                    (-0.5 * ((v - mean[k]) / s).powi(2)).exp()
                })
                .product(),
            InitialDensity::Uniform { lower, upper } => {
                let inside = x
                    .iter()
                    .enumerate()
                    .all(|(k, v)| *v >= lower[k] && *v <= upper[k]);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
            InitialDensity::Bump { center, radius } => x
                .iter()
                .zip(center)
                .map(|(v, c)| {
                    let z = (v - c) / radius;
                    if z.abs() < 1.0 {
                        (std::f64::consts::FRAC_PI_2 * z).cos().powi(2)
                    } else {
                        0.0
                    }
                })
                .product(),
        }
    }

    /// Cell-centre values rescaled to unit midpoint mass.
    pub fn discretize(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.validate(grid.dim())?;
        let mut x = vec![0.0; grid.dim()];
        let mut g: Vec<f64> = (0..grid.len())
            .map(|k| {
                grid.center(k, &mut x);
                self.unnormalized(&x)
            })
            .collect();
        let mass = grid.integrate(&g);
        if !(mass > 0.0) {
            return Err(Error::config("initial", "density has no mass on the grid"));
        }
        g.iter_mut().for_each(|v| *v /= mass);
        Ok(g)
    }
}

/// Draws `n` agents from a cell density: a cell by inverse CDF on the cell
/// masses, then a uniform position inside that cell.
pub fn sample_ensemble(
    grid: &Grid,
    g: &[f64],
    n: usize,
    rng: &mut impl RngCore,
) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::Domain("cannot sample an empty ensemble".into()));
    }
    let vol = grid.cell_volume();
    let mut cdf = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    for v in g {
        acc += v.max(0.0) * vol;
        cdf.push(acc);
    }
    let d = grid.dim();
    let mut idx = vec![0usize; d];
    let mut states = Vec::with_capacity(n * d);
    for _ in 0..n {
        let target = rng::uniform(rng) * acc;
        let cell = cdf.partition_point(|&c| c <= target).min(g.len() - 1);
        grid.multi_index(cell, &mut idx);
        for (a, &i) in idx.iter().enumerate() {
            let ax = grid.axis(a);
            states.push(ax.lower + (i as f64 + rng::uniform(rng)) * ax.dx());
        }
    }
    ParticleEnsemble::new(states, d, 0.0)
}
