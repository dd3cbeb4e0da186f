//! Particle ensembles, empirical moments and distances to grid densities.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::MomentPolynomial;
use crate::output::Csv;

/// `N` agent states in `R^d` at one instant, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    states: Vec<f64>,
    dim: usize,
    time: f64,
}

impl ParticleEnsemble {
    pub fn new(states: Vec<f64>, dim: usize, time: f64) -> Result<Self> {
        if dim == 0 || !states.len().is_multiple_of(dim) {
            return Err(Error::Domain(format!(
                "{} values do not form rows of dimension {dim}",
                states.len()
            )));
        }
        if states.is_empty() {
            return Err(Error::Domain("ensemble needs at least one agent".into()));
        }
        if let Some(k) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "agent {} has a non-finite state",
                k / dim
            )));
        }
        if !time.is_finite() || time < 0.0 {
            return Err(Error::Domain(format!("invalid ensemble time {time}")));
        }
        Ok(Self { states, dim, time })
    }

    /// One-dimensional ensemble from a list of positions.
    pub fn from_positions(x: &[f64], time: f64) -> Result<Self> {
        Self::new(x.to_vec(), 1, time)
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    /// Values of coordinate `axis` across agents.
    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.rows().map(|r| r[axis]).collect()
    }

    /// Rows reordered so that row `k` of the result is row `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut states = Vec::with_capacity(self.states.len());
        for &p in perm {
            states.extend_from_slice(self.state(p));
        }
        Self {
            states,
            dim: self.dim,
            time: self.time,
        }
    }

    pub fn measure(&self) -> EmpiricalMeasure<'_> {
        EmpiricalMeasure { ensemble: self }
    }

    pub fn to_csv(&self) -> Csv {
        let header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        let mut csv = Csv::with_header(&header);
        for r in self.rows() {
            csv.row(r);
        }
        csv
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.to_csv().write(path)
    }
}

/// Uniform probability measure on the rows of an ensemble.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalMeasure<'a> {
    ensemble: &'a ParticleEnsemble,
}

impl EmpiricalMeasure<'_> {
    pub fn weight(&self) -> f64 {
        1.0 / self.ensemble.len() as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.weight() * self.ensemble.len() as f64
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.ensemble.rows().map(f).sum::<f64>() * self.weight()
    }
}

pub fn empirical_moment(phi: &MomentPolynomial, ens: &ParticleEnsemble) -> f64 {
    ens.measure().integrate(|x| phi.eval(x))
}

fn check_agent(ens: &ParticleEnsemble, i: usize) -> Result<()> {
    if ens.len() < 2 {
        return Err(Error::Domain("leave-one-out moments need N >= 2".into()));
    }
    if i >= ens.len() {
        return Err(Error::Domain(format!(
            "agent index {i} out of range for N = {}",
            ens.len()
        )));
    }
    Ok(())
}

/// Moment over every agent except `i` (zero-based).
pub fn leave_one_out_moment(
    phi: &MomentPolynomial,
    ens: &ParticleEnsemble,
    i: usize,
) -> Result<f64> {
    check_agent(ens, i)?;
    let sum: f64 = ens
        .rows()
        .enumerate()
        .filter(|(k, _)| *k != i)
        .map(|(_, x)| phi.eval(x))
        .sum();
    Ok(sum / (ens.len() - 1) as f64)
}

/// All `N` leave-one-out moments from one pass over the ensemble.
pub fn leave_one_out_moments(phi: &MomentPolynomial, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
    check_agent(ens, 0)?;
    let values: Vec<f64> = ens.rows().map(|x| phi.eval(x)).collect();
    let total: f64 = values.iter().sum();
    let m = (ens.len() - 1) as f64;
    Ok(values.iter().map(|v| (total - v) / m).collect())
}

pub fn moment_gap(phi: &MomentPolynomial, ens: &ParticleEnsemble, i: usize) -> Result<f64> {
    let loo = leave_one_out_moment(phi, ens, i)?;
    Ok((empirical_moment(phi, ens) - loo).abs())
}

fn check_mass(grid: &Grid, g: &[f64], tol: f64) -> Result<()> {
    if g.len() != grid.len() {
        return Err(Error::Domain(format!(
            "density has {} values, grid has {} cells",
            g.len(),
            grid.len()
        )));
    }
    let mass = grid.integrate(g);
    if (mass - 1.0).abs() > tol {
        return Err(Error::UnnormalizedDensity { mass, tol });
    }
    Ok(())
}

pub const MASS_TOL: f64 = 1e-8;

/// Midpoint rule for `int Phi g` over the grid.
pub fn moment_of_density(phi: &MomentPolynomial, grid: &Grid, g: &[f64]) -> Result<f64> {
    check_mass(grid, g, MASS_TOL)?;
    let mut x = vec![0.0; grid.dim()];
    let mut acc = 0.0;
    for (k, v) in g.iter().enumerate() {
        grid.center(k, &mut x);
        acc += phi.eval(&x) * v;
    }
    Ok(acc * grid.cell_volume())
}

/// `int |F_N - G|` over the grid interval by the trapezoid rule on cell
/// faces, with `F_N` the empirical CDF of `samples` and `G` the CDF of the
/// cell density `g`. Zero whenever the two CDFs agree at every face.
pub fn wasserstein1_1d(samples: &[f64], grid: &Grid, g: &[f64]) -> Result<f64> {
    if grid.dim() != 1 {
        return Err(Error::UnsupportedDimension(grid.dim()));
    }
    if samples.is_empty() {
        return Err(Error::Domain("no samples".into()));
    }
    if g.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(
            "density must be finite and nonnegative".into(),
        ));
    }
    check_mass(grid, g, MASS_TOL)?;
    let ax = grid.axis(0);
    let dx = ax.dx();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let w = 1.0 / sorted.len() as f64;
    let emp_cdf = |x: f64| sorted.partition_point(|&s| s <= x) as f64 * w;

    let mut g_cdf = 0.0;
    let mut prev = emp_cdf(ax.lower).abs();
    let mut total = 0.0;
    for (c, &gc) in g.iter().enumerate() {
        g_cdf += gc * dx;
        let face = if c + 1 == ax.cells {
            ax.upper
        } else {
            ax.lower + (c + 1) as f64 * dx
        };
        let gap = (emp_cdf(face) - g_cdf).abs();
        total += 0.5 * (prev + gap) * dx;
        prev = gap;
    }
    Ok(total)
}

/// Multi-indices of total degree `1..=max_order` in `dim` variables, graded order.
pub fn moment_indices(dim: usize, max_order: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for order in 1..=max_order {
        let mut idx = vec![0u32; dim];
        fill_indices(&mut idx, 0, order, &mut out);
    }
    out
}

fn fill_indices(idx: &mut Vec<u32>, pos: usize, remaining: u32, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == idx.len() {
        idx[pos] = remaining;
        out.push(idx.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        idx[pos] = k;
        fill_indices(idx, pos + 1, remaining - k, out);
    }
}

fn monomial(index: &[u32], x: &[f64]) -> f64 {
    index
        .iter()
        .zip(x)
        .map(|(&j, &v)| v.powi(j as i32))
        .product()
}

/// Raw moments of the ensemble for every index from [`moment_indices`].
pub fn ensemble_moments(ens: &ParticleEnsemble, max_order: u32) -> Vec<(Vec<u32>, f64)> {
    moment_indices(ens.dim(), max_order)
        .into_iter()
        .map(|idx| {
            let m = ens.measure().integrate(|x| monomial(&idx, x));
            (idx, m)
        })
        .collect()
}

/// Raw moments of a cell density, same index order as [`ensemble_moments`].
pub fn density_moments(grid: &Grid, g: &[f64], max_order: u32) -> Vec<(Vec<u32>, f64)> {
    let mut x = vec![0.0; grid.dim()];
    moment_indices(grid.dim(), max_order)
        .into_iter()
        .map(|idx| {
            let mut acc = 0.0;
            for (k, v) in g.iter().enumerate() {
                grid.center(k, &mut x);
                acc += monomial(&idx, &x) * v;
            }
            (idx, acc * grid.cell_volume())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MomentTerm;
    use proptest::prelude::*;

    fn ens(x: &[f64]) -> ParticleEnsemble {
        ParticleEnsemble::from_positions(x, 0.0).unwrap()
    }

    fn x() -> MomentPolynomial {
        MomentPolynomial::power(1)
    }

    fn x2() -> MomentPolynomial {
        MomentPolynomial::power(2)
    }

    #[test]
    fn moment_examples() {
        assert_eq!(empirical_moment(&x(), &ens(&[1.0, 2.0, 3.0])), 2.0);
        assert_eq!(
            empirical_moment(&MomentPolynomial::constant(1, 1.0), &ens(&[0.3, -7.0])),
            1.0
        );
        assert!((empirical_moment(&x2(), &ens(&[1.0, 2.0, 3.0])) - 14.0 / 3.0).abs() < 1e-15);
        assert!(ParticleEnsemble::from_positions(&[], 0.0).is_err());
    }

    #[test]
    fn leave_one_out_examples() {
        assert_eq!(
            leave_one_out_moment(&x(), &ens(&[1.0, 2.0, 3.0]), 1).unwrap(),
            2.0
        );
        assert_eq!(
            leave_one_out_moment(&x(), &ens(&[5.0, 5.0]), 0).unwrap(),
            5.0
        );
        assert_eq!(
            leave_one_out_moment(&x2(), &ens(&[1.0, 2.0, 3.0]), 2).unwrap(),
            2.5
        );
        assert!(matches!(
            leave_one_out_moment(&x(), &ens(&[1.0]), 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gap_examples() {
        assert_eq!(moment_gap(&x(), &ens(&[0.0, 0.0, 0.0]), 1).unwrap(), 0.0);
        assert_eq!(moment_gap(&x(), &ens(&[1.0, 2.0, 3.0]), 2).unwrap(), 0.5);
        let e = ens(&[0.7, -1.9]);
        for i in 0..2 {
            let direct = (x2().eval(e.state(i)) - x2().eval(e.state(1 - i))).abs() / 2.0;
            assert!((moment_gap(&x2(), &e, i).unwrap() - direct).abs() < 1e-15);
        }
    }

    fn grid1(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::uniform(&[lo], &[hi], n).unwrap()
    }

    #[test]
    fn w1_point_mass_and_pair() {
        let g = grid1(-2.0, 2.0, 40);
        let dx = 0.1;
        let mut d = vec![0.0; 40];
        d[g.locate(&[0.0])] = 1.0 / dx;
        assert!(wasserstein1_1d(&[0.0, 0.0, 0.0], &g, &d).unwrap() <= dx);

        let mut d = vec![0.0; 40];
        d[g.locate(&[-1.0])] = 0.5 / dx;
        d[g.locate(&[1.0 - 1e-9])] = 0.5 / dx;
        assert!(wasserstein1_1d(&[1.0, -1.0], &g, &d).unwrap() <= dx);
    }

    #[test]
    fn w1_single_sample_against_uniform() {
        let g = grid1(0.0, 1.0, 50);
        let d = vec![1.0; 50];
        // oracle: fine trapezoid quadrature of |H(x) - x| with H = 1 on [0, 1]
        let m = 200_000;
        let oracle: f64 = (0..m)
            .map(|k| {
                let s = (k as f64 + 0.5) / m as f64;
                (1.0 - s).abs()
            })
            .sum::<f64>()
            / m as f64;
        let w = wasserstein1_1d(&[0.0], &g, &d).unwrap();
        assert!((w - oracle).abs() < 1e-9);
        assert!((w - 0.5).abs() <= 0.02);
    }

    #[test]
    fn w1_rejects_two_dimensions() {
        let g = Grid::uniform(&[0.0, 0.0], &[1.0, 1.0], 16).unwrap();
        assert!(matches!(
            wasserstein1_1d(&[0.5], &g, &vec![1.0; 256]),
            Err(Error::UnsupportedDimension(2))
        ));
    }

    #[test]
    fn density_moment_examples() {
        let g = grid1(-6.0, 6.0, 1200);
        let gauss: Vec<f64> = g
            .axis(0)
            .centers()
            .iter()
            .map(|x| (-x * x / 2.0).exp())
            .collect();
        let mass = g.integrate(&gauss);
        let gauss: Vec<f64> = gauss.iter().map(|v| v / mass).collect();
        assert!(
            (moment_of_density(&MomentPolynomial::constant(1, 1.0), &g, &gauss).unwrap() - 1.0)
                .abs()
                < 1e-8
        );
        assert!(moment_of_density(&x(), &g, &gauss).unwrap().abs() < 1e-12);
        assert!((moment_of_density(&x2(), &g, &gauss).unwrap() - 1.0).abs() < 1e-3);
        let half: Vec<f64> = gauss.iter().map(|v| v * 0.5).collect();
        assert!(matches!(
            moment_of_density(&x(), &g, &half),
            Err(Error::UnnormalizedDensity { .. })
        ));
    }

    #[test]
    fn battery_indices_are_graded() {
        assert_eq!(moment_indices(1, 3), vec![vec![1], vec![2], vec![3]]);
        assert_eq!(
            moment_indices(2, 2),
            vec![vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]
        );
    }

    #[test]
    fn ensemble_csv_has_one_row_per_agent() {
        let e = ParticleEnsemble::new(vec![1.0, 2.0, 3.0, 4.0], 2, 0.0).unwrap();
        let csv = e.to_csv();
        let lines: Vec<&str> = csv.as_str().lines().collect();
        assert_eq!(lines[0], "x1,x2");
        assert_eq!(lines.len(), 3);
    }

    fn poly2() -> MomentPolynomial {
        MomentPolynomial::new(
            1,
            vec![
                MomentTerm {
                    index: vec![2],
                    coeff: 0.5,
                },
                MomentTerm {
                    index: vec![1],
                    coeff: -1.0,
                },
                MomentTerm {
                    index: vec![0],
                    coeff: 0.25,
                },
            ],
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn moment_is_permutation_invariant(xs in prop::collection::vec(-5.0..5.0f64, 1..20), shift in 0usize..20) {
            let e = ens(&xs);
            let n = xs.len();
            let perm: Vec<usize> = (0..n).map(|k| (k + shift) % n).rev().collect();
            let a = empirical_moment(&poly2(), &e);
            let b = empirical_moment(&poly2(), &e.permuted(&perm));
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn gap_matches_expanded_identity(xs in prop::collection::vec(-5.0..5.0f64, 2..20), pick in 0usize..20) {
            let e = ens(&xs);
            let i = pick % xs.len();
            let n = xs.len() as f64;
            let phi = poly2();
            let loo = leave_one_out_moment(&phi, &e, i).unwrap();
            let gap = moment_gap(&phi, &e, i).unwrap();
            let expanded = (phi.eval(e.state(i)) - loo).abs() / n;
            prop_assert!((gap - expanded).abs() <= 1e-12 * (1.0 + expanded));
            let full = empirical_moment(&phi, &e);
            let split = phi.eval(e.state(i)) / n + (n - 1.0) / n * loo;
            prop_assert!((full - split).abs() <= 1e-12 * (1.0 + full.abs()));
            let all = leave_one_out_moments(&phi, &e).unwrap();
            prop_assert!((all[i] - loo).abs() <= 1e-12 * (1.0 + loo.abs()));
        }

        #[test]
        fn w1_is_nonnegative(xs in prop::collection::vec(-1.5..1.5f64, 1..40), n in 16usize..64) {
            let g = grid1(-2.0, 2.0, n);
            let d = vec![0.25; n];
            prop_assert!(wasserstein1_1d(&xs, &g, &d).unwrap() >= 0.0);
        }
    }

    #[test]
    fn w1_vanishes_on_matching_cdfs() {
        // one sample per cell: both CDFs equal k/16 at face k
        let g = grid1(0.0, 1.0, 16);
        let d = vec![1.0; 16];
        let samples: Vec<f64> = g.axis(0).centers();
        assert!(wasserstein1_1d(&samples, &g, &d).unwrap().abs() < 1e-15);
        let mut spike = vec![0.0; 16];
        spike[8] = 16.0;
        assert!(wasserstein1_1d(&[0.53; 4], &g, &spike).unwrap().abs() < 1e-15);
    }
}
