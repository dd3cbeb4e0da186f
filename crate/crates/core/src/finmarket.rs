//! Many-investor market: each agent holds `x_i` in a risky stock and `y_i`
//! in a bond, the price is `S = lambda * mean(x)`, and the stock return feeds
//! back into every risky book through the transaction factor `kappa`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg_pde::LimitTerms;
use crate::micro::GradientSource;
use crate::model::functions::{scalar, vector_fn};
use crate::model::{
    classify_regime, ModelSpec, MomentPolynomial, RegimeFlags, ScalarField, ScalarForm,
    ScalingExponents,
};
use crate::output::{num, Csv};

/// Lower bound applied to the mean holding inside the limit coefficients.
const RHO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    /// Transaction factor; `0` is the frictionless market.
    pub kappa: f64,
    /// Market depth.
    pub lambda: f64,
    /// Bond interest rate.
    pub r: f64,
    pub dividend: f64,
    pub alpha_hat: f64,
    pub horizon: f64,
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("market.{field}"), msg));
        if !(0.0..1.0).contains(&self.kappa) {
            return bad("kappa", "must lie in [0, 1)");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", "must lie in (0, 1]");
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return bad("r", "must be finite and >= 0");
        }
        if !(self.dividend > 0.0 && self.dividend.is_finite()) {
            return bad("dividend", "must be finite and > 0");
        }
        if !(self.alpha_hat > 0.0 && self.alpha_hat.is_finite()) {
            return Err(Error::DegenerateCost(self.alpha_hat));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon", "must be finite and > 0");
        }
        Ok(())
    }
}

/// Risky and riskless books of every agent at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioEnsemble {
    x: Vec<f64>,
    y: Vec<f64>,
    time: f64,
}

impl PortfolioEnsemble {
    pub fn new(x: Vec<f64>, y: Vec<f64>, time: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Domain(
                "risky and riskless books need the same positive length".into(),
            ));
        }
        if x.iter().chain(&y).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain(
                "holdings must be finite and nonnegative".into(),
            ));
        }
        let ens = Self { x, y, time };
        let m = ens.mean_risky();
        if m <= 0.0 {
            return Err(Error::DegeneratePrice(m));
        }
        Ok(ens)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn risky(&self) -> &[f64] {
        &self.x
    }

    pub fn riskless(&self) -> &[f64] {
        &self.y
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn wealth(&self) -> Vec<f64> {
        self.x.iter().zip(&self.y).map(|(a, b)| a + b).collect()
    }

    pub fn mean_risky(&self) -> f64 {
        self.x.iter().sum::<f64>() / self.x.len() as f64
    }

    pub fn mean_riskless(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            x: perm.iter().map(|&p| self.x[p]).collect(),
            y: perm.iter().map(|&p| self.y[p]).collect(),
            time: self.time,
        }
    }
}

/// `S = lambda * mean(x)`.
pub fn price(ens: &PortfolioEnsemble, lambda: f64) -> f64 {
    lambda * ens.mean_risky()
}

/// `c1 = (1 + kappa / (1 - kappa)) kappa D / lambda` and `c2 = kappa / (1 - kappa)`.
pub fn market_constants(params: &MarketParams) -> Result<(f64, f64)> {
    let k = params.kappa;
    if !(0.0..1.0).contains(&k) {
        return Err(Error::Parameter(format!("kappa = {k} must lie in [0, 1)")));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::Parameter(format!(
            "lambda = {} must be positive",
            params.lambda
        )));
    }
    let c2 = k / (1.0 - k);
    Ok(((1.0 + c2) * k * params.dividend / params.lambda, c2))
}

/// `(I - P)^{-1} rhs` for `P = kappa x e^T / (e^T x)`, using
/// `(I - P)^{-1} = I + P / (1 - kappa)`.
pub fn rank_one_inverse_apply(x: &[f64], kappa: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    if x.len() != rhs.len() {
        return Err(Error::Domain(
            "holdings and right-hand side differ in length".into(),
        ));
    }
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Parameter(format!(
            "kappa = {kappa} must lie in [0, 1)"
        )));
    }
    let total: f64 = x.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegeneratePrice(total));
    }
    let scale = kappa / (1.0 - kappa) * rhs.iter().sum::<f64>() / total;
    Ok(rhs.iter().zip(x).map(|(b, xi)| b + scale * xi).collect())
}

/// `(I - P) v`, matrix-free.
pub fn rank_one_apply(x: &[f64], kappa: f64, v: &[f64]) -> Vec<f64> {
    let scale = kappa * v.iter().sum::<f64>() / x.iter().sum::<f64>();
    v.iter().zip(x).map(|(a, xi)| a - scale * xi).collect()
}

fn check_controls(ens: &PortfolioEnsemble, u: &[f64]) -> Result<()> {
    if u.len() != ens.len() {
        return Err(Error::Domain(format!(
            "{} controls for {} agents",
            u.len(),
            ens.len()
        )));
    }
    Ok(())
}

/// `x_i' = (c1 + c2 mean(u)) x_i / mean(x) + u_i` and `y_i' = r y_i - u_i`.
pub fn explicit_market_drift(
    ens: &PortfolioEnsemble,
    u: &[f64],
    params: &MarketParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_controls(ens, u)?;
    let (c1, c2) = market_constants(params)?;
    let mean_x = ens.mean_risky();
    if mean_x <= 0.0 {
        return Err(Error::DegeneratePrice(mean_x));
    }
    let mean_u = u.iter().sum::<f64>() / u.len() as f64;
    let common = (c1 + c2 * mean_u) / mean_x;
    let dx = ens
        .x
        .iter()
        .zip(u)
        .map(|(xi, ui)| common * xi + ui)
        .collect();
    let dy = ens
        .y
        .iter()
        .zip(u)
        .map(|(yi, ui)| params.r * yi - ui)
        .collect();
    Ok((dx, dy))
}

/// The same drift from the implicit form `(I - P) x' = kappa D x / S + u`.
pub fn implicit_market_drift(
    ens: &PortfolioEnsemble,
    u: &[f64],
    params: &MarketParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_controls(ens, u)?;
    let s = price(ens, params.lambda);
    if s <= 0.0 {
        return Err(Error::DegeneratePrice(s));
    }
    let rhs: Vec<f64> = ens
        .x
        .iter()
        .zip(u)
        .map(|(xi, ui)| params.kappa * params.dividend / s * xi + ui)
        .collect();
    let dx = rank_one_inverse_apply(&ens.x, params.kappa, &rhs)?;
    let dy = ens
        .y
        .iter()
        .zip(u)
        .map(|(yi, ui)| params.r * yi - ui)
        .collect();
    Ok((dx, dy))
}

/// `(x - rho)^2 / 2` on the risky book in dimension `dim`.
pub fn default_objective(dim: usize) -> Arc<dyn ScalarField> {
    scalar(ScalarForm::tracking(dim, 0, 1.0))
}

/// Limit model on `(x, y)` with `Phi = x`: `f = (c1 x / rho, r y)`,
/// `m_hat = (1, -1)`, `m_bar = (c2 x / rho, 0)`, no cross cost and no
/// terminal payoff. The exponents are `(0, 0, 1, 1)`.
pub fn market_model_spec(
    params: &MarketParams,
    objective: Arc<dyn ScalarField>,
) -> Result<(ModelSpec, ScalingExponents)> {
    params.validate()?;
    let (c1, c2) = market_constants(params)?;
    let r = params.r;
    let spec = ModelSpec::builder(2, params.horizon)
        .drift(vector_fn(2, move |_t, z, rho, out| {
            out[0] = c1 * z[0] / rho.max(RHO_FLOOR);
            out[1] = r * z[1];
        }))
        .self_gain(vector_fn(2, |_t, _z, _rho, out| {
            out[0] = 1.0;
            out[1] = -1.0;
        }))
        .cross_gain(vector_fn(2, move |_t, z, rho, out| {
            out[0] = c2 * z[0] / rho.max(RHO_FLOOR);
            out[1] = 0.0;
        }))
        .running_cost(objective)
        .moment(MomentPolynomial::coordinate(2, 0))
        .weights(params.alpha_hat, 0.0)
        .build()?;
    Ok((spec, ScalingExponents::non_local()))
}

/// Regime flags and the term checklist of the market limit system.
pub fn market_limit_terms(params: &MarketParams) -> Result<(RegimeFlags, LimitTerms)> {
    let (_, c2) = market_constants(params)?;
    let flags = classify_regime(&ScalingExponents::non_local());
    let terms = LimitTerms::new(&flags, c2 == 0.0, 0.0);
    Ok((terms.effective_flags(&flags), terms))
}

/// Risky book only (`y = 0`): `f = c1 x / rho`, `m_hat = 1`, `m_bar = c2 x / rho`.
pub fn simplified_market_spec(
    params: &MarketParams,
    objective: Arc<dyn ScalarField>,
) -> Result<ModelSpec> {
    params.validate()?;
    let (c1, c2) = market_constants(params)?;
    ModelSpec::builder(1, params.horizon)
        .drift(vector_fn(1, move |_t, z, rho, out| {
            out[0] = c1 * z[0] / rho.max(RHO_FLOOR)
        }))
        .self_gain(vector_fn(1, |_t, _z, _rho, out| out[0] = 1.0))
        .cross_gain(vector_fn(1, move |_t, z, rho, out| {
            out[0] = c2 * z[0] / rho.max(RHO_FLOOR)
        }))
        .running_cost(objective)
        .moment(MomentPolynomial::coordinate(1, 0))
        .weights(params.alpha_hat, 0.0)
        .build()
}

/// How agents choose `u_i`.
pub enum MarketPolicy<'a> {
    /// `u = 0`.
    Idle,
    /// The same shift for everyone.
    Constant(f64),
    /// `u_i = m_hat . grad W / alpha_hat` from a value on `(x, y)` or, for a
    /// one-dimensional source, on `x` alone.
    Feedback(&'a dyn GradientSource),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketOptions {
    pub dt: f64,
    /// Keep a per-agent snapshot every this many steps (0 keeps only the ends).
    pub snapshot_every: usize,
}

#[derive(Debug, Clone)]
pub struct MarketTrajectory {
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
    pub mean_risky: Vec<f64>,
    pub mean_riskless: Vec<f64>,
    /// Cumulative number of book entries projected back to zero.
    pub clamp_counts: Vec<u64>,
    pub snapshots: Vec<PortfolioEnsemble>,
}

impl MarketTrajectory {
    pub fn final_ensemble(&self) -> &PortfolioEnsemble {
        self.snapshots
            .last()
            .expect("trajectory keeps the final snapshot")
    }

    /// `t, S, mean_x, mean_y, clamp_count`.
    pub fn series_csv(&self) -> Csv {
        let mut csv = Csv::with_header(&["t", "S", "mean_x", "mean_y", "clamp_count"]);
        for k in 0..self.times.len() {
            let mut fields: Vec<String> = [
                self.times[k],
                self.prices[k],
                self.mean_risky[k],
                self.mean_riskless[k],
            ]
            .iter()
            .map(|v| num(*v))
            .collect();
            fields.push(self.clamp_counts[k].to_string());
            csv.fields(&fields);
        }
        csv
    }

    /// `agent, t, x, y` for every kept snapshot.
    pub fn snapshots_csv(&self) -> Csv {
        let mut csv = Csv::with_header(&["agent", "t", "x", "y"]);
        for ens in &self.snapshots {
            for i in 0..ens.len() {
                csv.row_with_int(i as u64 + 1, &[ens.time, ens.x[i], ens.y[i]]);
            }
        }
        csv
    }
}

fn policy_controls(
    policy: &MarketPolicy<'_>,
    ens: &PortfolioEnsemble,
    params: &MarketParams,
    t: f64,
) -> Result<Vec<f64>> {
    let n = ens.len();
    match policy {
        MarketPolicy::Idle => Ok(vec![0.0; n]),
        MarketPolicy::Constant(c) => Ok(vec![*c; n]),
        MarketPolicy::Feedback(source) => {
            let total: f64 = ens.x.iter().sum();
            let others = |i: usize| {
                if n > 1 {
                    (total - ens.x[i]) / (n - 1) as f64
                } else {
                    ens.x[i]
                }
            };
            let mut g = [0.0; 2];
            match source.dim() {
                1 => Ok((0..n)
                    .map(|i| {
                        source.gradient(t, &[ens.x[i]], others(i), &mut g[..1]);
                        g[0] / params.alpha_hat
                    })
                    .collect()),
                2 => Ok((0..n)
                    .map(|i| {
                        source.gradient(t, &[ens.x[i], ens.y[i]], others(i), &mut g);
                        (g[0] - g[1]) / params.alpha_hat
                    })
                    .collect()),
                d => Err(Error::UnsupportedDimension(d)),
            }
        }
    }
}

/// Explicit Euler on the market ODE, projecting negative books to zero
/// after every step.
pub fn simulate_market(
    params: &MarketParams,
    ens0: &PortfolioEnsemble,
    policy: &MarketPolicy<'_>,
    opts: &MarketOptions,
) -> Result<MarketTrajectory> {
    params.validate()?;
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(Error::Parameter(format!(
            "time step must be positive, got {}",
            opts.dt
        )));
    }
    let mut horizon = params.horizon;
    if let MarketPolicy::Feedback(source) = policy {
        if opts.dt > source.time_step() * (1.0 + 1e-12) {
            return Err(Error::Parameter(format!(
                "market step {} is coarser than the value step {}",
                opts.dt,
                source.time_step()
            )));
        }
        horizon = horizon.min(source.horizon());
    }
    let steps = ((horizon / opts.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;

    let mut ens = ens0.clone();
    ens.time = 0.0;
    let mut out = MarketTrajectory {
        times: vec![0.0],
        prices: vec![price(&ens, params.lambda)],
        mean_risky: vec![ens.mean_risky()],
        mean_riskless: vec![ens.mean_riskless()],
        clamp_counts: vec![0],
        snapshots: vec![ens.clone()],
    };
    let mut clamps = 0u64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = policy_controls(policy, &ens, params, t)?;
        let (dx, dy) = explicit_market_drift(&ens, &u, params)?;
        for (v, d) in ens.x.iter_mut().zip(&dx).chain(ens.y.iter_mut().zip(&dy)) {
            *v += dt * d;
            if !v.is_finite() {
                return Err(Error::Instability(format!(
                    "non-finite holding at t = {:.6}",
                    t + dt
                )));
            }
            if *v < 0.0 {
                *v = 0.0;
                clamps += 1;
            }
        }
        ens.time = t + dt;
        let m = ens.mean_risky();
        if m <= 0.0 {
            return Err(Error::DegeneratePrice(m));
        }
        out.times.push(ens.time);
        out.prices.push(price(&ens, params.lambda));
        out.mean_risky.push(m);
        out.mean_riskless.push(ens.mean_riskless());
        out.clamp_counts.push(clamps);
        let keep =
            k + 1 == steps || (opts.snapshot_every > 0 && (k + 1) % opts.snapshot_every == 0);
        if keep {
            out.snapshots.push(ens.clone());
        }
    }
    if clamps > 0 {
        log::info!("market simulation projected {clamps} negative holdings to zero");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::mfg_pde::{velocity_field, InitialDensity};
    use crate::model::scaled_coefficients;
    use crate::rng;
    use proptest::prelude::*;

    fn params(kappa: f64, r: f64) -> MarketParams {
        MarketParams {
            kappa,
            lambda: 0.5,
            r,
            dividend: 0.1,
            alpha_hat: 1.0,
            horizon: 1.0,
        }
    }

    fn ens(x: &[f64], y: &[f64]) -> PortfolioEnsemble {
        PortfolioEnsemble::new(x.to_vec(), y.to_vec(), 0.0).unwrap()
    }

    /// Gaussian elimination with partial pivoting on a dense copy.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    fn sigma(x: &[f64], kappa: f64) -> Vec<Vec<f64>> {
        let total: f64 = x.iter().sum();
        (0..x.len())
            .map(|i| {
                (0..x.len())
                    .map(|j| f64::from(i == j) - kappa * x[i] / total)
                    .collect()
            })
            .collect()
    }

    fn draws(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut r = rng::stream(seed, n, 0);
        (0..n)
            .map(|_| lo + (hi - lo) * rng::uniform(&mut r))
            .collect()
    }

    #[test]
    fn price_examples() {
        assert_eq!(price(&ens(&[2.0, 2.0], &[0.0, 0.0]), 0.5), 1.0);
        assert_eq!(price(&ens(&[0.0, 4.0], &[0.0, 0.0]), 1.0), 2.0);
        assert!((price(&ens(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]), 0.25) - 0.625).abs() < 1e-15);
        assert!(matches!(
            PortfolioEnsemble::new(vec![0.0, 0.0], vec![1.0, 1.0], 0.0),
            Err(Error::DegeneratePrice(_))
        ));
        assert!(PortfolioEnsemble::new(vec![-1.0, 2.0], vec![1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn constants_examples() {
        let mut p = params(0.5, 0.0);
        let (c1, c2) = market_constants(&p).unwrap();
        assert!((c1 - 0.2).abs() < 1e-15 && (c2 - 1.0).abs() < 1e-15);
        p.lambda = 0.1;
        let (c1, c2) = market_constants(&p).unwrap();
        assert!((c1 - 1.0).abs() < 1e-14 && (c2 - 1.0).abs() < 1e-15);
        p.kappa = 1e-9;
        let (c1, c2) = market_constants(&p).unwrap();
        assert!(c1 < 1e-8 && c2 < 1e-8);
        for k in [1.0, 1.5, -0.1] {
            p.kappa = k;
            assert!(matches!(market_constants(&p), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn rank_one_examples() {
        let out = rank_one_inverse_apply(&[1.0, 1.0], 0.5, &[1.0, 0.0]).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
        let back = rank_one_apply(&[1.0, 1.0], 0.5, &out);
        assert!((back[0] - 1.0).abs() < 1e-12 && back[1].abs() < 1e-12);
        assert_eq!(
            rank_one_inverse_apply(&[0.3, 2.0, 1.0], 0.7, &[0.0; 3]).unwrap(),
            vec![0.0; 3]
        );
        assert!(matches!(
            rank_one_inverse_apply(&[0.0, 0.0], 0.5, &[1.0, 1.0]),
            Err(Error::DegeneratePrice(_))
        ));

        let x = draws(1, 5, 0.1, 2.0);
        let b = draws(2, 5, -1.0, 1.0);
        let fast = rank_one_inverse_apply(&x, 0.9, &b).unwrap();
        let dense = dense_solve(sigma(&x, 0.9), b);
        assert!(fast.iter().zip(&dense).all(|(a, c)| (a - c).abs() < 1e-10));
    }

    #[test]
    fn rank_one_matches_dense_solves_on_random_instances() {
        for case in 0..100u64 {
            let n = 1 + (rng::uniform(&mut rng::stream(case, 0, 1)) * 64.0) as usize;
            let kappa = 0.05 + 0.9 * rng::uniform(&mut rng::stream(case, 0, 2));
            let x = draws(case, n, 0.01, 3.0);
            let b = draws(case + 1000, n, -2.0, 2.0);
            let fast = rank_one_inverse_apply(&x, kappa, &b).unwrap();
            let dense = dense_solve(sigma(&x, kappa), b);
            let err = fast
                .iter()
                .zip(&dense)
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(
                err <= 1e-10,
                "case {case}: N = {n}, kappa = {kappa}, err = {err}"
            );
        }
    }

    #[test]
    fn control_free_drift_is_the_dividend_term() {
        let p = params(0.5, 0.0);
        let e = ens(&[1.0, 3.0], &[2.0, 0.5]);
        let (dx, dy) = explicit_market_drift(&e, &[0.0, 0.0], &p).unwrap();
        let (c1, _) = market_constants(&p).unwrap();
        assert!((dx[0] - c1 * 0.5).abs() < 1e-15 && (dx[1] - c1 * 1.5).abs() < 1e-15);
        assert_eq!(dy, vec![0.0, 0.0]);
        let (dx, _) =
            explicit_market_drift(&ens(&[2.0; 3], &[1.0; 3]), &[0.3, 0.3, 0.3], &p).unwrap();
        assert!(dx.iter().all(|v| *v == dx[0]));
    }

    proptest! {
        #[test]
        fn inverse_is_two_sided(seed in 0u64..10_000, n in 1usize..40, kappa in 0.0f64..0.95) {
            let x = draws(seed, n, 0.01, 3.0);
            let v = draws(seed + 1, n, -2.0, 2.0);
            let there = rank_one_inverse_apply(&x, kappa, &rank_one_apply(&x, kappa, &v)).unwrap();
            let back = rank_one_apply(&x, kappa, &rank_one_inverse_apply(&x, kappa, &v).unwrap());
            for k in 0..n {
                prop_assert!((there[k] - v[k]).abs() <= 1e-12 * (1.0 + v[k].abs()));
                prop_assert!((back[k] - v[k]).abs() <= 1e-12 * (1.0 + v[k].abs()));
            }
        }

        #[test]
        fn rank_one_part_squares_to_kappa_times_itself(seed in 0u64..10_000, n in 1usize..40, kappa in 0.0f64..0.95) {
            let x = draws(seed, n, 0.01, 3.0);
            let v = draws(seed + 7, n, -2.0, 2.0);
            // P v = v - (I - P) v, applied matrix-free.
            let p = |w: &[f64]| -> Vec<f64> {
                rank_one_apply(&x, kappa, w).iter().zip(w).map(|(a, b)| b - a).collect()
            };
            let pv = p(&v);
            let ppv = p(&pv);
            for k in 0..n {
                prop_assert!((ppv[k] - kappa * pv[k]).abs() <= 1e-12 * (1.0 + pv[k].abs()));
            }
        }

        #[test]
        fn explicit_and_implicit_drifts_agree(seed in 0u64..10_000, n in 1usize..64, kappa in 0.05f64..0.95) {
            let p = MarketParams { kappa, ..params(0.5, 0.03) };
            let e = ens(&draws(seed, n, 0.01, 3.0), &draws(seed + 1, n, 0.0, 2.0));
            let u = draws(seed + 2, n, -1.0, 1.0);
            let (ex, ey) = explicit_market_drift(&e, &u, &p).unwrap();
            let (ix, iy) = implicit_market_drift(&e, &u, &p).unwrap();
            for k in 0..n {
                prop_assert!((ex[k] - ix[k]).abs() <= 1e-12 * (1.0 + ex[k].abs()));
                prop_assert_eq!(ey[k], iy[k]);
            }
        }

        #[test]
        fn price_is_symmetric_and_homogeneous(seed in 0u64..10_000, n in 1usize..30, scale in 0.1f64..10.0) {
            let x = draws(seed, n, 0.01, 3.0);
            let e = ens(&x, &vec![0.0; n]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let s = price(&e, 0.7);
            prop_assert!((price(&e.permuted(&perm), 0.7) - s).abs() <= 1e-14 * s);
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert!((price(&ens(&scaled, &vec![0.0; n]), 0.7) - scale * s).abs() <= 1e-13 * scale * s);
        }
    }

    #[test]
    fn market_spec_coefficients() {
        let p = params(0.5, 0.05);
        let (c1, c2) = market_constants(&p).unwrap();
        let (spec, exps) = market_model_spec(&p, default_objective(2)).unwrap();
        assert_eq!(exps, ScalingExponents::non_local());
        let scaled = scaled_coefficients(&spec, &exps, 10).unwrap();
        let mut out = [0.0; 2];
        scaled.cross_gain(0.0, &[1.5, 0.3], 1.5, &mut out);
        assert!((out[0] - c2 / 10.0).abs() < 1e-15 && out[1] == 0.0);
        scaled.self_gain(0.0, &[1.5, 0.3], 1.5, &mut out);
        assert_eq!(out, [1.0, -1.0]);
        spec.drift(0.0, &[2.0, 0.4], 1.0, &mut out);
        assert!((out[0] - 2.0 * c1).abs() < 1e-15 && (out[1] - 0.05 * 0.4).abs() < 1e-15);
        assert_eq!(spec.cross_weight(), 0.0);
        assert_eq!(spec.terminal_payoff(&[1.0, 1.0], 1.0), 0.0);
    }

    #[test]
    fn market_limit_has_the_expected_terms() {
        let (flags, terms) = market_limit_terms(&params(0.5, 0.05)).unwrap();
        assert!(terms.hjb_drift_advection && terms.hjb_field_advection && terms.hjb_self_quadratic);
        assert!(!terms.hjb_cross_cost);
        assert!(terms.transport_drift && terms.transport_self && terms.transport_field);
        assert_eq!(flags.chi, [true, true, false]);
        let (_, frictionless) = market_limit_terms(&params(0.0, 0.05)).unwrap();
        assert!(!frictionless.hjb_field_advection && !frictionless.transport_field);
    }

    #[test]
    fn simplified_spec_ignores_the_interest_rate() {
        let a = simplified_market_spec(&params(0.5, 0.0), default_objective(1)).unwrap();
        let b = simplified_market_spec(&params(0.5, 0.3), default_objective(1)).unwrap();
        let (mut fa, mut fb) = ([0.0], [0.0]);
        for x in [0.1, 1.0, 2.5] {
            a.drift(0.1, &[x], 1.2, &mut fa);
            b.drift(0.1, &[x], 1.2, &mut fb);
            assert_eq!(fa, fb);
            a.cross_gain(0.1, &[x], 1.2, &mut fa);
            b.cross_gain(0.1, &[x], 1.2, &mut fb);
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn simplified_velocity_assembles_the_moment_feedback() {
        let p = params(0.5, 0.0);
        let (c1, c2) = market_constants(&p).unwrap();
        let spec = simplified_market_spec(&p, default_objective(1)).unwrap();
        let grid = Grid::uniform(&[0.0], &[2.0], 40).unwrap();
        let g = InitialDensity::gaussian_1d(1.0, 0.2)
            .discretize(&grid)
            .unwrap();
        let centres = grid.axis(0).centers();
        let h: Vec<f64> = centres.iter().map(|x| 0.15 * x * x - 0.2 * x).collect();
        let (flags, _) = market_limit_terms(&p).unwrap();
        let v = velocity_field(&grid, &h, &g, &spec, &flags, 0.0).unwrap();
        let dx = grid.axis(0).dx();
        let rho: f64 = centres.iter().zip(&g).map(|(x, gi)| x * gi).sum::<f64>() * dx;
        let kernel: f64 = centres
            .iter()
            .zip(&g)
            .map(|(x, gi)| gi * (0.3 * x - 0.2))
            .sum::<f64>()
            * dx;
        for (k, x) in centres.iter().enumerate().skip(1).take(centres.len() - 2) {
            let hand = c1 * x / rho + (0.3 * x - 0.2) + c2 * x / rho * kernel;
            assert!((v[k] - hand).abs() < 1e-12, "cell {k}: {} vs {hand}", v[k]);
        }
        assert!((rho - 1.0).abs() < 1e-6);
    }

    fn opts(dt: f64) -> MarketOptions {
        MarketOptions {
            dt,
            snapshot_every: 0,
        }
    }

    #[test]
    fn frozen_market_keeps_every_book() {
        let e = ens(&[1.0, 2.0, 0.5], &[0.3, 0.0, 1.0]);
        let traj =
            simulate_market(&params(0.0, 0.0), &e, &MarketPolicy::Idle, &opts(0.01)).unwrap();
        assert_eq!(traj.final_ensemble().risky(), e.risky());
        assert_eq!(traj.final_ensemble().riskless(), e.riskless());
        assert!(traj.prices.iter().all(|s| *s == traj.prices[0]));
    }

    #[test]
    fn bonds_grow_exponentially() {
        let e = ens(&[1.0, 2.0], &[1.0, 0.5]);
        let p = params(0.0, 0.1);
        let err = |dt: f64| {
            let traj = simulate_market(&p, &e, &MarketPolicy::Idle, &opts(dt)).unwrap();
            traj.final_ensemble()
                .riskless()
                .iter()
                .zip(e.riskless())
                .map(|(y, y0)| (y - y0 * 0.1f64.exp()).abs())
                .fold(0.0, f64::max)
        };
        let (a, b) = (err(0.01), err(0.005));
        assert!(a < 1e-3);
        assert!((a / b - 2.0).abs() < 0.05);
    }

    #[test]
    fn wealth_is_conserved_without_friction_or_interest() {
        let e = ens(&[1.0, 2.0, 0.5, 3.0], &[2.0, 1.0, 1.5, 0.2]);
        let p = params(0.0, 0.0);
        for u in [0.15, -0.1] {
            let traj = simulate_market(
                &p,
                &e,
                &MarketPolicy::Constant(u),
                &MarketOptions {
                    dt: 0.01,
                    snapshot_every: 1,
                },
            )
            .unwrap();
            assert_eq!(traj.clamp_counts.last(), Some(&0));
            for pair in traj.snapshots.windows(2) {
                let (w0, w1) = (pair[0].wealth(), pair[1].wealth());
                assert!(w0.iter().zip(&w1).all(|(a, b)| (a - b).abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn symmetric_books_stay_symmetric() {
        let e = ens(&[1.2; 6], &[0.7; 6]);
        let traj = simulate_market(
            &params(0.6, 0.04),
            &e,
            &MarketPolicy::Constant(0.2),
            &MarketOptions {
                dt: 0.01,
                snapshot_every: 5,
            },
        )
        .unwrap();
        for s in &traj.snapshots {
            assert!(s.risky().iter().all(|v| *v == s.risky()[0]));
            assert!(s.riskless().iter().all(|v| *v == s.riskless()[0]));
        }
    }

    #[test]
    fn negative_books_are_projected_and_counted() {
        let e = ens(&[1.0, 1.0], &[0.05, 0.05]);
        let traj = simulate_market(
            &params(0.3, 0.0),
            &e,
            &MarketPolicy::Constant(0.5),
            &opts(0.05),
        )
        .unwrap();
        assert!(traj.final_ensemble().riskless().iter().all(|y| *y == 0.0));
        assert!(*traj.clamp_counts.last().unwrap() > 0);
        let csv = traj.series_csv();
        let lines: Vec<&str> = csv.as_str().lines().collect();
        assert_eq!(lines[0], "t,S,mean_x,mean_y,clamp_count");
        assert_eq!(lines.len(), traj.times.len() + 1);
        assert!(lines
            .last()
            .unwrap()
            .ends_with(&format!(",{}", traj.clamp_counts.last().unwrap())));
        assert_eq!(
            traj.snapshots_csv().as_str().lines().count(),
            1 + 2 * traj.snapshots.len()
        );
    }
}
