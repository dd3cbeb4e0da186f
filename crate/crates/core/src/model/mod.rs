//! Symmetric game data, scaling exponents and the regime classification.
//!
//! A [`ModelSpec`] holds the per-agent functions `f`, `m_hat`, `m_bar`, `l`,
//! `p`, the moment polynomial `Phi` and the two control-cost weights. The
//! scaling exponents fix how the gains and weights shrink with the number of
//! agents; the signs of the three `eta` exponents decide which coupling terms
//! survive in the limit system.

pub mod functions;
pub mod moment;

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use functions::{ComponentField, ScalarField, ScalarForm, VectorField};
pub use moment::{MomentPolynomial, MomentTerm};

/// Axis-aligned box the experiment lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::config(
                "domain",
                "lower and upper must be non-empty and of equal length",
            ));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::config(
                "domain",
                "need finite lower < upper on every axis",
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64], margin: f64) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *v >= a - margin && *v <= b + margin)
    }
}

/// The symmetric game: immutable once built, cheap to clone.
#[derive(Clone)]
pub struct ModelSpec {
    dimension: usize,
    horizon: f64,
    drift: Arc<dyn VectorField>,
    self_gain: Arc<dyn VectorField>,
    cross_gain: Arc<dyn VectorField>,
    running_cost: Arc<dyn ScalarField>,
    terminal_payoff: Arc<dyn ScalarField>,
    moment: MomentPolynomial,
    self_weight: f64,
    cross_weight: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dimension", &self.dimension)
            .field("horizon", &self.horizon)
            .field("moment", &self.moment)
            .field("self_weight", &self.self_weight)
            .field("cross_weight", &self.cross_weight)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    /// Starts a builder with the null game: every function zero, `Phi = x_1`,
    /// `alpha_hat = 1`, `alpha_bar = 0`.
    pub fn builder(dimension: usize, horizon: f64) -> ModelSpecBuilder {
        let zero_vec = functions::vector(ComponentField::constant(&vec![0.0; dimension.max(1)]));
        let zero = functions::scalar(ScalarForm::constant(0.0));
        ModelSpecBuilder {
            spec: ModelSpec {
                dimension,
                horizon,
                drift: zero_vec.clone(),
                self_gain: zero_vec.clone(),
                cross_gain: zero_vec,
                running_cost: zero.clone(),
                terminal_payoff: zero,
                moment: MomentPolynomial::coordinate(dimension.max(1), 0),
                self_weight: 1.0,
                cross_weight: 0.0,
            },
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn moment(&self) -> &MomentPolynomial {
        &self.moment
    }

    pub fn self_weight(&self) -> f64 {
        self.self_weight
    }

    pub fn cross_weight(&self) -> f64 {
        self.cross_weight
    }

    pub fn drift(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        self.drift.eval(t, x, rho, out)
    }

    pub fn self_gain(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        self.self_gain.eval(t, x, rho, out)
    }

    pub fn cross_gain(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        self.cross_gain.eval(t, x, rho, out)
    }

    pub fn running_cost(&self, t: f64, x: &[f64], rho: f64) -> f64 {
        self.running_cost.eval(t, x, rho)
    }

    pub fn terminal_payoff(&self, x: &[f64], rho: f64) -> f64 {
        self.terminal_payoff.eval(self.horizon, x, rho)
    }

    pub fn terminal_payoff_field(&self) -> &Arc<dyn ScalarField> {
        &self.terminal_payoff
    }

    /// Copy with `m_hat / n^theta_hat`, `m_bar / n^theta_bar`, `alpha_hat / n^a_hat`
    /// and `alpha_bar / n^a_bar`. Total for `n >= 1`; `n = 1` is the identity.
    pub fn rescaled(&self, exps: &ScalingExponents, n: usize) -> Result<ModelSpec> {
        if n == 0 {
            return Err(Error::Domain("agent count must be positive".into()));
        }
        let nf = n as f64;
        let mut out = self.clone();
        out.self_gain = Arc::new(functions::ScaledVector {
            inner: self.self_gain.clone(),
            factor: nf.powf(-exps.theta_hat),
        });
        out.cross_gain = Arc::new(functions::ScaledVector {
            inner: self.cross_gain.clone(),
            factor: nf.powf(-exps.theta_bar),
        });
        out.self_weight = self.self_weight / nf.powf(exps.a_hat);
        out.cross_weight = self.cross_weight / nf.powf(exps.a_bar);
        Ok(out)
    }

    /// Samples random pairs in `domain x [rho_lo, rho_hi] x [0, T]` and checks
    /// `|F(x, rho) - F(x', rho')| <= L (|x - x'| + |rho - rho'|)` for every model function.
    pub fn check_lipschitz(
        &self,
        domain: &DomainBox,
        rho_range: (f64, f64),
        lipschitz: f64,
        samples: usize,
        seed: u64,
    ) -> Result<()> {
        let d = self.dimension;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha20Rng| -> (f64, Vec<f64>, f64) {
            let x = (0..d)
                .map(|k| {
                    domain.lower[k] + (domain.upper[k] - domain.lower[k]) * rng.random::<f64>()
                })
                .collect();
            let r = rho_range.0 + (rho_range.1 - rho_range.0) * rng.random::<f64>();
            (self.horizon * rng.random::<f64>(), x, r)
        };
        let vectors: [(&str, &Arc<dyn VectorField>); 3] = [
            ("drift", &self.drift),
            ("self_gain", &self.self_gain),
            ("cross_gain", &self.cross_gain),
        ];
        let scalars: [(&str, &Arc<dyn ScalarField>); 2] = [
            ("running_cost", &self.running_cost),
            ("terminal_payoff", &self.terminal_payoff),
        ];
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..samples {
            let (t, x, r) = draw(&mut rng);
            let (_, y, s) = draw(&mut rng);
            let dist = x
                .iter()
                .zip(&y)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
                + (r - s).abs();
            let bound = lipschitz * dist * (1.0 + 1e-12) + 1e-14;
            for (name, v) in vectors {
                v.eval(t, &x, r, &mut a);
                v.eval(t, &y, s, &mut b);
                let gap = a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt();
                check_bound(name, gap, bound)?;
            }
            for (name, f) in scalars {
                check_bound(name, (f.eval(t, &x, r) - f.eval(t, &y, s)).abs(), bound)?;
            }
        }
        Ok(())
    }
}

fn check_bound(name: &str, gap: f64, bound: f64) -> Result<()> {
    if !gap.is_finite() {
        return Err(Error::config(
            format!("functions.{name}"),
            "evaluates to a non-finite value on the domain",
        ));
    }
    if gap > bound {
        return Err(Error::config(
            "domain.lipschitz",
            format!("{name} violates the declared Lipschitz constant ({gap:.3e} > {bound:.3e})"),
        ));
    }
    Ok(())
}

pub struct ModelSpecBuilder {
    spec: ModelSpec,
}

impl ModelSpecBuilder {
    pub fn drift(mut self, f: Arc<dyn VectorField>) -> Self {
        self.spec.drift = f;
        self
    }

    pub fn self_gain(mut self, f: Arc<dyn VectorField>) -> Self {
        self.spec.self_gain = f;
        self
    }

    pub fn cross_gain(mut self, f: Arc<dyn VectorField>) -> Self {
        self.spec.cross_gain = f;
        self
    }

    pub fn running_cost(mut self, f: Arc<dyn ScalarField>) -> Self {
        self.spec.running_cost = f;
        self
    }

    pub fn terminal_payoff(mut self, f: Arc<dyn ScalarField>) -> Self {
        self.spec.terminal_payoff = f;
        self
    }

    pub fn moment(mut self, phi: MomentPolynomial) -> Self {
        self.spec.moment = phi;
        self
    }

    pub fn weights(mut self, self_weight: f64, cross_weight: f64) -> Self {
        self.spec.self_weight = self_weight;
        self.spec.cross_weight = cross_weight;
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let s = self.spec;
        if s.dimension == 0 {
            return Err(Error::config("domain", "dimension must be positive"));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(Error::config(
                "domain.horizon",
                "horizon must be a positive number",
            ));
        }
        if !(s.self_weight > 0.0 && s.self_weight.is_finite()) {
            return Err(Error::config("weights.self_weight", "must be > 0"));
        }
        if !(s.cross_weight >= 0.0 && s.cross_weight.is_finite()) {
            return Err(Error::config("weights.cross_weight", "must be >= 0"));
        }
        for (name, v) in [
            ("drift", &s.drift),
            ("self_gain", &s.self_gain),
            ("cross_gain", &s.cross_gain),
        ] {
            if v.dim() != s.dimension {
                return Err(Error::config(
                    format!("functions.{name}"),
                    format!("has {} components, dimension is {}", v.dim(), s.dimension),
                ));
            }
        }
        if s.moment.dim() != s.dimension {
            return Err(Error::config(
                "functions.moment",
                format!(
                    "polynomial in {} variables, dimension is {}",
                    s.moment.dim(),
                    s.dimension
                ),
            ));
        }
        Ok(s)
    }
}

/// `(a_hat, theta_hat, a_bar, theta_bar)` with `a_bar, theta_bar >= 1` and the hats `>= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExponents")]
pub struct ScalingExponents {
    pub a_hat: f64,
    pub theta_hat: f64,
    pub a_bar: f64,
    pub theta_bar: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExponents {
    a_hat: f64,
    theta_hat: f64,
    a_bar: f64,
    theta_bar: f64,
}

impl TryFrom<RawExponents> for ScalingExponents {
    type Error = Error;

    fn try_from(r: RawExponents) -> Result<Self> {
        ScalingExponents::new(r.a_hat, r.theta_hat, r.a_bar, r.theta_bar)
    }
}

impl ScalingExponents {
    pub fn new(a_hat: f64, theta_hat: f64, a_bar: f64, theta_bar: f64) -> Result<Self> {
        let check = |name: &str, v: f64, min: f64| {
            if v.is_finite() && v >= min {
                Ok(())
            } else {
                Err(Error::config(
                    format!("scaling.{name}"),
                    format!("must be >= {min}, got {v}"),
                ))
            }
        };
        check("a_hat", a_hat, 0.0)?;
        check("theta_hat", theta_hat, 0.0)?;
        check("a_bar", a_bar, 1.0)?;
        check("theta_bar", theta_bar, 1.0)?;
        Ok(Self {
            a_hat,
            theta_hat,
            a_bar,
            theta_bar,
        })
    }

    /// The exponents under which every inequality is tight.
    pub fn non_local() -> Self {
        Self {
            a_hat: 0.0,
            theta_hat: 0.0,
            a_bar: 1.0,
            theta_bar: 1.0,
        }
    }
}

/// `(a_hat - 2 theta_hat, a_hat + 1 - theta_hat - theta_bar, 2 a_hat + 1 - 2 theta_hat - a_bar)`.
pub fn eta_values(exps: &ScalingExponents) -> (f64, f64, f64) {
    let ScalingExponents {
        a_hat,
        theta_hat,
        a_bar,
        theta_bar,
    } = *exps;
    (
        a_hat - 2.0 * theta_hat,
        a_hat + 1.0 - theta_hat - theta_bar,
        2.0 * a_hat + 1.0 - 2.0 * theta_hat - a_bar,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "vanishing")]
    Vanishing,
    #[serde(rename = "classical")]
    Classical,
    #[serde(rename = "non-local")]
    NonLocal,
    /// Reserved name for valid sign patterns outside the three named regimes;
    /// with the current naming rules every valid pattern is named.
    #[serde(rename = "mixed")]
    Mixed,
    #[serde(rename = "invalid")]
    Invalid,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Vanishing => "vanishing",
            Regime::Classical => "classical",
            Regime::NonLocal => "non-local",
            Regime::Mixed => "mixed",
            Regime::Invalid => "invalid",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sign pattern of the `eta` exponents; `chi[k]` switches the k-th coupling term on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeFlags {
    pub eta: [f64; 3],
    pub chi: [bool; 3],
    pub valid: bool,
    pub regime: Regime,
}

impl RegimeFlags {
    /// Self-interaction terms (`chi_1`).
    pub fn self_coupling(&self) -> bool {
        self.chi[0]
    }

    /// Non-local advection by the field of controls (`chi_2`).
    pub fn field_coupling(&self) -> bool {
        self.chi[1]
    }

    /// Cost of the other agents' controls (`chi_3`).
    pub fn cross_cost(&self) -> bool {
        self.chi[2]
    }

    /// All coupling terms off.
    pub fn decoupled() -> Self {
        classify_regime(&ScalingExponents::new(0.0, 1.0, 1.0, 1.0).expect("valid exponents"))
    }
}

pub fn classify_regime(exps: &ScalingExponents) -> RegimeFlags {
    let (e1, e2, e3) = eta_values(exps);
    let eta = [e1, e2, e3];
    let chi = [e1 == 0.0, e2 == 0.0, e3 == 0.0];
    let valid = eta.iter().all(|&e| e <= 0.0);
    let regime = if !valid {
        Regime::Invalid
    } else if eta.iter().all(|&e| e < 0.0) {
        Regime::Vanishing
    } else if e2 == 0.0 || e3 == 0.0 {
        Regime::NonLocal
    } else if e1 == 0.0 {
        Regime::Classical
    } else {
        Regime::Mixed
    };
    RegimeFlags {
        eta,
        chi,
        valid,
        regime,
    }
}

/// Rescales the gains and weights of `spec` for `n >= 2` agents.
pub fn scaled_coefficients(
    spec: &ModelSpec,
    exps: &ScalingExponents,
    n: usize,
) -> Result<ModelSpec> {
    if n < 2 {
        return Err(Error::Domain(format!(
            "scaled coefficients need N >= 2, got {n}"
        )));
    }
    spec.rescaled(exps, n)
}
