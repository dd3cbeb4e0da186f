//! Experiment configuration read from TOML or JSON.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finmarket::MarketParams;
use crate::grid::Grid;
use crate::mfg_pde::{InitialDensity, SolverConfig};
use crate::micro::TableOptions;
use crate::model::functions::{scalar, vector};
use crate::model::{
    ComponentField, DomainBox, ModelSpec, MomentPolynomial, MomentTerm, ScalarForm,
    ScalingExponents,
};

/// Every section is optional at parse time; each command asks for the ones it needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functions: Option<FunctionsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingExponents>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialDensity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionsSection {
    pub dimension: usize,
    pub horizon: f64,
    /// One scalar form per component; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<ComponentField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_gain: Option<ComponentField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_gain: Option<ComponentField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_cost: Option<ScalarForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_payoff: Option<ScalarForm>,
    /// Defaults to `Phi(x) = x_1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment: Option<Vec<MomentTerm>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    #[serde(rename = "self")]
    pub self_weight: f64,
    #[serde(rename = "cross", default)]
    pub cross_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Cells per axis.
    pub cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Feedback from the mean-field value `h`.
    Mfg,
    /// Feedback from the reduced table `W(t, x, rho)` built for each `N`.
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSection {
    pub x_nodes: usize,
    pub rho_nodes: usize,
    /// Backward step; chosen from the Courant bound when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtau: Option<f64>,
    pub gradient_cap: f64,
    pub margin: f64,
    pub courant: f64,
}

impl Default for TableSection {
    fn default() -> Self {
        let o = TableOptions::default();
        Self {
            x_nodes: 401,
            rho_nodes: 5,
            dtau: None,
            gradient_cap: o.gradient_cap,
            margin: o.margin,
            courant: o.courant,
        }
    }
}

impl TableSection {
    pub fn options(&self) -> TableOptions {
        TableOptions {
            gradient_cap: self.gradient_cap,
            margin: self.margin,
            courant: self.courant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub agents: Vec<usize>,
    pub seed: u64,
    /// Independent samples of the initial ensemble per `N`.
    pub replicas: usize,
    /// Particle time step; half the value step when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub source: ValueSource,
    pub table: TableSection,
    /// Highest total order in the moment comparison.
    pub moment_order: u32,
    /// Keep every k-th particle snapshot in trajectory files (0: ends only).
    pub snapshot_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            agents: vec![64, 256, 1024],
            seed: 0,
            replicas: 1,
            dt: None,
            source: ValueSource::Mfg,
            table: TableSection::default(),
            moment_order: 4,
            snapshot_every: 0,
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketPolicyConfig {
    Idle,
    Constant {
        value: f64,
    },
    /// Feedback from the risky-book mean-field limit.
    Mfg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub kappa: f64,
    pub lambda: f64,
    #[serde(default)]
    pub r: f64,
    pub dividend: f64,
    #[serde(default = "one")]
    pub alpha_hat: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_market_agents")]
    pub agents: usize,
    #[serde(default = "default_market_dt")]
    pub dt: f64,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_policy")]
    pub policy: MarketPolicyConfig,
    /// Objective on `(x, rho)`; `(x - rho)^2 / 2` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ScalarForm>,
    #[serde(default = "default_holding")]
    pub initial_risky: InitialDensity,
    #[serde(default = "default_holding")]
    pub initial_riskless: InitialDensity,
    /// Holdings are sampled and the limit is solved on `[0, holding_max]`.
    #[serde(default = "default_holding_max")]
    pub holding_max: f64,
    #[serde(default = "default_market_cells")]
    pub cells: usize,
    /// Also solve the risky-book limit and compare.
    #[serde(default)]
    pub limit: bool,
}

fn one() -> f64 {
    1.0
}
fn default_market_agents() -> usize {
    200
}
fn default_market_dt() -> f64 {
    0.01
}
fn default_policy() -> MarketPolicyConfig {
    MarketPolicyConfig::Idle
}
fn default_holding() -> InitialDensity {
    InitialDensity::gaussian_1d(1.0, 0.2)
}
fn default_holding_max() -> f64 {
    3.0
}
fn default_market_cells() -> usize {
    120
}

impl MarketSection {
    pub fn params(&self) -> MarketParams {
        MarketParams {
            kappa: self.kappa,
            lambda: self.lambda,
            r: self.r,
            dividend: self.dividend,
            alpha_hat: self.alpha_hat,
            horizon: self.horizon,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        if !(self.holding_max > 0.0) {
            return Err(Error::config("market.holding_max", "must be positive"));
        }
        Grid::uniform(&[0.0], &[self.holding_max], self.cells)
            .map_err(|e| Error::config("market.cells", e.to_string()))
    }
}

fn missing(section: &str) -> Error {
    Error::config(section, "required section is missing")
}

fn parse_with_paths<T: DeserializeOwned>(text: &str, json: bool) -> Result<T> {
    let located = |path: String, message: String| {
        Error::config(if path == "." { String::new() } else { path }, message)
    };
    if json {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| located(e.path().to_string(), e.inner().to_string()))
    } else {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("", e.to_string()))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| located(e.path().to_string(), e.inner().to_string()))
    }
}

impl ExperimentConfig {
    /// TOML unless the document starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        parse_with_paths(text, text.trim_start().starts_with('{'))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        parse_with_paths(text, false)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        parse_with_paths(text, true)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    /// Copy with the missing optional sections filled with their defaults, as recorded in manifests.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.functions.is_some() {
            out.weights.get_or_insert(WeightsSection {
                self_weight: 1.0,
                cross_weight: 0.0,
            });
            out.solver.get_or_insert_with(SolverConfig::default);
        }
        out
    }

    pub fn scaling(&self) -> Result<ScalingExponents> {
        self.scaling.ok_or_else(|| missing("scaling"))
    }

    pub fn run_section(&self) -> Result<&RunSection> {
        self.run.as_ref().ok_or_else(|| missing("run"))
    }

    pub fn market_section(&self) -> Result<&MarketSection> {
        self.market.as_ref().ok_or_else(|| missing("market"))
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let cfg = self.solver.clone().unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn initial_density(&self) -> Result<&InitialDensity> {
        self.initial.as_ref().ok_or_else(|| missing("initial"))
    }

    pub fn domain_box(&self) -> Result<&DomainBox> {
        self.domain.as_ref().ok_or_else(|| missing("domain"))
    }

    /// Uniform grid over the domain with `grid.cells` cells per axis.
    pub fn grid(&self) -> Result<Grid> {
        let domain = self.domain_box()?;
        let cells = self.grid.ok_or_else(|| missing("grid"))?.cells;
        let spec_dim = self.functions.as_ref().map(|f| f.dimension);
        if let Some(d) = spec_dim {
            if d != domain.dim() {
                return Err(Error::config(
                    "domain",
                    format!("has {} axes, functions.dimension is {d}", domain.dim()),
                ));
            }
        }
        Grid::uniform(&domain.lower, &domain.upper, cells)
            .map_err(|e| Error::config("grid.cells", e.to_string()))
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let f = self
            .functions
            .as_ref()
            .ok_or_else(|| missing("functions"))?;
        let d = f.dimension;
        if !(1..=2).contains(&d) {
            return Err(Error::config(
                "functions.dimension",
                format!("must be 1 or 2, got {d}"),
            ));
        }
        let field =
            |name: &str, value: &Option<ComponentField>| -> Result<Option<ComponentField>> {
                if let Some(v) = value {
                    v.validate(d, &format!("functions.{name}"))?;
                }
                Ok(value.clone())
            };
        let mut b = ModelSpec::builder(d, f.horizon);
        if let Some(v) = field("drift", &f.drift)? {
            b = b.drift(vector(v));
        }
        if let Some(v) = field("self_gain", &f.self_gain)? {
            b = b.self_gain(vector(v));
        }
        if let Some(v) = field("cross_gain", &f.cross_gain)? {
            b = b.cross_gain(vector(v));
        }
        if let Some(v) = &f.running_cost {
            v.validate(d, "functions.running_cost")?;
            b = b.running_cost(scalar(v.clone()));
        }
        if let Some(v) = &f.terminal_payoff {
            v.validate(d, "functions.terminal_payoff")?;
            b = b.terminal_payoff(scalar(v.clone()));
        }
        if let Some(terms) = &f.moment {
            b = b.moment(MomentPolynomial::new(d, terms.clone())?);
        }
        let w = self.weights.unwrap_or(WeightsSection {
            self_weight: 1.0,
            cross_weight: 0.0,
        });
        b.weights(w.self_weight, w.cross_weight).build()
    }
}
