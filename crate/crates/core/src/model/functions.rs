//! Coefficient functions of the symmetric game.
//!
//! Every model function takes `(t, x, rho)` with `x` the state of one agent and
//! `rho` an empirical moment. Functions come either from the built-in forms
//! below (which is all a config file can reference) or from native closures.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FD_STEP: f64 = 1e-6;

/// Real-valued function of `(t, x, rho)`.
pub trait ScalarField: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], rho: f64) -> f64;

    /// Gradient in `x`. The default is a central finite difference.
    fn grad_x(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        let mut probe = x.to_vec();
        for (k, o) in out.iter_mut().enumerate() {
            let h = FD_STEP * (1.0 + x[k].abs());
            probe[k] = x[k] + h;
            let up = self.eval(t, &probe, rho);
            probe[k] = x[k] - h;
            let down = self.eval(t, &probe, rho);
            probe[k] = x[k];
            *o = (up - down) / (2.0 * h);
        }
    }

    fn d_rho(&self, t: f64, x: &[f64], rho: f64) -> f64 {
        let h = FD_STEP * (1.0 + rho.abs());
        (self.eval(t, x, rho + h) - self.eval(t, x, rho - h)) / (2.0 * h)
    }
}

/// `R^d`-valued function of `(t, x, rho)`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]);
}

/// Built-in scalar forms. `z = (x_1, .., x_d, rho)` in the quadratic form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarForm {
    Constant {
        value: f64,
    },
    /// `constant + x·a + rho·b + t·c`
    Affine {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        x: Vec<f64>,
        #[serde(default)]
        rho: f64,
        #[serde(default)]
        t: f64,
    },
    /// `constant + linear·z + z^T hessian z / 2`
    Quadratic {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        linear: Vec<f64>,
        hessian: Vec<Vec<f64>>,
    },
}

impl ScalarForm {
    pub fn constant(value: f64) -> Self {
        ScalarForm::Constant { value }
    }

    /// `weight * (x_axis - rho)^2 / 2` in dimension `dim`.
    pub fn tracking(dim: usize, axis: usize, weight: f64) -> Self {
        let n = dim + 1;
        let mut hessian = vec![vec![0.0; n]; n];
        hessian[axis][axis] = weight;
        hessian[axis][dim] = -weight;
        hessian[dim][axis] = -weight;
        hessian[dim][dim] = weight;
        ScalarForm::Quadratic {
            constant: 0.0,
            linear: vec![0.0; n],
            hessian,
        }
    }

    /// Checks vector lengths against the state dimension.
    pub fn validate(&self, dim: usize, path: &str) -> Result<()> {
        match self {
            ScalarForm::Constant { value } => finite(*value, path),
            ScalarForm::Affine {
                constant,
                x,
                rho,
                t,
            } => {
                if !x.is_empty() && x.len() != dim {
                    return Err(Error::config(
                        format!("{path}.x"),
                        format!("expected {dim} coefficients, got {}", x.len()),
                    ));
                }
                finite(*constant, path)?;
                finite(*rho, path)?;
                finite(*t, path)
            }
            ScalarForm::Quadratic {
                linear, hessian, ..
            } => {
                let n = dim + 1;
                if !linear.is_empty() && linear.len() != n {
                    return Err(Error::config(
                        format!("{path}.linear"),
                        format!(
                            "expected {n} coefficients over (x, rho), got {}",
                            linear.len()
                        ),
                    ));
                }
                if hessian.len() != n || hessian.iter().any(|r| r.len() != n) {
                    return Err(Error::config(
                        format!("{path}.hessian"),
                        format!("expected a {n}x{n} matrix over (x, rho)"),
                    ));
                }
                for (i, row) in hessian.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if (v - hessian[j][i]).abs() > 1e-12 * (1.0 + v.abs()) {
                            return Err(Error::config(
                                format!("{path}.hessian"),
                                "matrix must be symmetric",
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    fn z_at(&self, i: usize, x: &[f64], rho: f64) -> f64 {
        if i < x.len() {
            x[i]
        } else {
            rho
        }
    }
}

fn finite(v: f64, path: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, "coefficient must be finite"))
    }
}

impl ScalarField for ScalarForm {
    fn eval(&self, t_now: f64, x: &[f64], rho: f64) -> f64 {
        match self {
            ScalarForm::Constant { value } => *value,
            ScalarForm::Affine {
                constant,
                x: a,
                rho: b,
                t,
            } => constant + a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b * rho + t * t_now,
            ScalarForm::Quadratic {
                constant,
                linear,
                hessian,
            } => {
                let n = hessian.len();
                let mut v = *constant;
                for i in 0..n {
                    let zi = self.z_at(i, x, rho);
                    if let Some(b) = linear.get(i) {
                        v += b * zi;
                    }
                    for j in 0..n {
                        v += 0.5 * hessian[i][j] * zi * self.z_at(j, x, rho);
                    }
                }
                v
            }
        }
    }

    fn grad_x(&self, _t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        match self {
            ScalarForm::Constant { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            ScalarForm::Affine { x: a, .. } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = a.get(k).copied().unwrap_or(0.0);
                }
            }
            ScalarForm::Quadratic {
                linear, hessian, ..
            } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let mut g = linear.get(k).copied().unwrap_or(0.0);
                    for (j, h) in hessian[k].iter().enumerate() {
                        g += h * self.z_at(j, x, rho);
                    }
                    *o = g;
                }
            }
        }
    }

    fn d_rho(&self, _t: f64, x: &[f64], rho: f64) -> f64 {
        match self {
            ScalarForm::Constant { .. } => 0.0,
            ScalarForm::Affine { rho: b, .. } => *b,
            ScalarForm::Quadratic {
                linear, hessian, ..
            } => {
                let r = hessian.len() - 1;
                let mut g = linear.get(r).copied().unwrap_or(0.0);
                for (j, h) in hessian[r].iter().enumerate() {
                    g += h * self.z_at(j, x, rho);
                }
                g
            }
        }
    }
}

/// Vector field assembled from one scalar form per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentField(pub Vec<ScalarForm>);

impl ComponentField {
    pub fn constant(values: &[f64]) -> Self {
        ComponentField(values.iter().map(|&v| ScalarForm::constant(v)).collect())
    }

    pub fn validate(&self, dim: usize, path: &str) -> Result<()> {
        if self.0.len() != dim {
            return Err(Error::config(
                path,
                format!("expected {dim} components, got {}", self.0.len()),
            ));
        }
        for (k, c) in self.0.iter().enumerate() {
            c.validate(dim, &format!("{path}[{k}]"))?;
        }
        Ok(())
    }
}

impl VectorField for ComponentField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.0) {
            *o = c.eval(t, x, rho);
        }
    }
}

/// Native scalar callback.
pub struct FnScalar<F>(pub F);

impl<F> ScalarField for FnScalar<F>
where
    F: Fn(f64, &[f64], f64) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64], rho: f64) -> f64 {
        (self.0)(t, x, rho)
    }
}

/// Native vector callback writing `dim` components.
pub struct FnVector<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnVector<F>
where
    F: Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        (self.f)(t, x, rho, out)
    }
}

/// `factor * inner`, used for the `N`-dependent rescaling of gains.
pub struct ScaledVector {
    pub inner: Arc<dyn VectorField>,
    pub factor: f64,
}

impl VectorField for ScaledVector {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval(&self, t: f64, x: &[f64], rho: f64, out: &mut [f64]) {
        self.inner.eval(t, x, rho, out);
        out.iter_mut().for_each(|o| *o *= self.factor);
    }
}

pub fn scalar(form: ScalarForm) -> Arc<dyn ScalarField> {
    Arc::new(form)
}

pub fn vector(field: ComponentField) -> Arc<dyn VectorField> {
    Arc::new(field)
}

pub fn scalar_fn<F>(f: F) -> Arc<dyn ScalarField>
where
    F: Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
{
    Arc::new(FnScalar(f))
}

pub fn vector_fn<F>(dim: usize, f: F) -> Arc<dyn VectorField>
where
    F: Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
{
    Arc::new(FnVector { dim, f })
}
