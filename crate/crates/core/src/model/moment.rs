use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One monomial `coeff * prod_k x_k^index_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentTerm {
    pub index: Vec<u32>,
    pub coeff: f64,
}

/// Polynomial `Phi` whose empirical average is the moment the model couples through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentPolynomial {
    terms: Vec<MomentTerm>,
}

impl MomentPolynomial {
    pub fn new(dim: usize, terms: Vec<MomentTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::config("functions.moment", "needs at least one term"));
        }
        for (k, t) in terms.iter().enumerate() {
            if t.index.len() != dim {
                return Err(Error::config(
                    format!("functions.moment[{k}].index"),
                    format!(
                        "multi-index has {} entries, dimension is {dim}",
                        t.index.len()
                    ),
                ));
            }
            if !t.coeff.is_finite() {
                return Err(Error::config(
                    format!("functions.moment[{k}].coeff"),
                    "must be finite",
                ));
            }
        }
        Ok(Self { terms })
    }

    /// `Phi(x) = x_axis` in dimension `dim`.
    pub fn coordinate(dim: usize, axis: usize) -> Self {
        let mut index = vec![0; dim];
        index[axis] = 1;
        Self {
            terms: vec![MomentTerm { index, coeff: 1.0 }],
        }
    }

    /// `Phi(x) = x^power` in one dimension.
    pub fn power(power: u32) -> Self {
        Self {
            terms: vec![MomentTerm {
                index: vec![power],
                coeff: 1.0,
            }],
        }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            terms: vec![MomentTerm {
                index: vec![0; dim],
                coeff: value,
            }],
        }
    }

    pub fn terms(&self) -> &[MomentTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.terms[0].index.len()
    }

    /// Total degree `n = max |j|`.
    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.index.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.coeff
                    * t.index
                        .iter()
                        .zip(x)
                        .map(|(&j, &xk)| xk.powi(j as i32))
                        .product::<f64>()
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            for (k, o) in out.iter_mut().enumerate() {
                let jk = t.index[k];
                if jk == 0 {
                    continue;
                }
                let mut v = t.coeff * jk as f64 * x[k].powi(jk as i32 - 1);
                for (m, (&jm, &xm)) in t.index.iter().zip(x).enumerate() {
                    if m != k {
                        v *= xm.powi(jm as i32);
                    }
                }
                *o += v;
            }
        }
    }

    /// Range of `Phi` over the corners and a sample lattice of a box.
    pub fn range_on_box(&self, lower: &[f64], upper: &[f64]) -> (f64, f64) {
        const SAMPLES: usize = 33;
        let d = lower.len();
        let total = SAMPLES.pow(d as u32);
        let mut x = vec![0.0; d];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for flat in 0..total {
            let mut r = flat;
            for k in 0..d {
                let i = r % SAMPLES;
                r /= SAMPLES;
                x[k] = lower[k] + (upper[k] - lower[k]) * i as f64 / (SAMPLES - 1) as f64;
            }
            let v = self.eval(&x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}
