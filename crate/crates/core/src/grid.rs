//! Cell-centred tensor grids on boxes in one or two dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CELLS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
}

impl Grid1D {
    pub fn new(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        if cells < MIN_CELLS {
            return Err(Error::config(
                "grid.cells",
                format!("need at least {MIN_CELLS} cells per axis, got {cells}"),
            ));
        }
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::config("domain", "need finite lower < upper"));
        }
        Ok(Self {
            lower,
            upper,
            cells,
        })
    }

    pub fn dx(&self) -> f64 {
        (self.upper - self.lower) / self.cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells).map(|i| self.center(i)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    pub fn locate(&self, x: f64) -> usize {
        let i = ((x - self.lower) / self.dx()).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(self.cells - 1)
        }
    }
}

/// Tensor product of one or two axes; axis 0 varies fastest in flat indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Grid1D>,
}

impl Grid {
    pub fn new(axes: Vec<Grid1D>) -> Result<Self> {
        match axes.len() {
            1 | 2 => Ok(Self { axes }),
            d => Err(Error::UnsupportedDimension(d)),
        }
    }

    pub fn uniform(lower: &[f64], upper: &[f64], cells: usize) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::config("domain", "lower and upper differ in length"));
        }
        let axes = lower
            .iter()
            .zip(upper)
            .map(|(&a, &b)| Grid1D::new(a, b, cells))
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Grid1D] {
        &self.axes
    }

    pub fn axis(&self, a: usize) -> &Grid1D {
        &self.axes[a]
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|g| g.cells).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Grid1D::dx).product()
    }

    /// Flat-index offset of a unit step along axis `a`.
    pub fn stride(&self, a: usize) -> usize {
        self.axes[..a].iter().map(|g| g.cells).product()
    }

    pub fn multi_index(&self, flat: usize, out: &mut [usize]) {
        let mut r = flat;
        for (o, g) in out.iter_mut().zip(&self.axes) {
            *o = r % g.cells;
            r /= g.cells;
        }
    }

    pub fn center(&self, flat: usize, out: &mut [f64]) {
        let mut r = flat;
        for (o, g) in out.iter_mut().zip(&self.axes) {
            *o = g.center(r % g.cells);
            r /= g.cells;
        }
    }

    pub fn locate(&self, x: &[f64]) -> usize {
        self.axes
            .iter()
            .zip(x)
            .enumerate()
            .map(|(a, (g, &v))| g.locate(v) * self.stride(a))
            .sum()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|g| g.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|g| g.upper).collect()
    }

    /// Multilinear interpolation stencil between cell centres. Points in the
    /// outer half-cell extrapolate linearly from the nearest pair of centres.
    pub fn stencil(&self, x: &[f64]) -> Stencil {
        let mut st = Stencil {
            nodes: [0; 4],
            weights: [0.0; 4],
            len: 1,
        };
        st.weights[0] = 1.0;
        for (a, (g, &v)) in self.axes.iter().zip(x).enumerate() {
            let s = (v - g.lower) / g.dx() - 0.5;
            let i0 = (s.floor().max(0.0) as usize).min(g.cells - 2);
            let w = (s - i0 as f64).clamp(-0.5, 1.5);
            let stride = self.stride(a);
            let n = st.len;
            for k in 0..n {
                st.nodes[n + k] = st.nodes[k] + (i0 + 1) * stride;
                st.weights[n + k] = st.weights[k] * w;
                st.nodes[k] += i0 * stride;
                st.weights[k] *= 1.0 - w;
            }
            st.len = 2 * n;
        }
        st
    }

    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        self.stencil(x).apply(values)
    }

    /// Midpoint-rule integral of cell values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }
}

/// Nodes and weights of one interpolation query.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
    pub len: usize,
}

impl Stencil {
    pub fn apply(&self, values: &[f64]) -> f64 {
        (0..self.len)
            .map(|k| self.weights[k] * values[self.nodes[k]])
            .sum()
    }
}
