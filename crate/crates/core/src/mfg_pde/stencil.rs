//! Finite-difference stencils on cell-centred grids. Values beyond the last
//! cell come from the quadratic through the three outermost cells.

use crate::grid::Grid;

fn sample(u: &[f64], base: usize, stride: usize, n: usize, j: isize) -> f64 {
    if j >= 0 && (j as usize) < n {
        return u[base + j as usize * stride];
    }
    // Lagrange quadratic through the nearest three cells, evaluated at offset s
    let (u0, u1, u2, s) = if j < 0 {
        (u[base], u[base + stride], u[base + 2 * stride], -j as f64)
    } else {
        let last = base + (n - 1) * stride;
        (
            u[last],
            u[last - stride],
            u[last - 2 * stride],
            (j - n as isize + 1) as f64,
        )
    };
    let s = -s;
    u0 * (s - 1.0) * (s - 2.0) / 2.0 - u1 * s * (s - 2.0) + u2 * s * (s - 1.0) / 2.0
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

fn line(grid: &Grid, k: usize, axis: usize, idx: &mut [usize]) -> (usize, usize, usize, isize) {
    grid.multi_index(k, idx);
    let stride = grid.stride(axis);
    let i = idx[axis];
    (k - i * stride, stride, grid.axis(axis).cells, i as isize)
}

/// Second-order ENO one-sided derivatives `(D^- u, D^+ u)` along `axis` at cell `k`.
pub fn eno2(grid: &Grid, u: &[f64], k: usize, axis: usize) -> (f64, f64) {
    let mut idx = [0usize; 2];
    let (base, stride, n, i) = line(grid, k, axis, &mut idx[..grid.dim()]);
    let dx = grid.axis(axis).dx();
    let v = |o: isize| sample(u, base, stride, n, i + o);
    let (um2, um1, u0, up1, up2) = (v(-2), v(-1), v(0), v(1), v(2));
    let d2m = um2 - 2.0 * um1 + u0;
    let d20 = um1 - 2.0 * u0 + up1;
    let d2p = u0 - 2.0 * up1 + up2;
    let minus = (u0 - um1) / dx + minmod(d2m, d20) / (2.0 * dx);
    let plus = (up1 - u0) / dx - minmod(d20, d2p) / (2.0 * dx);
    (minus, plus)
}

/// Central-difference gradient at cell `k`; second-order one-sided at the walls.
pub fn central_gradient(grid: &Grid, u: &[f64], k: usize, out: &mut [f64]) {
    let mut idx = [0usize; 2];
    for (axis, o) in out.iter_mut().enumerate() {
        let (base, stride, n, i) = line(grid, k, axis, &mut idx[..grid.dim()]);
        let dx = grid.axis(axis).dx();
        *o = (sample(u, base, stride, n, i + 1) - sample(u, base, stride, n, i - 1)) / (2.0 * dx);
    }
}

#[cfg(test)]
/// Central gradient at every cell, flattened as `[cell * d + axis]`.
pub fn gradient_field(grid: &Grid, u: &[f64]) -> Vec<f64> {
    let d = grid.dim();
    let mut out = vec![0.0; grid.len() * d];
    for (k, chunk) in out.chunks_exact_mut(d).enumerate() {
        central_gradient(grid, u, k, chunk);
    }
    out
}
