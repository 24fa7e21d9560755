//! Fixed-step classical Runge-Kutta integration on a [`TimeGrid`] and
//! cubic Hermite lookup of solved tables.

use crate::error::{Error, Result};
use crate::model::TimeGrid;

/// Values beyond this magnitude are treated as finite-time blow-up.
pub const BLOW_UP_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

fn check<const D: usize>(system: &'static str, t: f64, y: &[f64; D]) -> Result<()> {
    for &v in y {
        if !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD {
            return Err(Error::BlowUp {
                system,
                t,
                value: v.abs(),
            });
        }
    }
    Ok(())
}

#[inline]
fn axpy<const D: usize>(y: &[f64; D], h: f64, k: &[f64; D]) -> [f64; D] {
    std::array::from_fn(|i| y[i] + h * k[i])
}

/// Integrates `dy/dt = rhs(t, y)` over the grid starting from `start`
/// (at `t = 0` going forward, at `t = T` going backward). Returns the
/// solution at every node in increasing time order. Every stage value is
/// checked against [`BLOW_UP_THRESHOLD`].
pub fn rk4<const D: usize>(
    grid: &TimeGrid,
    start: [f64; D],
    direction: Direction,
    system: &'static str,
    rhs: impl Fn(f64, &[f64; D]) -> [f64; D],
) -> Result<Vec<[f64; D]>> {
    let n = grid.n_steps();
    let mut out = vec![[0.0; D]; n + 1];
    let (first, h) = match direction {
        Direction::Forward => (0, grid.dt()),
        Direction::Backward => (n, -grid.dt()),
    };
    out[first] = start;
    check(system, grid.t(first), &start)?;
    let mut y = start;
    for step in 0..n {
        let (from, to) = match direction {
            Direction::Forward => (step, step + 1),
            Direction::Backward => (n - step, n - step - 1),
        };
        let t = grid.t(from);
        let tm = t + 0.5 * h;
        let k1 = rhs(t, &y);
        let y2 = axpy(&y, 0.5 * h, &k1);
        check(system, tm, &y2)?;
        let k2 = rhs(tm, &y2);
        let y3 = axpy(&y, 0.5 * h, &k2);
        check(system, tm, &y3)?;
        let k3 = rhs(tm, &y3);
        let y4 = axpy(&y, h, &k3);
        check(system, grid.t(to), &y4)?;
        let k4 = rhs(grid.t(to), &y4);
        y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        check(system, grid.t(to), &y)?;
        out[to] = y;
    }
    Ok(out)
}

/// Node values plus exact node derivatives, interpolated by piecewise cubic
/// Hermite polynomials (fourth-order accurate between nodes).
#[derive(Debug, Clone)]
pub struct HermiteTable<const D: usize> {
    grid: TimeGrid,
    values: Vec<[f64; D]>,
    slopes: Vec<[f64; D]>,
}

impl<const D: usize> HermiteTable<D> {
    pub fn new(grid: TimeGrid, values: Vec<[f64; D]>, slope: impl Fn(f64, &[f64; D]) -> [f64; D]) -> Self {
        let slopes = values.iter().enumerate().map(|(k, y)| slope(grid.t(k), y)).collect();
        HermiteTable { grid, values, slopes }
    }

    pub fn at(&self, t: f64) -> [f64; D] {
        let dt = self.grid.dt();
        let n = self.grid.n_steps();
        let s = (t / dt).clamp(0.0, n as f64);
        let k = (s.floor() as usize).min(n - 1);
        let u = s - k as f64;
        if u == 0.0 {
            return self.values[k];
        }
        let (y0, y1) = (&self.values[k], &self.values[k + 1]);
        let (d0, d1) = (&self.slopes[k], &self.slopes[k + 1]);
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        std::array::from_fn(|i| h00 * y0[i] + h10 * dt * d0[i] + h01 * y1[i] + h11 * dt * d1[i])
    }
}

/// Linear interpolation of a node table.
pub fn lerp_nodes(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    let n = grid.n_steps();
    let s = (t / grid.dt()).clamp(0.0, n as f64);
    let k = (s.floor() as usize).min(n - 1);
    let w = s - k as f64;
    values[k] * (1.0 - w) + values[k + 1] * w
}

/// Cubic Lagrange interpolation of a node table through the four nearest
/// nodes (third-order accurate). Falls back to [`lerp_nodes`] on grids with
/// fewer than three steps.
pub fn cubic_nodes(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    let n = grid.n_steps();
    if n < 3 {
        return lerp_nodes(grid, values, t);
    }
    let s = (t / grid.dt()).clamp(0.0, n as f64);
    let k = (s.floor() as usize).min(n - 1);
    let j0 = k.saturating_sub(1).min(n - 3);
    let mut out = 0.0;
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if j != i {
                w *= (s - (j0 + j) as f64) / (i as f64 - j as f64);
            }
        }
        out += w * values[j0 + i];
    }
    out
}
