//! Coupled backward Riccati systems, the forward mean equation and the
//! feedback gains of the equilibrium.
//!
//! With `beta_i = b_i² / m_i`:
//!
//! ```text
//! alpha_i' + 2(a + abar) alpha_i - (beta_1 alpha_1 + beta_2 alpha_2) alpha_i + g_i + gbar_i = 0,  alpha_i(T) = h_i + hbar_i
//! tau_i'   + 2a tau_i - (beta_1 tau_1 + beta_2 tau_2) tau_i + g_i = 0,                          tau_i(T)   = h_i
//! delta_1' + (2a + abar - beta_1 alpha_1 - beta_2 alpha_2 - beta_1 tau_1) delta_1
//!          - beta_2 tau_1 delta_2 + abar tau_1 + abar alpha_1 + gbar_1 = 0,                      delta_i(T) = hbar_i
//! ```
//!
//! (and symmetrically for `delta_2`). The filtered adjoint is
//! `q̂_i = tau_i x̂ + delta_i E[x]`, the mean adjoint is `E[q_i] = alpha_i E[x]`,
//! and the equilibrium controls are `u_i = -(b_i/m_i)(tau_i x̂ + delta_i E[x])`.

use std::io::{self, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CoefficientsAt, LqGameSpec, TimeGrid};
use crate::ode::{lerp_nodes, rk4, Direction, HermiteTable};

/// One table per player.
pub type PlayerPair<T> = [T; 2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiTables {
    pub grid: TimeGrid,
    pub alpha: PlayerPair<Vec<f64>>,
    pub tau: PlayerPair<Vec<f64>>,
    pub delta: PlayerPair<Vec<f64>>,
    pub ex_mean: Vec<f64>,
}

/// Feedback gains: `u_i(t) = k_hat_i(t) x̂(t) + k_mean_i(t) E[x](t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainTables {
    pub grid: TimeGrid,
    pub k_hat: PlayerPair<Vec<f64>>,
    pub k_mean: PlayerPair<Vec<f64>>,
}

impl GainTables {
    #[inline]
    pub fn control(&self, player: usize, node: usize, x_hat: f64, ex_mean: f64) -> f64 {
        self.k_hat[player][node] * x_hat + self.k_mean[player][node] * ex_mean
    }

    /// All gains multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> GainTables {
        let scale = |v: &Vec<f64>| v.iter().map(|g| g * factor).collect::<Vec<_>>();
        GainTables {
            grid: self.grid,
            k_hat: [scale(&self.k_hat[0]), scale(&self.k_hat[1])],
            k_mean: [scale(&self.k_mean[0]), scale(&self.k_mean[1])],
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,k_hat_1,k_mean_1,k_hat_2,k_mean_2")?;
        for k in 0..self.grid.n_nodes() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.grid.t(k),
                self.k_hat[0][k],
                self.k_mean[0][k],
                self.k_hat[1][k],
                self.k_mean[1][k]
            )?;
        }
        Ok(())
    }
}

impl RiccatiTables {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,alpha1,alpha2,tau1,tau2,delta1,delta2,ex_mean")?;
        for k in 0..self.grid.n_nodes() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.grid.t(k),
                self.alpha[0][k],
                self.alpha[1][k],
                self.tau[0][k],
                self.tau[1][k],
                self.delta[0][k],
                self.delta[1][k],
                self.ex_mean[k]
            )?;
        }
        Ok(())
    }

    /// `max_k |alpha_i - tau_i - delta_i|` over both players.
    pub fn identity_gap(&self) -> f64 {
        (0..2)
            .flat_map(|i| (0..self.grid.n_nodes()).map(move |k| (i, k)))
            .map(|(i, k)| (self.alpha[i][k] - self.tau[i][k] - self.delta[i][k]).abs())
            .fold(0.0, f64::max)
    }

    /// Filtered adjoint `tau_i x̂ + delta_i E[x]` at node `k`.
    #[inline]
    pub fn q_hat(&self, player: usize, node: usize, x_hat: f64) -> f64 {
        self.tau[player][node] * x_hat + self.delta[player][node] * self.ex_mean[node]
    }
}

fn alpha_rhs(c: &CoefficientsAt, al: &[f64; 2]) -> [f64; 2] {
    let (b1, b2) = (c.beta(0), c.beta(1));
    let pull = b1 * al[0] + b2 * al[1];
    std::array::from_fn(|i| -(2.0 * (c.a + c.abar) * al[i] - pull * al[i] + c.g[i] + c.gbar[i]))
}

fn tau_rhs(c: &CoefficientsAt, ta: &[f64; 2]) -> [f64; 2] {
    let (b1, b2) = (c.beta(0), c.beta(1));
    let pull = b1 * ta[0] + b2 * ta[1];
    std::array::from_fn(|i| -(2.0 * c.a * ta[i] - pull * ta[i] + c.g[i]))
}

fn delta_rhs(c: &CoefficientsAt, al: &[f64; 2], ta: &[f64; 2], de: &[f64; 2]) -> [f64; 2] {
    let beta = [c.beta(0), c.beta(1)];
    let common = 2.0 * c.a + c.abar - beta[0] * al[0] - beta[1] * al[1];
    std::array::from_fn(|i| {
        let j = 1 - i;
        -((common - beta[i] * ta[i]) * de[i] - beta[j] * ta[i] * de[j] + c.abar * ta[i] + c.abar * al[i] + c.gbar[i])
    })
}

fn pack(pair: &PlayerPair<Vec<f64>>) -> Vec<[f64; 2]> {
    pair[0].iter().zip(&pair[1]).map(|(&a, &b)| [a, b]).collect()
}

fn unpack(rows: Vec<[f64; 2]>) -> PlayerPair<Vec<f64>> {
    [rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect()]
}

fn alpha_table(spec: &LqGameSpec, grid: &TimeGrid, alpha: &PlayerPair<Vec<f64>>) -> HermiteTable<2> {
    HermiteTable::new(*grid, pack(alpha), |t, y| alpha_rhs(&spec.at(t), y))
}

fn check_len(grid: &TimeGrid, tables: &[&Vec<f64>]) -> Result<()> {
    for t in tables {
        grid.expect_nodes(t.len())?;
    }
    Ok(())
}

/// Mean-adjoint Riccati pair, integrated backward from `alpha_i(T) = h_i + hbar_i`.
pub fn solve_alpha(spec: &LqGameSpec, grid: &TimeGrid) -> Result<PlayerPair<Vec<f64>>> {
    let terminal = [spec.h1 + spec.hbar1, spec.h2 + spec.hbar2];
    let rows = rk4(grid, terminal, Direction::Backward, "alpha", |t, y| {
        alpha_rhs(&spec.at(t), y)
    })?;
    Ok(unpack(rows))
}

/// Filter-gain Riccati pair, integrated backward from `tau_i(T) = h_i`.
pub fn solve_tau(spec: &LqGameSpec, grid: &TimeGrid) -> Result<PlayerPair<Vec<f64>>> {
    let terminal = [spec.h1, spec.h2];
    let rows = rk4(grid, terminal, Direction::Backward, "tau", |t, y| {
        tau_rhs(&spec.at(t), y)
    })?;
    Ok(unpack(rows))
}

/// Linear system for the mean-field gains, integrated backward from
/// `delta_i(T) = hbar_i`. `alpha` and `tau` are read at the integrator
/// stage points through cubic Hermite interpolation with their exact
/// node derivatives.
pub fn solve_delta(
    spec: &LqGameSpec,
    grid: &TimeGrid,
    alpha: &PlayerPair<Vec<f64>>,
    tau: &PlayerPair<Vec<f64>>,
) -> Result<PlayerPair<Vec<f64>>> {
    check_len(grid, &[&alpha[0], &alpha[1], &tau[0], &tau[1]])?;
    let al = alpha_table(spec, grid, alpha);
    let ta = HermiteTable::new(*grid, pack(tau), |t, y| tau_rhs(&spec.at(t), y));
    let terminal = [spec.hbar1, spec.hbar2];
    let rows = rk4(grid, terminal, Direction::Backward, "delta", |t, y| {
        delta_rhs(&spec.at(t), &al.at(t), &ta.at(t), y)
    })?;
    Ok(unpack(rows))
}

fn mean_exponent(c: &CoefficientsAt, al: &[f64; 2]) -> f64 {
    c.a + c.abar - c.beta(0) * (al[0] + al[1])
}

/// `E[x](t) = x0 exp(∫_0^t [a + abar - (b1²/m1)(alpha_1 + alpha_2)] ds)`,
/// with the exponent accumulated by the trapezoid rule on the grid.
///
/// Relies on the symmetry `b1²/m1 = b2²/m2`.
pub fn mean_state_closed_form(spec: &LqGameSpec, alpha: &PlayerPair<Vec<f64>>, grid: &TimeGrid) -> Vec<f64> {
    let rate: Vec<f64> = (0..grid.n_nodes())
        .map(|k| mean_exponent(&spec.at(grid.t(k)), &[alpha[0][k], alpha[1][k]]))
        .collect();
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.n_nodes());
    let mut integral = 0.0;
    out.push(spec.x0);
    for k in 0..grid.n_steps() {
        integral += 0.5 * dt * (rate[k] + rate[k + 1]);
        out.push(spec.x0 * integral.exp());
    }
    out
}

/// Forward integration of
/// `dE[x] = [(a + abar) E[x] - beta_1 E[q_1] - beta_2 E[q_2]] dt` with
/// `E[q_i] = alpha_i E[x]`.
pub fn mean_state_ode(spec: &LqGameSpec, alpha: &PlayerPair<Vec<f64>>, grid: &TimeGrid) -> Result<Vec<f64>> {
    check_len(grid, &[&alpha[0], &alpha[1]])?;
    let al = alpha_table(spec, grid, alpha);
    let rows = rk4(grid, [spec.x0], Direction::Forward, "mean state", |t, y| {
        let c = spec.at(t);
        let a = al.at(t);
        [(c.a + c.abar - c.beta(0) * a[0] - c.beta(1) * a[1]) * y[0]]
    })?;
    Ok(rows.into_iter().map(|r| r[0]).collect())
}

/// Solves alpha, then tau, then delta, then the mean path.
pub fn solve_riccati(spec: &LqGameSpec, grid: &TimeGrid) -> Result<RiccatiTables> {
    let alpha = solve_alpha(spec, grid)?;
    let tau = solve_tau(spec, grid)?;
    let delta = solve_delta(spec, grid, &alpha, &tau)?;
    let ex_mean = mean_state_ode(spec, &alpha, grid)?;
    Ok(RiccatiTables {
        grid: *grid,
        alpha,
        tau,
        delta,
        ex_mean,
    })
}

/// `k_hat_i = -(b_i/m_i) tau_i` and `k_mean_i = -(b_i/m_i) delta_i` at every node.
pub fn feedback_gains(spec: &LqGameSpec, tables: &RiccatiTables) -> GainTables {
    let grid = tables.grid;
    let gain = |i: usize, table: &Vec<f64>| -> Vec<f64> {
        (0..grid.n_nodes())
            .map(|k| {
                let c = spec.at(grid.t(k));
                -c.b[i] / c.m[i] * table[k]
            })
            .collect()
    };
    GainTables {
        grid,
        k_hat: [gain(0, &tables.tau[0]), gain(1, &tables.tau[1])],
        k_mean: [gain(0, &tables.delta[0]), gain(1, &tables.delta[1])],
    }
}

/// Mean state under an arbitrary linear feedback pair. Since the filter has
/// the same mean as the state, `dE[x] = [a + abar + Σ b_i (k_hat_i + k_mean_i)] E[x] dt`.
/// Gains are linearly interpolated between nodes.
pub fn mean_state_under_gains(spec: &LqGameSpec, gains: &GainTables) -> Result<Vec<f64>> {
    let grid = gains.grid;
    check_len(
        &grid,
        &[&gains.k_hat[0], &gains.k_hat[1], &gains.k_mean[0], &gains.k_mean[1]],
    )?;
    let total: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            gains.k_hat[i]
                .iter()
                .zip(&gains.k_mean[i])
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let rows = rk4(&grid, [spec.x0], Direction::Forward, "mean state", |t, y| {
        let c = spec.at(t);
        let feedback = c.b[0] * lerp_nodes(&grid, &total[0], t) + c.b[1] * lerp_nodes(&grid, &total[1], t);
        [(c.a + c.abar + feedback) * y[0]]
    })?;
    Ok(rows.into_iter().map(|r| r[0]).collect())
}

pub(crate) fn ensure_same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch {
            expected: a.n_nodes(),
            found: b.n_nodes(),
        })
    }
}
