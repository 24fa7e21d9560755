//! Quadratic costs: Monte Carlo estimates on simulated paths and an exact
//! moment-equation value for linear feedback policies.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GameModel, LqGameSpec, LqModel, Node, Player, Point, TimeGrid};
use crate::ode::{cubic_nodes, rk4, Direction};
use crate::riccati::GainTables;
use crate::sde::{self, Channel, ControlPolicy, Information, NoisePlan, PathSlot, StatePathSet};
use crate::stats::Estimate;

pub const QUADRATURE: &str = "trapezoid";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub j1: f64,
    pub j2: f64,
    pub se1: f64,
    pub se2: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub quadrature: &'static str,
}

impl CostEstimate {
    fn from_per_path(per_path: &[[f64; 2]], n_steps: usize) -> Self {
        let player = |i: usize| Estimate::from_samples(&per_path.iter().map(|c| c[i]).collect::<Vec<_>>());
        let (e1, e2) = (player(0), player(1));
        CostEstimate {
            j1: e1.mean,
            j2: e2.mean,
            se1: e1.se,
            se2: e2.se,
            n_paths: per_path.len(),
            n_steps,
            quadrature: QUADRATURE,
        }
    }

    pub fn j(&self, player: Player) -> f64 {
        [self.j1, self.j2][player.index()]
    }

    pub fn se(&self, player: Player) -> f64 {
        [self.se1, self.se2][player.index()]
    }
}

/// Trapezoid weight of node `k`.
#[inline]
pub(crate) fn node_weight(grid: &TimeGrid, k: usize) -> f64 {
    if k == 0 || k == grid.n_steps() {
        0.5 * grid.dt()
    } else {
        grid.dt()
    }
}

/// Index of the control sample used at node `k`; the terminal node reuses
/// the control of the last interval.
#[inline]
pub(crate) fn control_index(grid: &TimeGrid, k: usize) -> usize {
    k.min(grid.n_steps() - 1)
}

/// Cost of one player along one path: trapezoid rule over node values of
/// the running cost plus the terminal cost.
pub fn path_cost<M: GameModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    player: Player,
    x: &[f64],
    v: [&[f64]; 2],
    ex_mean: &[f64],
) -> f64 {
    let n = grid.n_steps();
    let mut total = 0.0;
    for k in 0..=n {
        let j = control_index(grid, k);
        let p = Point {
            x: x[k],
            x_mean: ex_mean[k],
            v: [v[0][j], v[1][j]],
        };
        total += node_weight(grid, k) * model.running_cost(player, Node { index: k, t: grid.t(k) }, &p);
    }
    total + model.terminal_cost(player, x[n], ex_mean[n])
}

fn check_paths(grid: &TimeGrid, paths: &StatePathSet, ex_mean: &[f64]) -> Result<()> {
    grid.expect_nodes(ex_mean.len())?;
    for (cols, want) in [
        (paths.x.cols(), grid.n_nodes()),
        (paths.x_hat.cols(), grid.n_nodes()),
        (paths.v1.cols(), grid.n_steps()),
        (paths.v2.cols(), grid.n_steps()),
    ] {
        if cols != want {
            return Err(Error::GridMismatch {
                expected: want,
                found: cols,
            });
        }
    }
    Ok(())
}

/// Sample means and standard errors of both players' costs. Mean-field
/// terms use the supplied deterministic (or frozen) mean.
pub fn estimate_cost_mc(spec: &LqGameSpec, paths: &StatePathSet, ex_mean: &[f64]) -> Result<CostEstimate> {
    let grid = paths.grid;
    check_paths(&grid, paths, ex_mean)?;
    let model = LqModel::new(spec, &grid);
    let per_path: Vec<[f64; 2]> = (0..paths.n_paths())
        .into_par_iter()
        .map(|p| {
            let v = [paths.v1.row(p), paths.v2.row(p)];
            Player::BOTH.map(|pl| path_cost(&model, &grid, pl, paths.x.row(p), v, ex_mean))
        })
        .collect();
    Ok(CostEstimate::from_per_path(&per_path, grid.n_steps()))
}

/// Same estimate as simulating with [`sde::simulate_state`] and calling
/// [`estimate_cost_mc`], but each path is simulated, costed and dropped,
/// so memory stays proportional to the path count.
pub fn estimate_cost_streaming(
    spec: &LqGameSpec,
    policy: &dyn ControlPolicy,
    ex_mean: &[f64],
    plan: &NoisePlan,
) -> Result<CostEstimate> {
    if policy.information() != Information::W1Adapted {
        return Err(Error::NonAdaptedPolicy { policy: policy.name() });
    }
    let grid = plan.grid;
    grid.expect_nodes(ex_mean.len())?;
    let model = LqModel::new(spec, &grid);
    let coefs: Vec<_> = (0..grid.n_nodes()).map(|k| *model.coefficients(k)).collect();
    let (nodes, steps) = (grid.n_nodes(), grid.n_steps());
    let per_path: Vec<[f64; 2]> = (0..plan.n_paths)
        .into_par_iter()
        .map(|p| {
            let dw1 = plan.increments(p, Channel::W1);
            let dw2 = plan.increments(p, Channel::W2);
            let (mut x, mut x_hat) = (vec![0.0; nodes], vec![0.0; nodes]);
            let (mut v1, mut v2) = (vec![0.0; steps], vec![0.0; steps]);
            let slot = PathSlot {
                x: &mut x,
                x_hat: &mut x_hat,
                v1: &mut v1,
                v2: &mut v2,
            };
            sde::simulate_path(&coefs, &grid, spec.x0, policy, ex_mean, p, &dw1, &dw2, slot);
            Player::BOTH.map(|pl| path_cost(&model, &grid, pl, &x, [&v1, &v2], ex_mean))
        })
        .collect();
    Ok(CostEstimate::from_per_path(&per_path, steps))
}

/// First and second moments of `(x, x̂)` at every node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTrajectory {
    pub grid: TimeGrid,
    pub mean_x: Vec<f64>,
    pub mean_x_hat: Vec<f64>,
    /// `E[x²]`
    pub xx: Vec<f64>,
    /// `E[x x̂]`
    pub x_xhat: Vec<f64>,
    /// `E[x̂²]`
    pub xhat_xhat: Vec<f64>,
    /// Running cost accumulated up to each node, per player.
    pub running: [Vec<f64>; 2],
}

impl MomentTrajectory {
    /// Total expected cost of each player.
    pub fn cost(&self, spec: &LqGameSpec, ex_mean: &[f64]) -> [f64; 2] {
        let n = self.grid.n_steps();
        let (h, hbar) = (spec.h(), spec.hbar());
        let m = ex_mean[n];
        [0, 1].map(|i| self.running[i][n] + 0.5 * (h[i] * self.xx[n] + hbar[i] * m * m))
    }
}

/// Integrates the closed moment equations of state and filter under
/// `u_i = k_hat_i x̂ + k_mean_i m`, where `m` is the supplied mean. With
/// `B = Σ b_i k_hat_i` and `C = Σ b_i k_mean_i`:
///
/// ```text
/// d E[x]   = a E[x] + (abar + C) m + B E[x̂]
/// d E[x̂]   = (a + B) E[x̂] + (abar + C) m
/// d E[x²]  = 2a E[x²] + 2(abar + C) m E[x] + 2B E[xx̂] + c1² + c2²
/// d E[xx̂]  = (2a + B) E[xx̂] + B E[x̂²] + (abar + C) m (E[x] + E[x̂]) + c1²
/// d E[x̂²]  = 2(a + B) E[x̂²] + 2(abar + C) m E[x̂] + c1²
/// ```
///
/// Gains and mean are interpolated between nodes by cubic Lagrange
/// polynomials.
pub fn moment_trajectory(spec: &LqGameSpec, gains: &GainTables, ex_mean: &[f64]) -> Result<MomentTrajectory> {
    let grid = gains.grid;
    grid.expect_nodes(ex_mean.len())?;
    let x0 = spec.x0;
    let start = [x0, x0, x0 * x0, x0 * x0, x0 * x0, 0.0, 0.0];
    let rows = rk4(&grid, start, Direction::Forward, "moments", |t, y| {
        let c = spec.at(t);
        let kh = [0, 1].map(|i| cubic_nodes(&grid, &gains.k_hat[i], t));
        let km = [0, 1].map(|i| cubic_nodes(&grid, &gains.k_mean[i], t));
        let m = cubic_nodes(&grid, ex_mean, t);
        let big_b = c.b[0] * kh[0] + c.b[1] * kh[1];
        let big_c = c.b[0] * km[0] + c.b[1] * km[1];
        let force = (c.abar + big_c) * m;
        let [mx, mxh, p, r, s, _, _] = *y;
        let c1sq = c.c[0] * c.c[0];
        let running = [0, 1].map(|i| {
            let uu = kh[i] * kh[i] * s + 2.0 * kh[i] * km[i] * m * mxh + km[i] * km[i] * m * m;
            0.5 * (c.g[i] * p + c.gbar[i] * m * m + c.m[i] * uu)
        });
        [
            c.a * mx + force + big_b * mxh,
            (c.a + big_b) * mxh + force,
            2.0 * c.a * p + 2.0 * force * mx + 2.0 * big_b * r + c1sq + c.c[1] * c.c[1],
            (2.0 * c.a + big_b) * r + big_b * s + force * (mx + mxh) + c1sq,
            2.0 * (c.a + big_b) * s + 2.0 * force * mxh + c1sq,
            running[0],
            running[1],
        ]
    })?;
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    Ok(MomentTrajectory {
        grid,
        mean_x: col(0),
        mean_x_hat: col(1),
        xx: col(2),
        x_xhat: col(3),
        xhat_xhat: col(4),
        running: [col(5), col(6)],
    })
}

/// Exact expected costs `(J1, J2)` of the linear feedback `gains`.
pub fn exact_cost_moments(spec: &LqGameSpec, gains: &GainTables, ex_mean: &[f64]) -> Result<[f64; 2]> {
    Ok(moment_trajectory(spec, gains, ex_mean)?.cost(spec, ex_mean))
}
