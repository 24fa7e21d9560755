//! Picard iteration with least-squares Monte Carlo for the forward state,
//! the two adjoint BSDEs
//!
//! ```text
//! -dq_i = [a q_i + abar E[q_i] + g_i x + gbar_i E[x]] dt - k_i1 dw1 - k_i2 dw2
//!  q_i(T) = h_i x(T) + hbar_i E[x(T)]
//! ```
//!
//! and the control coupling `u_i = -(b_i/m_i) q̂_i`, with `q̂_i` the
//! w1-conditional expectation of `q_i`. No Riccati table is used.
//!
//! Controls are affine in the filter at each node. Conditional
//! expectations regress on `{1, x̂, x - x̂}`; the mean field is constant
//! across paths at a node and is absorbed by the intercept.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LqGameSpec, TimeGrid};
use crate::paths::PathMatrix;
use crate::riccati::{ensure_same_grid, RiccatiTables};
use crate::sde::{generate_noise, node_coefficients, NoisePlan};
use crate::stats;

/// Relative variance below which a regressor is treated as constant.
const DEGENERATE_VARIANCE: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    pub max_picard: usize,
    /// Stop when the relative L² change of the controls falls below this.
    pub picard_tol: f64,
    /// Damping `theta` in `u <- (1 - theta) u + theta u_new`.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_picard: 30,
            picard_tol: 1e-4,
            damping: 0.5,
        }
    }
}

impl SolverConfig {
    fn check(&self) -> Result<()> {
        if self.max_picard == 0 {
            return Err(Error::invalid("max_picard must be at least 1"));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::invalid("picard_tol must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("damping must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `c0 + c1 x̂` at one node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

impl Affine {
    #[inline]
    pub fn at(&self, x_hat: f64) -> f64 {
        self.intercept + self.slope * x_hat
    }
}

/// Coefficients on `{1, x̂, x - x̂}`; dropped regressors have coefficient 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Fit {
    pub beta: [f64; 3],
}

impl Fit {
    #[inline]
    pub fn at(&self, x: f64, x_hat: f64) -> f64 {
        self.beta[0] + self.beta[1] * x_hat + self.beta[2] * (x - x_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub control_change: f64,
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub grid: TimeGrid,
    pub x: PathMatrix,
    pub x_hat: PathMatrix,
    /// Cross-path mean of `x`.
    pub ex_mean: Vec<f64>,
    pub q: [PathMatrix; 2],
    /// `q̂_i` per node as an affine function of the filter.
    pub q_hat: [Vec<Affine>; 2],
    /// Regression fits of `k_ij` per node, `[player][channel]`.
    pub k: [[Vec<Fit>; 2]; 2],
    /// Controls per interval.
    pub controls: [Vec<Affine>; 2],
    pub log: Vec<IterationRecord>,
}

impl FbsdeSolution {
    pub fn iterations(&self) -> usize {
        self.log.len()
    }

    pub fn q_hat_at(&self, player: usize, path: usize, node: usize) -> f64 {
        self.q_hat[player][node].at(self.x_hat.get(path, node))
    }

    pub fn k_at(&self, player: usize, channel: usize, path: usize, node: usize) -> f64 {
        self.k[player][channel][node].at(self.x.get(path, node), self.x_hat.get(path, node))
    }

    /// `q̂_i` on every path and node.
    pub fn q_hat_matrix(&self, player: usize) -> PathMatrix {
        PathMatrix::from_fn(self.x.rows(), self.grid.n_nodes(), |p, k| self.q_hat_at(player, p, k))
    }

    /// Node curves `t, slope_i, intercept_i, mean_q_i, ex_mean`, to be read
    /// against `tau_i` and `delta_i E[x]`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "t,q_hat_slope_1,q_hat_intercept_1,q_hat_slope_2,q_hat_intercept_2,mean_q_1,mean_q_2,ex_mean"
        )?;
        let means = [self.q[0].column_means(), self.q[1].column_means()];
        for k in 0..self.grid.n_nodes() {
            let (a, b) = (self.q_hat[0][k], self.q_hat[1][k]);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                self.grid.t(k),
                a.slope,
                a.intercept,
                b.slope,
                b.intercept,
                means[0][k],
                means[1][k],
                self.ex_mean[k]
            )?;
        }
        Ok(())
    }
}

/// Least-squares fit of `y` on an intercept and the non-degenerate columns
/// of `cols`. Returns the coefficients (intercept first) and whether any
/// column was kept.
fn regress<const C: usize>(y: &[f64], cols: [&[f64]; C]) -> ([f64; 3], bool) {
    debug_assert!(C <= 2);
    let n = y.len() as f64;
    let y_mean = stats::mean(y);
    let means: [f64; C] = cols.map(stats::mean);
    let centered = |c: usize| -> Vec<f64> { cols[c].iter().map(|v| v - means[c]).collect() };
    let cent: Vec<Vec<f64>> = (0..C).map(centered).collect();
    let var: Vec<f64> = cent
        .iter()
        .map(|c| stats::sum(&c.iter().map(|v| v * v).collect::<Vec<_>>()) / n)
        .collect();
    let keep: Vec<usize> = (0..C)
        .filter(|&c| var[c] > DEGENERATE_VARIANCE * (1.0 + means[c] * means[c]))
        .collect();
    let dot = |a: &[f64], b: &[f64]| stats::sum(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>());
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut beta = [0.0; 3];
    match keep.as_slice() {
        [] => {}
        [c] => beta[c + 1] = dot(&cent[*c], &yc) / (var[*c] * n),
        [c0, c1] => {
            let (g00, g11) = (var[*c0] * n, var[*c1] * n);
            let g01 = dot(&cent[*c0], &cent[*c1]);
            let det = g00 * g11 - g01 * g01;
            let (r0, r1) = (dot(&cent[*c0], &yc), dot(&cent[*c1], &yc));
            if det > 1e-12 * g00 * g11 {
                beta[c0 + 1] = (g11 * r0 - g01 * r1) / det;
                beta[c1 + 1] = (g00 * r1 - g01 * r0) / det;
            } else {
                // collinear: the larger-variance column carries the fit
                let c = if g00 >= g11 { *c0 } else { *c1 };
                beta[c + 1] = dot(&cent[c], &yc) / (var[c] * n);
            }
        }
        _ => unreachable!(),
    }
    beta[0] = y_mean - (0..C).map(|c| beta[c + 1] * means[c]).sum::<f64>();
    (beta, !keep.is_empty())
}

/// Forward paths stored node-major: row `k` holds every path at node `k`.
struct Forward {
    x: PathMatrix,
    x_hat: PathMatrix,
    ex_mean: Vec<f64>,
}

/// Brownian increments stored node-major.
struct StepNoise {
    dw: [PathMatrix; 2],
}

/// Euler-Maruyama under affine filter feedback with the step-wise particle
/// mean as the mean field.
fn forward(spec: &LqGameSpec, grid: &TimeGrid, noise: &StepNoise, controls: &[Vec<Affine>; 2]) -> Forward {
    let coefs = node_coefficients(spec, grid);
    let n = noise.dw[0].cols();
    let dt = grid.dt();
    let mut x = PathMatrix::filled(grid.n_nodes(), n, spec.x0);
    let mut x_hat = PathMatrix::filled(grid.n_nodes(), n, spec.x0);
    let mut ex_mean = vec![spec.x0; grid.n_nodes()];
    for k in 0..grid.n_steps() {
        let c = &coefs[k];
        let m = ex_mean[k];
        let (u1, u2) = (controls[0][k], controls[1][k]);
        let (dw1, dw2) = (noise.dw[0].row(k), noise.dw[1].row(k));
        let next: Vec<(f64, f64)> = x
            .row(k)
            .par_iter()
            .zip(x_hat.row(k).par_iter())
            .enumerate()
            .map(|(p, (&xp, &xh))| {
                let push = c.abar * m + c.b[0] * u1.at(xh) + c.b[1] * u2.at(xh);
                let w1 = c.c[0] * dw1[p];
                (
                    xp + (c.a * xp + push) * dt + w1 + c.c[1] * dw2[p],
                    xh + (c.a * xh + push) * dt + w1,
                )
            })
            .collect();
        for (p, (xn, xhn)) in next.into_iter().enumerate() {
            x.set(k + 1, p, xn);
            x_hat.set(k + 1, p, xhn);
        }
        ex_mean[k + 1] = stats::mean(x.row(k + 1));
    }
    Forward { x, x_hat, ex_mean }
}

struct Backward {
    /// node-major
    q: [PathMatrix; 2],
    q_hat: [Vec<Affine>; 2],
    k: [[Vec<Fit>; 2]; 2],
}

fn backward(spec: &LqGameSpec, grid: &TimeGrid, noise: &StepNoise, fwd: &Forward) -> Result<Backward> {
    let coefs = node_coefficients(spec, grid);
    let (n, last) = (fwd.x.cols(), grid.n_steps());
    let dt = grid.dt();
    let (h, hbar) = (spec.h(), spec.hbar());
    let mut q = [PathMatrix::zeros(last + 1, n), PathMatrix::zeros(last + 1, n)];
    let mut q_hat = [vec![Affine::default(); last + 1], vec![Affine::default(); last + 1]];
    let mut k_fit: [[Vec<Fit>; 2]; 2] = Default::default();
    for row in k_fit.iter_mut().flatten() {
        *row = vec![Fit::default(); last + 1];
    }
    let affine = |beta: [f64; 3]| Affine {
        intercept: beta[0],
        slope: beta[1],
    };

    for i in 0..2 {
        let m = fwd.ex_mean[last];
        for (qv, &x) in q[i].row_mut(last).iter_mut().zip(fwd.x.row(last)) {
            *qv = h[i] * x + hbar[i] * m;
        }
        q_hat[i][last] = affine(regress(q[i].row(last), [fwd.x_hat.row(last)]).0);
    }

    for k in (0..last).rev() {
        let c = &coefs[k];
        let m = fwd.ex_mean[k];
        let (xs, xh) = (fwd.x.row(k), fwd.x_hat.row(k));
        let err: Vec<f64> = xs.iter().zip(xh).map(|(x, xh)| x - xh).collect();
        for i in 0..2 {
            let (beta, informative) = regress(q[i].row(k + 1), [xh, &err]);
            if !informative && k > 0 {
                return Err(Error::RegressionSingular { node: k });
            }
            let fit = Fit { beta };
            let mean_next = stats::mean(q[i].row(k + 1));
            for j in 0..2 {
                let z: Vec<f64> = q[i]
                    .row(k + 1)
                    .iter()
                    .zip(noise.dw[j].row(k))
                    .map(|(y, w)| y * w / dt)
                    .collect();
                k_fit[i][j][k] = Fit {
                    beta: regress(&z, [xh, &err]).0,
                };
            }
            let drift = c.abar * mean_next + c.gbar[i] * m;
            for (p, qv) in q[i].row_mut(k).iter_mut().enumerate() {
                *qv = fit.at(xs[p], xh[p]) * (1.0 + c.a * dt) + (drift + c.g[i] * xs[p]) * dt;
            }
            q_hat[i][k] = affine(regress(q[i].row(k), [xh]).0);
        }
    }
    Ok(Backward { q, q_hat, k: k_fit })
}

/// Relative L² distance between two affine control tables on the
/// (node-major) filter paths.
fn control_change(x_hat: &PathMatrix, old: &[Vec<Affine>; 2], new: &[Vec<Affine>; 2]) -> f64 {
    let steps = old[0].len();
    let (mut num, mut den) = (Vec::new(), Vec::new());
    for i in 0..2 {
        for k in 0..steps {
            let d = Affine {
                intercept: new[i][k].intercept - old[i][k].intercept,
                slope: new[i][k].slope - old[i][k].slope,
            };
            for &xh in x_hat.row(k) {
                num.push(d.at(xh).powi(2));
                den.push(new[i][k].at(xh).powi(2));
            }
        }
    }
    let (num, den) = (stats::sum(&num), stats::sum(&den));
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        (num / den).sqrt()
    }
}

/// Solves the coupled system by damped Picard iteration on the bundle of
/// `noise`, starting from zero controls.
pub fn solve_lq_fbsde(spec: &LqGameSpec, config: &SolverConfig, noise: &NoisePlan) -> Result<FbsdeSolution> {
    config.check()?;
    let grid = noise.grid;
    let bundle = generate_noise(noise);
    let steps = StepNoise {
        dw: [bundle.dw1.transpose(), bundle.dw2.transpose()],
    };
    drop(bundle);
    let coefs = node_coefficients(spec, &grid);
    let mut controls = [
        vec![Affine::default(); grid.n_steps()],
        vec![Affine::default(); grid.n_steps()],
    ];
    let mut log = Vec::new();
    for iteration in 1..=config.max_picard {
        let fwd = forward(spec, &grid, &steps, &controls);
        let bwd = backward(spec, &grid, &steps, &fwd)?;
        let theta = config.damping;
        let updated: [Vec<Affine>; 2] = [0, 1].map(|i| {
            (0..grid.n_steps())
                .map(|k| {
                    let gain = -coefs[k].b[i] / coefs[k].m[i];
                    let (old, qh) = (controls[i][k], bwd.q_hat[i][k]);
                    Affine {
                        intercept: (1.0 - theta) * old.intercept + theta * gain * qh.intercept,
                        slope: (1.0 - theta) * old.slope + theta * gain * qh.slope,
                    }
                })
                .collect()
        });
        let change = control_change(&fwd.x_hat, &controls, &updated);
        log.push(IterationRecord {
            iteration,
            control_change: change,
        });
        controls = updated;
        if change < config.picard_tol {
            return Ok(FbsdeSolution {
                grid,
                x: fwd.x.transpose(),
                x_hat: fwd.x_hat.transpose(),
                ex_mean: fwd.ex_mean,
                q: [bwd.q[0].transpose(), bwd.q[1].transpose()],
                q_hat: bwd.q_hat,
                k: bwd.k,
                controls,
                log,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: config.max_picard,
        last_change: log.last().map_or(f64::NAN, |r| r.control_change),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbsdeResidual {
    /// RMS of `q̂_i - (tau_i x̂ + delta_i E[x])` over nodes and paths,
    /// relative to RMS of `q̂_i`.
    pub q_hat_rel_rmse: [f64; 2],
    /// Max over nodes of `|mean q_i - alpha_i E[x]| / |alpha_i E[x]|`,
    /// nodes with `|E[x]| <= 1e-6` skipped.
    pub mean_rel_max: [f64; 2],
    /// R² of `q_i(T)` against `h_i x(T) + hbar_i E[x(T)]`.
    pub terminal_r2: [f64; 2],
}

pub const Q_HAT_TOLERANCE: f64 = 0.05;
pub const MEAN_TOLERANCE: f64 = 0.02;
pub const TERMINAL_R2_MIN: f64 = 0.999;

impl FbsdeResidual {
    pub fn passed(&self) -> bool {
        (0..2).all(|i| {
            self.q_hat_rel_rmse[i] <= Q_HAT_TOLERANCE
                && self.mean_rel_max[i] <= MEAN_TOLERANCE
                && self.terminal_r2[i] >= TERMINAL_R2_MIN
        })
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Compares a solution with the Riccati relations for the filtered adjoint
/// and the mean adjoint. The solution's own particle mean stands in for
/// `E[x]`.
pub fn check_against_riccati(spec: &LqGameSpec, sol: &FbsdeSolution, tables: &RiccatiTables) -> Result<FbsdeResidual> {
    ensure_same_grid(&sol.grid, &tables.grid)?;
    let grid = sol.grid;
    let (n, last) = (sol.x.rows(), grid.n_steps());
    let (h, hbar) = (spec.h(), spec.hbar());
    let mut out = FbsdeResidual {
        q_hat_rel_rmse: [0.0; 2],
        mean_rel_max: [0.0; 2],
        terminal_r2: [0.0; 2],
    };
    for i in 0..2 {
        let per_path: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let (mut err, mut size) = (0.0, 0.0);
                for k in 0..=last {
                    let qh = sol.q_hat_at(i, p, k);
                    let reference = tables.tau[i][k] * sol.x_hat.get(p, k) + tables.delta[i][k] * sol.ex_mean[k];
                    err += (qh - reference).powi(2);
                    size += qh * qh;
                }
                (err, size)
            })
            .collect();
        let err = stats::sum(&per_path.iter().map(|v| v.0).collect::<Vec<_>>());
        let size = stats::sum(&per_path.iter().map(|v| v.1).collect::<Vec<_>>());
        out.q_hat_rel_rmse[i] = ratio(err, size).sqrt();

        let means = sol.q[i].column_means();
        out.mean_rel_max[i] = (0..=last)
            .filter(|&k| sol.ex_mean[k].abs() > 1e-6)
            .map(|k| {
                let target = tables.alpha[i][k] * sol.ex_mean[k];
                ratio((means[k] - target).abs(), target.abs())
            })
            .fold(0.0, f64::max);

        let q_t = sol.q[i].column(last);
        let q_mean = stats::mean(&q_t);
        let ss_tot = stats::sum(&q_t.iter().map(|v| (v - q_mean).powi(2)).collect::<Vec<_>>());
        let ss_res = stats::sum(
            &(0..n)
                .map(|p| (q_t[p] - h[i] * sol.x.get(p, last) - hbar[i] * sol.ex_mean[last]).powi(2))
                .collect::<Vec<_>>(),
        );
        out.terminal_r2[i] = 1.0 - ratio(ss_res, ss_tot);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::solve_riccati;

    fn plan(paths: usize, steps: usize, seed: u64) -> NoisePlan {
        NoisePlan::new(seed, paths, TimeGrid::new(1.0, steps).unwrap()).unwrap()
    }

    #[test]
    fn regression_recovers_affine_targets_and_drops_constants() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 1.3).cos()).collect();
        let y: Vec<f64> = a.iter().zip(&b).map(|(a, b)| 2.0 - 3.0 * a + 0.5 * b).collect();
        let (beta, ok) = regress(&y, [&a, &b]);
        assert!(ok);
        for (got, want) in beta.iter().zip([2.0, -3.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        let flat = vec![1.5; 50];
        let (beta, ok) = regress(&y, [&flat, &flat]);
        assert!(!ok);
        assert!((beta[0] - stats::mean(&y)).abs() < 1e-14);
    }

    #[test]
    fn config_is_checked() {
        let p = plan(10, 4, 1);
        let spec = LqGameSpec::reference();
        for bad in [
            SolverConfig {
                damping: 0.0,
                ..Default::default()
            },
            SolverConfig {
                damping: 1.5,
                ..Default::default()
            },
            SolverConfig {
                picard_tol: 0.0,
                ..Default::default()
            },
            SolverConfig {
                max_picard: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(solve_lq_fbsde(&spec, &bad, &p), Err(Error::InvalidInput(_))));
        }
    }

    #[test]
    fn zero_cost_converges_at_once_to_zero() {
        let spec = LqGameSpec::zero_cost();
        let p = plan(200, 32, 2);
        let sol = solve_lq_fbsde(&spec, &SolverConfig::default(), &p).unwrap();
        assert_eq!(sol.iterations(), 1);
        assert!(sol.q.iter().all(|q| q.as_slice().iter().all(|&v| v == 0.0)));
        assert!(sol.controls.iter().flatten().all(|u| *u == Affine::default()));
        let tables = solve_riccati(&spec, &p.grid).unwrap();
        let r = check_against_riccati(&spec, &sol, &tables).unwrap();
        assert_eq!(r.q_hat_rel_rmse, [0.0, 0.0]);
        assert_eq!(r.mean_rel_max, [0.0, 0.0]);
        assert_eq!(r.terminal_r2, [1.0, 1.0]);
    }

    #[test]
    fn without_w2_the_filter_is_the_state() {
        let spec = LqGameSpec {
            c2: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let p = plan(500, 32, 3);
        let sol = solve_lq_fbsde(&spec, &SolverConfig::default(), &p).unwrap();
        for i in 0..2 {
            let scale = sol.q[i].as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = sol.q_hat_matrix(i).max_abs_diff(&sol.q[i]);
            assert!(diff <= 1e-10 * scale, "player {i}: {diff}");
        }
    }

    #[test]
    fn deterministic_game_is_singular() {
        let spec = LqGameSpec {
            c1: 0.0.into(),
            c2: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let err = solve_lq_fbsde(&spec, &SolverConfig::default(), &plan(20, 8, 4)).unwrap_err();
        assert!(matches!(err, Error::RegressionSingular { .. }));
    }

    #[test]
    fn single_iteration_does_not_converge() {
        let cfg = SolverConfig {
            max_picard: 1,
            ..Default::default()
        };
        let err = solve_lq_fbsde(&LqGameSpec::reference(), &cfg, &plan(100, 16, 5)).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 1, .. }));
    }

    #[test]
    fn riccati_built_solution_has_zero_residuals() {
        let spec = LqGameSpec::reference();
        let p = plan(300, 32, 6);
        let mut sol = solve_lq_fbsde(&spec, &SolverConfig::default(), &p).unwrap();
        let tables = solve_riccati(&spec, &p.grid).unwrap();
        // q = tau x + delta m, q̂ = tau x̂ + delta m with m the bundle mean
        for i in 0..2 {
            for k in 0..=32 {
                let m = sol.ex_mean[k];
                for r in 0..300 {
                    sol.q[i].set(r, k, tables.tau[i][k] * sol.x.get(r, k) + tables.delta[i][k] * m);
                }
                sol.q_hat[i][k] = Affine {
                    intercept: tables.delta[i][k] * m,
                    slope: tables.tau[i][k],
                };
            }
        }
        let r = check_against_riccati(&spec, &sol, &tables).unwrap();
        for i in 0..2 {
            assert!(r.q_hat_rel_rmse[i] < 1e-14);
            assert!(r.mean_rel_max[i] < 1e-6, "{:?}", r.mean_rel_max);
            assert!((r.terminal_r2[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_tables_are_rejected() {
        let spec = LqGameSpec::zero_cost();
        let p = plan(20, 16, 7);
        let sol = solve_lq_fbsde(&spec, &SolverConfig::default(), &p).unwrap();
        let tables = solve_riccati(&spec, &TimeGrid::new(1.0, 8).unwrap()).unwrap();
        assert!(matches!(
            check_against_riccati(&spec, &sol, &tables),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn reference_game_is_recovered_roughly_at_small_scale() {
        let spec = LqGameSpec::reference();
        let p = plan(2000, 64, 8);
        let sol = solve_lq_fbsde(&spec, &SolverConfig::default(), &p).unwrap();
        let tables = solve_riccati(&spec, &p.grid).unwrap();
        let r = check_against_riccati(&spec, &sol, &tables).unwrap();
        assert!(r.passed(), "{r:?}");
        // contraction after the transient, with slack for regression noise
        for w in sol.log.windows(2).skip(2) {
            assert!(w[1].control_change <= 1.5 * w[0].control_change, "{:?}", sol.log);
        }
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 66);
    }
}
