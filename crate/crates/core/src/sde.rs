//! Reproducible Brownian increments and Euler-Maruyama simulation of the
//! controlled state together with its w1-filter.
//!
//! Each `(path, channel)` pair owns its own ChaCha stream derived from the
//! master seed, so any subset of paths can be regenerated in isolation and
//! results never depend on how work is split across threads.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientsAt, GameModel, LqGameSpec, Node, Player, Point, TimeGrid};
use crate::paths::PathMatrix;
use crate::riccati::{GainTables, RiccatiTables};
use crate::stats::{self, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    W1,
    W2,
}

/// Seed, path count and grid of a Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub master_seed: u64,
    pub n_paths: usize,
    pub grid: TimeGrid,
}

impl NoisePlan {
    pub fn new(master_seed: u64, n_paths: usize, grid: TimeGrid) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::invalid("a noise plan needs at least one path"));
        }
        Ok(NoisePlan {
            master_seed,
            n_paths,
            grid,
        })
    }

    fn stream(&self, path: usize, channel: Channel) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        let ch = match channel {
            Channel::W1 => 0,
            Channel::W2 => 1,
        };
        rng.set_stream(2 * path as u64 + ch);
        rng
    }

    /// Writes the increments of one path and channel into `out`.
    pub fn fill(&self, path: usize, channel: Channel, out: &mut [f64]) {
        let sd = self.grid.dt().sqrt();
        let mut rng = self.stream(path, channel);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sd * z;
        }
    }

    pub fn increments(&self, path: usize, channel: Channel) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.n_steps()];
        self.fill(path, channel, &mut out);
        out
    }

    fn matrix(&self, channel: Channel) -> PathMatrix {
        let mut m = PathMatrix::zeros(self.n_paths, self.grid.n_steps());
        m.par_rows_mut()
            .enumerate()
            .for_each(|(p, row)| self.fill(p, channel, row));
        m
    }
}

/// Brownian increments `dw1`, `dw2` (paths × steps), each `N(0, dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub dw1: PathMatrix,
    pub dw2: PathMatrix,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.dw1.rows()
    }

    /// Builds a bundle from externally supplied increments.
    pub fn from_increments(grid: TimeGrid, dw1: PathMatrix, dw2: PathMatrix) -> Result<Self> {
        if dw1.cols() != grid.n_steps() || dw2.cols() != grid.n_steps() {
            return Err(Error::GridMismatch {
                expected: grid.n_steps(),
                found: dw1.cols().min(dw2.cols()),
            });
        }
        if dw1.rows() != dw2.rows() {
            return Err(Error::invalid("dw1 and dw2 must have the same number of paths"));
        }
        Ok(PathBundle { grid, dw1, dw2 })
    }
}

/// Materializes every increment of `plan`.
pub fn generate_noise(plan: &NoisePlan) -> PathBundle {
    PathBundle {
        grid: plan.grid,
        dw1: plan.matrix(Channel::W1),
        dw2: plan.matrix(Channel::W2),
    }
}

/// What a policy is allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Information {
    /// Only the filter, the deterministic mean and the w1 history.
    W1Adapted,
    /// Declares a need for the true state or w2; rejected by the simulators.
    FullState,
}

/// Everything a w1-adapted policy may read at node `node` of path `path`.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub path: usize,
    pub node: usize,
    pub t: f64,
    pub x_hat: f64,
    pub ex_mean: f64,
    /// `x̂` at nodes `0..=node`.
    pub x_hat_history: &'a [f64],
    /// `dw1` increments on intervals `0..node`.
    pub dw1_history: &'a [f64],
}

/// Rule producing both players' controls from w1-measurable information.
pub trait ControlPolicy: Sync {
    fn name(&self) -> String;

    fn information(&self) -> Information {
        Information::W1Adapted
    }

    fn controls(&self, obs: &Observation<'_>) -> [f64; 2];
}

/// Linear feedback on the filter and the mean.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub gains: GainTables,
    pub label: String,
}

impl ControlPolicy for FeedbackPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    #[inline]
    fn controls(&self, obs: &Observation<'_>) -> [f64; 2] {
        [
            self.gains.control(0, obs.node, obs.x_hat, obs.ex_mean),
            self.gains.control(1, obs.node, obs.x_hat, obs.ex_mean),
        ]
    }
}

/// `u_i = k_hat_i x̂ + k_mean_i E[x]`.
pub fn equilibrium_policy(gains: &GainTables) -> FeedbackPolicy {
    FeedbackPolicy {
        gains: gains.clone(),
        label: "equilibrium".into(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl ControlPolicy for ZeroPolicy {
    fn name(&self) -> String {
        "zero".into()
    }
    fn controls(&self, _: &Observation<'_>) -> [f64; 2] {
        [0.0, 0.0]
    }
}

/// Pre-computed control processes, one row per path and one column per step.
#[derive(Debug, Clone)]
pub struct OpenLoopControls {
    pub v: [PathMatrix; 2],
}

impl ControlPolicy for OpenLoopControls {
    fn name(&self) -> String {
        "open-loop".into()
    }
    fn controls(&self, obs: &Observation<'_>) -> [f64; 2] {
        [self.v[0].get(obs.path, obs.node), self.v[1].get(obs.path, obs.node)]
    }
}

/// Simulated state and filter paths with the applied controls.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePathSet {
    pub grid: TimeGrid,
    /// paths × (N+1)
    pub x: PathMatrix,
    /// paths × (N+1)
    pub x_hat: PathMatrix,
    /// paths × N, control applied on `[t_k, t_{k+1})`
    pub v1: PathMatrix,
    pub v2: PathMatrix,
}

impl StatePathSet {
    pub fn n_paths(&self) -> usize {
        self.x.rows()
    }

    pub fn controls(&self, player: Player) -> &PathMatrix {
        match player {
            Player::One => &self.v1,
            Player::Two => &self.v2,
        }
    }

    /// Long format `path_id,t,x,x_hat,v1,v2`, first `max_paths` paths. The
    /// control columns are empty at the terminal node.
    pub fn write_csv<W: Write>(&self, mut w: W, max_paths: usize) -> io::Result<()> {
        writeln!(w, "path_id,t,x,x_hat,v1,v2")?;
        let n = self.grid.n_steps();
        for p in 0..self.n_paths().min(max_paths) {
            for k in 0..=n {
                let t = self.grid.t(k);
                let (x, xh) = (self.x.get(p, k), self.x_hat.get(p, k));
                if k < n {
                    writeln!(w, "{p},{t},{x},{xh},{},{}", self.v1.get(p, k), self.v2.get(p, k))?;
                } else {
                    writeln!(w, "{p},{t},{x},{xh},,")?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn node_coefficients(spec: &LqGameSpec, grid: &TimeGrid) -> Vec<CoefficientsAt> {
    grid.nodes().into_iter().map(|t| spec.at(t)).collect()
}

fn ensure_adapted(policy: &dyn ControlPolicy) -> Result<()> {
    match policy.information() {
        Information::W1Adapted => Ok(()),
        Information::FullState => Err(Error::NonAdaptedPolicy { policy: policy.name() }),
    }
}

/// Per-path buffers for one simulated path.
pub(crate) struct PathSlot<'a> {
    pub x: &'a mut [f64],
    pub x_hat: &'a mut [f64],
    pub v1: &'a mut [f64],
    pub v2: &'a mut [f64],
}

/// Euler-Maruyama for one path: the state uses both channels, the filter
/// `dx̂ = [a x̂ + abar E[x] + b1 v1 + b2 v2] dt + c1 dw1` uses w1 only, and
/// the policy reads the filter.
#[allow(clippy::too_many_arguments)]
pub(crate) fn simulate_path(
    coefs: &[CoefficientsAt],
    grid: &TimeGrid,
    x0: f64,
    policy: &dyn ControlPolicy,
    ex_mean: &[f64],
    path: usize,
    dw1: &[f64],
    dw2: &[f64],
    out: PathSlot<'_>,
) {
    let dt = grid.dt();
    out.x[0] = x0;
    out.x_hat[0] = x0;
    for k in 0..grid.n_steps() {
        let c = &coefs[k];
        let obs = Observation {
            path,
            node: k,
            t: grid.t(k),
            x_hat: out.x_hat[k],
            ex_mean: ex_mean[k],
            x_hat_history: &out.x_hat[..=k],
            dw1_history: &dw1[..k],
        };
        let [v1, v2] = policy.controls(&obs);
        out.v1[k] = v1;
        out.v2[k] = v2;
        let push = c.abar * ex_mean[k] + c.b[0] * v1 + c.b[1] * v2;
        let (x, xh) = (out.x[k], out.x_hat[k]);
        out.x[k + 1] = x + (c.a * x + push) * dt + c.c[0] * dw1[k] + c.c[1] * dw2[k];
        out.x_hat[k + 1] = xh + (c.a * xh + push) * dt + c.c[0] * dw1[k];
    }
}

/// Simulates the controlled state and its filter on every path of `noise`.
/// The mean-field term is the supplied deterministic `ex_mean`.
pub fn simulate_state(
    spec: &LqGameSpec,
    policy: &dyn ControlPolicy,
    ex_mean: &[f64],
    noise: &PathBundle,
) -> Result<StatePathSet> {
    ensure_adapted(policy)?;
    let grid = noise.grid;
    grid.expect_nodes(ex_mean.len())?;
    let coefs = node_coefficients(spec, &grid);
    let (n, cols) = (noise.n_paths(), grid.n_nodes());
    let mut set = StatePathSet {
        grid,
        x: PathMatrix::zeros(n, cols),
        x_hat: PathMatrix::zeros(n, cols),
        v1: PathMatrix::zeros(n, cols - 1),
        v2: PathMatrix::zeros(n, cols - 1),
    };
    set.x
        .par_rows_mut()
        .zip(set.x_hat.par_rows_mut())
        .zip(set.v1.par_rows_mut().zip(set.v2.par_rows_mut()))
        .enumerate()
        .for_each(|(p, ((x, x_hat), (v1, v2)))| {
            simulate_path(
                &coefs,
                &grid,
                spec.x0,
                policy,
                ex_mean,
                p,
                noise.dw1.row(p),
                noise.dw2.row(p),
                PathSlot { x, x_hat, v1, v2 },
            )
        });
    Ok(set)
}

/// Two-pass scheme for policies whose mean is not known in advance:
/// pass 1 advances all paths together using the cross-path sample mean as
/// `E[x]`, pass 2 re-simulates with those means frozen. Returns the paths
/// and the frozen means.
pub fn simulate_two_pass(
    spec: &LqGameSpec,
    policy: &dyn ControlPolicy,
    noise: &PathBundle,
) -> Result<(StatePathSet, Vec<f64>)> {
    ensure_adapted(policy)?;
    let grid = noise.grid;
    let coefs = node_coefficients(spec, &grid);
    let (n, steps) = (noise.n_paths(), grid.n_steps());
    let dt = grid.dt();
    let mut x = vec![spec.x0; n];
    let mut x_hat = PathMatrix::filled(n, steps + 1, spec.x0);
    let mut means = Vec::with_capacity(steps + 1);
    means.push(spec.x0);
    for k in 0..steps {
        let c = &coefs[k];
        let m = means[k];
        x.par_iter_mut()
            .zip(x_hat.par_rows_mut())
            .enumerate()
            .for_each(|(p, (xp, xh))| {
                let dw1 = noise.dw1.row(p);
                let obs = Observation {
                    path: p,
                    node: k,
                    t: grid.t(k),
                    x_hat: xh[k],
                    ex_mean: m,
                    x_hat_history: &xh[..=k],
                    dw1_history: &dw1[..k],
                };
                let [v1, v2] = policy.controls(&obs);
                let push = c.abar * m + c.b[0] * v1 + c.b[1] * v2;
                *xp += (c.a * *xp + push) * dt + c.c[0] * dw1[k] + c.c[1] * noise.dw2.get(p, k);
                xh[k + 1] = xh[k] + (c.a * xh[k] + push) * dt + c.c[0] * dw1[k];
            });
        means.push(stats::mean(&x));
    }
    let set = simulate_state(spec, policy, &means, noise)?;
    Ok((set, means))
}

/// Euler-Maruyama for the filter alone with the equilibrium gains
/// substituted: `dx̂ = [a x̂ + abar E[x] - Σ beta_i q̂_i] dt + c1 dw1`, where
/// `-beta_i q̂_i = b_i (k_hat_i x̂ + k_mean_i E[x])`.
pub fn simulate_filter(spec: &LqGameSpec, gains: &GainTables, ex_mean: &[f64], dw1: &PathMatrix) -> Result<PathMatrix> {
    let grid = gains.grid;
    grid.expect_nodes(ex_mean.len())?;
    if dw1.cols() != grid.n_steps() {
        return Err(Error::GridMismatch {
            expected: grid.n_steps(),
            found: dw1.cols(),
        });
    }
    let coefs = node_coefficients(spec, &grid);
    let dt = grid.dt();
    let mut out = PathMatrix::zeros(dw1.rows(), grid.n_nodes());
    out.par_rows_mut().enumerate().for_each(|(p, xh)| {
        let dw = dw1.row(p);
        xh[0] = spec.x0;
        for k in 0..grid.n_steps() {
            let c = &coefs[k];
            let v1 = gains.control(0, k, xh[k], ex_mean[k]);
            let v2 = gains.control(1, k, xh[k], ex_mean[k]);
            let push = c.abar * ex_mean[k] + c.b[0] * v1 + c.b[1] * v2;
            xh[k + 1] = xh[k] + (c.a * xh[k] + push) * dt + c.c[0] * dw[k];
        }
    });
    Ok(out)
}

/// Transition factors `Φ(s, t) = exp(∫_s^t (a - beta_1 tau_1 - beta_2 tau_2) dr)`
/// between grid nodes, the exponent accumulated by the trapezoid rule.
#[derive(Debug, Clone)]
pub struct FilterPropagator {
    log_phi: Vec<f64>,
}

impl FilterPropagator {
    pub fn new(spec: &LqGameSpec, tables: &RiccatiTables) -> Self {
        let grid = tables.grid;
        let rate: Vec<f64> = (0..grid.n_nodes())
            .map(|k| {
                let c = spec.at(grid.t(k));
                c.a - c.beta(0) * tables.tau[0][k] - c.beta(1) * tables.tau[1][k]
            })
            .collect();
        let mut log_phi = vec![0.0; grid.n_nodes()];
        for k in 0..grid.n_steps() {
            log_phi[k + 1] = log_phi[k] + 0.5 * grid.dt() * (rate[k] + rate[k + 1]);
        }
        FilterPropagator { log_phi }
    }

    /// `Φ(t_from, t_to)`.
    pub fn phi(&self, from: usize, to: usize) -> f64 {
        (self.log_phi[to] - self.log_phi[from]).exp()
    }
}

/// Explicit filter solution
/// `x̂(t_k) = x0 Φ(0, t_k) + Σ_j Φ(t_j, t_k) [(abar - beta_1 delta_1 - beta_2 delta_2)(t_j) E[x](t_j) dt + c1(t_j) dw1_j]`.
pub fn filter_closed_form(spec: &LqGameSpec, tables: &RiccatiTables, dw1: &PathMatrix) -> Result<PathMatrix> {
    let grid = tables.grid;
    if dw1.cols() != grid.n_steps() {
        return Err(Error::GridMismatch {
            expected: grid.n_steps(),
            found: dw1.cols(),
        });
    }
    let prop = FilterPropagator::new(spec, tables);
    let dt = grid.dt();
    let forcing: Vec<f64> = (0..grid.n_steps())
        .map(|k| {
            let c = spec.at(grid.t(k));
            (c.abar - c.beta(0) * tables.delta[0][k] - c.beta(1) * tables.delta[1][k]) * tables.ex_mean[k] * dt
        })
        .collect();
    let c1: Vec<f64> = (0..grid.n_steps()).map(|k| spec.at(grid.t(k)).c[0]).collect();
    let mut out = PathMatrix::zeros(dw1.rows(), grid.n_nodes());
    out.par_rows_mut().enumerate().for_each(|(p, xh)| {
        let dw = dw1.row(p);
        xh[0] = spec.x0;
        for k in 0..grid.n_steps() {
            xh[k + 1] = prop.phi(k, k + 1) * (xh[k] + forcing[k] + c1[k] * dw[k]);
        }
    });
    Ok(out)
}

/// Monte Carlo estimate of `E[x(t) | w1-path]` next to the filter value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalMean {
    pub x_hat: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Holds one w1 path fixed, draws `n_inner` independent w2 paths, runs the
/// equilibrium feedback on each and averages the state node-wise.
pub fn conditional_mean_oracle(
    spec: &LqGameSpec,
    gains: &GainTables,
    ex_mean: &[f64],
    w1_path: &[f64],
    n_inner: usize,
    seed: u64,
) -> Result<ConditionalMean> {
    let grid = gains.grid;
    if w1_path.len() != grid.n_steps() {
        return Err(Error::GridMismatch {
            expected: grid.n_steps(),
            found: w1_path.len(),
        });
    }
    let plan = NoisePlan::new(seed, n_inner, grid)?;
    let policy = equilibrium_policy(gains);
    let coefs = node_coefficients(spec, &grid);
    let mut x = PathMatrix::zeros(n_inner, grid.n_nodes());
    let mut x_hat = PathMatrix::zeros(n_inner, grid.n_nodes());
    let mut v1 = PathMatrix::zeros(n_inner, grid.n_steps());
    let mut v2 = PathMatrix::zeros(n_inner, grid.n_steps());
    x.par_rows_mut()
        .zip(x_hat.par_rows_mut())
        .zip(v1.par_rows_mut().zip(v2.par_rows_mut()))
        .enumerate()
        .for_each(|(p, ((x, x_hat), (v1, v2)))| {
            let dw2 = plan.increments(p, Channel::W2);
            simulate_path(
                &coefs,
                &grid,
                spec.x0,
                &policy,
                ex_mean,
                p,
                w1_path,
                &dw2,
                PathSlot { x, x_hat, v1, v2 },
            )
        });
    let (mean, se) = (0..grid.n_nodes())
        .map(|k| {
            let e = Estimate::from_samples(&x.column(k));
            (e.mean, e.se)
        })
        .unzip();
    Ok(ConditionalMean {
        x_hat: x_hat.row(0).to_vec(),
        mean,
        se,
    })
}

/// State paths of the general engine with the frozen cross-path means.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldRun {
    pub grid: TimeGrid,
    pub x: PathMatrix,
    pub ex_mean: Vec<f64>,
}

/// Euler-Maruyama for a general mean-field game under fixed control
/// processes (paths × steps). `E[x]` is the cross-path sample mean,
/// computed step by step and then frozen in the returned run.
pub fn simulate_open_loop<M: GameModel>(
    model: &M,
    grid: &TimeGrid,
    controls: [&PathMatrix; 2],
    noise: &PathBundle,
) -> Result<MeanFieldRun> {
    if noise.grid != *grid {
        return Err(Error::GridMismatch {
            expected: grid.n_nodes(),
            found: noise.grid.n_nodes(),
        });
    }
    let n = noise.n_paths();
    for (i, v) in controls.iter().enumerate() {
        if v.rows() != n || v.cols() != grid.n_steps() {
            return Err(Error::GridMismatch {
                expected: grid.n_steps(),
                found: v.cols(),
            });
        }
        let domain = model.domain(Player::BOTH[i]);
        if let Some(&bad) = v.as_slice().iter().find(|&&u| !domain.contains(u)) {
            return Err(Error::InadmissibleControl {
                player: i + 1,
                value: bad,
                lower: domain.lower,
                upper: domain.upper,
            });
        }
    }
    let dt = grid.dt();
    let mut x = PathMatrix::filled(n, grid.n_nodes(), model.x0());
    let mut ex_mean = Vec::with_capacity(grid.n_nodes());
    ex_mean.push(model.x0());
    let mut column = vec![0.0; n];
    for k in 0..grid.n_steps() {
        let node = Node { index: k, t: grid.t(k) };
        let m = ex_mean[k];
        x.par_rows_mut()
            .zip(column.par_iter_mut())
            .enumerate()
            .for_each(|(p, (row, next))| {
                let pt = Point {
                    x: row[k],
                    x_mean: m,
                    v: [controls[0].get(p, k), controls[1].get(p, k)],
                };
                row[k + 1] = row[k]
                    + model.drift(node, &pt) * dt
                    + model.diffusion(0, node, &pt) * noise.dw1.get(p, k)
                    + model.diffusion(1, node, &pt) * noise.dw2.get(p, k);
                *next = row[k + 1];
            });
        ex_mean.push(stats::mean(&column));
    }
    Ok(MeanFieldRun {
        grid: *grid,
        x,
        ex_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lq_as_general, LqModel};
    use crate::riccati::{feedback_gains, solve_riccati};

    fn plan(n_paths: usize, steps: usize, seed: u64) -> NoisePlan {
        NoisePlan::new(seed, n_paths, TimeGrid::new(1.0, steps).unwrap()).unwrap()
    }

    #[test]
    fn identical_plans_give_identical_bundles() {
        let p = plan(50, 16, 42);
        assert_eq!(generate_noise(&p), generate_noise(&p));
        let other = generate_noise(&plan(50, 16, 43));
        assert_ne!(generate_noise(&p).dw1, other.dw1);
    }

    #[test]
    fn subsets_replay_in_isolation() {
        let p = plan(20, 8, 9);
        let bundle = generate_noise(&p);
        assert_eq!(p.increments(13, Channel::W2), bundle.dw2.row(13));
        // a larger plan extends, not reshuffles
        let bigger = generate_noise(&plan(40, 8, 9));
        assert_eq!(bigger.dw1.row(19), bundle.dw1.row(19));
    }

    #[test]
    fn zero_paths_is_rejected() {
        assert!(NoisePlan::new(1, 0, TimeGrid::new(1.0, 4).unwrap()).is_err());
    }

    #[test]
    fn increments_have_the_right_moments() {
        // 1e5 samples of one step: CLT bound on the mean, small correlation.
        let p = plan(100_000, 1, 2024);
        let b = generate_noise(&p);
        let dt = p.grid.dt();
        let m1 = stats::mean(b.dw1.as_slice());
        assert!(m1.abs() <= 4.0 * (dt / 1e5).sqrt(), "mean {m1}");
        let m2 = stats::mean(b.dw2.as_slice());
        let var1 = stats::mean(&b.dw1.as_slice().iter().map(|v| (v - m1).powi(2)).collect::<Vec<_>>());
        let var2 = stats::mean(&b.dw2.as_slice().iter().map(|v| (v - m2).powi(2)).collect::<Vec<_>>());
        assert!((var1 / dt - 1.0).abs() < 0.02);
        let cov = stats::mean(
            &b.dw1
                .as_slice()
                .iter()
                .zip(b.dw2.as_slice())
                .map(|(x, y)| (x - m1) * (y - m2))
                .collect::<Vec<_>>(),
        );
        assert!((cov / (var1 * var2).sqrt()).abs() <= 0.02);
    }

    #[test]
    fn noiseless_uncontrolled_state_follows_euler_recursion() {
        let spec = LqGameSpec {
            c1: 0.0.into(),
            c2: 0.0.into(),
            abar: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let p = plan(3, 40, 1);
        let set = simulate_state(&spec, &ZeroPolicy, &vec![0.0; 41], &generate_noise(&p)).unwrap();
        let dt = p.grid.dt();
        for k in 0..=40 {
            let exact = (1.0 + 0.1 * dt).powi(k as i32);
            assert!((set.x.get(2, k) - exact).abs() < 1e-13);
            assert_eq!(set.x.get(2, k), set.x_hat.get(2, k));
        }
    }

    #[test]
    fn zero_cost_equilibrium_is_uncontrolled() {
        let spec = LqGameSpec::zero_cost();
        let p = plan(20, 32, 5);
        let noise = generate_noise(&p);
        let tables = solve_riccati(&spec, &p.grid).unwrap();
        let gains = feedback_gains(&spec, &tables);
        let eq = simulate_state(&spec, &equilibrium_policy(&gains), &tables.ex_mean, &noise).unwrap();
        let free = simulate_state(&spec, &ZeroPolicy, &tables.ex_mean, &noise).unwrap();
        assert_eq!(eq.x, free.x);
        assert!(eq.v1.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paths_start_at_the_initial_state() {
        let spec = LqGameSpec::reference();
        let p = plan(10, 16, 3);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let set = simulate_state(&spec, &equilibrium_policy(&g), &t.ex_mean, &generate_noise(&p)).unwrap();
        for r in 0..10 {
            assert_eq!(set.x.get(r, 0), spec.x0);
            assert_eq!(set.x_hat.get(r, 0), spec.x0);
        }
    }

    struct Peeking;
    impl ControlPolicy for Peeking {
        fn name(&self) -> String {
            "peeking".into()
        }
        fn information(&self) -> Information {
            Information::FullState
        }
        fn controls(&self, _: &Observation<'_>) -> [f64; 2] {
            [0.0, 0.0]
        }
    }

    #[test]
    fn non_adapted_policy_is_rejected() {
        let spec = LqGameSpec::reference();
        let p = plan(2, 4, 3);
        let err = simulate_state(&spec, &Peeking, &[1.0; 5], &generate_noise(&p)).unwrap_err();
        assert!(matches!(err, Error::NonAdaptedPolicy { .. }));
    }

    #[test]
    fn filter_ignores_w2() {
        let spec = LqGameSpec::reference();
        let p = plan(8, 32, 11);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let noise = generate_noise(&p);
        let mut swapped = noise.clone();
        swapped.dw2 = PathMatrix::from_fn(8, 32, |r, c| noise.dw2.get(7 - r, 31 - c));
        let a = simulate_state(&spec, &equilibrium_policy(&g), &t.ex_mean, &noise).unwrap();
        let b = simulate_state(&spec, &equilibrium_policy(&g), &t.ex_mean, &swapped).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        assert_ne!(a.x, b.x);
        let alone = simulate_filter(&spec, &g, &t.ex_mean, &noise.dw1).unwrap();
        assert_eq!(alone, a.x_hat);
    }

    #[test]
    fn deterministic_filter_is_exponential() {
        let spec = LqGameSpec {
            c1: 0.0.into(),
            abar: 0.0.into(),
            ..LqGameSpec::zero_cost()
        };
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let t = solve_riccati(&spec, &grid).unwrap();
        let zero = PathMatrix::zeros(1, 64);
        let closed = filter_closed_form(&spec, &t, &zero).unwrap();
        for k in 0..=64 {
            assert!((closed.get(0, k) - (0.1 * grid.t(k)).exp()).abs() < 1e-13);
        }
        let prop = FilterPropagator::new(&spec, &t);
        assert_eq!(prop.phi(17, 17), 1.0);
        let euler = simulate_filter(&spec, &feedback_gains(&spec, &t), &t.ex_mean, &zero).unwrap();
        assert!((euler.get(0, 64) - 0.1f64.exp()).abs() < 1e-3);
    }

    #[test]
    fn conditional_mean_equals_filter_without_w2() {
        let spec = LqGameSpec {
            c2: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let p = plan(1, 64, 8);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let w1 = p.increments(0, Channel::W1);
        let cm = conditional_mean_oracle(&spec, &g, &t.ex_mean, &w1, 50, 3).unwrap();
        for k in 0..=64 {
            assert!((cm.mean[k] - cm.x_hat[k]).abs() < 1e-14);
            assert!(cm.se[k] < 1e-14);
        }
    }

    #[test]
    fn conditional_mean_error_shrinks_like_root_n() {
        let spec = LqGameSpec::reference();
        let p = plan(1, 64, 8);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let w1 = p.increments(0, Channel::W1);
        let small = conditional_mean_oracle(&spec, &g, &t.ex_mean, &w1, 2000, 3).unwrap();
        let big = conditional_mean_oracle(&spec, &g, &t.ex_mean, &w1, 4000, 4).unwrap();
        let ratio = big.se[64] / small.se[64];
        assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "ratio {ratio}");
        assert_eq!(small.x_hat, big.x_hat);
    }

    #[test]
    fn two_pass_means_match_deterministic_mean_for_equilibrium() {
        let spec = LqGameSpec::reference();
        let p = plan(4000, 64, 21);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let (set, means) = simulate_two_pass(&spec, &equilibrium_policy(&g), &generate_noise(&p)).unwrap();
        let final_mean = stats::mean(&set.x.column(64));
        assert!((final_mean - means[64]).abs() < 1e-12);
        assert!((means[64] - t.ex_mean[64]).abs() < 0.02);
    }

    #[test]
    fn open_loop_engine_agrees_for_fast_and_callable_models() {
        let spec = LqGameSpec::reference();
        let p = plan(30, 20, 4);
        let noise = generate_noise(&p);
        let v = PathMatrix::from_fn(30, 20, |r, c| 0.01 * (r as f64) - 0.02 * c as f64);
        let fast = simulate_open_loop(&LqModel::new(&spec, &p.grid), &p.grid, [&v, &v], &noise).unwrap();
        let slow = simulate_open_loop(&lq_as_general(&spec), &p.grid, [&v, &v], &noise).unwrap();
        assert!(fast.x.max_abs_diff(&slow.x) < 1e-13);
        assert_eq!(fast.ex_mean[0], spec.x0);
    }

    fn s1_equilibrium_bundle(n_paths: usize, steps: usize, seed: u64) -> (StatePathSet, PathBundle, Vec<f64>) {
        let spec = LqGameSpec::reference();
        let p = plan(n_paths, steps, seed);
        let t = solve_riccati(&spec, &p.grid).unwrap();
        let g = feedback_gains(&spec, &t);
        let noise = generate_noise(&p);
        let set = simulate_state(&spec, &equilibrium_policy(&g), &t.ex_mean, &noise).unwrap();
        (set, noise, t.ex_mean)
    }

    #[test]
    fn filter_is_unbiased_and_terminal_mean_matches() {
        let (set, _, ex_mean) = s1_equilibrium_bundle(10_000, 64, 77);
        for k in 0..=64 {
            let x = Estimate::from_samples(&set.x.column(k));
            let xh = Estimate::from_samples(&set.x_hat.column(k));
            let se = stats::combined_se(x.se, xh.se);
            assert!((x.mean - xh.mean).abs() <= 3.0 * se + 1e-15, "node {k}");
        }
        let xt = Estimate::from_samples(&set.x.column(64));
        assert!(
            (xt.mean - ex_mean[64]).abs() <= 3.0 * xt.se,
            "{} vs {}",
            xt.mean,
            ex_mean[64]
        );
    }

    #[test]
    fn filter_error_is_uncorrelated_with_w1() {
        let (set, noise, _) = s1_equilibrium_bundle(10_000, 64, 78);
        let n = set.n_paths();
        let mut w1 = vec![0.0; n];
        for k in 1..=64 {
            for (r, w) in w1.iter_mut().enumerate() {
                *w += noise.dw1.get(r, k - 1);
            }
            if k % 16 != 0 {
                continue;
            }
            let err: Vec<f64> = (0..n).map(|r| set.x.get(r, k) - set.x_hat.get(r, k)).collect();
            let (me, mw) = (stats::mean(&err), stats::mean(&w1));
            let cov = stats::mean(
                &err.iter()
                    .zip(&w1)
                    .map(|(e, w)| (e - me) * (w - mw))
                    .collect::<Vec<_>>(),
            );
            let ve = stats::mean(&err.iter().map(|e| (e - me).powi(2)).collect::<Vec<_>>());
            let vw = stats::mean(&w1.iter().map(|w| (w - mw).powi(2)).collect::<Vec<_>>());
            let rho = cov / (ve * vw).sqrt();
            assert!(rho.abs() <= 0.03, "node {k}: {rho}");
        }
    }

    #[test]
    fn worker_count_does_not_change_paths() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| s1_equilibrium_bundle(257, 32, 5).0);
        let b = three.install(|| s1_equilibrium_bundle(257, 32, 5).0);
        assert_eq!(a.x, b.x);
        assert_eq!(a.x_hat, b.x_hat);
        assert_eq!(a.v2, b.v2);
    }

    #[test]
    fn csv_export_is_long_format() {
        let spec = LqGameSpec::reference();
        let p = plan(3, 4, 4);
        let set = simulate_state(&spec, &ZeroPolicy, &[1.0; 5], &generate_noise(&p)).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(text.lines().nth(5).unwrap().ends_with(",,"));
    }
}
