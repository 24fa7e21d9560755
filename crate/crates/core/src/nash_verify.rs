//! Numerical certificates for a candidate equilibrium: unilateral deviation
//! costs, one-sided Gateaux derivatives, the first-variation inequality,
//! the conditional Hamiltonian gradient and the convexity hypotheses.
//!
//! Deviations are open-loop. The equilibrium controls of both players are
//! first realized as processes on a fixed bundle, then the deviating player
//! moves to `u + eps (v - u)` while the opponent keeps its process. The mean
//! field is always the cross-path mean of the run being costed.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::cost::{control_index, node_weight, path_cost};
use crate::error::{Error, Result};
use crate::model::{validate_lq, GameModel, LqGameSpec, LqModel, Node, Player, Point, TimeGrid};
use crate::paths::PathMatrix;
use crate::riccati::{feedback_gains, solve_riccati, GainTables, RiccatiTables};
use crate::sde::{equilibrium_policy, generate_noise, simulate_open_loop, simulate_two_pass, NoisePlan, PathBundle};
use crate::stats::{self, combined_se, Estimate};

pub const DEFAULT_LADDER: [f64; 3] = [0.2, 0.1, 0.05];

/// Shape of `v - u` for a deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionKind {
    /// `v = u + d`
    Offset { d: f64 },
    /// `v = u + level` on `[0, T/2)`, `v = u` afterwards
    HalfBang { level: f64 },
    /// `v = u + sin(2 pi t / T) x̂`
    SineFeedback,
    /// `v = s u`
    GainScale { s: f64 },
}

impl DirectionKind {
    /// `v - u` at one node. Reads only time, the filter and the candidate
    /// control, which keeps every direction w1-adapted.
    pub fn increment(&self, t: f64, horizon: f64, x_hat: f64, u: f64) -> f64 {
        match *self {
            DirectionKind::Offset { d } => d,
            DirectionKind::HalfBang { level } => {
                if t < 0.5 * horizon {
                    level
                } else {
                    0.0
                }
            }
            DirectionKind::SineFeedback => (2.0 * PI * t / horizon).sin() * x_hat,
            DirectionKind::GainScale { s } => (s - 1.0) * u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviation {
    pub player: Player,
    pub id: String,
    pub kind: DirectionKind,
    pub ladder: Vec<f64>,
}

impl Deviation {
    pub fn new(player: Player, kind: DirectionKind) -> Self {
        let id = match kind {
            DirectionKind::Offset { d } => format!("p{}-offset{d:+}", player.number()),
            DirectionKind::HalfBang { .. } => format!("p{}-half-bang", player.number()),
            DirectionKind::SineFeedback => format!("p{}-sine-feedback", player.number()),
            DirectionKind::GainScale { s } => format!("p{}-gain-x{s}", player.number()),
        };
        Deviation {
            player,
            id,
            kind,
            ladder: DEFAULT_LADDER.to_vec(),
        }
    }

    /// `v - u` on every path and step of `base`.
    pub fn direction(&self, base: &BaseRun) -> PathMatrix {
        let grid = base.grid;
        let u = &base.controls[self.player.index()];
        PathMatrix::from_fn(u.rows(), u.cols(), |p, k| {
            self.kind
                .increment(grid.t(k), grid.horizon(), base.observed.get(p, k), u.get(p, k))
        })
    }

    /// `sqrt(E ∫ (v - u)² dt)` over the bundle.
    pub fn l2_norm(&self, base: &BaseRun) -> f64 {
        let d = self.direction(base);
        let per_path: Vec<f64> = d
            .iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() * base.grid.dt())
            .collect();
        stats::mean(&per_path).sqrt()
    }
}

/// Per player: constant offsets `+0.5, ±1`, a half-interval bang, a
/// sine-modulated feedback and gain scalings `×0.5, ×1.5`.
pub fn deviation_battery() -> Vec<Deviation> {
    let kinds = [
        DirectionKind::Offset { d: 0.5 },
        DirectionKind::Offset { d: 1.0 },
        DirectionKind::Offset { d: -1.0 },
        DirectionKind::HalfBang { level: 1.0 },
        DirectionKind::SineFeedback,
        DirectionKind::GainScale { s: 0.5 },
        DirectionKind::GainScale { s: 1.5 },
    ];
    Player::BOTH
        .into_iter()
        .flat_map(|p| kinds.iter().map(move |&k| Deviation::new(p, k)))
        .collect()
}

/// Candidate equilibrium realized on a bundle.
#[derive(Debug, Clone)]
pub struct BaseRun {
    pub grid: TimeGrid,
    pub noise: PathBundle,
    /// w1-adapted signal available to deviations (the filter for LQ games).
    pub observed: PathMatrix,
    pub controls: [PathMatrix; 2],
    pub x: PathMatrix,
    pub ex_mean: Vec<f64>,
}

impl BaseRun {
    /// Simulates `model` under the given control processes.
    pub fn new<M: GameModel>(
        model: &M,
        noise: PathBundle,
        observed: PathMatrix,
        controls: [PathMatrix; 2],
    ) -> Result<Self> {
        let grid = noise.grid;
        let run = simulate_open_loop(model, &grid, [&controls[0], &controls[1]], &noise)?;
        Ok(BaseRun {
            grid,
            noise,
            observed,
            controls,
            x: run.x,
            ex_mean: run.ex_mean,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.x.rows()
    }

    fn per_path_cost<M: GameModel>(
        &self,
        model: &M,
        player: Player,
        x: &PathMatrix,
        v: [&PathMatrix; 2],
        mean: &[f64],
    ) -> Vec<f64> {
        (0..x.rows())
            .into_par_iter()
            .map(|p| path_cost(model, &self.grid, player, x.row(p), [v[0].row(p), v[1].row(p)], mean))
            .collect()
    }

    /// Per-path costs of the base run.
    pub fn costs<M: GameModel>(&self, model: &M, player: Player) -> Vec<f64> {
        self.per_path_cost(
            model,
            player,
            &self.x,
            [&self.controls[0], &self.controls[1]],
            &self.ex_mean,
        )
    }

    /// Per-path costs after moving `player` to `u + eps d`.
    pub fn perturbed_costs<M: GameModel>(
        &self,
        model: &M,
        player: Player,
        d: &PathMatrix,
        eps: f64,
    ) -> Result<Vec<f64>> {
        let i = player.index();
        let moved = PathMatrix::from_fn(d.rows(), d.cols(), |p, k| {
            self.controls[i].get(p, k) + eps * d.get(p, k)
        });
        let mut v = [&self.controls[0], &self.controls[1]];
        v[i] = &moved;
        let run = simulate_open_loop(model, &self.grid, v, &self.noise)?;
        Ok(self.per_path_cost(model, player, &run.x, v, &run.ex_mean))
    }
}

/// Equilibrium feedback realized by the two-pass rule: the particle means
/// of pass one are frozen and the controls are recorded as processes.
pub fn lq_base_run(spec: &LqGameSpec, gains: &GainTables, plan: &NoisePlan) -> Result<BaseRun> {
    let noise = generate_noise(plan);
    let (paths, _) = simulate_two_pass(spec, &equilibrium_policy(gains), &noise)?;
    let model = LqModel::new(spec, &plan.grid);
    BaseRun::new(&model, noise, paths.x_hat, [paths.v1, paths.v2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LadderRung {
    pub eps: f64,
    /// `(J(eps) - J(0)) / eps`
    pub quotient: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxEstimate {
    pub derivative: Estimate,
    pub ladder: Vec<LadderRung>,
    /// `J(v) - J(u)`, the cost change of the full deviation (`eps = 1`).
    pub delta_j: Estimate,
    /// Cost of the deviating player at the candidate.
    pub j_base: Estimate,
}

/// Lagrange weights extrapolating values at `eps` to `eps = 0`.
fn extrapolation_weights(eps: &[f64]) -> Vec<f64> {
    (0..eps.len())
        .map(|i| {
            (0..eps.len())
                .filter(|&j| j != i)
                .map(|j| eps[j] / (eps[j] - eps[i]))
                .product()
        })
        .collect()
}

/// One-sided derivative of `J_i` at the candidate in the direction of
/// `dev`, with common random numbers across the ladder and against the
/// base. Consecutive rung pairs give first-order Richardson estimates; if
/// two successive ones differ by more than 10 combined standard errors the
/// ladder is rejected. The reported derivative extrapolates the whole
/// ladder to zero path by path.
pub fn gateaux_derivative<M: GameModel>(model: &M, base: &BaseRun, dev: &Deviation) -> Result<GateauxEstimate> {
    let eps = &dev.ladder;
    if eps.is_empty() || eps.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::invalid("epsilon ladder must be non-empty and positive"));
    }
    let player = dev.player;
    let d = dev.direction(base);
    let j0 = base.costs(model, player);
    let n = j0.len();
    let quotients: Vec<Vec<f64>> = eps
        .iter()
        .map(|&e| {
            let je = base.perturbed_costs(model, player, &d, e)?;
            Ok(je.iter().zip(&j0).map(|(a, b)| (a - b) / e).collect())
        })
        .collect::<Result<_>>()?;
    let full = base.perturbed_costs(model, player, &d, 1.0)?;
    let delta: Vec<f64> = full.iter().zip(&j0).map(|(a, b)| a - b).collect();

    let richardson: Vec<Estimate> = eps
        .windows(2)
        .zip(quotients.windows(2))
        .map(|(e, q)| {
            let w = extrapolation_weights(e);
            let per: Vec<f64> = (0..n).map(|p| w[0] * q[0][p] + w[1] * q[1][p]).collect();
            Estimate::from_samples(&per)
        })
        .collect();
    for r in richardson.windows(2) {
        let se = combined_se(r[0].se, r[1].se);
        let floor = 1e-9 * r[0].mean.abs().max(r[1].mean.abs()).max(1.0);
        if (r[0].mean - r[1].mean).abs() > 10.0 * se + floor {
            return Err(Error::LadderInconsistent {
                deviation: dev.id.clone(),
                previous: r[0].mean,
                next: r[1].mean,
                se,
            });
        }
    }
    let w = extrapolation_weights(eps);
    let per: Vec<f64> = (0..n)
        .map(|p| w.iter().zip(&quotients).map(|(wi, q)| wi * q[p]).sum())
        .collect();
    Ok(GateauxEstimate {
        derivative: Estimate::from_samples(&per),
        ladder: eps
            .iter()
            .zip(&quotients)
            .map(|(&eps, q)| LadderRung {
                eps,
                quotient: Estimate::from_samples(q),
            })
            .collect(),
        delta_j: Estimate::from_samples(&delta),
        j_base: Estimate::from_samples(&j0),
    })
}

/// First variation of the state in the direction of a deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPath {
    pub grid: TimeGrid,
    /// paths × (N+1), zero at the initial node
    pub x: PathMatrix,
    pub mean: Vec<f64>,
}

/// Euler scheme for
/// `dx' = [f_x x' + f_m E[x'] + f_v (v - u)] dt + Σ_j [σj_x x' + σj_m E[x'] + σj_v (v - u)] dw_j`,
/// derivatives evaluated along the base run and `E[x']` the step-wise
/// cross-path mean.
pub fn variational_state<M: GameModel>(model: &M, base: &BaseRun, dev: &Deviation) -> Result<VariationalPath> {
    let grid = base.grid;
    let i = dev.player.index();
    let d = dev.direction(base);
    let n = base.n_paths();
    let dt = grid.dt();
    let mut x = PathMatrix::zeros(n, grid.n_nodes());
    let mut mean = vec![0.0; grid.n_nodes()];
    let mut column = vec![0.0; n];
    for k in 0..grid.n_steps() {
        let node = Node { index: k, t: grid.t(k) };
        let m_var = mean[k];
        x.par_rows_mut()
            .zip(column.par_iter_mut())
            .enumerate()
            .for_each(|(p, (row, next))| {
                let pt = Point {
                    x: base.x.get(p, k),
                    x_mean: base.ex_mean[k],
                    v: [base.controls[0].get(p, k), base.controls[1].get(p, k)],
                };
                let dk = d.get(p, k);
                let lin = |g: crate::model::Gradient| g.x * row[k] + g.x_mean * m_var + g.v[i] * dk;
                row[k + 1] = row[k]
                    + lin(model.drift_grad(node, &pt)) * dt
                    + lin(model.diffusion_grad(0, node, &pt)) * base.noise.dw1.get(p, k)
                    + lin(model.diffusion_grad(1, node, &pt)) * base.noise.dw2.get(p, k);
                *next = row[k + 1];
            });
        mean[k + 1] = stats::mean(&column);
    }
    Ok(VariationalPath { grid, x, mean })
}

/// Monte Carlo value of
/// `E ∫ [l_x x' + l_m E[x'] + l_v (v - u)] dt + E[φ_x x'(T) + φ_m E[x'](T)]`
/// for the deviating player, with the same quadrature as the cost.
pub fn variational_inequality_value<M: GameModel>(
    model: &M,
    base: &BaseRun,
    var: &VariationalPath,
    dev: &Deviation,
) -> Result<Estimate> {
    let grid = base.grid;
    if var.grid != grid {
        return Err(Error::GridMismatch {
            expected: grid.n_nodes(),
            found: var.grid.n_nodes(),
        });
    }
    let (player, i) = (dev.player, dev.player.index());
    let d = dev.direction(base);
    let n = grid.n_steps();
    let per: Vec<f64> = (0..base.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut total = 0.0;
            for k in 0..=n {
                let j = control_index(&grid, k);
                let pt = Point {
                    x: base.x.get(p, k),
                    x_mean: base.ex_mean[k],
                    v: [base.controls[0].get(p, j), base.controls[1].get(p, j)],
                };
                let g = model.running_cost_grad(player, Node { index: k, t: grid.t(k) }, &pt);
                total +=
                    node_weight(&grid, k) * (g.x * var.x.get(p, k) + g.x_mean * var.mean[k] + g.v[i] * d.get(p, j));
            }
            let (gx, gm) = model.terminal_cost_grad(player, base.x.get(p, n), base.ex_mean[n]);
            total + gx * var.x.get(p, n) + gm * var.mean[n]
        })
        .collect();
    Ok(Estimate::from_samples(&per))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianResidual {
    /// Per node, per player: max |b q̂ + m u| over paths.
    pub node_max: Vec<[f64; 2]>,
    pub max: [f64; 2],
    pub rms: [f64; 2],
    /// RMS of `m u`, the natural scale of the residual.
    pub rms_control_term: [f64; 2],
}

impl HamiltonianResidual {
    /// RMS residual relative to the RMS control term (0 when both vanish).
    pub fn relative_rms(&self, player: Player) -> f64 {
        let i = player.index();
        if self.rms[i] == 0.0 {
            0.0
        } else {
            self.rms[i] / self.rms_control_term[i]
        }
    }
}

/// `r_i = b_i q̂_i + m_i u_i` at every node before `T` for supplied
/// filtered adjoints and controls (paths × N each).
pub fn hamiltonian_residual_from(
    spec: &LqGameSpec,
    grid: &TimeGrid,
    q_hat: [&PathMatrix; 2],
    controls: [&PathMatrix; 2],
) -> Result<HamiltonianResidual> {
    let n = grid.n_steps();
    for m in q_hat.iter().chain(controls.iter()) {
        if m.cols() < n {
            return Err(Error::GridMismatch {
                expected: n,
                found: m.cols(),
            });
        }
    }
    let rows = controls[0].rows();
    let mut node_max = vec![[0.0; 2]; n];
    let mut sq = [Vec::with_capacity(rows * n), Vec::with_capacity(rows * n)];
    let mut scale = [Vec::with_capacity(rows * n), Vec::with_capacity(rows * n)];
    for (k, nm) in node_max.iter_mut().enumerate() {
        let c = spec.at(grid.t(k));
        for i in 0..2 {
            for p in 0..rows {
                let mu = c.m[i] * controls[i].get(p, k);
                let r = c.b[i] * q_hat[i].get(p, k) + mu;
                nm[i] = f64::max(nm[i], r.abs());
                sq[i].push(r * r);
                scale[i].push(mu * mu);
            }
        }
    }
    let rms = |v: &[f64]| stats::mean(v).sqrt();
    Ok(HamiltonianResidual {
        max: [0, 1].map(|i| node_max.iter().map(|m| m[i]).fold(0.0, f64::max)),
        rms: [rms(&sq[0]), rms(&sq[1])],
        rms_control_term: [rms(&scale[0]), rms(&scale[1])],
        node_max,
    })
}

/// Residual of the Riccati filtered adjoints `q̂_i = tau_i x̂ + delta_i m`
/// against the recorded controls of `base`, `m` being the run's mean.
pub fn hamiltonian_residual(spec: &LqGameSpec, tables: &RiccatiTables, base: &BaseRun) -> Result<HamiltonianResidual> {
    let grid = base.grid;
    tables.grid.expect_nodes(grid.n_nodes())?;
    let q = |i: usize| {
        PathMatrix::from_fn(base.n_paths(), grid.n_steps(), |p, k| {
            tables.tau[i][k] * base.observed.get(p, k) + tables.delta[i][k] * base.ex_mean[k]
        })
    };
    let (q1, q2) = (q(0), q(1));
    hamiltonian_residual_from(spec, &grid, [&q1, &q2], [&base.controls[0], &base.controls[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityCondition {
    pub name: String,
    pub passed: bool,
    pub offending_nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub conditions: Vec<ConvexityCondition>,
    /// Set when the convexity hypotheses hold but the game itself fails
    /// validation (e.g. a vanishing control weight).
    pub cross_reference: Option<String>,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ConvexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.conditions {
            let verdict = if c.passed { "ok" } else { "FAIL" };
            write!(f, "  {:<24} {verdict}", c.name)?;
            if !c.offending_nodes.is_empty() {
                write!(f, " at nodes {:?}", c.offending_nodes)?;
            }
            writeln!(f)?;
        }
        if let Some(note) = &self.cross_reference {
            writeln!(f, "  note: {note}")?;
        }
        Ok(())
    }
}

/// The Hamiltonian of player `i` has Hessian `diag(g_i, gbar_i, m_i)` in
/// `(x, E[x], v_i)`, and the terminal cost `diag(h_i, hbar_i)`; convexity
/// is nonnegativity of these entries on the grid.
pub fn convexity_check(spec: &LqGameSpec, grid: &TimeGrid) -> ConvexityReport {
    let mut conditions = Vec::new();
    for i in 0..2 {
        let n = i + 1;
        let mut nodes: [Vec<usize>; 3] = Default::default();
        for k in 0..grid.n_nodes() {
            let c = spec.at(grid.t(k));
            for (slot, w) in [c.g[i], c.gbar[i], c.m[i]].into_iter().enumerate() {
                if !(w >= 0.0) {
                    nodes[slot].push(k);
                }
            }
        }
        for (name, offending) in [format!("g{n} >= 0"), format!("gbar{n} >= 0"), format!("m{n} >= 0")]
            .into_iter()
            .zip(nodes)
        {
            conditions.push(ConvexityCondition {
                name,
                passed: offending.is_empty(),
                offending_nodes: offending,
            });
        }
        for (name, w) in [
            (format!("h{n} >= 0"), spec.h()[i]),
            (format!("hbar{n} >= 0"), spec.hbar()[i]),
        ] {
            conditions.push(ConvexityCondition {
                name,
                passed: w >= 0.0,
                offending_nodes: Vec::new(),
            });
        }
    }
    let mut report = ConvexityReport {
        conditions,
        cross_reference: None,
    };
    if report.passed() {
        let validation = validate_lq(spec, grid, crate::model::default_a3_tolerance(spec));
        if !validation.passed() {
            report.cross_reference = Some(format!(
                "convexity holds but the game fails validation: {}",
                validation.violations[0]
            ));
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRecord {
    pub player: usize,
    pub deviation: String,
    pub delta_j: f64,
    pub delta_j_se: f64,
    pub gateaux: f64,
    pub gateaux_se: f64,
    pub variational: f64,
    pub variational_se: f64,
    pub j_base: f64,
    pub tol_grad: f64,
    pub cost_ok: bool,
    pub gradient_ok: bool,
    pub identity_ok: bool,
    pub passed: bool,
}

impl DeviationRecord {
    fn new(dev: &Deviation, g: &GateauxEstimate, vi: Estimate) -> Self {
        let tol_grad = f64::max(3.0 * g.derivative.se, 1e-4 * g.j_base.mean.abs());
        let cost_ok = g.delta_j.mean >= -3.0 * g.delta_j.se;
        let gradient_ok = g.derivative.mean.abs() <= tol_grad;
        let identity_ok = (g.derivative.mean - vi.mean).abs() <= 3.0 * combined_se(g.derivative.se, vi.se) + 1e-12;
        DeviationRecord {
            player: dev.player.number(),
            deviation: dev.id.clone(),
            delta_j: g.delta_j.mean,
            delta_j_se: g.delta_j.se,
            gateaux: g.derivative.mean,
            gateaux_se: g.derivative.se,
            variational: vi.mean,
            variational_se: vi.se,
            j_base: g.j_base.mean,
            tol_grad,
            cost_ok,
            gradient_ok,
            identity_ok,
            passed: cost_ok && gradient_ok && identity_ok,
        }
    }
}

/// Runs the cost, Gateaux and first-variation checks for one deviation.
pub fn check_deviation<M: GameModel>(model: &M, base: &BaseRun, dev: &Deviation) -> Result<DeviationRecord> {
    let g = gateaux_derivative(model, base, dev)?;
    let var = variational_state(model, base, dev)?;
    let vi = variational_inequality_value(model, base, &var, dev)?;
    Ok(DeviationRecord::new(dev, &g, vi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashReport {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub gain_scale: f64,
    pub convexity: ConvexityReport,
    pub hamiltonian: HamiltonianResidual,
    pub hamiltonian_ok: bool,
    pub deviations: Vec<DeviationRecord>,
}

impl NashReport {
    pub fn passed(&self) -> bool {
        self.convexity.passed() && self.hamiltonian_ok && self.deviations.iter().all(|d| d.passed)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "player,deviation,delta_j,delta_j_se,gateaux,gateaux_se,variational,variational_se,j_base,tol_grad,passed"
        )?;
        for d in &self.deviations {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                d.player,
                d.deviation,
                d.delta_j,
                d.delta_j_se,
                d.gateaux,
                d.gateaux_se,
                d.variational,
                d.variational_se,
                d.j_base,
                d.tol_grad,
                d.passed
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for NashReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        writeln!(f, "convexity: {}", mark(self.convexity.passed()))?;
        write!(f, "{}", self.convexity)?;
        writeln!(
            f,
            "hamiltonian residual: {} (max {:e}, {:e})",
            mark(self.hamiltonian_ok),
            self.hamiltonian.max[0],
            self.hamiltonian.max[1]
        )?;
        for d in &self.deviations {
            writeln!(
                f,
                "{:<20} dJ = {:+.6} ± {:.6}  dJ/de = {:+.6} ± {:.6}  vi = {:+.6}  {}",
                d.deviation,
                d.delta_j,
                d.delta_j_se,
                d.gateaux,
                d.gateaux_se,
                d.variational,
                mark(d.passed)
            )?;
        }
        writeln!(f, "nash verification: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Full certificate for the Riccati feedback of `spec` with its gains
/// multiplied by `gain_scale` (1 for the genuine candidate).
pub fn verify_nash(spec: &LqGameSpec, plan: &NoisePlan, gain_scale: f64) -> Result<NashReport> {
    let grid = plan.grid;
    let convexity = convexity_check(spec, &grid);
    let tables = solve_riccati(spec, &grid)?;
    let gains = feedback_gains(spec, &tables).scaled(gain_scale);
    let base = lq_base_run(spec, &gains, plan)?;
    let hamiltonian = hamiltonian_residual(spec, &tables, &base)?;
    let hamiltonian_ok = Player::BOTH
        .into_iter()
        .all(|p| hamiltonian.rms[p.index()] <= 1e-9 * (1.0 + hamiltonian.rms_control_term[p.index()]));
    let model = LqModel::new(spec, &grid);
    let deviations = deviation_battery()
        .iter()
        .map(|dev| check_deviation(&model, &base, dev))
        .collect::<Result<_>>()?;
    Ok(NashReport {
        n_paths: plan.n_paths,
        n_steps: grid.n_steps(),
        seed: plan.master_seed,
        gain_scale,
        convexity,
        hamiltonian,
        hamiltonian_ok,
        deviations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lq_as_general, Coefficient};

    fn base(spec: &LqGameSpec, paths: usize, steps: usize, seed: u64) -> (RiccatiTables, BaseRun) {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        let tables = solve_riccati(spec, &grid).unwrap();
        let gains = feedback_gains(spec, &tables);
        let plan = NoisePlan::new(seed, paths, grid).unwrap();
        let run = lq_base_run(spec, &gains, &plan).unwrap();
        (tables, run)
    }

    #[test]
    fn battery_has_seven_adapted_square_integrable_directions_per_player() {
        let battery = deviation_battery();
        assert_eq!(battery.len(), 14);
        for p in Player::BOTH {
            assert_eq!(battery.iter().filter(|d| d.player == p).count(), 7);
        }
        let (_, run) = base(&LqGameSpec::reference(), 20, 32, 1);
        let mut scrambled = run.clone();
        scrambled.x = scrambled.x.map(|v| -3.0 * v);
        scrambled.noise.dw2 = scrambled.noise.dw2.map(|v| v + 1.0);
        for dev in &battery {
            assert_eq!(dev.direction(&run), dev.direction(&scrambled), "{}", dev.id);
            assert!(dev.l2_norm(&run).is_finite() && dev.l2_norm(&run) > 0.0);
        }
    }

    #[test]
    fn direction_equal_to_candidate_has_zero_derivative() {
        let spec = LqGameSpec::reference();
        let (_, run) = base(&spec, 50, 32, 2);
        let model = LqModel::new(&spec, &run.grid);
        let dev = Deviation::new(Player::One, DirectionKind::GainScale { s: 1.0 });
        let g = gateaux_derivative(&model, &run, &dev).unwrap();
        assert_eq!(g.derivative.mean, 0.0);
        assert_eq!(g.delta_j.mean, 0.0);
        let var = variational_state(&model, &run, &dev).unwrap();
        assert!(var.x.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(
            variational_inequality_value(&model, &run, &var, &dev).unwrap().mean,
            0.0
        );
    }

    #[test]
    fn zero_cost_game_has_flat_costs() {
        // zero gains from the zero-cost game, costed with every weight zero
        let spec = LqGameSpec::zero_cost();
        let (_, run) = base(&spec, 30, 16, 3);
        let weightless = LqGameSpec {
            m1: 0.0.into(),
            m2: 0.0.into(),
            ..spec
        };
        let model = LqModel::new(&weightless, &run.grid);
        let dev = Deviation::new(Player::Two, DirectionKind::Offset { d: 1.0 });
        let g = gateaux_derivative(&model, &run, &dev).unwrap();
        assert_eq!((g.derivative.mean, g.delta_j.mean), (0.0, 0.0));
        assert!(g.ladder.iter().all(|r| r.quotient.mean == 0.0));
        let var = variational_state(&model, &run, &dev).unwrap();
        assert_eq!(
            variational_inequality_value(&model, &run, &var, &dev).unwrap().mean,
            0.0
        );
    }

    #[test]
    fn constant_offset_variation_is_scalar_linear_ode() {
        // abar = 0: x'(t) = b d (e^{at} - 1) / a, Euler error O(dt)
        let spec = LqGameSpec {
            abar: 0.0.into(),
            b2: Coefficient::Constant(1.0),
            ..LqGameSpec::reference()
        };
        let (_, run) = base(&spec, 5, 4000, 4);
        let dev = Deviation::new(Player::One, DirectionKind::Offset { d: 0.5 });
        let var = variational_state(&LqModel::new(&spec, &run.grid), &run, &dev).unwrap();
        for k in [0, 1000, 4000] {
            let t = run.grid.t(k);
            let exact = 0.5 * ((0.1 * t).exp() - 1.0) / 0.1;
            assert!((var.x.get(3, k) - exact).abs() < 1e-4);
            assert!((var.mean[k] - exact).abs() < 1e-4);
        }
    }

    #[test]
    fn first_variation_is_exact_for_linear_dynamics() {
        let spec = LqGameSpec::reference();
        let (_, run) = base(&spec, 40, 64, 5);
        let model = LqModel::new(&spec, &run.grid);
        let dev = Deviation::new(Player::Two, DirectionKind::SineFeedback);
        let var = variational_state(&model, &run, &dev).unwrap();
        let d = dev.direction(&run);
        for eps in [1.0, 0.1, 1e-3] {
            let moved = PathMatrix::from_fn(40, 64, |p, k| run.controls[1].get(p, k) + eps * d.get(p, k));
            let pert = simulate_open_loop(&model, &run.grid, [&run.controls[0], &moved], &run.noise).unwrap();
            let diff = PathMatrix::from_fn(40, 65, |p, k| (pert.x.get(p, k) - run.x.get(p, k)) / eps);
            assert!(
                diff.max_abs_diff(&var.x) <= 1e-9,
                "eps {eps}: {}",
                diff.max_abs_diff(&var.x)
            );
        }
    }

    #[test]
    fn gateaux_equals_first_variation_value() {
        let spec = LqGameSpec::reference();
        let (_, run) = base(&spec, 400, 64, 6);
        let model = LqModel::new(&spec, &run.grid);
        for dev in deviation_battery() {
            let rec = check_deviation(&model, &run, &dev).unwrap();
            assert!((rec.gateaux - rec.variational).abs() < 1e-8, "{rec:?}");
            assert!(rec.delta_j > 0.0, "{rec:?}");
        }
    }

    #[test]
    fn general_callables_reproduce_lq_checks() {
        let spec = LqGameSpec::reference();
        let (_, run) = base(&spec, 100, 32, 7);
        let fast = LqModel::new(&spec, &run.grid);
        let general = lq_as_general(&spec);
        let dev = Deviation::new(Player::One, DirectionKind::HalfBang { level: 1.0 });
        let a = check_deviation(&fast, &run, &dev).unwrap();
        let b = check_deviation(&general, &run, &dev).unwrap();
        assert!((a.gateaux - b.gateaux).abs() < 1e-10);
        assert!((a.variational - b.variational).abs() < 1e-10);
    }

    #[test]
    fn quadratic_costs_accept_any_ladder() {
        let spec = LqGameSpec::reference();
        let (_, run) = base(&spec, 50, 16, 8);
        let model = LqModel::new(&spec, &run.grid);
        let mut dev = Deviation::new(Player::One, DirectionKind::Offset { d: 1.0 });
        dev.ladder = vec![4.0, 2.0, 1.0, 0.5];
        assert!(gateaux_derivative(&model, &run, &dev).is_ok());
        dev.ladder = vec![0.1, -0.1];
        assert!(matches!(
            gateaux_derivative(&model, &run, &dev),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn curved_cost_with_coarse_ladder_is_inconsistent() {
        // quartic control cost, no noise: Richardson pairs disagree with zero SE
        let spec = LqGameSpec {
            c1: 0.0.into(),
            c2: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let (_, run) = base(&spec, 4, 16, 8);
        let mut model = lq_as_general(&spec);
        model.running_cost[0] = std::sync::Arc::new(|_, p| p.v[0].powi(4));
        model.running_cost_grad[0] = std::sync::Arc::new(|_, p| crate::model::Gradient {
            v: [4.0 * p.v[0].powi(3), 0.0],
            ..Default::default()
        });
        let mut dev = Deviation::new(Player::One, DirectionKind::Offset { d: 1.0 });
        dev.ladder = vec![4.0, 2.0, 1.0];
        let err = gateaux_derivative(&model, &run, &dev).unwrap_err();
        assert!(matches!(err, Error::LadderInconsistent { .. }), "{err:?}");
    }

    #[test]
    fn riccati_adjoint_has_zero_hamiltonian_residual() {
        let spec = LqGameSpec::reference();
        let (tables, run) = base(&spec, 50, 64, 9);
        let r = hamiltonian_residual(&spec, &tables, &run).unwrap();
        for i in 0..2 {
            assert!(r.max[i] < 1e-13, "{:?}", r.max);
            assert!(r.rms_control_term[i] > 0.0);
        }
    }

    #[test]
    fn scaled_controls_leave_a_tenth_of_the_control_term() {
        let spec = LqGameSpec::reference();
        let (tables, run) = base(&spec, 20, 32, 10);
        let mut scaled = run.clone();
        scaled.controls = [0, 1].map(|i| run.controls[i].map(|u| 1.1 * u));
        let r = hamiltonian_residual(&spec, &tables, &scaled).unwrap();
        for i in 0..2 {
            assert!((r.rms[i] - 0.1 * r.rms_control_term[i] / 1.1).abs() < 1e-12);
        }
    }

    #[test]
    fn convexity_of_reference_and_broken_specs() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ok = convexity_check(&LqGameSpec::reference(), &grid);
        assert!(ok.passed() && ok.cross_reference.is_none());

        let bad = LqGameSpec {
            g1: (-1.0).into(),
            ..LqGameSpec::reference()
        };
        let report = convexity_check(&bad, &grid);
        assert!(!report.passed());
        let g1 = report.conditions.iter().find(|c| c.name == "g1 >= 0").unwrap();
        assert_eq!(g1.offending_nodes, (0..=10).collect::<Vec<_>>());

        let marginal = LqGameSpec {
            m2: 0.0.into(),
            ..LqGameSpec::reference()
        };
        let report = convexity_check(&marginal, &grid);
        assert!(report.passed());
        assert!(report.cross_reference.unwrap().contains("m2 must be positive"));
    }

    #[test]
    fn extrapolation_weights_are_exact_for_lines() {
        let w = extrapolation_weights(&[0.2, 0.1, 0.05]);
        let f = |e: f64| 3.0 - 2.0 * e + 5.0 * e * e;
        let at0: f64 = w.iter().zip([0.2, 0.1, 0.05]).map(|(w, e)| w * f(e)).sum();
        assert!((at0 - 3.0).abs() < 1e-12);
    }
}
