//! Game specifications: the scalar linear-quadratic game with its
//! time-varying coefficients, the uniform time grid, validation of the
//! structural assumptions, and a general (nonlinear) coefficient
//! representation used by the Gateaux checker.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two players. Player indices in the public surface are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Player {
    One,
    Two,
}

impl Player {
    pub const BOTH: [Player; 2] = [Player::One, Player::Two];

    /// Zero-based array index.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Player::One => 0,
            Player::Two => 1,
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }

    pub fn other(self) -> Player {
        match self {
            Player::One => Player::Two,
            Player::Two => Player::One,
        }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// A deterministic coefficient function of time.
///
/// Either a constant or a table of values sampled uniformly on `[0, T]`
/// (first entry at `t = 0`, last at `t = T`), linearly interpolated in
/// between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Tabulated(Vec<f64>),
}

impl Coefficient {
    pub fn constant(value: f64) -> Self {
        Coefficient::Constant(value)
    }

    /// Samples `f` on the nodes of `grid`.
    pub fn tabulate(grid: &TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Coefficient::Tabulated(grid.nodes().into_iter().map(f).collect())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }

    /// Value at time `t` for a coefficient living on `[0, horizon]`.
    pub fn at(&self, t: f64, horizon: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Tabulated(values) => match values.len() {
                0 => f64::NAN,
                1 => values[0],
                n => {
                    let intervals = (n - 1) as f64;
                    let s = (t / horizon).clamp(0.0, 1.0) * intervals;
                    let k = (s.floor() as usize).min(n - 2);
                    let w = s - k as f64;
                    values[k] * (1.0 - w) + values[k + 1] * w
                }
            },
        }
    }

    fn shape_problem(&self) -> Option<String> {
        match self {
            Coefficient::Constant(c) if !c.is_finite() => Some(format!("non-finite constant {c}")),
            Coefficient::Constant(_) => None,
            Coefficient::Tabulated(v) if v.len() < 2 => {
                Some(format!("table needs at least 2 samples, got {}", v.len()))
            }
            Coefficient::Tabulated(v) => v
                .iter()
                .position(|x| !x.is_finite())
                .map(|i| format!("non-finite table entry at index {i}")),
        }
    }
}

impl From<f64> for Coefficient {
    fn from(value: f64) -> Self {
        Coefficient::Constant(value)
    }
}

/// Scalar linear-quadratic mean-field game.
///
/// State: `dx = [a x + abar E[x] + b1 v1 + b2 v2] dt + c1 dw1 + c2 dw2`,
/// cost of player i: `½ E[∫ gi x² + gbari (E x)² + mi vi² dt + hi x(T)² + hbari (E x(T))²]`.
/// Both players observe only `w1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqGameSpec {
    pub horizon: f64,
    pub x0: f64,
    pub a: Coefficient,
    pub abar: Coefficient,
    pub b1: Coefficient,
    pub b2: Coefficient,
    pub c1: Coefficient,
    pub c2: Coefficient,
    pub g1: Coefficient,
    pub g2: Coefficient,
    pub gbar1: Coefficient,
    pub gbar2: Coefficient,
    pub m1: Coefficient,
    pub m2: Coefficient,
    pub h1: f64,
    pub h2: f64,
    pub hbar1: f64,
    pub hbar2: f64,
}

/// All coefficient values of an [`LqGameSpec`] frozen at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientsAt {
    pub a: f64,
    pub abar: f64,
    pub b: [f64; 2],
    pub c: [f64; 2],
    pub g: [f64; 2],
    pub gbar: [f64; 2],
    pub m: [f64; 2],
}

impl CoefficientsAt {
    /// `b_i² / m_i`, the control efficiency of player i.
    #[inline]
    pub fn beta(&self, i: usize) -> f64 {
        self.b[i] * self.b[i] / self.m[i]
    }
}

impl LqGameSpec {
    /// The two-player reference configuration shipped as `configs/s1.toml`.
    pub fn reference() -> Self {
        LqGameSpec {
            horizon: 1.0,
            x0: 1.0,
            a: 0.1.into(),
            abar: 0.05.into(),
            b1: 1.0.into(),
            b2: 1.0.into(),
            c1: 0.2.into(),
            c2: 0.2.into(),
            g1: 1.0.into(),
            g2: 0.5.into(),
            gbar1: 0.1.into(),
            gbar2: 0.2.into(),
            m1: 1.0.into(),
            m2: 1.0.into(),
            h1: 1.0,
            h2: 0.5,
            hbar1: 0.0,
            hbar2: 0.0,
        }
    }

    /// The reference dynamics with every cost weight set to zero.
    pub fn zero_cost() -> Self {
        LqGameSpec {
            g1: 0.0.into(),
            g2: 0.0.into(),
            gbar1: 0.0.into(),
            gbar2: 0.0.into(),
            h1: 0.0,
            h2: 0.0,
            hbar1: 0.0,
            hbar2: 0.0,
            ..Self::reference()
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> CoefficientsAt {
        let h = self.horizon;
        CoefficientsAt {
            a: self.a.at(t, h),
            abar: self.abar.at(t, h),
            b: [self.b1.at(t, h), self.b2.at(t, h)],
            c: [self.c1.at(t, h), self.c2.at(t, h)],
            g: [self.g1.at(t, h), self.g2.at(t, h)],
            gbar: [self.gbar1.at(t, h), self.gbar2.at(t, h)],
            m: [self.m1.at(t, h), self.m2.at(t, h)],
        }
    }

    pub fn h(&self) -> [f64; 2] {
        [self.h1, self.h2]
    }

    pub fn hbar(&self) -> [f64; 2] {
        [self.hbar1, self.hbar2]
    }

    fn named_coefficients(&self) -> [(&'static str, &Coefficient); 12] {
        [
            ("a", &self.a),
            ("abar", &self.abar),
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("c1", &self.c1),
            ("c2", &self.c2),
            ("g1", &self.g1),
            ("g2", &self.g2),
            ("gbar1", &self.gbar1),
            ("gbar2", &self.gbar2),
            ("m1", &self.m1),
            ("m2", &self.m2),
        ]
    }

    pub fn all_constant(&self) -> bool {
        self.named_coefficients().iter().all(|(_, c)| c.is_constant())
    }
}

/// Slack for the control-efficiency symmetry condition: `1e-10` when every
/// coefficient is constant, `1e-8` when any is tabulated.
pub fn default_a3_tolerance(spec: &LqGameSpec) -> f64 {
    if spec.all_constant() {
        1e-10
    } else {
        1e-8
    }
}

/// Uniform discretization of `[0, T]` with `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_steps: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(TimeGrid { n_steps, horizon })
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Node `k`; the last node is exactly the horizon.
    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        TimeGrid {
            n_steps: self.n_steps * factor.max(1),
            horizon: self.horizon,
        }
    }

    pub(crate) fn expect_nodes(&self, found: usize) -> Result<()> {
        if found == self.n_nodes() {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                expected: self.n_nodes(),
                found,
            })
        }
    }
}

/// A violated structural assumption of an [`LqGameSpec`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Constraint {
    Horizon,
    Malformed {
        name: &'static str,
        detail: String,
    },
    NonFinite {
        name: &'static str,
    },
    ControlWeightPositive {
        player: usize,
    },
    StateWeightNonNegative {
        name: &'static str,
    },
    TerminalWeightNonNegative {
        name: &'static str,
    },
    /// `b1²/m1 = b2²/m2` (assumption A3).
    ControlEfficiencySymmetry,
    ControlGainNonZero,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Horizon => write!(f, "horizon must be positive"),
            Constraint::Malformed { name, detail } => write!(f, "coefficient {name} malformed: {detail}"),
            Constraint::NonFinite { name } => write!(f, "coefficient {name} is not finite"),
            Constraint::ControlWeightPositive { player } => write!(f, "m{player} must be positive"),
            Constraint::StateWeightNonNegative { name } => write!(f, "{name} must be non-negative"),
            Constraint::TerminalWeightNonNegative { name } => write!(f, "{name} must be non-negative"),
            Constraint::ControlEfficiencySymmetry => write!(f, "A3 requires b1^2/m1 = b2^2/m2"),
            Constraint::ControlGainNonZero => write!(f, "b1*b2 must be non-zero"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    /// Node time where the violation was sampled; `None` for time-free constraints.
    pub t: Option<f64>,
    pub magnitude: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t {
            Some(t) => write!(f, "{} (t = {t}, magnitude {:e})", self.constraint, self.magnitude),
            None => write!(f, "{} (magnitude {:e})", self.constraint, self.magnitude),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violates(&self, pred: impl Fn(&Constraint) -> bool) -> bool {
        self.violations.iter().any(|v| pred(&v.constraint))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "validation: PASS");
        }
        writeln!(f, "validation: FAIL ({} violations)", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Checks every structural assumption of `spec` at the nodes of `grid`.
/// Violations are data, never errors.
pub fn validate_lq(spec: &LqGameSpec, grid: &TimeGrid, tol_a3: f64) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |constraint, t, magnitude| {
        violations.push(Violation {
            constraint,
            t,
            magnitude,
        })
    };

    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        push(Constraint::Horizon, None, spec.horizon);
    }
    if !spec.x0.is_finite() {
        push(Constraint::NonFinite { name: "x0" }, None, spec.x0);
    }
    let mut malformed = false;
    for (name, coef) in spec.named_coefficients() {
        if let Some(detail) = coef.shape_problem() {
            malformed = true;
            push(Constraint::Malformed { name, detail }, None, f64::NAN);
        }
    }
    for (name, h) in [
        ("h1", spec.h1),
        ("h2", spec.h2),
        ("hbar1", spec.hbar1),
        ("hbar2", spec.hbar2),
    ] {
        if !h.is_finite() {
            push(Constraint::NonFinite { name }, None, h);
        } else if h < 0.0 {
            push(Constraint::TerminalWeightNonNegative { name }, None, -h);
        }
    }
    if malformed || !(spec.horizon > 0.0) {
        return ValidationReport { violations };
    }

    for k in 0..grid.n_nodes() {
        let t = grid.t(k);
        let c = spec.at(t);
        for i in 0..2 {
            if !(c.m[i] > 0.0) {
                push(Constraint::ControlWeightPositive { player: i + 1 }, Some(t), -c.m[i]);
            }
        }
        for (name, w) in [
            ("g1", c.g[0]),
            ("g2", c.g[1]),
            ("gbar1", c.gbar[0]),
            ("gbar2", c.gbar[1]),
        ] {
            if w < 0.0 {
                push(Constraint::StateWeightNonNegative { name }, Some(t), -w);
            }
        }
        if c.m[0] > 0.0 && c.m[1] > 0.0 {
            let gap = (c.beta(0) - c.beta(1)).abs();
            if !(gap <= tol_a3) {
                push(Constraint::ControlEfficiencySymmetry, Some(t), gap);
            }
        }
        if c.b[0] * c.b[1] == 0.0 {
            push(Constraint::ControlGainNonZero, Some(t), 0.0);
        }
    }
    ValidationReport { violations }
}

/// Interval control domain `[lower, upper]`; the default is the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDomain {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ControlDomain {
    fn default() -> Self {
        ControlDomain {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

impl ControlDomain {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// Arguments of a general coefficient: state, state mean and both controls.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub x_mean: f64,
    pub v: [f64; 2],
}

/// Partial derivatives with respect to `(x, x_mean, v1, v2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gradient {
    pub x: f64,
    pub x_mean: f64,
    pub v: [f64; 2],
}

pub type PointFn = Arc<dyn Fn(f64, &Point) -> f64 + Send + Sync>;
pub type PointGradFn = Arc<dyn Fn(f64, &Point) -> Gradient + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalGradFn = Arc<dyn Fn(f64, f64) -> (f64, f64) + Send + Sync>;

/// A general two-player mean-field game given by callables.
///
/// `diffusion[j]` multiplies `dw_{j+1}`; `running_cost[i]` and
/// `terminal_cost[i]` belong to player `i+1`. Each callable has a matching
/// gradient callable.
#[derive(Clone)]
pub struct GeneralGameSpec {
    pub horizon: f64,
    pub x0: f64,
    pub drift: PointFn,
    pub drift_grad: PointGradFn,
    pub diffusion: [PointFn; 2],
    pub diffusion_grad: [PointGradFn; 2],
    pub running_cost: [PointFn; 2],
    pub running_cost_grad: [PointGradFn; 2],
    pub terminal_cost: [TerminalFn; 2],
    pub terminal_cost_grad: [TerminalGradFn; 2],
    pub domains: [ControlDomain; 2],
}

impl fmt::Debug for GeneralGameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralGameSpec")
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("domains", &self.domains)
            .finish_non_exhaustive()
    }
}

/// Outcome of probing derivative callables against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub probes: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

impl DerivativeCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Central-difference step used by [`GeneralGameSpec::check_derivatives`].
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance used by [`GeneralGameSpec::check_derivatives`].
pub const FD_TOL: f64 = 1e-4;

impl GeneralGameSpec {
    /// Compares every gradient callable with central finite differences of
    /// its coefficient at `n_probes` random points. The error measure is
    /// `|fd - exact| / max(1, |exact|)`.
    pub fn check_derivatives(&self, n_probes: usize, seed: u64) -> DerivativeCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut max_rel: f64 = 0.0;
        let mut failures = Vec::new();
        let mut record = |what: String, fd: f64, exact: f64| {
            let rel = (fd - exact).abs() / exact.abs().max(1.0);
            max_rel = max_rel.max(rel);
            if !(rel <= FD_TOL) {
                failures.push(format!("{what}: finite difference {fd}, callable {exact}"));
            }
        };

        for probe in 0..n_probes {
            let t = rng.random_range(0.0..=self.horizon);
            let mut sample_v = |d: &ControlDomain| {
                let lo = d.lower.max(-2.0);
                let hi = d.upper.min(2.0);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            };
            let v = [sample_v(&self.domains[0]), sample_v(&self.domains[1])];
            let p = Point {
                x: rng.random_range(-2.0..2.0),
                x_mean: rng.random_range(-2.0..2.0),
                v,
            };

            let mut point_fns: Vec<(String, &PointFn, &PointGradFn)> =
                vec![("drift".into(), &self.drift, &self.drift_grad)];
            for j in 0..2 {
                point_fns.push((
                    format!("diffusion{}", j + 1),
                    &self.diffusion[j],
                    &self.diffusion_grad[j],
                ));
                point_fns.push((
                    format!("running_cost{}", j + 1),
                    &self.running_cost[j],
                    &self.running_cost_grad[j],
                ));
            }
            for (name, f, grad) in point_fns {
                let g = grad(t, &p);
                for (arg, exact) in [("x", g.x), ("x_mean", g.x_mean), ("v1", g.v[0]), ("v2", g.v[1])] {
                    let shifted = |h: f64| {
                        let mut q = p;
                        match arg {
                            "x" => q.x += h,
                            "x_mean" => q.x_mean += h,
                            "v1" => q.v[0] += h,
                            _ => q.v[1] += h,
                        }
                        f(t, &q)
                    };
                    let fd = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
                    record(format!("probe {probe}: d{name}/d{arg}"), fd, exact);
                }
            }
            for i in 0..2 {
                let (gx, gm) = (self.terminal_cost_grad[i])(p.x, p.x_mean);
                let phi = &self.terminal_cost[i];
                let fdx = (phi(p.x + FD_STEP, p.x_mean) - phi(p.x - FD_STEP, p.x_mean)) / (2.0 * FD_STEP);
                let fdm = (phi(p.x, p.x_mean + FD_STEP) - phi(p.x, p.x_mean - FD_STEP)) / (2.0 * FD_STEP);
                record(format!("probe {probe}: dterminal_cost{}/dx", i + 1), fdx, gx);
                record(format!("probe {probe}: dterminal_cost{}/dx_mean", i + 1), fdm, gm);
            }
        }
        DerivativeCheck {
            probes: n_probes,
            max_rel_error: max_rel,
            failures,
        }
    }
}

/// Writes the linear-quadratic game as general callables with exact
/// derivatives.
pub fn lq_as_general(spec: &LqGameSpec) -> GeneralGameSpec {
    let spec = Arc::new(spec.clone());

    let s = spec.clone();
    let drift: PointFn = Arc::new(move |t, p| {
        let c = s.at(t);
        c.a * p.x + c.abar * p.x_mean + c.b[0] * p.v[0] + c.b[1] * p.v[1]
    });
    let s = spec.clone();
    let drift_grad: PointGradFn = Arc::new(move |t, _| {
        let c = s.at(t);
        Gradient {
            x: c.a,
            x_mean: c.abar,
            v: c.b,
        }
    });

    let diffusion_for = |j: usize| -> (PointFn, PointGradFn) {
        let s = spec.clone();
        (Arc::new(move |t, _| s.at(t).c[j]), Arc::new(|_, _| Gradient::default()))
    };
    let (d1, dg1) = diffusion_for(0);
    let (d2, dg2) = diffusion_for(1);

    let running_for = |i: usize| -> (PointFn, PointGradFn) {
        let s = spec.clone();
        let s2 = spec.clone();
        (
            Arc::new(move |t, p| {
                let c = s.at(t);
                0.5 * (c.g[i] * p.x * p.x + c.gbar[i] * p.x_mean * p.x_mean + c.m[i] * p.v[i] * p.v[i])
            }),
            Arc::new(move |t, p| {
                let c = s2.at(t);
                let mut v = [0.0; 2];
                v[i] = c.m[i] * p.v[i];
                Gradient {
                    x: c.g[i] * p.x,
                    x_mean: c.gbar[i] * p.x_mean,
                    v,
                }
            }),
        )
    };
    let (l1, lg1) = running_for(0);
    let (l2, lg2) = running_for(1);

    let terminal_for = |i: usize| -> (TerminalFn, TerminalGradFn) {
        let (h, hbar) = (spec.h()[i], spec.hbar()[i]);
        (
            Arc::new(move |x, m| 0.5 * (h * x * x + hbar * m * m)),
            Arc::new(move |x, m| (h * x, hbar * m)),
        )
    };
    let (p1, pg1) = terminal_for(0);
    let (p2, pg2) = terminal_for(1);

    GeneralGameSpec {
        horizon: spec.horizon,
        x0: spec.x0,
        drift,
        drift_grad,
        diffusion: [d1, d2],
        diffusion_grad: [dg1, dg2],
        running_cost: [l1, l2],
        running_cost_grad: [lg1, lg2],
        terminal_cost: [p1, p2],
        terminal_cost_grad: [pg1, pg2],
        domains: [ControlDomain::default(); 2],
    }
}

/// Time of a grid node, passed to [`GameModel`] evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub index: usize,
    pub t: f64,
}

/// Coefficient access used by the open-loop simulation engine.
///
/// Implementations may use `node.index` for precomputed tables; the engine
/// always evaluates on the grid it was given.
pub trait GameModel: Sync {
    fn horizon(&self) -> f64;
    fn x0(&self) -> f64;
    fn domain(&self, player: Player) -> ControlDomain;
    fn drift(&self, node: Node, p: &Point) -> f64;
    fn drift_grad(&self, node: Node, p: &Point) -> Gradient;
    fn diffusion(&self, channel: usize, node: Node, p: &Point) -> f64;
    fn diffusion_grad(&self, channel: usize, node: Node, p: &Point) -> Gradient;
    fn running_cost(&self, player: Player, node: Node, p: &Point) -> f64;
    fn running_cost_grad(&self, player: Player, node: Node, p: &Point) -> Gradient;
    fn terminal_cost(&self, player: Player, x: f64, x_mean: f64) -> f64;
    fn terminal_cost_grad(&self, player: Player, x: f64, x_mean: f64) -> (f64, f64);
}

impl GameModel for GeneralGameSpec {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn x0(&self) -> f64 {
        self.x0
    }
    fn domain(&self, player: Player) -> ControlDomain {
        self.domains[player.index()]
    }
    fn drift(&self, node: Node, p: &Point) -> f64 {
        (self.drift)(node.t, p)
    }
    fn drift_grad(&self, node: Node, p: &Point) -> Gradient {
        (self.drift_grad)(node.t, p)
    }
    fn diffusion(&self, channel: usize, node: Node, p: &Point) -> f64 {
        (self.diffusion[channel])(node.t, p)
    }
    fn diffusion_grad(&self, channel: usize, node: Node, p: &Point) -> Gradient {
        (self.diffusion_grad[channel])(node.t, p)
    }
    fn running_cost(&self, player: Player, node: Node, p: &Point) -> f64 {
        (self.running_cost[player.index()])(node.t, p)
    }
    fn running_cost_grad(&self, player: Player, node: Node, p: &Point) -> Gradient {
        (self.running_cost_grad[player.index()])(node.t, p)
    }
    fn terminal_cost(&self, player: Player, x: f64, x_mean: f64) -> f64 {
        (self.terminal_cost[player.index()])(x, x_mean)
    }
    fn terminal_cost_grad(&self, player: Player, x: f64, x_mean: f64) -> (f64, f64) {
        (self.terminal_cost_grad[player.index()])(x, x_mean)
    }
}

/// The linear-quadratic game with coefficients precomputed on a grid.
///
/// Evaluates the same formulas as [`lq_as_general`] without dynamic
/// dispatch; only valid on the grid it was built for.
#[derive(Debug, Clone)]
pub struct LqModel {
    horizon: f64,
    x0: f64,
    h: [f64; 2],
    hbar: [f64; 2],
    nodes: Vec<CoefficientsAt>,
}

impl LqModel {
    pub fn new(spec: &LqGameSpec, grid: &TimeGrid) -> Self {
        LqModel {
            horizon: spec.horizon,
            x0: spec.x0,
            h: spec.h(),
            hbar: spec.hbar(),
            nodes: grid.nodes().into_iter().map(|t| spec.at(t)).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    #[inline]
    pub fn coefficients(&self, node: usize) -> &CoefficientsAt {
        &self.nodes[node]
    }
}

impl GameModel for LqModel {
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn x0(&self) -> f64 {
        self.x0
    }
    fn domain(&self, _: Player) -> ControlDomain {
        ControlDomain::default()
    }
    #[inline]
    fn drift(&self, node: Node, p: &Point) -> f64 {
        let c = &self.nodes[node.index];
        c.a * p.x + c.abar * p.x_mean + c.b[0] * p.v[0] + c.b[1] * p.v[1]
    }
    #[inline]
    fn drift_grad(&self, node: Node, _: &Point) -> Gradient {
        let c = &self.nodes[node.index];
        Gradient {
            x: c.a,
            x_mean: c.abar,
            v: c.b,
        }
    }
    #[inline]
    fn diffusion(&self, channel: usize, node: Node, _: &Point) -> f64 {
        self.nodes[node.index].c[channel]
    }
    #[inline]
    fn diffusion_grad(&self, _: usize, _: Node, _: &Point) -> Gradient {
        Gradient::default()
    }
    #[inline]
    fn running_cost(&self, player: Player, node: Node, p: &Point) -> f64 {
        let c = &self.nodes[node.index];
        let i = player.index();
        0.5 * (c.g[i] * p.x * p.x + c.gbar[i] * p.x_mean * p.x_mean + c.m[i] * p.v[i] * p.v[i])
    }
    #[inline]
    fn running_cost_grad(&self, player: Player, node: Node, p: &Point) -> Gradient {
        let c = &self.nodes[node.index];
        let i = player.index();
        let mut v = [0.0; 2];
        v[i] = c.m[i] * p.v[i];
        Gradient {
            x: c.g[i] * p.x,
            x_mean: c.gbar[i] * p.x_mean,
            v,
        }
    }
    #[inline]
    fn terminal_cost(&self, player: Player, x: f64, x_mean: f64) -> f64 {
        let i = player.index();
        0.5 * (self.h[i] * x * x + self.hbar[i] * x_mean * x_mean)
    }
    #[inline]
    fn terminal_cost_grad(&self, player: Player, x: f64, x_mean: f64) -> (f64, f64) {
        let i = player.index();
        (self.h[i] * x, self.hbar[i] * x_mean)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn validation_is_deterministic_and_idempotent(
            b in 0.1f64..3.0, m1 in -0.5f64..2.0, g1 in -1.0f64..2.0, n in 1usize..40
        ) {
            let spec = LqGameSpec { b1: b.into(), m1: m1.into(), g1: g1.into(), ..LqGameSpec::reference() };
            let grid = TimeGrid::new(spec.horizon, n).unwrap();
            let first = validate_lq(&spec, &grid, 1e-10);
            let second = validate_lq(&spec, &grid, 1e-10);
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(first.passed(), first.violations.is_empty());
        }
    }
}
