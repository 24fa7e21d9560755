//! The `mfgame` command line: configuration loading, run directories,
//! manifests and the exit-code contract
//! (0 ok, 1 verification failure, 2 usage or configuration error, 3 solver fault).
//!
//! # Configuration
//!
//! A TOML file with three tables. Unknown keys are rejected.
//!
//! ```toml
//! [game]            # required
//! horizon = 1.0     # T
//! x0 = 1.0
//! a = 0.1           # a, abar, b1, b2, c1, c2, g1, g2, gbar1, gbar2, m1, m2:
//! abar = 0.05       #   a number, or an array of samples at uniformly spaced
//! b1 = 1.0          #   times 0, T/(n-1), ..., T (linear in between)
//! b2 = 1.0
//! c1 = 0.2
//! c2 = 0.2
//! g1 = 1.0
//! g2 = 0.5
//! gbar1 = 0.1
//! gbar2 = 0.2
//! m1 = 1.0
//! m2 = 1.0
//! h1 = 1.0          # terminal weights are numbers
//! h2 = 0.5
//! hbar1 = 0.0
//! hbar2 = 0.0
//!
//! [simulation]      # optional; defaults shown
//! steps = 512
//! paths = 10000
//! seed = 20261016
//! csv_paths = 100   # paths written to paths.csv
//!
//! [fbsde]           # optional; defaults shown
//! steps = 256
//! paths = 10000
//! max_picard = 30
//! picard_tol = 1e-4
//! damping = 0.5
//! ```
//!
//! Command-line `--steps`, `--paths` and `--seed` override the file.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{estimate_cost_streaming, exact_cost_moments};
use crate::error::Error;
use crate::fbsde::{check_against_riccati, solve_lq_fbsde, SolverConfig};
use crate::model::{default_a3_tolerance, validate_lq, LqGameSpec, TimeGrid};
use crate::nash_verify::{convexity_check, verify_nash};
use crate::riccati::{feedback_gains, solve_riccati};
use crate::sde::{equilibrium_policy, generate_noise, simulate_state, NoisePlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

pub const OUT_ENV: &str = "MFGAME_OUT";

/// Run settings that are not part of the game itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Paths written to `paths.csv`.
    pub csv_paths: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            steps: 512,
            paths: 10_000,
            seed: 20261016,
            csv_paths: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbsdeSettings {
    pub steps: usize,
    pub paths: usize,
    pub max_picard: usize,
    pub picard_tol: f64,
    pub damping: f64,
}

impl Default for FbsdeSettings {
    fn default() -> Self {
        let s = SolverConfig::default();
        FbsdeSettings {
            steps: 256,
            paths: 10_000,
            max_picard: s.max_picard,
            picard_tol: s.picard_tol,
            damping: s.damping,
        }
    }
}

/// Contents of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: LqGameSpec,
    #[serde(default)]
    pub simulation: SimulationSettings,
    #[serde(default)]
    pub fbsde: FbsdeSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mfgame",
    version,
    about = "Partial-information LQ mean-field game solver and Nash certifier"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Output root; each run writes to `<root>/<config-hash>-s<seed>`.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Overrides {
    /// Monte Carlo paths.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: Option<u64>,
    /// Time steps on [0, T].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    /// Master seed of the noise plan.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural assumptions of a configuration.
    Validate { config: PathBuf },
    /// Solve the Riccati system and write the tables and gains.
    Solve {
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        steps: Option<u64>,
    },
    /// Simulate the equilibrium and estimate both costs.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Certify the equilibrium with the deviation battery.
    VerifyNash {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Multiply the equilibrium gains before verifying (negative control).
        #[arg(long, default_value_t = 1.0)]
        gain_scale: f64,
    },
    /// Recompute the equilibrium from the adjoint equations and compare.
    FbsdeCheck {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Maximum Picard iterations.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        picard: Option<u64>,
    },
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

/// A fully resolved command: everything needed to reproduce its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: String,
    pub config_text: String,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_picard: Option<usize>,
}

impl Invocation {
    /// SHA-256 over the configuration text and every resolved setting.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        h.update([0]);
        h.update(
            format!(
                "{}|steps={}|paths={}|seed={}|gain_scale={:?}|max_picard={:?}",
                self.command, self.steps, self.paths, self.seed, self.gain_scale, self.max_picard
            )
            .as_bytes(),
        );
        hex::encode(h.finalize())
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-s{}", &self.hash()[..12], self.seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub paths: usize,
    pub version: String,
    pub modules: Vec<String>,
    pub timestamp: u64,
    pub command_line: Vec<String>,
    pub invocation: Invocation,
}

const MODULES: [&str; 7] = ["model", "riccati", "sde", "cost", "nash_verify", "fbsde", "cli"];

/// Failure of a command, already mapped to its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) => EXIT_USAGE,
            _ => EXIT_SOLVER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_SOLVER,
            message: format!("i/o error: {e}"),
        }
    }
}

fn read_config(path: &Path) -> Result<(String, RunConfig), Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let config = RunConfig::parse(&text).map_err(|e| usage(format!("cannot parse {}: {e}", path.display())))?;
    Ok((text, config))
}

fn resolve(command: &Command) -> Result<Option<Invocation>, Failure> {
    let pick = |o: Option<u64>, default: usize| o.map_or(default, |v| v as usize);
    let inv = match command {
        Command::Validate { .. } | Command::Replay { .. } => return Ok(None),
        Command::Solve { config, steps } => {
            let (text, cfg) = read_config(config)?;
            let sim = cfg.simulation;
            Invocation {
                command: "solve".into(),
                config_text: text,
                steps: pick(*steps, sim.steps),
                paths: 0,
                seed: sim.seed,
                gain_scale: None,
                max_picard: None,
            }
        }
        Command::Simulate { config, overrides } | Command::VerifyNash { config, overrides, .. } => {
            let (text, cfg) = read_config(config)?;
            let sim = cfg.simulation;
            let gain_scale = match command {
                Command::VerifyNash { gain_scale, .. } => Some(*gain_scale),
                _ => None,
            };
            Invocation {
                command: if gain_scale.is_some() {
                    "verify-nash"
                } else {
                    "simulate"
                }
                .into(),
                config_text: text,
                steps: pick(overrides.steps, sim.steps),
                paths: pick(overrides.paths, sim.paths),
                seed: overrides.seed.unwrap_or(sim.seed),
                gain_scale,
                max_picard: None,
            }
        }
        Command::FbsdeCheck {
            config,
            overrides,
            picard,
        } => {
            let (text, cfg) = read_config(config)?;
            let fb = cfg.fbsde;
            Invocation {
                command: "fbsde-check".into(),
                config_text: text,
                steps: pick(overrides.steps, fb.steps),
                paths: pick(overrides.paths, fb.paths),
                seed: overrides.seed.unwrap_or(cfg.simulation.seed),
                gain_scale: None,
                max_picard: Some(pick(*picard, fb.max_picard)),
            }
        }
    };
    Ok(Some(inv))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<fs::File>, Failure> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(io::Error::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn validate_or_fail(spec: &LqGameSpec, grid: &TimeGrid) -> Result<(), Failure> {
    let report = validate_lq(spec, grid, default_a3_tolerance(spec));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFICATION,
            message: report.to_string(),
        })
    }
}

fn cmd_validate(config: &Path) -> Result<i32, Failure> {
    let (_, cfg) = read_config(config)?;
    let grid = TimeGrid::new(cfg.game.horizon, cfg.simulation.steps).map_err(|e| usage(e.to_string()))?;
    let report = validate_lq(&cfg.game, &grid, default_a3_tolerance(&cfg.game));
    print!("{report}");
    Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Runs a resolved invocation, writing its outputs under `dir`.
fn execute(inv: &Invocation, dir: &Path) -> Result<i32, Failure> {
    let cfg = RunConfig::parse(&inv.config_text).map_err(usage)?;
    let spec = &cfg.game;
    let grid = TimeGrid::new(spec.horizon, inv.steps).map_err(|e| usage(e.to_string()))?;
    match inv.command.as_str() {
        "solve" => {
            validate_or_fail(spec, &grid)?;
            let tables = solve_riccati(spec, &grid)?;
            let gains = feedback_gains(spec, &tables);
            let mut w = create(dir, "riccati.csv")?;
            tables.write_csv(&mut w)?;
            w.flush()?;
            let mut w = create(dir, "gains.csv")?;
            gains.write_csv(&mut w)?;
            w.flush()?;
            println!("alpha(0) = {:?}", [tables.alpha[0][0], tables.alpha[1][0]]);
            println!("E[x](T)  = {}", tables.ex_mean[grid.n_steps()]);
            Ok(EXIT_OK)
        }
        "simulate" => {
            validate_or_fail(spec, &grid)?;
            let tables = solve_riccati(spec, &grid)?;
            let gains = feedback_gains(spec, &tables);
            let policy = equilibrium_policy(&gains);
            let plan = NoisePlan::new(inv.seed, inv.paths, grid)?;
            let shown = NoisePlan::new(inv.seed, inv.paths.min(cfg.simulation.csv_paths).max(1), grid)?;
            let paths = simulate_state(spec, &policy, &tables.ex_mean, &generate_noise(&shown))?;
            let mut w = create(dir, "paths.csv")?;
            paths.write_csv(&mut w, shown.n_paths)?;
            w.flush()?;
            let estimate = estimate_cost_streaming(spec, &policy, &tables.ex_mean, &plan)?;
            let exact = exact_cost_moments(spec, &gains, &tables.ex_mean)?;
            #[derive(Serialize)]
            struct Summary<'a> {
                j1: f64,
                j2: f64,
                se1: f64,
                se2: f64,
                n_paths: usize,
                n_steps: usize,
                seed: u64,
                quadrature: &'a str,
                j1_exact: f64,
                j2_exact: f64,
            }
            let summary = Summary {
                j1: estimate.j1,
                j2: estimate.j2,
                se1: estimate.se1,
                se2: estimate.se2,
                n_paths: estimate.n_paths,
                n_steps: estimate.n_steps,
                seed: inv.seed,
                quadrature: estimate.quadrature,
                j1_exact: exact[0],
                j2_exact: exact[1],
            };
            write_json(dir, "cost.json", &summary)?;
            println!(
                "J1 = {} ± {} (moment equations {})",
                estimate.j1, estimate.se1, exact[0]
            );
            println!(
                "J2 = {} ± {} (moment equations {})",
                estimate.j2, estimate.se2, exact[1]
            );
            Ok(EXIT_OK)
        }
        "verify-nash" => {
            let convexity = convexity_check(spec, &grid);
            if !convexity.passed() {
                print!("convexity: FAIL\n{convexity}");
                write_json(dir, "nash_report.json", &convexity)?;
                return Ok(EXIT_VERIFICATION);
            }
            validate_or_fail(spec, &grid)?;
            let plan = NoisePlan::new(inv.seed, inv.paths, grid)?;
            let report = verify_nash(spec, &plan, inv.gain_scale.unwrap_or(1.0))?;
            write_json(dir, "nash_report.json", &report)?;
            let mut w = create(dir, "nash_deviations.csv")?;
            report.write_csv(&mut w)?;
            w.flush()?;
            print!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFICATION })
        }
        "fbsde-check" => {
            validate_or_fail(spec, &grid)?;
            let fb = cfg.fbsde;
            let solver = SolverConfig {
                max_picard: inv.max_picard.unwrap_or(fb.max_picard),
                picard_tol: fb.picard_tol,
                damping: fb.damping,
            };
            let plan = NoisePlan::new(inv.seed, inv.paths, grid)?;
            let sol = solve_lq_fbsde(spec, &solver, &plan)?;
            let tables = solve_riccati(spec, &grid)?;
            let residual = check_against_riccati(spec, &sol, &tables)?;
            #[derive(Serialize)]
            struct Report<'a> {
                solver: SolverConfig,
                iterations: &'a [crate::fbsde::IterationRecord],
                residual: &'a crate::fbsde::FbsdeResidual,
                passed: bool,
            }
            let passed = residual.passed();
            write_json(
                dir,
                "fbsde_report.json",
                &Report {
                    solver,
                    iterations: &sol.log,
                    residual: &residual,
                    passed,
                },
            )?;
            let mut w = create(dir, "fbsde_curves.csv")?;
            sol.write_csv(&mut w)?;
            w.flush()?;
            println!("picard iterations: {}", sol.iterations());
            println!("q_hat relative RMSE: {:?}", residual.q_hat_rel_rmse);
            println!("mean adjoint relative error: {:?}", residual.mean_rel_max);
            println!("terminal R^2: {:?}", residual.terminal_r2);
            println!("fbsde check: {}", if passed { "PASS" } else { "FAIL" });
            Ok(if passed { EXIT_OK } else { EXIT_VERIFICATION })
        }
        other => Err(usage(format!("unknown command `{other}` in manifest"))),
    }
}

fn run_invocation(inv: &Invocation, root: &Path, command_line: Vec<String>) -> Result<i32, Failure> {
    let dir = inv.run_dir(root);
    fs::create_dir_all(&dir)?;
    let manifest = RunManifest {
        config_hash: inv.hash(),
        seed: inv.seed,
        steps: inv.steps,
        paths: inv.paths,
        version: env!("CARGO_PKG_VERSION").into(),
        modules: MODULES
            .iter()
            .map(|m| format!("{m} {}", env!("CARGO_PKG_VERSION")))
            .collect(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        command_line,
        invocation: inv.clone(),
    };
    write_json(&dir, "manifest.json", &manifest)?;
    let code = execute(inv, &dir)?;
    println!("outputs: {}", dir.display());
    Ok(code)
}

fn dispatch(cli: &Cli, command_line: Vec<String>) -> Result<i32, Failure> {
    match &cli.command {
        Command::Validate { config } => cmd_validate(config),
        Command::Replay { manifest } => {
            let text =
                fs::read_to_string(manifest).map_err(|e| usage(format!("cannot read {}: {e}", manifest.display())))?;
            let recorded: RunManifest =
                serde_json::from_str(&text).map_err(|e| usage(format!("cannot parse manifest: {e}")))?;
            run_invocation(&recorded.invocation, &cli.out, command_line)
        }
        command => {
            let inv = resolve(command)?.expect("resolved above");
            run_invocation(&inv, &cli.out, command_line)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(|| dispatch(&cli, command_line)),
            Err(e) => Err(Failure {
                code: EXIT_SOLVER,
                message: format!("cannot start thread pool: {e}"),
            }),
        },
        None => dispatch(&cli, command_line),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
