use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfgame::cli::RunConfig;
use mfgame::LqGameSpec;

const S1: &str = include_str!("../../../configs/s1.toml");

fn mfgame(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgame"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn config_for(game: LqGameSpec) -> String {
    let mut cfg = RunConfig::parse(S1).unwrap();
    cfg.game = game;
    toml::to_string(&cfg).unwrap()
}

/// The single run directory under `root`.
fn run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    assert_eq!(code(&mfgame(tmp.path(), &["validate", &good])), 0);

    let bad = write_config(tmp.path(), "a3.toml", &S1.replace("b1 = 1.0", "b1 = 2.0"));
    let o = mfgame(tmp.path(), &["validate", &bad]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("A3"), "{}", stdout(&o));

    let malformed = write_config(tmp.path(), "bad.toml", "[game\nhorizon = ");
    assert_eq!(code(&mfgame(tmp.path(), &["validate", &malformed])), 2);
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&mfgame(tmp.path(), &["validate", missing.to_str().unwrap()])), 2);
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    assert_eq!(code(&mfgame(tmp.path(), &["simulate", &good, "--paths", "0"])), 2);
    assert_eq!(code(&mfgame(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&mfgame(tmp.path(), &["--help"])), 0);
}

#[test]
fn solve_writes_tables_with_one_row_per_node() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    let out = tmp.path().join("runs");
    assert_eq!(code(&mfgame(&out, &["solve", &good, "--steps", "64"])), 0);
    let dir = run_dir(&out);
    let riccati = fs::read_to_string(dir.join("riccati.csv")).unwrap();
    assert_eq!(riccati.lines().count(), 1 + 65);
    assert!(riccati.starts_with("t,alpha1,alpha2,tau1,tau2,delta1,delta2,ex_mean"));
    assert_eq!(fs::read_to_string(dir.join("gains.csv")).unwrap().lines().count(), 66);
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn zero_cost_game_has_zero_gains() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "zero.toml", &config_for(LqGameSpec::zero_cost()));
    let out = tmp.path().join("runs");
    assert_eq!(code(&mfgame(&out, &["solve", &cfg, "--steps", "32"])), 0);
    let gains = fs::read_to_string(run_dir(&out).join("gains.csv")).unwrap();
    for line in gains.lines().skip(1) {
        for field in line.split(',').skip(1) {
            assert_eq!(field.parse::<f64>().unwrap(), 0.0, "{line}");
        }
    }
}

#[test]
fn simulate_summary_and_rerun_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    let args = ["simulate", &good, "--paths", "100", "--steps", "64", "--seed", "9"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&mfgame(&a, &args)), 0);
    assert_eq!(code(&mfgame(&b, &args)), 0);
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_eq!(da.file_name(), db.file_name());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(da.join("cost.json")).unwrap()).unwrap();
    for key in ["j1", "j2", "se1", "se2", "n_paths", "n_steps", "seed"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert_eq!(summary["n_paths"], 100);
    for file in ["cost.json", "paths.csv"] {
        assert_eq!(
            fs::read(da.join(file)).unwrap(),
            fs::read(db.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    let first = tmp.path().join("first");
    assert_eq!(
        code(&mfgame(
            &first,
            &["simulate", &good, "--paths", "50", "--steps", "32", "--seed", "4"]
        )),
        0
    );
    let original = run_dir(&first);
    // the config file may change afterwards; the manifest carries its text
    fs::write(&good, "garbage").unwrap();
    let again = tmp.path().join("again");
    let manifest = original.join("manifest.json");
    let o = mfgame(&again, &["replay", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let replayed = run_dir(&again);
    assert_eq!(original.file_name(), replayed.file_name());
    for file in ["cost.json", "paths.csv"] {
        assert_eq!(
            fs::read(original.join(file)).unwrap(),
            fs::read(replayed.join(file)).unwrap()
        );
    }
}

#[test]
fn verify_nash_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    let small = ["--paths", "1000", "--steps", "64"];
    let o = mfgame(tmp.path(), &[&["verify-nash", good.as_str()][..], &small].concat());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("nash verification: PASS"));

    let o = mfgame(
        tmp.path(),
        &[&["verify-nash", good.as_str(), "--gain-scale", "1.5"][..], &small].concat(),
    );
    assert_eq!(code(&o), 1, "{}", stdout(&o));

    let nonconvex = write_config(tmp.path(), "g.toml", &S1.replace("g1 = 1.0", "g1 = -1.0"));
    let o = mfgame(tmp.path(), &[&["verify-nash", nonconvex.as_str()][..], &small].concat());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("convexity: FAIL"));
}

#[test]
fn fbsde_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_config(tmp.path(), "s1.toml", S1);
    let o = mfgame(
        tmp.path(),
        &[
            "fbsde-check",
            &good,
            "--paths",
            "1000",
            "--steps",
            "32",
            "--picard",
            "1",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let zero = write_config(tmp.path(), "zero.toml", &config_for(LqGameSpec::zero_cost()));
    let out = tmp.path().join("zero");
    let o = mfgame(&out, &["fbsde-check", &zero, "--paths", "200", "--steps", "32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&out).join("fbsde_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["residual"]["q_hat_rel_rmse"][0], 0.0);
    assert_eq!(report["residual"]["mean_rel_max"][1], 0.0);
}
