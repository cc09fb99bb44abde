use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pstokes_cli::config::ExperimentConfig;
use pstokes_cli::harness::{pool_with, run_extrapolation};

const SOLVE: &str = r#"
[experiment]
kind = "single-run"
samples = 2
seed = 5

[physics]
p = 3.0

[noise]
modes = 2
rule = "linear"

[grid]
levels = [[2, 8]]

[output]
vtk_steps = [0, 8]
checkpoint = true
"#;

const CONVERGENCE: &str = r#"
[experiment]
kind = "convergence"
samples = 2
seed = 9

[physics]
p = 2.0

[noise]
modes = 1

[grid]
levels = [[8, 2], [8, 8], [2, 26], [4, 26], [8, 26]]

[reference]
cells = 8
steps = 26
fine_per_step = 2
"#;

const EXTRAPOLATION: &str = r#"
[experiment]
kind = "extrapolation"
samples = 1000
seed = 1

[physics]
p = 3.0

[noise]
modes = 2
rule = "linear"

[grid]
levels = [[2, 8]]

[extrapolation]
calibration_samples = 200
"#;

fn pstokes(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pstokes"))
        .args(args)
        .current_dir(cwd)
        .env("PSTOKES_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = pstokes(&["convergence", "--config", "nowhere/p2.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/p2.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pstokes(&["solve", "--colour", "red"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn help_documents_subcommands_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = pstokes(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for s in [
        "sample-noise",
        "solve",
        "stability",
        "convergence",
        "extrapolate",
        "export-vtk",
        "PSTOKES_WORKERS",
        "--seed",
        "--output-dir",
    ] {
        assert!(text.contains(s), "help lacks {s}");
    }
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", &CONVERGENCE.replace("steps = 26", "steps = 27"));
    let o = pstokes(&["convergence", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("odd integer"));
}

#[test]
fn solver_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SOLVE}\n[solver]\ntol = 1e-300\nmax_iter = 1\n");
    let cfg = write_config(dir.path(), "hard.cfg", &text);
    let o = pstokes(&["solve", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn solve_writes_reports_checkpoint_and_vtk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.cfg", SOLVE);
    let o = pstokes(
        &["solve", "--config", cfg.to_str().unwrap(), "--output-dir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "results.json",
        "timing.json",
        "levels.csv",
        "checkpoint_m2_N8.bin",
        "velocity_m2_N8_00000.vtk",
        "velocity_m2_N8_00008.vtk",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    let level = &json["outcome"]["levels"][0];
    assert!(level["energy_residual_max"].as_f64().unwrap() < 1e-9);
    assert!(level["divergence_max"].as_f64().unwrap() < 1e-8);

    let o = pstokes(
        &[
            "export-vtk",
            "--checkpoint",
            "out/checkpoint_m2_N8.bin",
            "--steps",
            "3,4",
            "--output-dir",
            "vtk",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("vtk/velocity_m2_N8_00003.vtk").is_file());
    let o = pstokes(
        &["export-vtk", "--checkpoint", "out/checkpoint_m2_N8.bin", "--steps", "9"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn identical_seed_gives_identical_results_and_override_changes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.cfg", SOLVE);
    let c = cfg.to_str().unwrap();
    for (out, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let o = pstokes(
            &["solve", "--config", c, "--output-dir", out, "--seed", seed],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("results.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn convergence_smoke_writes_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "conv.cfg", CONVERGENCE);
    let o = pstokes(
        &["convergence", "--config", cfg.to_str().unwrap(), "--output-dir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rates = fs::read_to_string(dir.path().join("out/rates.csv")).unwrap();
    let header = rates.lines().next().unwrap();
    assert!(header.starts_with("quantity,axis,p,kappa,seed,slope"));
    assert!(rates.contains("natural_err,tau") && rates.contains("vgrad_err,h"));
    let levels = fs::read_to_string(dir.path().join("out/levels.csv")).unwrap();
    assert!(levels.lines().next().unwrap().starts_with("h,tau,p,kappa,seed"));
    assert!(stdout(&o).contains("natural_err vs tau"));
}

#[test]
fn sample_noise_checks_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let o = pstokes(
        &[
            "sample-noise",
            "--N",
            "8",
            "--samples",
            "4000",
            "--check-covariance",
            "--output-dir",
            "n",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max covariance deviation"));
    assert!(dir.path().join("n/covariance.json").is_file());

    let o = pstokes(
        &[
            "sample-noise",
            "--N",
            "4",
            "--samples",
            "3",
            "--fine-per-step",
            "2",
            "--output-dir",
            "m",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("m/increments.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(dir.path().join("m/path_0.bin").is_file());
}

#[test]
fn zero_noise_gives_unit_margins() {
    let cfg = ExperimentConfig::parse(&EXTRAPOLATION.replace("rule = \"linear\"", "amplitude = 0.0")).unwrap();
    let out = pool_with(1).unwrap().install(|| run_extrapolation(&cfg)).unwrap();
    assert_eq!(out.report.domination_margin, 1.0);
    assert_eq!(out.report.corollary_margin, 1.0);
}

#[test]
fn doubling_samples_shrinks_standard_errors_by_root_two() {
    let pool = pool_with(1).unwrap();
    let base = ExperimentConfig::parse(EXTRAPOLATION).unwrap();
    let mut double = base.clone();
    double.experiment.samples *= 2;
    let a = pool.install(|| run_extrapolation(&base)).unwrap().report;
    let b = pool.install(|| run_extrapolation(&double)).unwrap().report;
    for (sa, sb) in [
        (a.domination_margin_se, b.domination_margin_se),
        (a.corollary_margin_se, b.corollary_margin_se),
    ] {
        let ratio = sa / sb;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "se ratio {ratio}");
    }
}
