use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;

use pstokes::noise::sample_rng;
use pstokes::tensor::{ddot, frob, Mat2, PowerLaw};
use pstokes_cli::config::{ExperimentConfig, ExperimentKind};
use pstokes_cli::harness::{self, noise_covariance};
use pstokes_cli::io::write_report;

const SEED: u64 = 20240601;

fn preset(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn say(line: &str) {
    // bypasses the test harness capture so the verdicts always show
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Verdicts(Vec<(usize, bool)>);

impl Verdicts {
    fn record(&mut self, id: usize, name: &str, ok: bool, elapsed: Duration, budget: Duration, detail: String) {
        let in_time = elapsed <= budget;
        let pass = ok && in_time;
        let verdict = if pass { "PASS" } else { "FAIL" };
        let timing = format!("{:.1}s of {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64());
        let late = if in_time { "" } else { " (over budget)" };
        say(&format!("criterion {id} {name}: {verdict} [{timing}{late}] {detail}"));
        self.0.push((id, pass));
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn increment_covariance(v: &mut Verdicts) {
    let start = Instant::now();
    let c = noise_covariance(1.0, 64, 100_000, SEED, None).unwrap();
    v.record(
        1,
        "increment covariance",
        c.max_z_band <= 3.0,
        start.elapsed(),
        Duration::from_secs(10),
        format!(
            "max |z| on the band {:.3} (off band {:.3}), mean z² on the band {:.3}, max deviation {:.3e}",
            c.max_z_band, c.max_z_off_band, c.band_mean_z_sq, c.max_deviation
        ),
    );
}

fn coupled_sampling(v: &mut Verdicts) {
    let start = Instant::now();
    let c = noise_covariance(1.0, 64, 100_000, SEED, Some(64)).unwrap();
    v.record(
        2,
        "coupled sampling",
        c.relative_band_error <= 0.02,
        start.elapsed(),
        Duration::from_secs(30),
        format!(
            "relative band error {:.3e}, max |z| on the band {:.3}",
            c.relative_band_error, c.max_z_band
        ),
    );
}

fn random_mat<R: Rng>(rng: &mut R) -> Mat2 {
    Mat2::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    )
}

fn tensor_suite(v: &mut Verdicts) {
    let start = Instant::now();
    let triples = 100_000;
    let (mut ratio_lo, mut ratio_hi) = (f64::INFINITY, 0.0f64);
    let (mut bad_ratio, mut bad_young, mut worst_fd) = (0usize, 0usize, 0.0f64);
    for (j, p) in [1.5, 2.0, 3.0].into_iter().enumerate() {
        let mut rng = sample_rng(SEED, j as u64);
        for _ in 0..triples {
            let (a, b) = (random_mat(&mut rng), random_mat(&mut rng));
            let kappa = if rng.random_bool(0.5) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            };
            let law = PowerLaw::new(p, kappa).unwrap();

            let lhs = ddot(&(law.s(&a) - law.s(&b)), &(a - b));
            let dv = law.v(&a) - law.v(&b);
            let vv = ddot(&dv, &dv);
            let slack = 1e-12 * (1.0 + lhs.abs() + vv);
            if vv > 0.0 {
                ratio_lo = ratio_lo.min(lhs / vv);
                ratio_hi = ratio_hi.max(lhs / vv);
            }
            if law.c_lower() * vv > lhs + slack || lhs > law.c_upper() * vv + slack {
                bad_ratio += 1;
            }

            let scale = 1.0 + frob(&a).powf(p) + frob(&b).powf(p);
            if law.young_gap(&a, &b) < -1e-12 * scale {
                bad_young += 1;
            }

            let h = 1e-5;
            let fd = (law.s(&(a + b * h)) - law.s(&(a - b * h))) / (2.0 * h);
            let an = law.ds_apply(&a, &b, 1e-8);
            worst_fd = worst_fd.max(frob(&(fd - an)) / frob(&an));
        }
    }
    v.record(
        3,
        "tensor algebra",
        bad_ratio == 0 && bad_young == 0 && worst_fd <= 1e-6,
        start.elapsed(),
        Duration::from_secs(10),
        format!(
            "ratio range [{ratio_lo:.4}, {ratio_hi:.4}], {bad_ratio} ratio and {bad_young} Young violations, worst Jacobian error {worst_fd:.2e}"
        ),
    );
}

const SINGLE: &str = r#"
[experiment]
kind = "single-run"
samples = 32
seed = 20240601

[physics]
p = 2.0

[noise]
modes = 2
rule = "linear"

[grid]
levels = [[4, 64]]
"#;

fn scheme_identities(v: &mut Verdicts, pool: &rayon::ThreadPool) {
    let start = Instant::now();
    let (mut ok, mut detail) = (true, Vec::new());
    for p in [1.5, 2.0, 3.0] {
        let mut cfg = ExperimentConfig::parse(SINGLE).unwrap();
        cfg.physics.p = p;
        let tol = cfg.solver.tol;
        let (r, _) = pool.install(|| harness::run_single(&cfg)).unwrap();
        let l = &r.levels[0];
        ok &= l.energy_residual_max <= 10.0 * tol && l.divergence_max <= 1e-8;
        detail.push(format!(
            "p={p}: energy {:.2e}, divergence {:.2e}",
            l.energy_residual_max, l.divergence_max
        ));
    }
    v.record(
        4,
        "scheme identities",
        ok,
        start.elapsed(),
        minutes(5),
        detail.join("; "),
    );
}

fn pressure_identities(v: &mut Verdicts, pool: &rayon::ThreadPool) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::parse(SINGLE).unwrap();
    cfg.physics.p = 3.0;
    cfg.experiment.samples = 4;
    cfg.grid.levels = vec![(4, 16)];
    let (r, _) = pool.install(|| harness::run_single(&cfg)).unwrap();
    let w = &r.levels[0].pressure_worst;
    v.record(
        5,
        "pressure identities",
        w.init_identity <= 1e-10 && w.decomposition_residual <= 1e-10 && w.multiplier_agreement <= 1e-8,
        start.elapsed(),
        minutes(1),
        format!(
            "initial pressure {:.2e}, decomposition {:.2e}, multiplier agreement {:.2e}",
            w.init_identity, w.decomposition_residual, w.multiplier_agreement
        ),
    );
}

fn uniform_stability(v: &mut Verdicts, pool: &rayon::ThreadPool) {
    let start = Instant::now();
    let (mut ok, mut detail) = (true, Vec::new());
    for name in ["stability_p15.cfg", "stability_p3.cfg"] {
        let cfg = preset(name);
        let r = pool.install(|| harness::run_stability(&cfg)).unwrap();
        ok &= r.bounded && r.besov_order;
        let flags: Vec<String> = r
            .flags
            .iter()
            .map(|f| format!("{} x{:.2}", f.statistic, f.ratio))
            .collect();
        detail.push(format!(
            "p={}: bounded {} order {}{}",
            cfg.physics.p,
            r.bounded,
            r.besov_order,
            if flags.is_empty() {
                String::new()
            } else {
                format!(" ({})", flags.join(", "))
            }
        ));
    }
    v.record(
        6,
        "uniform stability",
        ok,
        start.elapsed(),
        minutes(30),
        detail.join("; "),
    );
}

fn describe_rates(r: &harness::ConvergenceReport) -> String {
    r.rates
        .iter()
        .map(|c| format!("{}/{} {:.3}", c.quantity, c.axis, c.fit.slope))
        .collect::<Vec<_>>()
        .join(", ")
}

fn convergence_rates(v: &mut Verdicts, pool: &rayon::ThreadPool) {
    let start = Instant::now();
    let cfg = preset("p2_additive.cfg");
    let r = pool.install(|| harness::run_convergence(&cfg)).unwrap();
    let elapsed = start.elapsed();
    v.record(
        7,
        "convergence rates",
        r.passes == Some(true),
        elapsed,
        minutes(60),
        format!("p=2: {}", describe_rates(&r)),
    );
    for name in ["p15_additive.cfg", "p3_additive.cfg"] {
        let start = Instant::now();
        let cfg = preset(name);
        let r = pool.install(|| harness::run_convergence(&cfg)).unwrap();
        say(&format!(
            "criterion 7 report only, p={}: {} [{:.1}s]",
            cfg.physics.p,
            describe_rates(&r),
            start.elapsed().as_secs_f64()
        ));
    }
}

fn extrapolation(v: &mut Verdicts, pool: &rayon::ThreadPool) {
    let start = Instant::now();
    let cfg = preset("extrapolation_small.cfg");
    let r = pool.install(|| harness::run_extrapolation(&cfg)).unwrap();
    let e = &r.report;
    v.record(
        8,
        "extrapolation",
        r.passes,
        start.elapsed(),
        minutes(10),
        format!(
            "calibrated C {:.4}, measured C {:.4} ± {:.1e}, domination margin {:.4} ± {:.1e}, corollary margin {:.4} ± {:.1e}",
            e.calibrated_c, e.measured_c, e.measured_c_se, e.domination_margin, e.domination_margin_se, e.corollary_margin, e.corollary_margin_se
        ),
    );
}

fn determinism(v: &mut Verdicts) {
    let start = Instant::now();
    let mut cfg = preset("p2_additive.cfg");
    cfg.experiment.kind = ExperimentKind::Convergence;
    cfg.experiment.output_dir = None;
    let smallest = *cfg.grid.levels.iter().min_by_key(|l| l.0 * l.0 * l.1).unwrap();
    cfg.grid.levels = vec![smallest];
    cfg.experiment.samples = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (run, workers) in [1usize, 2].into_iter().enumerate() {
        let pool = harness::pool_with(workers).unwrap();
        let report = harness::run(&cfg, &pool).unwrap();
        let out = dir.path().join(format!("run{run}"));
        write_report(&out, &report, workers).unwrap();
        bytes.push(std::fs::read(out.join("results.json")).unwrap());
    }
    let same = bytes[0] == bytes[1];
    v.record(
        9,
        "determinism",
        same,
        start.elapsed(),
        minutes(5),
        format!(
            "level m={} N={}, results.json identical across 1 and 2 workers: {same}",
            smallest.0, smallest.1
        ),
    );
}

#[test]
fn acceptance() {
    let pool = harness::worker_pool().unwrap();
    let mut v = Verdicts(Vec::new());
    increment_covariance(&mut v);
    coupled_sampling(&mut v);
    tensor_suite(&mut v);
    scheme_identities(&mut v, &pool);
    pressure_identities(&mut v, &pool);
    uniform_stability(&mut v, &pool);
    convergence_rates(&mut v, &pool);
    extrapolation(&mut v, &pool);
    determinism(&mut v);
    let failed: Vec<usize> = v.0.iter().filter(|(_, ok)| !ok).map(|(id, _)| *id).collect();
    say(&format!(
        "acceptance: {} of {} criteria pass",
        v.0.len() - failed.len(),
        v.0.len()
    ));
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
