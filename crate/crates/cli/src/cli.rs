use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pstokes::fem::Discretization;
use pstokes::noise::{sample_rng, ExactSampler, TimeGrid, WienerPath};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::harness::{self, Outcome, RunReport};
use crate::{io, HarnessError};

#[derive(Debug, Parser)]
#[command(
    name = "pstokes",
    version,
    about = "Averaged-increment schemes for the stochastic p-Stokes system",
    after_help = "Environment:\n  PSTOKES_WORKERS  number of worker threads (default: available parallelism)\n\nExit status: 0 success, 1 usage or validation error, 2 solver failure."
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the base seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory of the configuration.
    #[arg(long = "output-dir", global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw averaged Wiener increments and optionally check their covariance.
    SampleNoise(NoiseArgs),
    /// Run trajectories on every grid level and check the scheme identities.
    Solve,
    /// Stability statistics over a refinement ladder.
    Stability,
    /// Strong errors against a path-coupled reference and fitted rates.
    Convergence,
    /// Domination and extrapolation check on a small configuration.
    Extrapolate,
    /// Write VTK files from a trajectory checkpoint.
    ExportVtk(VtkArgs),
}

#[derive(Debug, Args)]
struct NoiseArgs {
    /// Number of time steps.
    #[arg(long = "N", default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    modes: usize,
    #[arg(long = "t-final", default_value_t = 1.0)]
    t_final: f64,
    /// Sample through a Brownian path with this many cells per step instead of exactly.
    #[arg(long = "fine-per-step")]
    fine_per_step: Option<usize>,
    /// Compare the empirical covariance with the closed form.
    #[arg(long = "check-covariance")]
    check_covariance: bool,
}

#[derive(Debug, Args)]
struct VtkArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Comma-separated step indices; all steps when absent.
    #[arg(long, value_delimiter = ',')]
    steps: Vec<usize>,
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let kind = match &cli.command {
        Command::SampleNoise(a) => return sample_noise(a, cli.seed.unwrap_or(0), &out_dir(&cli, None)),
        Command::ExportVtk(a) => return export_vtk(a, &out_dir(&cli, None)),
        Command::Solve => ExperimentKind::SingleRun,
        Command::Stability => ExperimentKind::Stability,
        Command::Convergence => ExperimentKind::Convergence,
        Command::Extrapolate => ExperimentKind::Extrapolation,
    };
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| HarnessError::Config("this command needs --config <PATH>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.experiment.kind = kind;
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    cfg.validate()?;
    let dir = out_dir(&cli, Some(&cfg));
    let pool = harness::worker_pool()?;
    let report = harness::run(&cfg, &pool)?;
    let mut written = io::write_report(&dir, &report, pool.current_num_threads())?;
    if kind == ExperimentKind::SingleRun {
        written.extend(single_run_artifacts(&cfg, &report, &dir)?);
    }
    print_summary(&report);
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.output_dir
        .clone()
        .or_else(|| cfg.map(ExperimentConfig::output_dir))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn single_run_artifacts(cfg: &ExperimentConfig, report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    for traj in &report.trajectories {
        let (m, n) = (traj.cells, traj.n_steps());
        if cfg.output.checkpoint {
            let p = dir.join(format!("checkpoint_m{m}_N{n}.bin"));
            io::write_checkpoint(&p, traj)?;
            written.push(p);
        }
        let steps: Vec<usize> = cfg.output.vtk_steps.iter().copied().filter(|&s| s <= n).collect();
        if steps.is_empty() && !cfg.output.export_matrices {
            continue;
        }
        let disc = Discretization::new(m)?;
        for s in steps {
            let p = dir.join(format!("velocity_m{m}_N{n}_{s:05}.vtk"));
            io::write_vtk(&p, &disc, &traj.states[s], traj.grid.t(s))?;
            written.push(p);
        }
        if cfg.output.export_matrices {
            for (name, a) in [
                ("mass", &disc.mass),
                ("div", &disc.div),
                ("reduced_mass", &disc.reduced_mass),
            ] {
                let p = dir.join(format!("{name}_m{m}.mtx"));
                io::write_matrix_market(&p, a)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

fn sample_noise(a: &NoiseArgs, seed: u64, dir: &Path) -> Result<(), HarnessError> {
    if a.check_covariance {
        let pool = harness::worker_pool()?;
        let c = pool.install(|| harness::noise_covariance(a.t_final, a.n, a.samples, seed, a.fine_per_step))?;
        println!("max covariance deviation: {:.6e}", c.max_deviation);
        println!(
            "band: max {:.3} standard errors, mean z² {:.3}, relative Frobenius error {:.3e}",
            c.max_z_band, c.band_mean_z_sq, c.relative_band_error
        );
        println!("off band: max {:.3} standard errors", c.max_z_off_band);
        println!("within 3 standard errors on the band: {}", c.max_z_band <= 3.0);
        let p = dir.join("covariance.json");
        io::write_json(&p, &c)?;
        println!("wrote {}", p.display());
        return Ok(());
    }
    let grid = TimeGrid::new(a.t_final, a.n)?;
    let sampler = ExactSampler::new(grid);
    let p = dir.join("increments.csv");
    let file = std::fs::File::create(ensure_dir(dir, &p)?).map_err(|source| HarnessError::Io {
        path: p.clone(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["sample", "mode", "step", "increment"])?;
    for i in 0..a.samples {
        let mut rng = sample_rng(seed, i as u64);
        let inc = match a.fine_per_step {
            None => sampler.sample(a.modes, &mut rng),
            Some(f) => {
                let path = WienerPath::sample(a.t_final, grid.tau() / f as f64, a.modes, &mut rng)?;
                if i == 0 {
                    let rec = dir.join("path_0.bin");
                    io::write_path(&rec, &path)?;
                    println!("wrote {}", rec.display());
                }
                pstokes::noise::sample_coupled(&grid, &path)?
            }
        };
        for k in 0..a.modes {
            for (n, v) in inc.mode(k).iter().enumerate() {
                w.write_record([i.to_string(), k.to_string(), (n + 1).to_string(), format!("{v:e}")])?;
            }
        }
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: p.clone(),
        source,
    })?;
    println!("wrote {}", p.display());
    Ok(())
}

fn ensure_dir<'a>(dir: &Path, p: &'a Path) -> Result<&'a Path, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(p)
}

fn export_vtk(a: &VtkArgs, dir: &Path) -> Result<(), HarnessError> {
    let traj = io::read_checkpoint(&a.checkpoint)?;
    let disc = Discretization::new(traj.cells)?;
    let n = traj.n_steps();
    let steps: Vec<usize> = if a.steps.is_empty() {
        (0..=n).collect()
    } else {
        a.steps.clone()
    };
    if let Some(bad) = steps.iter().find(|&&s| s > n) {
        return Err(HarnessError::Config(format!("step {bad} outside 0..={n}")));
    }
    for s in steps {
        if traj.states[s].len() != disc.dim_div_free() {
            return Err(HarnessError::Config(format!(
                "{}: state size does not match the mesh",
                a.checkpoint.display()
            )));
        }
        let p = dir.join(format!("velocity_m{}_N{n}_{s:05}.vtk", traj.cells));
        io::write_vtk(&p, &disc, &traj.states[s], traj.grid.t(s))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn print_summary(report: &RunReport) {
    match &report.outcome {
        Outcome::SingleRun(s) => {
            for l in &s.levels {
                println!(
                    "m={} N={}: energy identity residual {:.3e}, divergence {:.3e}, multiplier agreement {:.3e}, decomposition {:.3e}",
                    l.level.cells,
                    l.level.steps,
                    l.energy_residual_max,
                    l.divergence_max,
                    l.pressure_worst.multiplier_agreement,
                    l.pressure_worst.decomposition_residual
                );
            }
        }
        Outcome::Stability(s) => {
            for l in &s.levels {
                let stats: Vec<String> = l.stats.scalars().iter().map(|(k, v)| format!("{k}={v:.4e}")).collect();
                println!("m={} N={}: {}", l.level.cells, l.level.steps, stats.join(" "));
            }
            for f in &s.flags {
                println!(
                    "growth: {} x{:.3} from (m={}, N={}) to (m={}, N={})",
                    f.statistic, f.ratio, f.from.cells, f.from.steps, f.to.cells, f.to.steps
                );
            }
            println!("bounded: {}, besov order: {}", s.bounded, s.besov_order);
        }
        Outcome::Convergence(c) => {
            for l in &c.levels {
                println!(
                    "m={} N={}: natural {:.4e} ± {:.1e}, vgrad {:.4e} ± {:.1e}",
                    l.level.cells,
                    l.level.steps,
                    l.stats.natural_err.mean,
                    l.stats.natural_err.se,
                    l.stats.vgrad_err.mean,
                    l.stats.vgrad_err.se
                );
            }
            for r in &c.rates {
                let window = r.window.map_or("-".to_string(), |(a, b)| format!("[{a}, {b}]"));
                let verdict = r.pass.map_or("report", |p| if p { "pass" } else { "fail" });
                println!(
                    "{} vs {}: slope {:.3} ± {:.3} (residual {:.2e}, {} points) window {window}: {verdict}",
                    r.quantity, r.axis, r.fit.slope, r.fit.slope_se, r.fit.residual, r.fit.points
                );
            }
        }
        Outcome::Extrapolation(e) => {
            let r = &e.report;
            println!(
                "calibrated C {:.4}, measured C {:.4} ± {:.2e} ({})",
                r.calibrated_c, r.measured_c, r.measured_c_se, r.worst_rule
            );
            println!(
                "domination margin {:.4} ± {:.2e}",
                r.domination_margin, r.domination_margin_se
            );
            println!(
                "corollary margin {:.4} ± {:.2e}",
                r.corollary_margin, r.corollary_margin_se
            );
            println!("passes at {} sigma: {}", e.sigmas, e.passes);
        }
    }
}
