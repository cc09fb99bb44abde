use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use pstokes::diagnostics::{
    error_stats, extrapolation_check, extrapolation_sample, fit_rate, sample_errors, sample_stability, stability_stats,
    ErrorContext, ErrorLevel, ErrorStats, ExtrapolationReport, ExtrapolationSample, RateFit, StabilityStats, Transfer,
};
use pstokes::fem::Discretization;
use pstokes::noise::{sample_coupled, sample_rng, ExactSampler, Increments, NoiseRule, TimeGrid, WienerPath};
use pstokes::pressure::{perp_norm, reconstruct, reconstruction_residual};
use pstokes::stepper::{Recording, StepReport, Stepper, Trajectory};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::HarnessError;

type Result<T> = std::result::Result<T, HarnessError>;

pub const WORKERS_ENV: &str = "PSTOKES_WORKERS";

/// Worker pool sized by `PSTOKES_WORKERS`, falling back to the available parallelism.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    pool_with(n)
}

pub fn pool_with(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot build worker pool: {e}")))
}

#[derive(Clone, Copy, Debug)]
enum Stream {
    Single = 1,
    Stability = 2,
    Convergence = 3,
    Extrapolation = 4,
    Calibration = 5,
    Noise = 6,
}

fn stream(kind: Stream, level: usize, sample: usize) -> u64 {
    ((kind as u64) << 56) | ((level as u64) << 32) | sample as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LevelKey {
    pub cells: usize,
    pub steps: usize,
    pub h: f64,
    pub tau: f64,
}

impl LevelKey {
    fn new(cells: usize, grid: &TimeGrid) -> Self {
        Self {
            cells,
            steps: grid.n_steps(),
            h: 1.0 / cells as f64,
            tau: grid.tau(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub solves: usize,
    pub steps: usize,
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    pub pcg_iterations: usize,
    pub factorizations: usize,
    pub picard_fallbacks: usize,
    pub max_residual: f64,
}

impl SolverStats {
    fn of(traj: &Trajectory) -> Self {
        let mut s = Self {
            solves: 1,
            ..Self::default()
        };
        for r in &traj.reports {
            s.add_step(r);
        }
        s
    }

    fn add_step(&mut self, r: &StepReport) {
        self.steps += 1;
        self.newton_iterations += r.newton_iterations;
        self.max_newton_iterations = self.max_newton_iterations.max(r.newton_iterations);
        self.pcg_iterations += r.pcg_iterations;
        self.factorizations += r.factorizations;
        self.picard_fallbacks += usize::from(r.picard_used);
        self.max_residual = self.max_residual.max(r.residual);
    }

    fn merge(&mut self, o: &Self) {
        self.solves += o.solves;
        self.steps += o.steps;
        self.newton_iterations += o.newton_iterations;
        self.max_newton_iterations = self.max_newton_iterations.max(o.max_newton_iterations);
        self.pcg_iterations += o.pcg_iterations;
        self.factorizations += o.factorizations;
        self.picard_fallbacks += o.picard_fallbacks;
        self.max_residual = self.max_residual.max(o.max_residual);
    }

    fn total<'a>(parts: impl IntoIterator<Item = &'a Self>) -> Self {
        let mut s = Self::default();
        for p in parts {
            s.merge(p);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PressureChecks {
    /// `|‖π^init‖_{Q_sto} − ‖Π⊥ u_0^h‖|`.
    pub init_identity: f64,
    pub decomposition_residual: f64,
    pub reconstruction_residual: f64,
    /// `max_n ‖λ_n − (π_n − π_{n−1})‖_{Q_sto}`.
    pub multiplier_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSummary {
    pub sample: usize,
    pub max_energy: f64,
    pub final_energy: f64,
    pub energy_residual_max: f64,
    pub divergence_max: f64,
    pub pressure: PressureChecks,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleLevel {
    pub level: LevelKey,
    /// `‖u_n‖²` of the first sample.
    pub energies: Vec<f64>,
    pub samples: Vec<SampleSummary>,
    pub energy_residual_max: f64,
    pub divergence_max: f64,
    pub pressure_worst: PressureChecks,
    pub solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingleRunReport {
    pub levels: Vec<SingleLevel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthFlag {
    pub statistic: String,
    pub from: LevelKey,
    pub to: LevelKey,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityLevel {
    pub level: LevelKey,
    pub stats: StabilityStats,
    /// Mean-of-max dominates max-of-mean for the velocity and every pressure exponent.
    pub besov_order: bool,
    pub solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub growth_limit: f64,
    pub levels: Vec<StabilityLevel>,
    pub flags: Vec<GrowthFlag>,
    pub bounded: bool,
    pub besov_order: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceLevel {
    pub level: LevelKey,
    pub stats: ErrorStats,
    pub solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateCheck {
    pub quantity: String,
    /// `"tau"` or `"h"`.
    pub axis: String,
    pub fit: RateFit,
    pub window: Option<(f64, f64)>,
    pub pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub reference: LevelKey,
    pub fine_step: f64,
    pub levels: Vec<ConvergenceLevel>,
    pub rates: Vec<RateCheck>,
    /// Whether the rate windows apply to this configuration (p = 2, additive noise).
    pub gated: bool,
    pub passes: Option<bool>,
    pub reference_solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtrapolationOutcome {
    pub level: LevelKey,
    pub fine_step: f64,
    pub calibration_samples: usize,
    pub sigmas: f64,
    pub report: ExtrapolationReport,
    pub passes: bool,
    pub solver: SolverStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    SingleRun(SingleRunReport),
    Stability(StabilityReport),
    Convergence(ConvergenceReport),
    Extrapolation(ExtrapolationOutcome),
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub outcome: Outcome,
    pub solver: SolverStats,
    #[serde(skip)]
    pub wall_clock: f64,
    /// First-sample trajectories of a single run, kept for checkpoints and VTK output.
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

impl RunReport {
    /// Pass/fail verdict of the gated checks, when the experiment has any.
    pub fn passed(&self) -> Option<bool> {
        match &self.outcome {
            Outcome::SingleRun(_) => None,
            Outcome::Stability(s) => Some(s.bounded && s.besov_order),
            Outcome::Convergence(c) => c.passes,
            Outcome::Extrapolation(e) => Some(e.passes),
        }
    }
}

pub fn run(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut trajectories = Vec::new();
    let (outcome, solver) = match cfg.experiment.kind {
        ExperimentKind::SingleRun => {
            let (r, t) = pool.install(|| run_single(cfg))?;
            trajectories = t;
            let s = SolverStats::total(r.levels.iter().map(|l| &l.solver));
            (Outcome::SingleRun(r), s)
        }
        ExperimentKind::Stability => {
            let r = pool.install(|| run_stability(cfg))?;
            let s = SolverStats::total(r.levels.iter().map(|l| &l.solver));
            (Outcome::Stability(r), s)
        }
        ExperimentKind::Convergence => {
            let r = pool.install(|| run_convergence(cfg))?;
            let mut s = SolverStats::total(r.levels.iter().map(|l| &l.solver));
            s.merge(&r.reference_solver);
            (Outcome::Convergence(r), s)
        }
        ExperimentKind::Extrapolation => {
            let r = pool.install(|| run_extrapolation(cfg))?;
            let s = r.solver.clone();
            (Outcome::Extrapolation(r), s)
        }
    };
    let mut config = cfg.clone();
    config.experiment.output_dir = None;
    Ok(RunReport {
        config,
        outcome,
        solver,
        wall_clock: start.elapsed().as_secs_f64(),
        trajectories,
    })
}

fn stepper<'a>(cfg: &ExperimentConfig, disc: &'a Discretization, grid: TimeGrid) -> Result<Stepper<'a>> {
    Ok(Stepper::new(
        disc,
        grid,
        cfg.law()?,
        cfg.noise_model()?,
        cfg.newton_options()?,
    ))
}

fn discretizations(cells: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, Discretization>> {
    let mut out = BTreeMap::new();
    for m in cells {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry(m) {
            e.insert(Discretization::new(m)?);
        }
    }
    Ok(out)
}

/// Free-dof nodal interpolant of the initial datum, before projection.
fn initial_free(cfg: &ExperimentConfig, disc: &Discretization) -> Vec<f64> {
    disc.sp.restrict(&disc.interpolate(cfg.initial(), true).coeffs)
}

fn divergence_max(disc: &Discretization, states: &[Vec<f64>]) -> f64 {
    states
        .iter()
        .map(|c| disc.sp.divergence_pointwise_max(&disc.sp.extend(&disc.expand(c))))
        .fold(0.0, f64::max)
}

fn exact_increments(sampler: &ExactSampler, modes: usize, seed: u64, index: u64) -> Increments {
    sampler.sample(modes, &mut sample_rng(seed, index))
}

pub fn run_single(cfg: &ExperimentConfig) -> Result<(SingleRunReport, Vec<Trajectory>)> {
    let discs = discretizations(cfg.grid.levels.iter().map(|l| l.0))?;
    let modes = cfg.noise.modes;
    let mut levels = Vec::new();
    let mut firsts = Vec::new();
    for (li, &(m, n)) in cfg.grid.levels.iter().enumerate() {
        let disc = &discs[&m];
        let grid = cfg.grid(n)?;
        let sampler = ExactSampler::new(grid);
        let c0 = disc.initial_velocity(cfg.initial());
        let u0h = initial_free(cfg, disc);
        let init_target = perp_norm(disc, &u0h);
        let runs: Vec<(SampleSummary, Vec<f64>, SolverStats, Option<Trajectory>)> = (0..cfg.experiment.samples)
            .into_par_iter()
            .map(|i| -> Result<_> {
                let mut st = stepper(cfg, disc, grid)?;
                st.recording = Recording {
                    noise_loads: true,
                    multipliers: true,
                };
                let inc = exact_increments(&sampler, modes, cfg.experiment.seed, stream(Stream::Single, li, i));
                let traj = st.run(c0.clone(), &inc)?;
                let energies: Vec<f64> = traj.states.iter().map(|c| disc.reduced_norm_sq(c)).collect();
                let residuals = st.energy_identity_residuals(&traj)?;
                let pt = reconstruct(&st, &traj, &u0h)?;
                let mults = traj.multipliers.as_ref().expect("recorded");
                let multiplier_agreement = (1..=traj.n_steps())
                    .map(|k| {
                        let d: Vec<f64> = mults[k - 1]
                            .iter()
                            .zip(pt.pi[k].iter().zip(&pt.pi[k - 1]))
                            .map(|(l, (a, b))| l - (a - b))
                            .collect();
                        disc.q_sto_norm(&d)
                    })
                    .fold(0.0, f64::max);
                let pressure = PressureChecks {
                    init_identity: (disc.q_sto_norm(&pt.init) - init_target).abs(),
                    decomposition_residual: pt.decomposition_residual(disc),
                    reconstruction_residual: reconstruction_residual(&st, &traj, &pt)?,
                    multiplier_agreement,
                };
                let summary = SampleSummary {
                    sample: i,
                    max_energy: energies.iter().copied().fold(0.0, f64::max),
                    final_energy: *energies.last().expect("u_0"),
                    energy_residual_max: residuals.iter().copied().fold(0.0, f64::max),
                    divergence_max: divergence_max(disc, &traj.states),
                    pressure,
                };
                let stats = SolverStats::of(&traj);
                Ok((summary, energies, stats, (i == 0).then_some(traj)))
            })
            .collect::<Result<_>>()?;
        let mut samples = Vec::with_capacity(runs.len());
        let mut energies = Vec::new();
        let mut solver = SolverStats::default();
        for (s, e, st, t) in runs {
            if s.sample == 0 {
                energies = e;
            }
            solver.merge(&st);
            if let Some(t) = t {
                firsts.push(t);
            }
            samples.push(s);
        }
        let worst = |f: fn(&SampleSummary) -> f64| samples.iter().map(f).fold(0.0, f64::max);
        levels.push(SingleLevel {
            level: LevelKey::new(m, &grid),
            energies,
            energy_residual_max: worst(|s| s.energy_residual_max),
            divergence_max: worst(|s| s.divergence_max),
            pressure_worst: PressureChecks {
                init_identity: worst(|s| s.pressure.init_identity),
                decomposition_residual: worst(|s| s.pressure.decomposition_residual),
                reconstruction_residual: worst(|s| s.pressure.reconstruction_residual),
                multiplier_agreement: worst(|s| s.pressure.multiplier_agreement),
            },
            samples,
            solver,
        });
    }
    Ok((SingleRunReport { levels }, firsts))
}

fn besov_order_holds(stats: &StabilityStats) -> bool {
    let ge = |strong: f64, weak: f64| strong >= weak - 1e-12 * weak.abs();
    let mut ok = ge(stats.besov_u_strong.mean, stats.besov_u);
    if let Some(p) = &stats.pressure {
        for ((r, weak), (_, strong)) in p.sto_besov.iter().zip(&p.sto_besov_strong) {
            let _ = r;
            ok &= ge(strong.mean, *weak);
        }
    }
    ok
}

/// Statistics that grow by more than `limit` between consecutive levels.
pub fn growth_flags(levels: &[StabilityLevel], limit: f64) -> Vec<GrowthFlag> {
    let mut flags = Vec::new();
    for pair in levels.windows(2) {
        let (a, b) = (pair[0].stats.bounded_scalars(), pair[1].stats.bounded_scalars());
        for ((name, va), (_, vb)) in a.iter().zip(&b) {
            if *vb > limit * va && *vb > 1e-12 {
                flags.push(GrowthFlag {
                    statistic: name.clone(),
                    from: pair[0].level,
                    to: pair[1].level,
                    ratio: if *va > 0.0 { vb / va } else { f64::INFINITY },
                });
            }
        }
    }
    flags
}

pub fn run_stability(cfg: &ExperimentConfig) -> Result<StabilityReport> {
    let modes = cfg.noise.modes;
    let mut levels = Vec::new();
    for (li, &(m, n)) in cfg.grid.levels.iter().enumerate() {
        let disc = Discretization::new(m)?;
        let grid = cfg.grid(n)?;
        let sampler = ExactSampler::new(grid);
        let c0 = disc.initial_velocity(cfg.initial());
        let u0h = initial_free(cfg, &disc);
        let runs: Vec<_> = (0..cfg.experiment.samples)
            .into_par_iter()
            .map(|i| -> Result<_> {
                let mut st = stepper(cfg, &disc, grid)?;
                st.recording = Recording {
                    noise_loads: true,
                    multipliers: false,
                };
                let inc = exact_increments(&sampler, modes, cfg.experiment.seed, stream(Stream::Stability, li, i));
                let traj = st.run(c0.clone(), &inc)?;
                let pt = reconstruct(&st, &traj, &u0h)?;
                Ok((sample_stability(&st, &traj, Some(&pt))?, SolverStats::of(&traj)))
            })
            .collect::<Result<_>>()?;
        let (samples, solvers): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        let stats = stability_stats(&samples)?;
        levels.push(StabilityLevel {
            level: LevelKey::new(m, &grid),
            besov_order: besov_order_holds(&stats),
            stats,
            solver: SolverStats::total(&solvers),
        });
    }
    let flags = growth_flags(&levels, cfg.tolerances.growth);
    Ok(StabilityReport {
        growth_limit: cfg.tolerances.growth,
        bounded: flags.is_empty(),
        besov_order: levels.iter().all(|l| l.besov_order),
        levels,
        flags,
    })
}

fn rate_check(
    quantity: &str,
    axis: &str,
    x: &[f64],
    y: &[f64],
    window: Option<(f64, f64)>,
) -> Result<Option<RateCheck>> {
    if x.len() < 2 {
        return Ok(None);
    }
    let fit = fit_rate(x, y)?;
    let pass = window.map(|(lo, hi)| fit.slope >= lo && fit.slope <= hi);
    Ok(Some(RateCheck {
        quantity: quantity.into(),
        axis: axis.into(),
        fit,
        window,
        pass,
    }))
}

/// Lower bound on the slope of the `C_V` proxy against `τ`.
pub const C_V_MIN_SLOPE: f64 = 0.8;

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let r = cfg.reference.as_ref().expect("validated");
    let fine = Discretization::new(r.cells)?;
    let ref_grid = cfg.grid(r.steps)?;
    let fine_step = ref_grid.tau() / r.fine_per_step as f64;
    let law = cfg.law()?;
    let model = cfg.noise_model()?;
    let ctx = ErrorContext::new(&fine, ref_grid, law, model);

    let coarse_cells: Vec<usize> = cfg.grid.levels.iter().map(|l| l.0).filter(|&m| m != r.cells).collect();
    let discs = discretizations(coarse_cells)?;
    let disc_of = |m: usize| if m == r.cells { &fine } else { &discs[&m] };
    let mut transfers = BTreeMap::new();
    for &(m, _) in &cfg.grid.levels {
        if !transfers.contains_key(&m) {
            transfers.insert(m, Transfer::new(disc_of(m), &fine)?);
        }
    }
    let grids: Vec<TimeGrid> = cfg.grid.levels.iter().map(|l| cfg.grid(l.1)).collect::<Result<_>>()?;
    let error_levels: Vec<ErrorLevel> = cfg
        .grid
        .levels
        .iter()
        .zip(&grids)
        .map(|(&(m, _), &grid)| ErrorLevel {
            disc: disc_of(m),
            transfer: &transfers[&m],
            grid,
        })
        .collect();
    let c0_fine = fine.initial_velocity(cfg.initial());
    let c0: Vec<Vec<f64>> = cfg
        .grid
        .levels
        .iter()
        .map(|l| disc_of(l.0).initial_velocity(cfg.initial()))
        .collect();
    let t_final = cfg.physics.t_final;
    let modes = cfg.noise.modes;

    let per_sample: Vec<_> = (0..cfg.experiment.samples)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = sample_rng(cfg.experiment.seed, stream(Stream::Convergence, 0, i));
            let path = WienerPath::sample(t_final, fine_step, modes, &mut rng)?;
            let mut st = stepper(cfg, &fine, ref_grid)?;
            let reference = st.run(c0_fine.clone(), &sample_coupled(&ref_grid, &path)?)?;
            let mut trajs = Vec::with_capacity(error_levels.len());
            for (lvl, c) in error_levels.iter().zip(&c0) {
                let mut st = stepper(cfg, lvl.disc, lvl.grid)?;
                trajs.push(st.run(c.clone(), &sample_coupled(&lvl.grid, &path)?)?);
            }
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            let errs = sample_errors(&ctx, &error_levels, &reference, &refs)?;
            let solvers: Vec<SolverStats> = trajs.iter().map(SolverStats::of).collect();
            Ok((errs, solvers, SolverStats::of(&reference)))
        })
        .collect::<Result<_>>()?;

    let mut levels = Vec::with_capacity(error_levels.len());
    for (li, (&(m, _), grid)) in cfg.grid.levels.iter().zip(&grids).enumerate() {
        let errs: Vec<_> = per_sample.iter().map(|s| s.0[li].clone()).collect();
        levels.push(ConvergenceLevel {
            level: LevelKey::new(m, grid),
            stats: error_stats(&errs, grid.n_steps())?,
            solver: SolverStats::total(per_sample.iter().map(|s| &s.1[li])),
        });
    }
    let reference_solver = SolverStats::total(per_sample.iter().map(|s| &s.2));

    let gated = cfg.physics.p == 2.0 && cfg.noise_model()?.rule == NoiseRule::Additive;
    let tol = &cfg.tolerances;
    let is_reference = |l: &ConvergenceLevel| l.level.cells == r.cells && l.level.steps == r.steps;
    let tau_levels: Vec<&ConvergenceLevel> = levels
        .iter()
        .filter(|l| l.level.cells == r.cells && !is_reference(l))
        .collect();
    let h_levels: Vec<&ConvergenceLevel> = levels
        .iter()
        .filter(|l| l.level.steps == r.steps && !is_reference(l))
        .collect();
    let mut rates = Vec::new();
    type Pick = fn(&ConvergenceLevel) -> f64;
    let quantities: [(&str, Pick); 2] = [
        ("natural_err", |l| l.stats.natural_err.mean),
        ("vgrad_err", |l| l.stats.vgrad_err.mean),
    ];
    for (name, pick) in quantities {
        let x: Vec<f64> = tau_levels.iter().map(|l| l.level.tau).collect();
        let y: Vec<f64> = tau_levels.iter().map(|l| pick(l)).collect();
        rates.extend(rate_check(name, "tau", &x, &y, gated.then_some(tol.tau_slope))?);
        let x: Vec<f64> = h_levels.iter().map(|l| l.level.h).collect();
        let y: Vec<f64> = h_levels.iter().map(|l| pick(l)).collect();
        rates.extend(rate_check(name, "h", &x, &y, gated.then_some(tol.h_slope))?);
    }
    let x: Vec<f64> = tau_levels.iter().map(|l| l.level.tau).collect();
    let y: Vec<f64> = tau_levels.iter().map(|l| l.stats.c_v.mean).collect();
    if y.iter().all(|&v| v > 0.0) {
        rates.extend(rate_check("c_v", "tau", &x, &y, Some((C_V_MIN_SLOPE, f64::INFINITY)))?);
    }
    let gated_checks: Vec<bool> = rates
        .iter()
        .filter(|c| c.quantity != "c_v")
        .filter_map(|c| c.pass)
        .collect();
    let passes = (gated && !gated_checks.is_empty()).then(|| gated_checks.iter().all(|&b| b));
    Ok(ConvergenceReport {
        reference: LevelKey::new(r.cells, &ref_grid),
        fine_step,
        levels,
        rates,
        gated,
        passes,
        reference_solver,
    })
}

fn extrapolation_batch(
    cfg: &ExperimentConfig,
    disc: &Discretization,
    grid: TimeGrid,
    fine_step: f64,
    kind: Stream,
    count: usize,
) -> Result<(Vec<ExtrapolationSample>, SolverStats)> {
    let c0 = disc.initial_velocity(cfg.initial());
    let exponent = cfg.extrapolation.exponent;
    let runs: Vec<(ExtrapolationSample, SolverStats)> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = sample_rng(cfg.experiment.seed, stream(kind, 0, i));
            let path = WienerPath::sample(cfg.physics.t_final, fine_step, cfg.noise.modes, &mut rng)?;
            let mut st = stepper(cfg, disc, grid)?;
            let s = extrapolation_sample(&mut st, c0.clone(), &path, exponent)?;
            let solver = SolverStats {
                solves: 1,
                steps: grid.n_steps(),
                ..SolverStats::default()
            };
            Ok((s, solver))
        })
        .collect::<Result<_>>()?;
    let (samples, solvers): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok((samples, SolverStats::total(&solvers)))
}

pub fn run_extrapolation(cfg: &ExperimentConfig) -> Result<ExtrapolationOutcome> {
    let (m, n) = cfg.grid.levels[0];
    let e = &cfg.extrapolation;
    let disc = Discretization::new(m)?;
    let grid = cfg.grid(n)?;
    let fine_step = grid.tau() / e.fine_per_step as f64;
    let (calibration, mut solver) =
        extrapolation_batch(cfg, &disc, grid, fine_step, Stream::Calibration, e.calibration_samples)?;
    let (samples, main) = extrapolation_batch(
        cfg,
        &disc,
        grid,
        fine_step,
        Stream::Extrapolation,
        cfg.experiment.samples,
    )?;
    solver.merge(&main);
    let report = extrapolation_check(&samples, &calibration, e.exponent, grid.tau(), e.k)?;
    Ok(ExtrapolationOutcome {
        level: LevelKey::new(m, &grid),
        fine_step,
        calibration_samples: calibration.len(),
        sigmas: cfg.tolerances.sigmas,
        passes: report.passes(cfg.tolerances.sigmas),
        report,
        solver,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub n_steps: usize,
    pub samples: usize,
    /// Wiener cells per step for path-coupled sampling; `None` for exact sampling.
    pub fine_per_step: Option<usize>,
    /// `max |Ĉ − C|` over all entries.
    pub max_deviation: f64,
    /// Largest `|Ĉ − C| / se` over the tridiagonal band.
    pub max_z_band: f64,
    /// Largest `|Ĉ − C| / se` off the band, where `C = 0`.
    pub max_z_off_band: f64,
    /// `‖Ĉ − C‖_F / ‖C‖_F` over the tridiagonal band.
    pub relative_band_error: f64,
    /// Mean of `z²` over the band; close to 1 for an unbiased sampler.
    pub band_mean_z_sq: f64,
}

const COVARIANCE_BLOCK: usize = 1024;

/// Empirical second moments of single-mode increments against `∫ a_n a_m dt`.
pub fn noise_covariance(
    t_final: f64,
    n_steps: usize,
    samples: usize,
    seed: u64,
    fine_per_step: Option<usize>,
) -> Result<CovarianceCheck> {
    if samples < 2 {
        return Err(HarnessError::Config(
            "covariance check needs at least two samples".into(),
        ));
    }
    let grid = TimeGrid::new(t_final, n_steps)?;
    let sampler = ExactSampler::new(grid);
    let nn = n_steps;
    let idx = |a: usize, b: usize| a * nn + b;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..samples.div_ceil(COVARIANCE_BLOCK))
        .into_par_iter()
        .map(|b| -> Result<_> {
            let mut s1 = vec![0.0; nn * nn];
            let mut s2 = vec![0.0; nn * nn];
            for i in b * COVARIANCE_BLOCK..((b + 1) * COVARIANCE_BLOCK).min(samples) {
                let mut rng = sample_rng(seed, stream(Stream::Noise, 0, i));
                let inc = match fine_per_step {
                    None => sampler.sample(1, &mut rng),
                    Some(f) => {
                        let path = WienerPath::sample(t_final, grid.tau() / f as f64, 1, &mut rng)?;
                        sample_coupled(&grid, &path)?
                    }
                };
                let x = inc.mode(0);
                for a in 0..nn {
                    for c in a..nn {
                        let v = x[a] * x[c];
                        s1[idx(a, c)] += v;
                        s2[idx(a, c)] += v * v;
                    }
                }
            }
            Ok((s1, s2))
        })
        .collect::<Result<_>>()?;
    let mut s1 = vec![0.0; nn * nn];
    let mut s2 = vec![0.0; nn * nn];
    for (a, b) in &blocks {
        for k in 0..nn * nn {
            s1[k] += a[k];
            s2[k] += b[k];
        }
    }
    let s = samples as f64;
    let (mut max_dev, mut z_band, mut z_off, mut num, mut den) = (0.0f64, 0.0f64, 0.0f64, 0.0, 0.0);
    let (mut z_sq, mut band_entries) = (0.0, 0usize);
    for a in 0..nn {
        for c in a..nn {
            let mean = s1[idx(a, c)] / s;
            let var = (s2[idx(a, c)] / s - mean * mean) * s / (s - 1.0);
            let se = (var.max(0.0) / s).sqrt();
            let exact = grid.weight_inner(a + 1, c + 1);
            let dev = (mean - exact).abs();
            max_dev = max_dev.max(dev);
            let z = if se > 0.0 { dev / se } else { 0.0 };
            let mult = if a == c { 1.0 } else { 2.0 };
            if c - a <= 1 {
                z_band = z_band.max(z);
                z_sq += z * z;
                band_entries += 1;
                num += mult * dev * dev;
                den += mult * exact * exact;
            } else {
                z_off = z_off.max(z);
            }
        }
    }
    Ok(CovarianceCheck {
        n_steps,
        samples,
        fine_per_step,
        max_deviation: max_dev,
        max_z_band: z_band,
        max_z_off_band: z_off,
        relative_band_error: (num / den).sqrt(),
        band_mean_z_sq: z_sq / band_entries as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE: &str = r#"
[experiment]
kind = "single-run"
samples = 2
seed = 3

[physics]
p = 3.0
kappa = 0.1

[noise]
modes = 2
rule = "linear"

[grid]
levels = [[2, 6]]
"#;

    #[test]
    fn stream_indices_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for k in [Stream::Single, Stream::Stability, Stream::Convergence, Stream::Noise] {
            for l in 0..3 {
                for s in 0..5 {
                    assert!(seen.insert(stream(k, l, s)));
                }
            }
        }
    }

    #[test]
    fn single_run_satisfies_scheme_identities() {
        let cfg = ExperimentConfig::parse(SINGLE).unwrap();
        let pool = pool_with(1).unwrap();
        let rep = run(&cfg, &pool).unwrap();
        let Outcome::SingleRun(s) = &rep.outcome else { panic!() };
        let l = &s.levels[0];
        assert_eq!(l.samples.len(), 2);
        assert_eq!(l.energies.len(), 7);
        assert!(l.energy_residual_max < 1e-9);
        assert!(l.divergence_max < 1e-8);
        assert!(l.pressure_worst.decomposition_residual < 1e-10);
        assert!(l.pressure_worst.multiplier_agreement < 1e-8);
        assert_eq!(rep.trajectories.len(), 1);
        assert_eq!(rep.solver.solves, 2);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = ExperimentConfig::parse(SINGLE).unwrap();
        let a = run(&cfg, &pool_with(1).unwrap()).unwrap();
        let b = run(&cfg, &pool_with(3).unwrap()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn zero_data_gives_zero_stability_statistics() {
        let text = SINGLE
            .replace("single-run", "stability")
            .replace("[[2, 6]]", "[[1, 2], [2, 4], [2, 8]]")
            .replace("[physics]\n", "[physics]\ninitial = \"zero\"\n")
            .replace("rule = \"linear\"", "amplitude = 0.0");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let r = run_stability(&cfg).unwrap();
        assert!(r.bounded && r.besov_order);
        for l in &r.levels {
            assert!(l.stats.scalars().iter().all(|(_, v)| *v == 0.0));
        }
    }

    #[test]
    fn growth_flags_catch_doubling() {
        let text = SINGLE
            .replace("single-run", "stability")
            .replace("[[2, 6]]", "[[2, 2], [2, 4], [2, 8]]");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let mut r = run_stability(&cfg).unwrap();
        assert!(growth_flags(&r.levels, f64::INFINITY).is_empty());
        r.levels[2].stats.e_max.mean = 3.0 * r.levels[1].stats.e_max.mean;
        let flags = growth_flags(&r.levels, 2.0);
        assert!(flags.iter().any(|f| f.statistic == "e_max" && f.to.steps == 8));
    }

    #[test]
    fn self_reference_level_has_vanishing_natural_error() {
        let text = SINGLE
            .replace("single-run", "convergence")
            .replace("rule = \"linear\"", "")
            .replace(
                "[[2, 6]]",
                "[[2, 6]]\n\n[reference]\ncells = 2\nsteps = 6\nfine_per_step = 2",
            );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let r = run_convergence(&cfg).unwrap();
        let s = &r.levels[0].stats;
        assert!(s.natural_err.mean < 1e-8);
        assert!(s.c_init.mean < 1e-8);
        assert!(r.rates.is_empty());
    }

    #[test]
    fn covariance_check_small_exact_and_coupled() {
        let c = noise_covariance(1.0, 4, 4000, 1, None).unwrap();
        assert!(c.relative_band_error < 0.1);
        let d = noise_covariance(1.0, 4, 4000, 1, Some(8)).unwrap();
        assert!(d.relative_band_error < 0.1);
        assert_ne!(c.max_deviation, d.max_deviation);
    }
}
