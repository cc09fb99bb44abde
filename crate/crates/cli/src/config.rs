use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pstokes::noise::{Modulation, NoiseModel, NoiseRule, TimeGrid};
use pstokes::stepper::{JacobianStrategy, NewtonOptions};
use pstokes::tensor::PowerLaw;

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SingleRun,
    Stability,
    Convergence,
    Extrapolation,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub physics: PhysicsSection,
    pub noise: NoiseSection,
    pub grid: GridSection,
    #[serde(default)]
    pub reference: Option<ReferenceSection>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub extrapolation: ExtrapolationSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialData {
    /// Curl of `(xy(1−x)(1−y))²`.
    Bubble,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub p: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "unit")]
    pub t_final: f64,
    #[serde(default = "bubble")]
    pub initial: InitialData,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub modes: usize,
    #[serde(default = "additive")]
    pub rule: String,
    #[serde(default = "constant")]
    pub modulation: String,
    #[serde(default = "unit")]
    pub frequency: f64,
    #[serde(default = "amplitude")]
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// `(cells per side, time steps)` per level.
    pub levels: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub cells: usize,
    pub steps: usize,
    /// Fine Wiener cells per reference step.
    #[serde(default = "eight")]
    pub fine_per_step: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "newton_tol")]
    pub tol: f64,
    #[serde(default = "fifty")]
    pub max_iter: usize,
    #[serde(default = "newton_reg")]
    pub reg: f64,
    #[serde(default = "exact")]
    pub strategy: String,
    #[serde(default = "fifty")]
    pub max_pcg: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: newton_tol(),
            max_iter: fifty(),
            reg: newton_reg(),
            strategy: exact(),
            max_pcg: fifty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationSection {
    #[serde(default = "thousand")]
    pub calibration_samples: usize,
    #[serde(default = "half")]
    pub k: f64,
    #[serde(default = "four")]
    pub exponent: f64,
    #[serde(default = "four_usize")]
    pub fine_per_step: usize,
}

impl Default for ExtrapolationSection {
    fn default() -> Self {
        Self {
            calibration_samples: thousand(),
            k: half(),
            exponent: four(),
            fine_per_step: four_usize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "two")]
    pub growth: f64,
    #[serde(default = "tau_window")]
    pub tau_slope: (f64, f64),
    #[serde(default = "h_window")]
    pub h_slope: (f64, f64),
    #[serde(default = "three")]
    pub sigmas: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            growth: two(),
            tau_slope: tau_window(),
            h_slope: h_window(),
            sigmas: three(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub vtk_steps: Vec<usize>,
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default)]
    pub export_matrices: bool,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn bubble() -> InitialData {
    InitialData::Bubble
}
fn additive() -> String {
    "additive".into()
}
fn constant() -> String {
    "constant".into()
}
fn amplitude() -> f64 {
    0.1
}
fn eight() -> usize {
    8
}
fn newton_tol() -> f64 {
    1e-10
}
fn fifty() -> usize {
    50
}
fn newton_reg() -> f64 {
    1e-8
}
fn exact() -> String {
    "exact".into()
}
fn thousand() -> usize {
    1000
}
fn half() -> f64 {
    0.5
}
fn four() -> f64 {
    4.0
}
fn four_usize() -> usize {
    4
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn tau_window() -> (f64, f64) {
    (0.7, 1.3)
}
fn h_window() -> (f64, f64) {
    (1.6, 2.4)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.law()?;
        self.noise_model()?;
        self.newton_options()?;
        if self.experiment.samples == 0 {
            return bad("experiment.samples must be positive".into());
        }
        if self.grid.levels.is_empty() {
            return bad("grid.levels must list at least one (cells, steps) pair".into());
        }
        for &(m, n) in &self.grid.levels {
            if m == 0 || n == 0 {
                return bad(format!("grid level ({m}, {n}) needs positive cells and steps"));
            }
        }
        match self.experiment.kind {
            ExperimentKind::Convergence => {
                let r = self
                    .reference
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("convergence needs a [reference] section".into()))?;
                if r.fine_per_step == 0 {
                    return bad("reference.fine_per_step must be positive".into());
                }
                for &(m, n) in &self.grid.levels {
                    if r.cells % m != 0 {
                        return bad(format!(
                            "reference mesh {} is not a refinement of level mesh {m}",
                            r.cells
                        ));
                    }
                    let (a, b) = (r.steps + 1, n + 1);
                    if a % b != 0 || (a / b) % 2 == 0 {
                        return bad(format!(
                            "reference steps {} do not nest level steps {n}: (N_ref+1)/(N+1) must be an odd integer",
                            r.steps
                        ));
                    }
                }
            }
            ExperimentKind::Stability if self.grid.levels.len() < 3 => {
                return bad("stability needs a ladder of at least three levels".into());
            }
            ExperimentKind::Extrapolation => {
                if self.grid.levels.len() != 1 {
                    return bad("extrapolation runs on exactly one grid level".into());
                }
                let e = &self.extrapolation;
                if e.fine_per_step == 0 || !(e.k > 0.0 && e.k < 1.0) {
                    return bad("extrapolation needs fine_per_step > 0 and k in (0, 1)".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn law(&self) -> Result<PowerLaw, HarnessError> {
        Ok(PowerLaw::new(self.physics.p, self.physics.kappa)?)
    }

    pub fn noise_model(&self) -> Result<NoiseModel, HarnessError> {
        let n = &self.noise;
        let rule = NoiseRule::parse(&n.rule)?;
        let modulation = match n.modulation.as_str() {
            "constant" => Modulation::Constant,
            "sine" | "sin" => Modulation::Sine { freq: n.frequency },
            other => return Err(HarnessError::Config(format!("unknown modulation '{other}'"))),
        };
        Ok(NoiseModel::new(rule, modulation, n.amplitude, n.modes)?)
    }

    pub fn newton_options(&self) -> Result<NewtonOptions, HarnessError> {
        let s = &self.solver;
        let strategy = match s.strategy.as_str() {
            "exact" => JacobianStrategy::Exact,
            "stale" => JacobianStrategy::Stale { max_pcg: s.max_pcg },
            other => return Err(HarnessError::Config(format!("unknown Jacobian strategy '{other}'"))),
        };
        if !(s.tol > 0.0) || s.max_iter == 0 || s.reg < 0.0 {
            return Err(HarnessError::Config(
                "solver needs tol > 0, max_iter > 0, reg ≥ 0".into(),
            ));
        }
        Ok(NewtonOptions {
            abs_tol: s.tol,
            max_iter: s.max_iter,
            reg: s.reg,
            strategy,
            ..NewtonOptions::default()
        })
    }

    pub fn grid(&self, steps: usize) -> Result<TimeGrid, HarnessError> {
        Ok(TimeGrid::new(self.physics.t_final, steps)?)
    }

    pub fn initial(&self) -> impl Fn([f64; 2]) -> [f64; 2] + Sync + Copy {
        let kind = self.physics.initial;
        move |x: [f64; 2]| match kind {
            InitialData::Bubble => {
                let v = pstokes::noise::curl_bubble(0, x[0], x[1]);
                [v[0] / 64.0, v[1] / 64.0]
            }
            InitialData::Zero => [0.0, 0.0],
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.experiment
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}
