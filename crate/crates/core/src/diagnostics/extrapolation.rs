use serde::Serialize;

use super::Estimate;
use crate::error::{invalid, Error, Result};
use crate::noise::compensator::{combination_norm_sq, compensator_coeffs};
use crate::noise::{sample_coupled, NoiseModel, WienerPath};
use crate::stepper::Stepper;

pub const MIN_SAMPLES: usize = 1000;

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// The processes `X_M` and `Y_M`, `M = 0..=N`, along one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// `X_M = Σ_{n≤M} ∫_{J_n} ‖Ē(t)/√τ‖^r dt`, `Y_M = max_{n≤(M+2)∧N} ‖G_n(u_{(n−2)∨0})‖^r_{HS}`.
pub fn extrapolation_sample(
    stepper: &mut Stepper,
    u0: Vec<f64>,
    path: &WienerPath,
    r: f64,
) -> Result<ExtrapolationSample> {
    let grid = stepper.grid;
    let big_n = grid.n_steps();
    let tau = grid.tau();
    let inc = sample_coupled(&grid, path)?;
    let traj = stepper.run(u0, &inc)?;
    let disc = stepper.disc;
    let vel: Vec<Vec<[f64; 2]>> = traj.states.iter().map(|c| disc.reduced_at_quadrature(c).0).collect();
    let model = stepper.noise.model;
    let factor = |n: usize| model.step_factor(&grid, n);
    let lag = |n: usize| &vel[NoiseModel::lag_index(n)];

    let hs: Vec<f64> = (0..=big_n)
        .map(|n| {
            if n == 0 {
                0.0
            } else {
                stepper.noise.hs_norm_sq(disc, factor(n), lag(n))
            }
        })
        .collect();
    let mut y = Vec::with_capacity(big_n + 1);
    for m in 0..=big_n {
        let top = (m + 2).min(big_n);
        y.push((1..=top).map(|n| hs[n].max(0.0).powf(r / 2.0)).fold(0.0, f64::max));
    }

    let mut x = vec![0.0; big_n + 1];
    let mm = stepper.noise.n_modes();
    for n in 1..=big_n {
        let f = stepper.noise.gram(disc, factor(n), lag(n), factor(n), lag(n));
        let (h, k) = if n < big_n {
            (
                stepper.noise.gram(disc, factor(n), lag(n), factor(n + 1), lag(n + 1)),
                stepper
                    .noise
                    .gram(disc, factor(n + 1), lag(n + 1), factor(n + 1), lag(n + 1)),
            )
        } else {
            (vec![0.0; mm * mm], vec![0.0; mm * mm])
        };
        let (lo, hi) = grid.window(n);
        let d = path.fine_step();
        let (j0, j1) = path.cell_range(lo, hi);
        let mut integral = 0.0;
        for j in j0..j1 {
            let a = (j as f64 * d).max(lo);
            let b = ((j + 1) as f64 * d).min(hi);
            if b <= a {
                continue;
            }
            let (c, half) = (0.5 * (a + b), 0.5 * (b - a));
            for (s, w) in GAUSS5 {
                let coeffs = compensator_coeffs(&grid, path, n, c + s * half);
                let e = combination_norm_sq(&coeffs, &f, &h, &k).max(0.0) / tau;
                integral += w * half * e.powf(r / 2.0);
            }
        }
        x[n] = x[n - 1] + integral;
    }
    Ok(ExtrapolationSample { x, y })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StoppingRule {
    Deterministic {
        step: usize,
    },
    /// First `M` with `Y_M ≥ level`, capped at `N`.
    YHit {
        level: f64,
    },
    /// One step before the `Y` hitting time.
    YHitBefore {
        level: f64,
    },
    /// First `X` hit, or one step before the `Y` hit, whichever comes first.
    XHitOrYHitBefore {
        x_level: f64,
        y_level: f64,
    },
}

fn hit(seq: &[f64], level: f64) -> Option<usize> {
    seq.iter().position(|&v| v >= level)
}

impl StoppingRule {
    pub fn stop(&self, s: &ExtrapolationSample) -> usize {
        let big_n = s.x.len() - 1;
        let before = |level: f64| hit(&s.y, level).map_or(big_n, |m| m.saturating_sub(1));
        match *self {
            Self::Deterministic { step } => step.min(big_n),
            Self::YHit { level } => hit(&s.y, level).unwrap_or(big_n),
            Self::YHitBefore { level } => before(level),
            Self::XHitOrYHitBefore { x_level, y_level } => hit(&s.x, x_level).unwrap_or(big_n).min(before(y_level)),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Self::Deterministic { step } => format!("n = {step}"),
            Self::YHit { level } => format!("Y hits {level:.6e}"),
            Self::YHitBefore { level } => format!("Y hits {level:.6e}, minus one"),
            Self::XHitOrYHitBefore { x_level, y_level } => {
                format!("X hits {x_level:.6e} or Y hits {y_level:.6e} minus one")
            }
        }
    }
}

/// Quantile by linear interpolation of the sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, t) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - t) + sorted[i + 1] * t
    } else {
        sorted[i]
    }
}

/// Deterministic times `1..=N` plus threshold rules with levels taken from calibration quantiles.
pub fn stopping_family(calibration: &[ExtrapolationSample], n_steps: usize) -> Vec<StoppingRule> {
    let mut rules: Vec<StoppingRule> = (1..=n_steps).map(|step| StoppingRule::Deterministic { step }).collect();
    let sorted = |f: fn(&ExtrapolationSample) -> f64| {
        let mut v: Vec<f64> = calibration.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    if calibration.is_empty() {
        return rules;
    }
    let ys = sorted(|s| *s.y.last().unwrap());
    let xs = sorted(|s| *s.x.last().unwrap());
    let y_levels: Vec<f64> = [0.1, 0.25, 0.5, 0.75, 0.9]
        .iter()
        .map(|&q| quantile(&ys, q))
        .filter(|&v| v > 0.0)
        .collect();
    let x_levels: Vec<f64> = [0.25, 0.5, 0.75]
        .iter()
        .map(|&q| quantile(&xs, q))
        .filter(|&v| v > 0.0)
        .collect();
    for &level in &y_levels {
        rules.push(StoppingRule::YHit { level });
        rules.push(StoppingRule::YHitBefore { level });
    }
    for &x_level in &x_levels {
        for &y_level in &y_levels {
            rules.push(StoppingRule::XHitOrYHitBefore { x_level, y_level });
        }
    }
    rules
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RuleRatio {
    pub rule: StoppingRule,
    pub label: String,
    pub mean_x: Estimate,
    pub mean_y: Estimate,
    pub ratio: f64,
    pub ratio_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtrapolationReport {
    pub samples: usize,
    pub exponent: f64,
    pub k: f64,
    /// Analytic bound on the domination constant for this grid.
    pub calibrated_c: f64,
    /// Largest `E[X_𝔫]/E[Y_𝔫]` over the tested rules.
    pub measured_c: f64,
    pub measured_c_se: f64,
    pub worst_rule: String,
    pub domination_margin: f64,
    pub domination_margin_se: f64,
    pub corollary_lhs: Estimate,
    pub corollary_rhs: f64,
    pub corollary_margin: f64,
    pub corollary_margin_se: f64,
    pub rules: Vec<RuleRatio>,
}

impl ExtrapolationReport {
    /// Both margins positive with `sigmas` standard errors to spare.
    pub fn passes(&self, sigmas: f64) -> bool {
        self.domination_margin > sigmas * self.domination_margin_se
            && self.corollary_margin > sigmas * self.corollary_margin_se
    }
}

fn double_factorial(k: u32) -> f64 {
    (1..=k).rev().step_by(2).map(f64::from).product()
}

/// `max(1, N τ (r−1)!! / 3^{r/2})` for even `r`.
pub fn calibrated_constant(r: f64, n_steps: usize, tau: f64) -> Result<f64> {
    if r < 2.0 || r.fract() != 0.0 || (r as u32) % 2 != 0 {
        return invalid(format!("the moment bound needs an even exponent, got {r}"));
    }
    let moment = double_factorial(r as u32 - 1);
    Ok((n_steps as f64 * tau * moment / 3f64.powf(r / 2.0)).max(1.0))
}

/// `x̄/ȳ` with a delta-method standard error.
fn ratio_of_means(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (Estimate::of(x).mean, Estimate::of(y).mean);
    if my == 0.0 {
        return (0.0, 0.0);
    }
    let r = mx / my;
    let var: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx - r * (b - my)).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    (r, (var / n).sqrt() / my)
}

pub fn extrapolation_check(
    samples: &[ExtrapolationSample],
    calibration: &[ExtrapolationSample],
    r: f64,
    tau: f64,
    k: f64,
) -> Result<ExtrapolationReport> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: samples.len(),
            need: MIN_SAMPLES,
        });
    }
    if !(k > 0.0 && k < 1.0) {
        return invalid(format!("moment exponent must lie in (0, 1), got {k}"));
    }
    let len = samples[0].x.len();
    if len < 2
        || samples
            .iter()
            .chain(calibration)
            .any(|s| s.x.len() != len || s.y.len() != len)
    {
        return invalid("samples on mixed time grids");
    }
    let n_steps = len - 1;
    let calibrated_c = calibrated_constant(r, n_steps, tau)?;

    let rules: Vec<RuleRatio> = stopping_family(calibration, n_steps)
        .into_iter()
        .map(|rule| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = samples
                .iter()
                .map(|s| {
                    let m = rule.stop(s);
                    (s.x[m], s.y[m])
                })
                .unzip();
            let (ratio, ratio_se) = ratio_of_means(&xs, &ys);
            RuleRatio {
                rule,
                label: rule.label(),
                mean_x: Estimate::of(&xs),
                mean_y: Estimate::of(&ys),
                ratio,
                ratio_se,
            }
        })
        .collect();
    let worst = rules
        .iter()
        .max_by(|a, b| a.ratio.total_cmp(&b.ratio))
        .expect("family contains deterministic times");
    let measured_c = worst.ratio;

    let factor = (1.0 + measured_c - k) / (1.0 - k);
    let xk: Vec<f64> = samples.iter().map(|s| s.x[n_steps].powf(k)).collect();
    let yk: Vec<f64> = samples.iter().map(|s| s.y[n_steps].powf(k)).collect();
    let lhs = Estimate::of(&xk);
    let rhs = factor * Estimate::of(&yk).mean;
    let (corollary_margin, corollary_margin_se) = if rhs == 0.0 {
        (if lhs.mean == 0.0 { 1.0 } else { f64::NEG_INFINITY }, 0.0)
    } else {
        let (q, q_se) = ratio_of_means(&xk, &yk);
        (1.0 - q / factor, q_se / factor)
    };

    Ok(ExtrapolationReport {
        samples: samples.len(),
        exponent: r,
        k,
        calibrated_c,
        measured_c,
        measured_c_se: worst.ratio_se,
        worst_rule: worst.label.clone(),
        domination_margin: (calibrated_c - measured_c) / calibrated_c,
        domination_margin_se: worst.ratio_se / calibrated_c,
        corollary_lhs: lhs,
        corollary_rhs: rhs,
        corollary_margin,
        corollary_margin_se,
        rules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::Discretization;
    use crate::noise::compensator::compensator_variances;
    use crate::noise::{sample_rng, Modulation, NoiseRule, TimeGrid};
    use crate::stepper::NewtonOptions;
    use crate::tensor::PowerLaw;

    fn u0(x: [f64; 2]) -> [f64; 2] {
        crate::noise::curl_bubble(0, x[0], x[1])
    }

    fn samples(amp: f64, count: usize, seed: u64) -> (f64, Vec<ExtrapolationSample>) {
        let disc = Discretization::new(2).unwrap();
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let model = NoiseModel::new(NoiseRule::Linear, Modulation::Constant, amp, 2).unwrap();
        let mut st = Stepper::new(
            &disc,
            grid,
            PowerLaw::new(2.0, 0.0).unwrap(),
            model,
            NewtonOptions::default(),
        );
        let out = (0..count)
            .map(|i| {
                let path = WienerPath::sample(1.0, grid.tau() / 4.0, 2, &mut sample_rng(seed, i as u64)).unwrap();
                extrapolation_sample(&mut st, disc.initial_velocity(u0), &path, 4.0).unwrap()
            })
            .collect();
        (grid.tau(), out)
    }

    #[test]
    fn calibrated_constant_values() {
        assert_eq!(calibrated_constant(4.0, 16, 1.0 / 17.0).unwrap(), 1.0);
        let c = calibrated_constant(4.0, 99, 0.1).unwrap();
        assert!((c - 3.3).abs() < 1e-12);
        assert!((calibrated_constant(2.0, 30, 0.2).unwrap() - 2.0).abs() < 1e-12);
        assert!(calibrated_constant(3.0, 4, 0.1).is_err());
    }

    #[test]
    fn gauss_rule_integrates_degree_nine() {
        let f = |t: f64| t.powi(9) + 3.0 * t.powi(8) - t.powi(3);
        let (a, b) = (0.2, 1.7);
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let q: f64 = GAUSS5.iter().map(|(s, w)| w * h * f(c + s * h)).sum();
        let exact = |t: f64| t.powi(10) / 10.0 + t.powi(9) / 3.0 - t.powi(4) / 4.0;
        assert!((q - (exact(b) - exact(a))).abs() < 1e-12);
    }

    #[test]
    fn processes_are_monotone_and_vanish_without_noise() {
        let (_, zero) = samples(0.0, 3, 1);
        for s in &zero {
            assert!(s.x.iter().chain(&s.y).all(|&v| v == 0.0));
        }
        let (_, some) = samples(0.5, 3, 1);
        for s in &some {
            assert!(s.x.windows(2).all(|w| w[1] >= w[0]));
            assert!(s.y.windows(2).all(|w| w[1] >= w[0]));
            assert_eq!(s.x[0], 0.0);
            assert!(*s.x.last().unwrap() > 0.0 && *s.y.last().unwrap() > 0.0);
        }
    }

    #[test]
    fn stopping_rules() {
        let s = ExtrapolationSample {
            x: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            y: vec![0.0, 0.0, 5.0, 5.0, 7.0],
        };
        assert_eq!(StoppingRule::Deterministic { step: 9 }.stop(&s), 4);
        assert_eq!(StoppingRule::YHit { level: 5.0 }.stop(&s), 2);
        assert_eq!(StoppingRule::YHit { level: 8.0 }.stop(&s), 4);
        assert_eq!(StoppingRule::YHitBefore { level: 6.0 }.stop(&s), 3);
        assert_eq!(StoppingRule::YHitBefore { level: 0.0 }.stop(&s), 0);
        let r = StoppingRule::XHitOrYHitBefore {
            x_level: 1.5,
            y_level: 6.0,
        };
        assert_eq!(r.stop(&s), 2);
    }

    #[test]
    fn too_few_samples_are_refused() {
        let (tau, s) = samples(0.5, 3, 2);
        assert!(matches!(
            extrapolation_check(&s, &s, 4.0, tau, 0.5),
            Err(Error::InsufficientSamples {
                got: 3,
                need: MIN_SAMPLES
            })
        ));
    }

    #[test]
    fn zero_noise_gives_unit_margins() {
        let s = vec![
            ExtrapolationSample {
                x: vec![0.0; 5],
                y: vec![0.0; 5]
            };
            MIN_SAMPLES
        ];
        let rep = extrapolation_check(&s, &s[..10], 4.0, 0.2, 0.5).unwrap();
        assert_eq!(rep.domination_margin, 1.0);
        assert_eq!(rep.corollary_margin, 1.0);
        assert!(rep.passes(3.0));
    }

    #[test]
    fn ratio_standard_error_matches_delta_method_on_proportional_data() {
        let x: Vec<f64> = (1..=50).map(|i| 2.0 * i as f64).collect();
        let y: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let (r, se) = ratio_of_means(&x, &y);
        assert!((r - 2.0).abs() < 1e-14 && se < 1e-14);
    }

    #[test]
    fn compensator_moment_bound_holds_pathwise_in_expectation() {
        // E‖Ē(t)‖² ≤ (τ/3) max(‖G_n‖², ‖G_{n+1}‖²) for additive noise at the window edges.
        let grid = TimeGrid::new(1.0, 4).unwrap();
        for n in 1..=4 {
            let (lo, hi) = grid.window(n);
            for t in [lo, 0.5 * (lo + hi), hi] {
                let (va, vb) = compensator_variances(&grid, n, t);
                assert!(va + vb <= grid.tau() / 3.0 + 1e-15);
            }
        }
    }
}
