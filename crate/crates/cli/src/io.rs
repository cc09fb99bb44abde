use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use pstokes::fem::Discretization;
use pstokes::noise::{TimeGrid, WienerPath};
use pstokes::sparse::Csr;
use pstokes::stepper::Trajectory;

use crate::harness::{Outcome, RunReport};
use crate::HarnessError;

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct Timing {
    wall_clock_seconds: f64,
    workers: usize,
}

#[derive(Serialize)]
struct LevelRow {
    h: f64,
    tau: f64,
    p: f64,
    kappa: f64,
    seed: u64,
    samples: usize,
    statistic: String,
    mean: f64,
    se: f64,
}

#[derive(Serialize)]
struct RateRow<'a> {
    quantity: &'a str,
    axis: &'a str,
    p: f64,
    kappa: f64,
    seed: u64,
    slope: f64,
    intercept: f64,
    residual: f64,
    slope_se: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    points: usize,
    window_lo: Option<f64>,
    window_hi: Option<f64>,
    pass: Option<bool>,
}

fn level_rows(report: &RunReport) -> Vec<LevelRow> {
    let c = &report.config;
    let row = |h: f64, tau: f64, statistic: &str, mean: f64, se: f64| LevelRow {
        h,
        tau,
        p: c.physics.p,
        kappa: c.physics.kappa,
        seed: c.experiment.seed,
        samples: c.experiment.samples,
        statistic: statistic.into(),
        mean,
        se,
    };
    let mut rows = Vec::new();
    match &report.outcome {
        Outcome::SingleRun(s) => {
            for l in &s.levels {
                let (h, t) = (l.level.h, l.level.tau);
                rows.push(row(h, t, "energy_residual_max", l.energy_residual_max, 0.0));
                rows.push(row(h, t, "divergence_max", l.divergence_max, 0.0));
                rows.push(row(
                    h,
                    t,
                    "decomposition_residual",
                    l.pressure_worst.decomposition_residual,
                    0.0,
                ));
                rows.push(row(
                    h,
                    t,
                    "multiplier_agreement",
                    l.pressure_worst.multiplier_agreement,
                    0.0,
                ));
            }
        }
        Outcome::Stability(s) => {
            for l in &s.levels {
                let (h, t) = (l.level.h, l.level.tau);
                let st = &l.stats;
                rows.push(row(h, t, "e_max", st.e_max.mean, st.e_max.se));
                rows.push(row(h, t, "dissipation", st.dissipation.mean, st.dissipation.se));
                rows.push(row(h, t, "besov_u_max_of_mean", st.besov_u, 0.0));
                rows.push(row(
                    h,
                    t,
                    "besov_u_mean_of_max",
                    st.besov_u_strong.mean,
                    st.besov_u_strong.se,
                ));
                if let Some(p) = &st.pressure {
                    rows.push(row(h, t, "det_increment", p.det_increment.mean, p.det_increment.se));
                    rows.push(row(h, t, "sto_max", p.sto_max.mean, p.sto_max.se));
                    for (r, v) in &p.sto_besov {
                        rows.push(row(h, t, &format!("sto_besov_{r}_max_of_mean"), *v, 0.0));
                    }
                    for (r, v) in &p.sto_besov_strong {
                        rows.push(row(h, t, &format!("sto_besov_{r}_mean_of_max"), v.mean, v.se));
                    }
                }
            }
        }
        Outcome::Convergence(cv) => {
            for l in &cv.levels {
                let (h, t) = (l.level.h, l.level.tau);
                let s = &l.stats;
                for (name, e) in [
                    ("natural_err", s.natural_err),
                    ("vgrad_err", s.vgrad_err),
                    ("c_init", s.c_init),
                    ("c_linf", s.c_linf),
                    ("c_best", s.c_best),
                    ("c_g", s.c_g),
                    ("c_v", s.c_v),
                ] {
                    rows.push(row(h, t, name, e.mean, e.se));
                }
                rows.push(row(h, t, "besov_err", s.besov_err, 0.0));
            }
        }
        Outcome::Extrapolation(e) => {
            let r = &e.report;
            let (h, t) = (e.level.h, e.level.tau);
            rows.push(row(h, t, "calibrated_c", r.calibrated_c, 0.0));
            rows.push(row(h, t, "measured_c", r.measured_c, r.measured_c_se));
            rows.push(row(
                h,
                t,
                "domination_margin",
                r.domination_margin,
                r.domination_margin_se,
            ));
            rows.push(row(h, t, "corollary_margin", r.corollary_margin, r.corollary_margin_se));
            rows.push(row(h, t, "corollary_lhs", r.corollary_lhs.mean, r.corollary_lhs.se));
        }
    }
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// `results.json`, `timing.json`, `levels.csv` and, for convergence studies, `rates.csv`.
pub fn write_report(dir: &Path, report: &RunReport, workers: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let results = dir.join("results.json");
    write_json(&results, report)?;
    written.push(results);
    let timing = dir.join("timing.json");
    write_json(
        &timing,
        &Timing {
            wall_clock_seconds: report.wall_clock,
            workers,
        },
    )?;
    written.push(timing);
    let levels = dir.join("levels.csv");
    write_csv(&levels, &level_rows(report))?;
    written.push(levels);
    if let Outcome::Convergence(cv) = &report.outcome {
        let c = &report.config;
        let rows: Vec<RateRow> = cv
            .rates
            .iter()
            .map(|r| RateRow {
                quantity: &r.quantity,
                axis: &r.axis,
                p: c.physics.p,
                kappa: c.physics.kappa,
                seed: c.experiment.seed,
                slope: r.fit.slope,
                intercept: r.fit.intercept,
                residual: r.fit.residual,
                slope_se: r.fit.slope_se,
                ci_lo: r.fit.ci95.map(|c| c.0),
                ci_hi: r.fit.ci95.map(|c| c.1),
                points: r.fit.points,
                window_lo: r.window.map(|w| w.0),
                window_hi: r.window.map(|w| w.1).filter(|v| v.is_finite()),
                pass: r.pass,
            })
            .collect();
        let rates = dir.join("rates.csv");
        write_csv(&rates, &rows)?;
        written.push(rates);
    }
    Ok(written)
}

const PATH_MAGIC: &[u8; 8] = b"PSTKWPTH";
const TRAJ_MAGIC: &[u8; 8] = b"PSTKTRAJ";

struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn bad_record(path: &Path, what: &str) -> HarnessError {
    HarnessError::Config(format!("{}: {what}", path.display()))
}

fn open(path: &Path) -> Result<LeReader<std::io::BufReader<File>>> {
    Ok(LeReader {
        inner: std::io::BufReader::new(File::open(path).map_err(io_err(path))?),
    })
}

/// Little-endian record: magic, `δ`, `T`, `M`, cell count, then the increments mode by mode.
pub fn write_path(path: &Path, w: &WienerPath) -> Result<()> {
    let mut f = create(path)?;
    let body = |f: &mut BufWriter<File>| -> std::io::Result<()> {
        f.write_all(PATH_MAGIC)?;
        put_f64s(f, &[w.fine_step(), w.t_final()])?;
        f.write_all(&(w.n_modes() as u64).to_le_bytes())?;
        f.write_all(&(w.n_cells() as u64).to_le_bytes())?;
        for k in 0..w.n_modes() {
            put_f64s(f, w.mode(k))?;
        }
        f.flush()
    };
    body(&mut f).map_err(io_err(path))
}

pub fn read_path(path: &Path) -> Result<WienerPath> {
    let mut r = open(path)?;
    let e = io_err(path);
    let run = |r: &mut LeReader<_>| -> std::io::Result<Option<(f64, f64, Vec<Vec<f64>>)>> {
        if &r.bytes::<8>()? != PATH_MAGIC {
            return Ok(None);
        }
        let (d, t) = (r.f64()?, r.f64()?);
        let (m, n) = (r.u64()? as usize, r.u64()? as usize);
        let inc = (0..m).map(|_| r.f64s(n)).collect::<std::io::Result<_>>()?;
        Ok(Some((d, t, inc)))
    };
    let (d, t, inc) = run(&mut r)
        .map_err(e)?
        .ok_or_else(|| bad_record(path, "not a Wiener path record"))?;
    Ok(WienerPath::from_increments(t, d, inc)?)
}

/// Little-endian record: magic, cells, `T`, `N`, reduced dimension, then `u_0 .. u_N`.
pub fn write_checkpoint(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = create(path)?;
    let dim = traj.states.first().map_or(0, Vec::len);
    let body = |f: &mut BufWriter<File>| -> std::io::Result<()> {
        f.write_all(TRAJ_MAGIC)?;
        f.write_all(&(traj.cells as u64).to_le_bytes())?;
        put_f64s(f, &[traj.grid.t_final()])?;
        f.write_all(&(traj.n_steps() as u64).to_le_bytes())?;
        f.write_all(&(dim as u64).to_le_bytes())?;
        for s in &traj.states {
            put_f64s(f, s)?;
        }
        f.flush()
    };
    body(&mut f).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Trajectory> {
    let mut r = open(path)?;
    let run = |r: &mut LeReader<_>| -> std::io::Result<Option<(usize, f64, usize, Vec<Vec<f64>>)>> {
        if &r.bytes::<8>()? != TRAJ_MAGIC {
            return Ok(None);
        }
        let cells = r.u64()? as usize;
        let t = r.f64()?;
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let states = (0..=n).map(|_| r.f64s(dim)).collect::<std::io::Result<_>>()?;
        Ok(Some((cells, t, n, states)))
    };
    let (cells, t, n, states) = run(&mut r)
        .map_err(io_err(path))?
        .ok_or_else(|| bad_record(path, "not a trajectory checkpoint"))?;
    Ok(Trajectory {
        cells,
        grid: TimeGrid::new(t, n)?,
        states,
        noise_loads: None,
        multipliers: None,
        reports: Vec::new(),
    })
}

/// Legacy ASCII unstructured grid of the refined mesh with vertex velocities.
pub fn write_vtk(path: &Path, disc: &Discretization, state: &[f64], time: f64) -> Result<()> {
    let sp = &disc.sp;
    let full = sp.extend(&disc.expand(state));
    let mesh = &sp.mesh;
    let mut f = create(path)?;
    let body = |f: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(f, "# vtk DataFile Version 3.0")?;
        writeln!(f, "velocity t={time}")?;
        writeln!(f, "ASCII")?;
        writeln!(f, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(f, "POINTS {} double", mesh.n_vertices())?;
        for v in &mesh.vertices {
            writeln!(f, "{} {} 0", v[0], v[1])?;
        }
        let nt = mesh.n_triangles();
        writeln!(f, "CELLS {nt} {}", 4 * nt)?;
        for t in &mesh.triangles {
            writeln!(f, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(f, "CELL_TYPES {nt}")?;
        for _ in 0..nt {
            writeln!(f, "5")?;
        }
        writeln!(f, "POINT_DATA {}", mesh.n_vertices())?;
        writeln!(f, "VECTORS velocity double")?;
        for v in 0..mesh.n_vertices() {
            writeln!(f, "{} {} 0", full[2 * v], full[2 * v + 1])?;
        }
        f.flush()
    };
    body(&mut f).map_err(io_err(path))
}

/// MatrixMarket coordinate format, one-based indices.
pub fn write_matrix_market(path: &Path, a: &Csr) -> Result<()> {
    let mut f = create(path)?;
    let body = |f: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(f, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(f, "{} {} {}", a.nrows, a.ncols, a.nnz())?;
        for r in 0..a.nrows {
            for (c, v) in a.row(r) {
                writeln!(f, "{} {} {:e}", r + 1, c + 1, v)?;
            }
        }
        f.flush()
    };
    body(&mut f).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pstokes::noise::sample_rng;

    #[test]
    fn path_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let w = WienerPath::sample(1.0, 0.125, 3, &mut sample_rng(4, 0)).unwrap();
        write_path(&p, &w).unwrap();
        assert_eq!(read_path(&p).unwrap(), w);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 8 + 4 * 8 + 3 * 8 * 8);
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0.125);
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let traj = Trajectory {
            cells: 2,
            grid: TimeGrid::new(0.5, 2).unwrap(),
            states: vec![vec![1.0, -2.0], vec![0.5, 0.25], vec![1e-300, 3.0]],
            noise_loads: None,
            multipliers: None,
            reports: Vec::new(),
        };
        write_checkpoint(&p, &traj).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.states, traj.states);
        assert_eq!(back.grid, traj.grid);
        assert!(read_path(&p).is_err());
    }

    #[test]
    fn matrix_market_lists_every_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtx");
        let a = Csr::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, -2.5)]);
        write_matrix_market(&p, &a).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "2 3 2");
        assert_eq!(lines[3], "2 3 -2.5e0");
    }

    #[test]
    fn vtk_has_consistent_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.vtk");
        let d = Discretization::new(1).unwrap();
        let c = vec![0.0; d.dim_div_free()];
        write_vtk(&p, &d, &c, 0.0).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("POINTS 6 double"));
        assert!(text.contains("CELLS 6 24"));
        assert!(text.contains("POINT_DATA 6"));
    }
}
