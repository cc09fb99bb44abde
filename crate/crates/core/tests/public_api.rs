use pstokes::fem::Discretization;
use pstokes::mesh::unit_square_mesh;
use pstokes::noise::{
    curl_bubble, sample_coupled, sample_rng, Increments, Modulation, NoiseModel, NoiseRule, TimeGrid, WienerPath,
};
use pstokes::stepper::{NewtonOptions, Recording, Stepper};
use pstokes::tensor::{Mat2, PowerLaw};

#[test]
fn increment_covariance_is_the_tridiagonal_closed_form() {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let tau = grid.tau();
    assert!((grid.weight_inner(1, 1) - 5.0 * tau / 6.0).abs() < 1e-15);
    for n in 2..=64 {
        assert!((grid.weight_inner(n, n) - 2.0 * tau / 3.0).abs() < 1e-15, "n={n}");
        assert!((grid.weight_inner(n - 1, n) - tau / 6.0).abs() < 1e-15, "n={n}");
    }
    assert_eq!(grid.weight_inner(3, 5), 0.0);
}

#[test]
fn weight_inner_matches_midpoint_quadrature() {
    let grid = TimeGrid::new(1.0, 6).unwrap();
    let cells = 200_000;
    let dt = 1.0 / cells as f64;
    for (n, m) in [(1, 1), (1, 2), (3, 3), (4, 5), (6, 6), (2, 5)] {
        let q: f64 = (0..cells)
            .map(|i| {
                let t = (i as f64 + 0.5) * dt;
                grid.weight(n, t) * grid.weight(m, t)
            })
            .sum::<f64>()
            * dt;
        assert!((q - grid.weight_inner(n, m)).abs() < 1e-6, "({n},{m}): {q}");
    }
}

#[test]
fn frozen_power_law_values() {
    let law = PowerLaw::new(3.0, 0.5).unwrap();
    let a = Mat2::new(0.6, 0.8, 0.0, 0.0);
    // |A| = 1, so S = 1.5 A and V = sqrt(1.5) A
    assert!((law.s(&a) - a * 1.5).norm() < 1e-15);
    assert!((law.v(&a) - a * 1.5f64.sqrt()).norm() < 1e-15);
    // phi(1) = int_0^1 (0.5 + s) s ds = 1/4 + 1/3
    assert!((law.phi(1.0) - 7.0 / 12.0).abs() < 1e-14);
}

#[test]
fn mesh_and_alfeld_counts() {
    for m in [1, 2, 4] {
        let mesh = unit_square_mesh(m).unwrap();
        assert_eq!(mesh.n_vertices(), (m + 1) * (m + 1));
        assert_eq!(mesh.n_triangles(), 2 * m * m);
        let fine = mesh.alfeld_split();
        assert_eq!(fine.n_vertices(), (m + 1) * (m + 1) + 2 * m * m);
        assert_eq!(fine.n_triangles(), 6 * m * m);
        let area: f64 = (0..fine.n_triangles()).map(|t| fine.area(t)).sum();
        assert!((area - 1.0).abs() < 1e-14);
    }
}

#[test]
fn deterministic_newtonian_run_dissipates_energy() {
    let disc = Discretization::new(2).unwrap();
    let grid = TimeGrid::new(1.0, 8).unwrap();
    let law = PowerLaw::new(2.0, 0.0).unwrap();
    let noise = NoiseModel::new(NoiseRule::Additive, Modulation::Constant, 0.0, 1).unwrap();
    let mut st = Stepper::new(&disc, grid, law, noise, NewtonOptions::default());
    st.recording = Recording {
        noise_loads: true,
        multipliers: false,
    };
    let u0 = disc.initial_velocity(|x| curl_bubble(0, x[0], x[1]));
    let traj = st.run(u0, &Increments::zeros(grid, 1)).unwrap();
    let e: Vec<f64> = traj.states.iter().map(|c| disc.reduced_norm_sq(c)).collect();
    assert!(e[0] > 0.0);
    assert!(e.windows(2).all(|w| w[1] < w[0]), "{e:?}");
    let res = st.energy_identity_residuals(&traj).unwrap();
    assert!(res.iter().all(|&r| r < 1e-9));
}

#[test]
fn coupled_increments_are_reproducible_from_the_seed() {
    let grid = TimeGrid::new(1.0, 5).unwrap();
    let draw = || {
        let path = WienerPath::sample(1.0, grid.tau() / 4.0, 2, &mut sample_rng(3, 9)).unwrap();
        sample_coupled(&grid, &path).unwrap()
    };
    let (a, b) = (draw(), draw());
    for k in 0..2 {
        assert_eq!(a.mode(k), b.mode(k));
    }
}
