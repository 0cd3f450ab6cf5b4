//! Randomized invariants of the public API.

use nalgebra::DMatrix;
use proptest::prelude::*;
use varhom::dirichlet::{
    homogenization_error, solve_heterogeneous, unit_cell_averages, BoundaryData, DirichletProblem, Rhs, Shape,
};
use varhom::fields::{cell_phase, sample_field, CellBox, EnsembleSpec, Phase};
use varhom::grid::{
    adjointness_residual, discrete_divergence, helmholtz_project, solenoidal_param, spectral_divergence, Boundary,
    Grid2, GridField, Location, PeriodicField, TriadicCube,
};
use varhom::homogenize::Ensemble;
use varhom::subadd::{check_partition, solve_mu, solve_mu0, solve_mu0_from, Medium, SolverParams};
use varhom::varrep::{
    check_monotone, convexity_window, fitzpatrick, make_linear_representative, recover_monotone_map, FitzpatrickParams,
    Integrand, LinearRepresentative, TableSpec,
};

/// `A = L L^T + 0.5 I` (symmetric positive) and a skew `M`.
fn linear_rep(l: [f64; 3], m: f64) -> LinearRepresentative {
    let a11 = l[0] * l[0] + 0.5;
    let a12 = l[0] * l[1];
    let a22 = l[1] * l[1] + l[2] * l[2] + 0.5;
    make_linear_representative(2, &[a11, a12, a12, a22], &[0.0, m, -m, 0.0]).unwrap()
}

fn small_ensemble(seed: u64) -> Ensemble {
    let spec = EnsembleSpec::checkerboard(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, seed).unwrap();
    Ensemble::new("prop", spec, TableSpec { bound: 2.0, points: 5 }).unwrap()
}

fn coord() -> impl Strategy<Value = f64> {
    -2.0..2.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_representative_bounds_pairing(l in prop::array::uniform3(-1.5..1.5f64), m in -1.0..1.0f64,
                                            p in prop::array::uniform2(coord()), q in prop::array::uniform2(coord())) {
        let f = linear_rep(l, m);
        let v = f.value(&p, &q).unwrap();
        prop_assert!(v - (p[0] * q[0] + p[1] * q[1]) >= -1e-12 * (1.0 + v.abs()));
        let a = f.map().apply(&p);
        let on = f.value(&p, &a).unwrap();
        prop_assert!((on - (p[0] * a[0] + p[1] * a[1])).abs() <= 1e-10 * (1.0 + on.abs()));
    }

    #[test]
    fn linear_representative_is_self_dual(l in prop::array::uniform3(-1.5..1.5f64), m in -1.0..1.0f64) {
        // F(z) = z.Hz/2 has conjugate w.H^-1 w/2, so self-duality is H^-1 = J H J with J swapping p and q
        let f = linear_rep(l, m);
        let h = f.joint_hessian().clone();
        let inv = h.clone().try_inverse().unwrap();
        let mut j = DMatrix::<f64>::zeros(4, 4);
        for i in 0..2 {
            j[(i, i + 2)] = 1.0;
            j[(i + 2, i)] = 1.0;
        }
        let swapped = &j * &h * &j;
        prop_assert!((inv - swapped).amax() <= 1e-9 * (1.0 + h.amax()));
    }

    #[test]
    fn linear_representative_window(l in prop::array::uniform3(-1.5..1.5f64), m in -1.0..1.0f64, seed in 0u64..1000) {
        let f = linear_rep(l, m);
        let big = 2.0 * f.map().lambda + 1.0;
        let c = convexity_window(&f, big, 50, 2.0, seed, 1e-8);
        prop_assert_eq!(c.violations + c.errors, 0);
    }

    #[test]
    fn recovered_map_matches_and_is_monotone(l in prop::array::uniform3(-1.5..1.5f64), m in -1.0..1.0f64,
                                             p in prop::array::uniform2(coord())) {
        let f = linear_rep(l, m);
        let exact = f.map().apply(&p);
        let got = recover_monotone_map(&f, &p).unwrap();
        prop_assert!((got[0] - exact[0]).abs() + (got[1] - exact[1]).abs() <= 1e-8 * (1.0 + exact[0].abs() + exact[1].abs()));
        let big = 2.0 * f.map().lambda + 1.0;
        let rep = check_monotone(&|x: &[f64]| recover_monotone_map(&f, x), 2, 4.0 * big, 20, 2.0, 7);
        prop_assert_eq!(rep.violations, 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fitzpatrick_is_the_smallest_representative(l in prop::array::uniform3(-1.0..1.0f64), m in -0.5..0.5f64,
                                                  p in prop::array::uniform2(coord()), q in prop::array::uniform2(coord())) {
        let f = linear_rep(l, m);
        let map = f.map();
        let lam = map.lambda;
        let fz = fitzpatrick(map, FitzpatrickParams::for_lambda(lam));
        let a = fz.value(&p, &q).unwrap();
        let b = f.value(&p, &q).unwrap();
        prop_assert!(a <= b + 1e-7 * (1.0 + b.abs()));
        prop_assert!(a >= p[0] * q[0] + p[1] * q[1] - 1e-7 * (1.0 + a.abs()));
    }

    #[test]
    fn samples_are_stationary(seed in 0u64..10_000, zx in -40i64..40, zy in -40i64..40, lx in -5i64..5, ly in -5i64..5) {
        let spec = EnsembleSpec::checkerboard(vec![Phase::linear(1.0), Phase::linear(2.0), Phase::linear(4.0)], 4.0, 3).unwrap();
        let r = CellBox::new([lx, ly], [lx + 4, ly + 3]).unwrap();
        let a = sample_field(&spec, r, seed).unwrap();
        let b = sample_field(&spec, r.translate([zx, zy]), seed).unwrap();
        for c in r.cells() {
            let t = [c[0] + zx, c[1] + zy];
            prop_assert_eq!(a.phase_at(c), Some(cell_phase(&spec, seed, c)));
            prop_assert_eq!(b.phase_at(t), Some(cell_phase(&spec, seed, t)));
        }
    }

    #[test]
    fn stream_images_are_divergence_free(w in 1usize..5, h in 1usize..5, r in 1usize..4, zero in any::<bool>(), seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let map = solenoidal_param(&[0.0, 0.0], &[w as f64, h as f64], r, zero).unwrap();
        let b = if zero { Boundary::Zero } else { Boundary::Free };
        let mut psi = GridField::from_fn(map.grid, b, |_, _| 0.0);
        for i in 0..=map.grid.nx {
            for j in 0..=map.grid.ny {
                if !(zero && map.grid.is_boundary_node(i, j)) {
                    psi.values[map.grid.node(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let s = map.apply(&psi).unwrap();
        let dv = discrete_divergence(&s).unwrap();
        for i in 0..=map.grid.nx {
            for j in 0..=map.grid.ny {
                if zero || !map.grid.is_boundary_node(i, j) {
                    prop_assert!(dv.values[map.grid.node(i, j)].abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(nx in 2usize..10, ny in 2usize..10, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid2::new([0.0, 0.0], 0.5, nx, ny).unwrap();
        let mut u = GridField::from_fn(grid, Boundary::Zero, |_, _| 0.0);
        for i in 1..nx {
            for j in 1..ny {
                u.values[grid.node(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
        let mut g = GridField::zeros(grid, Location::Cell, 2, Boundary::Free);
        g.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        prop_assert!(adjointness_residual(&u, &g).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn helmholtz_parts_are_orthogonal(nx in 2usize..24, ny in 2usize..24, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut f = PeriodicField::zeros(vec![nx, ny], 0.2);
        for c in f.comps.iter_mut() {
            c.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let parts = helmholtz_project(&f).unwrap();
        let sol = parts.solenoidal();
        let n2 = f.norm() * f.norm();
        prop_assert!(parts.gradient.inner(&sol).abs() <= 1e-10 * n2);
        let back = parts.reconstruct();
        for (a, b) in back.comps.iter().zip(&f.comps) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
        prop_assert!(spectral_divergence(&sol).iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn trimmed_cubes_stay_separated(n in 1u32..=12, r in 1usize..=4, beta in 0.25..3.0f64) {
        let c = TriadicCube::new(2, n, true, beta).unwrap();
        let sep = c.separation_cells(r) as f64 / r as f64;
        prop_assert!(sep >= c.trim_width() - 1e-9);
        prop_assert_eq!(c.cells_per_side(r) % 2, r % 2);
    }

    #[test]
    fn homogenization_error_is_symmetric(seed in 0u64..1000, radius in 1usize..4) {
        use rand::{Rng, SeedableRng};
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pb = DirichletProblem::new(Shape::Box, radius, BoundaryData::Affine { xi: [0.0; 2], c: 0.0 }, Rhs::Constant(0.0)).unwrap();
        let grid = pb.grid();
        let rng = std::cell::RefCell::new(rng);
        let u = GridField::from_fn(grid, Boundary::Zero, |_, _| rng.borrow_mut().random_range(-1.0..1.0));
        let v = GridField::from_fn(grid, Boundary::Zero, |x, y| (x - y).sin());
        let a = homogenization_error(&u, &v, &pb).unwrap();
        prop_assert_eq!(a, homogenization_error(&v, &u, &pb).unwrap());
        prop_assert!(a >= 0.0);
        prop_assert_eq!(homogenization_error(&u, &u, &pb).unwrap(), 0.0);
    }

    #[test]
    fn unit_cell_averages_contract(seed in 0u64..1000, radius in 1usize..4) {
        use rand::{Rng, SeedableRng};
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pb = DirichletProblem::new(Shape::Box, radius, BoundaryData::Affine { xi: [0.0; 2], c: 0.0 }, Rhs::Constant(0.0)).unwrap();
        let rng = std::cell::RefCell::new(rng);
        let u = GridField::from_fn(pb.grid(), Boundary::Free, |_, _| rng.borrow_mut().random_range(-1.0..1.0));
        prop_assert!(unit_cell_averages(&u, &pb).unwrap().holds(1e-10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn mu_stays_below_pairing_plus_mu0(seed in 0u64..1000, z in prop::array::uniform4(-1.0..1.0f64), w in prop::array::uniform4(-2.0..2.0f64)) {
        let ens = small_ensemble(1);
        let medium = ens.medium(1, seed).unwrap();
        let cube = TriadicCube::new(2, 1, false, 1.0).unwrap();
        let params = SolverParams::default();
        let (p, q) = ([z[0], z[1]], [z[2], z[3]]);
        let (qs, ps) = ([w[0], w[1]], [w[2], w[3]]);
        let (mu, a) = solve_mu(&medium, &cube, qs, ps, &params).unwrap();
        let (mu0, b) = solve_mu0(&medium, &cube, p, q, &params).unwrap();
        let pairing = p[0] * qs[0] + p[1] * qs[1] + ps[0] * q[0] + ps[1] * q[1];
        prop_assert!(mu <= pairing + mu0 + a.residual + b.residual);
    }

    #[test]
    fn mu0_minimizer_is_unique(seed in 0u64..1000, z in prop::array::uniform4(-1.0..1.0f64), start in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let ens = small_ensemble(2);
        let medium = ens.medium(1, seed).unwrap();
        let cube = TriadicCube::new(2, 1, false, 1.0).unwrap();
        let params = SolverParams::default();
        let (p, q) = ([z[0], z[1]], [z[2], z[3]]);
        let (e1, a) = solve_mu0(&medium, &cube, p, q, &params).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(start);
        let init: Vec<f64> = a.state.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let (e2, b) = solve_mu0_from(&medium, &cube, p, q, &params, Some(&init)).unwrap();
        prop_assert!((e1 - e2).abs() <= a.residual + b.residual + 1e-10);
        // strict convexity: both runs land on the same averages
        let dq = (a.q_avg[0] - b.q_avg[0]).abs() + (a.q_avg[1] - b.q_avg[1]).abs();
        prop_assert!(dq <= 1e-3, "q averages differ by {dq}");
    }

    #[test]
    fn mu0_subadditive_and_mu_superadditive(seed in 0u64..1000, z in prop::array::uniform4(-1.0..1.0f64), w in prop::array::uniform4(-1.0..1.0f64)) {
        let ens = small_ensemble(3);
        let medium = ens.medium(1, seed).unwrap();
        let cube = TriadicCube::new(2, 1, false, 1.0).unwrap();
        let rep = check_partition(&medium, &cube, [z[0], z[1]], [z[2], z[3]], [w[0], w[1]], [w[2], w[3]], &SolverParams::default()).unwrap();
        prop_assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn linear_media_scale_linearly(seed in 0u64..1000, t in 0.2..3.0f64) {
        let ens = small_ensemble(4);
        let s = sample_field(&ens.spec, CellBox::centered([0, 0], 7).unwrap(), seed).unwrap();
        let medium = Medium::new(s, ens.laws.clone());
        let solve = |xi: [f64; 2]| {
            let pb = DirichletProblem::new(Shape::Box, 3, BoundaryData::Affine { xi, c: 0.0 }, Rhs::Constant(0.0)).unwrap();
            solve_heterogeneous(&medium, &pb).unwrap().u
        };
        let u1 = solve([1.0, 0.5]);
        let ut = solve([t, 0.5 * t]);
        let scale = u1.values.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in u1.values.iter().zip(&ut.values) {
            prop_assert!((t * a - b).abs() <= 1e-6 * t * scale);
        }
    }
}
