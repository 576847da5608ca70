use std::f64::consts::PI;

use brinkhom::capacity::{capacity_record, BrinkmanMatrix, CellOptions};
use brinkhom::field::FaceField;
use brinkhom::geometry::{enumerate_holes, rasterize, DomainSpec, GridMask, HoleShape};
use brinkhom::mac::Side;
use brinkhom::stokes::{dissipation, solve_brinkman_steady, solve_stokes_perforated, SteadySolver};

// v* = curl(psi e3) with psi = sin^2(pi x) sin^2(pi y) sin(pi z), p* = cos cos cos
fn exact_velocity(x: [f64; 3]) -> [f64; 3] {
    let sz = (PI * x[2]).sin();
    [
        PI * (PI * x[0]).sin().powi(2) * (2.0 * PI * x[1]).sin() * sz,
        -PI * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin().powi(2) * sz,
        0.0,
    ]
}

fn manufactured_forcing(x: [f64; 3], mu: f64) -> [f64; 3] {
    let (sx, cx) = (PI * x[0]).sin_cos();
    let (sy, cy) = (PI * x[1]).sin_cos();
    let (sz, cz) = (PI * x[2]).sin_cos();
    let p3 = PI.powi(3);
    let lap1 = 0.5 * p3 * (2.0 * PI * x[1]).sin() * sz * (9.0 * (2.0 * PI * x[0]).cos() - 5.0);
    let lap2 = -0.5 * p3 * (2.0 * PI * x[0]).sin() * sz * (9.0 * (2.0 * PI * x[1]).cos() - 5.0);
    [-mu * lap1 - PI * sx * cy * cz, -mu * lap2 - PI * cx * sy * cz, -PI * cx * cy * sz]
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let mu = 0.8;
    let mut errors = Vec::new();
    for n in [16, 32, 64] {
        let mask = GridMask::hole_free(DomainSpec::unit_cube(), n).unwrap();
        let g = mask.grid();
        let f = FaceField::from_fn(&g, |x| manufactured_forcing(x, mu));
        let sol = solve_stokes_perforated(&mask, &f, mu, 1e-10).unwrap();
        let exact = FaceField::from_fn(&g, exact_velocity);
        errors.push(sol.velocity.l2_distance(&exact).unwrap() / exact.l2_norm());
    }
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((1.7..=2.3).contains(&order), "order {order}, errors {errors:?}");
    }
}

#[test]
fn zero_forcing_gives_zero_brinkman_flow() {
    let dom = DomainSpec::unit_cube();
    let g = dom.grid(8).unwrap();
    let sol =
        solve_brinkman_steady(&dom, 8, &FaceField::zeros(&g), 1.0, &BrinkmanMatrix::isotropic(5.0), 1e-8).unwrap();
    assert_eq!(sol.velocity.max_abs(), 0.0);
}

#[test]
fn brinkman_without_friction_is_hole_free_stokes() {
    let dom = DomainSpec::unit_cube();
    let mask = GridMask::hole_free(dom, 16).unwrap();
    let f = FaceField::from_fn(&mask.grid(), |x| [x[1] * x[2], (4.0 * x[0]).sin(), 1.0]);
    let tol = 1e-9;
    let a = solve_stokes_perforated(&mask, &f, 1.3, tol).unwrap();
    let b = solve_brinkman_steady(&dom, 16, &f, 1.3, &BrinkmanMatrix::zero(), tol).unwrap();
    let diff = a.velocity.l2_distance(&b.velocity).unwrap();
    assert!(diff <= tol * a.velocity.l2_norm(), "difference {diff}");
}

#[test]
fn dissipation_pairing_examples() {
    let g = DomainSpec::unit_cube().grid(8).unwrap();
    let e1 = FaceField::constant(&g, [1.0, 0.0, 0.0]);
    let zero = FaceField::zeros(&g);
    assert!((dissipation(&e1, &e1).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(dissipation(&zero, &e1).unwrap(), 0.0);
    assert_eq!(dissipation(&e1, &zero).unwrap(), 0.0);
    let other = DomainSpec::unit_cube().grid(4).unwrap();
    assert!(dissipation(&e1, &FaceField::zeros(&other)).is_err());
}

#[test]
fn stronger_friction_dissipates_less_work() {
    let dom = DomainSpec::unit_cube();
    let g = dom.grid(16).unwrap();
    let f = FaceField::from_fn(&g, |x| [(PI * x[1]).sin(), -(PI * x[0]).sin(), 0.5]);
    let d = BrinkmanMatrix::isotropic(3.0 * PI);
    let work: Vec<f64> = [1.0, 10.0, 100.0]
        .iter()
        .map(|s| {
            let sol = solve_brinkman_steady(&dom, 16, &f, 1.0, &d.scaled(*s), 1e-9).unwrap();
            dissipation(&sol.velocity, &f).unwrap()
        })
        .collect();
    assert!(work[0] > work[1] && work[1] > work[2], "{work:?}");
}

#[test]
fn perforated_flow_is_zero_extended_with_gauged_pressure() {
    let lat = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.5, HoleShape::Ball { radius: 0.5 }).unwrap();
    let mask = rasterize(&lat, 24).unwrap();
    let g = mask.grid();
    let f = FaceField::from_fn(&g, |x| [1.0 + x[1], x[2] * x[0], -x[0]]).restricted(&mask).unwrap();
    let sol = solve_stokes_perforated(&mask, &f, 1.0, 1e-9).unwrap();
    assert_eq!(sol.velocity.max_on_solid(&mask), 0.0);
    let fluid_only = sol.velocity.restricted(&mask).unwrap();
    assert_eq!(fluid_only.l2_norm(), sol.velocity.l2_norm());
    let dims = g.dims();
    let (mut mean, mut vol, mut pmax) = (0.0, 0.0, 0.0f64);
    for c in 0..dims.len() {
        if !mask.is_solid(c) {
            let v = g.cell_volume(dims.coords(c));
            mean += v * sol.pressure.values[c];
            vol += v;
            pmax = pmax.max(sol.pressure.values[c].abs());
        } else {
            assert_eq!(sol.pressure.values[c], 0.0);
        }
    }
    assert!((mean / vol).abs() <= 1e-12 * pmax);
    assert!(sol.velocity.divergence().l2_norm() < 1e-7 * sol.velocity.l2_norm() * 24.0);
}

#[test]
fn drag_on_a_small_ball_matches_its_capacity() {
    // one ball per unit cell of a simple cubic array: mirror planes on the
    // sides and zero-pressure planes at both ends
    let a = 0.1;
    let lat = enumerate_holes(DomainSpec::unit_cube(), 1.0, 3.0, HoleShape::Ball { radius: a }).unwrap();
    let mask = rasterize(&lat, 64).unwrap();
    let sides = [[Side::AntiMirror; 2], [Side::Mirror; 2], [Side::Mirror; 2]];
    let mu = 2.0;
    let solver = SteadySolver::perforated_with_sides(&mask, mu, sides).unwrap();
    let e1 = FaceField::constant(solver.grid(), [1.0, 0.0, 0.0]);
    let f = e1.restricted(&mask).unwrap();
    let sol = solver.solve(&f, 1e-8).unwrap();
    let drag = solver.drag(&sol, |c| mask.is_solid(c));
    // momentum balance: the ball carries all the forcing
    let total = dissipation(&f, &e1).unwrap();
    assert!((drag[0] - total).abs() < 1e-6 * total);
    assert!(drag[1].abs() < 1e-8 && drag[2].abs() < 1e-8);
    let approach = dissipation(&sol.velocity, &e1).unwrap();
    // the cell is rescaled so that its circumscribed ball becomes B(0, 1)
    let ell = 3f64.sqrt() / 2.0;
    let cap = capacity_record(&HoleShape::Ball { radius: 1.0 }, a / ell, 16, &CellOptions::graded(16, 1e-8)).unwrap();
    let predicted = mu * ell * cap.capacity.entries[0][0] * approach;
    assert!((drag[0] / predicted - 1.0).abs() < 0.10, "drag {} vs {predicted}", drag[0]);
}
