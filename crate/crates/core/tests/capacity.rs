#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use brinkhom::capacity::*;
use brinkhom::geometry::HoleShape;
use brinkhom::Error;

fn ball(r: f64) -> HoleShape {
    HoleShape::Ball { radius: r }
}

/// Force on a sphere of radius `a` translating with unit speed inside a
/// fixed concentric sphere of radius 1, per unit viscosity.
fn concentric_drag(a: f64) -> f64 {
    let k = (1.0 - a.powi(5)) / (1.0 - 2.25 * a + 2.5 * a.powi(3) - 2.25 * a.powi(5) + a.powi(6));
    6.0 * PI * a * k
}

#[test]
fn concentric_oracle_reduces_to_stokes_drag() {
    assert!((concentric_drag(1e-6) / (6.0 * PI * 1e-6) - 1.0).abs() < 1e-5);
    assert!((concentric_drag(0.5) - 68.7454).abs() < 1e-4);
}

#[test]
fn mirrored_solution_is_itself() {
    let opts = CellOptions { symmetry: Symmetry::Full, ..CellOptions::uniform(24, 1e-10) };
    let sol = solve_cell_problem_with(&ball(0.5), &opts).unwrap();
    let dims = sol.grid.dims();
    let n = dims.0[1];
    let v = &sol.v[0];
    let scale = v.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut worst = 0.0f64;
    for d in 0..3 {
        let fd = dims.faces(d);
        for idx in 0..fd.len() {
            let mut c = fd.coords(idx);
            let sign = if d == 1 { -1.0 } else { 1.0 };
            c[1] = if d == 1 { n - c[1] } else { n - 1 - c[1] };
            worst = worst.max((v[d][idx] - sign * v[d][fd.index_of(c)]).abs());
        }
    }
    assert!(worst <= 1e-7 * scale, "asymmetry {worst} of {scale}");
}

#[test]
fn ball_capacity_is_isotropic_and_matches_the_oracle() {
    let sol = solve_cell_problem(&ball(0.5), 32, 1e-8).unwrap();
    for (m, d) in sol.residuals {
        assert!(m <= 1e-8 && d <= 1e-8);
    }
    let c = capacity_matrix(&sol);
    assert!(c.asymmetry <= 1e-6);
    let diag = c.entries[0][0];
    for j in 0..3 {
        assert!((c.entries[j][j] / diag - 1.0).abs() < 1e-8);
        for l in 0..3 {
            if j != l {
                assert!(c.entries[j][l].abs() <= 1e-3 * diag);
            }
        }
    }
    assert!((diag / concentric_drag(0.5) - 1.0).abs() < 0.05, "C11 = {diag}");
}

#[test]
fn graded_capacity_converges() {
    let coarse = capacity_matrix(&solve_cell_problem_with(&ball(0.5), &CellOptions::graded(16, 1e-8)).unwrap());
    let fine = capacity_matrix(&solve_cell_problem_with(&ball(0.5), &CellOptions::graded(32, 1e-8)).unwrap());
    let (a, b) = (coarse.entries[0][0], fine.entries[0][0]);
    assert!((a / b - 1.0).abs() <= 0.03, "{a} vs {b}");
    assert!(b > a, "refinement should raise the capacity: {a} then {b}");
    assert!((b / concentric_drag(0.5) - 1.0).abs() < 0.025);
}

#[test]
fn larger_obstacle_has_larger_capacity() {
    let small = capacity_matrix(&solve_cell_problem(&ball(0.5), 32, 1e-8).unwrap());
    let large = capacity_matrix(&solve_cell_problem(&ball(0.6), 32, 1e-8).unwrap());
    for xi in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]] {
        assert!(small.quad(xi) <= large.quad(xi), "{xi:?}");
    }
}

#[test]
fn ellipsoid_capacity_is_anisotropic() {
    let shape = HoleShape::Ellipsoid { semi_axes: [0.6, 0.5, 0.4] };
    let c = capacity_matrix(&solve_cell_problem(&shape, 32, 1e-8).unwrap());
    let d = [c.entries[0][0], c.entries[1][1], c.entries[2][2]];
    // translation along the long axis meets the least resistance
    assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    assert!(c.asymmetry <= 1e-6);
    assert!(c.eigenvalues()[0] > 1e-6 * c.trace());
}

#[test]
fn obstacle_touching_the_ball_is_rejected() {
    match solve_cell_problem(&ball(0.99), 32, 1e-8) {
        Err(Error::Precondition(_)) => {}
        other => panic!("expected a precondition error, got {:?}", other.map(|s| s.cells)),
    }
}

#[test]
fn non_critical_alpha_names_the_critical_case() {
    let err = brinkman_matrix(&ball(0.5), 0.5, 2.0, &[0.2, 0.1], 8, 1e-8).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    assert!(err.to_string().contains("critical"), "{err}");
}

#[test]
fn radii_must_decrease() {
    assert!(brinkman_matrix(&ball(0.5), 0.5, 3.0, &[0.1, 0.2], 8, 1e-8).is_err());
    assert!(brinkman_matrix(&ball(0.5), 0.5, 3.0, &[0.1], 8, 1e-8).is_err());
}

#[test]
fn brinkman_matrix_json_round_trips() {
    let b = BrinkmanMatrix::isotropic(3.0 * PI);
    assert!(b.validate().is_ok());
    assert_eq!(BrinkmanMatrix::from_json(&b.to_json()).unwrap(), b);
}
