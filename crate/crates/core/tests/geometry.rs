#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;

use brinkhom::geometry::*;
use brinkhom::Error;
use proptest::prelude::*;

fn ball(r: f64) -> HoleShape {
    HoleShape::Ball { radius: r }
}

/// Cells `eps * (k + [0,1]^3)` inside the closed box, by scanning every
/// index with `|k|_inf <= ceil(side / eps)`.
fn brute_force_count(domain: DomainSpec, eps: f64) -> usize {
    let reach = (0..3).map(|a| (domain.side(a) / eps).ceil() as i64).max().unwrap();
    let fits = |a: usize, k: i64| {
        let lo = domain.lo[a] + eps * k as f64;
        let hi = lo + eps;
        lo >= domain.lo[a] - 1e-12 && hi <= domain.hi[a] + 1e-9 * eps
    };
    let mut n = 0;
    for i in -reach..=reach {
        for j in -reach..=reach {
            for k in -reach..=reach {
                if fits(0, i) && fits(1, j) && fits(2, k) {
                    n += 1;
                }
            }
        }
    }
    n
}

#[test]
fn centred_ball_volume_is_counted() {
    let l = enumerate_holes(DomainSpec::unit_cube(), 1.0, 1.0, ball(0.25)).unwrap();
    let m = rasterize(&l, 32).unwrap();
    let h: f64 = 1.0 / 32.0;
    let exact = 4.0 / 3.0 * PI * 0.25f64.powi(3) / h.powi(3);
    let counted = m.solid_count() as f64;
    assert!((counted / exact - 1.0).abs() < 0.15, "{counted} cells vs {exact}");
}

#[test]
fn solid_volume_converges_to_the_holes() {
    // eps = 1/2, alpha = 1: eight holes of radius 0.15
    let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.0, ball(0.3)).unwrap();
    let exact = 8.0 * 4.0 / 3.0 * PI * 0.15f64.powi(3);
    for n in [56, 80] {
        let m = rasterize(&l, n).unwrap();
        assert!(m.min_cells_per_radius >= 8.0);
        let vol = m.solid_count() as f64 / (n * n * n) as f64;
        assert!((vol / exact - 1.0).abs() < 0.05, "n = {n}: {vol} vs {exact}");
    }
}

#[test]
fn rasterize_is_deterministic() {
    let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 1.0, HoleShape::Ellipsoid { semi_axes: [0.6, 0.55, 0.5] })
        .unwrap();
    assert_eq!(rasterize(&l, 24).unwrap(), rasterize(&l, 24).unwrap());
}

#[test]
fn tiny_hole_is_unresolved() {
    let l = enumerate_holes(DomainSpec::unit_cube(), 0.5, 5.0, ball(0.5)).unwrap();
    assert!(matches!(rasterize(&l, 64), Err(Error::UnresolvedHole { .. })));
}

#[test]
fn lattice_text_round_trips() {
    let l = enumerate_holes(DomainSpec::new([0.0; 3], [1.0, 1.5, 1.0]).unwrap(), 0.5, 3.0, ball(0.6)).unwrap();
    assert_eq!(l.len(), 12);
    assert_eq!(HoleLattice::from_text(&l.to_text()).unwrap(), l);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hole_count_matches_brute_force(
        sides in prop::array::uniform3(0.3f64..2.0),
        inv_eps in 1u32..7,
    ) {
        let domain = DomainSpec::new([0.0; 3], sides).unwrap();
        let eps = 1.0 / inv_eps as f64;
        let l = enumerate_holes(domain, eps, 3.0, ball(0.5)).unwrap();
        prop_assert_eq!(l.len(), brute_force_count(domain, eps));
        prop_assert_eq!(l.is_empty(), l.warning.is_some());
        for c in &l.centers {
            for a in 0..3 {
                prop_assert!(c[a] - eps / 2.0 >= domain.lo[a] - 1e-12 && c[a] + eps / 2.0 <= domain.hi[a] + 1e-9);
            }
        }
    }
}
