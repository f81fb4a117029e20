use proptest::prelude::*;
use qlab_core::conformal::{log_potential_u, sharp_constant, Bump, ConformalMetric, QSpec};
use qlab_core::covering::{box_domain, build_cover, VitaliCover};
use qlab_core::geometry::{geodesic_ball, geodesic_distance};
use qlab_core::grid::{Ball, Grid, ScalarField};
use qlab_core::spectral::{eig, kernel_constant, square_function_quadrature, EigCount, WeightedOperator};
use qlab_core::testfn::TestFunctionSet;
use qlab_core::Error;

fn bump_metric(grid: Grid, frac: f64) -> ConformalMetric {
    let c2 = sharp_constant(2).unwrap();
    let q = QSpec::bumps(grid, vec![Bump { center: vec![0.0, 0.0], mass: frac * c2, sigma: 0.25 }]).unwrap();
    log_potential_u(&q, 0.0).unwrap()
}

#[test]
fn positive_curvature_changes_ball_volume() {
    let grid = Grid::new(2, 1.5, 61).unwrap();
    let flat = geodesic_ball(&ConformalMetric::flat(grid), &[0.0, 0.0], 0.5).unwrap();
    let metric = bump_metric(grid, 0.5);
    let bump = geodesic_ball(&metric, &[0.0, 0.0], 0.5).unwrap();
    // u vanishes at the centre of a radial bump and is negative elsewhere
    assert!(metric.u().max() < 1e-9 && metric.u().min() < -0.1);
    assert!(bump.volume < flat.volume, "{} vs {}", bump.volume, flat.volume);
}

#[test]
fn square_function_identity_on_a_bump() {
    let grid = Grid::new(2, 1.5, 41).unwrap();
    let metric = bump_metric(grid, 0.8);
    let op = WeightedOperator::assemble(&metric, &Ball::new(vec![0.1, 0.0], 0.8)).unwrap();
    let dec = eig(&op, EigCount::All).unwrap();
    let fs = TestFunctionSet::generate(2, 4, 3, 1.0);
    for f in &fs.functions {
        let fl = op.restrict(&f.sample(&grid).unwrap().values);
        for alpha in [0.5, 1.0, 1.5] {
            let q = square_function_quadrature(&dec, &fl, alpha).unwrap();
            let expect = kernel_constant(alpha).unwrap() * dec.frac_norm_sq(0.25 * alpha, &fl);
            assert!((q / expect - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn cover_survives_json() {
    let grid = Grid::new(2, 1.0, 41).unwrap();
    let metric = bump_metric(grid, 0.3);
    let cover = build_cover(&metric, &box_domain(&grid, 0.4), 0.04).unwrap();
    assert!(cover.certificate.passes());
    let back = VitaliCover::from_json(&cover.to_json().unwrap()).unwrap();
    assert_eq!(back.points, cover.points);
    assert_eq!(back.certificate, cover.certificate);
}

#[test]
fn errors_are_typed() {
    let grid = Grid::new(2, 1.0, 21).unwrap();
    let q = QSpec::bumps(grid, vec![Bump { center: vec![0.0, 0.0], mass: 1.0, sigma: 0.05 }]);
    assert!(matches!(q, Err(Error::Unresolvable(_))));
    let m = ConformalMetric::flat(grid);
    assert!(matches!(geodesic_distance(&m, &[0.0, 0.0], &[3.0, 0.0]), Err(Error::OutOfBox(_))));
    assert!(matches!(Grid::new(2, 1.0, 2), Err(Error::InvalidGrid(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_fields_round_trip(seed in 0u64..1000, k in 1usize..6) {
        let m = 2 * k + 1;
        let grid = Grid::new(2, 1.0 + seed as f64 / 1000.0, m).unwrap();
        let f = ScalarField::from_fn(grid, |x| (seed as f64 * x[0]).sin() + x[1]).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 24 + 8 * m * m);
        let back = ScalarField::read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(back.values(), f.values());
        prop_assert_eq!(back.grid().halfwidth(), grid.halfwidth());
    }

    #[test]
    fn constant_shift_scales_distances(c in -1.0f64..1.0) {
        let grid = Grid::new(2, 1.0, 21).unwrap();
        let base = ConformalMetric::flat(grid);
        let shifted = base.shifted(c).unwrap();
        let (x, y) = ([-0.5, 0.2], [0.6, -0.3]);
        let d0 = geodesic_distance(&base, &x, &y).unwrap();
        let d1 = geodesic_distance(&shifted, &x, &y).unwrap();
        prop_assert!((d1 / d0 - c.exp()).abs() < 1e-12);
    }
}
