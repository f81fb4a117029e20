use qlab_wasm::Scene;

#[test]
fn flat_scene() {
    let s = Scene::new(1.0, 41, &[]).unwrap();
    assert!(s.u().iter().all(|v| v.abs() < 1e-12));
    let d = s.distances(0.0, 0.0).unwrap();
    assert_eq!(d.len(), 41 * 41);
    assert_eq!(d[20 * 41 + 20], 0.0);
    let corner = d[0];
    assert!((corner / 2f64.sqrt() - 1.0).abs() < 0.05, "{corner}");
    let v = s.growth(0.0, 0.0, &[0.25, 0.5]).unwrap();
    assert!((v[1] / v[0] - 4.0).abs() < 0.3, "{v:?}");
}

#[test]
fn bump_scene() {
    let s = Scene::new(1.5, 61, &[0.0, 0.0, 0.5, 0.25]).unwrap();
    let u = s.u();
    assert!(u.iter().any(|v| v.abs() > 1e-3));
    let d = s.distances(0.3, 0.0).unwrap();
    assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
    let v = s.growth(0.0, 0.0, &[0.2, 0.4, 0.8]).unwrap();
    assert!(v.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn bad_input() {
    assert!(Scene::new(1.0, 41, &[0.0, 0.0, 0.5]).is_err());
    assert!(Scene::new(1.0, 1001, &[]).is_err());
    assert!(Scene::new(1.0, 21, &[0.0, 0.0, 0.5, 0.01]).is_err());
    let s = Scene::new(1.0, 21, &[]).unwrap();
    assert!(s.distances(5.0, 0.0).is_err());
}
