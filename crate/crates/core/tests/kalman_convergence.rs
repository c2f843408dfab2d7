use aiv_core::geom::BBox;
use aiv_core::tracking::KalmanState;

/// A box moving at constant velocity, observed without noise. The analytic
/// trajectory is `c0 + v * t` for the center and a constant size.
fn truth(t: f64) -> (f64, f64, f64, f64) {
    (50.0 + 3.5 * t, 80.0 - 1.25 * t, 40.0, 30.0)
}

#[test]
fn converges_to_analytic_trajectory_in_twenty_steps() {
    let (cx, cy, w, h) = truth(0.0);
    let mut kf = KalmanState::initiate(&BBox::from_center(cx, cy, w, h).unwrap());
    for step in 1..=20 {
        let (cx, cy, w, h) = truth(step as f64);
        kf = kf.predict().update(&BBox::from_center(cx, cy, w, h).unwrap()).unwrap();
    }
    let (cx, cy, w, h) = truth(20.0);
    let (ex, ey) = kf.center();
    assert!((ex - cx).abs() < 1e-6 && (ey - cy).abs() < 1e-6, "center ({ex}, {ey}) vs ({cx}, {cy})");
    let b = kf.bbox();
    assert!((b.w() - w).abs() < 1e-6 && (b.h() - h).abs() < 1e-6);
    let v = kf.velocity();
    assert!((v[0] - 3.5).abs() < 1e-6 && (v[1] + 1.25).abs() < 1e-6, "velocity {v:?}");
    assert!(v[2].abs() < 1e-6 && v[3].abs() < 1e-6);

    // one more prediction lands on the next analytic point
    let (nx, ny, _, _) = truth(21.0);
    let (px, py) = kf.predict().center();
    assert!((px - nx).abs() < 1e-6 && (py - ny).abs() < 1e-6);
}
