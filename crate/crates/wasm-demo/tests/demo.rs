use nsadm_wasm_demo::{detection_curve, Demo};

#[test]
fn power_raises_detection_and_fill_covers_more() {
    let mut d = Demo::new(7, 0, 32, 0.0).unwrap();
    let n = d.width() * d.height();
    assert_eq!(d.ground_truth().len(), n);
    let low = d.mean_detection();
    let low_seen = d.degraded().iter().filter(|v| !v.is_nan()).count();
    d.set_power(20.0).unwrap();
    assert!(d.mean_detection() > low);
    let seen = d.degraded().iter().filter(|v| !v.is_nan()).count();
    assert!(seen >= low_seen);
    let filled = d.reconstruct().unwrap().iter().filter(|v| !v.is_nan()).count();
    assert!(filled >= seen);
    let s = d.scores().unwrap();
    assert_eq!(s.len(), 6);
    assert!(s[5] >= s[2]);
}

#[test]
fn same_inputs_same_measurement() {
    let a = Demo::new(3, 1, 32, 8.0).unwrap();
    let b = Demo::new(3, 1, 32, 8.0).unwrap();
    let bits = |d: &Demo| d.degraded().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn detection_curve_rises_from_false_alarm_rate() {
    let snr: Vec<f64> = (-20..=30).map(f64::from).collect();
    let pd = detection_curve(snr, 1e-4).unwrap();
    assert!(pd.windows(2).all(|w| w[1] >= w[0]));
    assert!((pd[0] - 1e-4).abs() < 1e-4);
    assert!(pd[pd.len() - 1] > 0.999);
}
