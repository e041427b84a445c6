use aerolite_wasm::{episode_simulation, loss_terms, scene_decision, scene_rgba};

#[test]
fn centered_scene_is_on_course() {
    let d = scene_decision("{}").unwrap();
    assert!(!d.deviating);
    assert_eq!(d.d, Some(0.0));
    assert_eq!(d.objects.len(), 3);
    assert_eq!(scene_rgba("{}").unwrap().len(), 128 * 128 * 4);
}

#[test]
fn offset_beyond_threshold_warns() {
    // Side 32 and δ 0.5: 16 px is the boundary, 17 px deviates.
    let at = scene_decision(r#"{"offset": [16, 0], "qr": false, "noise": 0}"#).unwrap();
    assert_eq!((at.ratio, at.deviating), (Some(0.5), false));
    let past = scene_decision(r#"{"offset": [17, 0], "qr": false, "noise": 0}"#).unwrap();
    assert!(past.deviating && past.reason.is_some());
}

#[test]
fn latency_delays_the_warning() {
    let step = r#""drift": {"Step": {"at": 1.05, "offset": [20, 0]}}, "nest_side": [24, 24]"#;
    let fast = episode_simulation(&format!("{{{step}, \"latency\": 0}}")).unwrap();
    assert_eq!(fast.processed, 50);
    assert_eq!(fast.delay, Some(0.0));
    let slow = episode_simulation(&format!("{{{step}, \"latency\": 0.25}}")).unwrap();
    assert!(slow.processed < 50);
    assert!(slow.delay.unwrap() > 0.0 && slow.delay.unwrap() <= 0.25 + 1e-9);
    assert!(episode_simulation(r#"{"latency": -1}"#).is_err());
}

#[test]
fn loss_terms_match_definitions() {
    let same = loss_terms(r#"{"pred": [10, 10, 4, 4], "gt": [10, 10, 4, 4], "logit": 0, "alpha": 1, "gamma": 0}"#).unwrap();
    assert_eq!(same.iou, 1.0);
    assert!(same.ciou_loss.abs() < 1e-9);
    assert!((same.focal - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((same.cross_entropy - same.focal).abs() < 1e-15);
    let r = loss_terms("{}").unwrap();
    assert!(r.focal < r.cross_entropy && r.ciou < r.iou);
    assert!(loss_terms(r#"{"pred": [0, 0, -1, 2]}"#).is_err());
}
