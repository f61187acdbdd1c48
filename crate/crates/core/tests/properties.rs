use locoman_core::attention::{cross_attention, FeatureMap, TextEmbedding};
use locoman_core::geometry::{
    pinch_distance_to_gripper, teleop_base_map, teleop_ee_map, wrap_angle, GripperCommand, PinchThresholds, Pose,
    TeleopConfig,
};
use locoman_core::harness::replace_word;
use locoman_core::skills::{detect_termination, label_end_signal, TerminationConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn pose() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.05f64..1.0,
        -3.1f64..3.1,
        prop::array::uniform3(-2.0f64..2.0),
    )
        .prop_map(|(axis, bias, angle, t)| {
            Pose::from_axis_angle(Vector3::new(axis[0], axis[1], axis[2] + bias), angle, Vector3::from(t))
        })
}

proptest! {
    #[test]
    fn ee_map_copies_rotation_and_scales_translation(p in pose(), scale in 0.1f64..5.0) {
        let cfg = TeleopConfig { translation_scale: scale, ..Default::default() };
        let m = teleop_ee_map(&p, &cfg).unwrap();
        prop_assert_eq!(m.rotation, p.rotation);
        prop_assert!((m.translation - p.translation * scale).amax() <= 1e-12);
    }

    #[test]
    fn base_speed_is_bounded_and_monotone(x in -1.0f64..1.0, y in -1.0f64..1.0, k in 1.0f64..3.0) {
        let cfg = TeleopConfig::default();
        let v = |s: f64| teleop_base_map(&Pose::from_planar(s * x, s * y, 0.0, 0.0), true, &cfg).linear_velocity.norm();
        prop_assert!(v(1.0) <= cfg.max_linear_speed + 1e-12);
        prop_assert!(v(k) + 1e-12 >= v(1.0));
        prop_assert!(teleop_base_map(&Pose::from_planar(x, y, 0.0, 0.0), false, &cfg).is_zero());
    }

    #[test]
    fn pinch_has_hysteresis(d in 0.0f64..0.1, closed in any::<bool>()) {
        let th = PinchThresholds::default();
        let prev = GripperCommand { closed };
        let next = pinch_distance_to_gripper(d, &th, prev);
        let expected = if d < th.close { true } else if d > th.open { false } else { closed };
        prop_assert_eq!(next.closed, expected);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let turns = (a - w) / std::f64::consts::TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity(p in pose(), q in pose()) {
        let r = p.compose(&q).compose(&q.inverse());
        prop_assert!(r.approx_eq(&p, 1e-9));
    }

    #[test]
    fn attention_is_a_bounded_cosine(
        data in prop::collection::vec(-10.0f64..10.0, 3 * 4 * 5),
        text in prop::collection::vec(-1.0f64..1.0, 5),
        a in 0.01f64..100.0,
    ) {
        prop_assume!(text.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let f = FeatureMap::new(3, 4, 5, data).unwrap();
        let t = TextEmbedding::new("q", text).unwrap();
        let att = cross_attention(&f, &t).unwrap();
        prop_assert!(att.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let scaled = cross_attention(&f.scaled(a), &t).unwrap();
        for (x, y) in att.values.iter().zip(&scaled.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn appending_never_moves_termination(
        values in prop::collection::vec(0.0f64..1.0, 0..80),
        tail in prop::collection::vec(0.0f64..1.0, 0..40),
    ) {
        let cfg = TerminationConfig { window: 3, ..Default::default() };
        let before = detect_termination(&values, &cfg);
        let mut longer = values.clone();
        longer.extend(tail);
        let after = detect_termination(&longer, &cfg);
        if before.is_some() {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn labels_are_a_suffix_of_ones(len in 0usize..300, buffer in 1usize..40) {
        let cfg = TerminationConfig { label_buffer: buffer, ..Default::default() };
        let labels = label_end_signal(len, &cfg);
        prop_assert_eq!(labels.len(), len);
        let ones = labels.iter().filter(|&&l| l == 1).count();
        prop_assert_eq!(ones, len.min(buffer));
        prop_assert!(labels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn word_replacement_respects_boundaries(
        words in prop::collection::vec(prop::sample::select(vec!["trash", "trashcan", "the", "bin", "a"]), 0..12),
    ) {
        let text = words.join(" ");
        let out = replace_word(&text, "trash", "can");
        let expected: Vec<&str> = words.iter().map(|w| if *w == "trash" { "can" } else { *w }).collect();
        prop_assert_eq!(out, expected.join(" "));
    }
}
