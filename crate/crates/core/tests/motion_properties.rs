use breathsteer::haptics::{
    feedback_force, proximity_force, step_handle, HandInput, HandleDynamics, HandleState, HapticConfig, Regime,
};
use breathsteer::phantom::{
    apply_interaction_drift, sample_phantom, AxisMap, BreathingProfile, DriftConfig, Phase, PhantomState,
    RespiratoryTimeline, Segment,
};
use breathsteer::rng::{RngStream, StreamId};
use breathsteer::steering::{
    compose_desired_pose, em_to_base_rotation, is_rotation, rotation_with_x_axis, track_pose, Frame, Pose,
    RobotConfig,
};
use breathsteer::surrogate::{acquire_ground_truth, acquire_surrogate, synchronize, SensorConfig, SyncConfig};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;

fn profile() -> impl Strategy<Value = BreathingProfile> {
    (0.0..30.0f64, 0.0..15.0f64, 1.0..8.0f64, 1.0..4.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(
        |(asi, aap, period, k, bsi, bap)| BreathingProfile {
            amplitude_si_mm: asi,
            amplitude_ap_mm: aap,
            period_s: period,
            waveform_exponent: k,
            baseline_offset_si_mm: bsi,
            baseline_offset_ap_mm: bap,
        },
    )
}

fn regular(duration_s: f64) -> RespiratoryTimeline {
    RespiratoryTimeline::new(
        vec![Segment {
            phase: Phase::Regular,
            duration_s,
        }],
        [0.0, 0.5, 0.9],
    )
    .unwrap()
}

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    vec3(std::f64::consts::PI).prop_map(|v| Rotation3::new(v).into_inner())
}

proptest! {
    #[test]
    fn phantom_is_periodic(p in profile(), t in 0.0..20.0f64) {
        let tl = regular(40.0);
        let a = sample_phantom(&p, &tl, t).unwrap();
        let b = sample_phantom(&p, &tl, t + p.period_s).unwrap();
        prop_assert!((a.d_si - b.d_si).abs() <= 1e-12);
        prop_assert!((a.d_ap - b.d_ap).abs() <= 1e-12);
    }

    #[test]
    fn phantom_stays_between_baseline_and_peak(p in profile(), t in 0.0..40.0f64) {
        let s = sample_phantom(&p, &regular(40.0), t).unwrap();
        let eps = 1e-9;
        prop_assert!(s.d_si >= p.baseline_offset_si_mm - eps && s.d_si <= p.baseline_offset_si_mm + p.amplitude_si_mm + eps);
        prop_assert!(s.d_ap >= p.baseline_offset_ap_mm - eps && s.d_ap <= p.baseline_offset_ap_mm + p.amplitude_ap_mm + eps);
        prop_assert_eq!(s.d_lat, 0.0);
    }

    #[test]
    fn holds_freeze_on_the_breathing_curve(p in profile(), hold in 1u8..=3, t in 0.0..1.0f64) {
        let fractions = [0.1, 0.45, 0.8];
        let tl = RespiratoryTimeline::compensation_then_hold(3.0, hold, 4.0, fractions).unwrap();
        let s = sample_phantom(&p, &tl, 3.0 + 4.0 * t).unwrap();
        let start = sample_phantom(&p, &tl, 3.0).unwrap();
        prop_assert_eq!(s.phase, Phase::BreathHold(hold));
        prop_assert_eq!((s.d_si, s.d_ap), (start.d_si, start.d_ap));
        let on_curve = sample_phantom(&p, &regular(10.0), fractions[hold as usize - 1] * p.period_s).unwrap();
        prop_assert!((s.d_si - on_curve.d_si).abs() < 1e-9);
        prop_assert!((s.d_ap - on_curve.d_ap).abs() < 1e-9);
    }

    #[test]
    fn drift_walk_replays_from_its_seed(seed in any::<u64>(), steps in 1usize..200) {
        let cfg = DriftConfig { enabled: true, rate_mm_per_s: 5.0 };
        let walk = |seed| {
            let mut rng = RngStream::new(seed, StreamId::Drift);
            let mut s = PhantomState { t: 0.0, d_si: 0.0, d_ap: 0.0, d_lat: 0.0, phase: Phase::BreathHold(1) };
            for _ in 0..steps {
                s = apply_interaction_drift(s, &cfg, true, 0.01, &mut rng);
            }
            s.d_lat
        };
        prop_assert_eq!(walk(seed), walk(seed));
    }

    #[test]
    fn composed_pose_moves_by_the_rotated_displacement(
        r0 in rotation(), r in rotation(), t0 in vec3(100.0), d in vec3(20.0),
    ) {
        let initial = Pose::end_effector(r0, t0).unwrap();
        let p = compose_desired_pose(&initial, &r, &d).unwrap();
        prop_assert_eq!(p.rotation, initial.rotation);
        prop_assert_eq!((p.from_frame, p.to_frame), (Frame::EndEffector, Frame::Base));
        prop_assert!((p.translation - initial.translation - r * d).norm() < 1e-9);
        // composing the negated displacement returns the start
        let back = compose_desired_pose(&p, &r, &-d).unwrap();
        prop_assert!((back.translation - initial.translation).norm() < 1e-9);
        prop_assert_eq!(back.rotation, initial.rotation);
    }

    #[test]
    fn sensor_frame_maps_to_the_anatomical_world_axes(d_si in -20.0..20.0f64, d_ap in -20.0..20.0f64, perm in 0usize..6) {
        use breathsteer::phantom::Axis::{X, Y, Z};
        let orders = [[X, Y, Z], [X, Z, Y], [Y, X, Z], [Y, Z, X], [Z, X, Y], [Z, Y, X]];
        let [si, ap, lateral] = orders[perm];
        let axes = AxisMap { si, ap, lateral };
        let r = em_to_base_rotation(&axes);
        prop_assert!(is_rotation(&r));
        let world = r * Vector3::new(0.0, d_ap, d_si);
        prop_assert!((world - axes.to_world(0.0, d_si, d_ap)).norm() < 1e-12);
    }

    #[test]
    fn needle_rotation_keeps_its_axis(axis in vec3(5.0).prop_filter("non-zero", |v| v.norm() > 1e-3)) {
        let r = rotation_with_x_axis(&axis).unwrap();
        prop_assert!(is_rotation(&r));
        prop_assert!((r.column(0) - axis.normalize()).norm() < 1e-12);
    }

    #[test]
    fn tracking_never_overshoots(
        current in vec3(50.0), desired in vec3(50.0),
        bandwidth in 0.1..200.0f64, speed in 1.0..500.0f64, dt in 1e-4..0.1f64,
    ) {
        let cfg = RobotConfig { max_speed_mm_per_s: speed, tracking_bandwidth_per_s: bandwidth, control_period_s: dt };
        let pose = |t| Pose::end_effector(Matrix3::identity(), t).unwrap();
        let next = track_pose(&pose(current), &pose(desired), &cfg, dt);
        let before = desired - current;
        let after = desired - next.translation;
        let step = next.translation - current;
        prop_assert!(after.norm() <= before.norm() + 1e-9);
        prop_assert!(after.dot(&before) >= -1e-9, "passed the desired pose");
        prop_assert!(step.norm() <= speed * dt + 1e-9);
        prop_assert_eq!(next.rotation, Matrix3::identity());
    }

    #[test]
    fn rendered_force_respects_the_cap(
        x in -100.0..100.0f64, v in -1000.0..1000.0f64, held in -50.0..50.0f64,
        engaged in any::<bool>(), d in -50.0..80.0f64, cap in 0.5..10.0f64,
    ) {
        let cfg = HapticConfig { force_cap_n: cap, ..HapticConfig::default() };
        let h = HandleState { axial_position_mm: x, axial_velocity_mm_per_s: v, engaged, held_position_mm: held };
        let f = feedback_force(&cfg, &h, d);
        prop_assert!(f.force_n.abs() <= cap);
        if engaged {
            prop_assert!(f.force_n >= 0.0, "an engaged needle is never pulled in");
        }
    }

    #[test]
    fn proximity_resistance_grows_toward_the_target(
        v in 0.0..200.0f64, v2 in 0.0..200.0f64, d in 0.0..40.0f64, d2 in 0.0..40.0f64,
    ) {
        let cfg = HapticConfig::default();
        let (near, far) = if d < d2 { (d, d2) } else { (d2, d) };
        prop_assert!(proximity_force(&cfg, v, near) >= proximity_force(&cfg, v, far));
        let (slow, fast) = if v < v2 { (v, v2) } else { (v2, v) };
        prop_assert!(proximity_force(&cfg, fast, d) >= proximity_force(&cfg, slow, d));
    }

    #[test]
    fn retraction_and_far_motion_are_free(v in -200.0..0.0f64, far_v in 0.0..200.0f64, d in 40.0..500.0f64) {
        let cfg = HapticConfig::default();
        let h = |vel| HandleState { axial_position_mm: 0.0, axial_velocity_mm_per_s: vel, engaged: true, held_position_mm: 0.0 };
        let back = feedback_force(&cfg, &h(v), 10.0);
        prop_assert_eq!((back.regime, back.force_n), (Regime::Proximity, 0.0));
        prop_assert_eq!(feedback_force(&cfg, &h(far_v), d).force_n, 0.0);
    }

    #[test]
    fn constant_push_settles_at_force_over_stiffness(push in 0.1..4.5f64, kp in 0.5..5.0f64) {
        let cfg = HapticConfig { wall_kp_n_per_mm: kp, ..HapticConfig::default() };
        let dynamics = HandleDynamics::default();
        let dt = 1e-3;
        let mut h = HandleState::at_rest(0.0);
        let mut fb = feedback_force(&cfg, &h, 0.0);
        for _ in 0..8000 {
            h = step_handle(&h, HandInput::Push(push), fb.force_n, &dynamics, dt);
            fb = feedback_force(&cfg, &h, -h.axial_position_mm);
        }
        prop_assert_eq!(fb.regime, Regime::Wall);
        prop_assert!((h.axial_position_mm - push / kp).abs() < 1e-3, "{} vs {}", h.axial_position_mm, push / kp);
    }
}

fn training_traces(clock_offset_s: f64) -> (Vec<breathsteer::surrogate::SurrogateSample>, Vec<breathsteer::surrogate::GroundTruthSample>) {
    let p = BreathingProfile::default();
    let tl = RespiratoryTimeline::training(12.0, 5.0, 1.0, [0.0, 0.5, 0.9]).unwrap();
    let mut rng = RngStream::new(3, StreamId::TrainingSensor);
    let s = acquire_surrogate(&p, &tl, &SensorConfig::ideal(), clock_offset_s, &mut rng).unwrap();
    let g = acquire_ground_truth(&p, &tl, 15.0).unwrap();
    (s, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synchronization_recovers_any_clock_shift(shift in -0.5..0.5f64) {
        let (s, g) = training_traces(shift);
        let pair = synchronize(&s, &g, &SyncConfig::default()).unwrap();
        prop_assert!((pair.alignment_offset_s + shift).abs() <= 1e-3 + 1e-12, "{} for shift {shift}", pair.alignment_offset_s);
    }
}

#[test]
fn delayed_surrogate_is_advanced_by_its_delay() {
    let (s, g) = training_traces(-0.2);
    let pair = synchronize(&s, &g, &SyncConfig::default()).unwrap();
    assert!((pair.alignment_offset_s - 0.2).abs() <= 1e-3, "{}", pair.alignment_offset_s);
    // aligned samples sit on the ground-truth clock and reproduce it
    for (sv, gv) in pair.surrogate.iter().zip(&pair.ground_truth) {
        assert_eq!(sv.t, gv.t);
        assert!((sv.s_z - gv.d_si).abs() < 0.2, "{} vs {} at {}", sv.s_z, gv.d_si, gv.t);
    }
}

#[test]
fn drift_disabled_or_disengaged_leaves_the_phantom_alone() {
    let s = PhantomState {
        t: 0.0,
        d_si: 1.0,
        d_ap: 2.0,
        d_lat: 0.5,
        phase: Phase::BreathHold(2),
    };
    let mut rng = RngStream::new(1, StreamId::Drift);
    let on = DriftConfig::default();
    let off = DriftConfig { enabled: false, ..on };
    assert_eq!(apply_interaction_drift(s, &off, true, 0.01, &mut rng), s);
    assert_eq!(apply_interaction_drift(s, &on, false, 0.01, &mut rng), s);
    assert_ne!(apply_interaction_drift(s, &on, true, 0.01, &mut rng).d_lat, s.d_lat);
}
