use breathsteer::haptics::Regime;
use breathsteer::phantom::Phase;
use breathsteer::session::{HandleCommand, SessionStep, StateSnapshot};
use breathsteer_bridge::{decode, encode, ErrorCode, Message, ProtocolError, Role};
use nalgebra::Vector3;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e6f64..1e6
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (finite(), finite(), finite()).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn snapshot() -> impl Strategy<Value = StateSnapshot> {
    let step = prop_oneof![
        Just(SessionStep::Training),
        Just(SessionStep::Compensating),
        Just(SessionStep::Inserting),
        Just(SessionStep::Done)
    ];
    let phase = prop_oneof![Just(Phase::Regular), (1u8..=3).prop_map(Phase::BreathHold)];
    let regime = prop_oneof![Just(Regime::Proximity), Just(Regime::Wall), Just(Regime::Idle)];
    (
        (0f64..1e4, 0usize..10, step, phase),
        (finite(), finite(), finite()),
        (vec3(), vec3(), vec3()),
        (finite(), finite(), -5f64..5.0, regime),
    )
        .prop_map(|((t, insertion, step, phase), (d_si, d_ap, d_lat), (tip, desired, target), (dist, handle, force, regime))| {
            StateSnapshot {
                t,
                insertion,
                step,
                phase,
                d_si_mm: d_si,
                d_ap_mm: d_ap,
                d_lat_mm: d_lat,
                needle_tip_mm: tip,
                desired_tip_mm: desired,
                target_mm: target,
                distance_to_target_mm: dist,
                handle_position_mm: handle,
                force_n: force,
                regime,
            }
        })
}

fn message() -> impl Strategy<Value = Message> {
    let code = prop_oneof![
        Just(ErrorCode::Protocol),
        Just(ErrorCode::Handshake),
        Just(ErrorCode::SlotTaken),
        Just(ErrorCode::InvalidCommand),
        Just(ErrorCode::ReadOnly),
        Just(ErrorCode::QueueFull)
    ];
    prop_oneof![
        prop_oneof![Just(Role::Operator), Just(Role::Observer)].prop_map(|role| Message::Hello { role }),
        snapshot().prop_map(Message::Snapshot),
        (0f64..1e4, finite(), any::<bool>()).prop_map(|(t, x, engaged)| Message::Command(HandleCommand {
            t,
            axial_position_mm: x,
            engaged
        })),
        (code, "\\PC{0,40}").prop_map(|(code, detail)| Message::Error { code, detail }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(msg in message()) {
        prop_assert_eq!(decode(&encode(&msg)).unwrap(), msg);
    }

    #[test]
    fn any_strict_prefix_is_rejected(msg in message(), cut in 1usize..64) {
        let frame = encode(&msg);
        let body_start = frame.find(':').unwrap() + 1;
        let keep = frame.len().saturating_sub(cut).max(body_start);
        if keep < frame.len() && frame.is_char_boundary(keep) {
            let is_truncated = matches!(decode(&frame[..keep]), Err(ProtocolError::Truncated { .. }));
            prop_assert!(is_truncated);
        }
    }
}
