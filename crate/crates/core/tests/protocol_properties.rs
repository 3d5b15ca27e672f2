use ftmsec_core::protocol::{
    check_unforgeability, counter_reuse_in, run_session, validate_transcript, AdversaryKnowledge, AdversaryScript,
    KeyKind, KeyParams, KeySetup, SessionConfig, StationPolicy,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [KeyKind; 5] = [
    KeyKind::Wpa2Personal,
    KeyKind::Wpa3Sae,
    KeyKind::PasnStandalone,
    KeyKind::PasnOverAuth,
    KeyKind::Enterprise,
];

fn setup(kind: usize, knowledge: u8) -> KeySetup {
    KeySetup {
        kind: KINDS[kind],
        params: KeyParams::default(),
        knowledge: AdversaryKnowledge {
            knows_passphrase: knowledge & 1 != 0,
            observes_handshake: knowledge & 2 != 0,
            active_mitm: knowledge & 4 != 0,
        },
    }
}

fn policy(strict: bool) -> StationPolicy {
    if strict {
        StationPolicy::strict()
    } else {
        StationPolicy::permissive()
    }
}

fn script(seed: u64) -> AdversaryScript {
    AdversaryScript::random(&mut ChaCha8Rng::seed_from_u64(seed), 5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn strict_policies_never_downgrade(s in any::<u64>(), kind in 0usize..5, know in 0u8..8) {
        let p = StationPolicy::strict();
        let r = run_session(&p, &p, &setup(kind, know), &script(s), &SessionConfig { n_instances: 4, ..SessionConfig::default() }).unwrap();
        prop_assert!(!r.outcome.downgrade_occurred);
        if r.outcome.negotiated_level.is_some() {
            prop_assert!(r.outcome.secure_ltf_used);
        }
    }

    #[test]
    fn accepted_protected_frames_are_unforgeable(
        s in any::<u64>(), kind in 0usize..5, know in 0u8..8, si in any::<bool>(), sr in any::<bool>(), buggy in any::<bool>()
    ) {
        let cfg = SessionConfig { n_instances: 4, buggy_counter_reuse: buggy, ..SessionConfig::default() };
        let r = run_session(&policy(si), &policy(sr), &setup(kind, know), &script(s), &cfg).unwrap();
        prop_assert!(check_unforgeability(&r).is_ok(), "{:?}", check_unforgeability(&r));
        prop_assert!(validate_transcript(&r.transcript.to_json()).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn counters_never_repeat_outside_buggy_mode(s in any::<u64>(), kind in 0usize..5, know in 0u8..8, strict in any::<bool>()) {
        let cfg = SessionConfig { n_instances: 8, ..SessionConfig::default() };
        let p = policy(strict);
        let r = run_session(&p, &p, &setup(kind, know), &script(s), &cfg).unwrap();
        prop_assert!(!counter_reuse_in(&r.transcript));
        prop_assert!(!r.outcome.counter_reuse_detected);
    }

    #[test]
    fn sessions_are_deterministic(s in any::<u64>(), kind in 0usize..5, know in 0u8..8, seed in any::<u64>()) {
        let cfg = SessionConfig { n_instances: 4, seed, ..SessionConfig::default() };
        let p = StationPolicy::permissive();
        let a = run_session(&p, &p, &setup(kind, know), &script(s), &cfg).unwrap();
        let b = run_session(&p, &p, &setup(kind, know), &script(s), &cfg).unwrap();
        prop_assert_eq!(a.transcript.to_json(), b.transcript.to_json());
        prop_assert_eq!(a.outcome, b.outcome);
    }
}
