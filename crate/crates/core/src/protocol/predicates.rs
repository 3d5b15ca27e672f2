//! Security predicates and structural transcript checks.

use std::collections::HashSet;

use serde::Serialize;
use serde_json::Value;

use super::frame::FrameKind;
use super::keys::Principal;
use super::session::{Event, SessionReport, Transcript, TRANSCRIPT_SCHEMA};
use crate::keyschedule::NULL_SAC;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Predicates {
    pub peer_binding_holds: bool,
    pub downgrade_occurred: bool,
    pub phy_replay_enabled: bool,
    pub availability: u32,
}

/// `intended_peer` is the identity ISTA meant to range with.
pub fn evaluate_predicates(report: &SessionReport, intended_peer: &str) -> Predicates {
    let o = &report.outcome;
    let t = &report.transcript;
    let foreign_accept = t.events.iter().any(|e| match &e.event {
        Event::Accepted { frame_id, by: Principal::Ista } => t
            .frame(*frame_id)
            .is_some_and(|f| f.protected && f.origin.identity() != intended_peer),
        _ => false,
    });
    let negotiated = o.negotiated_level.is_some();
    Predicates {
        peer_binding_holds: o.bound_peer_of_ista == intended_peer && !foreign_accept,
        downgrade_occurred: o.downgrade_occurred,
        phy_replay_enabled: o.counter_reuse_detected || (negotiated && !o.secure_ltf_used),
        availability: o.completed_measurements,
    }
}

/// Two counter-bearing NDPs from the responder with the same counter.
pub fn counter_reuse_in(t: &Transcript) -> bool {
    let mut seen = HashSet::new();
    t.events.iter().any(|e| match &e.event {
        Event::Sent { frame } if frame.kind == FrameKind::Ndp && frame.origin == Principal::Rsta => {
            match (frame.payload.sac, frame.payload.counter) {
                (Some(sac), Some(c)) if sac != NULL_SAC => !seen.insert(c),
                _ => false,
            }
        }
        _ => false,
    })
}

/// Every protected frame a station accepted was built by someone holding
/// the PTK that station verifies with.
pub fn check_unforgeability(report: &SessionReport) -> Result<(), String> {
    let keys = &report.keys;
    for e in &report.transcript.events {
        let Event::Accepted { frame_id, by } = &e.event else {
            continue;
        };
        let f = report
            .transcript
            .frame(*frame_id)
            .ok_or_else(|| format!("accepted frame {frame_id} never appeared"))?;
        if !f.protected {
            continue;
        }
        let verifier = keys
            .context_of(*by)
            .ok_or_else(|| format!("{by:?} accepted protected frame {frame_id} without a PTK"))?;
        if !f.verify(&verifier.ptk) {
            return Err(format!("{by:?} accepted frame {frame_id} with a bad tag"));
        }
        let creator_holds = match f.origin {
            Principal::Adversary => keys.adversary.iter().any(|c| c.ptk == verifier.ptk),
            p => keys.context_of(p).is_some_and(|c| c.ptk == verifier.ptk),
        };
        if !creator_holds {
            return Err(format!(
                "frame {frame_id} accepted by {by:?} was created by {:?} without the PTK",
                f.origin
            ));
        }
    }
    Ok(())
}

const FRAME_FIELDS: [&str; 8] = ["id", "kind", "sender", "receiver", "origin", "protected", "tag", "payload"];

fn required(obj: &serde_json::Map<String, Value>, name: &str, fields: &[&str]) -> Result<(), String> {
    for f in fields {
        if !obj.contains_key(*f) {
            return Err(format!("{name} event lacks `{f}`"));
        }
    }
    Ok(())
}

fn check_frame(v: &Value) -> Result<u64, String> {
    let f = v.as_object().ok_or("frame is not an object")?;
    required(f, "frame", &FRAME_FIELDS)?;
    let protected = f["protected"].as_bool().ok_or("`protected` is not a bool")?;
    if protected != f["tag"].is_string() {
        return Err("tag must be present exactly on protected frames".into());
    }
    f["id"].as_u64().ok_or_else(|| "frame id is not an integer".into())
}

/// Schema check of an exported transcript.
pub fn validate_transcript(json: &str) -> Result<(), String> {
    let v: Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
    if v.get("schema").and_then(Value::as_str) != Some(TRANSCRIPT_SCHEMA) {
        return Err(format!("schema must be {TRANSCRIPT_SCHEMA}"));
    }
    let events = v.get("events").and_then(Value::as_array).ok_or("missing events array")?;
    let mut frames = HashSet::new();
    for (i, ev) in events.iter().enumerate() {
        let obj = ev.as_object().ok_or("event is not an object")?;
        if obj.get("seq").and_then(Value::as_u64) != Some(i as u64) {
            return Err(format!("event {i} has a wrong seq"));
        }
        let name = obj.get("event").and_then(Value::as_str).ok_or("event without a name")?;
        let known_id = |key: &str| -> Result<(), String> {
            let id = obj.get(key).and_then(Value::as_u64).ok_or(format!("{name} lacks `{key}`"))?;
            if frames.contains(&id) {
                Ok(())
            } else {
                Err(format!("event {i} references unknown frame {id}"))
            }
        };
        match name {
            "sent" | "injected" => {
                let id = check_frame(obj.get("frame").ok_or("missing frame")?)?;
                if !frames.insert(id) {
                    return Err(format!("frame id {id} reused"));
                }
                if name == "injected" {
                    required(obj, name, &["how", "rule", "original"])?;
                }
            }
            "blocked" | "mitm_attempt" => {
                known_id("frame_id")?;
                required(obj, name, &["rule"])?;
            }
            "delivered" => {
                known_id("frame_id")?;
                required(obj, name, &["to"])?;
            }
            "accepted" => {
                known_id("frame_id")?;
                required(obj, name, &["by"])?;
            }
            "rejected" => {
                known_id("frame_id")?;
                required(obj, name, &["by", "reason"])?;
            }
            "keys_established" => required(
                obj,
                name,
                &["kind", "ista_ptk", "rsta_ptk", "ista_bound_peer", "adversary_contexts", "mitm"],
            )?,
            "negotiated" => required(obj, name, &["by", "mode", "protected", "secure_ltf"])?,
            "measurement" => required(obj, name, &["instance", "counter", "valid", "distance_m"])?,
            "recovery" => required(obj, name, &["instance", "plan"])?,
            "counter_reuse" => required(obj, name, &["instance", "counter"])?,
            "aborted" | "terminated" => required(obj, name, &["by", "reason"])?,
            other => return Err(format!("unknown event `{other}`")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::adversary::AdversaryScript;
    use crate::protocol::keys::{AdversaryKnowledge, KeyKind, KeyParams};
    use crate::protocol::session::{run_session, KeySetup, SessionConfig, StationPolicy};

    fn honest() -> SessionReport {
        let p = StationPolicy::strict();
        let setup = KeySetup {
            kind: KeyKind::Enterprise,
            params: KeyParams::default(),
            knowledge: AdversaryKnowledge::default(),
        };
        run_session(&p, &p, &setup, &AdversaryScript::empty(), &SessionConfig::default()).unwrap()
    }

    fn mutate(f: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(&honest().transcript.to_json()).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn honest_transcript_validates() {
        let r = honest();
        validate_transcript(&r.transcript.to_json()).unwrap();
        check_unforgeability(&r).unwrap();
        assert!(!counter_reuse_in(&r.transcript));
    }

    #[test]
    fn validator_catches_damage() {
        assert!(validate_transcript("[]").is_err());
        assert!(validate_transcript(&mutate(|v| v["schema"] = "other".into())).is_err());
        assert!(validate_transcript(&mutate(|v| v["events"][3]["seq"] = 99.into())).is_err());
        assert!(validate_transcript(&mutate(|v| v["events"][0]["event"] = "teleported".into())).is_err());
        assert!(validate_transcript(&mutate(|v| v["events"][1]["frame_id"] = 12345.into())).is_err());
        assert!(validate_transcript(&mutate(|v| v["events"][0]["frame"]["tag"] = "ab".into())).is_err());
        assert!(validate_transcript(&mutate(|v| {
            v["events"].as_array_mut().unwrap()[0]
                .as_object_mut()
                .unwrap()
                .remove("frame");
        }))
        .is_err());
    }

    #[test]
    fn unforgeability_flags_adversary_tags() {
        let mut r = honest();
        let accepted = r
            .transcript
            .events
            .iter()
            .find_map(|e| match &e.event {
                Event::Accepted { frame_id, by: Principal::Ista } => Some(*frame_id),
                _ => None,
            })
            .unwrap();
        for e in &mut r.transcript.events {
            if let Event::Sent { frame } = &mut e.event {
                if frame.id == accepted {
                    frame.origin = Principal::Adversary;
                }
            }
        }
        assert!(check_unforgeability(&r).is_err());
        assert!(!evaluate_predicates(&r, "rsta").peer_binding_holds);
    }
}
