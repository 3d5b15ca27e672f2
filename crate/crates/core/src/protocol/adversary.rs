//! Dolev-Yao adversary scripts: ordered match/action rules over frames in flight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::frame::{Frame, FrameKind, RangingMode};
use super::keys::Principal;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameMatch {
    pub kind: Option<FrameKind>,
    pub protected: Option<bool>,
    pub sender: Option<Principal>,
    pub instance: Option<u32>,
}

impl FrameMatch {
    pub fn matches(&self, f: &Frame) -> bool {
        self.kind.is_none_or(|k| k == f.kind)
            && self.protected.is_none_or(|p| p == f.protected)
            && self.sender.is_none_or(|s| s == f.sender)
            && self.instance.is_none_or(|i| f.payload.instance == Some(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TamperField {
    /// Flip the low bit of the SAC.
    Sac,
    Counter { value: u64 },
    Mode { value: RangingMode },
    SecureLtfRequired { value: bool },
    T1OffsetPs { value: i64 },
    T4OffsetPs { value: i64 },
}

impl TamperField {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Sac => "sac",
            Self::Counter { .. } => "counter",
            Self::Mode { .. } => "mode",
            Self::SecureLtfRequired { .. } => "secure_ltf_required",
            Self::T1OffsetPs { .. } => "t1_ps",
            Self::T4OffsetPs { .. } => "t4_ps",
        }
    }

    pub fn apply(&self, f: &mut Frame) {
        let p = &mut f.payload;
        match *self {
            Self::Sac => p.sac = Some(p.sac.unwrap_or(0) ^ 1),
            Self::Counter { value } => p.counter = Some(value),
            Self::Mode { value } => p.mode = Some(value),
            Self::SecureLtfRequired { value } => p.secure_ltf_required = Some(value),
            Self::T1OffsetPs { value } => p.t1_ps = p.t1_ps.map(|t| t + value),
            Self::T4OffsetPs { value } => p.t4_ps = p.t4_ps.map(|t| t + value),
        }
    }
}

/// Frame the adversary injects. Header fields default to the matched frame,
/// so a forged FTMR impersonates whoever sent the one it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeSpec {
    pub kind: FrameKind,
    /// Ask for a MAC tag; only valid if the adversary holds the receiver's PTK.
    #[serde(default)]
    pub protected: bool,
    #[serde(default)]
    pub mode: Option<RangingMode>,
    #[serde(default)]
    pub secure_ltf_support: Option<bool>,
    #[serde(default)]
    pub secure_ltf_required: Option<bool>,
    #[serde(default)]
    pub t4_offset_ps: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Block,
    Forge { frame: ForgeSpec },
    /// Deliver the latest earlier capture of the same kind and direction in
    /// place of the matched frame.
    Replay,
    /// Take part in key establishment with each victim separately.
    MitmEstablish,
    Tamper { field: TamperField },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(rename = "match", default)]
    pub when: FrameMatch,
    pub action: Action,
    /// Stop firing after this many matches.
    #[serde(default)]
    pub max_hits: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversaryScript {
    #[serde(default, rename = "rule")]
    pub rules: Vec<Rule>,
}

impl AdversaryScript {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn block_first_ftmr() -> Self {
        Self {
            rules: vec![Rule {
                when: FrameMatch {
                    kind: Some(FrameKind::Ftmr),
                    ..FrameMatch::default()
                },
                action: Action::Block,
                max_hits: Some(1),
            }],
        }
    }

    pub fn attempts_mitm(&self) -> bool {
        self.rules.iter().any(|r| matches!(r.action, Action::MitmEstablish))
    }

    /// Random script over the whole action grammar.
    pub fn random<R: Rng>(rng: &mut R, max_rules: usize) -> Self {
        let n = rng.random_range(0..=max_rules);
        let modes = [RangingMode::Tb, RangingMode::NonTb, RangingMode::Edca];
        let opt_bool = |rng: &mut R| match rng.random_range(0..3) {
            0 => None,
            1 => Some(false),
            _ => Some(true),
        };
        let rules = (0..n)
            .map(|_| {
                let when = FrameMatch {
                    kind: rng
                        .random_bool(0.8)
                        .then(|| FrameKind::ALL[rng.random_range(0..FrameKind::ALL.len())]),
                    protected: opt_bool(rng),
                    sender: match rng.random_range(0..3) {
                        0 => None,
                        1 => Some(Principal::Ista),
                        _ => Some(Principal::Rsta),
                    },
                    instance: rng.random_bool(0.3).then(|| rng.random_range(0..6)),
                };
                let mode = modes[rng.random_range(0..3)];
                let action = match rng.random_range(0..5) {
                    0 => Action::Block,
                    1 => Action::Forge {
                        frame: ForgeSpec {
                            kind: FrameKind::ALL[rng.random_range(0..FrameKind::ALL.len())],
                            protected: rng.random_bool(0.5),
                            mode: rng.random_bool(0.7).then_some(mode),
                            secure_ltf_support: opt_bool(rng),
                            secure_ltf_required: opt_bool(rng),
                            t4_offset_ps: rng.random_bool(0.3).then(|| rng.random_range(-100_000..100_000)),
                        },
                    },
                    2 => Action::Replay,
                    3 => Action::MitmEstablish,
                    _ => Action::Tamper {
                        field: match rng.random_range(0..6) {
                            0 => TamperField::Sac,
                            1 => TamperField::Counter {
                                value: rng.random_range(0..8),
                            },
                            2 => TamperField::Mode { value: mode },
                            3 => TamperField::SecureLtfRequired {
                                value: rng.random_bool(0.5),
                            },
                            4 => TamperField::T1OffsetPs {
                                value: rng.random_range(-100_000..100_000),
                            },
                            _ => TamperField::T4OffsetPs {
                                value: rng.random_range(-100_000..100_000),
                            },
                        },
                    },
                };
                Rule {
                    when,
                    action,
                    max_hits: rng.random_bool(0.5).then(|| rng.random_range(1..4)),
                }
            })
            .collect();
        Self { rules }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::frame::FramePayload;
    use rand::SeedableRng;

    #[test]
    fn rules_parse_from_toml() {
        let s: AdversaryScript = toml::from_str(
            r#"
            [[rule]]
            match = { kind = "lmr", protected = true }
            action = { kind = "tamper", field = { name = "t4_offset_ps", value = -5 } }
            max_hits = 2
            [[rule]]
            action = { kind = "block" }
            "#,
        )
        .unwrap();
        assert_eq!(s.rules.len(), 2);
        assert_eq!(s.rules[0].max_hits, Some(2));
        assert_eq!(s.rules[1].when, FrameMatch::default());
        assert!(toml::from_str::<AdversaryScript>("[[rule]]\naction = { kind = \"teleport\" }").is_err());
    }

    #[test]
    fn matching_and_tampering() {
        let mut f = Frame {
            id: 0,
            kind: FrameKind::Ndp,
            sender: Principal::Rsta,
            receiver: Principal::Ista,
            origin: Principal::Rsta,
            protected: false,
            tag: None,
            payload: FramePayload {
                instance: Some(2),
                sac: Some(6),
                ..FramePayload::default()
            },
        };
        let m = FrameMatch {
            kind: Some(FrameKind::Ndp),
            instance: Some(2),
            ..FrameMatch::default()
        };
        assert!(m.matches(&f));
        assert!(!FrameMatch { protected: Some(true), ..m.clone() }.matches(&f));
        TamperField::Sac.apply(&mut f);
        assert_eq!(f.payload.sac, Some(7));
        // timestamps absent: offsets leave the frame alone
        TamperField::T4OffsetPs { value: 9 }.apply(&mut f);
        assert_eq!(f.payload.t4_ps, None);
    }

    #[test]
    fn random_scripts_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = AdversaryScript::random(&mut rng, 5);
            let text = toml::to_string(&s).unwrap();
            assert_eq!(toml::from_str::<AdversaryScript>(&text).unwrap(), s, "{text}");
        }
    }
}
