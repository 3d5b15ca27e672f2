//! FTM negotiation, measurement and termination as one deterministic event
//! sequence, with every frame in flight passing through the adversary.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adversary::{Action, AdversaryScript, ForgeSpec};
use super::frame::{Frame, FrameKind, FramePayload, FrameStatus, RangingMode};
use super::keys::{establish_keys, AdversaryKnowledge, EstablishedKeys, KeyKind, KeyParams, Principal, Ptk};
use super::ProtocolError;
use crate::channel::{propagate, ChannelSpec};
use crate::estimation::{distance_from_timestamps, toa_music_tones, FtmTimestamps, MusicConfig, SPEED_OF_LIGHT};
use crate::keyschedule::{expand_qam_grid, material_for, InstanceMaterial, LtfSeed, SecureLtfState, NULL_SAC};
use crate::waveform::{
    build_subcarrier_map, legacy_tones, secure_tones, synth_legacy_ltf, synth_secure_ltf, NdpConfig,
};

/// Short interframe space between NDP reception and the ACK.
pub const SIFS_PS: i64 = 16_000_000;
const INSTANCE_INTERVAL_PS: i64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationPolicy {
    pub requires_ptk: bool,
    pub secure_ltf_required: bool,
    pub allowed_modes: BTreeSet<RangingMode>,
    pub accept_unprotected_ftmr: bool,
    #[serde(default = "yes")]
    pub supports_secure_ltf: bool,
}

fn yes() -> bool {
    true
}

impl StationPolicy {
    /// Requires a PTK and secure HE-LTFs, no EDCA fallback.
    pub fn strict() -> Self {
        Self {
            requires_ptk: true,
            secure_ltf_required: true,
            allowed_modes: [RangingMode::Tb, RangingMode::NonTb].into(),
            accept_unprotected_ftmr: false,
            supports_secure_ltf: true,
        }
    }

    /// Secure-capable but willing to fall back for compatibility.
    pub fn permissive() -> Self {
        Self {
            requires_ptk: false,
            secure_ltf_required: false,
            allowed_modes: [RangingMode::Tb, RangingMode::NonTb, RangingMode::Edca].into(),
            accept_unprotected_ftmr: true,
            supports_secure_ltf: true,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.requires_ptk && self.accept_unprotected_ftmr {
            return Err(ProtocolError::InvalidPolicy(
                "requires_ptk excludes accept_unprotected_ftmr".into(),
            ));
        }
        if self.allowed_modes.is_empty() {
            return Err(ProtocolError::InvalidPolicy("allowed_modes is empty".into()));
        }
        if self.secure_ltf_required && !self.supports_secure_ltf {
            return Err(ProtocolError::InvalidPolicy(
                "secure_ltf_required needs supports_secure_ltf".into(),
            ));
        }
        if self.secure_ltf_required && !self.allowed_modes.iter().any(|m| m.supports_secure_ltf()) {
            return Err(ProtocolError::InvalidPolicy(
                "secure_ltf_required but only EDCA allowed".into(),
            ));
        }
        Ok(())
    }

    fn preferred_mode(&self) -> RangingMode {
        [RangingMode::NonTb, RangingMode::Tb, RangingMode::Edca]
            .into_iter()
            .find(|m| self.allowed_modes.contains(m))
            .expect("validated policy has a mode")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhyMode {
    /// Timestamps from the true distance, adjusted only by the script.
    Fast,
    /// Each NDP is synthesized, propagated and timed with MUSIC.
    Integration { snr_db: f64, oversample: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub n_instances: u32,
    pub true_distance_m: f64,
    /// Consecutive failed instances before the RSTA terminates.
    pub failure_budget: u32,
    /// Reproduces an implementation that reuses the counter after recovery.
    pub buggy_counter_reuse: bool,
    pub phy: PhyMode,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            n_instances: 10,
            true_distance_m: 10.0,
            failure_budget: 3,
            buggy_counter_reuse: false,
            phy: PhyMode::Fast,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.true_distance_m.is_finite() && (0.0..=1000.0).contains(&self.true_distance_m)) {
            return Err(ProtocolError::InvalidConfig(format!(
                "true_distance_m must lie in [0, 1000], got {}",
                self.true_distance_m
            )));
        }
        if self.failure_budget == 0 {
            return Err(ProtocolError::InvalidConfig("failure_budget must be >= 1".into()));
        }
        if let PhyMode::Integration { snr_db, oversample } = self.phy {
            if snr_db.is_nan() || oversample == 0 {
                return Err(ProtocolError::InvalidConfig("integration PHY needs snr_db and oversample >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySetup {
    pub kind: KeyKind,
    #[serde(default)]
    pub params: KeyParams,
    #[serde(default)]
    pub knowledge: AdversaryKnowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecurityLevel {
    Unprotected,
    Protected,
    ProtectedSecureLtf,
}

impl SecurityLevel {
    fn of(protected: bool, secure_ltf: bool) -> Self {
        match (protected, secure_ltf) {
            (true, true) => Self::ProtectedSecureLtf,
            (true, false) => Self::Protected,
            _ => Self::Unprotected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    SacMismatch,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryPlan {
    pub failed_counter: u64,
    pub discarded_sac: u16,
    pub cause: FailureCause,
    /// The next instance carries a Null-SAC LTF, new values go in the LMR.
    pub null_sac_next: bool,
    pub next_counter: u64,
    pub next_sac: u16,
}

/// Marks the failed instance invalid and plans the Null-SAC round. With
/// `buggy` the counter is rewound instead of advanced.
pub fn recover_error(
    state: &mut SecureLtfState,
    failed: &InstanceMaterial,
    cause: FailureCause,
    buggy: bool,
) -> RecoveryPlan {
    if buggy {
        state.force_counter(failed.counter);
    } else {
        state.invalidate(failed.counter);
    }
    let next = state.counter();
    RecoveryPlan {
        failed_counter: failed.counter,
        discarded_sac: failed.sac,
        cause,
        null_sac_next: true,
        next_counter: next,
        next_sac: material_for(state.seed(), next).sac,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    Forge,
    Replay,
    Tamper,
    Relay,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Sent {
        frame: Frame,
    },
    Injected {
        frame: Frame,
        how: Injection,
        rule: Option<usize>,
        original: Option<u64>,
    },
    Blocked {
        frame_id: u64,
        rule: usize,
    },
    MitmAttempt {
        frame_id: u64,
        rule: usize,
    },
    Delivered {
        frame_id: u64,
        to: Principal,
    },
    Accepted {
        frame_id: u64,
        by: Principal,
    },
    Rejected {
        frame_id: u64,
        by: Principal,
        reason: String,
    },
    KeysEstablished {
        kind: KeyKind,
        ista_ptk: Option<String>,
        rsta_ptk: Option<String>,
        ista_bound_peer: Option<String>,
        adversary_contexts: usize,
        mitm: bool,
    },
    Negotiated {
        by: Principal,
        mode: RangingMode,
        protected: bool,
        secure_ltf: bool,
    },
    Measurement {
        instance: u32,
        counter: Option<u64>,
        valid: bool,
        distance_m: Option<f64>,
    },
    Recovery {
        instance: u32,
        plan: RecoveryPlan,
    },
    CounterReuse {
        instance: u32,
        counter: u64,
    },
    Aborted {
        by: Principal,
        reason: String,
    },
    Terminated {
        by: Principal,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

pub const TRANSCRIPT_SCHEMA: &str = "ftmsec.transcript.v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transcript {
    pub schema: &'static str,
    pub events: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    /// Every frame object that appeared on the air, honest or injected.
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.events.iter().filter_map(|e| match &e.event {
            Event::Sent { frame } | Event::Injected { frame, .. } => Some(frame),
            _ => None,
        })
    }

    pub fn frame(&self, id: u64) -> Option<&Frame> {
        self.frames().find(|f| f.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionOutcome {
    pub completed_measurements: u32,
    pub mode_used: Option<RangingMode>,
    pub protected: bool,
    pub secure_ltf_used: bool,
    pub requested_level: Option<SecurityLevel>,
    pub negotiated_level: Option<SecurityLevel>,
    pub downgrade_occurred: bool,
    pub bound_peer_of_ista: String,
    pub counter_reuse_detected: bool,
    pub abort_reason: Option<String>,
    pub distances_m: Vec<f64>,
    pub adversary_holds_ista_ptk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub outcome: SessionOutcome,
    pub transcript: Transcript,
    pub keys: EstablishedKeys,
}

fn ltf_seed(ptk: &Ptk) -> LtfSeed {
    LtfSeed::derive_from(ptk.bytes(), b"secure-ltf")
}

struct Engine<'a> {
    script: &'a AdversaryScript,
    hits: Vec<u32>,
    events: Vec<Event>,
    next_id: u64,
    captured: Vec<Frame>,
    keys: EstablishedKeys,
    mitm_attempted: bool,
}

impl<'a> Engine<'a> {
    fn new(script: &'a AdversaryScript) -> Self {
        Self {
            script,
            hits: vec![0; script.rules.len()],
            events: Vec::new(),
            next_id: 0,
            captured: Vec::new(),
            keys: EstablishedKeys::none(),
            mitm_attempted: false,
        }
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id += 1;
        self.next_id - 1
    }

    fn log(&mut self, e: Event) {
        self.events.push(e);
    }

    /// Honest frame, signed under the sender's PTK when `protect` is set.
    fn frame(&mut self, kind: FrameKind, sender: Principal, protect: bool, payload: FramePayload) -> Frame {
        let mut f = Frame {
            id: self.fresh_id(),
            kind,
            sender,
            receiver: sender.counterpart(),
            origin: sender,
            protected: false,
            tag: None,
            payload,
        };
        if protect {
            if let Some(c) = self.keys.context_of(sender) {
                f.sign(&c.ptk.clone());
            }
        }
        f
    }

    fn forge(&mut self, matched: &Frame, spec: &ForgeSpec) -> Frame {
        let mut payload = matched.payload.clone();
        payload.mode = spec.mode.or(payload.mode);
        payload.secure_ltf_support = spec.secure_ltf_support.or(payload.secure_ltf_support);
        payload.secure_ltf_required = spec.secure_ltf_required.or(payload.secure_ltf_required);
        if let Some(off) = spec.t4_offset_ps {
            payload.t4_ps = payload.t4_ps.map(|t| t + off);
        }
        let mut f = Frame {
            id: self.fresh_id(),
            kind: spec.kind,
            sender: matched.sender,
            receiver: matched.receiver,
            origin: Principal::Adversary,
            protected: false,
            tag: None,
            payload,
        };
        if spec.protected {
            match self.keys.adversary_key_toward(f.receiver).cloned() {
                Some(k) => f.sign(&k),
                None => {
                    // best effort without the key: a tag that cannot verify
                    f.protected = true;
                    f.tag = Some(hex::encode(Sha256::digest(format!("forged-{}", f.id))));
                }
            }
        }
        f
    }

    /// On-path re-origination once the adversary sits between both victims.
    fn relay(&mut self, f: Frame) -> Frame {
        if matches!(f.kind, FrameKind::Beacon | FrameKind::Handshake | FrameKind::PasnAuth)
            || f.receiver == Principal::Adversary
        {
            return f;
        }
        let (Some(k_in), Some(k_out)) = (
            self.keys.adversary_key_toward(f.sender).cloned(),
            self.keys.adversary_key_toward(f.receiver).cloned(),
        ) else {
            return f;
        };
        let mut g = f.clone();
        if f.kind == FrameKind::Ndp {
            if let (Some(c), Some(sac)) = (f.payload.counter, f.payload.sac) {
                if sac != NULL_SAC && material_for(&ltf_seed(&k_in), c).sac == sac {
                    g.payload.sac = Some(material_for(&ltf_seed(&k_out), c).sac);
                }
            }
        }
        if f.protected && f.verify(&k_in) {
            g.sign(&k_out);
        }
        if g == f {
            return f;
        }
        g.id = self.fresh_id();
        g.origin = Principal::Adversary;
        self.log(Event::Injected {
            frame: g.clone(),
            how: Injection::Relay,
            rule: None,
            original: Some(f.id),
        });
        g
    }

    /// Puts an honest frame on the air and returns what reaches its receiver.
    fn transmit(&mut self, frame: Frame) -> Vec<Frame> {
        self.log(Event::Sent { frame: frame.clone() });
        let mut current = Some(frame.clone());
        let mut extra = Vec::new();
        for (i, rule) in self.script.rules.iter().enumerate() {
            if rule.max_hits.is_some_and(|m| self.hits[i] >= m) || !rule.when.matches(&frame) {
                continue;
            }
            self.hits[i] += 1;
            match &rule.action {
                Action::Block => {
                    if let Some(c) = current.take() {
                        self.log(Event::Blocked { frame_id: c.id, rule: i });
                    }
                }
                Action::Forge { frame: spec } => {
                    let f = self.forge(&frame, spec);
                    self.log(Event::Injected {
                        frame: f.clone(),
                        how: Injection::Forge,
                        rule: Some(i),
                        original: None,
                    });
                    extra.push(f);
                }
                Action::Replay => {
                    let old = self
                        .captured
                        .iter()
                        .rev()
                        .find(|c| c.kind == frame.kind && c.receiver == frame.receiver)
                        .cloned();
                    // a verbatim copy keeps its creator
                    if let Some(mut copy) = old {
                        let original = copy.id;
                        copy.id = self.fresh_id();
                        if let Some(c) = current.take() {
                            self.log(Event::Blocked { frame_id: c.id, rule: i });
                        }
                        self.log(Event::Injected {
                            frame: copy.clone(),
                            how: Injection::Replay,
                            rule: Some(i),
                            original: Some(original),
                        });
                        extra.push(copy);
                    }
                }
                Action::MitmEstablish => {
                    if matches!(frame.kind, FrameKind::Handshake | FrameKind::PasnAuth) {
                        self.mitm_attempted = true;
                        self.log(Event::MitmAttempt { frame_id: frame.id, rule: i });
                    }
                }
                Action::Tamper { field } => {
                    if let Some(mut c) = current.take() {
                        let original = c.id;
                        let before = c.payload.clone();
                        field.apply(&mut c);
                        if c.payload == before {
                            current = Some(c);
                            continue;
                        }
                        c.id = self.fresh_id();
                        c.origin = Principal::Adversary;
                        if c.protected {
                            if let Some(k) = self.keys.adversary_key_toward(c.receiver).cloned() {
                                c.sign(&k);
                            }
                        }
                        self.log(Event::Injected {
                            frame: c.clone(),
                            how: Injection::Tamper,
                            rule: Some(i),
                            original: Some(original),
                        });
                        current = Some(c);
                    }
                }
            }
        }
        self.captured.push(frame);
        let mut out: Vec<Frame> = current.into_iter().chain(extra).collect();
        if self.keys.mitm {
            out = out.into_iter().map(|f| self.relay(f)).collect();
        }
        for f in &out {
            self.log(Event::Delivered {
                frame_id: f.id,
                to: f.receiver,
            });
        }
        out
    }

    fn accept(&mut self, f: &Frame, by: Principal) {
        self.log(Event::Accepted { frame_id: f.id, by });
    }

    fn reject(&mut self, f: &Frame, by: Principal, reason: impl Into<String>) {
        self.log(Event::Rejected {
            frame_id: f.id,
            by,
            reason: reason.into(),
        });
    }

    /// MAC check against `by`'s own PTK.
    fn authentic(&self, f: &Frame, by: Principal) -> bool {
        self.keys.context_of(by).is_some_and(|c| f.verify(&c.ptk))
    }

    /// Unprotected, or protected with a tag `by` can verify.
    fn usable(&self, f: &Frame, by: Principal) -> bool {
        !f.protected || self.authentic(f, by)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Negotiated {
    mode: RangingMode,
    protected: bool,
    secure: bool,
}

fn rsta_evaluate(p: &StationPolicy, e: &Engine, f: &Frame) -> Result<Negotiated, String> {
    if f.protected && !e.authentic(f, Principal::Rsta) {
        return Err("MIC failure".into());
    }
    if !f.protected && (p.requires_ptk || !p.accept_unprotected_ftmr) {
        return Err("unprotected FTMR refused".into());
    }
    let Some(mode) = f.payload.mode.filter(|m| p.allowed_modes.contains(m)) else {
        return Err("ranging mode not allowed".into());
    };
    let secure = f.protected
        && mode.supports_secure_ltf()
        && p.supports_secure_ltf
        && f.payload.secure_ltf_support == Some(true)
        && (f.payload.secure_ltf_required == Some(true) || p.secure_ltf_required);
    if p.secure_ltf_required && !secure {
        return Err("secure HE-LTF required".into());
    }
    Ok(Negotiated {
        mode,
        protected: f.protected,
        secure,
    })
}

enum IstaVerdict {
    Accept(Negotiated),
    /// Ignore and keep waiting.
    Discard(String),
    Abort(String),
}

fn ista_evaluate(p: &StationPolicy, e: &Engine, f: &Frame) -> IstaVerdict {
    if f.kind != FrameKind::Ack {
        return IstaVerdict::Discard("unexpected frame".into());
    }
    if f.protected && !e.authentic(f, Principal::Ista) {
        return IstaVerdict::Discard("MIC failure".into());
    }
    if !f.protected && (p.requires_ptk || !p.accept_unprotected_ftmr) {
        return IstaVerdict::Discard("unprotected response refused".into());
    }
    if f.payload.status == Some(FrameStatus::Reject) {
        return IstaVerdict::Abort("rejected by responder".into());
    }
    let Some(mode) = f.payload.mode.filter(|m| p.allowed_modes.contains(m)) else {
        return IstaVerdict::Abort("responder selected a disallowed mode".into());
    };
    let secure = f.protected && mode.supports_secure_ltf() && f.payload.secure_ltf_required == Some(true);
    if p.secure_ltf_required && !secure {
        return IstaVerdict::Abort("secure HE-LTF not granted".into());
    }
    IstaVerdict::Accept(Negotiated {
        mode,
        protected: f.protected,
        secure,
    })
}

struct Phy {
    cfg: NdpConfig,
    map: crate::waveform::SubcarrierMap,
    snr_db: f64,
    music: MusicConfig,
}

impl Phy {
    fn new(snr_db: f64, oversample: usize) -> Result<Self, ProtocolError> {
        let map = build_subcarrier_map(20).map_err(|e| ProtocolError::Phy(e.to_string()))?;
        Ok(Self {
            cfg: NdpConfig::secure(20, 1).with_oversample(oversample),
            map,
            snr_db,
            music: MusicConfig::default(),
        })
    }

    /// One-way ToA in ps of an NDP carrying `material` (legacy when `None`).
    fn toa_ps(&self, material: Option<&InstanceMaterial>, tof_s: f64, seed: u64) -> Option<i64> {
        let (cfg, tx, tones) = match material {
            Some(m) => {
                let grid = expand_qam_grid(m, 1, self.map.n_active()).ok()?;
                let tx = synth_secure_ltf(&self.cfg, &grid, &self.map).ok()?;
                (self.cfg.clone(), tx, secure_tones(&grid))
            }
            None => {
                let cfg = NdpConfig::legacy(20, 1).with_oversample(self.cfg.oversample);
                let tx = synth_legacy_ltf(&cfg, &self.map).ok()?;
                (cfg, tx, legacy_tones(&self.map, 1))
            }
        };
        let rx = propagate(
            &tx,
            &ChannelSpec {
                delay_s: tof_s,
                snr_db: self.snr_db,
                seed,
            },
        );
        let est = toa_music_tones(&rx, &tones, &cfg, &self.map, &self.music).ok()?;
        Some((est.toa_s * 1e12).round() as i64)
    }
}

/// Runs one session end to end. Only invalid inputs are errors; every
/// protocol failure is reported in the outcome.
pub fn run_session(
    ista: &StationPolicy,
    rsta: &StationPolicy,
    setup: &KeySetup,
    script: &AdversaryScript,
    cfg: &SessionConfig,
) -> Result<SessionReport, ProtocolError> {
    ista.validate()?;
    rsta.validate()?;
    cfg.validate()?;
    let phy = match cfg.phy {
        PhyMode::Fast => None,
        PhyMode::Integration { snr_db, oversample } => Some(Phy::new(snr_db, oversample)?),
    };
    let mut e = Engine::new(script);
    let mut st = SessionState::default();
    session_body(ista, rsta, setup, cfg, phy.as_ref(), &mut e, &mut st);

    let transcript = Transcript {
        schema: TRANSCRIPT_SCHEMA,
        events: e
            .events
            .into_iter()
            .enumerate()
            .map(|(i, event)| TranscriptEntry { seq: i as u64, event })
            .collect(),
    };
    let reuse_in_transcript = super::predicates::counter_reuse_in(&transcript);
    let neg = st.ista_view;
    let outcome = SessionOutcome {
        completed_measurements: st.completed,
        mode_used: neg.map(|n| n.mode),
        protected: neg.is_some_and(|n| n.protected),
        secure_ltf_used: neg.is_some_and(|n| n.secure),
        requested_level: st.requested,
        negotiated_level: neg.map(|n| SecurityLevel::of(n.protected, n.secure)),
        downgrade_occurred: match (st.requested, neg) {
            (Some(r), Some(n)) => SecurityLevel::of(n.protected, n.secure) < r,
            _ => false,
        },
        bound_peer_of_ista: e
            .keys
            .ista
            .as_ref()
            .map_or_else(|| "none".to_string(), |c| c.bound_peer.clone()),
        counter_reuse_detected: st.reuse_flagged || reuse_in_transcript,
        abort_reason: st.abort_reason,
        distances_m: st.distances,
        adversary_holds_ista_ptk: e.keys.adversary_holds_key_of(Principal::Ista),
    };
    Ok(SessionReport {
        outcome,
        transcript,
        keys: e.keys,
    })
}

#[derive(Default)]
struct SessionState {
    requested: Option<SecurityLevel>,
    ista_view: Option<Negotiated>,
    completed: u32,
    distances: Vec<f64>,
    reuse_flagged: bool,
    abort_reason: Option<String>,
}

fn abort(e: &mut Engine, st: &mut SessionState, by: Principal, reason: &str) {
    e.log(Event::Aborted {
        by,
        reason: reason.into(),
    });
    st.abort_reason = Some(reason.into());
}

fn session_body(
    ista: &StationPolicy,
    rsta: &StationPolicy,
    setup: &KeySetup,
    cfg: &SessionConfig,
    phy: Option<&Phy>,
    e: &mut Engine,
    st: &mut SessionState,
) {
    use Principal::{Ista, Rsta};

    // discovery
    let beacon = e.frame(
        FrameKind::Beacon,
        Rsta,
        false,
        FramePayload {
            secure_ltf_support: Some(rsta.supports_secure_ltf),
            ..FramePayload::default()
        },
    );
    if e.transmit(beacon).is_empty() {
        return abort(e, st, Ista, "responder not discovered");
    }

    // key establishment
    let hs_kind = match setup.kind {
        KeyKind::PasnStandalone | KeyKind::PasnOverAuth => FrameKind::PasnAuth,
        _ => FrameKind::Handshake,
    };
    let n_msgs = if hs_kind == FrameKind::PasnAuth { 3 } else { 4 };
    let mut handshake_complete = true;
    for m in 0..n_msgs {
        let sender = if m % 2 == 0 { Ista } else { Rsta };
        let f = e.frame(
            hs_kind,
            sender,
            false,
            FramePayload {
                instance: Some(m),
                ..FramePayload::default()
            },
        );
        handshake_complete &= e.transmit(f).iter().any(|d| d.kind == hs_kind);
    }
    let knowledge = AdversaryKnowledge {
        active_mitm: setup.knowledge.active_mitm || e.mitm_attempted,
        ..setup.knowledge
    };
    let mitm_ok = knowledge.active_mitm && setup.kind.mitm_feasible(knowledge.knows_passphrase);
    e.keys = if handshake_complete || mitm_ok {
        establish_keys(setup.kind, &setup.params, &knowledge, cfg.seed)
    } else {
        EstablishedKeys::none()
    };
    e.log(Event::KeysEstablished {
        kind: setup.kind,
        ista_ptk: e.keys.ista.as_ref().map(|c| c.ptk.handle()),
        rsta_ptk: e.keys.rsta.as_ref().map(|c| c.ptk.handle()),
        ista_bound_peer: e.keys.ista.as_ref().map(|c| c.bound_peer.clone()),
        adversary_contexts: e.keys.adversary.len(),
        mitm: e.keys.mitm,
    });

    // negotiation
    let has_key = e.keys.ista.is_some();
    if ista.requires_ptk && !has_key {
        return abort(e, st, Ista, "no PTK for a protected FTMR");
    }
    let mode = ista.preferred_mode();
    let want_secure = has_key && ista.supports_secure_ltf && mode.supports_secure_ltf();
    st.requested = Some(SecurityLevel::of(has_key, want_secure));
    let ftmr = e.frame(
        FrameKind::Ftmr,
        Ista,
        has_key,
        FramePayload {
            mode: Some(mode),
            secure_ltf_support: Some(want_secure),
            secure_ltf_required: Some(want_secure && ista.secure_ltf_required),
            ..FramePayload::default()
        },
    );
    let mut rsta_view: Option<Negotiated> = None;
    let mut responses = Vec::new();
    for f in e.transmit(ftmr) {
        if f.kind != FrameKind::Ftmr {
            e.reject(&f, Rsta, "unexpected frame");
            continue;
        }
        if rsta_view.is_some() {
            e.reject(&f, Rsta, "session already negotiated");
            continue;
        }
        match rsta_evaluate(rsta, e, &f) {
            Ok(n) => {
                e.accept(&f, Rsta);
                e.log(Event::Negotiated {
                    by: Rsta,
                    mode: n.mode,
                    protected: n.protected,
                    secure_ltf: n.secure,
                });
                rsta_view = Some(n);
                responses.push(e.frame(
                    FrameKind::Ack,
                    Rsta,
                    n.protected,
                    FramePayload {
                        mode: Some(n.mode),
                        secure_ltf_required: Some(n.secure),
                        status: Some(FrameStatus::Ok),
                        ..FramePayload::default()
                    },
                ));
            }
            Err(reason) => {
                let authentic = f.protected && e.authentic(&f, Rsta);
                e.reject(&f, Rsta, reason);
                responses.push(e.frame(
                    FrameKind::Ack,
                    Rsta,
                    authentic,
                    FramePayload {
                        status: Some(FrameStatus::Reject),
                        ..FramePayload::default()
                    },
                ));
            }
        }
    }
    let mut last_discard = None;
    'responses: for r in responses {
        for f in e.transmit(r) {
            match ista_evaluate(ista, e, &f) {
                IstaVerdict::Accept(n) => {
                    e.accept(&f, Ista);
                    e.log(Event::Negotiated {
                        by: Ista,
                        mode: n.mode,
                        protected: n.protected,
                        secure_ltf: n.secure,
                    });
                    st.ista_view = Some(n);
                    break 'responses;
                }
                IstaVerdict::Discard(reason) => {
                    e.reject(&f, Ista, reason.clone());
                    last_discard = Some(reason);
                }
                IstaVerdict::Abort(reason) => {
                    e.reject(&f, Ista, reason.clone());
                    return abort(e, st, Ista, &reason);
                }
            }
        }
    }
    let Some(ineg) = st.ista_view else {
        let reason = match last_discard {
            Some(r) => format!("negotiation failed: {r}"),
            None => "negotiation timeout".to_string(),
        };
        return abort(e, st, Ista, &reason);
    };
    let Some(rneg) = rsta_view else {
        return abort(e, st, Ista, "responder never entered the session");
    };

    measure(cfg, phy, e, st, ineg, rneg);
}

fn measure(cfg: &SessionConfig, phy: Option<&Phy>, e: &mut Engine, st: &mut SessionState, ineg: Negotiated, rneg: Negotiated) {
    use Principal::{Ista, Rsta};

    let mut rstate = e
        .keys
        .rsta
        .as_ref()
        .map(|c| SecureLtfState::new(ltf_seed(&c.ptk), 0));
    let ista_seed = e.keys.ista.as_ref().map(|c| ltf_seed(&c.ptk));
    let mut ista_expected = 0u64;
    let mut ista_used: HashSet<u64> = HashSet::new();
    let mut pending: Option<RecoveryPlan> = None;
    let mut failures = 0u32;
    let tof_s = cfg.true_distance_m / SPEED_OF_LIGHT;
    let tof_ps = (tof_s * 1e12).round() as i64;

    for inst in 0..cfg.n_instances {
        let t1 = inst as i64 * INSTANCE_INTERVAL_PS;

        if let Some(plan) = pending.take() {
            let ndp = e.frame(
                FrameKind::Ndp,
                Rsta,
                false,
                FramePayload {
                    instance: Some(inst),
                    sac: Some(NULL_SAC),
                    ..FramePayload::default()
                },
            );
            if !e.transmit(ndp).is_empty() {
                e.log(Event::Measurement {
                    instance: inst,
                    counter: None,
                    valid: false,
                    distance_m: None,
                });
            }
            let lmr = e.frame(
                FrameKind::Lmr,
                Rsta,
                rneg.protected,
                FramePayload {
                    instance: Some(inst),
                    next_sac: Some(plan.next_sac),
                    next_counter: Some(plan.next_counter),
                    status: Some(FrameStatus::Ok),
                    ..FramePayload::default()
                },
            );
            for f in e.transmit(lmr) {
                if let Err(reason) = ista_lmr_check(e, ineg, &f, inst) {
                    e.reject(&f, Ista, reason);
                    continue;
                }
                e.accept(&f, Ista);
                if let Some(nc) = f.payload.next_counter {
                    if nc < ista_expected || ista_used.contains(&nc) {
                        st.reuse_flagged = true;
                        e.log(Event::CounterReuse {
                            instance: inst,
                            counter: nc,
                        });
                    }
                    ista_expected = nc;
                }
                break;
            }
            continue;
        }

        let material = match (rneg.secure, rstate.as_mut()) {
            (true, Some(s)) if cfg.buggy_counter_reuse => Some(s.derive_unchecked()),
            (true, Some(s)) => match s.derive_instance() {
                Ok(m) => Some(m),
                Err(err) => return abort(e, st, Rsta, &err.to_string()),
            },
            _ => None,
        };
        let ndp = e.frame(
            FrameKind::Ndp,
            Rsta,
            false,
            FramePayload {
                instance: Some(inst),
                sac: material.as_ref().map(|m| m.sac),
                counter: material.as_ref().map(|m| m.counter),
                ..FramePayload::default()
            },
        );
        let delivered = e.transmit(ndp);
        let Some(f) = delivered
            .into_iter()
            .find(|f| f.kind == FrameKind::Ndp && e.usable(f, Ista))
        else {
            e.log(Event::Measurement {
                instance: inst,
                counter: material.as_ref().map(|m| m.counter),
                valid: false,
                distance_m: None,
            });
            continue;
        };

        let expected = match (ineg.secure, &ista_seed) {
            (true, Some(seed)) => Some(material_for(seed, ista_expected)),
            _ => None,
        };
        let burnt = expected.as_ref().is_some_and(|m| ista_used.contains(&m.counter));
        let valid = match &expected {
            // a correct initiator never accepts an exposed SAC twice
            Some(m) => f.payload.sac == Some(m.sac) && m.sac != NULL_SAC && (!burnt || cfg.buggy_counter_reuse),
            None => !ineg.secure,
        };
        if !valid {
            // the expected SAC is burnt once the instance has started
            if let Some(m) = &expected {
                ista_used.insert(m.counter);
            }
            e.reject(&f, Ista, "SAC validation failed");
            e.log(Event::Measurement {
                instance: inst,
                counter: f.payload.counter,
                valid: false,
                distance_m: None,
            });
            let nack = e.frame(
                FrameKind::Ack,
                Ista,
                false,
                FramePayload {
                    instance: Some(inst),
                    status: Some(FrameStatus::ValidationFailed),
                    ..FramePayload::default()
                },
            );
            let heard = e.transmit(nack).iter().any(|a| {
                a.kind == FrameKind::Ack
                    && e.usable(a, Rsta)
                    && a.payload.instance == Some(inst)
                    && a.payload.status == Some(FrameStatus::ValidationFailed)
            });
            if heard {
                if let (Some(m), Some(s)) = (&material, rstate.as_mut()) {
                    let plan = recover_error(s, m, FailureCause::SacMismatch, cfg.buggy_counter_reuse);
                    e.log(Event::Recovery {
                        instance: inst,
                        plan: plan.clone(),
                    });
                    pending = Some(plan);
                }
                failures += 1;
                if failures >= cfg.failure_budget {
                    let term = e.frame(
                        FrameKind::Lmr,
                        Rsta,
                        rneg.protected,
                        FramePayload {
                            status: Some(FrameStatus::Terminate),
                            ..FramePayload::default()
                        },
                    );
                    e.transmit(term);
                    let reason = format!("{failures} consecutive failed instances");
                    e.log(Event::Terminated {
                        by: Rsta,
                        reason: reason.clone(),
                    });
                    st.abort_reason = Some(reason);
                    return;
                }
            }
            continue;
        }
        e.accept(&f, Ista);
        if let Some(m) = &expected {
            if !ista_used.insert(m.counter) {
                st.reuse_flagged = true;
                e.log(Event::CounterReuse {
                    instance: inst,
                    counter: m.counter,
                });
            }
            ista_expected = m.counter + 1;
        }

        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((inst as u64) << 1);
        let one_way = |s: u64| match phy {
            Some(p) => p.toa_ps(expected.as_ref().or(material.as_ref()), tof_s, s),
            None => Some(tof_ps),
        };
        let Some(down) = one_way(seed) else {
            continue;
        };
        let t2 = t1 + down;
        let t3 = t2 + SIFS_PS;
        let ack = e.frame(
            FrameKind::Ack,
            Ista,
            false,
            FramePayload {
                instance: Some(inst),
                status: Some(FrameStatus::Ok),
                ..FramePayload::default()
            },
        );
        let acked = e.transmit(ack).iter().any(|a| {
            a.kind == FrameKind::Ack && e.usable(a, Rsta) && a.payload.instance == Some(inst) && a.payload.status == Some(FrameStatus::Ok)
        });
        if !acked {
            continue;
        }
        let Some(up) = one_way(seed | 1) else {
            continue;
        };
        failures = 0;
        let lmr = e.frame(
            FrameKind::Lmr,
            Rsta,
            rneg.protected,
            FramePayload {
                instance: Some(inst),
                t1_ps: Some(t1),
                t4_ps: Some(t3 + up),
                status: Some(FrameStatus::Ok),
                ..FramePayload::default()
            },
        );
        for f in e.transmit(lmr) {
            if let Err(reason) = ista_lmr_check(e, ineg, &f, inst) {
                e.reject(&f, Ista, reason);
                continue;
            }
            let (Some(t1r), Some(t4r)) = (f.payload.t1_ps, f.payload.t4_ps) else {
                e.reject(&f, Ista, "LMR without timestamps");
                continue;
            };
            e.accept(&f, Ista);
            let d = distance_from_timestamps(&FtmTimestamps {
                t1: t1r,
                t2,
                t3,
                t4: t4r,
            });
            e.log(Event::Measurement {
                instance: inst,
                counter: expected.as_ref().map(|m| m.counter),
                valid: true,
                distance_m: Some(d),
            });
            st.completed += 1;
            st.distances.push(d);
            break;
        }
    }
    let term = e.frame(
        FrameKind::Lmr,
        Rsta,
        rneg.protected,
        FramePayload {
            status: Some(FrameStatus::Terminate),
            ..FramePayload::default()
        },
    );
    e.transmit(term);
    e.log(Event::Terminated {
        by: Rsta,
        reason: "final instance".into(),
    });
}

fn ista_lmr_check(e: &Engine, ineg: Negotiated, f: &Frame, inst: u32) -> Result<(), &'static str> {
    if f.kind != FrameKind::Lmr || f.payload.instance != Some(inst) {
        return Err("unexpected frame");
    }
    if f.protected && !e.authentic(f, Principal::Ista) {
        return Err("MIC failure");
    }
    if ineg.protected && !f.protected {
        return Err("unprotected LMR in a protected session");
    }
    Ok(())
}
