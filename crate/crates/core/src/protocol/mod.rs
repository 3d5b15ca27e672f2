//! Logical-layer FTM sessions between an initiator (ISTA) and a responder
//! (RSTA) under a message-level adversary.

pub mod adversary;
pub mod frame;
pub mod keys;
pub mod predicates;
pub mod scenario;
pub mod session;

use thiserror::Error;

pub use adversary::{Action, AdversaryScript, ForgeSpec, FrameMatch, Rule, TamperField};
pub use frame::{Frame, FrameKind, FramePayload, FrameStatus, RangingMode};
pub use keys::{establish_keys, AdversaryKnowledge, EstablishedKeys, KeyContext, KeyKind, KeyParams, Principal, Ptk};
pub use predicates::{check_unforgeability, counter_reuse_in, evaluate_predicates, validate_transcript, Predicates};
pub use scenario::{builtin_scenarios, run_scenario, Scenario, ScenarioRun};
pub use session::{
    recover_error, run_session, Event, FailureCause, KeySetup, PhyMode, RecoveryPlan, SecurityLevel, SessionConfig,
    SessionOutcome, SessionReport, StationPolicy, Transcript,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid station policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("phy: {0}")]
    Phy(String),
}
