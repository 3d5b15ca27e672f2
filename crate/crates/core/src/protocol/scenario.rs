//! Scenario files: keys, adversary script and named policy variants with
//! optional expectations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::adversary::AdversaryScript;
use super::keys::AdversaryKnowledge;
use super::predicates::{evaluate_predicates, Predicates};
use super::session::{run_session, KeySetup, SessionConfig, SessionReport, StationPolicy};
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyPreset {
    Strict,
    Permissive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Preset(PolicyPreset),
    Custom(StationPolicy),
}

impl PolicySpec {
    pub fn resolve(&self) -> StationPolicy {
        match self {
            Self::Preset(PolicyPreset::Strict) => StationPolicy::strict(),
            Self::Preset(PolicyPreset::Permissive) => StationPolicy::permissive(),
            Self::Custom(p) => p.clone(),
        }
    }
}

/// Checked after a run; unset fields are not checked.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectation {
    pub peer_binding_holds: Option<bool>,
    pub downgrade_occurred: Option<bool>,
    pub phy_replay_enabled: Option<bool>,
    pub availability: Option<u32>,
    pub min_availability: Option<u32>,
    pub bound_peer: Option<String>,
    pub adversary_holds_ista_ptk: Option<bool>,
    pub counter_reuse_detected: Option<bool>,
    pub secure_ltf_used: Option<bool>,
    pub aborted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub ista: PolicySpec,
    pub rsta: PolicySpec,
    /// Replaces the scenario script.
    #[serde(default)]
    pub script: Option<AdversaryScript>,
    #[serde(default)]
    pub knowledge: Option<AdversaryKnowledge>,
    #[serde(default)]
    pub buggy_counter_reuse: Option<bool>,
    #[serde(default)]
    pub expect: Expectation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub title: String,
    pub default_variant: String,
    pub keys: KeySetup,
    #[serde(default)]
    pub session: SessionConfig,
    #[serde(default)]
    pub script: AdversaryScript,
    pub variant: BTreeMap<String, Variant>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ProtocolError> {
        let s: Self = toml::from_str(text).map_err(|e| ProtocolError::Scenario(e.to_string()))?;
        if !s.variant.contains_key(&s.default_variant) {
            return Err(ProtocolError::Scenario(format!(
                "{}: default_variant `{}` is not defined",
                s.id, s.default_variant
            )));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRun {
    pub id: String,
    pub variant: String,
    pub predicates: Predicates,
    pub report: SessionReport,
    /// Empty when every expectation held.
    pub expectation_failures: Vec<String>,
}

fn check(e: &Expectation, p: &Predicates, r: &SessionReport) -> Vec<String> {
    let o = &r.outcome;
    let mut out = Vec::new();
    let mut cmp = |name: &str, want: Option<String>, got: String| {
        if let Some(w) = want {
            if w != got {
                out.push(format!("{name}: expected {w}, got {got}"));
            }
        }
    };
    let s = |b: Option<bool>| b.map(|v| v.to_string());
    cmp("peer_binding_holds", s(e.peer_binding_holds), p.peer_binding_holds.to_string());
    cmp("downgrade_occurred", s(e.downgrade_occurred), p.downgrade_occurred.to_string());
    cmp("phy_replay_enabled", s(e.phy_replay_enabled), p.phy_replay_enabled.to_string());
    cmp("availability", e.availability.map(|v| v.to_string()), p.availability.to_string());
    cmp("bound_peer", e.bound_peer.clone(), o.bound_peer_of_ista.clone());
    cmp(
        "adversary_holds_ista_ptk",
        s(e.adversary_holds_ista_ptk),
        o.adversary_holds_ista_ptk.to_string(),
    );
    cmp("counter_reuse_detected", s(e.counter_reuse_detected), o.counter_reuse_detected.to_string());
    cmp("secure_ltf_used", s(e.secure_ltf_used), o.secure_ltf_used.to_string());
    cmp("aborted", s(e.aborted), o.abort_reason.is_some().to_string());
    if let Some(m) = e.min_availability {
        if p.availability < m {
            out.push(format!("availability: expected >= {m}, got {}", p.availability));
        }
    }
    out
}

/// Runs one named variant; `seed` overrides the scenario's session seed.
pub fn run_scenario(s: &Scenario, variant: &str, seed: Option<u64>) -> Result<ScenarioRun, ProtocolError> {
    let v = s
        .variant
        .get(variant)
        .ok_or_else(|| ProtocolError::Scenario(format!("{}: no variant `{variant}`", s.id)))?;
    let mut keys = s.keys.clone();
    if let Some(k) = v.knowledge {
        keys.knowledge = k;
    }
    let mut cfg = s.session.clone();
    if let Some(b) = v.buggy_counter_reuse {
        cfg.buggy_counter_reuse = b;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let script = v.script.as_ref().unwrap_or(&s.script);
    let report = run_session(&v.ista.resolve(), &v.rsta.resolve(), &keys, script, &cfg)?;
    let predicates = evaluate_predicates(&report, "rsta");
    let expectation_failures = check(&v.expect, &predicates, &report);
    Ok(ScenarioRun {
        id: s.id.clone(),
        variant: variant.to_string(),
        predicates,
        report,
        expectation_failures,
    })
}

const BUILTIN: [&str; 8] = [
    include_str!("../../../../scenarios/s1_wpa2_ptk_recovery.toml"),
    include_str!("../../../../scenarios/s2_sae_evil_twin.toml"),
    include_str!("../../../../scenarios/s3_pasn_mitm.toml"),
    include_str!("../../../../scenarios/s4_edca_downgrade.toml"),
    include_str!("../../../../scenarios/s5_legacy_downgrade.toml"),
    include_str!("../../../../scenarios/s6_required_gap.toml"),
    include_str!("../../../../scenarios/s7_counter_reuse.toml"),
    include_str!("../../../../scenarios/s8_dos.toml"),
];

/// The shipped catalog, S1 through S8.
pub fn builtin_scenarios() -> Vec<Scenario> {
    BUILTIN
        .iter()
        .map(|t| Scenario::from_toml(t).expect("shipped scenario parses"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_eight_distinct_scenarios() {
        let all = builtin_scenarios();
        let ids: Vec<_> = all.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8"]);
        for s in &all {
            assert!(s.variant.contains_key(&s.default_variant));
        }
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(Scenario::from_toml("id = 1").is_err());
        let missing_default = r#"
            id = "X"
            title = "x"
            default_variant = "nope"
            keys = { kind = "enterprise" }
            [variant.a]
            ista = "strict"
            rsta = "strict"
        "#;
        assert!(matches!(Scenario::from_toml(missing_default), Err(ProtocolError::Scenario(_))));
        let typo = missing_default.replace("nope", "a").replace("ista =", "istaa =");
        assert!(Scenario::from_toml(&typo).is_err());
    }

    #[test]
    fn custom_policy_tables_parse() {
        let text = r#"
            id = "X"
            title = "x"
            default_variant = "a"
            keys = { kind = "enterprise" }
            [variant.a]
            ista = "permissive"
            rsta = { requires_ptk = true, secure_ltf_required = false, allowed_modes = ["tb"], accept_unprotected_ftmr = false }
        "#;
        let s = Scenario::from_toml(text).unwrap();
        let r = s.variant["a"].rsta.resolve();
        assert!(r.requires_ptk && r.supports_secure_ltf);
        let run = run_scenario(&s, "a", Some(5)).unwrap();
        assert_eq!(run.report.outcome.mode_used, None);
        assert!(run.expectation_failures.is_empty());
        assert!(run_scenario(&s, "b", None).is_err());
    }
}
