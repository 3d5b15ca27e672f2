//! Abstract management/PHY frames with HMAC-SHA256 tags.

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::keys::{Principal, Ptk};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Beacon,
    Ftmr,
    Ack,
    Ndp,
    Lmr,
    PasnAuth,
    Handshake,
}

impl FrameKind {
    pub const ALL: [FrameKind; 7] = [
        Self::Beacon,
        Self::Ftmr,
        Self::Ack,
        Self::Ndp,
        Self::Lmr,
        Self::PasnAuth,
        Self::Handshake,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangingMode {
    Tb,
    NonTb,
    Edca,
}

impl RangingMode {
    /// Modes for which secure HE-LTFs are defined.
    pub fn supports_secure_ltf(self) -> bool {
        !matches!(self, Self::Edca)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Reject,
    ValidationFailed,
    Terminate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramePayload {
    pub mode: Option<RangingMode>,
    pub secure_ltf_support: Option<bool>,
    pub secure_ltf_required: Option<bool>,
    pub sac: Option<u16>,
    pub counter: Option<u64>,
    pub instance: Option<u32>,
    pub t1_ps: Option<i64>,
    pub t4_ps: Option<i64>,
    pub next_sac: Option<u16>,
    pub next_counter: Option<u64>,
    pub status: Option<FrameStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub kind: FrameKind,
    /// Claimed transmitter.
    pub sender: Principal,
    pub receiver: Principal,
    /// Who actually built the frame; audit only, receivers never read it.
    pub origin: Principal,
    pub protected: bool,
    pub tag: Option<String>,
    pub payload: FramePayload,
}

type HmacSha256 = Hmac<Sha256>;

fn mac_input(kind: FrameKind, sender: Principal, receiver: Principal, payload: &FramePayload) -> Vec<u8> {
    serde_json::to_vec(&(kind, sender, receiver, payload)).expect("payload serializes")
}

impl Frame {
    pub fn tag_under(&self, ptk: &Ptk) -> String {
        let mut mac = HmacSha256::new_from_slice(ptk.bytes()).expect("HMAC accepts any key length");
        mac.update(&mac_input(self.kind, self.sender, self.receiver, &self.payload));
        hex::encode(mac.finalize().into_bytes())
    }

    pub fn sign(&mut self, ptk: &Ptk) {
        self.protected = true;
        self.tag = Some(self.tag_under(ptk));
    }

    /// Constant-time tag check. Unprotected frames never verify.
    pub fn verify(&self, ptk: &Ptk) -> bool {
        let Some(tag) = self.tag.as_deref().and_then(|t| hex::decode(t).ok()) else {
            return false;
        };
        if !self.protected {
            return false;
        }
        let mut mac = HmacSha256::new_from_slice(ptk.bytes()).expect("HMAC accepts any key length");
        mac.update(&mac_input(self.kind, self.sender, self.receiver, &self.payload));
        mac.verify_slice(&tag).is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::keys::{establish_keys, AdversaryKnowledge, KeyKind, KeyParams};

    fn keys() -> (Ptk, Ptk) {
        let a = establish_keys(KeyKind::Enterprise, &KeyParams::default(), &AdversaryKnowledge::default(), 1);
        let b = establish_keys(KeyKind::Enterprise, &KeyParams::default(), &AdversaryKnowledge::default(), 2);
        (a.ista.unwrap().ptk, b.ista.unwrap().ptk)
    }

    fn lmr() -> Frame {
        Frame {
            id: 0,
            kind: FrameKind::Lmr,
            sender: Principal::Rsta,
            receiver: Principal::Ista,
            origin: Principal::Rsta,
            protected: false,
            tag: None,
            payload: FramePayload {
                t1_ps: Some(0),
                t4_ps: Some(16_066_713),
                ..FramePayload::default()
            },
        }
    }

    #[test]
    fn tag_binds_payload_and_key() {
        let (k, other) = keys();
        let mut f = lmr();
        assert!(!f.verify(&k));
        f.sign(&k);
        assert!(f.verify(&k));
        assert!(!f.verify(&other));
        let mut g = f.clone();
        g.payload.t4_ps = Some(16_000_000);
        assert!(!g.verify(&k));
        let mut h = f.clone();
        h.sender = Principal::Ista;
        assert!(!h.verify(&k));
        // id and origin are bookkeeping, not covered by the tag
        let mut i = f;
        i.id = 99;
        i.origin = Principal::Adversary;
        assert!(i.verify(&k));
    }
}
