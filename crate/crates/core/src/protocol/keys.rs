//! Symbolic key establishment with real key material.
//!
//! Handshakes are not executed; what matters is who can compute which PTK.
//! PMKs come from HKDF over the credential, PTKs from HKDF over the PMK, an
//! optional ephemeral secret, both nonces and both addresses.

use std::fmt;

use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub const UNAUTHENTICATED: &str = "unauthenticated";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Principal {
    Ista,
    Rsta,
    Adversary,
}

impl Principal {
    pub fn identity(self) -> &'static str {
        match self {
            Self::Ista => "ista",
            Self::Rsta => "rsta",
            Self::Adversary => "adversary",
        }
    }

    /// The other honest endpoint.
    pub fn counterpart(self) -> Self {
        match self {
            Self::Ista => Self::Rsta,
            Self::Rsta => Self::Ista,
            Self::Adversary => Self::Adversary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    Wpa2Personal,
    Wpa3Sae,
    PasnStandalone,
    PasnOverAuth,
    Enterprise,
}

impl KeyKind {
    /// Can someone with `knows_passphrase` stand in for a peer during the
    /// exchange and finish it with each side separately?
    pub fn mitm_feasible(self, knows_passphrase: bool) -> bool {
        match self {
            Self::Wpa2Personal | Self::Wpa3Sae => knows_passphrase,
            Self::PasnStandalone => true,
            Self::PasnOverAuth | Self::Enterprise => false,
        }
    }

    /// PTK computable from the passphrase plus a recorded handshake.
    pub fn passively_recoverable(self) -> bool {
        matches!(self, Self::Wpa2Personal)
    }
}

/// Pairwise temporal key. Never serialized or printed, only its handle.
#[derive(Clone, PartialEq, Eq)]
pub struct Ptk([u8; 32]);

impl Ptk {
    pub fn bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Opaque identifier: first 8 bytes of SHA-256 over the key.
    pub fn handle(&self) -> String {
        hex::encode(&Sha256::digest(self.0)[..8])
    }
}

impl fmt::Debug for Ptk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ptk({})", self.handle())
    }
}

impl Serialize for Ptk {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.handle())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyParams {
    pub passphrase: String,
    pub ssid: String,
    pub ista_addr: String,
    pub rsta_addr: String,
    pub enterprise_credential: String,
}

impl Default for KeyParams {
    fn default() -> Self {
        Self {
            passphrase: "correct horse battery staple".into(),
            ssid: "ftm-lab".into(),
            ista_addr: "02:00:00:00:00:01".into(),
            rsta_addr: "02:00:00:00:00:02".into(),
            enterprise_credential: "eap-tls-client-cert".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversaryKnowledge {
    pub knows_passphrase: bool,
    pub observes_handshake: bool,
    pub active_mitm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyContext {
    pub kind: KeyKind,
    pub owner: Principal,
    /// Principal actually holding the other copy of this PTK.
    pub peer: Principal,
    pub pmk_handle: Option<String>,
    pub ptk: Ptk,
    pub bound_peer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstablishedKeys {
    pub ista: Option<KeyContext>,
    pub rsta: Option<KeyContext>,
    /// One context per victim the adversary can talk to under a valid PTK.
    pub adversary: Vec<KeyContext>,
    pub mitm: bool,
}

impl EstablishedKeys {
    pub fn none() -> Self {
        Self {
            ista: None,
            rsta: None,
            adversary: Vec::new(),
            mitm: false,
        }
    }

    pub fn context_of(&self, p: Principal) -> Option<&KeyContext> {
        match p {
            Principal::Ista => self.ista.as_ref(),
            Principal::Rsta => self.rsta.as_ref(),
            Principal::Adversary => None,
        }
    }

    /// Key the adversary would use for frames delivered to `victim`.
    pub fn adversary_key_toward(&self, victim: Principal) -> Option<&Ptk> {
        self.adversary.iter().find(|c| c.peer == victim).map(|c| &c.ptk)
    }

    /// True when the adversary holds the very PTK `victim` verifies with.
    pub fn adversary_holds_key_of(&self, victim: Principal) -> bool {
        match (self.context_of(victim), self.adversary_key_toward(victim)) {
            (Some(c), Some(k)) => &c.ptk == k,
            _ => false,
        }
    }
}

fn hkdf32(ikm: &[u8], salt: &[u8], info: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(Some(salt), ikm)
        .expand(info, &mut out)
        .expect("32 bytes is a valid HKDF-SHA256 length");
    out
}

fn derive_pmk(kind: KeyKind, params: &KeyParams) -> Option<[u8; 32]> {
    match kind {
        // stand-in for PBKDF2(passphrase, ssid)
        KeyKind::Wpa2Personal | KeyKind::Wpa3Sae | KeyKind::PasnOverAuth => {
            Some(hkdf32(params.passphrase.as_bytes(), params.ssid.as_bytes(), b"pmk"))
        }
        KeyKind::Enterprise => Some(hkdf32(
            params.enterprise_credential.as_bytes(),
            params.ssid.as_bytes(),
            b"msk",
        )),
        KeyKind::PasnStandalone => None,
    }
}

struct Exchange {
    anonce: [u8; 32],
    snonce: [u8; 32],
    ephemeral: [u8; 32],
}

impl Exchange {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut e = Self {
            anonce: [0; 32],
            snonce: [0; 32],
            ephemeral: [0; 32],
        };
        rng.fill_bytes(&mut e.anonce);
        rng.fill_bytes(&mut e.snonce);
        rng.fill_bytes(&mut e.ephemeral);
        e
    }
}

fn ptk(kind: KeyKind, pmk: Option<&[u8; 32]>, ex: &Exchange, a: &str, b: &str) -> Ptk {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mut ikm = Vec::with_capacity(64);
    if let Some(p) = pmk {
        ikm.extend_from_slice(p);
    }
    // SAE, PASN and EAP mix in a secret that never appears on the air
    if !matches!(kind, KeyKind::Wpa2Personal) {
        ikm.extend_from_slice(&ex.ephemeral);
    }
    let salt = [ex.anonce, ex.snonce].concat();
    let info = [b"ptk|".as_slice(), lo.as_bytes(), b"|", hi.as_bytes()].concat();
    let mut k = hkdf32(&ikm, &salt, &info);
    if kind == KeyKind::PasnOverAuth {
        k = hkdf32(&k, b"", b"pasn");
    }
    Ptk(k)
}

/// Who ends up holding which PTK for one key-establishment run.
pub fn establish_keys(
    kind: KeyKind,
    params: &KeyParams,
    knowledge: &AdversaryKnowledge,
    seed: u64,
) -> EstablishedKeys {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pmk = derive_pmk(kind, params);
    let pmk_handle = pmk.map(|p| hex::encode(&Sha256::digest(p)[..8]));
    let adv_addr = "02:00:00:00:00:ad";
    let ctx = |owner, peer, ptk: Ptk, bound: &str| KeyContext {
        kind,
        owner,
        peer,
        pmk_handle: pmk_handle.clone(),
        ptk,
        bound_peer: bound.to_string(),
    };
    let unauth = kind == KeyKind::PasnStandalone;

    if knowledge.active_mitm && kind.mitm_feasible(knowledge.knows_passphrase) {
        let ex_i = Exchange::draw(&mut rng);
        let ex_r = Exchange::draw(&mut rng);
        let k_i = ptk(kind, pmk.as_ref(), &ex_i, &params.ista_addr, adv_addr);
        let k_r = ptk(kind, pmk.as_ref(), &ex_r, adv_addr, &params.rsta_addr);
        let (bi, br) = if unauth {
            (UNAUTHENTICATED, UNAUTHENTICATED)
        } else {
            ("adversary", "adversary")
        };
        return EstablishedKeys {
            ista: Some(ctx(Principal::Ista, Principal::Adversary, k_i.clone(), bi)),
            rsta: Some(ctx(Principal::Rsta, Principal::Adversary, k_r.clone(), br)),
            adversary: vec![
                ctx(Principal::Adversary, Principal::Ista, k_i, "ista"),
                ctx(Principal::Adversary, Principal::Rsta, k_r, "rsta"),
            ],
            mitm: true,
        };
    }

    let ex = Exchange::draw(&mut rng);
    let k = ptk(kind, pmk.as_ref(), &ex, &params.ista_addr, &params.rsta_addr);
    let (bi, br) = if unauth {
        (UNAUTHENTICATED, UNAUTHENTICATED)
    } else {
        ("rsta", "ista")
    };
    let mut adversary = Vec::new();
    if kind.passively_recoverable() && knowledge.knows_passphrase && knowledge.observes_handshake {
        // recompute from what was on the air plus the shared passphrase
        let k_adv = ptk(kind, derive_pmk(kind, params).as_ref(), &ex, &params.ista_addr, &params.rsta_addr);
        adversary.push(ctx(Principal::Adversary, Principal::Ista, k_adv.clone(), "ista"));
        adversary.push(ctx(Principal::Adversary, Principal::Rsta, k_adv, "rsta"));
    }
    EstablishedKeys {
        ista: Some(ctx(Principal::Ista, Principal::Rsta, k.clone(), bi)),
        rsta: Some(ctx(Principal::Rsta, Principal::Ista, k, br)),
        adversary,
        mitm: false,
    }
}
