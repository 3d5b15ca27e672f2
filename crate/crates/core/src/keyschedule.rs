//! Secure HE-LTF key schedule.
//!
//! Every measurement instance gets a 16-bit validation SAC and a 32-byte
//! waveform key, both derived from the long-term LTF seed and a strictly
//! monotone counter:
//!
//! ```text
//! prk          = HKDF-Extract(salt = "secure-ltf", ikm = seed)
//! sac          = HKDF-Expand(prk, "SAC"    || counter_be64, 2)
//! waveform_key = HKDF-Expand(prk, "LTFKEY" || counter_be64, 32)
//! ```
//!
//! The waveform key drives an HMAC-SHA256 counter-mode bit stream which is
//! cut into one phase bit and `6 * n_active` QAM bits per LTF symbol.

use std::fmt;

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const SEED_LEN: usize = 32;
/// Reserved SAC carried by the deliberately invalid recovery instance.
pub const NULL_SAC: u16 = 0;
/// Bits of keystream per QAM symbol.
pub const BITS_PER_QAM_SYMBOL: usize = 6;
/// Active tone counts for 20, 40 and 80 MHz.
pub const SUPPORTED_ACTIVE_TONES: [usize; 3] = [122, 242, 498];

const COUNTER_WINDOW: u64 = 64;
const EXTRACT_SALT: &[u8] = b"secure-ltf";
const STREAM_LABEL: &[u8] = b"LTFSTREAM";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyScheduleError {
    #[error("secure LTF counter {0} was already consumed")]
    CounterReuse(u64),
    #[error("unsupported active tone count {0} (expected 122, 242 or 498)")]
    UnsupportedBandwidth(usize),
    #[error("LTF symbol count must be at least 1")]
    NoSymbols,
    #[error("invalid LTF seed: {0}")]
    InvalidSeed(String),
}

/// Long-term secure LTF key seed. Never printed or serialized.
#[derive(Clone, PartialEq, Eq)]
pub struct LtfSeed([u8; SEED_LEN]);

impl LtfSeed {
    pub fn from_bytes(bytes: [u8; SEED_LEN]) -> Self {
        Self(bytes)
    }

    /// Parses the 64-hex-character form used in config files.
    pub fn from_hex(s: &str) -> Result<Self, KeyScheduleError> {
        let s = s.trim();
        if s.len() != 2 * SEED_LEN {
            return Err(KeyScheduleError::InvalidSeed(format!(
                "expected {} hex characters, got {}",
                2 * SEED_LEN,
                s.len()
            )));
        }
        let mut out = [0u8; SEED_LEN];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| KeyScheduleError::InvalidSeed(e.to_string()))?;
        Ok(Self(out))
    }

    /// Derives a seed from arbitrary key material (e.g. a PTK handle).
    pub fn derive_from(key_material: &[u8], context: &[u8]) -> Self {
        let hk = Hkdf::<Sha256>::new(Some(b"ltf-seed"), key_material);
        let mut out = [0u8; SEED_LEN];
        hk.expand(context, &mut out)
            .expect("32 bytes is a valid HKDF output length");
        Self(out)
    }

    pub(crate) fn as_bytes(&self) -> &[u8; SEED_LEN] {
        &self.0
    }
}

impl fmt::Debug for LtfSeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LtfSeed(<redacted>)")
    }
}

/// Per-instance secure LTF material.
#[derive(Clone, PartialEq, Eq)]
pub struct InstanceMaterial {
    pub sac: u16,
    pub waveform_key: [u8; 32],
    pub counter: u64,
}

impl fmt::Debug for InstanceMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InstanceMaterial")
            .field("sac", &format_args!("{:#06x}", self.sac))
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

/// Pure derivation of the material for `(seed, counter)`.
pub fn material_for(seed: &LtfSeed, counter: u64) -> InstanceMaterial {
    let hk = Hkdf::<Sha256>::new(Some(EXTRACT_SALT), seed.as_bytes());
    let ctr = counter.to_be_bytes();

    let mut sac = [0u8; 2];
    hk.expand_multi_info(&[b"SAC", &ctr], &mut sac)
        .expect("2 bytes is a valid HKDF output length");
    let mut waveform_key = [0u8; 32];
    hk.expand_multi_info(&[b"LTFKEY", &ctr], &mut waveform_key)
        .expect("32 bytes is a valid HKDF output length");

    InstanceMaterial {
        sac: u16::from_be_bytes(sac),
        waveform_key,
        counter,
    }
}

/// Single-owner secure LTF state: seed plus monotone counter.
///
/// Consumed counters are tracked as a low-water mark (everything below is
/// consumed) plus a 64-entry bitmap above it.
#[derive(Clone)]
pub struct SecureLtfState {
    seed: LtfSeed,
    counter: u64,
    low_water: u64,
    window: u64,
}

impl fmt::Debug for SecureLtfState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureLtfState")
            .field("counter", &self.counter)
            .field("low_water", &self.low_water)
            .finish_non_exhaustive()
    }
}

impl SecureLtfState {
    /// Fresh state whose first instance uses `initial_counter`.
    pub fn new(seed: LtfSeed, initial_counter: u64) -> Self {
        Self {
            seed,
            counter: initial_counter,
            low_water: initial_counter,
            window: 0,
        }
    }

    pub fn seed(&self) -> &LtfSeed {
        &self.seed
    }

    /// Counter value the next instance will use.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn is_consumed(&self, counter: u64) -> bool {
        if counter < self.low_water {
            return true;
        }
        let off = counter - self.low_water;
        off < COUNTER_WINDOW && (self.window >> off) & 1 == 1
    }

    fn mark_consumed(&mut self, counter: u64) {
        if counter < self.low_water {
            return;
        }
        if counter - self.low_water >= COUNTER_WINDOW {
            // slide: anything that falls below the window counts as consumed
            let new_low = counter - (COUNTER_WINDOW - 1);
            let shift = new_low - self.low_water;
            self.window = if shift >= COUNTER_WINDOW {
                0
            } else {
                self.window >> shift
            };
            self.low_water = new_low;
        }
        self.window |= 1 << (counter - self.low_water);
        while self.window & 1 == 1 {
            self.window >>= 1;
            self.low_water += 1;
        }
    }

    /// Derives the material for the current counter, records it as consumed
    /// and advances the counter by one.
    pub fn derive_instance(&mut self) -> Result<InstanceMaterial, KeyScheduleError> {
        let c = self.counter;
        if self.is_consumed(c) {
            return Err(KeyScheduleError::CounterReuse(c));
        }
        let m = material_for(&self.seed, c);
        self.mark_consumed(c);
        self.counter = c + 1;
        Ok(m)
    }

    /// Material for the current counter without the reuse check, for
    /// reproducing implementations that skip it. Still records consumption.
    pub fn derive_unchecked(&mut self) -> InstanceMaterial {
        let c = self.counter;
        let m = material_for(&self.seed, c);
        self.mark_consumed(c);
        self.counter = c + 1;
        m
    }

    /// Moves the counter to an arbitrary value (error injection and tests).
    pub fn force_counter(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Marks a counter consumed without deriving (failed instances).
    pub fn invalidate(&mut self, counter: u64) {
        self.mark_consumed(counter);
        if self.counter <= counter {
            self.counter = counter + 1;
        }
    }
}

/// Pseudorandom 64-QAM content of one secure HE-LTF NDP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QamSymbolGrid {
    /// `symbols[s][t]` is the 64-QAM index of active tone `t` in LTF symbol `s`.
    pub symbols: Vec<Vec<u8>>,
    /// Phase index per LTF symbol: 0 means 0, 1 means pi/4.
    pub beta: Vec<u8>,
    pub n_ltf: usize,
    /// Keystream bits consumed to build the grid.
    pub bits_consumed: usize,
}

impl QamSymbolGrid {
    pub fn n_active(&self) -> usize {
        self.symbols.first().map_or(0, Vec::len)
    }

    pub fn beta_radians(&self, symbol: usize) -> f64 {
        self.beta[symbol] as f64 * std::f64::consts::FRAC_PI_4
    }
}

/// HMAC-SHA256 counter-mode keystream read MSB-first.
struct KeyStream {
    mac: Hmac<Sha256>,
    block: [u8; 32],
    block_index: u32,
    bit_pos: usize,
    consumed: usize,
}

impl KeyStream {
    fn new(key: &[u8; 32]) -> Self {
        let mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
        let mut ks = Self {
            mac,
            block: [0; 32],
            block_index: 0,
            bit_pos: 256,
            consumed: 0,
        };
        ks.refill();
        ks
    }

    fn refill(&mut self) {
        let mut m = self.mac.clone();
        m.update(STREAM_LABEL);
        m.update(&self.block_index.to_be_bytes());
        self.block.copy_from_slice(&m.finalize().into_bytes());
        self.block_index += 1;
        self.bit_pos = 0;
    }

    fn bit(&mut self) -> u8 {
        if self.bit_pos == 256 {
            self.refill();
        }
        let byte = self.block[self.bit_pos / 8];
        let b = (byte >> (7 - self.bit_pos % 8)) & 1;
        self.bit_pos += 1;
        self.consumed += 1;
        b
    }

    fn bits(&mut self, n: usize) -> u8 {
        (0..n).fold(0u8, |acc, _| (acc << 1) | self.bit())
    }
}

/// Expands the waveform key into `n_ltf` rows of `n_active` 64-QAM indices.
pub fn expand_qam_grid(
    material: &InstanceMaterial,
    n_ltf: usize,
    n_active: usize,
) -> Result<QamSymbolGrid, KeyScheduleError> {
    if !SUPPORTED_ACTIVE_TONES.contains(&n_active) {
        return Err(KeyScheduleError::UnsupportedBandwidth(n_active));
    }
    if n_ltf == 0 {
        return Err(KeyScheduleError::NoSymbols);
    }
    let mut ks = KeyStream::new(&material.waveform_key);
    let mut symbols = Vec::with_capacity(n_ltf);
    let mut beta = Vec::with_capacity(n_ltf);
    for _ in 0..n_ltf {
        beta.push(ks.bit());
        symbols.push(
            (0..n_active)
                .map(|_| ks.bits(BITS_PER_QAM_SYMBOL))
                .collect(),
        );
    }
    Ok(QamSymbolGrid {
        symbols,
        beta,
        n_ltf,
        bits_consumed: ks.consumed,
    })
}

pub fn verify_sac(received: u16, expected: &InstanceMaterial) -> bool {
    received == expected.sac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seed() -> LtfSeed {
        LtfSeed::from_bytes([7u8; 32])
    }

    #[test]
    fn forced_reuse_is_rejected() {
        let mut st = SecureLtfState::new(seed(), 5);
        st.derive_instance().unwrap();
        st.force_counter(5);
        assert_eq!(st.derive_instance(), Err(KeyScheduleError::CounterReuse(5)));
    }

    #[test]
    fn derivation_is_deterministic() {
        let mut a = SecureLtfState::new(seed(), 5);
        let mut b = SecureLtfState::new(seed(), 5);
        assert_eq!(a.derive_instance().unwrap(), b.derive_instance().unwrap());
    }

    #[test]
    fn adjacent_counters_give_different_sac() {
        let m5 = material_for(&seed(), 5);
        let m6 = material_for(&seed(), 6);
        assert_ne!(m5.sac, m6.sac);
        assert_ne!(m5.waveform_key, m6.waveform_key);
    }

    #[test]
    fn grid_shape_and_bit_budget() {
        let m = material_for(&seed(), 0);
        let g = expand_qam_grid(&m, 1, 122).unwrap();
        assert_eq!(g.symbols[0].len(), 122);
        assert!(g.symbols[0].iter().all(|&s| s < 64));
        assert_eq!(g.bits_consumed, 6 * 122 + 1);
        assert_eq!(g, expand_qam_grid(&m, 1, 122).unwrap());
        assert_eq!(
            expand_qam_grid(&m, 1, 100),
            Err(KeyScheduleError::UnsupportedBandwidth(100))
        );
        assert_eq!(expand_qam_grid(&m, 0, 122), Err(KeyScheduleError::NoSymbols));
    }

    #[test]
    fn sac_checks() {
        let m = material_for(&seed(), 9);
        assert!(verify_sac(m.sac, &m));
        assert!(!verify_sac(m.sac ^ 1, &m));
    }

    #[test]
    fn random_sac_guesses_rarely_match() {
        let m = material_for(&seed(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 200_000u32;
        let hits = (0..trials)
            .filter(|_| verify_sac(rng.random::<u16>(), &m))
            .count() as f64;
        // expected 200000 / 65536 ≈ 3.05 hits; Poisson 5 sigma bound
        let mean = trials as f64 / 65536.0;
        assert!(hits <= mean + 5.0 * mean.sqrt() + 1.0, "hits = {hits}");
    }

    #[test]
    fn keystream_is_balanced_over_qam_indices() {
        let s = seed();
        let mut counts = [0u64; 64];
        let grids = 10_000u64;
        for c in 0..grids {
            let g = expand_qam_grid(&material_for(&s, c), 1, 122).unwrap();
            for &i in &g.symbols[0] {
                counts[i as usize] += 1;
            }
        }
        let n = (grids * 122) as f64;
        let p = 1.0 / 64.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - n * p).abs() <= 3.0 * sigma + 1.0, "index {i}: {c}");
        }
    }

    #[test]
    fn seed_hex_parsing() {
        let hex = "00".repeat(31) + "ff";
        let s = LtfSeed::from_hex(&hex).unwrap();
        assert_eq!(s.as_bytes()[31], 0xff);
        assert!(LtfSeed::from_hex("abcd").is_err());
        assert!(LtfSeed::from_hex(&"zz".repeat(32)).is_err());
        assert_eq!(format!("{s:?}"), "LtfSeed(<redacted>)");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Derive,
        Fail,
        Force(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => Just(Op::Derive),
            2 => Just(Op::Fail),
            1 => (0u64..300).prop_map(Op::Force),
        ]
    }

    proptest! {
        #[test]
        fn counter_advances_once_per_derive(start in 0u64..1_000_000, k in 0usize..200) {
            let mut st = SecureLtfState::new(seed(), start);
            for _ in 0..k {
                st.derive_instance().unwrap();
            }
            prop_assert_eq!(st.counter(), start + k as u64);
        }

        #[test]
        fn consumed_counters_never_repeat(ops in prop::collection::vec(op(), 1..200)) {
            let mut st = SecureLtfState::new(seed(), 0);
            let mut seen = std::collections::BTreeSet::new();
            for o in ops {
                match o {
                    Op::Derive => {
                        if let Ok(m) = st.derive_instance() {
                            prop_assert!(seen.insert(m.counter), "counter {} reused", m.counter);
                        }
                    }
                    Op::Fail => {
                        // recovery: the failed counter is burnt, never re-derived
                        let c = st.counter();
                        if !st.is_consumed(c) {
                            prop_assert!(seen.insert(c));
                        }
                        st.invalidate(c);
                    }
                    Op::Force(c) => st.force_counter(c),
                }
            }
        }
    }
}
