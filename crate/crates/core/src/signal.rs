//! Complex baseband signal type and its on-disk I/Q format.
//!
//! Export format: little-endian interleaved `f32` I/Q samples, plus a JSON
//! sidecar carrying the sample rate, sample count and config hash.

use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct BasebandSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

/// Metadata written next to an exported I/Q file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqSidecar {
    pub format: String,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub config_hash: String,
}

pub const IQ_FORMAT: &str = "cf32le";

impl BasebandSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite())
    }

    /// Interleaved little-endian f32 I/Q bytes.
    pub fn to_cf32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8);
        for s in &self.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cf32_bytes(bytes: &[u8], sample_rate_hz: f64) -> io::Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "cf32 stream length is not a multiple of 8 bytes",
            ));
        }
        let samples = bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Ok(Self::new(samples, sample_rate_hz))
    }

    /// Writes `<stem>.cf32` and `<stem>.json`.
    pub fn write_iq(&self, dir: &Path, stem: &str, config_hash: &str) -> io::Result<()> {
        fs::write(dir.join(format!("{stem}.cf32")), self.to_cf32_bytes())?;
        let side = IqSidecar {
            format: IQ_FORMAT.to_string(),
            sample_rate_hz: self.sample_rate_hz,
            n_samples: self.samples.len(),
            config_hash: config_hash.to_string(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(io::Error::other)?;
        fs::write(dir.join(format!("{stem}.json")), json + "\n")
    }

    pub fn read_iq(dir: &Path, stem: &str) -> io::Result<(Self, IqSidecar)> {
        let side: IqSidecar =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let sig = Self::from_cf32_bytes(&fs::read(dir.join(format!("{stem}.cf32")))?, side.sample_rate_hz)?;
        if sig.len() != side.n_samples {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "sample count disagrees with sidecar",
            ));
        }
        Ok((sig, side))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cf32_round_trip_is_f32_exact(v in prop::collection::vec((-1e3f32..1e3, -1e3f32..1e3), 0..64)) {
            let sig = BasebandSignal::new(
                v.iter().map(|&(a, b)| Complex64::new(a as f64, b as f64)).collect(),
                20e6,
            );
            let back = BasebandSignal::from_cf32_bytes(&sig.to_cf32_bytes(), 20e6).unwrap();
            prop_assert_eq!(back, sig);
        }
    }

    #[test]
    fn file_export_carries_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let sig = BasebandSignal::new(vec![Complex64::new(0.5, -0.25); 10], 80e6);
        sig.write_iq(dir.path(), "ndp", "abc123").unwrap();
        let (back, side) = BasebandSignal::read_iq(dir.path(), "ndp").unwrap();
        assert_eq!(back, sig);
        assert_eq!(side.config_hash, "abc123");
        assert_eq!(side.format, IQ_FORMAT);
        assert!(BasebandSignal::from_cf32_bytes(&[0u8; 7], 1.0).is_err());
    }
}
