//! Square QAM alphabets used for HE-LTF training content.
//!
//! Points are Gray-mapped per axis and scaled to unit average power.

use num_complex::Complex64;

/// A square QAM constellation indexed by symbol value.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    bits_per_symbol: u32,
}

fn gray_to_level(g: u32, bits: u32) -> f64 {
    // binary-reflected Gray decode, then map 0..M-1 onto odd integers
    let mut b = g;
    let mut shift = 1;
    while shift < bits {
        b ^= b >> shift;
        shift <<= 1;
    }
    let m = 1u32 << bits;
    2.0 * b as f64 - (m as f64 - 1.0)
}

impl Constellation {
    /// Square QAM with `bits_per_symbol` even (2 = QPSK, 6 = 64-QAM).
    pub fn square(bits_per_symbol: u32) -> Self {
        assert!(
            bits_per_symbol >= 2 && bits_per_symbol.is_multiple_of(2),
            "square QAM needs an even bit count"
        );
        let half = bits_per_symbol / 2;
        let m = 1u32 << bits_per_symbol;
        let axis_levels = 1u32 << half;
        // E|x|^2 for levels ±1, ±3, ... per axis is (L^2 - 1) / 3
        let axis_power = ((axis_levels * axis_levels) as f64 - 1.0) / 3.0;
        let norm = (2.0 * axis_power).sqrt();
        let points = (0..m)
            .map(|idx| {
                let i_bits = idx >> half;
                let q_bits = idx & (axis_levels - 1);
                Complex64::new(
                    gray_to_level(i_bits, half) / norm,
                    gray_to_level(q_bits, half) / norm,
                )
            })
            .collect();
        Self {
            points,
            bits_per_symbol,
        }
    }

    pub fn qam64() -> Self {
        Self::square(6)
    }

    pub fn qpsk() -> Self {
        Self::square(2)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.bits_per_symbol
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    /// Index of the point closest to `z`.
    pub fn nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Smallest Euclidean distance between two distinct points.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.min((a - b).norm());
            }
        }
        best
    }

    pub fn average_power(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qam64_has_unit_power_and_expected_spacing() {
        let c = Constellation::qam64();
        assert_eq!(c.len(), 64);
        assert!((c.average_power() - 1.0).abs() < 1e-12);
        assert!((c.min_distance() - 2.0 / 42f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        let c = Constellation::qam64();
        let d = c.min_distance();
        for i in 0..64 {
            for j in 0..64 {
                if i != j && ((c.point(i) - c.point(j)).norm() - d).abs() < 1e-9 {
                    assert_eq!((i ^ j).count_ones(), 1, "{i} vs {j}");
                }
            }
        }
    }

    #[test]
    fn nearest_inverts_point() {
        let c = Constellation::qpsk();
        for i in 0..c.len() {
            assert_eq!(c.nearest(c.point(i) * 0.9), i);
        }
    }
}
