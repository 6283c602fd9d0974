//! Sinusoidal positional encoding of 3-vectors.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn pos_dim(&self) -> usize {
        encoded_dim(self.pos_freqs, self.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_dim(self.dir_freqs, self.include_input)
    }
}

/// Width of the encoding of a 3-vector with `freqs` octaves.
pub const fn encoded_dim(freqs: usize, include_input: bool) -> usize {
    3 * include_input as usize + 6 * freqs
}

/// Writes `[x?, sin(2⁰πx), cos(2⁰πx), …, sin(2^{F-1}πx), cos(2^{F-1}πx)]`
/// into `out`, each block holding the three components.
pub fn encode_into<T: Real>(x: [T; 3], freqs: usize, include_input: bool, out: &mut [T]) {
    debug_assert_eq!(out.len(), encoded_dim(freqs, include_input));
    let mut k = 0;
    if include_input {
        out[..3].copy_from_slice(&x);
        k = 3;
    }
    let mut scale = T::PI();
    let two = T::lit(2.0);
    for _ in 0..freqs {
        for c in 0..3 {
            let (s, co) = (scale * x[c]).sin_cos();
            out[k + c] = s;
            out[k + 3 + c] = co;
        }
        k += 6;
        scale = scale * two;
    }
}

pub fn positional_encode<T: Real>(x: [T; 3], freqs: usize, include_input: bool) -> Vec<T> {
    let mut out = vec![T::zero(); encoded_dim(freqs, include_input)];
    encode_into(x, freqs, include_input, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn origin_encodes_to_zero_sin_unit_cos() {
        let e = positional_encode([0.0f64; 3], 10, true);
        assert_eq!(e.len(), 63);
        assert_eq!(&e[..3], &[0.0; 3]);
        for block in e[3..].chunks(6) {
            assert_eq!(&block[..3], &[0.0; 3]);
            assert_eq!(&block[3..], &[1.0; 3]);
        }
    }

    #[test]
    fn configured_dimensions() {
        let cfg = EncodingConfig::default();
        assert_eq!(cfg.pos_dim(), 63);
        assert_eq!(cfg.dir_dim(), 27);
    }

    #[test]
    fn single_frequency_closed_form() {
        let e = positional_encode([0.5f64, 0.0, 0.0], 1, true);
        let expect = [0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        for (a, b) in e.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn bounded_and_unit_pairs(x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0, f in 0usize..=16) {
            let e = positional_encode([x, y, z], f, true);
            prop_assert_eq!(e.len(), encoded_dim(f, true));
            prop_assert_eq!(positional_encode([x, y, z], f, false).len(), 6 * f);
            for block in e[3..].chunks(6) {
                for c in 0..3 {
                    prop_assert!(block[c].abs() <= 1.0 && block[c + 3].abs() <= 1.0);
                    prop_assert!((block[c] * block[c] + block[c + 3] * block[c + 3] - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
