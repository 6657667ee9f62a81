//! Sinusoidal feature expansion of 3-vectors.
//!
//! Layout per input vector: the raw components (optional), then for each
//! frequency `k` the block `[sin(2^k pi v_x), sin(.. v_y), sin(.. v_z),
//! cos(.. v_x), cos(.. v_y), cos(.. v_z)]`.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_freqs_position: usize,
    pub num_freqs_direction: usize,
    pub include_raw_input: bool,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        Self {
            num_freqs_position: 10,
            num_freqs_direction: 4,
            include_raw_input: true,
        }
    }
}

impl PositionalEncoding {
    pub fn position(&self) -> Frequencies {
        Frequencies {
            count: self.num_freqs_position,
            include_raw: self.include_raw_input,
        }
    }

    pub fn direction(&self) -> Frequencies {
        Frequencies {
            count: self.num_freqs_direction,
            include_raw: self.include_raw_input,
        }
    }

    pub fn position_dim(&self) -> usize {
        self.position().dim()
    }

    pub fn direction_dim(&self) -> usize {
        self.direction().dim()
    }
}

/// One half of the encoding (positions or directions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frequencies {
    pub count: usize,
    pub include_raw: bool,
}

impl Frequencies {
    pub fn dim(&self) -> usize {
        3 * (usize::from(self.include_raw) + 2 * self.count)
    }

    /// Writes the encoding of `v` into `out`, which must hold `dim()` values.
    #[inline]
    pub fn encode_into<T: Real>(&self, v: [T; 3], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut at = 0;
        if self.include_raw {
            out[..3].copy_from_slice(&v);
            at = 3;
        }
        let pi = T::lit(std::f64::consts::PI);
        let mut scale = pi;
        let two = T::lit(2.0);
        for _ in 0..self.count {
            for c in 0..3 {
                let (s, co) = (v[c] * scale).sin_cos();
                out[at + c] = s;
                out[at + 3 + c] = co;
            }
            at += 6;
            scale = scale * two;
        }
    }

    pub fn encode<T: Real>(&self, v: [T; 3]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.encode_into(v, &mut out);
        out
    }
}

/// Convenience wrapper over [`Frequencies::encode`].
pub fn positional_encode<T: Real>(v: [T; 3], half: Frequencies) -> Vec<T> {
    half.encode(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_vector_single_frequency() {
        let f = Frequencies {
            count: 1,
            include_raw: true,
        };
        assert_eq!(
            positional_encode([0.0f64; 3], f),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn half_unit_hits_sine_peak() {
        let f = Frequencies {
            count: 1,
            include_raw: true,
        };
        let e = positional_encode([0.5f64, 0.0, 0.0], f);
        assert!((e[3] - 1.0).abs() < 1e-15);
        assert!(e[6].abs() < 1e-15);
    }

    #[test]
    fn default_dims() {
        let enc = PositionalEncoding::default();
        assert_eq!(enc.position_dim(), 63);
        assert_eq!(enc.direction_dim(), 27);
        let no_raw = Frequencies {
            count: 10,
            include_raw: false,
        };
        assert_eq!(no_raw.dim(), 60);
    }

    proptest! {
        #[test]
        fn bounded_and_sized(
            v in proptest::array::uniform3(-3.0f32..3.0),
            count in 1usize..=10,
            raw in any::<bool>(),
        ) {
            let f = Frequencies { count, include_raw: raw };
            let e = f.encode(v);
            prop_assert_eq!(e.len(), 3 * (usize::from(raw) + 2 * count));
            let skip = if raw { 3 } else { 0 };
            if raw {
                prop_assert_eq!(&e[..3], &v[..]);
            }
            for x in &e[skip..] {
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }
    }
}
