//! Seeding, hashing and float formatting helpers shared across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds several seed components into one well-mixed seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, p| splitmix(acc ^ splitmix(*p)))
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

/// Decimal rendering with `digits` significant digits in scientific form.
pub fn fmt_sig(v: f64, digits: usize) -> String {
    format!("{:.*e}", digits.saturating_sub(1), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_digits_roundtrip_f32() {
        for v in [0.1f32, 1.0 / 3.0, 0.999_999_9, 1e-7, 0.0] {
            let s = fmt_sig(f64::from(v), 9);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back as f32, v, "{s}");
        }
    }

    #[test]
    fn seventeen_digits_roundtrip_f64() {
        for v in [0.1f64, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI] {
            let back: f64 = fmt_sig(v, 17).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn mix_seed_order_sensitive() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[1, 2]), mix_seed(&[1, 2]));
    }
}
