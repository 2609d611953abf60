//! Deterministic rng streams.
//!
//! Every source of randomness in the crate derives from a base seed plus a
//! list of integer labels (client id, round, sample index, repeat, ...), so
//! results never depend on scheduling or worker count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer over `seed` combined with `salt`.
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rng stream for `(seed, labels...)`. Identical arguments give identical
/// streams.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut s = mix(seed, 0x5052_4C41); // constant domain separator
    for &l in labels {
        s = mix(s, l);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// One draw from N(0, 1) via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7, &[1, 2, 3]);
        let mut b = stream(7, &[1, 2, 3]);
        for _ in 0..16 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn labels_change_the_stream() {
        let mut a = stream(7, &[1]);
        let mut b = stream(7, &[2]);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = stream(11, &[0]);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = standard_normal(&mut rng);
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
