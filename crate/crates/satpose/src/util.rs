//! Small shared helpers: portable random draws and stable name hashing.

use crate::geometry::Quat;
use rand::Rng;

/// Standard normal via Box-Muller; avoids rand_distr so the stream stays
/// pinned by this crate alone.
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let mut u1: f64 = rng.gen();
    while u1 <= 1e-300 {
        u1 = rng.gen();
    }
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform rotation: four standard normals, normalized. No sign
/// canonicalization, so component means stay centered on zero.
pub(crate) fn random_unit_quat(rng: &mut impl Rng) -> Quat {
    loop {
        let q = Quat::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        if q.norm() > 1e-6 {
            return q.normalized().expect("norm checked above");
        }
    }
}

/// FNV-1a, used to derive per-block parameter seeds from block names.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
