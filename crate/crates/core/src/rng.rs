//! Counter-based random streams.
//!
//! Every random quantity in the simulator is addressed by a key built from a
//! user seed, a domain tag and one or two indices. Draws never depend on the
//! order in which keys are visited, so parallel and serial runs agree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint even when the
/// user reuses a seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Domain {
    Diffuser = 0x6466_6673,
    ScanJitter = 0x7363_616e,
    ChopperJitter = 0x6a69_7474,
    PhotonNoise = 0x706f_6973,
    SystematicNoise = 0x7379_7374,
    Solver = 0x736f_6c76,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash `(seed, domain, a, b)` into a 64-bit key.
#[inline]
pub fn key(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed ^ (domain as u64).rotate_left(17));
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(32))
}

/// Uniform in the open interval (0, 1), 53-bit resolution.
#[inline]
pub fn uniform01(k: u64) -> f64 {
    ((splitmix64(k) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviate for a key (Box-Muller on two derived uniforms).
#[inline]
pub fn standard_normal(k: u64) -> f64 {
    let u1 = uniform01(k);
    let u2 = uniform01(k ^ 0x5851_f42d_4c95_7f2d);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A sequential generator addressed by a key; used where a run of draws
/// belongs to one logical cell (one realization cycle, for example).
pub fn stream(k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(k)
}
