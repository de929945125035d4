//! Deterministic seed derivation so independent consumers of a user seed
//! (MCD starts, EM starts, simulation substreams) never share RNG state.

pub(crate) const MCD_SALT: u64 = 0x6d63645f73616c74; // "mcd_salt"
/// EM start `s` uses ChaCha stream `START_STREAM_BASE + s`.
pub(crate) const START_STREAM_BASE: u64 = 1 << 32;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a user seed with a salt into an independent derived seed.
pub(crate) fn derive(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Derived seed for one (replication, estimator) fit inside a simulation
/// plan; stable under appending estimators to the plan.
pub(crate) fn derive_fit_seed(seed: u64, replication: usize, estimator: usize) -> u64 {
    splitmix64(derive(seed, 0x666974) ^ splitmix64((replication as u64) << 20 | estimator as u64))
}
