//! Seed derivation.
//!
//! Every random stream in a run is derived from one master seed and a
//! textual label, so streams are independent of the order in which they
//! are requested:
//!
//! ```text
//! stream_seed = splitmix64(master ^ fnv1a64(label))
//! ```
//!
//! Labels used by the toolkit: `init/<param-role>` for parameter
//! initialisation, `batch` for training-batch shuffling, `val-batch` for the
//! validation cycler, `pcgrad` for projection ordering, `data` and
//! `split` for dataset generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a64(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label))
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
