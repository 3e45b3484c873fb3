//! Seeded, stateless random streams.
//!
//! Every consumer derives its generator from the run seed plus a path of
//! integers (epoch, step, sample index, ...), so results never depend on the
//! order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    Rng::seed_from_u64(h)
}

// Stream tags, so unrelated consumers sharing a seed never collide.
pub const TAG_CLASS: u64 = 1;
pub const TAG_SIGNER: u64 = 2;
pub const TAG_SAMPLE: u64 = 3;
pub const TAG_INIT: u64 = 4;
pub const TAG_BANK: u64 = 5;
pub const TAG_SHUFFLE: u64 = 6;
pub const TAG_VIEW: u64 = 7;
pub const TAG_CODEC: u64 = 8;
