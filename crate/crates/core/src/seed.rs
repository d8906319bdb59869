//! Every random stream is derived from one run seed by hashing
//! `(seed, purpose, epoch)`, so streams never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable across platforms and toolchains: FNV-1a over the little-endian
/// encoding of the inputs, finished with splitmix64.
pub fn sub_seed(seed: u64, purpose: &str, epoch: u64) -> u64 {
    let mut h = FNV_OFFSET;
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(purpose.bytes())
        .chain([0xff])
        .chain(epoch.to_le_bytes());
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn rng_for(seed: u64, purpose: &str, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, purpose, epoch))
}
