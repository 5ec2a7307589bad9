//! Named RNG substreams.
//!
//! Every consumer of randomness draws from a stream derived from
//! `(seed, label, indices)`. Two runs that share a seed see the same draws for
//! the same label regardless of what other consumers did, so topology or
//! policy changes never shift the workload.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit key for a label and index tuple. FNV-1a over the label bytes
/// and the little-endian indices, then mixed with the seed.
pub fn stream_key(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // separator so ("ab", [..]) and ("a", [b..]) cannot collide trivially
    h ^= 0xff;
    h = h.wrapping_mul(FNV_PRIME);
    for idx in indices {
        for b in idx.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    splitmix64(splitmix64(seed) ^ h)
}

pub fn substream(seed: u64, label: &str, indices: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(stream_key(seed, label, indices))
}
