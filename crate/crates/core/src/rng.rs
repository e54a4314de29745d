//! Counter-keyed random streams.
//!
//! A stream is a pure function of `(global seed, purpose, epoch, index)`, so
//! the numbers a sample sees do not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Mask,
    Augment,
    Shuffle,
    Data,
    Probe,
    Teacher,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x494e4954,
            Purpose::Mask => 0x4d41534b,
            Purpose::Augment => 0x4155474d,
            Purpose::Shuffle => 0x53485546,
            Purpose::Data => 0x44415441,
            Purpose::Probe => 0x50524f42,
            Purpose::Teacher => 0x54434852,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit key for a stream; also used as a cache key for augmented views.
pub fn stream_key(seed: u64, purpose: Purpose, epoch: u64, index: u64) -> u64 {
    let mut s = seed;
    let mut k = splitmix64(&mut s);
    for word in [purpose.tag(), epoch, index] {
        s = k ^ word;
        k = splitmix64(&mut s);
    }
    k
}

/// Independent generator for one `(seed, purpose, epoch, index)` key.
pub fn stream(seed: u64, purpose: Purpose, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut s = stream_key(seed, purpose, epoch, index);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit hash of a string (FNV-1a), for deriving per-name streams.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
