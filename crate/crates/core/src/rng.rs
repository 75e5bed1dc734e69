//! Seeded random streams.
//!
//! Every stochastic operator draws from an [`RngStream`] identified by a master
//! seed and a [`StreamId`]. Streams with different ids never share a sequence,
//! and [`RngStream::fork`] derives independent sub-streams (per epoch, per
//! sample, per worker) so results do not depend on scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamId {
    Noise,
    Shift,
    Jpeg,
    Init,
    BatchOrder,
    Augment,
    Eval,
    Theory,
}

impl StreamId {
    fn code(self) -> u64 {
        match self {
            StreamId::Noise => 1,
            StreamId::Shift => 2,
            StreamId::Jpeg => 3,
            StreamId::Init => 4,
            StreamId::BatchOrder => 5,
            StreamId::Augment => 6,
            StreamId::Eval => 7,
            StreamId::Theory => 8,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used wherever a stable (toolchain-independent) string hash is needed.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    path: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self::with_path(seed, id, 0)
    }

    fn with_path(seed: u64, id: StreamId, path: u64) -> Self {
        let key = splitmix64(seed ^ splitmix64(path));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(id.code());
        RngStream { seed, id, path, rng }
    }

    /// Independent child stream; depends only on (seed, id, fork path), never
    /// on how much of the parent has been consumed.
    pub fn fork(&self, index: u64) -> Self {
        let path = splitmix64(self.path.rotate_left(17) ^ splitmix64(index.wrapping_add(1)));
        Self::with_path(self.seed, self.id, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
