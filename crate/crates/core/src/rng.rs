//! Counter-based random substreams.
//!
//! Every random quantity in the crate is drawn from a [`RngStream`], a
//! `(master_seed, stream_id)` pair that names a ChaCha8 keystream. The
//! master seed selects the key and the stream id selects the 64-bit nonce, so
//! two streams never overlap and any stream can be regenerated without
//! replaying the ones before it. Monte-Carlo drivers hand chunk `c` the
//! stream `parent.substream(c)`, which makes their output independent of how
//! chunks are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

/// Finalizer from SplitMix64; a bijection on `u64` with good avalanche.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub const fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Derives the `index`-th child stream under the same master seed.
    pub fn substream(&self, index: u64) -> Self {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self::new(self.master_seed, id)
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Well-known stream ids used by the training harness and analyses.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASKS: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const ANALYSIS: u64 = 6;
}
