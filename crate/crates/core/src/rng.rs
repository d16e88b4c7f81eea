//! Named, counter-addressed random streams.
//!
//! Every consumer of randomness asks for a stream by `(purpose, client, round)`.
//! Streams come from one ChaCha key derived from the run seed, each on its own
//! ChaCha stream id, so the draws a client sees never depend on how many other
//! clients ran before it or on which worker thread ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Partition = 1,
    TestSplit = 2,
    Init = 3,
    FairBatches = 4,
    PrivateBatches = 5,
    Noise = 6,
    Selection = 7,
    Probe = 8,
    Synthetic = 9,
}

/// Stream for `purpose`, addressed by `(client, round)`.
pub fn stream(seed: u64, purpose: Purpose, client: u32, round: u32) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id = ((purpose as u64) << 56) | ((client as u64 & 0x00FF_FFFF) << 32) | round as u64;
    rng.set_stream(id);
    rng
}

/// Stream not tied to a client or round.
pub fn global(seed: u64, purpose: Purpose) -> StreamRng {
    stream(seed, purpose, 0x00FF_FFFF, u32::MAX)
}
