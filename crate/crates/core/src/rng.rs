//! Deterministic random streams derived from one master seed.
//!
//! Every consumer gets its own ChaCha8 stream keyed by the master seed and
//! a fixed stream id, so adding draws in one place never shifts another:
//!
//! | stream                 | id                 |
//! |------------------------|--------------------|
//! | parameter init         | 1                  |
//! | fraction split         | 2                  |
//! | synthetic data         | 3                  |
//! | epoch `e` shuffle      | `0x1_0000_0000 + e`|

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_STREAM: u64 = 1;
pub const SPLIT_STREAM: u64 = 2;
pub const SYNTH_STREAM: u64 = 3;
const SHUFFLE_BASE: u64 = 1 << 32;

pub fn stream(master_seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    rng
}

pub fn shuffle_stream(master_seed: u64, epoch: usize) -> ChaCha8Rng {
    stream(master_seed, SHUFFLE_BASE + epoch as u64)
}
