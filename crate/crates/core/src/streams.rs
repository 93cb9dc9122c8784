//! Named randomness sub-streams derived from one run seed, so that changing
//! how much randomness one stage consumes never shifts another stage.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Pool = 2,
    Grouping = 3,
    Shuffle = 4,
    Pprg = 5,
    Service = 6,
    Attack = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Independent generator for the `index`-th item of a stream, e.g. one per
/// encoded request.
pub fn item_rng(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = substream(seed, stream);
    rng.set_word_pos(u128::from(index) << 32);
    rng
}
