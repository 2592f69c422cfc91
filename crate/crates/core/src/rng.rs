//! Deterministic, splittable randomness for decoding.
//!
//! Every generation run derives its draws from a ChaCha8 counter-based
//! generator. The stream-splitting rule is:
//!
//! ```text
//! substream(stream_index, scale) = ChaCha8 { seed, stream: stream_index << 32 | scale }
//! ```
//!
//! where `stream_index` identifies the generation stream (batch element or
//! `--jobs` worker) and `scale` the pyramid scale being sampled. Each
//! substream is consumed sequentially within its scale, so
//!
//! * two runs with the same seed produce bit-identical token pyramids,
//! * a batch of streams equals the concatenation of single-stream runs, and
//! * the scale-k draws are independent of which model emits the logits,
//!   which is what makes drafter/refiner handoffs sample-equivalent to a
//!   single-model run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Factory for per-(stream, scale) RNG substreams from one 64-bit seed.
#[derive(Debug, Clone, Copy)]
pub struct StreamRng {
    seed: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The substream used when sampling scale `scale` of stream
    /// `stream_index`.
    pub fn substream(&self, stream_index: u32, scale: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((stream_index as u64) << 32) | scale as u64);
        rng
    }
}
