//! Counter-based noise streams.
//!
//! Each path owns a ChaCha8 stream selected by `(seed, domain, path_id)`. Within
//! a stream, the draw for `(step, node)` lives at a fixed word offset, so any
//! draw can be reproduced without replaying earlier ones and paths never share
//! noise regardless of how they are scheduled.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent families of paths drawn from the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamDomain {
    Training = 1,
    Evaluation = 2,
    Synthetic = 3,
    HeldOut = 4,
}

/// 64-bit words reserved per (step, node): two for the Gaussian, one for the
/// bridge-crossing uniform, one spare.
const WORDS_PER_DRAW: u128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: StreamDomain,
    pub path_id: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: StreamDomain, path_id: u64) -> StreamKey {
        StreamKey { seed, domain, path_id }
    }

    fn stream_id(&self) -> u64 {
        ((self.domain as u64) << 56) ^ (self.path_id & ((1 << 56) - 1))
    }
}

/// Cursor over the draws of one path.
pub struct NoiseStream {
    rng: ChaCha8Rng,
    n: usize,
}

/// One (step, node) draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub normal: f64,
    pub uniform: f64,
}

impl NoiseStream {
    pub fn new(key: StreamKey, n: usize) -> NoiseStream {
        let mut rng = ChaCha8Rng::seed_from_u64(key.seed);
        rng.set_stream(key.stream_id());
        NoiseStream { rng, n }
    }

    /// Position the cursor at the first node of `step`.
    pub fn seek(&mut self, step: usize) {
        let words64 = step as u128 * self.n as u128 * WORDS_PER_DRAW;
        self.rng.set_word_pos(words64 * 2);
    }

    /// Next draw in (step, node) order.
    pub fn next_draw(&mut self) -> Draw {
        let u1 = open_unit(self.rng.next_u64());
        let u2 = open_unit(self.rng.next_u64());
        let u3 = open_unit(self.rng.next_u64());
        let _spare = self.rng.next_u64();
        let normal = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        Draw { normal, uniform: u3 }
    }

    pub fn draw_at(&mut self, step: usize, node: usize) -> Draw {
        let words64 = (step as u128 * self.n as u128 + node as u128) * WORDS_PER_DRAW;
        self.rng.set_word_pos(words64 * 2);
        self.next_draw()
    }
}

/// Uniform on (0, 1].
fn open_unit(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}
