//! Sources of suggested bins.
//!
//! Every round `i` of the process owns its own pool `Z_i`, an i.i.d. sequence
//! of uniform bins that is consumed only when a ball reaches round `i`.
//!
//! Seeded pools use ChaCha8 with a fixed stream layout: for a trial seed `s`,
//! round `i` (1-based) reads `ChaCha8Rng::seed_from_u64(s)` on stream `i`, and
//! the strategy's auxiliary randomness reads the same key on stream 0. The
//! streams are disjoint, so consuming one pool never shifts another.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Random stream handed to strategies and pools.
pub type StreamRng = ChaCha8Rng;

/// Stream index reserved for strategy-local randomness.
pub const AUX_STREAM: u64 = 0;

/// Build the stream `stream` of the key derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub trait Pool {
    /// Next bin from the pool, or `None` once a finite pool runs dry.
    fn draw(&mut self) -> Option<usize>;
}

/// Unbounded pool of uniform bins on `[0, n)`.
#[derive(Debug, Clone)]
pub struct RandomPool {
    rng: StreamRng,
    dist: Uniform<usize>,
}

impl RandomPool {
    pub fn new(n: usize, seed: u64, round: usize) -> Result<Self> {
        let dist = Uniform::new(0, n)
            .map_err(|_| Error::Config(format!("cannot sample bins from n = {n}")))?;
        Ok(RandomPool {
            rng: stream_rng(seed, round as u64),
            dist,
        })
    }
}

impl Pool for RandomPool {
    #[inline]
    fn draw(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

/// Finite pool that replays a fixed list of bins.
#[derive(Debug, Clone, Default)]
pub struct ReplayPool {
    values: Vec<usize>,
    pos: usize,
}

impl ReplayPool {
    pub fn new(values: Vec<usize>) -> Self {
        ReplayPool { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl Pool for ReplayPool {
    fn draw(&mut self) -> Option<usize> {
        let v = self.values.get(self.pos).copied()?;
        self.pos += 1;
        Some(v)
    }
}

/// The `d` pools of one trial, indexed by 1-based round.
#[derive(Debug, Clone)]
pub struct Pools<P> {
    pools: Vec<P>,
}

impl<P: Pool> Pools<P> {
    pub fn from_vec(pools: Vec<P>) -> Self {
        Pools { pools }
    }

    pub fn depth(&self) -> usize {
        self.pools.len()
    }

    #[inline]
    pub fn draw(&mut self, round: usize) -> Result<usize> {
        self.pools
            .get_mut(round - 1)
            .and_then(Pool::draw)
            .ok_or(Error::PoolExhausted { round })
    }

    pub fn into_inner(self) -> Vec<P> {
        self.pools
    }
}

impl Pools<RandomPool> {
    /// Seeded pools for rounds `1..=d` following the stream layout above.
    pub fn seeded(n: usize, d: usize, seed: u64) -> Result<Self> {
        let pools = (1..=d)
            .map(|round| RandomPool::new(n, seed, round))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pools { pools })
    }
}

impl Pools<ReplayPool> {
    pub fn replay(values: Vec<Vec<usize>>) -> Self {
        Pools {
            pools: values.into_iter().map(ReplayPool::new).collect(),
        }
    }
}


/// Seed of trial `index` under `base`: SplitMix64 of `base + (index + 1)·φ`,
/// where φ = 0x9E37_79B9_7F4A_7C15. Depends only on `(base, index)`, so the
/// trial set is the same whatever order or thread runs it.
pub fn trial_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
