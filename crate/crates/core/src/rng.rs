//! Deterministic random streams keyed by draw, player and noise channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Noise source a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Channel {
    Common = 0,
    IdioA = 1,
    IdioN = 2,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream identifier; distinct tuples give unrelated seeds.
pub fn stream_id(master_seed: u64, common: u64, player: u64, channel: Channel) -> u64 {
    let mut h = mix(master_seed);
    h = mix(h ^ common);
    h = mix(h ^ player);
    mix(h ^ channel as u64)
}

/// Standard normal draws from one stream.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(master_seed: u64, common: u64, player: u64, channel: Channel) -> Self {
        NormalStream {
            rng: ChaCha8Rng::seed_from_u64(stream_id(master_seed, common, player, channel)),
        }
    }

    #[inline]
    pub fn standard(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Brownian increment over `dt` as the sum of `refine` finer increments.
    ///
    /// A run with `n` steps and `refine = 2` sees the same Brownian path as a
    /// run with `2n` steps and `refine = 1`.
    #[inline]
    pub fn increment(&mut self, dt: f64, refine: usize) -> f64 {
        if refine == 1 {
            return dt.sqrt() * self.standard();
        }
        let sub = (dt / refine as f64).sqrt();
        (0..refine).map(|_| sub * self.standard()).sum()
    }
}
