use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// One step of the splitmix64 generator; used to derive independent seeds.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic source of per-purpose RNG streams derived from one seed.
///
/// Each call to [`SeedStream::rng`] yields a fresh generator, so adding a
/// parameter does not shift the random values of the ones created before it.
#[derive(Clone, Debug)]
pub struct SeedStream {
    state: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            state: splitmix64(seed),
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.state = splitmix64(self.state);
        self.state
    }

    pub fn rng(&mut self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.next_seed())
    }
}

/// Xavier/Glorot uniform `[fan_in, fan_out]` weight matrix.
pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor {
        shape: vec![fan_in, fan_out],
        data,
    }
}
