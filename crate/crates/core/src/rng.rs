//! Deterministic random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by a
//! base seed, a stream tag and a few integer coordinates (step, scene, block).
//! Streams never share state, so turning one consumer off does not shift the
//! draws seen by any other, and a resumed run only needs the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named consumers of randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    BlockCenters = 2,
    ObjectRotation = 3,
    SceneRotation = 4,
    Mask = 5,
    Shuffle = 6,
    Scene = 7,
    Shape = 8,
    Eval = 9,
    Step = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from a base seed, a stream and coordinates.
pub fn derive(seed: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &c in coords {
        h = splitmix(h ^ c);
    }
    h
}

pub fn stream(seed: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, coords))
}
