//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the
//! experiment seed and selected by `(purpose, a, b, c)`, e.g. `(View, sample,
//! epoch, view)`. Draws therefore do not depend on iteration order or on how
//! work is split across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Factors = 1,
    EvalNuisance = 2,
    View = 3,
    Penalty = 4,
    Shuffle = 5,
    Init = 6,
    FeatureAverage = 7,
    Rademacher = 8,
    CondVar = 9,
    Sweep = 10,
    Colour = 11,
    Test = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, purpose, a, b, c)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = splitmix(purpose as u64);
    for part in [a, b, c] {
        id = splitmix(id ^ part);
    }
    rng.set_stream(id);
    rng
}

/// Uniform draw on `[low, high)`; degenerate ranges return `low`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    if high > low {
        rng.gen_range(low..high)
    } else {
        low
    }
}
