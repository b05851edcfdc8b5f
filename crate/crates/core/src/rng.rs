//! Seeded, splittable random streams.
//!
//! Every consumer of randomness draws from a ChaCha stream keyed by
//! `(seed, Stream)`. Distinct streams of the same seed never overlap, so the
//! mechanism noise is independent of the plant noise for any seed.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitialState = 1,
    ProcessNoise = 2,
    MeasurementNoise = 3,
    OutputPrivacy = 4,
    InputPrivacy = 5,
    MonteCarlo = 6,
}

pub type StreamRng = ChaCha12Rng;

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Derive the seed of the `index`-th sub-task (run, shard, sweep row).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vec<R: rand::Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draw `N(mean, cov)` using a precomputed symmetric square root of `cov`.
pub fn colored<R: rand::Rng>(rng: &mut R, mean: Option<&DVector<f64>>, sqrt_cov: &DMatrix<f64>) -> DVector<f64> {
    let z = standard_normal_vec(rng, sqrt_cov.ncols());
    let mut out = sqrt_cov * z;
    if let Some(m) = mean {
        out += m;
    }
    out
}
