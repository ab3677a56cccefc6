//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the user seed; the stream
//! id selects an independent 2^64-block counter space. Work items derive
//! their stream id from `(index, purpose)`, so results never depend on
//! scheduling or thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; keeps streams of one work item apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Covariates = 1,
    RandomEffects = 2,
    Responses = 3,
    MixtureDraws = 4,
    Misc = 5,
}

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Stream for one work item and purpose.
pub fn item_stream(seed: u64, index: u64, purpose: Purpose) -> StreamRng {
    stream(seed, (index << 8) | purpose as u64)
}

/// Stream shared by every work item (e.g. a random-effect vector held
/// fixed across replicates).
pub fn shared_stream(seed: u64, purpose: Purpose) -> StreamRng {
    stream(seed, (u64::MAX << 8) | purpose as u64)
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| std_normal(rng))
}

/// `root * z` with `z` standard normal, i.e. a draw from `N(0, root root')`.
pub fn mvn_draw<R: Rng + ?Sized>(rng: &mut R, root: &DMatrix<f64>) -> DVector<f64> {
    root * std_normal_vec(rng, root.ncols())
}
