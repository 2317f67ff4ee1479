//! Model-based control with online adaptation of a local linear dynamics model
//! under a learned prior, planned with discounted iLQR at every control tick.

pub mod dataset;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod gaussian;
pub mod ilqr;
pub mod linalg;
pub mod mpc;
pub mod nn;
pub mod priors;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` derived from `seed`.
pub fn rng_from_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
