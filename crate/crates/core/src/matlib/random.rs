//! Seeded random generation.
//!
//! Every random draw in the crate comes from ChaCha20 (`rand_chacha::ChaCha20Rng`,
//! a counter-based stream cipher generator) seeded with `seed_from_u64`.
//! Normal variates use `rand_distr::StandardNormal`. Output is a pure function
//! of the seed on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;

/// Generator used throughout the crate.
pub type Rng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from `(seed, stream)` with the
/// SplitMix64 finalizer.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix of i.i.d. `N(0, sigma²)` entries drawn in row-major order.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    gaussian_matrix_from(&mut rng, rows, cols, sigma)
}

pub(crate) fn gaussian_matrix_from(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Matrix {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    Matrix::new(rows, cols, data).expect("dimensions are consistent")
}
