//! Dense linear-algebra kernels shared by every other module.

mod decomp;
mod matrix;
mod random;

pub use decomp::{
    jacobi_svd, max_principal_angle, nuclear_norm, qr_thin, randomized_svd_orthogonalize,
    singular_values, spectral_norm, svd_orthogonalize, QrResult, Svd, DEFAULT_OVERSAMPLE,
    POWER_ITERATIONS, RANK_TOLERANCE,
};
pub use matrix::{cosine_similarity_flat, frobenius_norm, Matrix};
pub use random::{derive_seed, gaussian_matrix, rng_from_seed, Rng};
