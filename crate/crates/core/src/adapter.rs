//! LoRA adapters and the new-task initialization strategies.
//!
//! The effective weight of an adapter is `W₀ + B·A` with no rank scaling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlib::{
    gaussian_matrix, qr_thin, randomized_svd_orthogonalize, svd_orthogonalize, Matrix,
    DEFAULT_OVERSAMPLE,
};
use crate::merge::MergeState;

/// Standard deviation of the Gaussian `A` factor of a fresh adapter.
pub const DEFAULT_INIT_SIGMA: f64 = 0.02;

/// Factors `A` (`r × n`) and `B` (`m × r`) of one low-rank adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return Err(Error::dim(format!(
                "B has {} columns but A has {} rows",
                b.cols(),
                r
            )));
        }
        if r > b.rows().min(a.cols()) {
            return Err(Error::dim(format!(
                "rank {r} exceeds min(m, n) = {}",
                b.rows().min(a.cols())
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Output dimension `m`.
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `n`.
    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// `(m, n, r)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.out_dim(), self.in_dim(), self.rank())
    }

    pub fn delta(&self) -> Matrix {
        delta(self)
    }
}

/// Effective update `B·A` (`m × n`).
pub fn delta(pair: &LoraPair) -> Matrix {
    pair.b.matmul(&pair.a).expect("LoraPair shapes are consistent")
}

fn check_dims(m: usize, n: usize, r: usize) -> Result<()> {
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::dim(format!("dimensions must be positive, got m={m} n={n} r={r}")));
    }
    if r > m.min(n) {
        return Err(Error::dim(format!("rank {r} exceeds min(m, n) = {}", m.min(n))));
    }
    Ok(())
}

/// Standard LoRA start: `B = 0`, `A ~ N(0, sigma²)`.
pub fn init_first_task(m: usize, n: usize, r: usize, sigma: f64, seed: u64) -> Result<LoraPair> {
    check_dims(m, n, r)?;
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("init sigma must be positive, got {sigma}")));
    }
    LoraPair::new(gaussian_matrix(r, n, sigma, seed), Matrix::zeros(m, r))
}

/// Fresh adapter for a new task, ignoring everything learned so far.
pub fn zero_init_from(m: usize, n: usize, r: usize, sigma: f64, seed: u64) -> Result<LoraPair> {
    init_first_task(m, n, r, sigma, seed)
}

/// Starts from the current merged adapter, copying both factors verbatim.
pub fn merge_point_init_from(state: &MergeState) -> Result<LoraPair> {
    if state.tasks_merged() == 0 {
        return Err(Error::EmptyState);
    }
    LoraPair::new(state.a_merge().clone(), state.b_merge().clone())
}

/// How the orthonormal basis of the previous `A` is extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decomposition {
    Qr,
    Svd,
    RandomizedSvd { oversample: usize, seed: u64 },
}

impl Decomposition {
    pub fn randomized() -> Self {
        Decomposition::RandomizedSvd {
            oversample: DEFAULT_OVERSAMPLE,
            seed: 0,
        }
    }
}

/// Orthogonal start for a new task: `A⁰ = Qᵀ` where `Q` orthonormalizes
/// `prev.aᵀ`, and `B⁰ = prev.b`.
///
/// With QR, an input that already has orthonormal rows and a positive `R`
/// diagonal (`R = I` to 1e-12) is returned unchanged, which makes repeated
/// application bitwise idempotent.
pub fn orthogonal_init_from(prev: &LoraPair, decomposition: Decomposition) -> Result<LoraPair> {
    let at = prev.a.transpose();
    let q = match decomposition {
        Decomposition::Qr => {
            let qr = qr_thin(&at)?;
            let r = prev.rank();
            if qr.r_factor.max_abs_diff(&Matrix::identity(r)) <= 1e-12 {
                return Ok(prev.clone());
            }
            qr.q
        }
        Decomposition::Svd => svd_orthogonalize(&at)?,
        Decomposition::RandomizedSvd { oversample, seed } => {
            randomized_svd_orthogonalize(&at, oversample, seed)?
        }
    };
    LoraPair::new(q.transpose(), prev.b.clone())
}

/// Initialization used for every task after the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Fresh Gaussian `A`, zero `B`.
    RandomZero,
    /// Both factors copied from the merged adapter.
    LastMerge,
    /// Orthonormal basis of the last fine-tuned `A` via QR; `B` carried over.
    LastFineTune,
    /// As [`InitStrategy::LastFineTune`] with a chosen decomposition.
    LastFineTuneVia(Decomposition),
}

impl InitStrategy {
    pub fn name(&self) -> String {
        match self {
            InitStrategy::RandomZero => "random_zero".into(),
            InitStrategy::LastMerge => "last_merge".into(),
            InitStrategy::LastFineTune => "last_fine_tune".into(),
            InitStrategy::LastFineTuneVia(Decomposition::Qr) => "last_fine_tune_qr".into(),
            InitStrategy::LastFineTuneVia(Decomposition::Svd) => "last_fine_tune_svd".into(),
            InitStrategy::LastFineTuneVia(Decomposition::RandomizedSvd { oversample, seed }) => {
                if *oversample == DEFAULT_OVERSAMPLE && *seed == 0 {
                    "last_fine_tune_rsvd".into()
                } else {
                    format!("last_fine_tune_rsvd:{oversample}:{seed}")
                }
            }
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("unknown init strategy {s:?}"));
        Ok(match s {
            "random_zero" => InitStrategy::RandomZero,
            "last_merge" => InitStrategy::LastMerge,
            "last_fine_tune" => InitStrategy::LastFineTune,
            "last_fine_tune_qr" => InitStrategy::LastFineTuneVia(Decomposition::Qr),
            "last_fine_tune_svd" => InitStrategy::LastFineTuneVia(Decomposition::Svd),
            "last_fine_tune_rsvd" => InitStrategy::LastFineTuneVia(Decomposition::randomized()),
            other => {
                let rest = other.strip_prefix("last_fine_tune_rsvd:").ok_or_else(bad)?;
                let (os, seed) = rest.split_once(':').ok_or_else(bad)?;
                InitStrategy::LastFineTuneVia(Decomposition::RandomizedSvd {
                    oversample: os.parse().map_err(|_| bad())?,
                    seed: seed.parse().map_err(|_| bad())?,
                })
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlib::max_principal_angle;
    use crate::merge::Schedule;

    fn random_pair(m: usize, n: usize, r: usize, seed: u64) -> LoraPair {
        LoraPair::new(
            gaussian_matrix(r, n, 1.0, seed),
            gaussian_matrix(m, r, 1.0, seed + 1000),
        )
        .unwrap()
    }

    fn row_gram_error(a: &Matrix) -> f64 {
        a.matmul_t(a).unwrap().max_abs_diff(&Matrix::identity(a.rows()))
    }

    #[test]
    fn first_task_shapes_and_zero_delta() {
        let p = init_first_task(8, 8, 2, DEFAULT_INIT_SIGMA, 1).unwrap();
        assert_eq!(p.b.shape(), (8, 2));
        assert_eq!(p.a.shape(), (2, 8));
        assert!(p.b.bitwise_eq(&Matrix::zeros(8, 2)));
        assert_eq!(delta(&p).max_abs(), 0.0);
        assert!(p.a.data().iter().all(|&v| v != 0.0));
        assert!(p.a.bitwise_eq(&init_first_task(8, 8, 2, DEFAULT_INIT_SIGMA, 1).unwrap().a));
    }

    #[test]
    fn first_task_dimension_errors() {
        assert!(matches!(init_first_task(4, 3, 5, 0.02, 0), Err(Error::Dimension(_))));
        assert!(matches!(init_first_task(4, 3, 0, 0.02, 0), Err(Error::Dimension(_))));
        assert!(init_first_task(4, 3, 2, 0.0, 0).is_err());
    }

    #[test]
    fn zero_init_seeds_differ() {
        let a = zero_init_from(6, 5, 2, 0.02, 1).unwrap();
        let b = zero_init_from(6, 5, 2, 0.02, 2).unwrap();
        assert_ne!(a.a, b.a);
        assert_eq!(delta(&a).max_abs(), 0.0);
    }

    #[test]
    fn delta_hand_product() {
        let p = LoraPair::new(
            Matrix::from_rows(&[&[0.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(delta(&p), Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]).unwrap());
    }

    #[test]
    fn orthogonal_init_is_row_orthonormal_and_keeps_b() {
        for (seed, (r, n)) in [(2, 8), (4, 16), (8, 64)].into_iter().enumerate() {
            let prev = random_pair(12, n, r, seed as u64 * 17);
            for decomposition in [Decomposition::Qr, Decomposition::Svd, Decomposition::randomized()] {
                let next = orthogonal_init_from(&prev, decomposition).unwrap();
                assert!(row_gram_error(&next.a) < 1e-10);
                assert!(next.b.bitwise_eq(&prev.b));
                let angle =
                    max_principal_angle(&next.a.transpose(), &svd_orthogonalize(&prev.a.transpose()).unwrap())
                        .unwrap();
                assert!(angle < 1e-8, "{decomposition:?}: angle {angle}");
            }
        }
    }

    #[test]
    fn orthogonal_init_idempotent_on_orthonormal_rows() {
        let prev = random_pair(10, 16, 4, 5);
        let once = orthogonal_init_from(&prev, Decomposition::Qr).unwrap();
        let twice = orthogonal_init_from(&once, Decomposition::Qr).unwrap();
        assert!(twice.a.bitwise_eq(&once.a));
        assert!(twice.b.bitwise_eq(&once.b));

        let canonical = LoraPair::new(
            Matrix::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap(),
            Matrix::zeros(3, 2),
        )
        .unwrap();
        let out = orthogonal_init_from(&canonical, Decomposition::Qr).unwrap();
        assert!(out.a.bitwise_eq(&canonical.a));
    }

    #[test]
    fn orthogonal_init_rejects_rank_deficient() {
        let prev = LoraPair::new(
            Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]).unwrap(),
            Matrix::zeros(3, 2),
        )
        .unwrap();
        assert!(matches!(
            orthogonal_init_from(&prev, Decomposition::Qr),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn merge_point_copies_state() {
        let ft = random_pair(6, 5, 2, 3);
        let state = MergeState::from_first(&ft);
        let mut init = merge_point_init_from(&state).unwrap();
        assert_eq!(init, ft);
        init.b[(0, 0)] += 1.0;
        assert_eq!(state.b_merge(), &ft.b);
        let _ = Schedule::InverseSqrt;
    }

    #[test]
    fn init_strategy_names_round_trip() {
        for s in [
            InitStrategy::RandomZero,
            InitStrategy::LastMerge,
            InitStrategy::LastFineTune,
            InitStrategy::LastFineTuneVia(Decomposition::Qr),
            InitStrategy::LastFineTuneVia(Decomposition::Svd),
            InitStrategy::LastFineTuneVia(Decomposition::randomized()),
            InitStrategy::LastFineTuneVia(Decomposition::RandomizedSvd { oversample: 3, seed: 9 }),
        ] {
            assert_eq!(s.name().parse::<InitStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<InitStrategy>().is_err());
    }
}
