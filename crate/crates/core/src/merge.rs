//! Continual merging of fine-tuned adapters into a single running adapter.
//!
//! The time-aware rule keeps the newest `A` and moves the merged `B` toward
//! the newest fine-tuned `B` by `λ(i)`:
//!
//! ```text
//! A_merge ← A_ft,i
//! B_merge ← B_merge + λ(i)·(B_ft,i − B_merge)
//! ```
//!
//! Unrolled, `B_merge` after `t` tasks is `Σ c_i·B_ft,i` with the weights of
//! [`closed_form_weights`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{delta, LoraPair};
use crate::error::{Error, Result};
use crate::matlib::Matrix;

/// Merge coefficient schedule `λ(i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    /// `λ(i) = 1/√i`.
    InverseSqrt,
    /// `λ(i) = v` for `i ≥ 2`, with `v ∈ (0, 1]`.
    Fixed(f64),
}

impl Schedule {
    pub fn fixed(value: f64) -> Result<Self> {
        let s = Schedule::Fixed(value);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::InverseSqrt => Ok(()),
            Schedule::Fixed(v) if v > 0.0 && v <= 1.0 => Ok(()),
            Schedule::Fixed(v) => Err(Error::Validation(format!(
                "fixed schedule value must lie in (0, 1], got {v}"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Schedule::InverseSqrt => "inverse_sqrt".into(),
            Schedule::Fixed(v) => format!("fixed:{v}"),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "inverse_sqrt" {
            return Ok(Schedule::InverseSqrt);
        }
        let value = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Validation(format!("unknown schedule {s:?}")))?;
        Schedule::fixed(value)
    }
}

/// Merge coefficient for task `i` (1-based). `λ(1) = 1` for every schedule.
pub fn lambda(schedule: Schedule, i: usize) -> Result<f64> {
    if i < 1 {
        return Err(Error::Index("task index must be >= 1".into()));
    }
    schedule.validate()?;
    if i == 1 {
        return Ok(1.0);
    }
    Ok(match schedule {
        Schedule::InverseSqrt => 1.0 / (i as f64).sqrt(),
        Schedule::Fixed(v) => v,
    })
}

/// Weights `c_1..c_t` with `B_merge^t = Σ c_i·B_ft,i`.
///
/// `c_i = λ(i)·∏_{j=i+1}^{t}(1 − λ(j))`.
pub fn closed_form_weights(schedule: Schedule, t: usize) -> Result<Vec<f64>> {
    if t < 1 {
        return Err(Error::Index("t must be >= 1".into()));
    }
    let lambdas: Vec<f64> = (1..=t).map(|i| lambda(schedule, i)).collect::<Result<_>>()?;
    let mut weights = vec![0.0; t];
    let mut tail = 1.0;
    for i in (0..t).rev() {
        weights[i] = lambdas[i] * tail;
        tail *= 1.0 - lambdas[i];
    }
    Ok(weights)
}

/// Continual-merging rule applied after each fine-tune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergeStrategy {
    /// Fine-tune both factors, merge `B` with `λ(i)`, take the newest `A`.
    Slao,
    /// Same merge rule as [`MergeStrategy::Slao`].
    FtbaMb,
    /// Fine-tune both, merge both.
    FtbaMba,
    /// Fine-tune both, merge `A`, take the newest `B`.
    FtbaMa,
    /// Freeze `A` during fine-tuning, merge `B`.
    FreaMb,
    /// Freeze `B` during fine-tuning, merge `A`.
    FrebMa,
    /// Keep the last fine-tune, no merging.
    SeqLora,
    /// Archive one adapter per task and sum their updates.
    IncLora,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 8] = [
        MergeStrategy::Slao,
        MergeStrategy::FtbaMb,
        MergeStrategy::FtbaMba,
        MergeStrategy::FtbaMa,
        MergeStrategy::FreaMb,
        MergeStrategy::FrebMa,
        MergeStrategy::SeqLora,
        MergeStrategy::IncLora,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MergeStrategy::Slao => "SLAO",
            MergeStrategy::FtbaMb => "FTBA_MB",
            MergeStrategy::FtbaMba => "FTBA_MBA",
            MergeStrategy::FtbaMa => "FTBA_MA",
            MergeStrategy::FreaMb => "FREA_MB",
            MergeStrategy::FrebMa => "FREB_MA",
            MergeStrategy::SeqLora => "SeqLoRA",
            MergeStrategy::IncLora => "IncLoRA",
        }
    }

    /// `(freeze_a, freeze_b)` applied from the second task on.
    pub fn freeze_flags(&self) -> (bool, bool) {
        match self {
            MergeStrategy::FreaMb => (true, false),
            MergeStrategy::FrebMa => (false, true),
            _ => (false, false),
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown merge strategy {s:?}")))
    }
}

/// Running merged adapter.
///
/// Single-adapter strategies hold exactly `(m + n)·r` floats. IncLoRA keeps
/// every earlier adapter in `archive`; the newest one sits in the merge slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeState {
    a_merge: Matrix,
    b_merge: Matrix,
    tasks_merged: usize,
    archive: Vec<LoraPair>,
}

impl MergeState {
    /// State after the first task: the merged adapter is the first fine-tune.
    pub fn from_first(ft: &LoraPair) -> Self {
        Self {
            a_merge: ft.a.clone(),
            b_merge: ft.b.clone(),
            tasks_merged: 1,
            archive: Vec::new(),
        }
    }

    pub fn a_merge(&self) -> &Matrix {
        &self.a_merge
    }

    pub fn b_merge(&self) -> &Matrix {
        &self.b_merge
    }

    pub fn tasks_merged(&self) -> usize {
        self.tasks_merged
    }

    pub fn archive(&self) -> &[LoraPair] {
        &self.archive
    }

    pub fn merged_pair(&self) -> LoraPair {
        LoraPair {
            a: self.a_merge.clone(),
            b: self.b_merge.clone(),
        }
    }

    /// Number of stored floats.
    pub fn stored_floats(&self) -> usize {
        let one = self.a_merge.data().len() + self.b_merge.data().len();
        one * (1 + self.archive.len())
    }

    /// Tensors in a fixed order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![
            ("a_merge".to_string(), self.a_merge.clone()),
            ("b_merge".to_string(), self.b_merge.clone()),
        ];
        for (k, p) in self.archive.iter().enumerate() {
            out.push((format!("archive_{k:04}_a"), p.a.clone()));
            out.push((format!("archive_{k:04}_b"), p.b.clone()));
        }
        out
    }
}

/// Folds the fine-tuned adapter of task `i` into the merge state.
pub fn merge_step(
    state: &MergeState,
    ft: &LoraPair,
    i: usize,
    strategy: MergeStrategy,
    schedule: Schedule,
) -> Result<MergeState> {
    let expected = state.tasks_merged + 1;
    if i != expected {
        return Err(Error::Sequence { expected, got: i });
    }
    if ft.a.shape() != state.a_merge.shape() || ft.b.shape() != state.b_merge.shape() {
        return Err(Error::dim(format!(
            "fine-tuned adapter shapes A {:?} B {:?} differ from merge state A {:?} B {:?}",
            ft.a.shape(),
            ft.b.shape(),
            state.a_merge.shape(),
            state.b_merge.shape()
        )));
    }
    let lam = lambda(schedule, i)?;
    let toward = |merged: &Matrix, new: &Matrix| -> Result<Matrix> {
        merged.axpy(lam, &new.sub(merged)?)
    };

    let mut archive = state.archive.clone();
    let (a_merge, b_merge) = match strategy {
        MergeStrategy::Slao | MergeStrategy::FtbaMb | MergeStrategy::FreaMb => {
            (ft.a.clone(), toward(&state.b_merge, &ft.b)?)
        }
        MergeStrategy::FtbaMba => (toward(&state.a_merge, &ft.a)?, toward(&state.b_merge, &ft.b)?),
        MergeStrategy::FtbaMa | MergeStrategy::FrebMa => {
            (toward(&state.a_merge, &ft.a)?, ft.b.clone())
        }
        MergeStrategy::SeqLora => (ft.a.clone(), ft.b.clone()),
        MergeStrategy::IncLora => {
            archive.push(state.merged_pair());
            (ft.a.clone(), ft.b.clone())
        }
    };
    Ok(MergeState {
        a_merge,
        b_merge,
        tasks_merged: i,
        archive,
    })
}

/// Weight update used for inference after the merges so far.
pub fn effective_delta(state: &MergeState, strategy: MergeStrategy) -> Result<Matrix> {
    if state.tasks_merged == 0 {
        return Err(Error::EmptyState);
    }
    let mut total = delta(&state.merged_pair());
    if strategy == MergeStrategy::IncLora {
        for p in &state.archive {
            total = total.add(&delta(p))?;
        }
    }
    Ok(total)
}

/// Parameter count held while learning the `T`-th task: the stored state plus
/// the adapter being fine-tuned.
pub fn memory_footprint(strategy: MergeStrategy, tasks: usize, m: usize, n: usize, r: usize) -> f64 {
    let adapter = ((m + n) * r) as f64;
    match strategy {
        MergeStrategy::IncLora => tasks as f64 * adapter + adapter,
        _ => 2.0 * adapter,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlib::gaussian_matrix;

    fn pair(m: usize, n: usize, r: usize, seed: u64) -> LoraPair {
        LoraPair::new(gaussian_matrix(r, n, 1.0, seed), gaussian_matrix(m, r, 1.0, seed + 1)).unwrap()
    }

    #[test]
    fn lambda_values() {
        assert_eq!(lambda(Schedule::InverseSqrt, 1).unwrap(), 1.0);
        assert_eq!(lambda(Schedule::InverseSqrt, 4).unwrap(), 0.5);
        assert!((lambda(Schedule::InverseSqrt, 2).unwrap() - 0.70710678).abs() < 1e-8);
        assert_eq!(lambda(Schedule::Fixed(0.9), 3).unwrap(), 0.9);
        assert_eq!(lambda(Schedule::Fixed(0.1), 1).unwrap(), 1.0);
        assert!(matches!(lambda(Schedule::InverseSqrt, 0), Err(Error::Index(_))));
        assert!(lambda(Schedule::Fixed(0.0), 2).is_err());
        assert!(Schedule::fixed(1.5).is_err());
    }

    #[test]
    fn schedule_names_round_trip() {
        for s in [Schedule::InverseSqrt, Schedule::Fixed(0.5), Schedule::Fixed(0.1)] {
            assert_eq!(s.name().parse::<Schedule>().unwrap(), s);
        }
        assert!("fixed:2".parse::<Schedule>().is_err());
        assert!("linear".parse::<Schedule>().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MergeStrategy::ALL {
            assert_eq!(s.name().parse::<MergeStrategy>().unwrap(), s);
        }
    }

    #[test]
    fn closed_form_t1_and_t3() {
        assert_eq!(closed_form_weights(Schedule::InverseSqrt, 1).unwrap(), vec![1.0]);
        // expanded by hand: c3 = 1/√3, c2 = (1/√2)(1 − 1/√3), c1 = (1 − 1/√2)(1 − 1/√3)
        let w = closed_form_weights(Schedule::InverseSqrt, 3).unwrap();
        let s2 = 0.5_f64.sqrt();
        let s3 = (1.0_f64 / 3.0).sqrt();
        assert!((w[0] - (1.0 - s2) * (1.0 - s3)).abs() < 1e-15);
        assert!((w[1] - s2 * (1.0 - s3)).abs() < 1e-15);
        assert!((w[2] - s3).abs() < 1e-15);
        assert!((w[0] - 0.123789).abs() < 1e-5);
        assert!((w[1] - 0.298858).abs() < 1e-5);
        assert!((w[2] - 0.577350).abs() < 1e-5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slao_step_by_hand() {
        let b1 = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b2 = Matrix::from_rows(&[&[-1.0, 0.0], &[5.0, 2.0]]).unwrap();
        let a1 = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let a2 = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let first = LoraPair::new(a1, b1.clone()).unwrap();
        let second = LoraPair::new(a2.clone(), b2.clone()).unwrap();
        let state = MergeState::from_first(&first);
        let next = merge_step(&state, &second, 2, MergeStrategy::Slao, Schedule::InverseSqrt).unwrap();
        let lam = 1.0 / 2.0_f64.sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let expect = b1[(i, j)] + lam * (b2[(i, j)] - b1[(i, j)]);
                assert!((next.b_merge()[(i, j)] - expect).abs() < 1e-15);
            }
        }
        assert_eq!(next.a_merge(), &a2);
        assert_eq!(next.tasks_merged(), 2);
    }

    #[test]
    fn identical_ft_is_fixed_point() {
        let p = pair(5, 4, 2, 8);
        for strategy in MergeStrategy::ALL {
            if strategy == MergeStrategy::IncLora {
                continue;
            }
            let state = MergeState::from_first(&p);
            let next = merge_step(&state, &p, 2, strategy, Schedule::Fixed(0.3)).unwrap();
            assert_eq!(next.a_merge(), state.a_merge(), "{strategy}");
            assert_eq!(next.b_merge(), state.b_merge(), "{strategy}");
        }
    }

    #[test]
    fn seq_lora_takes_last() {
        let state = MergeState::from_first(&pair(5, 4, 2, 1));
        let ft = pair(5, 4, 2, 2);
        let next = merge_step(&state, &ft, 2, MergeStrategy::SeqLora, Schedule::InverseSqrt).unwrap();
        assert_eq!(next.merged_pair(), ft);
    }

    #[test]
    fn merge_both_and_merge_a() {
        let p1 = pair(3, 3, 1, 4);
        let p2 = pair(3, 3, 1, 6);
        let s = MergeState::from_first(&p1);
        let lam = 0.25;
        let mba = merge_step(&s, &p2, 2, MergeStrategy::FtbaMba, Schedule::Fixed(lam)).unwrap();
        let expect_a = p1.a.scale(1.0 - lam).add(&p2.a.scale(lam)).unwrap();
        assert!(mba.a_merge().max_abs_diff(&expect_a) < 1e-15);
        let ma = merge_step(&s, &p2, 2, MergeStrategy::FtbaMa, Schedule::Fixed(lam)).unwrap();
        assert!(ma.a_merge().max_abs_diff(&expect_a) < 1e-15);
        assert_eq!(ma.b_merge(), &p2.b);
    }

    #[test]
    fn merge_step_errors() {
        let s = MergeState::from_first(&pair(3, 3, 1, 4));
        assert!(matches!(
            merge_step(&s, &pair(3, 3, 1, 5), 3, MergeStrategy::Slao, Schedule::InverseSqrt),
            Err(Error::Sequence { expected: 2, got: 3 })
        ));
        assert!(matches!(
            merge_step(&s, &pair(4, 3, 1, 5), 2, MergeStrategy::Slao, Schedule::InverseSqrt),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn effective_delta_first_task_and_inc() {
        let p1 = pair(6, 5, 2, 10);
        let s = MergeState::from_first(&p1);
        assert_eq!(effective_delta(&s, MergeStrategy::Slao).unwrap(), delta(&p1));

        let p2 = pair(6, 5, 2, 20);
        let inc = MergeState::from_first(&p1);
        let inc = merge_step(&inc, &p2, 2, MergeStrategy::IncLora, Schedule::InverseSqrt).unwrap();
        let total = effective_delta(&inc, MergeStrategy::IncLora).unwrap();
        let expect = delta(&p1).add(&delta(&p2)).unwrap();
        assert!(total.max_abs_diff(&expect) < 1e-12);
        let rank = crate::matlib::singular_values(&total).iter().filter(|&&s| s > 1e-10).count();
        assert!(rank <= 4);

        let zero = LoraPair::new(Matrix::zeros(2, 5), Matrix::zeros(6, 2)).unwrap();
        let zs = MergeState::from_first(&zero);
        assert_eq!(effective_delta(&zs, MergeStrategy::Slao).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn memory_counts() {
        assert_eq!(memory_footprint(MergeStrategy::Slao, 10, 64, 64, 8), 2048.0);
        assert_eq!(
            memory_footprint(MergeStrategy::Slao, 10, 64, 64, 8),
            memory_footprint(MergeStrategy::Slao, 1000, 64, 64, 8)
        );
        assert_eq!(memory_footprint(MergeStrategy::IncLora, 10, 64, 64, 8), 11264.0);
    }

    #[test]
    fn stored_floats_constant_for_slao_linear_for_inc() {
        let mut slao = MergeState::from_first(&pair(4, 6, 2, 0));
        let mut inc = MergeState::from_first(&pair(4, 6, 2, 0));
        for i in 2..=6 {
            let ft = pair(4, 6, 2, i as u64 * 3);
            slao = merge_step(&slao, &ft, i, MergeStrategy::Slao, Schedule::InverseSqrt).unwrap();
            inc = merge_step(&inc, &ft, i, MergeStrategy::IncLora, Schedule::InverseSqrt).unwrap();
            assert_eq!(slao.stored_floats(), 20);
            assert_eq!(inc.stored_floats(), 20 * i);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn schedule_strategy() -> impl Strategy<Value = Schedule> {
            prop_oneof![Just(Schedule::InverseSqrt), (0.01f64..=1.0).prop_map(Schedule::Fixed)]
        }

        proptest! {
            #[test]
            fn weights_are_convex(schedule in schedule_strategy(), t in 1usize..40) {
                let w = closed_form_weights(schedule, t).unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|&c| (0.0..=1.0).contains(&c)));
            }

            #[test]
            fn recursion_matches_closed_form(schedule in schedule_strategy(), t in 1usize..21, seed in 0u64..10_000) {
                let fts: Vec<LoraPair> = (0..t).map(|k| pair(4, 3, 2, seed * 100 + k as u64 * 2)).collect();
                let mut state = MergeState::from_first(&fts[0]);
                for (k, ft) in fts.iter().enumerate().skip(1) {
                    state = merge_step(&state, ft, k + 1, MergeStrategy::Slao, schedule).unwrap();
                }
                let w = closed_form_weights(schedule, t).unwrap();
                let mut expect = Matrix::zeros(4, 2);
                for (c, ft) in w.iter().zip(&fts) {
                    expect = expect.axpy(*c, &ft.b).unwrap();
                }
                prop_assert!(state.b_merge().rel_diff(&expect) < 1e-10);
            }
        }
    }
}
