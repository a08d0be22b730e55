//! Continual-learning metrics over a [`RunReport`].
//!
//! Scores are the bounded surrogate `1 / (1 + loss)` of the test MSE, used
//! where accuracy would be (AA, BWT, order disparity). Forgetting and
//! intransigence work on raw losses.

use serde::{Deserialize, Serialize};

use crate::adapter::LoraPair;
use crate::error::{Error, Result};
use crate::matlib::Matrix;
use crate::merge::MergeState;

/// Maps a test loss (lower is better) to a score in `(0, 1]`.
pub fn score_from_loss(loss: f64) -> f64 {
    1.0 / (1.0 + loss)
}

/// Identifiers of the run a report came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub strategy: String,
    pub schedule: String,
    pub init: String,
    pub order_id: usize,
    pub seed: u64,
    /// Suite task ids in the order they were learned.
    pub order: Vec<usize>,
}

/// Per-task, per-checkpoint evaluation of one continual run.
///
/// Row `t` (0-based) holds the merged model after learning `t + 1` tasks,
/// evaluated on the tasks learned so far in learning order, so it has
/// `t + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scores: Vec<Vec<f64>>,
    pub losses: Vec<Vec<f64>>,
    /// Test loss of each task's own fine-tuned adapter.
    pub per_task_ft_loss: Vec<f64>,
    /// Test loss at each task's teacher optimum, when known.
    pub per_task_optimal_loss: Option<Vec<f64>>,
    pub meta: RunMeta,
    /// Fine-tuned adapters in learning order.
    pub fine_tuned: Vec<LoraPair>,
    /// Effective merged update after each task.
    pub merged_deltas: Vec<Matrix>,
    pub final_state: Option<MergeState>,
}

impl RunReport {
    /// Report from losses alone; scores are derived with [`score_from_loss`].
    pub fn from_losses(
        losses: Vec<Vec<f64>>,
        per_task_ft_loss: Vec<f64>,
        per_task_optimal_loss: Option<Vec<f64>>,
    ) -> Result<Self> {
        let scores = losses
            .iter()
            .map(|row| row.iter().map(|&l| score_from_loss(l)).collect())
            .collect();
        Self::from_parts(scores, losses, per_task_ft_loss, per_task_optimal_loss)
    }

    /// Report with explicit scores and losses.
    pub fn from_parts(
        scores: Vec<Vec<f64>>,
        losses: Vec<Vec<f64>>,
        per_task_ft_loss: Vec<f64>,
        per_task_optimal_loss: Option<Vec<f64>>,
    ) -> Result<Self> {
        let report = Self {
            scores,
            losses,
            per_task_ft_loss,
            per_task_optimal_loss,
            meta: RunMeta::default(),
            fine_tuned: Vec::new(),
            merged_deltas: Vec::new(),
            final_state: None,
        };
        report.validate()?;
        Ok(report)
    }

    /// Report with scores only, for the score-based metrics.
    pub fn from_scores(scores: Vec<Vec<f64>>) -> Result<Self> {
        let losses = scores.iter().map(|row| row.iter().map(|&s| 1.0 / s - 1.0).collect()).collect();
        let t = scores.len();
        Self::from_parts(scores, losses, vec![0.0; t], None)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.scores.len();
        if t == 0 {
            return Err(Error::IncompleteReport("no tasks".into()));
        }
        if self.losses.len() != t || self.per_task_ft_loss.len() != t {
            return Err(Error::IncompleteReport("row counts disagree".into()));
        }
        if let Some(opt) = &self.per_task_optimal_loss {
            if opt.len() != t {
                return Err(Error::IncompleteReport("optimal losses length differs".into()));
            }
        }
        for (k, (s, l)) in self.scores.iter().zip(&self.losses).enumerate() {
            if s.len() != k + 1 || l.len() != k + 1 {
                return Err(Error::IncompleteReport(format!(
                    "row {} must have {} entries",
                    k + 1,
                    k + 1
                )));
            }
            if s.iter().chain(l).any(|v| !v.is_finite()) {
                return Err(Error::IncompleteReport(format!("row {} has non-finite entries", k + 1)));
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.scores.len()
    }

    /// Score `a_{i,t}` of task `i` after learning `t` tasks (both 1-based).
    pub fn score(&self, i: usize, t: usize) -> Option<f64> {
        self.scores.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }

    /// Loss of task `i` after learning `t` tasks (both 1-based).
    pub fn loss(&self, i: usize, t: usize) -> Option<f64> {
        self.losses.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied()
    }
}

/// Mean final-row score: `(1/T) Σ a_{i,T}`.
pub fn average_accuracy(report: &RunReport) -> Result<f64> {
    let t = report.num_tasks();
    let last = report
        .scores
        .last()
        .filter(|row| row.len() == t && t > 0)
        .ok_or_else(|| Error::IncompleteReport("final row missing".into()))?;
    Ok(last.iter().sum::<f64>() / t as f64)
}

/// `(1/(T−1)) Σ_{i<T} (a_{i,T} − a_{i,i})`. Undefined for a single task.
pub fn backward_transfer(report: &RunReport) -> Result<f64> {
    let t = report.num_tasks();
    if t < 2 {
        return Err(Error::Undefined("backward transfer needs at least two tasks".into()));
    }
    let last = &report.scores[t - 1];
    if last.len() != t {
        return Err(Error::IncompleteReport("final row missing".into()));
    }
    let sum: f64 = (0..t - 1).map(|i| last[i] - report.scores[i][i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// `F_t = Σ_{i<t} (L_i(after t) − L_i(own fine-tune))`, `2 ≤ t ≤ T`.
pub fn forgetting_error(report: &RunReport, t: usize) -> Result<f64> {
    if t < 2 || t > report.num_tasks() {
        return Err(Error::Index(format!(
            "forgetting needs 2 <= t <= {}, got {t}",
            report.num_tasks()
        )));
    }
    let row = &report.losses[t - 1];
    Ok((0..t - 1).map(|i| row[i] - report.per_task_ft_loss[i]).sum())
}

/// `I_t = Σ_{i≤t} (L_i(own fine-tune) − L_i(optimum))`, `1 ≤ t ≤ T`.
pub fn intransigence_error(report: &RunReport, t: usize) -> Result<f64> {
    let opt = report.per_task_optimal_loss.as_ref().ok_or(Error::MissingOptimum)?;
    if t < 1 || t > report.num_tasks() {
        return Err(Error::Index(format!(
            "intransigence needs 1 <= t <= {}, got {t}",
            report.num_tasks()
        )));
    }
    Ok((0..t).map(|i| report.per_task_ft_loss[i] - opt[i]).sum())
}

/// Order-normalized performance disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct OpdReport {
    /// `OPD_t` per task.
    pub per_task: Vec<f64>,
    pub mopd: f64,
    pub aopd: f64,
}

/// Disparity of final per-task performance across task orders.
///
/// `perf[r][t]` is the final performance on task `t` under order `r`;
/// tasks are indexed by identity, not by position in the order.
pub fn opd(perf: &[Vec<f64>]) -> Result<OpdReport> {
    if perf.len() < 2 {
        return Err(Error::NeedTwoOrders(perf.len()));
    }
    let tasks = perf[0].len();
    if tasks == 0 || perf.iter().any(|row| row.len() != tasks) {
        return Err(Error::dim("every order must report the same nonzero number of tasks"));
    }
    let per_task: Vec<f64> = (0..tasks)
        .map(|t| {
            let (lo, hi) = perf
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), row| (lo.min(row[t]), hi.max(row[t])));
            hi - lo
        })
        .collect();
    let mopd = per_task.iter().copied().fold(0.0, f64::max);
    let aopd = per_task.iter().sum::<f64>() / tasks as f64;
    Ok(OpdReport { per_task, mopd, aopd })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aa_examples() {
        let r = RunReport::from_scores(vec![vec![0.9]]).unwrap();
        assert!((average_accuracy(&r).unwrap() - 0.9).abs() < 1e-12);
        let r = RunReport::from_scores(vec![vec![0.8], vec![0.7, 0.9]]).unwrap();
        assert!((average_accuracy(&r).unwrap() - 0.8).abs() < 1e-12);
        let c = 0.37;
        let r = RunReport::from_scores(vec![vec![c], vec![c, c], vec![c, c, c]]).unwrap();
        assert!((average_accuracy(&r).unwrap() - c).abs() < 1e-15);
    }

    #[test]
    fn bwt_examples() {
        let r = RunReport::from_scores(vec![vec![0.8], vec![0.7, 0.9]]).unwrap();
        assert!((backward_transfer(&r).unwrap() + 0.1).abs() < 1e-12);
        let r = RunReport::from_scores(vec![vec![0.5], vec![0.5, 0.6], vec![0.5, 0.6, 0.7]]).unwrap();
        assert_eq!(backward_transfer(&r).unwrap(), 0.0);
        let r = RunReport::from_scores(vec![vec![0.5]]).unwrap();
        assert!(matches!(backward_transfer(&r), Err(Error::Undefined(_))));
    }

    #[test]
    fn forgetting_examples() {
        let r = RunReport::from_losses(vec![vec![0.3], vec![0.5, 0.2]], vec![0.3, 0.2], None).unwrap();
        assert!((forgetting_error(&r, 2).unwrap() - 0.2).abs() < 1e-12);
        let same = RunReport::from_losses(vec![vec![0.3], vec![0.3, 0.2]], vec![0.3, 0.2], None).unwrap();
        assert_eq!(forgetting_error(&same, 2).unwrap(), 0.0);
        let better = RunReport::from_losses(vec![vec![0.3], vec![0.1, 0.2]], vec![0.3, 0.2], None).unwrap();
        assert!(forgetting_error(&better, 2).unwrap() < 0.0);
        assert!(matches!(forgetting_error(&r, 1), Err(Error::Index(_))));
        assert!(matches!(forgetting_error(&r, 3), Err(Error::Index(_))));
    }

    #[test]
    fn intransigence_examples() {
        let r = RunReport::from_losses(
            vec![vec![0.4], vec![0.4, 0.3]],
            vec![0.4, 0.3],
            Some(vec![0.1, 0.3]),
        )
        .unwrap();
        assert!((intransigence_error(&r, 2).unwrap() - 0.3).abs() < 1e-12);
        let exact = RunReport::from_losses(vec![vec![0.1]], vec![0.1], Some(vec![0.1])).unwrap();
        assert_eq!(intransigence_error(&exact, 1).unwrap(), 0.0);
        let none = RunReport::from_losses(vec![vec![0.1]], vec![0.1], None).unwrap();
        assert!(matches!(intransigence_error(&none, 1), Err(Error::MissingOptimum)));
    }

    #[test]
    fn opd_examples() {
        let same = opd(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
        assert_eq!((same.mopd, same.aopd), (0.0, 0.0));
        let r = opd(&[vec![0.8, 0.5], vec![0.6, 0.5]]).unwrap();
        assert!((r.per_task[0] - 0.2).abs() < 1e-12);
        assert_eq!(r.per_task[1], 0.0);
        assert!((r.mopd - 0.2).abs() < 1e-12);
        assert!((r.aopd - 0.1).abs() < 1e-12);
        assert!(matches!(opd(&[vec![0.1]]), Err(Error::NeedTwoOrders(1))));
        assert!(opd(&[vec![0.1], vec![0.1, 0.2]]).is_err());
    }

    #[test]
    fn report_validation() {
        assert!(RunReport::from_scores(vec![]).is_err());
        assert!(RunReport::from_scores(vec![vec![0.1, 0.2]]).is_err());
        assert!(RunReport::from_scores(vec![vec![f64::NAN]]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn aopd_never_exceeds_mopd(perf in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 2..6)) {
                let r = opd(&perf).unwrap();
                prop_assert!(r.aopd <= r.mopd + 1e-15);
                prop_assert!(r.mopd >= 0.0);
            }

            #[test]
            fn aa_invariant_under_relabeling(row in proptest::collection::vec(0.01f64..1.0, 2..8), shift in 0usize..8) {
                let t = row.len();
                let mut rows: Vec<Vec<f64>> = (1..t).map(|k| vec![0.5; k]).collect();
                rows.push(row.clone());
                let base = average_accuracy(&RunReport::from_scores(rows.clone()).unwrap()).unwrap();
                let mut rotated = row.clone();
                rotated.rotate_left(shift % t);
                *rows.last_mut().unwrap() = rotated;
                let permuted = average_accuracy(&RunReport::from_scores(rows).unwrap()).unwrap();
                prop_assert!((base - permuted).abs() < 1e-12);
            }
        }
    }
}
