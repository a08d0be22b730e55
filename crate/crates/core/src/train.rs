//! Synthetic continual-learning tasks and the SGD fine-tuning engine.
//!
//! Each task is linear regression `y = (W₀ + B*·A*)·x + ε` with a rank-`r`
//! teacher shift, so the optimal adapter is known exactly. Training minimizes
//! `(1/N) Σ ½‖(W₀ + B·A)x − y‖²` with the coupled updates
//!
//! ```text
//! A ← A − η·Bᵀ·G
//! B ← B − η·G·Aᵀ
//! ```
//!
//! where `G = ∇_W L` is evaluated once per step at `W = W₀ + B·A`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    delta, init_first_task, merge_point_init_from, orthogonal_init_from, zero_init_from,
    Decomposition, InitStrategy, LoraPair, DEFAULT_INIT_SIGMA,
};
use crate::error::{Error, Result};
use crate::matlib::{derive_seed, gaussian_matrix, qr_thin, rng_from_seed, spectral_norm, Matrix, Rng};
use crate::merge::{effective_delta, merge_step, MergeState, MergeStrategy, Schedule};
use crate::metrics::{score_from_loss, RunMeta, RunReport};

/// Loss above which training is reported as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// One synthetic regression task. Samples are stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Frozen base weight, `m × n`.
    pub w0: Matrix,
    /// `B*·A*`, `m × n`.
    pub teacher_delta: Matrix,
    /// Factors of the teacher shift.
    pub teacher: LoraPair,
    /// `N × n`.
    pub inputs: Matrix,
    /// `N × m`.
    pub targets: Matrix,
    pub noise_sigma: f64,
    pub task_id: usize,
    /// The first `train_len` samples are for training, the rest are held out.
    pub train_len: usize,
}

/// A set of samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl TaskSpec {
    pub fn num_samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn test_len(&self) -> usize {
        self.num_samples() - self.train_len
    }

    pub fn train_split(&self) -> Batch {
        Batch {
            inputs: self.inputs.row_range(0, self.train_len),
            targets: self.targets.row_range(0, self.train_len),
        }
    }

    pub fn test_split(&self) -> Batch {
        let n = self.num_samples();
        Batch {
            inputs: self.inputs.row_range(self.train_len, n),
            targets: self.targets.row_range(self.train_len, n),
        }
    }

    fn train_batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
        }
    }
}

/// Number of held-out samples: the last 20%, rounded up.
pub fn held_out_len(samples: usize) -> usize {
    samples.div_ceil(5)
}

/// Generates `num_tasks` tasks sharing one base weight.
///
/// Each teacher shift is `B*·A*` with `A*` row-orthonormal and `B*` Gaussian
/// rescaled to unit spectral norm. Inputs are standard Gaussian.
pub fn generate_task_suite(
    num_tasks: usize,
    m: usize,
    n: usize,
    r: usize,
    samples_per_task: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if num_tasks == 0 || m == 0 || n == 0 || r == 0 {
        return Err(Error::dim("task suite dimensions must be positive"));
    }
    if r > m.min(n) {
        return Err(Error::dim(format!("rank {r} exceeds min(m, n) = {}", m.min(n))));
    }
    if samples_per_task < 2 {
        return Err(Error::dim("need at least two samples per task"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Precondition("noise sigma must be nonnegative".into()));
    }
    let w0 = gaussian_matrix(m, n, 1.0 / (n as f64).sqrt(), derive_seed(seed, 0));
    let test_len = held_out_len(samples_per_task);

    (0..num_tasks)
        .map(|task_id| {
            let sub = derive_seed(seed, task_id as u64 + 1);
            let a_star = qr_thin(&gaussian_matrix(n, r, 1.0, derive_seed(sub, 1)))?.q.transpose();
            let b_raw = gaussian_matrix(m, r, 1.0, derive_seed(sub, 2));
            let b_star = b_raw.scale(1.0 / spectral_norm(&b_raw));
            let teacher = LoraPair::new(a_star, b_star)?;
            let teacher_delta = delta(&teacher);
            let w = w0.add(&teacher_delta)?;
            let inputs = gaussian_matrix(samples_per_task, n, 1.0, derive_seed(sub, 3));
            let clean = inputs.matmul_t(&w)?;
            let targets = if noise_sigma > 0.0 {
                clean.add(&gaussian_matrix(samples_per_task, m, noise_sigma, derive_seed(sub, 4)))?
            } else {
                clean
            };
            Ok(TaskSpec {
                w0: w0.clone(),
                teacher_delta,
                teacher,
                inputs,
                targets,
                noise_sigma,
                task_id,
                train_len: samples_per_task - test_len,
            })
        })
        .collect()
}

/// Loss and `∇_W` loss at an explicit weight `w`.
pub fn loss_and_grad_at(w: &Matrix, batch: &Batch) -> Result<(f64, Matrix)> {
    let (m, n) = w.shape();
    if batch.inputs.cols() != n || batch.targets.cols() != m || batch.inputs.rows() != batch.targets.rows() {
        return Err(Error::dim(format!(
            "batch inputs {:?} / targets {:?} incompatible with weight {m}x{n}",
            batch.inputs.shape(),
            batch.targets.shape()
        )));
    }
    let count = batch.inputs.rows() as f64;
    let residual = batch.inputs.matmul_t(w)?.sub(&batch.targets)?;
    let loss = residual.data().iter().map(|v| v * v).sum::<f64>() / (2.0 * count);
    let grad = residual.t_matmul(&batch.inputs)?.scale(1.0 / count);
    Ok((loss, grad))
}

/// Mean squared error (halved) of `W₀ + B·A` on a batch, with its gradient
/// with respect to `W`.
pub fn mse_loss_and_grad(w0: &Matrix, pair: &LoraPair, batch: &Batch) -> Result<(f64, Matrix)> {
    let d = delta(pair);
    if d.shape() != w0.shape() {
        return Err(Error::dim(format!(
            "adapter update {:?} does not match base weight {:?}",
            d.shape(),
            w0.shape()
        )));
    }
    loss_and_grad_at(&w0.add(&d)?, batch)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_a: bool,
    #[serde(default)]
    pub freeze_b: bool,
    /// Standard deviation of fresh Gaussian `A` factors.
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
    /// Record `A`, `B` and `G` every `snapshot_stride` steps; 0 disables.
    #[serde(default)]
    pub snapshot_stride: usize,
}

fn default_init_sigma() -> f64 {
    DEFAULT_INIT_SIGMA
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            steps: 500,
            batch_size: 16,
            seed: 0,
            freeze_a: false,
            freeze_b: false,
            init_sigma: DEFAULT_INIT_SIGMA,
            snapshot_stride: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Validation(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.freeze_a && self.freeze_b {
            return Err(Error::Validation("freeze_a and freeze_b cannot both be set".into()));
        }
        if !(self.init_sigma > 0.0) {
            return Err(Error::Validation("init_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// State recorded at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub a: Matrix,
    pub b: Matrix,
    /// Gradient evaluated at this iterate on this step's batch.
    pub grad: Matrix,
}

/// Per-step training record. Entry `s` describes iterate `s`, so every
/// vector has `steps + 1` entries; the gradient at entry `s < steps` is the
/// one applied to produce iterate `s + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainTrace {
    /// Gradients applied at steps `0..steps`, available when the snapshot
    /// stride is 1.
    pub fn applied_gradients(&self) -> Vec<Matrix> {
        let steps = self.losses.len().saturating_sub(1);
        self.snapshots
            .iter()
            .filter(|s| s.step < steps)
            .map(|s| s.grad.clone())
            .collect()
    }
}

/// Deterministic minibatch order: reshuffles the training split each epoch
/// and drops the ragged tail.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut order: Vec<usize> = (0..len).collect();
        if batch < len {
            order.shuffle(&mut rng);
        }
        Self {
            order,
            pos: 0,
            batch,
            rng,
        }
    }

    fn next(&mut self) -> &[usize] {
        let len = self.order.len();
        if self.batch >= len {
            return &self.order;
        }
        if self.pos + self.batch > len {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..start + self.batch]
    }
}

/// Runs `config.steps` SGD steps from `init` on the task's training split.
pub fn sgd_finetune(
    w0: &Matrix,
    init: &LoraPair,
    task: &TaskSpec,
    config: &TrainConfig,
) -> Result<(LoraPair, TrainTrace)> {
    config.validate()?;
    if delta(init).shape() != w0.shape() || task.inputs.cols() != w0.cols() || task.targets.cols() != w0.rows() {
        return Err(Error::dim(format!(
            "adapter {:?}, base {:?} and task ({} inputs, {} targets) are inconsistent",
            init.dims(),
            w0.shape(),
            task.inputs.cols(),
            task.targets.cols()
        )));
    }
    let mut sampler = BatchSampler::new(task.train_len, config.batch_size, config.seed);
    let mut a = init.a.clone();
    let mut b = init.b.clone();
    let mut trace = TrainTrace {
        losses: Vec::with_capacity(config.steps + 1),
        grad_norms: Vec::with_capacity(config.steps + 1),
        snapshots: Vec::new(),
    };

    for step in 0..=config.steps {
        let batch = task.train_batch(sampler.next());
        let w = w0.add(&b.matmul(&a)?)?;
        let (loss, grad) = loss_and_grad_at(&w, &batch)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        trace.losses.push(loss);
        trace.grad_norms.push(grad.frobenius_norm());
        if config.snapshot_stride > 0 && step % config.snapshot_stride == 0 {
            trace.snapshots.push(Snapshot {
                step,
                a: a.clone(),
                b: b.clone(),
                grad: grad.clone(),
            });
        }
        if step == config.steps {
            break;
        }
        let next_a = if config.freeze_a {
            a.clone()
        } else {
            a.axpy(-config.eta, &b.t_matmul(&grad)?)?
        };
        let next_b = if config.freeze_b {
            b.clone()
        } else {
            b.axpy(-config.eta, &grad.matmul_t(&a)?)?
        };
        a = next_a;
        b = next_b;
    }
    Ok((LoraPair::new(a, b)?, trace))
}

/// Test loss of `W₀ + B·A` on the task's held-out split.
pub fn evaluate(w0: &Matrix, pair: &LoraPair, task: &TaskSpec) -> Result<f64> {
    evaluate_delta(w0, &delta(pair), task)
}

/// Test loss of `W₀ + delta` on the task's held-out split.
pub fn evaluate_delta(w0: &Matrix, delta: &Matrix, task: &TaskSpec) -> Result<f64> {
    let w = w0.add(delta)?;
    Ok(loss_and_grad_at(&w, &task.test_split())?.0)
}

/// SGD seed used for the task at 1-based position `i` of a continual run.
pub fn task_train_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 2 * i as u64)
}

/// Seed of the fresh adapter drawn for the task at position `i`.
pub fn task_init_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, 2 * i as u64 + 1)
}

/// Learns `tasks` in the given order with one initialization and one merge
/// strategy, evaluating the merged model on every task seen so far after
/// each task.
///
/// IncLoRA always starts each task from a fresh adapter trained on top of
/// the frozen sum of earlier adapters. The freeze variants train both
/// factors on the first task and freeze one factor afterwards.
pub fn continual_run(
    w0: &Matrix,
    tasks: &[TaskSpec],
    init_strategy: InitStrategy,
    merge_strategy: MergeStrategy,
    schedule: Schedule,
    config: &TrainConfig,
) -> Result<RunReport> {
    if tasks.is_empty() {
        return Err(Error::Precondition("continual run needs at least one task".into()));
    }
    config.validate()?;
    schedule.validate()?;
    let (m, n) = w0.shape();
    let r = tasks[0].teacher.rank();

    let mut state: Option<MergeState> = None;
    let mut prev_ft: Option<LoraPair> = None;
    let mut scores = Vec::with_capacity(tasks.len());
    let mut losses = Vec::with_capacity(tasks.len());
    let mut ft_losses = Vec::with_capacity(tasks.len());
    let mut fine_tuned = Vec::with_capacity(tasks.len());
    let mut merged_deltas = Vec::with_capacity(tasks.len());

    for (pos, task) in tasks.iter().enumerate() {
        let i = pos + 1;
        let init_seed = task_init_seed(config.seed, i);
        let mut task_config = config.clone();
        task_config.seed = task_train_seed(config.seed, i);
        task_config.snapshot_stride = 0;
        let (freeze_a, freeze_b) = if i >= 2 { merge_strategy.freeze_flags() } else { (false, false) };
        task_config.freeze_a = freeze_a;
        task_config.freeze_b = freeze_b;

        let init = match (&state, &prev_ft) {
            (Some(st), Some(prev)) => {
                if merge_strategy == MergeStrategy::IncLora {
                    zero_init_from(m, n, r, config.init_sigma, init_seed)?
                } else {
                    match init_strategy {
                        InitStrategy::RandomZero => zero_init_from(m, n, r, config.init_sigma, init_seed)?,
                        InitStrategy::LastMerge => merge_point_init_from(st)?,
                        InitStrategy::LastFineTune => orthogonal_init_from(prev, Decomposition::Qr)?,
                        InitStrategy::LastFineTuneVia(d) => orthogonal_init_from(prev, d)?,
                    }
                }
            }
            _ => init_first_task(m, n, r, config.init_sigma, init_seed)?,
        };

        let base = match (&state, merge_strategy) {
            (Some(st), MergeStrategy::IncLora) => w0.add(&effective_delta(st, merge_strategy)?)?,
            _ => w0.clone(),
        };
        let (ft, _) = sgd_finetune(&base, &init, task, &task_config)?;
        ft_losses.push(evaluate(&base, &ft, task)?);

        let next_state = match &state {
            None => MergeState::from_first(&ft),
            Some(st) => merge_step(st, &ft, i, merge_strategy, schedule)?,
        };
        let merged = effective_delta(&next_state, merge_strategy)?;
        let row_losses: Vec<f64> = tasks[..=pos]
            .iter()
            .map(|t| evaluate_delta(w0, &merged, t))
            .collect::<Result<_>>()?;
        scores.push(row_losses.iter().map(|&l| score_from_loss(l)).collect());
        losses.push(row_losses);
        merged_deltas.push(merged);
        fine_tuned.push(ft.clone());
        prev_ft = Some(ft);
        state = Some(next_state);
    }

    let optimal = tasks
        .iter()
        .map(|t| evaluate(w0, &t.teacher, t))
        .collect::<Result<Vec<_>>>()?;
    let mut report = RunReport::from_parts(scores, losses, ft_losses, Some(optimal))?;
    report.meta = RunMeta {
        strategy: merge_strategy.name().to_string(),
        schedule: schedule.name(),
        init: init_strategy.name(),
        order_id: 0,
        seed: config.seed,
        order: tasks.iter().map(|t| t.task_id).collect(),
    };
    report.fine_tuned = fine_tuned;
    report.merged_deltas = merged_deltas;
    report.final_state = state;
    Ok(report)
}
