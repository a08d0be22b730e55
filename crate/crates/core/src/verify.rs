//! Seeded experiments exercising the [`crate::dynamics`] checks, and the
//! suite run by `slao verify`.

use crate::adapter::{init_first_task, LoraPair};
use crate::dynamics::{
    check_delta_b_approx, check_fa_bound, delta_b_rel_error, mean_off_diagonal, orthogonality_measures,
    reconstruction_error, replay_recursions, similarity_matrix, verify_ntk_bound, Component, DeltaBRun,
    NtkBoundSpec,
};
use crate::error::Result;
use crate::matlib::{derive_seed, gaussian_matrix, nuclear_norm, qr_thin, rng_from_seed, Matrix};
use crate::train::{generate_task_suite, sgd_finetune, TaskSpec, TrainConfig};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// A row-orthonormal `r × n` matrix.
pub fn orthonormal_rows(r: usize, n: usize, seed: u64) -> Result<Matrix> {
    Ok(qr_thin(&gaussian_matrix(n, r, 1.0, seed))?.q.transpose())
}

/// Full-batch noiseless task with an exactly known teacher.
pub fn dynamics_task(m: usize, n: usize, r: usize, seed: u64) -> Result<TaskSpec> {
    Ok(generate_task_suite(1, m, n, r, 80, 0.0, seed)?.remove(0))
}

/// First-task run from `B⁰ = 0` and a row-orthonormal `A⁰`, with every
/// iterate recorded. Returns the replay, the recorded iterates, and the
/// replayed trace's reconstruction error.
pub fn first_task_replay(seed: u64, eta: f64, steps: usize) -> Result<(crate::dynamics::DynamicsTrace, f64)> {
    let (m, n, r) = (8, 6, 2);
    let task = dynamics_task(m, n, r, seed)?;
    let a0 = orthonormal_rows(r, n, derive_seed(seed, 1))?;
    let init = LoraPair::new(a0.clone(), Matrix::zeros(m, r))?;
    let cfg = TrainConfig {
        eta,
        steps,
        batch_size: usize::MAX,
        seed,
        snapshot_stride: 1,
        ..TrainConfig::default()
    };
    let (_, trace) = sgd_finetune(&task.w0, &init, &task, &cfg)?;
    let iterates = trace
        .snapshots
        .iter()
        .map(|s| LoraPair::new(s.a.clone(), s.b.clone()))
        .collect::<Result<Vec<_>>>()?;
    let replay = replay_recursions(&trace.applied_gradients(), eta, &a0, &Matrix::zeros(m, r))?;
    let err = reconstruction_error(&replay, &iterates)?;
    Ok((replay, err))
}

/// A ΔB comparison run: fixed task and start `(A⁰, B⁰)`, varying η.
pub fn delta_b_run(task: &TaskSpec, init: &LoraPair, eta: f64, steps: usize) -> Result<DeltaBRun> {
    let cfg = TrainConfig {
        eta,
        steps,
        batch_size: usize::MAX,
        snapshot_stride: 1,
        ..TrainConfig::default()
    };
    let (out, trace) = sgd_finetune(&task.w0, init, task, &cfg)?;
    Ok(DeltaBRun {
        eta,
        a0: init.a.clone(),
        b0: init.b.clone(),
        b_final: out.b,
        grads: trace.applied_gradients(),
    })
}

/// Start for the ΔB comparison: row-orthonormal `A⁰` and a small random `B⁰`.
pub fn delta_b_start(m: usize, n: usize, r: usize, seed: u64) -> Result<LoraPair> {
    LoraPair::new(
        orthonormal_rows(r, n, derive_seed(seed, 7))?,
        gaussian_matrix(m, r, 0.1, derive_seed(seed, 8)),
    )
}

/// Settings of the sequential fine-tuning experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequentialSetup {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub tasks: usize,
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub samples: usize,
    /// Standard deviation of the first task's Gaussian `A`.
    pub init_sigma: f64,
}

impl Default for SequentialSetup {
    fn default() -> Self {
        Self {
            m: 32,
            n: 32,
            r: 4,
            tasks: 2,
            eta: 1e-3,
            steps: 500,
            batch_size: 16,
            samples: 100,
            init_sigma: 0.02,
        }
    }
}

/// Continues one adapter through consecutive tasks and returns
/// `(b_measure, a_measure)` for every consecutive pair, starting with the
/// first task (where `B = 0`, so the `B` measure vanishes).
pub fn sequential_measures(setup: &SequentialSetup, seed: u64) -> Result<Vec<(f64, f64)>> {
    let SequentialSetup { m, n, r, tasks, eta, steps, batch_size, samples, init_sigma } = *setup;
    let suite = generate_task_suite(tasks, m, n, r, samples, 0.0, seed)?;
    let mut prev = init_first_task(m, n, r, init_sigma, derive_seed(seed, 100))?;
    let mut out = Vec::with_capacity(tasks);
    for (k, task) in suite.iter().enumerate() {
        let cfg = TrainConfig {
            eta,
            steps,
            batch_size,
            seed: derive_seed(seed, 200 + k as u64),
            ..TrainConfig::default()
        };
        let (next, _) = sgd_finetune(&task.w0, &prev, task, &cfg)?;
        let om = orthogonality_measures(&prev, &next)?;
        out.push((om.b_measure, om.a_measure));
        prev = next;
    }
    Ok(out)
}

/// Random linearized instance satisfying every precondition of
/// [`verify_ntk_bound`].
pub fn random_ntk_instance(seed: u64) -> Result<(NtkBoundSpec, Matrix, Matrix)> {
    use rand::Rng as _;
    let mut rng = rng_from_seed(seed);
    let m = rng.random_range(1..5usize);
    let n = rng.random_range(1..5usize);
    let k = rng.random_range(1..6usize);
    let gradients: Vec<Matrix> = (0..k)
        .map(|j| gaussian_matrix(m, n, 1.0, derive_seed(seed, 10 + j as u64)))
        .collect();
    let r = gradients.iter().map(|g| g.frobenius_norm()).fold(0.0, f64::max);
    let d1 = gaussian_matrix(m, n, 1.0, derive_seed(seed, 1));
    let d2 = gaussian_matrix(m, n, 1.0, derive_seed(seed, 2));
    let d = nuclear_norm(&d1).max(nuclear_norm(&d2));
    let spec = NtkBoundSpec {
        lipschitz_g: rng.random_range(0.5..2.0),
        grad_bound_r: r,
        output_dim: k,
        nuclear_bound_d: d,
        base_outputs: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        gradients,
        targets: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    Ok((spec, d1, d2))
}

/// Aligned instance where every level of the bound is attained: `K = 1`,
/// one unit rank-one gradient, and `Δ₁ − Δ₂ = c` times that gradient.
pub fn tight_ntk_instance(c: f64) -> Result<(NtkBoundSpec, Matrix, Matrix)> {
    let u = Matrix::new(3, 2, vec![0.0, 0.6, 0.0, 0.8, 0.0, 0.0])?;
    let spec = NtkBoundSpec {
        lipschitz_g: 1.0,
        grad_bound_r: 1.0,
        output_dim: 1,
        nuclear_bound_d: c / 2.0,
        base_outputs: vec![0.0],
        gradients: vec![u.clone()],
        targets: vec![-c],
    };
    Ok((spec, u.scale(c / 2.0), u.scale(-c / 2.0)))
}

/// Independently fine-tunes `tasks` synthetic tasks from one shared
/// initialization and returns the mean off-diagonal cosine similarity of
/// the `A` and `B` factors.
pub fn shared_init_similarity(
    m: usize,
    n: usize,
    r: usize,
    tasks: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let suite = generate_task_suite(tasks, m, n, r, 100, 0.0, seed)?;
    let init = init_first_task(m, n, r, 0.5 / (n as f64).sqrt(), derive_seed(seed, 1))?;
    let adapters = suite
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let c = TrainConfig { seed: derive_seed(seed, 10 + k as u64), ..cfg.clone() };
            sgd_finetune(&t.w0, &init, t, &c).map(|(p, _)| p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        mean_off_diagonal(&similarity_matrix(&adapters, Component::A)?),
        mean_off_diagonal(&similarity_matrix(&adapters, Component::B)?),
    ))
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((pass, detail)) => CheckResult { name, pass, detail },
        Err(e) => CheckResult { name, pass: false, detail: format!("error: {e}") },
    }
}

/// Runs every dynamics property on seeded instances.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("first-task recursion replay", || {
            let mut worst: f64 = 0.0;
            for seed in 0..5 {
                worst = worst.max(first_task_replay(seed, 1e-2, 200)?.1);
            }
            Ok((worst <= 1e-9, format!("max relative error {worst:.3e}")))
        }),
        check("f_A norm bound", || {
            let mut worst: f64 = 0.0;
            for seed in 0..5 {
                let (trace, _) = first_task_replay(seed, 1e-3, 200)?;
                worst = worst.max(check_fa_bound(&trace)?.max_ratio);
            }
            Ok((worst <= 1.0 + crate::dynamics::BOUND_SLACK, format!("max ratio {worst:.6}")))
        }),
        check("delta-B one-step exactness", || {
            let task = dynamics_task(8, 6, 2, 3)?;
            let init = delta_b_start(8, 6, 2, 3)?;
            let err = delta_b_rel_error(&delta_b_run(&task, &init, 1e-2, 1)?)?;
            Ok((err <= 1e-12, format!("relative error {err:.3e}")))
        }),
        check("delta-B error shrinks with step size", || {
            let mut passed = 0;
            for seed in 0..10 {
                let task = dynamics_task(8, 6, 2, seed)?;
                let init = delta_b_start(8, 6, 2, seed)?;
                let rep = check_delta_b_approx(
                    &delta_b_run(&task, &init, 1e-2, 100)?,
                    &delta_b_run(&task, &init, 1e-3, 100)?,
                )?;
                passed += rep.pass as usize;
            }
            Ok((passed == 10, format!("{passed}/10 seeds")))
        }),
        check("B updates closer to orthogonal than A updates", || {
            let setup = SequentialSetup::default();
            let mut hits = 0;
            let mut total = 0;
            for seed in 0..50 {
                for (b, a) in sequential_measures(&setup, seed)?.into_iter().skip(1) {
                    hits += (b < a) as usize;
                    total += 1;
                }
            }
            let frac = hits as f64 / total as f64;
            Ok((frac >= 0.9, format!("{hits}/{total} pairs")))
        }),
        check("linearized Lipschitz bound", || {
            let mut violations = 0;
            for seed in 0..100 {
                let (spec, d1, d2) = random_ntk_instance(seed)?;
                violations += verify_ntk_bound(&spec, &d1, &d2)?.violated as usize;
            }
            let (spec, d1, d2) = tight_ntk_instance(0.7)?;
            let rep = verify_ntk_bound(&spec, &d1, &d2)?;
            let gap = (rep.worst_case - rep.measured).abs();
            Ok((violations == 0 && gap <= 1e-9, format!("{violations} violations, tight gap {gap:.3e}")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_instance_is_tight() {
        let (spec, d1, d2) = tight_ntk_instance(0.7).unwrap();
        let rep = verify_ntk_bound(&spec, &d1, &d2).unwrap();
        assert!((rep.measured - 0.7).abs() < 1e-12);
        assert!((rep.worst_case - 0.7).abs() < 1e-12);
    }

    #[test]
    fn random_instances_pass_preconditions() {
        for seed in 0..20 {
            let (spec, d1, d2) = random_ntk_instance(seed).unwrap();
            assert!(!verify_ntk_bound(&spec, &d1, &d2).unwrap().violated);
        }
    }

    #[test]
    fn first_task_measure_has_zero_b() {
        let setup = SequentialSetup { tasks: 2, steps: 50, ..SequentialSetup::default() };
        let ms = sequential_measures(&setup, 0).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].0, 0.0);
    }
}
