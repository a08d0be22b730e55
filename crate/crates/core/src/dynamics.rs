//! Numerical checks of LoRA training dynamics.
//!
//! Writing the SGD iterates from a row-orthonormal `A⁰` as
//!
//! ```text
//! Aˢ = A⁰ + η·A⁰·f_A(s)        (f_A is n × n)
//! Bˢ = B⁰ + η·f_B(s)·A⁰ᵀ       (f_B is m × n)
//! ```
//!
//! gives the recursions, starting from `f_A(0) = f_B(0) = 0`,
//!
//! ```text
//! f_A(s+1) = f_A(s) − η·f_B(s)ᵀ·G_s − A⁰ᵀ·B⁰ᵀ·G_s
//! f_B(s+1) = f_B(s) − G_s·(η·f_A(s)ᵀ + I)
//! ```
//!
//! which reproduce the iterates exactly whenever `A⁰·A⁰ᵀ = I`.

use std::fmt;
use std::str::FromStr;

use crate::adapter::LoraPair;
use crate::error::{Error, Result};
use crate::matlib::{cosine_similarity_flat, nuclear_norm, spectral_norm, Matrix};

/// Tolerance on `A⁰·A⁰ᵀ = I` accepted by [`replay_recursions`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

/// Slack allowed on the `f_A` bound ratio.
pub const BOUND_SLACK: f64 = 1e-6;

/// Replayed `f_A`, `f_B` sequences with the inputs that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTrace {
    /// `f_A(s)` for `s = 0..=S`.
    pub f_a: Vec<Matrix>,
    /// `f_B(s)` for `s = 0..=S`.
    pub f_b: Vec<Matrix>,
    /// `G_s` for `s = 0..S`.
    pub grads: Vec<Matrix>,
    pub eta: f64,
    pub a0: Matrix,
    pub b0: Matrix,
    /// `L`: the largest `‖Σ_{j<s} G_j‖_F` over `s = 1..=S`.
    pub grad_sum_bound: f64,
}

impl DynamicsTrace {
    pub fn steps(&self) -> usize {
        self.grads.len()
    }

    /// Iterate at step `s` rebuilt from `f_A(s)` and `f_B(s)`.
    pub fn reconstruct(&self, s: usize) -> Result<LoraPair> {
        if s > self.steps() {
            return Err(Error::Index(format!("step {s} beyond trace of {} steps", self.steps())));
        }
        let a = self.a0.axpy(self.eta, &self.a0.matmul(&self.f_a[s])?)?;
        let b = self.b0.axpy(self.eta, &self.f_b[s].matmul_t(&self.a0)?)?;
        LoraPair::new(a, b)
    }
}

fn check_orthonormal_rows(a0: &Matrix) -> Result<()> {
    let gram = a0.matmul_t(a0)?;
    let dev = gram.max_abs_diff(&Matrix::identity(a0.rows()));
    if dev > ORTHONORMAL_TOLERANCE {
        return Err(Error::Precondition(format!(
            "A⁰ rows are not orthonormal: ‖A⁰A⁰ᵀ − I‖_max = {dev:e}"
        )));
    }
    Ok(())
}

/// Replays the `f_A` / `f_B` recursions from recorded gradients.
pub fn replay_recursions(grads: &[Matrix], eta: f64, a0: &Matrix, b0: &Matrix) -> Result<DynamicsTrace> {
    let (r, n) = a0.shape();
    let m = b0.rows();
    if b0.cols() != r {
        return Err(Error::ShapeMismatch(format!(
            "B⁰ is {:?} but A⁰ is {r}x{n}",
            b0.shape()
        )));
    }
    if let Some(g) = grads.iter().find(|g| g.shape() != (m, n)) {
        return Err(Error::ShapeMismatch(format!("gradient {:?}, expected {m}x{n}", g.shape())));
    }
    check_orthonormal_rows(a0)?;

    let eye = Matrix::identity(n);
    let b0a0 = a0.t_matmul(&b0.transpose())?; // A⁰ᵀ·B⁰ᵀ, n × m
    let mut f_a = vec![Matrix::zeros(n, n)];
    let mut f_b = vec![Matrix::zeros(m, n)];
    let mut running = Matrix::zeros(m, n);
    let mut grad_sum_bound: f64 = 0.0;

    for g in grads {
        let fa = f_a.last().expect("non-empty");
        let fb = f_b.last().expect("non-empty");
        let next_a = fa
            .axpy(-eta, &fb.t_matmul(g)?)?
            .sub(&b0a0.matmul(g)?)?;
        let next_b = fb.sub(&g.matmul(&fa.transpose().scale(eta).add(&eye)?)?)?;
        f_a.push(next_a);
        f_b.push(next_b);
        running = running.add(g)?;
        grad_sum_bound = grad_sum_bound.max(running.frobenius_norm());
    }

    Ok(DynamicsTrace {
        f_a,
        f_b,
        grads: grads.to_vec(),
        eta,
        a0: a0.clone(),
        b0: b0.clone(),
        grad_sum_bound,
    })
}

fn relative_error(approx: &Matrix, actual: &Matrix) -> f64 {
    let diff = approx.sub(actual).expect("shapes checked").frobenius_norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / actual.frobenius_norm().max(f64::MIN_POSITIVE)
    }
}

/// Largest relative error between reconstructed and recorded iterates.
///
/// `iterates[s]` must be the actual pair at step `s`.
pub fn reconstruction_error(trace: &DynamicsTrace, iterates: &[LoraPair]) -> Result<f64> {
    if iterates.len() != trace.steps() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} iterates for a trace of {} steps",
            iterates.len(),
            trace.steps()
        )));
    }
    let mut worst: f64 = 0.0;
    for (s, actual) in iterates.iter().enumerate() {
        let rebuilt = trace.reconstruct(s)?;
        if rebuilt.dims() != actual.dims() {
            return Err(Error::ShapeMismatch(format!(
                "iterate {s} has dims {:?}, trace has {:?}",
                actual.dims(),
                rebuilt.dims()
            )));
        }
        worst = worst
            .max(relative_error(&rebuilt.a, &actual.a))
            .max(relative_error(&rebuilt.b, &actual.b));
    }
    Ok(worst)
}

/// Bound on `‖f_A(s)‖₂`: `ηL²(1 − (η²L²)ˢ) / (1 − η²L²)`.
pub fn fa_bound(eta: f64, l: f64, s: usize) -> f64 {
    let q = eta * eta * l * l;
    eta * l * l * (1.0 - q.powi(s as i32)) / (1.0 - q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaBoundReport {
    /// `‖f_A(s)‖₂ / bound(s)` per step (0 where both vanish).
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub eta_l: f64,
    pub pass: bool,
}

/// Compares `‖f_A(s)‖₂` against its bound at every step.
pub fn check_fa_bound(trace: &DynamicsTrace) -> Result<FaBoundReport> {
    let l = trace.grad_sum_bound;
    let eta_l = trace.eta * l;
    if eta_l >= 1.0 {
        return Err(Error::Precondition(format!("ηL = {eta_l} is not below 1")));
    }
    let ratios: Vec<f64> = trace
        .f_a
        .iter()
        .enumerate()
        .map(|(s, fa)| {
            let norm = spectral_norm(fa);
            let bound = fa_bound(trace.eta, l, s);
            if norm == 0.0 {
                0.0
            } else if bound == 0.0 {
                f64::INFINITY
            } else {
                norm / bound
            }
        })
        .collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(FaBoundReport {
        ratios,
        max_ratio,
        eta_l,
        pass: max_ratio <= 1.0 + BOUND_SLACK,
    })
}

/// One fine-tuning run summarized for the `ΔB` comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBRun {
    pub eta: f64,
    pub a0: Matrix,
    pub b0: Matrix,
    pub b_final: Matrix,
    /// Gradients applied at steps `0..S`.
    pub grads: Vec<Matrix>,
}

/// `‖ΔB − (−η(ΣG)A⁰ᵀ)‖_F / ‖ΔB‖_F` for one run.
pub fn delta_b_rel_error(run: &DeltaBRun) -> Result<f64> {
    let delta_b = run.b_final.sub(&run.b0)?;
    let norm = delta_b.frobenius_norm();
    if norm < f64::MIN_POSITIVE {
        return Err(Error::ZeroUpdate);
    }
    let (m, n) = (run.b0.rows(), run.a0.cols());
    let mut sum = Matrix::zeros(m, n);
    for g in &run.grads {
        sum = sum.add(g)?;
    }
    let approx = sum.matmul_t(&run.a0)?.scale(-run.eta);
    Ok(approx.sub(&delta_b)?.frobenius_norm() / norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBReport {
    pub rel_err_eta: f64,
    pub rel_err_small_eta: f64,
    pub pass: bool,
}

/// Compares the `ΔB` approximation error at a step size and a smaller one.
pub fn check_delta_b_approx(run: &DeltaBRun, small: &DeltaBRun) -> Result<DeltaBReport> {
    if run.grads.len() != small.grads.len() {
        return Err(Error::Precondition(format!(
            "runs have {} and {} steps",
            run.grads.len(),
            small.grads.len()
        )));
    }
    if !run.a0.bitwise_eq(&small.a0) || !run.b0.bitwise_eq(&small.b0) {
        return Err(Error::Precondition("runs start from different adapters".into()));
    }
    if !(small.eta < run.eta) {
        return Err(Error::Precondition(format!(
            "second run must use the smaller step size, got {} vs {}",
            small.eta, run.eta
        )));
    }
    check_orthonormal_rows(&run.a0)?;
    let rel_err_eta = delta_b_rel_error(run)?;
    let rel_err_small_eta = delta_b_rel_error(small)?;
    Ok(DeltaBReport {
        rel_err_eta,
        rel_err_small_eta,
        pass: rel_err_small_eta < rel_err_eta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityMeasures {
    /// `‖(B_new − B_prev)ᵀ·B_prev‖_F`
    pub b_measure: f64,
    /// `‖A_prev·(A_new − A_prev)ᵀ‖_F`
    pub a_measure: f64,
}

pub fn orthogonality_measures(prev: &LoraPair, new: &LoraPair) -> Result<OrthogonalityMeasures> {
    if prev.dims() != new.dims() {
        return Err(Error::dim(format!(
            "adapter dims {:?} vs {:?}",
            prev.dims(),
            new.dims()
        )));
    }
    let db = new.b.sub(&prev.b)?;
    let da = new.a.sub(&prev.a)?;
    Ok(OrthogonalityMeasures {
        b_measure: db.t_matmul(&prev.b)?.frobenius_norm(),
        a_measure: prev.a.matmul_t(&da)?.frobenius_norm(),
    })
}

/// A linearized predictor `a_j(Δ) = base_j + ⟨G⁽ʲ⁾, Δ⟩` scored with the
/// `G`-Lipschitz loss `ℓ(a) = G·‖a − y‖₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkBoundSpec {
    pub lipschitz_g: f64,
    pub grad_bound_r: f64,
    pub output_dim: usize,
    pub nuclear_bound_d: f64,
    pub base_outputs: Vec<f64>,
    pub gradients: Vec<Matrix>,
    pub targets: Vec<f64>,
}

impl NtkBoundSpec {
    fn validate(&self) -> Result<()> {
        let k = self.output_dim;
        if k == 0 || self.base_outputs.len() != k || self.gradients.len() != k || self.targets.len() != k {
            return Err(Error::Precondition(format!(
                "output_dim {k} with {} base outputs, {} gradients, {} targets",
                self.base_outputs.len(),
                self.gradients.len(),
                self.targets.len()
            )));
        }
        if !(self.lipschitz_g > 0.0 && self.grad_bound_r > 0.0 && self.nuclear_bound_d > 0.0) {
            return Err(Error::Precondition("G, R and D must be positive".into()));
        }
        let shape = self.gradients[0].shape();
        for (j, g) in self.gradients.iter().enumerate() {
            if g.shape() != shape {
                return Err(Error::Precondition(format!("gradient {j} has shape {:?}", g.shape())));
            }
            let norm = g.frobenius_norm();
            if norm > self.grad_bound_r * (1.0 + 1e-12) {
                return Err(Error::Precondition(format!(
                    "gradient {j} has norm {norm} above R = {}",
                    self.grad_bound_r
                )));
            }
        }
        Ok(())
    }

    /// Predictor outputs at weight perturbation `delta`.
    pub fn outputs(&self, delta: &Matrix) -> Result<Vec<f64>> {
        self.base_outputs
            .iter()
            .zip(&self.gradients)
            .map(|(b, g)| Ok(b + g.inner(delta)?))
            .collect()
    }

    pub fn loss(&self, outputs: &[f64]) -> f64 {
        let sq: f64 = outputs.iter().zip(&self.targets).map(|(a, y)| (a - y) * (a - y)).sum();
        self.lipschitz_g * sq.sqrt()
    }
}

/// Each level of the Lipschitz chain, from the measured loss gap up to
/// `2GRD√K`.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkBoundReport {
    pub measured: f64,
    /// `G·‖(⟨Δ₁ − Δ₂, G⁽ʲ⁾⟩)_j‖₂`
    pub output_gap: f64,
    /// `G·√(Σ_j ‖Δ₁ − Δ₂‖_F²·‖G⁽ʲ⁾‖_F²)`
    pub frobenius: f64,
    /// The same with the nuclear norm of `Δ₁ − Δ₂`.
    pub nuclear: f64,
    /// `2GRD√K`
    pub worst_case: f64,
    /// Right-hand side minus left-hand side at each of the four `≤`.
    pub slack: [f64; 4],
    pub violated: bool,
}

pub fn verify_ntk_bound(spec: &NtkBoundSpec, delta1: &Matrix, delta2: &Matrix) -> Result<NtkBoundReport> {
    spec.validate()?;
    let shape = spec.gradients[0].shape();
    if delta1.shape() != shape || delta2.shape() != shape {
        return Err(Error::Precondition(format!(
            "perturbations {:?}, {:?} do not match gradients {shape:?}",
            delta1.shape(),
            delta2.shape()
        )));
    }
    for (name, d) in [("delta1", delta1), ("delta2", delta2)] {
        let nn = nuclear_norm(d);
        if nn > spec.nuclear_bound_d * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "{name} has nuclear norm {nn} above D = {}",
                spec.nuclear_bound_d
            )));
        }
    }
    let g = spec.lipschitz_g;
    let diff = delta1.sub(delta2)?;
    let measured = (spec.loss(&spec.outputs(delta1)?) - spec.loss(&spec.outputs(delta2)?)).abs();
    let output_gap = g * spec
        .gradients
        .iter()
        .map(|gj| gj.inner(&diff).map(|v| v * v))
        .sum::<Result<f64>>()?
        .sqrt();
    let grad_sq: f64 = spec.gradients.iter().map(|gj| gj.frobenius_norm().powi(2)).sum();
    let frobenius = g * diff.frobenius_norm() * grad_sq.sqrt();
    let nuclear = g * nuclear_norm(&diff) * grad_sq.sqrt();
    let worst_case = 2.0 * g * spec.grad_bound_r * spec.nuclear_bound_d * (spec.output_dim as f64).sqrt();
    let slack = [
        output_gap - measured,
        frobenius - output_gap,
        nuclear - frobenius,
        worst_case - nuclear,
    ];
    // Rounding noise on tight instances is tolerated at a relative 1e-12.
    let violated = slack.iter().zip([output_gap, frobenius, nuclear, worst_case]).any(|(s, rhs)| *s < -1e-12 * rhs.max(1.0));
    Ok(NtkBoundReport {
        measured,
        output_gap,
        frobenius,
        nuclear,
        worst_case,
        slack,
        violated,
    })
}

/// Which adapter factor to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    A,
    B,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::A => "A",
            Component::B => "B",
        })
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Component::A),
            "B" | "b" => Ok(Component::B),
            other => Err(Error::Parse {
                context: "component".into(),
                message: format!("expected A or B, got {other:?}"),
            }),
        }
    }
}

/// Pairwise cosine similarity of one factor across adapters.
pub fn similarity_matrix(adapters: &[LoraPair], component: Component) -> Result<Matrix> {
    let t = adapters.len();
    if t == 0 {
        return Err(Error::dim("no adapters to compare"));
    }
    let dims = adapters[0].dims();
    if let Some(p) = adapters.iter().find(|p| p.dims() != dims) {
        return Err(Error::dim(format!("adapter dims {:?} vs {dims:?}", p.dims())));
    }
    let pick = |p: &LoraPair| match component {
        Component::A => p.a.clone(),
        Component::B => p.b.clone(),
    };
    let factors: Vec<Matrix> = adapters.iter().map(pick).collect();
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        if factors[i].frobenius_norm() < 1e-300 {
            return Err(Error::ZeroVector);
        }
        data[i * t + i] = 1.0;
        for j in i + 1..t {
            let c = cosine_similarity_flat(&factors[i], &factors[j])?;
            data[i * t + j] = c;
            data[j * t + i] = c;
        }
    }
    Matrix::new(t, t, data)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn mean_off_diagonal(m: &Matrix) -> f64 {
    let t = m.rows();
    if t < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..t {
        for j in 0..t {
            if i != j {
                sum += m[(i, j)];
            }
        }
    }
    sum / (t * (t - 1)) as f64
}
