//! Measurement primitives: discrete POVMs with optional outcome-dependent
//! feedback unitaries, and weak continuous monitoring of several commuting
//! observables with correlated noise and exact feedback conjugation.
//!
//! The continuous stepper implements the Itô update
//!
//! ```text
//! dρ = −(1/8)·Σⱼₖ Γⱼₖ [Oʲ,[Oᵏ,ρ]]·dt
//!      + (1/2)·Σⱼₖ Γⱼₖ (Oʲρ + ρOʲ − 2⟨Oʲ⟩ρ)·dWᵏ
//! ```
//!
//! with noise covariance E[dWʲdWᵏ] = (Γ⁻¹)ʲᵏ·dt and measurement records
//! dRʲ = ⟨Oʲ⟩dt + dWʲ. Feedback, when present, is applied after each
//! measurement step as the exact conjugation by exp(−i·Σⱼ Kⱼ·dRʲ/ħ).

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    self, c, check_hermitian, commutator, frobenius, hermitian_eigenvalues, trace, CMat, C64, I,
};
use crate::state::{DensityMatrix, WaveFunction};

/// Relative size of a single Itô increment above which the stepper refuses
/// to proceed instead of silently producing garbage.
pub const STEP_GUARD: f64 = 0.1;

/// Tolerance for operator-property checks at construction time.
const PROPERTY_TOL: f64 = 1e-10;

/// Sample an index from an unnormalized weight vector.
///
/// A distribution whose total weight is below 1e-14 (or not finite) is
/// reported as an error rather than being resampled or renormalized.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total < 1e-14 {
        return Err(Error::DegenerateDistribution { total });
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Ok(k);
        }
    }
    Ok(weights.len() - 1)
}

/// A discrete generalized measurement given by Kraus operators Nₖ with
/// Σₖ Nₖ†Nₖ = 1, optionally followed by an outcome-dependent unitary Uₖ.
#[derive(Clone, Debug)]
pub struct DiscretePovm {
    kraus: Vec<CMat>,
    feedback: Option<Vec<CMat>>,
}

impl DiscretePovm {
    pub fn new(kraus: Vec<CMat>) -> Result<Self> {
        Self::build(kraus, None)
    }

    pub fn with_feedback(kraus: Vec<CMat>, feedback: Vec<CMat>) -> Result<Self> {
        Self::build(kraus, Some(feedback))
    }

    fn build(kraus: Vec<CMat>, feedback: Option<Vec<CMat>>) -> Result<Self> {
        if kraus.is_empty() {
            return Err(Error::InvalidParameter("a POVM needs at least one outcome".into()));
        }
        let dim = kraus[0].nrows();
        let mut completeness = CMat::zeros(dim, dim);
        for n in &kraus {
            if n.nrows() != dim || n.ncols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "Kraus operator is {}x{}, expected {dim}x{dim}",
                    n.nrows(),
                    n.ncols()
                )));
            }
            completeness += n.adjoint() * n;
        }
        let residual = frobenius(&(&completeness - CMat::identity(dim, dim)));
        if residual > PROPERTY_TOL {
            return Err(Error::MatrixProperty {
                property: "complete (Σ N†N = 1)",
                residual,
                tolerance: PROPERTY_TOL,
            });
        }
        if let Some(us) = &feedback {
            if us.len() != kraus.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} feedback unitaries for {} outcomes",
                    us.len(),
                    kraus.len()
                )));
            }
            for u in us {
                let defect = frobenius(&(u.adjoint() * u - CMat::identity(dim, dim)));
                if defect > PROPERTY_TOL {
                    return Err(Error::MatrixProperty {
                        property: "unitary",
                        residual: defect,
                        tolerance: PROPERTY_TOL,
                    });
                }
            }
        }
        Ok(Self { kraus, feedback })
    }

    pub fn n_outcomes(&self) -> usize {
        self.kraus.len()
    }

    pub fn kraus(&self, k: usize) -> &CMat {
        &self.kraus[k]
    }

    /// The full update operator for outcome k: Uₖ·Nₖ when feedback is present.
    pub fn effective(&self, k: usize) -> CMat {
        match &self.feedback {
            Some(us) => &us[k] * &self.kraus[k],
            None => self.kraus[k].clone(),
        }
    }

    /// Born probabilities ‖Nₖψ‖² of each outcome.
    pub fn outcome_probabilities(&self, psi: &WaveFunction) -> Vec<f64> {
        let measure = psi.grid().measure();
        self.kraus
            .iter()
            .map(|n| (n * psi.amplitudes()).iter().map(|z| z.norm_sqr()).sum::<f64>() * measure)
            .collect()
    }

    /// Sample an outcome, apply its update operator, and renormalize.
    pub fn measure<R: Rng + ?Sized>(
        &self,
        psi: &WaveFunction,
        rng: &mut R,
    ) -> Result<(usize, WaveFunction)> {
        let probs = self.outcome_probabilities(psi);
        let k = sample_index(&probs, rng)?;
        let updated = self.effective(k) * psi.amplitudes();
        let post = WaveFunction::from_amplitudes(psi.grid(), updated)?;
        Ok((k, post))
    }

    /// The outcome-averaged channel ρ ↦ Σₖ Bₖ ρ Bₖ† with Bₖ = Uₖ·Nₖ.
    pub fn average_channel(&self, rho: &DensityMatrix) -> DensityMatrix {
        let dim = rho.dim();
        let mut out = CMat::zeros(dim, dim);
        for k in 0..self.n_outcomes() {
            let b = self.effective(k);
            out += &b * rho.matrix() * b.adjoint();
        }
        DensityMatrix::new_unchecked(out, rho.grid())
    }
}

/// One increment of the measurement records, dRʲ = ⟨Oʲ⟩dt + dWʲ.
#[derive(Clone, Debug)]
pub struct SignalIncrement {
    pub values: DVector<f64>,
}

/// Which backaction rule the stepper applies. The default rule drives the
/// update with the full recorded signal dR = ⟨O⟩dt + dW; the second drops
/// the nonlinear ⟨O⟩ part and rescales the trace instead, which breaks the
/// correspondence between trajectory averages and the averaged master
/// equation. It exists so regression tests can prove the ensemble machinery
/// notices the difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackactionRule {
    Ito,
    DropMeanThenRescale,
}

enum OpStore {
    Dense {
        operators: Vec<CMat>,
        feedback: Option<Vec<CMat>>,
    },
    Diagonal(DiagonalTables),
}

struct DiagonalTables {
    /// dim × n; column j holds the diagonal of Oʲ.
    ops: DMatrix<f64>,
    /// dim × n; column j holds the diagonal of Kⱼ.
    feedback: Option<DMatrix<f64>>,
    /// Diagonal of Σⱼₖ Γⱼₖ·OʲOᵏ; the deterministic part of the one-step
    /// Kraus exponent.
    rate_diag: DVector<f64>,
    /// Elementwise table of the full averaged generator (measurement drift
    /// plus feedback drift terms): dρ̄(a,b)/dt = table(a,b)·ρ̄(a,b). Built
    /// on first use; it is dim × dim, which stepping never needs, and specs
    /// over large configuration spaces cannot afford it eagerly.
    averaged: OnceLock<CMat>,
}

/// Weak continuous measurement of operators Oʲ with noise correlation matrix
/// Γ, optional feedback operators Kⱼ, and a fixed time step.
pub struct ContinuousMeasurementSpec {
    store: OpStore,
    dim: usize,
    n: usize,
    gamma: DMatrix<f64>,
    gamma_inv: DMatrix<f64>,
    /// Lower Cholesky factor L with L·Lᵀ = Γ.
    chol: DMatrix<f64>,
    /// L⁻ᵀ; dW = √dt·L⁻ᵀ·ξ then has covariance Γ⁻¹·dt.
    noise_factor: DMatrix<f64>,
    hbar: f64,
    dt: f64,
}

impl ContinuousMeasurementSpec {
    /// Build a spec from dense Hermitian operators.
    pub fn new(
        operators: Vec<CMat>,
        gamma: DMatrix<f64>,
        feedback: Option<Vec<CMat>>,
        hbar: f64,
        dt: f64,
    ) -> Result<Self> {
        let (dim, n) = Self::check_shapes(
            operators.iter().map(|m| (m.nrows(), m.ncols())),
            feedback.as_ref().map(|f| f.iter().map(|m| (m.nrows(), m.ncols()))),
            &gamma,
        )?;
        for op in &operators {
            check_hermitian(op, PROPERTY_TOL)?;
        }
        if let Some(fb) = &feedback {
            for k in fb {
                check_hermitian(k, PROPERTY_TOL)?;
            }
        }
        let (gamma_inv, chol, noise_factor) = Self::factor_gamma(&gamma)?;
        Self::check_rates(hbar, dt)?;
        Ok(Self {
            store: OpStore::Dense { operators, feedback },
            dim,
            n,
            gamma,
            gamma_inv,
            chol,
            noise_factor,
            hbar,
            dt,
        })
    }

    /// Build a spec from diagonal operators given as their diagonals. This
    /// enables elementwise fast paths in the stepper and the averaged
    /// generator; the dynamics are identical to the dense route.
    pub fn with_diagonals(
        diagonals: Vec<DVector<f64>>,
        gamma: DMatrix<f64>,
        feedback: Option<Vec<DVector<f64>>>,
        hbar: f64,
        dt: f64,
    ) -> Result<Self> {
        let (dim, n) = Self::check_shapes(
            diagonals.iter().map(|d| (d.len(), d.len())),
            feedback.as_ref().map(|f| f.iter().map(|d| (d.len(), d.len()))),
            &gamma,
        )?;
        let (gamma_inv, chol, noise_factor) = Self::factor_gamma(&gamma)?;
        Self::check_rates(hbar, dt)?;
        let ops = DMatrix::from_fn(dim, n, |a, j| diagonals[j][a]);
        let fb = feedback.map(|f| DMatrix::from_fn(dim, n, |a, j| f[j][a]));
        let tables = DiagonalTables::build(ops, fb, &gamma);
        Ok(Self {
            store: OpStore::Diagonal(tables),
            dim,
            n,
            gamma,
            gamma_inv,
            chol,
            noise_factor,
            hbar,
            dt,
        })
    }

    fn check_shapes(
        op_shapes: impl ExactSizeIterator<Item = (usize, usize)>,
        fb_shapes: Option<impl ExactSizeIterator<Item = (usize, usize)>>,
        gamma: &DMatrix<f64>,
    ) -> Result<(usize, usize)> {
        let n = op_shapes.len();
        if n == 0 {
            return Err(Error::InvalidParameter("at least one measured operator is required".into()));
        }
        let mut dim = 0;
        for (r, cols) in op_shapes {
            if dim == 0 {
                dim = r;
            }
            if r != dim || cols != dim {
                return Err(Error::DimensionMismatch(format!(
                    "operator is {r}x{cols}, expected {dim}x{dim}"
                )));
            }
        }
        if let Some(shapes) = fb_shapes {
            if shapes.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "feedback operator count differs from measured operator count {n}"
                )));
            }
            for (r, cols) in shapes {
                if r != dim || cols != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "feedback operator is {r}x{cols}, expected {dim}x{dim}"
                    )));
                }
            }
        }
        if gamma.nrows() != n || gamma.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "correlation matrix is {}x{}, expected {n}x{n}",
                gamma.nrows(),
                gamma.ncols()
            )));
        }
        Ok((dim, n))
    }

    fn factor_gamma(gamma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let scale = gamma.iter().fold(0.0_f64, |m, &v| m.max(v.abs())).max(1e-300);
        let asym = (gamma - gamma.transpose()).iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        if asym > 1e-12 * scale {
            return Err(Error::MatrixProperty {
                property: "symmetric",
                residual: asym,
                tolerance: 1e-12 * scale,
            });
        }
        let chol = match nalgebra::Cholesky::new(gamma.clone()) {
            Some(chol) => chol.l(),
            None => {
                let (_, min, _) = linalg::symmetric_condition(gamma);
                return Err(Error::KernelNotPositive { min_eig: min });
            }
        };
        let n = gamma.nrows();
        let inv_l = chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("Cholesky factor is singular".into()))?;
        let noise_factor = inv_l.transpose();
        let gamma_inv = &noise_factor * inv_l;
        Ok((gamma_inv, chol, noise_factor))
    }

    fn check_rates(hbar: f64, dt: f64) -> Result<()> {
        if !(hbar > 0.0 && hbar.is_finite()) {
            return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        Ok(())
    }

    /// Clone of this spec with a different time step.
    pub fn with_dt(&self, dt: f64) -> Result<Self> {
        Self::check_rates(self.hbar, dt)?;
        let store = match &self.store {
            OpStore::Dense { operators, feedback } => OpStore::Dense {
                operators: operators.clone(),
                feedback: feedback.clone(),
            },
            OpStore::Diagonal(t) => OpStore::Diagonal(DiagonalTables {
                ops: t.ops.clone(),
                feedback: t.feedback.clone(),
                rate_diag: t.rate_diag.clone(),
                averaged: OnceLock::new(),
            }),
        };
        Ok(Self {
            store,
            dim: self.dim,
            n: self.n,
            gamma: self.gamma.clone(),
            gamma_inv: self.gamma_inv.clone(),
            chol: self.chol.clone(),
            noise_factor: self.noise_factor.clone(),
            hbar: self.hbar,
            dt,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_operators(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma_inv(&self) -> &DMatrix<f64> {
        &self.gamma_inv
    }

    pub fn has_feedback(&self) -> bool {
        match &self.store {
            OpStore::Dense { feedback, .. } => feedback.is_some(),
            OpStore::Diagonal(t) => t.feedback.is_some(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.store, OpStore::Diagonal(_))
    }

    /// Diagonals of the measured operators when built through the diagonal
    /// route (column j is the diagonal of Oʲ).
    pub fn operator_diagonals(&self) -> Option<&DMatrix<f64>> {
        match &self.store {
            OpStore::Diagonal(t) => Some(&t.ops),
            OpStore::Dense { .. } => None,
        }
    }

    /// Diagonals of the feedback operators when built through the diagonal
    /// route.
    pub fn feedback_diagonals(&self) -> Option<&DMatrix<f64>> {
        match &self.store {
            OpStore::Diagonal(t) => t.feedback.as_ref(),
            OpStore::Dense { .. } => None,
        }
    }

    /// Dense copies of the measured and feedback operators, materializing
    /// diagonal stores into full matrices.
    fn dense_operators(&self) -> (Vec<CMat>, Option<Vec<CMat>>) {
        match &self.store {
            OpStore::Dense { operators, feedback } => (operators.clone(), feedback.clone()),
            OpStore::Diagonal(t) => {
                let diag_to_dense = |table: &DMatrix<f64>, j: usize| {
                    CMat::from_fn(
                        self.dim,
                        self.dim,
                        |a, b| if a == b { c(table[(a, j)]) } else { c(0.0) },
                    )
                };
                let ops = (0..self.n).map(|j| diag_to_dense(&t.ops, j)).collect();
                let feedback = t
                    .feedback
                    .as_ref()
                    .map(|f| (0..self.n).map(|j| diag_to_dense(f, j)).collect());
                (ops, feedback)
            }
        }
    }

    /// ⟨Oʲ⟩ for every measured operator.
    pub fn expectations(&self, rho: &DensityMatrix) -> DVector<f64> {
        match &self.store {
            OpStore::Dense { operators, .. } => {
                DVector::from_iterator(self.n, operators.iter().map(|op| rho.expectation(op)))
            }
            OpStore::Diagonal(t) => {
                let p = DVector::from_iterator(self.dim, rho.matrix().diagonal().iter().map(|z| z.re));
                t.ops.transpose() * p
            }
        }
    }

    /// Draw one noise increment: returns (dW, Γ·dW). Both are derived from
    /// the same Gaussian draw, so Γ·dW stays well conditioned even when Γ⁻¹
    /// amplifies weakly measured modes.
    fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let xi = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sqrt_dt = self.dt.sqrt();
        let dw = &self.noise_factor * &xi * sqrt_dt;
        let gdw = &self.chol * &xi * sqrt_dt;
        (dw, gdw)
    }
}

impl DiagonalTables {
    fn build(ops: DMatrix<f64>, feedback: Option<DMatrix<f64>>, gamma: &DMatrix<f64>) -> Self {
        let dim = ops.nrows();
        let weighted = &ops * gamma;
        let rate_diag = DVector::from_fn(dim, |a, _| weighted.row(a).dot(&ops.row(a)));
        Self {
            ops,
            feedback,
            rate_diag,
            averaged: OnceLock::new(),
        }
    }

    /// Elementwise averaged-generator table, built on first use.
    fn averaged(&self, gamma: &DMatrix<f64>, gamma_inv: &DMatrix<f64>, hbar: f64) -> &CMat {
        self.averaged.get_or_init(|| {
            let dim = self.ops.nrows();
            let q = &self.ops * gamma * self.ops.transpose();
            let mut table = CMat::from_fn(dim, dim, |a, b| {
                c(-(q[(a, a)] - 2.0 * q[(a, b)] + q[(b, b)]) / 8.0)
            });
            if let Some(fb) = &self.feedback {
                let r = fb * self.ops.transpose();
                let t = fb * gamma_inv * fb.transpose();
                for a in 0..dim {
                    for b in 0..dim {
                        let cross = r[(a, a)] + r[(a, b)] - r[(b, a)] - r[(b, b)];
                        let double_fb = t[(a, a)] - 2.0 * t[(a, b)] + t[(b, b)];
                        table[(a, b)] += -I * c(cross / (2.0 * hbar))
                            + c(-double_fb / (2.0 * hbar * hbar));
                    }
                }
            }
            table
        })
    }
}

/// One step of the monitored evolution (no feedback, no Hamiltonian).
/// Returns the signal increment and the renormalized post-step state.
///
/// The state update conjugates with the Hermitian Kraus factor driven by
/// the recorded signal,
///
/// ```text
/// A = exp((1/2)·Σⱼ vⱼOʲ − (dt/4)·Σⱼₖ ΓⱼₖOʲOᵏ),   v = Γ·dR,
/// ρ' = AρA† / tr(AρA†),
/// ```
///
/// which expands to the Itô stochastic master equation
///
/// ```text
/// dρ = −(1/8)Σⱼₖ Γⱼₖ[Oʲ,[Oᵏ,ρ]]dt + (1/2)Σⱼₖ Γⱼₖ(Oʲρ+ρOʲ−2⟨Oʲ⟩ρ)dWᵏ
/// ```
///
/// with the same weak order as a plain Euler increment while keeping the
/// state positive semidefinite exactly, since the map is a conjugation
/// followed by trace renormalization.
pub fn continuous_measurement_step<R: Rng + ?Sized>(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
    rng: &mut R,
) -> Result<(SignalIncrement, DensityMatrix)> {
    continuous_measurement_step_with_rule(spec, rho, rng, BackactionRule::Ito)
}

/// One step with an explicit backaction rule; see [`BackactionRule`].
pub fn continuous_measurement_step_with_rule<R: Rng + ?Sized>(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
    rng: &mut R,
    rule: BackactionRule,
) -> Result<(SignalIncrement, DensityMatrix)> {
    if rho.dim() != spec.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} does not match the spec dimension {}",
            rho.dim(),
            spec.dim()
        )));
    }
    let expectations = spec.expectations(rho);
    let (dw, gdw) = spec.sample_noise(rng);
    let dt = spec.dt();
    // The Kraus exponent is driven by Γ·dR; the corrupted rule drops the
    // ⟨O⟩dt part of the record.
    let v = match rule {
        BackactionRule::Ito => &gdw + &spec.gamma * &expectations * dt,
        BackactionRule::DropMeanThenRescale => gdw.clone(),
    };
    let conjugated = match &spec.store {
        OpStore::Dense { operators, .. } => {
            let dim = spec.dim();
            let mut exponent = CMat::zeros(dim, dim);
            for (j, op) in operators.iter().enumerate() {
                exponent += op.map(|z| z * c(0.5 * v[j]));
            }
            for j in 0..spec.n_operators() {
                let mut contracted = CMat::zeros(dim, dim);
                for (k, op) in operators.iter().enumerate() {
                    let g = spec.gamma[(j, k)];
                    if g != 0.0 {
                        contracted += op.map(|z| z * c(g));
                    }
                }
                exponent -= (&operators[j] * contracted).map(|z| z * c(0.25 * dt));
            }
            let a = linalg::exp_hermitian(&exponent, 1.0);
            &a * rho.matrix() * a.adjoint()
        }
        OpStore::Diagonal(t) => {
            let w = &t.ops * &v;
            let dim = spec.dim();
            let x =
                DVector::from_fn(dim, |i, _| 0.5 * w[i] - 0.25 * dt * t.rate_diag[i]);
            CMat::from_fn(dim, dim, |a, b| {
                rho.matrix()[(a, b)] * c((x[a] + x[b]).exp())
            })
        }
    };
    let tr = trace(&conjugated).re;
    if !(tr > 0.0 && tr.is_finite()) {
        return Err(Error::Numerical(format!(
            "measurement update produced trace {tr}"
        )));
    }
    let updated = conjugated.map(|z| z / c(tr));
    let increment_norm = frobenius(&(&updated - rho.matrix()));
    let state_norm = frobenius(rho.matrix());
    if increment_norm > STEP_GUARD * state_norm {
        return Err(Error::StepSizeGuard {
            increment: increment_norm / state_norm,
            limit: STEP_GUARD,
        });
    }
    let post = DensityMatrix::new_unchecked(updated, rho.grid());
    let signal = SignalIncrement {
        values: &expectations * dt + dw,
    };
    Ok((signal, post))
}

/// Exact feedback conjugation ρ ↦ U ρ U† with U = exp(−i·Σⱼ Kⱼ·dRʲ/ħ).
pub fn feedback_conjugation_step(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
    signal: &SignalIncrement,
) -> Result<DensityMatrix> {
    if signal.values.len() != spec.n_operators() {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} components, expected {}",
            signal.values.len(),
            spec.n_operators()
        )));
    }
    match &spec.store {
        OpStore::Dense { feedback, .. } => {
            let fb = feedback.as_ref().ok_or_else(|| {
                Error::InvalidParameter("spec has no feedback operators".into())
            })?;
            let mut total = CMat::zeros(spec.dim(), spec.dim());
            for (j, k) in fb.iter().enumerate() {
                total += k.map(|z| z * c(signal.values[j]));
            }
            let u = linalg::unitary_from_hermitian(&total, 1.0 / spec.hbar());
            let out = &u * rho.matrix() * u.adjoint();
            Ok(DensityMatrix::new_unchecked(out, rho.grid()))
        }
        OpStore::Diagonal(t) => {
            let fb = t.feedback.as_ref().ok_or_else(|| {
                Error::InvalidParameter("spec has no feedback operators".into())
            })?;
            let phase = fb * &signal.values / spec.hbar();
            let dim = spec.dim();
            let out = CMat::from_fn(dim, dim, |a, b| {
                rho.matrix()[(a, b)] * (-I * c(phase[a] - phase[b])).exp()
            });
            Ok(DensityMatrix::new_unchecked(out, rho.grid()))
        }
    }
}

/// One full monitored-plus-feedback step: Itô measurement update followed by
/// conjugation with the just-recorded signal.
pub fn composed_feedback_step<R: Rng + ?Sized>(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
    rng: &mut R,
) -> Result<(SignalIncrement, DensityMatrix)> {
    let (signal, measured) = continuous_measurement_step(spec, rho, rng)?;
    let fed = feedback_conjugation_step(spec, &measured, &signal)?;
    Ok((signal, fed))
}

/// Drift and per-noise-component diffusion of the feedback-inclusive
/// stochastic master equation, evaluated at ρ:
///
/// ```text
/// dρ = drift·dt + Σₖ diffusionₖ·dWᵏ
/// drift = −(1/8)Σⱼₖ Γⱼₖ[Oʲ,[Oᵏ,ρ]] − (i/2ħ)Σⱼ[Kⱼ,{Oʲ,ρ}]
///         − (1/2ħ²)Σⱼₖ(Γ⁻¹)ⱼₖ[Kⱼ,[Kₖ,ρ]]
/// diffusionₖ = (1/2)Σⱼ Γⱼₖ(Oʲρ + ρOʲ − 2⟨Oʲ⟩ρ) − (i/ħ)[Kₖ,ρ]
/// ```
///
/// The feedback terms are omitted when the spec has no feedback operators.
pub fn analytic_feedback_generator(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
) -> Result<(CMat, Vec<CMat>)> {
    let dim = spec.dim();
    if rho.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} does not match the spec dimension {dim}",
            rho.dim()
        )));
    }
    let expectations = spec.expectations(rho);
    match &spec.store {
        OpStore::Dense { operators, feedback } => {
            let inner: Vec<CMat> = operators
                .iter()
                .map(|op| commutator(op, rho.matrix()))
                .collect();
            let mut drift = CMat::zeros(dim, dim);
            for j in 0..spec.n_operators() {
                let mut acc = CMat::zeros(dim, dim);
                for (k, item) in inner.iter().enumerate() {
                    let g = spec.gamma[(j, k)];
                    if g != 0.0 {
                        acc += item.map(|z| z * c(g));
                    }
                }
                drift += commutator(&operators[j], &acc);
            }
            drift *= c(-1.0 / 8.0);
            if let Some(fb) = feedback {
                let hbar = spec.hbar();
                for (j, k_op) in fb.iter().enumerate() {
                    let anti = linalg::anticommutator(&operators[j], rho.matrix());
                    drift += commutator(k_op, &anti).map(|z| z * (-I * c(1.0 / (2.0 * hbar))));
                }
                for j in 0..spec.n_operators() {
                    let mut acc = CMat::zeros(dim, dim);
                    for (k, k_op) in fb.iter().enumerate() {
                        let g = spec.gamma_inv[(j, k)];
                        if g != 0.0 {
                            acc += commutator(k_op, rho.matrix()).map(|z| z * c(g));
                        }
                    }
                    drift += commutator(&fb[j], &acc)
                        .map(|z| z * c(-1.0 / (2.0 * hbar * hbar)));
                }
            }
            let mut diffusion = Vec::with_capacity(spec.n_operators());
            for k in 0..spec.n_operators() {
                let mut term = CMat::zeros(dim, dim);
                for (j, op) in operators.iter().enumerate() {
                    let g = spec.gamma[(j, k)];
                    if g != 0.0 {
                        let mut part = op * rho.matrix() + rho.matrix() * op;
                        part -= rho.matrix().map(|z| z * c(2.0 * expectations[j]));
                        term += part.map(|z| z * c(0.5 * g));
                    }
                }
                if let Some(fb) = feedback {
                    term += commutator(&fb[k], rho.matrix())
                        .map(|z| z * (-I * c(1.0 / spec.hbar())));
                }
                diffusion.push(term);
            }
            Ok((drift, diffusion))
        }
        OpStore::Diagonal(t) => {
            let table = t.averaged(&spec.gamma, &spec.gamma_inv, spec.hbar);
            let drift = CMat::from_fn(dim, dim, |a, b| table[(a, b)] * rho.matrix()[(a, b)]);
            let mut diffusion = Vec::with_capacity(spec.n_operators());
            for k in 0..spec.n_operators() {
                let gcol = spec.gamma.column(k);
                let weighted = &t.ops * DVector::from_iterator(spec.n_operators(), gcol.iter().copied());
                let mean = expectations.dot(&DVector::from_iterator(
                    spec.n_operators(),
                    gcol.iter().copied(),
                ));
                let term = CMat::from_fn(dim, dim, |a, b| {
                    let mut coef = c(0.5 * (weighted[a] + weighted[b] - 2.0 * mean));
                    if let Some(fb) = &t.feedback {
                        coef += -I * c((fb[(a, k)] - fb[(b, k)]) / spec.hbar());
                    }
                    rho.matrix()[(a, b)] * coef
                });
                diffusion.push(term);
            }
            Ok((drift, diffusion))
        }
    }
}

/// Symmetric coefficients Q_ab of the centered quadratic noise products in
/// the strong expansion of one composed step. Writing Gₐ = Σⱼ Γⱼₐ Oʲ and
/// F^ab = dWᵃdWᵇ − (Γ⁻¹)ₐᵦ dt, a realized step satisfies
///
/// ```text
/// ρ' = ρ + drift·dt + Σₖ diffusionₖ·dWᵏ + Σₐᵦ Q_ab·F^ab + O(dt^{3/2})
/// ```
///
/// with drift and diffusion from [`analytic_feedback_generator`]. The
/// coefficients collect the second-order pieces of the measurement factor,
/// its trace renormalization, and the feedback conjugation:
///
/// ```text
/// Q_ab = (1/16){GₐG_b + G_bGₐ, ρ} + (1/8)(Gₐ ρ G_b + G_b ρ Gₐ)
///      − (1/4)(⟨Gₐ⟩{G_b,ρ} + ⟨G_b⟩{Gₐ,ρ})
///      + (⟨Gₐ⟩⟨G_b⟩ − (1/4)⟨GₐG_b + G_bGₐ⟩)ρ
///      − (i/2ħ)([Kₐ,N_b] + [K_b,Nₐ])
///      − (1/4ħ²)([Kₐ,[K_b,ρ]] + [K_b,[Kₐ,ρ]])
/// ```
///
/// where N_x = (1/2){G_x,ρ} − ⟨G_x⟩ρ and the feedback rows vanish for a
/// measurement-only spec. Every Q_ab is traceless. The assembly is dense and
/// intended for small systems, so dimensions above 64 are rejected.
pub fn composed_step_quadratic_terms(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
) -> Result<Vec<Vec<CMat>>> {
    let dim = spec.dim();
    if rho.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} does not match the spec dimension {dim}",
            rho.dim()
        )));
    }
    if dim > 64 {
        return Err(Error::InvalidParameter(format!(
            "quadratic-term assembly is dense and limited to dimension 64, got {dim}"
        )));
    }
    let n = spec.n_operators();
    let (ops, feedback) = spec.dense_operators();
    let expectations = spec.expectations(rho);
    let m = rho.matrix();
    let g_ops: Vec<CMat> = (0..n)
        .map(|a| {
            let mut acc = CMat::zeros(dim, dim);
            for (j, op) in ops.iter().enumerate() {
                let g = spec.gamma[(j, a)];
                if g != 0.0 {
                    acc += op.map(|z| z * c(g));
                }
            }
            acc
        })
        .collect();
    let g_means = &spec.gamma * &expectations;
    let g_anti: Vec<CMat> = g_ops
        .iter()
        .map(|g| linalg::anticommutator(g, m))
        .collect();
    let noise_ops: Vec<CMat> = (0..n)
        .map(|a| {
            g_anti[a].map(|z| z * c(0.5)) - m.map(|z| z * c(g_means[a]))
        })
        .collect();
    let hbar = spec.hbar();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut row = Vec::with_capacity(n);
        for b in 0..n {
            let pair = &g_ops[a] * &g_ops[b] + &g_ops[b] * &g_ops[a];
            let pair_mean = trace(&(&pair * m)).re;
            let mut q = linalg::anticommutator(&pair, m).map(|z| z * c(1.0 / 16.0));
            q += (&g_ops[a] * m * &g_ops[b] + &g_ops[b] * m * &g_ops[a])
                .map(|z| z * c(1.0 / 8.0));
            q -= g_anti[b].map(|z| z * c(0.25 * g_means[a]));
            q -= g_anti[a].map(|z| z * c(0.25 * g_means[b]));
            q += m.map(|z| z * c(g_means[a] * g_means[b] - 0.25 * pair_mean));
            if let Some(fb) = &feedback {
                q += (commutator(&fb[a], &noise_ops[b]) + commutator(&fb[b], &noise_ops[a]))
                    .map(|z| z * (-I * c(1.0 / (2.0 * hbar))));
                q += (commutator(&fb[a], &commutator(&fb[b], m))
                    + commutator(&fb[b], &commutator(&fb[a], m)))
                .map(|z| z * c(-1.0 / (4.0 * hbar * hbar)));
            }
            row.push(q);
        }
        out.push(row);
    }
    Ok(out)
}

/// The noise-averaged generator: dρ̄/dt evaluated at ρ̄. This is exactly the
/// drift of [`analytic_feedback_generator`], since every noise term averages
/// to zero under the Itô convention.
pub fn averaged_feedback_generator(
    spec: &ContinuousMeasurementSpec,
    rho: &DensityMatrix,
) -> Result<CMat> {
    analytic_feedback_generator(spec, rho).map(|(drift, _)| drift)
}

/// Largest entry of Σⱼ (Kⱼ ⊗ Oʲ − Oʲ ⊗ Kⱼ), together with whether it is
/// below 1e-10. When this vanishes the averaged feedback cross term is a
/// pure potential: −(i/2ħ)Σⱼ[Kⱼ,{Oʲ,ρ}] = −(i/ħ)[V,ρ] with
/// V = (1/4)Σⱼ{Oʲ,Kⱼ}.
pub fn pure_potential_condition(spec: &ContinuousMeasurementSpec) -> Result<(f64, bool)> {
    let residual = match &spec.store {
        OpStore::Diagonal(t) => {
            let fb = t.feedback.as_ref().ok_or_else(|| {
                Error::InvalidParameter("spec has no feedback operators".into())
            })?;
            let r = fb * t.ops.transpose();
            let mut worst: f64 = 0.0;
            for a in 0..spec.dim() {
                for b in 0..spec.dim() {
                    worst = worst.max((r[(a, b)] - r[(b, a)]).abs());
                }
            }
            worst
        }
        OpStore::Dense { operators, feedback } => {
            let fb = feedback.as_ref().ok_or_else(|| {
                Error::InvalidParameter("spec has no feedback operators".into())
            })?;
            let dim = spec.dim();
            if dim > 64 {
                return Err(Error::Numerical(format!(
                    "dense pure-potential check scales as dim^4 and is capped at dim 64, got {dim}"
                )));
            }
            let mut worst: f64 = 0.0;
            for a in 0..dim {
                for cc in 0..dim {
                    for b in 0..dim {
                        for d in 0..dim {
                            let mut sum = C64::new(0.0, 0.0);
                            for j in 0..spec.n_operators() {
                                sum += fb[j][(a, cc)] * operators[j][(b, d)]
                                    - operators[j][(a, cc)] * fb[j][(b, d)];
                            }
                            worst = worst.max(sum.norm());
                        }
                    }
                }
            }
            worst
        }
    };
    Ok((residual, residual <= 1e-10))
}

/// Minimum eigenvalue of the Choi matrix of a channel, as a CP diagnostic.
/// The channel is probed on all matrix units of the given dimension.
pub fn choi_min_eigenvalue(dim: usize, channel: impl Fn(&CMat) -> CMat) -> f64 {
    let mut choi = CMat::zeros(dim * dim, dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut unit = CMat::zeros(dim, dim);
            unit[(i, j)] = c(1.0);
            let out = channel(&unit);
            for k in 0..dim {
                for l in 0..dim {
                    choi[(i * dim + k, j * dim + l)] = out[(k, l)];
                }
            }
        }
    }
    hermitian_eigenvalues(&choi)[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::linalg::trace_distance_matrices;
    use crate::state::DensityMatrix;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qubit_grid() -> GridSpec {
        GridSpec::new(2, 1.0, 1).unwrap()
    }

    fn sigma_x() -> CMat {
        CMat::from_row_slice(2, 2, &[c(0.0), c(1.0), c(1.0), c(0.0)])
    }

    fn sigma_z() -> CMat {
        CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(-1.0)])
    }

    fn plus_state() -> DensityMatrix {
        let m = CMat::from_row_slice(2, 2, &[c(0.5), c(0.5), c(0.5), c(0.5)]);
        DensityMatrix::new(m, qubit_grid()).unwrap()
    }

    fn monitored_z(gamma: f64, dt: f64) -> ContinuousMeasurementSpec {
        ContinuousMeasurementSpec::new(
            vec![sigma_z()],
            DMatrix::from_element(1, 1, gamma),
            None,
            1.0,
            dt,
        )
        .unwrap()
    }

    #[test]
    fn incomplete_povm_is_rejected() {
        let half = CMat::from_row_slice(2, 2, &[c(0.5), c(0.0), c(0.0), c(0.0)]);
        let err = DiscretePovm::new(vec![half]).unwrap_err();
        assert!(matches!(err, Error::MatrixProperty { .. }));
    }

    #[test]
    fn nonunitary_feedback_is_rejected() {
        let p0 = CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        let p1 = CMat::from_row_slice(2, 2, &[c(0.0), c(0.0), c(0.0), c(1.0)]);
        let not_unitary = CMat::from_row_slice(2, 2, &[c(2.0), c(0.0), c(0.0), c(1.0)]);
        let err =
            DiscretePovm::with_feedback(vec![p0, p1], vec![not_unitary.clone(), not_unitary])
                .unwrap_err();
        assert!(matches!(err, Error::MatrixProperty { .. }));
    }

    #[test]
    fn degenerate_distribution_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = sample_index(&[0.0, 1e-20, 0.0], &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution { .. }));
        let err = sample_index(&[f64::NAN, 0.5], &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateDistribution { .. }));
    }

    #[test]
    fn projective_outcomes_follow_born_frequencies() {
        let grid = qubit_grid();
        let p0 = CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]);
        let p1 = CMat::from_row_slice(2, 2, &[c(0.0), c(0.0), c(0.0), c(1.0)]);
        let povm = DiscretePovm::new(vec![p0, p1]).unwrap();
        let theta: f64 = 0.7;
        let amps = crate::linalg::CVec::from_vec(vec![c(theta.cos()), c(theta.sin())]);
        let psi = WaveFunction::from_amplitudes(grid, amps).unwrap();
        let p_expect = theta.cos().powi(2);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let (k, post) = povm.measure(&psi, &mut rng).unwrap();
            if k == 0 {
                hits += 1;
                assert_relative_eq!(post.probabilities()[0], 1.0, epsilon = 1e-10);
            }
        }
        let freq = hits as f64 / trials as f64;
        let sigma = (p_expect * (1.0 - p_expect) / trials as f64).sqrt();
        assert!(
            (freq - p_expect).abs() < 4.0 * sigma,
            "frequency {freq} vs Born {p_expect} (4σ = {})",
            4.0 * sigma
        );
    }

    /// Random complete POVM on a given dimension, built by normalizing a set
    /// of random operators with the inverse square root of their sum.
    fn random_povm(dim: usize, outcomes: usize, rng: &mut ChaCha8Rng) -> DiscretePovm {
        let raw: Vec<CMat> = (0..outcomes)
            .map(|_| {
                CMat::from_fn(dim, dim, |_, _| {
                    C64::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    )
                })
            })
            .collect();
        let mut total = CMat::zeros(dim, dim);
        for a in &raw {
            total += a.adjoint() * a;
        }
        let (values, v) = linalg::hermitian_eigen(&total);
        let inv_sqrt = CMat::from_diagonal(&crate::linalg::CVec::from_iterator(
            dim,
            values.iter().map(|&e| c(1.0 / e.sqrt())),
        ));
        let norm = &v * inv_sqrt * v.adjoint();
        DiscretePovm::new(raw.into_iter().map(|a| a * &norm).collect()).unwrap()
    }

    #[test]
    fn sampled_updates_average_to_the_channel() {
        let grid = qubit_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let povm = random_povm(2, 3, &mut rng);
        let psi = WaveFunction::random(grid, &mut rng);
        let rho = psi.density_matrix();
        let expected = povm.average_channel(&rho);

        let trials = 20_000;
        let mut accum = CMat::zeros(2, 2);
        for _ in 0..trials {
            let (_, post) = povm.measure(&psi, &mut rng).unwrap();
            accum += post.density_matrix().matrix();
        }
        accum /= c(trials as f64);
        let dist = trace_distance_matrices(&accum, expected.matrix());
        assert!(dist < 0.03, "sampled average differs from channel: {dist}");
    }

    #[test]
    fn average_channel_is_completely_positive_and_trace_preserving() {
        let grid = GridSpec::new(4, 0.7, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let povm = random_povm(4, 3, &mut rng);
        let min_eig = choi_min_eigenvalue(4, |m| {
            let rho = DensityMatrix::new_unchecked(m.clone(), grid);
            povm.average_channel(&rho).matrix().clone()
        });
        assert!(min_eig > -1e-10, "Choi matrix has eigenvalue {min_eig}");

        let rho = DensityMatrix::random(grid, &mut rng);
        let out = povm.average_channel(&rho);
        assert_relative_eq!(out.trace().re, 1.0, epsilon = 1e-10);
        out.validate().unwrap();
    }

    #[test]
    fn noise_covariance_matches_inverse_gamma() {
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let dt = 0.01;
        let spec = ContinuousMeasurementSpec::new(
            vec![sigma_z(), sigma_x()],
            gamma.clone(),
            None,
            1.0,
            dt,
        )
        .unwrap();
        let inv = spec.gamma_inv().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let samples = 200_000;
        let mut cov = DMatrix::zeros(2, 2);
        let mut mean = DVector::zeros(2);
        for _ in 0..samples {
            let (dw, gdw) = spec.sample_noise(&mut rng);
            cov += &dw * dw.transpose();
            mean += &dw;
            let expected_gdw = &gamma * &dw;
            assert!((gdw - expected_gdw).norm() < 1e-12);
        }
        cov /= samples as f64;
        mean /= samples as f64;
        for j in 0..2 {
            assert!(mean[j].abs() < 4.0 * (inv[(j, j)] * dt / samples as f64).sqrt());
            for k in 0..2 {
                let expected = inv[(j, k)] * dt;
                let scale = (inv[(j, j)] * inv[(k, k)] * dt * dt).sqrt();
                assert!(
                    (cov[(j, k)] - expected).abs() < 5.0 * scale / (samples as f64).sqrt(),
                    "cov[{j},{k}] = {} vs {expected}",
                    cov[(j, k)]
                );
            }
        }
    }

    #[test]
    fn noise_scales_inversely_with_gamma() {
        let dt = 0.01;
        let base = monitored_z(1.0, dt);
        let stronger = monitored_z(4.0, dt);
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        let (dw_a, _) = base.sample_noise(&mut rng_a);
        let (dw_b, _) = stronger.sample_noise(&mut rng_b);
        assert_relative_eq!(dw_b[0], dw_a[0] / 2.0, epsilon = 1e-14);
    }

    #[test]
    fn signal_mean_tracks_the_expectation() {
        let dt = 1e-3;
        let gamma = 2.0;
        let spec = monitored_z(gamma, dt);
        let rho = DensityMatrix::new(
            CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]),
            qubit_grid(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let steps = 40_000;
        let mut total = 0.0;
        for _ in 0..steps {
            let (signal, _) = continuous_measurement_step(&spec, &rho, &mut rng).unwrap();
            total += signal.values[0];
        }
        let mean = total / steps as f64;
        let sigma = (dt / gamma / steps as f64).sqrt();
        assert!(
            (mean - dt).abs() < 4.0 * sigma,
            "mean signal {mean} vs drift {dt} (4σ = {})",
            4.0 * sigma
        );
    }

    #[test]
    fn monitored_states_stay_physical() {
        let spec = monitored_z(1.5, 2e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut rho = plus_state();
        for _ in 0..400 {
            let (_, next) = continuous_measurement_step(&spec, &rho, &mut rng).unwrap();
            rho = next;
            assert!((rho.trace().re - 1.0).abs() < 1e-12);
            assert!(rho.min_eigenvalue() > -1e-10);
        }
    }

    #[test]
    fn step_guard_rejects_oversized_increments() {
        let spec = monitored_z(1.0, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = continuous_measurement_step(&spec, &plus_state(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::StepSizeGuard { .. }));
    }

    #[test]
    fn monitoring_collapses_to_pointer_states_with_born_weights() {
        let gamma = 1.0;
        let dt = 5e-4;
        let spec = monitored_z(gamma, dt);
        let p_up = 0.7;
        let rho0 = DensityMatrix::new(
            CMat::from_row_slice(
                2,
                2,
                &[
                    c(p_up),
                    c((p_up * (1.0 - p_up)).sqrt()),
                    c((p_up * (1.0 - p_up)).sqrt()),
                    c(1.0 - p_up),
                ],
            ),
            qubit_grid(),
        )
        .unwrap();
        let trajectories = 400;
        let steps = 6000;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut sum_z = 0.0;
        let mut sum_zz = 0.0;
        let mut sum_abs = 0.0;
        for _ in 0..trajectories {
            let mut rho = rho0.clone();
            for _ in 0..steps {
                let (_, next) = continuous_measurement_step(&spec, &rho, &mut rng).unwrap();
                rho = next;
            }
            let z = rho.expectation(&sigma_z());
            sum_z += z;
            sum_zz += z * z;
            sum_abs += z.abs();
        }
        let m = trajectories as f64;
        let mean_abs = sum_abs / m;
        assert!(
            mean_abs > 0.75,
            "trajectories have not collapsed: mean |⟨σz⟩| = {mean_abs}"
        );
        // ⟨σz⟩ is a martingale of the monitored evolution: single runs are
        // driven to ±1 while the ensemble mean stays at 2p−1, so the pointer
        // weights are the Born weights.
        let mean_z = sum_z / m;
        let stderr = ((sum_zz - sum_z * sum_z / m) / (m - 1.0) / m).sqrt();
        let estimate = 0.5 * (1.0 + mean_z);
        assert!(
            (estimate - p_up).abs() < 4.0 * 0.5 * stderr,
            "pointer weight estimate {estimate} vs Born weight {p_up} (stderr {stderr})"
        );
    }

    #[test]
    fn dropping_the_mean_subtraction_breaks_born_weights() {
        let gamma = 1.0;
        let dt = 5e-4;
        let spec = monitored_z(gamma, dt);
        let p_up = 0.7;
        let rho0 = DensityMatrix::new(
            CMat::from_row_slice(
                2,
                2,
                &[
                    c(p_up),
                    c((p_up * (1.0 - p_up)).sqrt()),
                    c((p_up * (1.0 - p_up)).sqrt()),
                    c(1.0 - p_up),
                ],
            ),
            qubit_grid(),
        )
        .unwrap();
        let trajectories = 400;
        let steps = 6000;
        let mut sum_z = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..trajectories {
            let mut rho = rho0.clone();
            for _ in 0..steps {
                let (_, next) = continuous_measurement_step_with_rule(
                    &spec,
                    &rho,
                    &mut rng,
                    BackactionRule::DropMeanThenRescale,
                )
                .unwrap();
                rho = next;
            }
            sum_z += rho.expectation(&sigma_z());
        }
        let estimate = 0.5 * (1.0 + sum_z / trajectories as f64);
        assert!(
            (estimate - p_up).abs() > 0.05,
            "corrupted rule unexpectedly reproduced the Born weight: {estimate}"
        );
    }

    #[test]
    fn trajectory_average_matches_the_dephasing_law() {
        let gamma = 1.0;
        let dt = 5e-4;
        let t_final = 1.0;
        let spec = monitored_z(gamma, dt);
        let steps = (t_final / dt).round() as usize;
        let trajectories = 1500;
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mut mean = CMat::zeros(2, 2);
        for _ in 0..trajectories {
            let mut rho = plus_state();
            for _ in 0..steps {
                let (_, next) = continuous_measurement_step(&spec, &rho, &mut rng).unwrap();
                rho = next;
            }
            mean += rho.matrix();
        }
        mean /= c(trajectories as f64);
        let expected = 0.5 * (-gamma * t_final / 2.0).exp();
        assert!(
            (mean[(0, 1)].re - expected).abs() < 0.03,
            "mean coherence {} vs dephasing law {expected}",
            mean[(0, 1)].re
        );
        assert!(mean[(0, 1)].im.abs() < 0.03);
    }

    #[test]
    fn feedback_conjugation_rotates_by_the_recorded_signal() {
        for hbar in [1.0, 0.5] {
            let spec = ContinuousMeasurementSpec::new(
                vec![sigma_z()],
                DMatrix::from_element(1, 1, 1.0),
                Some(vec![sigma_x()]),
                hbar,
                1e-3,
            )
            .unwrap();
            let rho = DensityMatrix::new(
                CMat::from_row_slice(2, 2, &[c(1.0), c(0.0), c(0.0), c(0.0)]),
                qubit_grid(),
            )
            .unwrap();
            for s in [0.0, 0.3, 1.2, -0.7] {
                let signal = SignalIncrement {
                    values: DVector::from_element(1, s),
                };
                let rotated = feedback_conjugation_step(&spec, &rho, &signal).unwrap();
                let z = rotated.expectation(&sigma_z());
                assert_relative_eq!(z, (2.0 * s / hbar).cos(), epsilon = 1e-12);
                assert_relative_eq!(rotated.trace().re, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn composed_step_matches_the_analytic_expansion_at_order_dt() {
        let gamma = DMatrix::from_element(1, 1, 0.8);
        let rho = DensityMatrix::new(
            CMat::from_row_slice(
                2,
                2,
                &[c(0.6), C64::new(0.25, 0.1), C64::new(0.25, -0.1), c(0.4)],
            ),
            qubit_grid(),
        )
        .unwrap();
        let defect_at = |dt: f64| {
            let spec = ContinuousMeasurementSpec::new(
                vec![sigma_z()],
                gamma.clone(),
                Some(vec![sigma_x()]),
                1.0,
                dt,
            )
            .unwrap();
            let draws = 100;
            let (drift, diffusion) = analytic_feedback_generator(&spec, &rho).unwrap();
            let quadratic = composed_step_quadratic_terms(&spec, &rho).unwrap();
            let expectations = spec.expectations(&rho);
            let mut total = 0.0;
            for draw in 0..draws {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
                let (signal, stepped) = composed_feedback_step(&spec, &rho, &mut rng).unwrap();
                let dw = &signal.values - &expectations * dt;
                let mut predicted = rho.matrix() + drift.map(|z| z * c(dt));
                for (k, term) in diffusion.iter().enumerate() {
                    predicted += term.map(|z| z * c(dw[k]));
                }
                for (a, row) in quadratic.iter().enumerate() {
                    for (b, term) in row.iter().enumerate() {
                        let centered = dw[a] * dw[b] - spec.gamma_inv()[(a, b)] * dt;
                        predicted += term.map(|z| z * c(centered));
                    }
                }
                total += frobenius(&(stepped.matrix() - predicted));
            }
            total / draws as f64
        };
        let coarse = defect_at(2.5e-4);
        let fine = defect_at(1.25e-4);
        let ratio = coarse / fine;
        assert!(
            ratio >= 2.5,
            "halving dt only reduced the one-step defect by {ratio}"
        );
    }

    #[test]
    fn diagonal_and_dense_paths_agree() {
        let grid = GridSpec::new(4, 1.0, 1).unwrap();
        let o1 = DVector::from_vec(vec![0.3, -0.2, 1.1, 0.4]);
        let o2 = DVector::from_vec(vec![-0.5, 0.8, 0.1, -0.9]);
        let k1 = DVector::from_vec(vec![0.2, 0.7, -0.3, 0.5]);
        let k2 = DVector::from_vec(vec![-0.1, 0.4, 0.9, -0.6]);
        let gamma = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.9]);
        let dt = 1e-3;

        let diag_spec = ContinuousMeasurementSpec::with_diagonals(
            vec![o1.clone(), o2.clone()],
            gamma.clone(),
            Some(vec![k1.clone(), k2.clone()]),
            1.0,
            dt,
        )
        .unwrap();
        let to_dense = |d: &DVector<f64>| CMat::from_diagonal(&d.map(c));
        let dense_spec = ContinuousMeasurementSpec::new(
            vec![to_dense(&o1), to_dense(&o2)],
            gamma,
            Some(vec![to_dense(&k1), to_dense(&k2)]),
            1.0,
            dt,
        )
        .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let rho = DensityMatrix::random(grid, &mut rng);

        let mut rng_a = ChaCha8Rng::seed_from_u64(13);
        let mut rng_b = ChaCha8Rng::seed_from_u64(13);
        let (sig_a, rho_a) = composed_feedback_step(&diag_spec, &rho, &mut rng_a).unwrap();
        let (sig_b, rho_b) = composed_feedback_step(&dense_spec, &rho, &mut rng_b).unwrap();
        assert!((&sig_a.values - &sig_b.values).norm() < 1e-12);
        assert!(frobenius(&(rho_a.matrix() - rho_b.matrix())) < 1e-12);

        let (drift_a, diff_a) = analytic_feedback_generator(&diag_spec, &rho).unwrap();
        let (drift_b, diff_b) = analytic_feedback_generator(&dense_spec, &rho).unwrap();
        assert!(frobenius(&(drift_a - drift_b)) < 1e-11);
        for (a, b) in diff_a.iter().zip(diff_b.iter()) {
            assert!(frobenius(&(a - b)) < 1e-11);
        }
    }

    #[test]
    fn pure_potential_condition_detects_compatible_feedback() {
        let spec_ok = ContinuousMeasurementSpec::new(
            vec![sigma_z()],
            DMatrix::from_element(1, 1, 1.0),
            Some(vec![sigma_z().map(|z| z * c(0.4))]),
            1.0,
            1e-3,
        )
        .unwrap();
        let (residual, holds) = pure_potential_condition(&spec_ok).unwrap();
        assert!(holds, "σz feedback on σz measurement should be a pure potential");
        assert!(residual < 1e-12);

        let spec_bad = ContinuousMeasurementSpec::new(
            vec![sigma_z()],
            DMatrix::from_element(1, 1, 1.0),
            Some(vec![sigma_x()]),
            1.0,
            1e-3,
        )
        .unwrap();
        let (residual, holds) = pure_potential_condition(&spec_bad).unwrap();
        assert!(!holds);
        assert!(residual > 0.5);
    }

    #[test]
    fn compatible_feedback_drift_is_a_commutator_with_the_mean_potential() {
        let dim = 4;
        let grid = GridSpec::new(dim, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let o1 = DVector::from_fn(dim, |_, _| rng.gen::<f64>() - 0.5);
        let o2 = DVector::from_fn(dim, |_, _| rng.gen::<f64>() - 0.5);
        let coupling = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, 1.1]);
        let ops = vec![o1.clone(), o2.clone()];
        let mut fb = Vec::new();
        for j in 0..2 {
            let mut k = DVector::zeros(dim);
            for (m, om) in ops.iter().enumerate() {
                k += om * coupling[(j, m)];
            }
            fb.push(k);
        }
        let hbar = 0.7;
        let spec = ContinuousMeasurementSpec::with_diagonals(
            ops.clone(),
            DMatrix::from_row_slice(2, 2, &[1.3, 0.4, 0.4, 2.0]),
            Some(fb.clone()),
            hbar,
            1e-3,
        )
        .unwrap();
        let (residual, holds) = pure_potential_condition(&spec).unwrap();
        assert!(holds, "symmetric coupling should satisfy the condition, residual {residual}");

        let rho = DensityMatrix::random(grid, &mut rng);
        let to_dense = |d: &DVector<f64>| CMat::from_diagonal(&d.map(c));
        let mut cross = CMat::zeros(dim, dim);
        for j in 0..2 {
            let anti = linalg::anticommutator(&to_dense(&ops[j]), rho.matrix());
            cross += commutator(&to_dense(&fb[j]), &anti)
                .map(|z| z * (-I * c(1.0 / (2.0 * hbar))));
        }
        let mut mean_potential = CMat::zeros(dim, dim);
        for j in 0..2 {
            mean_potential += linalg::anticommutator(&to_dense(&ops[j]), &to_dense(&fb[j]))
                .map(|z| z * c(0.25));
        }
        let direct = commutator(&mean_potential, rho.matrix()).map(|z| z * (-I * c(1.0 / hbar)));
        assert!(
            frobenius(&(cross - direct)) < 1e-12,
            "feedback cross term is not the potential commutator"
        );
    }

    #[test]
    fn averaged_generator_is_linear_and_traceless() {
        let spec = ContinuousMeasurementSpec::new(
            vec![sigma_z(), sigma_x()],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
            Some(vec![sigma_x(), sigma_z()]),
            1.0,
            1e-3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let a = DensityMatrix::random(qubit_grid(), &mut rng);
        let b = DensityMatrix::random(qubit_grid(), &mut rng);
        let ga = averaged_feedback_generator(&spec, &a).unwrap();
        let gb = averaged_feedback_generator(&spec, &b).unwrap();
        assert!(linalg::trace(&ga).norm() < 1e-12);
        assert!(linalg::trace(&gb).norm() < 1e-12);

        let mixed = DensityMatrix::new_unchecked(
            a.matrix().map(|z| z * c(0.3)) + b.matrix().map(|z| z * c(0.7)),
            qubit_grid(),
        );
        let gm = averaged_feedback_generator(&spec, &mixed).unwrap();
        let combined = ga.map(|z| z * c(0.3)) + gb.map(|z| z * c(0.7));
        assert!(frobenius(&(gm - combined)) < 1e-12);
    }
}
