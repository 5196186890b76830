//! Continuous monitoring of the smeared mass density with gravitational
//! feedback.
//!
//! Every grid point carries its own measurement channel for the smeared mass
//! density at that point. A positive-definite noise kernel fixes how the
//! channels are correlated, and the recorded signals are fed back through the
//! regularized Newtonian potential so that matter is attracted toward the
//! measured mass distribution. Averaging the resulting trajectories gives a
//! completely positive generator that splits into a mean-field pair
//! potential, measurement decoherence, and feedback diffusion; the
//! gravitational choice of kernel is the unique one that balances the last
//! two contributions.
//!
//! Conventions: spatial sums carry the cell measure, Σⱼ f(xⱼ)·dx, so the
//! per-channel kernel entering the stochastic step is Γ̃ = Γ·dx² and the
//! feedback operators are Kⱼ = Φ̂(xⱼ)·dx.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhysicalConstants};
use crate::kernel::{exp_integral_e1, Coupling};
use crate::linalg::{c, commutator, unitary_from_hermitian, CMat, I};
use crate::measurement::{composed_feedback_step, ContinuousMeasurementSpec, SignalIncrement};
use crate::operators::{build_hamiltonian, MassDensity};
use crate::state::DensityMatrix;
use crate::trajectory::{SampleRequest, TrajectoryRecord};

/// Largest admissible condition number of a noise kernel. Inverting the
/// kernel is part of the feedback construction, so badly conditioned kernels
/// are refused instead of silently amplifying rounding noise.
pub const MAX_KERNEL_CONDITION: f64 = 1e12;

/// Dense dim × dim generator tables are only built up to this dimension.
pub const MAX_GENERATOR_DIM: usize = 1024;

/// Dense Hamiltonian propagation caps the trajectory model at this dimension.
pub const MAX_MODEL_DIM: usize = 2048;

/// Reciprocal-lattice copies summed when evaluating the periodized kernel
/// spectrum; the aliases decay like a Gaussian, so eight copies reach machine
/// precision for every accepted grid.
const ALIAS_IMAGES: i32 = 8;

const SYMMETRY_TOL: f64 = 1e-12;

/// Physical inputs shared by the continuous-monitoring constructions: the
/// coupling constants and masses, the smearing length, and the step size of
/// the stochastic integration.
#[derive(Clone, Debug)]
pub struct ContinuousParams {
    pub constants: PhysicalConstants,
    pub r_c: f64,
    pub dt: f64,
}

impl ContinuousParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_c.is_finite() && self.r_c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smearing length must be positive, got {}",
                self.r_c
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Table of the regularized Coulomb kernel periodized over the grid,
/// C_ij = Σ_w K(|x_i − x_j + wL|) with K(r) = erf(r/2r_c)/r.
///
/// The table is synthesized spectrally: the circulant eigenvalues are the
/// aliased Fourier transform λ_q = (1/dx)·Σ_m E₁((k_q + 2πm/dx)²r_c²), which
/// is positive for every mode, so the table is positive definite by
/// construction. The q = 0 eigenvalue of the periodized kernel diverges with
/// the box size; it is pinned to the smallest nonzero momentum instead, which
/// shifts the table by a constant. Mass differences carry no net monopole, so
/// the shift never reaches an observable.
pub fn periodic_coulomb_table(grid: GridSpec, r_c: f64) -> Result<DMatrix<f64>> {
    if !(r_c.is_finite() && r_c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "smearing length must be positive, got {r_c}"
        )));
    }
    let n = grid.points();
    let dx = grid.dx();
    let k_min = 2.0 * PI / grid.length();
    let reciprocal = 2.0 * PI / dx;
    let mut eigenvalues = vec![0.0; n];
    for (q, eigenvalue) in eigenvalues.iter_mut().enumerate() {
        let base = if q == 0 { k_min } else { grid.momentum(q) };
        let mut sum = 0.0;
        for image in -ALIAS_IMAGES..=ALIAS_IMAGES {
            let k = base + f64::from(image) * reciprocal;
            sum += exp_integral_e1((k * r_c).powi(2))?;
        }
        *eigenvalue = sum / dx;
    }
    let mut row = vec![0.0; n];
    for (s, entry) in row.iter_mut().enumerate().take(n / 2 + 1) {
        let angle = 2.0 * PI * s as f64 / n as f64;
        let mut sum = 0.0;
        for (q, eigenvalue) in eigenvalues.iter().enumerate() {
            sum += eigenvalue * (angle * q as f64).cos();
        }
        *entry = sum / n as f64;
    }
    for s in n / 2 + 1..n {
        row[s] = row[n - s];
    }
    Ok(DMatrix::from_fn(n, n, |i, j| row[(i + n - j) % n]))
}

/// Symmetric positive-definite correlation kernel of the measurement
/// channels, together with its inverse and condition number.
#[derive(Clone, Debug)]
pub struct NoiseKernel {
    grid: GridSpec,
    label: String,
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
    condition: f64,
}

impl NoiseKernel {
    /// Uncorrelated channels with strength 4γ/m_n² per unit length:
    /// Γ_ij = 4γ/(m_n²·dx)·δ_ij. The inverse is exact and the condition
    /// number is one.
    pub fn csl(grid: GridSpec, gamma: f64, m_n: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "collapse rate must be positive, got {gamma}"
            )));
        }
        if !(m_n.is_finite() && m_n > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "reference mass must be positive, got {m_n}"
            )));
        }
        let n = grid.points();
        let value = 4.0 * gamma / (m_n * m_n * grid.dx());
        let matrix = DMatrix::from_diagonal(&DVector::from_element(n, value));
        let inverse = DMatrix::from_diagonal(&DVector::from_element(n, 1.0 / value));
        Ok(Self {
            grid,
            label: "local".into(),
            matrix,
            inverse,
            condition: 1.0,
        })
    }

    /// Gravitationally correlated channels, Γ = (2G/ħ)·C with C the
    /// periodized regularized Coulomb table. Requires a strictly positive
    /// gravitational coupling.
    pub fn dp(grid: GridSpec, r_c: f64, coupling: &Coupling) -> Result<Self> {
        if coupling.g <= 0.0 {
            return Err(Error::InvalidParameter(
                "gravitational kernel needs a positive coupling".into(),
            ));
        }
        let matrix = periodic_coulomb_table(grid, r_c)? * (2.0 * coupling.g / coupling.hbar);
        Self::validated(grid, "gravitational", matrix)
    }

    /// A caller-supplied kernel; validated for symmetry, positivity, and
    /// conditioning like the built-in ones.
    pub fn custom(grid: GridSpec, label: impl Into<String>, matrix: DMatrix<f64>) -> Result<Self> {
        Self::validated(grid, label, matrix)
    }

    fn validated(grid: GridSpec, label: impl Into<String>, matrix: DMatrix<f64>) -> Result<Self> {
        let n = grid.points();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "kernel is {}×{}, grid has {n} points",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = matrix.abs().max().max(1.0);
        let asymmetry = (&matrix - matrix.transpose()).abs().max();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(Error::MatrixProperty {
                property: "symmetric",
                residual: asymmetry,
                tolerance: SYMMETRY_TOL * scale,
            });
        }
        let eigen = matrix.clone().symmetric_eigen();
        let min_eig = eigen.eigenvalues.min();
        if min_eig <= 0.0 {
            return Err(Error::KernelNotPositive { min_eig });
        }
        let condition = eigen.eigenvalues.max() / min_eig;
        if condition > MAX_KERNEL_CONDITION {
            return Err(Error::IllConditioned {
                cond: condition,
                limit: MAX_KERNEL_CONDITION,
            });
        }
        let scaled = DMatrix::from_fn(n, n, |i, j| {
            eigen.eigenvectors[(i, j)] / eigen.eigenvalues[j]
        });
        let inverse = &scaled * eigen.eigenvectors.transpose();
        Ok(Self {
            grid,
            label: label.into(),
            matrix,
            inverse,
            condition,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }
}

/// Monitoring of the smeared mass density at every grid point with the given
/// noise kernel. The measured operators are the density diagonals M̂(xⱼ) and
/// the per-channel kernel absorbs the cell measure, Γ̃ = Γ·dx².
pub fn build_mass_measurement_spec(
    grid: GridSpec,
    params: &ContinuousParams,
    kernel: &NoiseKernel,
) -> Result<ContinuousMeasurementSpec> {
    params.validate()?;
    if kernel.grid.points() != grid.points() || kernel.grid.dx() != grid.dx() {
        return Err(Error::DimensionMismatch(format!(
            "kernel was built for {} points at dx = {}, grid has {} at dx = {}",
            kernel.grid.points(),
            kernel.grid.dx(),
            grid.points(),
            grid.dx()
        )));
    }
    let density = MassDensity::smeared(grid, &params.constants, params.r_c)?;
    let dx = grid.dx();
    let gamma = kernel.matrix() * (dx * dx);
    ContinuousMeasurementSpec::with_diagonals(
        density.diagonals().to_vec(),
        gamma,
        None,
        params.constants.hbar(),
        params.dt,
    )
}

/// Decoherence rate of a configuration pair, split into the measurement
/// contribution and the feedback contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoherenceRates {
    pub measurement: f64,
    pub feedback: f64,
}

impl DecoherenceRates {
    pub fn total(&self) -> f64 {
        self.measurement + self.feedback
    }
}

/// Mass-density monitoring combined with feedback through the regularized
/// Newtonian potential: Kⱼ = Φ̂(xⱼ)·dx with Φ̂ = −G·(C ⋆ M̂). All tables are
/// diagonal in the position basis and stored as dim × n_points matrices, so
/// the averaged generator is available entry by entry without ever forming a
/// dense dim × dim operator.
#[derive(Clone, Debug)]
pub struct GravitationalFeedbackSpec {
    grid: GridSpec,
    params: ContinuousParams,
    gamma: DMatrix<f64>,
    coulomb: DMatrix<f64>,
    ops: DMatrix<f64>,
    k_ops: DMatrix<f64>,
    y_meas: DMatrix<f64>,
    y_fb: DMatrix<f64>,
    q_meas_diag: DVector<f64>,
    q_fb_diag: DVector<f64>,
    potential: DVector<f64>,
}

/// Attach gravitational feedback to a mass-density monitoring spec. The
/// feedback operators are built from the periodized Coulomb table regardless
/// of which noise kernel drives the measurement; the two only balance for
/// the gravitational kernel.
pub fn build_feedback_spec(
    grid: GridSpec,
    monitor: &ContinuousMeasurementSpec,
    params: &ContinuousParams,
) -> Result<GravitationalFeedbackSpec> {
    params.validate()?;
    if monitor.dim() != grid.dim() || monitor.n_operators() != grid.points() {
        return Err(Error::DimensionMismatch(format!(
            "monitor covers dim {} with {} channels, grid has dim {} with {} points",
            monitor.dim(),
            monitor.n_operators(),
            grid.dim(),
            grid.points()
        )));
    }
    if monitor.has_feedback() {
        return Err(Error::InvalidParameter(
            "monitor already carries feedback operators".into(),
        ));
    }
    let hbar = params.constants.hbar();
    if (monitor.hbar() - hbar).abs() > 1e-12 * hbar || (monitor.dt() - params.dt).abs() > 1e-12 * params.dt {
        return Err(Error::InvalidParameter(
            "monitor was built with different ħ or dt than these parameters".into(),
        ));
    }
    let ops = monitor
        .operator_diagonals()
        .ok_or_else(|| {
            Error::InvalidParameter(
                "feedback construction needs a diagonal-operator monitor".into(),
            )
        })?
        .clone();
    let coulomb = periodic_coulomb_table(grid, params.r_c)?;
    let dx = grid.dx();
    let k_ops = &ops * &coulomb * (-params.constants.g() * dx * dx);
    let gamma = monitor.gamma().clone();
    let y_meas = &ops * &gamma;
    let y_fb = &k_ops * monitor.gamma_inv();
    let dim = ops.nrows();
    let q_meas_diag = DVector::from_fn(dim, |a, _| y_meas.row(a).dot(&ops.row(a)));
    let q_fb_diag = DVector::from_fn(dim, |a, _| y_fb.row(a).dot(&k_ops.row(a)));
    let potential = DVector::from_fn(dim, |a, _| 0.5 * ops.row(a).dot(&k_ops.row(a)));
    Ok(GravitationalFeedbackSpec {
        grid,
        params: params.clone(),
        gamma,
        coulomb,
        ops,
        k_ops,
        y_meas,
        y_fb,
        q_meas_diag,
        q_fb_diag,
        potential,
    })
}

impl GravitationalFeedbackSpec {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn params(&self) -> &ContinuousParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.ops.nrows()
    }

    pub fn n_points(&self) -> usize {
        self.ops.ncols()
    }

    /// Measured-operator diagonals, one column per grid point.
    pub fn operator_diagonals(&self) -> &DMatrix<f64> {
        &self.ops
    }

    /// Feedback-operator diagonals Kⱼ = Φ̂(xⱼ)·dx, one column per grid point.
    pub fn feedback_diagonals(&self) -> &DMatrix<f64> {
        &self.k_ops
    }

    /// Diagonal of the mean-field potential V̂ = (1/4)Σⱼ{M̂ⱼ, Kⱼ}, the
    /// regularized Newtonian pair interaction including self terms.
    pub fn potential_diagonal(&self) -> &DVector<f64> {
        &self.potential
    }

    /// The periodized Coulomb table the feedback was built from.
    pub fn coulomb_table(&self) -> &DMatrix<f64> {
        &self.coulomb
    }

    /// Measurement and feedback decoherence rates of a configuration pair:
    /// measurement = (1/8)·ΔMᵀ Γ̃ ΔM and feedback = (1/2ħ²)·ΔKᵀ Γ̃⁻¹ ΔK with
    /// ΔM, ΔK the operator differences between the two configurations.
    pub fn rates_by_index(&self, a: usize, b: usize) -> DecoherenceRates {
        let q_meas = self.y_meas.row(a).dot(&self.ops.row(b));
        let measurement = (self.q_meas_diag[a] + self.q_meas_diag[b] - 2.0 * q_meas) / 8.0;
        let q_fb = self.y_fb.row(a).dot(&self.k_ops.row(b));
        let hbar = self.params.constants.hbar();
        let feedback = (self.q_fb_diag[a] + self.q_fb_diag[b] - 2.0 * q_fb) / (2.0 * hbar * hbar);
        DecoherenceRates {
            measurement,
            feedback,
        }
    }

    /// Entry (a, b) of the averaged generator in the position basis:
    /// coefficient·ρ_ab with coefficient = −(i/ħ)(v_a − v_b) minus the two
    /// decoherence rates.
    pub fn generator_coefficient(&self, a: usize, b: usize) -> crate::linalg::C64 {
        let rates = self.rates_by_index(a, b);
        let hbar = self.params.constants.hbar();
        -I * c((self.potential[a] - self.potential[b]) / hbar) - c(rates.total())
    }

    /// The feedback-inclusive measurement spec that drives stochastic steps.
    pub fn measurement_spec(&self) -> Result<ContinuousMeasurementSpec> {
        let n = self.n_points();
        let diagonals: Vec<DVector<f64>> = (0..n).map(|j| self.ops.column(j).clone_owned()).collect();
        let feedback: Vec<DVector<f64>> =
            (0..n).map(|j| self.k_ops.column(j).clone_owned()).collect();
        ContinuousMeasurementSpec::with_diagonals(
            diagonals,
            self.gamma.clone(),
            Some(feedback),
            self.params.constants.hbar(),
            self.params.dt,
        )
    }
}

/// Decoherence rates between two localized configurations given by their
/// per-particle cell indices.
pub fn decoherence_rates(
    spec: &GravitationalFeedbackSpec,
    cells_a: &[usize],
    cells_b: &[usize],
) -> Result<DecoherenceRates> {
    let grid = spec.grid;
    for cells in [cells_a, cells_b] {
        if cells.len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for {} particles",
                cells.len(),
                grid.particles()
            )));
        }
        if let Some(&bad) = cells.iter().find(|&&i| i >= grid.points()) {
            return Err(Error::InvalidParameter(format!(
                "cell {bad} outside the {}-point grid",
                grid.points()
            )));
        }
    }
    Ok(spec.rates_by_index(grid.config_index(cells_a), grid.config_index(cells_b)))
}

/// The averaged generator evaluated at a state, split into its three parts:
/// unitary mean-field potential, measurement decoherence, and feedback
/// diffusion. Each part is a dim × dim matrix.
#[derive(Clone, Debug)]
pub struct GravityGeneratorTerms {
    pub potential: CMat,
    pub measurement: CMat,
    pub feedback: CMat,
}

impl GravityGeneratorTerms {
    pub fn total(&self) -> CMat {
        &self.potential + &self.measurement + &self.feedback
    }
}

/// Evaluate the three averaged-generator terms at ρ. Dense output, capped at
/// [`MAX_GENERATOR_DIM`].
pub fn averaged_gravity_generator(
    spec: &GravitationalFeedbackSpec,
    rho: &DensityMatrix,
) -> Result<GravityGeneratorTerms> {
    let dim = spec.dim();
    if rho.dim() != dim {
        return Err(Error::DimensionMismatch(format!(
            "state dim {} vs spec dim {dim}",
            rho.dim()
        )));
    }
    if dim > MAX_GENERATOR_DIM {
        return Err(Error::DimensionCap {
            requested: dim,
            points: spec.grid.points(),
            particles: spec.grid.particles(),
            cap: MAX_GENERATOR_DIM,
        });
    }
    let hbar = spec.params.constants.hbar();
    let mut potential = CMat::zeros(dim, dim);
    let mut measurement = CMat::zeros(dim, dim);
    let mut feedback = CMat::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            let entry = rho.matrix()[(a, b)];
            let rates = spec.rates_by_index(a, b);
            potential[(a, b)] = -I * c((spec.potential[a] - spec.potential[b]) / hbar) * entry;
            measurement[(a, b)] = -c(rates.measurement) * entry;
            feedback[(a, b)] = -c(rates.feedback) * entry;
        }
    }
    Ok(GravityGeneratorTerms {
        potential,
        measurement,
        feedback,
    })
}

/// Apply the full averaged generator to an arbitrary matrix, entry by entry.
/// Linear in the input, so it can serve as the generator of a reference
/// integration or a channel construction.
pub fn averaged_generator_matrix(spec: &GravitationalFeedbackSpec, m: &CMat) -> CMat {
    CMat::from_fn(m.nrows(), m.ncols(), |a, b| {
        spec.generator_coefficient(a, b) * m[(a, b)]
    })
}

/// Trajectory model for monitored gravity: each step composes the stochastic
/// measurement-plus-feedback update with the exact free propagator over one
/// dt.
pub struct ContinuousModel {
    feedback: GravitationalFeedbackSpec,
    measurement: ContinuousMeasurementSpec,
    hamiltonian: CMat,
    propagator: CMat,
}

impl ContinuousModel {
    pub fn new(feedback: GravitationalFeedbackSpec) -> Result<Self> {
        let grid = feedback.grid();
        let dim = grid.dim();
        if dim > MAX_MODEL_DIM {
            return Err(Error::DimensionCap {
                requested: dim,
                points: grid.points(),
                particles: grid.particles(),
                cap: MAX_MODEL_DIM,
            });
        }
        let measurement = feedback.measurement_spec()?;
        let hamiltonian = build_hamiltonian(grid, &feedback.params.constants, None)?;
        let theta = feedback.params.dt / feedback.params.constants.hbar();
        let propagator = unitary_from_hermitian(&hamiltonian, theta);
        Ok(Self {
            feedback,
            measurement,
            hamiltonian,
            propagator,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.feedback.grid()
    }

    pub fn params(&self) -> &ContinuousParams {
        &self.feedback.params
    }

    pub fn feedback_spec(&self) -> &GravitationalFeedbackSpec {
        &self.feedback
    }

    pub fn measurement_spec(&self) -> &ContinuousMeasurementSpec {
        &self.measurement
    }

    pub fn hamiltonian(&self) -> &CMat {
        &self.hamiltonian
    }

    /// One stochastic step: measurement backaction, feedback conjugation,
    /// then the free propagator.
    pub fn step<R: Rng + ?Sized>(
        &self,
        rho: &DensityMatrix,
        rng: &mut R,
    ) -> Result<(SignalIncrement, DensityMatrix)> {
        let (signal, kicked) = composed_feedback_step(&self.measurement, rho, rng)?;
        let rotated = &self.propagator * kicked.matrix() * self.propagator.adjoint();
        Ok((signal, DensityMatrix::new_unchecked(rotated, self.grid())))
    }

    /// The deterministic generator the trajectory average converges to:
    /// free evolution plus the averaged monitoring terms.
    pub fn master_generator(&self, m: &CMat) -> CMat {
        let hbar = self.feedback.params.constants.hbar();
        let mut out = averaged_generator_matrix(&self.feedback, m);
        out += commutator(&self.hamiltonian, m) * (-I * c(1.0 / hbar));
        out
    }

    /// Run one trajectory, sampling at the requested times. Sample times
    /// must be whole multiples of dt.
    pub fn evolve_trajectory<R: Rng + ?Sized>(
        &self,
        initial: &DensityMatrix,
        request: &SampleRequest,
        rng: &mut R,
        stream: u64,
    ) -> Result<TrajectoryRecord> {
        request.validate()?;
        if initial.dim() != self.grid().dim() {
            return Err(Error::DimensionMismatch(
                "initial state does not live on the model grid".into(),
            ));
        }
        let dt = self.feedback.params.dt;
        let mut rho = DensityMatrix::new_unchecked(initial.matrix().clone(), self.grid());
        let mut done: u64 = 0;
        let mut observables: Vec<(String, Vec<f64>)> = request
            .observables
            .iter()
            .map(|(name, _)| (name.clone(), Vec::with_capacity(request.times.len())))
            .collect();
        let mut states = Vec::new();
        for &ts in &request.times {
            let target = (ts / dt).round();
            if (ts - target * dt).abs() > 1e-9 * dt.max(ts.abs()) {
                return Err(Error::InvalidParameter(format!(
                    "sample time {ts} is not a whole number of steps of dt = {dt}"
                )));
            }
            let target = target as u64;
            while done < target {
                let (_, next) = self.step(&rho, rng)?;
                rho = next;
                done += 1;
            }
            for (slot, (_, obs)) in observables.iter_mut().zip(request.observables.iter()) {
                slot.1.push(obs.expectation_state(&rho));
            }
            if request.keep_states {
                states.push(rho.clone());
            }
        }
        Ok(TrajectoryRecord {
            times: request.times.clone(),
            observables,
            states,
            flashes: Vec::new(),
            stream,
        })
    }
}

/// Adapter that runs monitored-gravity trajectories from a fixed initial
/// state.
pub struct ContinuousSource<'a> {
    pub model: &'a ContinuousModel,
    pub initial: DensityMatrix,
}

impl crate::ensemble::TrajectoryModel for ContinuousSource<'_> {
    fn grid(&self) -> GridSpec {
        self.model.grid()
    }

    fn run_trajectory(
        &self,
        rng: &mut rand_chacha::ChaCha8Rng,
        stream: u64,
        request: &SampleRequest,
    ) -> Result<TrajectoryRecord> {
        self.model.evolve_trajectory(&self.initial, request, rng, stream)
    }
}
