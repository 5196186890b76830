//! Mean-field self-gravitating Schrödinger dynamics on the periodic grid.
//!
//! Every particle moves in the Newtonian potential sourced by the position
//! marginals of all particles, its own included. With cell probabilities
//! q_ℓ and the regularized kernel K, the shared axis field is
//!
//! φ(x) = −G · Σ_ℓ m_ℓ · Σ_y K(x, y) · q_ℓ(y),
//!
//! and the configuration-space diagonal is V(x₁..x_P) = Σ_ℓ m_ℓ·φ(x_ℓ).
//! The flow iħ∂ψ = (T + V[ψ])ψ preserves the norm but is nonlinear: a
//! superposition evolves differently from the superposition of evolved
//! branches, because each branch sources its own field.
//!
//! Integration is a symmetric split step: half a kinetic step applied
//! spectrally per particle axis, one full potential phase with the field
//! rebuilt from the current probabilities, then the second kinetic half.
//! The potential factor only rotates phases, so the probabilities it is
//! built from are exactly the midpoint ones and the scheme is second
//! order in the step size.
//!
//! The conserved energy is E[ψ] = ⟨T⟩ + ½·⟨V[ψ]⟩. The half removes a
//! double count: ⟨V[ψ]⟩ equals twice the quadratic form
//! W = −(G/2)·Σ_{ℓℓ'} m_ℓ m_{ℓ'} q_ℓᵀ K q_{ℓ'}, and the rate Ẇ moves q̇
//! through one slot of the symmetric form, which is the same as changing
//! ⟨V⟩ through the state alone at frozen field, (i/ħ)⟨[T, V]⟩. That
//! cancels the kinetic rate (i/ħ)⟨[V, T]⟩ exactly, so dE/dt = 0; without
//! the half the two rates differ by a factor of two and E drifts.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhysicalConstants};
use crate::linalg::{c, CVec, I};
use crate::operators::regularized_coulomb_table;
use crate::state::WaveFunction;
use crate::trajectory::{SampleRequest, TrajectoryRecord};

/// Relative slack when checking that a time is a whole number of steps.
const TIME_ALIGNMENT_TOL: f64 = 1e-9;

/// Parameters of the self-gravitating flow: physical constants, the
/// smearing length of the mass density, and the integrator step.
#[derive(Debug, Clone)]
pub struct SNParams {
    pub constants: PhysicalConstants,
    pub r_c: f64,
    pub dt: f64,
}

impl SNParams {
    /// Checks the parameters against a grid they are meant to act on.
    pub fn validate(&self, grid: GridSpec) -> Result<()> {
        if self.constants.masses().len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} masses for {} particles",
                self.constants.masses().len(),
                grid.particles()
            )));
        }
        if !(self.r_c.is_finite() && self.r_c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smearing length must be > 0, got {}",
                self.r_c
            )));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "step size must be > 0, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Number of whole steps of size `dt` that make up `t`, requiring the
/// division to be exact within [`TIME_ALIGNMENT_TOL`].
fn whole_steps(t: f64, dt: f64) -> Result<usize> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "evolution time must be ≥ 0, got {t}"
        )));
    }
    let steps = (t / dt).round();
    if (steps * dt - t).abs() > TIME_ALIGNMENT_TOL * dt.max(t.abs()) {
        return Err(Error::InvalidParameter(format!(
            "time {t} is not a whole number of steps of size {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Position marginals of a configuration-space state: one vector of cell
/// probabilities per particle, each summing to the squared norm.
pub fn marginal_probabilities(psi: &WaveFunction) -> Vec<DVector<f64>> {
    let grid = psi.grid();
    let n = grid.points();
    let probs = psi.probabilities();
    let mut out = vec![DVector::zeros(n); grid.particles()];
    for (idx, &q) in probs.iter().enumerate() {
        for (l, marginal) in out.iter_mut().enumerate() {
            marginal[grid.particle_cell(idx, l)] += q;
        }
    }
    out
}

/// Mean-field potential energy as a configuration-space diagonal:
/// V(x₁..x_P) = Σ_ℓ m_ℓ·φ(x_ℓ) with the axis field φ built from the
/// regularized Coulomb table and the state's own mass marginals. For a
/// point-like single particle this reduces to −G·m²·K(x, x₀).
pub fn sn_potential(psi: &WaveFunction, params: &SNParams) -> Result<DVector<f64>> {
    let grid = psi.grid();
    params.validate(grid)?;
    let table = regularized_coulomb_table(grid, params.r_c)?;
    let marginals = marginal_probabilities(psi);
    Ok(potential_from_marginals(grid, params, &table, &marginals))
}

/// Shared axis field −G·Σ_ℓ m_ℓ·(K·q_ℓ), then lifted to the
/// configuration diagonal with the test-particle masses.
fn potential_from_marginals(
    grid: GridSpec,
    params: &SNParams,
    table: &DMatrix<f64>,
    marginals: &[DVector<f64>],
) -> DVector<f64> {
    let n = grid.points();
    let mut mass_density = DVector::zeros(n);
    for (l, q) in marginals.iter().enumerate() {
        mass_density.axpy(params.constants.mass(l), q, 1.0);
    }
    let field = table * mass_density * (-params.constants.g());
    DVector::from_iterator(
        grid.dim(),
        (0..grid.dim()).map(|idx| {
            (0..grid.particles())
                .map(|l| params.constants.mass(l) * field[grid.particle_cell(idx, l)])
                .sum()
        }),
    )
}

/// Total energy E[ψ] = ⟨T⟩ + ½·⟨V[ψ]⟩, conserved by the flow. The half
/// compensates the double count in the state-sourced potential; see the
/// module docs for the cancellation.
pub fn sn_energy(psi: &WaveFunction, params: &SNParams) -> Result<f64> {
    let grid = psi.grid();
    params.validate(grid)?;
    let mut stepper = SplitStepper::new(grid, params)?;
    let mut amplitudes = psi.amplitudes().clone();
    let kinetic = stepper.kinetic_expectation(&mut amplitudes) * grid.measure();
    let potential = psi.expectation_diagonal(&sn_potential(psi, params)?);
    Ok(kinetic + 0.5 * potential)
}

/// Evolves a state for `t_final` with the split-step integrator and
/// returns the final wavefunction. `t_final` must be a whole number of
/// steps of `params.dt`.
pub fn evolve_sn(psi0: &WaveFunction, t_final: f64, params: &SNParams) -> Result<WaveFunction> {
    let grid = psi0.grid();
    params.validate(grid)?;
    let steps = whole_steps(t_final, params.dt)?;
    let mut stepper = SplitStepper::new(grid, params)?;
    let mut amplitudes = psi0.amplitudes().clone();
    for _ in 0..steps {
        stepper.step(&mut amplitudes);
    }
    WaveFunction::from_amplitudes(grid, amplitudes)
}

/// Evolves a state and samples the requested observables, keeping pure
/// snapshots as density matrices when asked. All sample times must be
/// whole numbers of steps.
pub fn evolve_sn_record(
    psi0: &WaveFunction,
    params: &SNParams,
    request: &SampleRequest,
) -> Result<TrajectoryRecord> {
    let grid = psi0.grid();
    params.validate(grid)?;
    request.validate()?;
    for (name, obs) in &request.observables {
        if obs.dim() != grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "observable {name} has dimension {}, grid has {}",
                obs.dim(),
                grid.dim()
            )));
        }
    }
    let step_targets: Vec<usize> = request
        .times
        .iter()
        .map(|&t| whole_steps(t, params.dt))
        .collect::<Result<_>>()?;

    let mut stepper = SplitStepper::new(grid, params)?;
    let mut amplitudes = psi0.amplitudes().clone();
    let mut record = TrajectoryRecord {
        times: request.times.clone(),
        observables: request
            .observables
            .iter()
            .map(|(name, _)| (name.clone(), Vec::with_capacity(request.times.len())))
            .collect(),
        states: Vec::new(),
        flashes: Vec::new(),
        stream: 0,
    };
    let mut done = 0usize;
    for (sample, &target) in step_targets.iter().enumerate() {
        while done < target {
            stepper.step(&mut amplitudes);
            done += 1;
        }
        let psi = WaveFunction::from_amplitudes(grid, amplitudes.clone())?;
        for (slot, (_, obs)) in record.observables.iter_mut().zip(&request.observables) {
            slot.1.push(obs.expectation_wavefunction(&psi));
        }
        if request.keep_states {
            record.states.push(psi.density_matrix());
        }
        let _ = sample;
    }
    Ok(record)
}

/// Split-step workhorse: spectral kinetic phases per particle axis and a
/// state-sourced potential phase, sharing FFT plans and the kernel table.
struct SplitStepper {
    grid: GridSpec,
    masses: Vec<f64>,
    g: f64,
    hbar: f64,
    dt: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Kinetic mode energies ħ²k²/2m per particle, matching the dense
    /// kinetic matrix including the signed Nyquist mode.
    mode_energies: Vec<Vec<f64>>,
    /// Half-step kinetic phases e^{−i·E·dt/2ħ} per particle and mode.
    half_phases: Vec<Vec<Complex64>>,
    table: DMatrix<f64>,
    axis_scratch: Vec<Complex64>,
}

impl SplitStepper {
    fn new(grid: GridSpec, params: &SNParams) -> Result<Self> {
        let n = grid.points();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let constants = &params.constants;
        let mode_energies: Vec<Vec<f64>> = (0..grid.particles())
            .map(|l| {
                (0..n)
                    .map(|j| {
                        let k = grid.momentum(j);
                        constants.hbar() * constants.hbar() * k * k / (2.0 * constants.mass(l))
                    })
                    .collect()
            })
            .collect();
        let half_phases = mode_energies
            .iter()
            .map(|energies| {
                energies
                    .iter()
                    .map(|&e| (-I * c(e * params.dt / (2.0 * constants.hbar()))).exp())
                    .collect()
            })
            .collect();
        Ok(Self {
            grid,
            masses: constants.masses().to_vec(),
            g: constants.g(),
            hbar: constants.hbar(),
            dt: params.dt,
            forward,
            inverse,
            mode_energies,
            half_phases,
            table: regularized_coulomb_table(grid, params.r_c)?,
            axis_scratch: vec![Complex64::new(0.0, 0.0); n],
        })
    }

    /// Applies f to the spectral coefficients along one particle axis,
    /// leaving the state in the position representation (the unnormalized
    /// round trip is rescaled by 1/n).
    fn on_axis_modes<F: FnMut(usize, &mut [Complex64])>(
        &mut self,
        psi: &mut CVec,
        particle: usize,
        mut f: F,
    ) {
        let n = self.grid.points();
        let p = self.grid.particles();
        let stride = n.pow((p - 1 - particle) as u32);
        let group = stride * n;
        let inv_n = 1.0 / n as f64;
        for base in (0..psi.len()).step_by(group) {
            for offset in 0..stride {
                for j in 0..n {
                    self.axis_scratch[j] = psi[base + offset + j * stride];
                }
                self.forward.process(&mut self.axis_scratch);
                f(particle, &mut self.axis_scratch);
                self.inverse.process(&mut self.axis_scratch);
                for j in 0..n {
                    psi[base + offset + j * stride] = self.axis_scratch[j] * inv_n;
                }
            }
        }
    }

    fn kinetic_half(&mut self, psi: &mut CVec) {
        for l in 0..self.grid.particles() {
            let phases = self.half_phases[l].clone();
            self.on_axis_modes(psi, l, |_, modes| {
                for (m, phase) in modes.iter_mut().zip(&phases) {
                    *m *= phase;
                }
            });
        }
    }

    /// Potential phase for a full step, with the field rebuilt from the
    /// current probabilities.
    fn potential_full(&mut self, psi: &mut CVec) {
        let n = self.grid.points();
        let measure = self.grid.measure();
        let mut mass_density = DVector::zeros(n);
        for (idx, amp) in psi.iter().enumerate() {
            let q = amp.norm_sqr() * measure;
            for (l, &m) in self.masses.iter().enumerate() {
                mass_density[self.grid.particle_cell(idx, l)] += m * q;
            }
        }
        let field = &self.table * mass_density * (-self.g);
        for (idx, amp) in psi.iter_mut().enumerate() {
            let v: f64 = self
                .masses
                .iter()
                .enumerate()
                .map(|(l, &m)| m * field[self.grid.particle_cell(idx, l)])
                .sum();
            *amp *= (-I * c(v * self.dt / self.hbar)).exp();
        }
    }

    fn step(&mut self, psi: &mut CVec) {
        self.kinetic_half(psi);
        self.potential_full(psi);
        self.kinetic_half(psi);
    }

    /// ⟨T⟩ per unit measure via mode occupations, Σ_axes Σ_j E_j·|ψ̃_j|²/n.
    fn kinetic_expectation(&mut self, psi: &mut CVec) -> f64 {
        let n = self.grid.points();
        let mut total = 0.0;
        for l in 0..self.grid.particles() {
            let energies = self.mode_energies[l].clone();
            let mut axis = 0.0;
            self.on_axis_modes(psi, l, |_, modes| {
                for (j, m) in modes.iter().enumerate() {
                    axis += energies[j] * m.norm_sqr();
                }
            });
            total += axis / n as f64;
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unitary_from_hermitian;
    use crate::operators::build_hamiltonian;
    use crate::trajectory::Observable;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constants(masses: &[f64], g: f64) -> PhysicalConstants {
        PhysicalConstants::new(g, 1.0, masses.to_vec()).unwrap()
    }

    fn params(masses: &[f64], g: f64, r_c: f64, dt: f64) -> SNParams {
        SNParams {
            constants: constants(masses, g),
            r_c,
            dt,
        }
    }

    /// Hand-evaluated doubly-smeared kernel over the minimum image.
    fn kernel_oracle(delta: f64, length: f64, r_c: f64) -> f64 {
        let r = delta.abs().min(length - delta.abs());
        if r == 0.0 {
            1.0 / (std::f64::consts::PI.sqrt() * r_c)
        } else {
            libm::erf(r / (2.0 * r_c)) / r
        }
    }

    /// Twice the RMS distance from `center`: for two symmetric blobs this
    /// tracks their separation and grows with pure dispersion.
    fn rms_separation(psi: &WaveFunction, center: f64) -> f64 {
        let grid = psi.grid();
        let d = DVector::from_iterator(
            grid.dim(),
            (0..grid.dim()).map(|i| {
                let r = grid.position(grid.particle_cell(i, 0)) - center;
                r * r
            }),
        );
        2.0 * psi.expectation_diagonal(&d).sqrt()
    }

    #[test]
    fn zero_coupling_gives_zero_field() {
        let grid = GridSpec::new(32, 1.0, 1).unwrap();
        let psi = WaveFunction::gaussian_packet(grid, 16.0, 2.0, 0.3).unwrap();
        let free = sn_potential(&psi, &params(&[5.0], 0.0, 1.0, 0.01)).unwrap();
        assert!(free.iter().all(|&v| v == 0.0));

        let bound = sn_potential(&psi, &params(&[5.0], 0.4, 1.0, 0.01)).unwrap();
        assert!(bound.iter().all(|&v| v < 0.0));
    }

    #[test]
    fn point_source_reproduces_the_regularized_kernel() {
        let grid = GridSpec::new(48, 0.75, 1).unwrap();
        let (mass, g, r_c) = (2.3, 0.7, 1.1);
        let psi = WaveFunction::position_eigenstate(grid, &[13]).unwrap();
        let field = sn_potential(&psi, &params(&[mass], g, r_c, 0.01)).unwrap();
        for a in 0..grid.points() {
            let delta = grid.position(a) - grid.position(13);
            let expected = -g * mass * mass * kernel_oracle(delta, grid.length(), r_c);
            assert!(
                (field[a] - expected).abs() <= 1e-12 * expected.abs(),
                "cell {a}: field {} vs oracle {expected}",
                field[a]
            );
        }
    }

    #[test]
    fn field_translates_with_the_state() {
        let grid = GridSpec::new(24, 1.0, 1).unwrap();
        let p = params(&[3.0], 0.5, 1.0, 0.01);
        let psi = WaveFunction::gaussian_packet(grid, 9.0, 1.7, 0.2).unwrap();
        let field = sn_potential(&psi, &p).unwrap();

        let n = grid.points();
        let shifted_amps = CVec::from_iterator(
            n,
            (0..n).map(|i| psi.amplitudes()[(i + n - 1) % n]),
        );
        let shifted = WaveFunction::from_amplitudes(grid, shifted_amps).unwrap();
        let shifted_field = sn_potential(&shifted, &p).unwrap();
        for a in 0..n {
            assert!((shifted_field[a] - field[(a + n - 1) % n]).abs() <= 1e-12);
        }

        let two = GridSpec::new(12, 1.0, 2).unwrap();
        let p2 = params(&[3.0, 1.5], 0.5, 1.0, 0.01);
        let pair = WaveFunction::product(
            two,
            &[
                WaveFunction::gaussian_packet(two.subgrid(1).unwrap(), 4.0, 1.2, 0.0).unwrap(),
                WaveFunction::gaussian_packet(two.subgrid(1).unwrap(), 8.0, 1.2, 0.0).unwrap(),
            ],
        )
        .unwrap();
        let pair_field = sn_potential(&pair, &p2).unwrap();
        let m = two.points();
        let rolled_amps = CVec::from_iterator(
            two.dim(),
            (0..two.dim()).map(|idx| {
                let (i, j) = (idx / m, idx % m);
                pair.amplitudes()[((i + m - 1) % m) * m + (j + m - 1) % m]
            }),
        );
        let rolled = WaveFunction::from_amplitudes(two, rolled_amps).unwrap();
        let rolled_field = sn_potential(&rolled, &p2).unwrap();
        for idx in 0..two.dim() {
            let (i, j) = (idx / m, idx % m);
            let src = ((i + m - 1) % m) * m + (j + m - 1) % m;
            assert!((rolled_field[idx] - pair_field[src]).abs() <= 1e-12);
        }
    }

    #[test]
    fn blobs_fall_toward_each_other() {
        let grid = GridSpec::new(64, 1.0, 1).unwrap();
        let center = 32.0;
        let psi0 = WaveFunction::two_packet_superposition(grid, 27.0, 37.0, 1.2, 0.0).unwrap();
        let d0 = rms_separation(&psi0, center);

        let bound = params(&[6.0], 0.05, 1.0, 5e-3);
        let pulled = evolve_sn(&psi0, 8.0, &bound).unwrap();
        let d_bound = rms_separation(&pulled, center);
        assert!(
            d_bound < d0 - 0.08,
            "blobs should approach: {d0} -> {d_bound}"
        );

        let free = params(&[6.0], 0.0, 1.0, 5e-3);
        let spread = evolve_sn(&psi0, 8.0, &free).unwrap();
        let d_free = rms_separation(&spread, center);
        assert!(
            d_free > d0 + 0.02,
            "free packets should disperse: {d0} -> {d_free}"
        );
    }

    #[test]
    fn free_motion_matches_the_spectral_propagator() {
        let grid = GridSpec::new(48, 1.0, 1).unwrap();
        let p = params(&[1.3], 0.0, 1.0, 0.01);
        let psi0 = WaveFunction::gaussian_packet(grid, 20.0, 2.5, 0.4).unwrap();
        let split = evolve_sn(&psi0, 2.0, &p).unwrap();
        assert!((split.norm() - 1.0).abs() <= 1e-8);

        let h = build_hamiltonian(grid, &p.constants, None).unwrap();
        let u = unitary_from_hermitian(&h, 2.0 / p.constants.hbar());
        let dense =
            WaveFunction::from_amplitudes(grid, &u * psi0.amplitudes()).unwrap();
        assert!(split.overlap(&dense) >= 1.0 - 1e-8);
    }

    #[test]
    fn halving_the_step_leaves_the_final_state() {
        let grid = GridSpec::new(48, 1.0, 1).unwrap();
        let psi0 = WaveFunction::two_packet_superposition(grid, 20.0, 28.0, 2.0, 0.0).unwrap();
        let coarse = evolve_sn(&psi0, 1.0, &params(&[8.0], 0.05, 1.0, 2e-3)).unwrap();
        let fine = evolve_sn(&psi0, 1.0, &params(&[8.0], 0.05, 1.0, 1e-3)).unwrap();
        let deficit = 1.0 - coarse.overlap(&fine);
        assert!(deficit <= 1e-6, "step halving moved the state by {deficit}");
    }

    #[test]
    fn superpositions_evolve_nonlinearly() {
        let grid = GridSpec::new(32, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let psi1 = WaveFunction::random(grid, &mut rng);
        let raw = WaveFunction::random(grid, &mut rng);
        let overlap = psi1.inner(&raw);
        let ortho = WaveFunction::from_amplitudes(
            grid,
            raw.amplitudes() - psi1.amplitudes() * overlap,
        )
        .unwrap()
        .normalized()
        .unwrap();
        let sum = WaveFunction::from_amplitudes(
            grid,
            (psi1.amplitudes() + ortho.amplitudes()) / c(2.0f64.sqrt()),
        )
        .unwrap();

        let heavy = params(&[25.0], 0.05, 1.0, 5e-3);
        let evolved_sum = evolve_sn(&sum, 1.0, &heavy).unwrap();
        let branch_sum = WaveFunction::from_amplitudes(
            grid,
            (evolve_sn(&psi1, 1.0, &heavy).unwrap().amplitudes()
                + evolve_sn(&ortho, 1.0, &heavy).unwrap().amplitudes())
                / c(2.0f64.sqrt()),
        )
        .unwrap()
        .normalized()
        .unwrap();
        let deficit = 1.0 - evolved_sum.overlap(&branch_sum);
        assert!(
            deficit >= 1e-4,
            "self-sourced flow should break superpositions, deficit {deficit}"
        );

        let free = params(&[25.0], 0.0, 1.0, 5e-3);
        let linear_sum = evolve_sn(&sum, 1.0, &free).unwrap();
        let linear_branches = WaveFunction::from_amplitudes(
            grid,
            (evolve_sn(&psi1, 1.0, &free).unwrap().amplitudes()
                + evolve_sn(&ortho, 1.0, &free).unwrap().amplitudes())
                / c(2.0f64.sqrt()),
        )
        .unwrap();
        assert!(1.0 - linear_sum.overlap(&linear_branches) <= 1e-12);
    }

    #[test]
    fn energy_stays_conserved() {
        let grid = GridSpec::new(64, 1.0, 1).unwrap();
        let p = params(&[30.0], 0.02, 1.0, 0.01);
        let psi0 = WaveFunction::two_packet_superposition(grid, 26.0, 38.0, 2.0, 0.0).unwrap();
        let e0 = sn_energy(&psi0, &p).unwrap();
        let mut psi = psi0;
        for _ in 0..10 {
            psi = evolve_sn(&psi, 1.0, &p).unwrap();
            let e = sn_energy(&psi, &p).unwrap();
            assert!(
                (e - e0).abs() <= 1e-3 * e0.abs(),
                "energy drifted from {e0} to {e}"
            );
        }
        assert!((psi.norm() - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn recorded_runs_sample_on_the_step_grid() {
        let grid = GridSpec::new(32, 1.0, 1).unwrap();
        let p = params(&[10.0], 0.03, 1.0, 0.01);
        let psi0 = WaveFunction::gaussian_packet(grid, 16.0, 2.0, 0.2).unwrap();
        let position = DVector::from_iterator(
            grid.dim(),
            (0..grid.dim()).map(|i| grid.position(i)),
        );
        let request = SampleRequest::new(vec![0.5, 1.0])
            .with_observable("position", Observable::Diagonal(position.clone()))
            .keeping_states();
        let record = evolve_sn_record(&psi0, &p, &request).unwrap();
        assert_eq!(record.times, vec![0.5, 1.0]);
        assert_eq!(record.states.len(), 2);
        assert!(record.flashes.is_empty());

        let series = record.observable("position").unwrap();
        let direct = evolve_sn(&psi0, 1.0, &p).unwrap();
        assert!((series[1] - direct.expectation_diagonal(&position)).abs() <= 1e-10);
        let fidelity = (record.states[1].matrix() * direct.density_matrix().matrix())
            .trace()
            .re;
        assert!(fidelity >= 1.0 - 1e-10);

        let misaligned = SampleRequest::new(vec![0.5051]);
        assert!(evolve_sn_record(&psi0, &p, &misaligned).is_err());
    }

    #[test]
    fn rejects_bad_arguments() {
        let grid = GridSpec::new(16, 1.0, 1).unwrap();
        let psi = WaveFunction::gaussian_packet(grid, 8.0, 1.5, 0.0).unwrap();

        assert!(params(&[1.0], 0.1, 1.0, 0.0).validate(grid).is_err());
        assert!(params(&[1.0], 0.1, -1.0, 0.01).validate(grid).is_err());
        assert!(params(&[1.0, 2.0], 0.1, 1.0, 0.01).validate(grid).is_err());

        let p = params(&[1.0], 0.1, 1.0, 0.01);
        assert!(evolve_sn(&psi, 0.0151, &p).is_err());
        assert!(evolve_sn(&psi, -1.0, &p).is_err());
        assert!(sn_potential(&psi, &params(&[1.0, 2.0], 0.1, 1.0, 0.01)).is_err());
    }
}
