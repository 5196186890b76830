//! Stochastic jump model: particles undergo Poissonian localization events
//! ("flashes"), and every flash imprints a gravitational phase kick on the
//! whole configuration.
//!
//! Each particle flashes at rate λ. A flash of particle ℓ at grid point x_f
//! applies the Gaussian collapse operator
//!
//! ```text
//! L_f(x̂_ℓ) ∝ exp(−(x̂_ℓ − x_f)²/(2 r_c²)),   Σ_f L_f†L_f·dx = 1 (exact)
//! ```
//!
//! followed by the unitary kick exp(i·(G/λħ)·Σ_ℓ' m_ℓ m_ℓ' K(x_f − x̂_ℓ'))
//! built from the regularized Coulomb kernel K. Between events the state
//! propagates with the exact free evolution (no time-step error): the
//! propagator is applied through the analytic momentum eigenbasis, or
//! through a numerical eigendecomposition when an external potential is
//! present.
//!
//! The corresponding average (master) evolution is
//!
//! ```text
//! dρ/dt = −(i/ħ)[H₀, ρ] + λ·Σ_ℓ (Σ_f Ĉ_ℓ(f) ρ Ĉ_ℓ(f)†·dx − ρ)
//! ```
//!
//! with Ĉ = (kick)·(collapse). All jump operators are position-diagonal, so
//! the jump part acts elementwise through a precomputed table.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhysicalConstants, G_SI, HBAR_SI};
use crate::linalg::{c, CMat, CVec, I};
use crate::measurement::{sample_index, DiscretePovm};
use crate::operators::{build_hamiltonian, regularized_coulomb};
use crate::state::WaveFunction;
use crate::trajectory::{SampleRequest, TrajectoryRecord};

/// The length scale G·m²/(ħ·λ) below which a single kick rotates the phase
/// by more than a radian; everything is SI here.
pub fn gravitational_radius(mass_kg: f64, lambda_per_second: f64) -> f64 {
    G_SI * mass_kg * mass_kg / (HBAR_SI * lambda_per_second)
}

/// One localization event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlashEvent {
    pub time: f64,
    pub particle: usize,
    pub site: usize,
}

/// Parameters of the jump model.
#[derive(Clone, Debug)]
pub struct FlashParams {
    pub grid: GridSpec,
    pub constants: PhysicalConstants,
    /// Flash rate per particle.
    pub lambda: f64,
    /// Collapse width, shared with the kernel regularization.
    pub r_c: f64,
    /// Whether a flashing particle is kicked by its own flash. The self
    /// term exerts no net force by symmetry; switching it off isolates the
    /// pair interaction in diagnostics.
    pub include_self_kick: bool,
    /// Optional external potential over the configuration grid.
    pub external_potential: Option<DVector<f64>>,
}

struct MasterTables {
    /// Σ_ℓ T^ℓ(a_ℓ, b_ℓ) without kicks; elementwise factor of the
    /// collapse-only jump term.
    collapse: DMatrix<f64>,
    /// Full jump table including the kick phases.
    jump: CMat,
    /// First order of the jump table in the kick phases; elementwise,
    /// jump ≈ collapse + first_order/λ + O(phase²).
    first_order: CMat,
}

pub struct FlashModel {
    params: FlashParams,
    /// Collapse amplitude by grid separation, L_f(x) = profile[sep(x,f)].
    profile: Vec<f64>,
    /// Flash-position weight by separation, dx·profile², summing to one.
    weight: Vec<f64>,
    /// Regularized Coulomb kernel by grid separation.
    coulomb_row: Vec<f64>,
    /// G/(λħ); multiplies the mass product in each kick phase.
    kick_scale: f64,
    wait: Exp<f64>,
    /// H₀ = V·diag(ε)·V†, used for exact interflash propagation.
    eigenvalues: DVector<f64>,
    eigenvectors: CMat,
    h0: OnceLock<CMat>,
    tables: OnceLock<MasterTables>,
}

impl FlashModel {
    pub fn new(params: FlashParams) -> Result<Self> {
        let grid = params.grid;
        if params.constants.masses().len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} masses for {} particles",
                params.constants.masses().len(),
                grid.particles()
            )));
        }
        if !(params.lambda > 0.0 && params.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "flash rate must be positive, got {}",
                params.lambda
            )));
        }
        if !(params.r_c > 0.0 && params.r_c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "collapse width must be positive, got {}",
                params.r_c
            )));
        }
        if let Some(v) = &params.external_potential {
            if v.len() != grid.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "external potential has {} entries, configuration grid has {}",
                    v.len(),
                    grid.dim()
                )));
            }
        }

        let n = grid.points();
        let envelope: Vec<f64> = (0..n)
            .map(|s| {
                let d = grid.periodic_distance(s, 0);
                (-d * d / (2.0 * params.r_c * params.r_c)).exp()
            })
            .collect();
        // Σ_f L_f(x)²·dx is site independent by translation symmetry, so one
        // scalar makes the completeness sum exactly one.
        let total: f64 = envelope.iter().map(|e| e * e).sum();
        let norm = 1.0 / (total * grid.dx()).sqrt();
        let profile: Vec<f64> = envelope.iter().map(|e| e * norm).collect();
        let weight: Vec<f64> = profile.iter().map(|p| p * p * grid.dx()).collect();
        let coulomb_row: Vec<f64> = (0..n)
            .map(|s| regularized_coulomb(grid.periodic_distance(s, 0), params.r_c))
            .collect();
        let kick_scale = params.constants.g() / (params.lambda * params.constants.hbar());
        let total_rate = params.lambda * grid.particles() as f64;
        let wait = Exp::new(total_rate)
            .map_err(|_| Error::InvalidParameter("flash rate is not usable".into()))?;

        let (eigenvalues, eigenvectors) = match &params.external_potential {
            None => Self::free_eigenbasis(grid, &params.constants),
            Some(v) => {
                let h = build_hamiltonian(grid, &params.constants, Some(v))?;
                let (values, vectors) = crate::linalg::hermitian_eigen(&h);
                (DVector::from_vec(values), vectors)
            }
        };

        Ok(Self {
            params,
            profile,
            weight,
            coulomb_row,
            kick_scale,
            wait,
            eigenvalues,
            eigenvectors,
            h0: OnceLock::new(),
            tables: OnceLock::new(),
        })
    }

    /// Analytic eigenbasis of the free Hamiltonian: products of discrete
    /// momentum modes, with energies Σ_ℓ ħ²k²/2m_ℓ.
    fn free_eigenbasis(grid: GridSpec, constants: &PhysicalConstants) -> (DVector<f64>, CMat) {
        let n = grid.points();
        let dft = CMat::from_fn(n, n, |a, j| {
            let phase = 2.0 * std::f64::consts::PI * (a as f64) * (j as f64) / n as f64;
            (I * c(phase)).exp() / c((n as f64).sqrt())
        });
        let mut vectors = CMat::identity(1, 1);
        for _ in 0..grid.particles() {
            vectors = vectors.kronecker(&dft);
        }
        let single: Vec<Vec<f64>> = (0..grid.particles())
            .map(|l| {
                (0..n)
                    .map(|j| {
                        let k = grid.momentum(j);
                        constants.hbar() * constants.hbar() * k * k / (2.0 * constants.mass(l))
                    })
                    .collect()
            })
            .collect();
        let eigenvalues = DVector::from_iterator(
            grid.dim(),
            (0..grid.dim()).map(|idx| {
                grid.config_cells(idx)
                    .iter()
                    .enumerate()
                    .map(|(l, &j)| single[l][j])
                    .sum::<f64>()
            }),
        );
        (eigenvalues, vectors)
    }

    pub fn params(&self) -> &FlashParams {
        &self.params
    }

    pub fn grid(&self) -> GridSpec {
        self.params.grid
    }

    /// Collapse amplitude by grid separation.
    pub fn collapse_profile(&self) -> &[f64] {
        &self.profile
    }

    /// λ times the particle count.
    pub fn total_rate(&self) -> f64 {
        self.params.lambda * self.params.grid.particles() as f64
    }

    pub fn hamiltonian(&self) -> &CMat {
        self.h0.get_or_init(|| {
            build_hamiltonian(
                self.params.grid,
                &self.params.constants,
                self.params.external_potential.as_ref(),
            )
            .expect("parameters were validated at construction")
        })
    }

    /// Single-particle collapse diagonal L_f for a flash at `site`.
    pub fn collapse_amplitudes(&self, site: usize) -> DVector<f64> {
        let n = self.params.grid.points();
        DVector::from_iterator(n, (0..n).map(|x| self.profile[(n + x - site) % n]))
    }

    /// Kick phases over the configuration grid for a flash of `particle` at
    /// `site`; the kick unitary is the diagonal exp(+i·phases).
    pub fn kick_phases(&self, particle: usize, site: usize) -> DVector<f64> {
        let grid = self.params.grid;
        let n = grid.points();
        let mass_l = self.params.constants.mass(particle);
        DVector::from_iterator(
            grid.dim(),
            (0..grid.dim()).map(|idx| {
                let mut acc = 0.0;
                for (lp, &cell) in grid.config_cells(idx).iter().enumerate() {
                    if lp == particle && !self.params.include_self_kick {
                        continue;
                    }
                    let sep = (n + cell - site) % n;
                    acc += self.params.constants.mass(lp) * self.coulomb_row[sep];
                }
                self.kick_scale * mass_l * acc
            }),
        )
    }

    /// Draw the waiting time to the next flash of any particle.
    pub fn sample_waiting_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.sample(self.wait)
    }

    /// Draw which particle flashes and where, given the current state.
    pub fn sample_flash<R: Rng + ?Sized>(
        &self,
        psi: &WaveFunction,
        time: f64,
        rng: &mut R,
    ) -> Result<FlashEvent> {
        let grid = self.params.grid;
        let particle = rng.gen_range(0..grid.particles());
        let n = grid.points();
        let mut marginal = vec![0.0; n];
        let probs = psi.probabilities();
        for idx in 0..grid.dim() {
            marginal[grid.particle_cell(idx, particle)] += probs[idx];
        }
        let mut site_weights = vec![0.0; n];
        for (f, w) in site_weights.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (x, &q) in marginal.iter().enumerate() {
                acc += q * self.weight[(n + x - f) % n];
            }
            *w = acc;
        }
        let site = sample_index(&site_weights, rng)?;
        Ok(FlashEvent {
            time,
            particle,
            site,
        })
    }

    /// Collapse-and-kick update for one flash, renormalized.
    pub fn apply_flash(&self, psi: &WaveFunction, event: &FlashEvent) -> Result<WaveFunction> {
        let grid = self.params.grid;
        let n = grid.points();
        let phases = self.kick_phases(event.particle, event.site);
        let amps = CVec::from_iterator(
            grid.dim(),
            psi.amplitudes().iter().enumerate().map(|(idx, &a)| {
                let cell = grid.particle_cell(idx, event.particle);
                let envelope = self.profile[(n + cell - event.site) % n];
                a * c(envelope) * (I * c(phases[idx])).exp()
            }),
        );
        WaveFunction::from_amplitudes(grid, amps)
    }

    /// Exact free propagation by `dt` through the cached eigenbasis.
    pub fn propagate_free(&self, psi: &WaveFunction, dt: f64) -> Result<WaveFunction> {
        if dt == 0.0 {
            return Ok(psi.clone());
        }
        let hbar = self.params.constants.hbar();
        let mut modes = self.eigenvectors.adjoint() * psi.amplitudes();
        for (j, m) in modes.iter_mut().enumerate() {
            *m *= (-I * c(self.eigenvalues[j] * dt / hbar)).exp();
        }
        WaveFunction::from_amplitudes(self.params.grid, &self.eigenvectors * modes)
    }

    /// Run one jump trajectory, sampling at the requested times.
    pub fn evolve_trajectory<R: Rng + ?Sized>(
        &self,
        initial: &WaveFunction,
        request: &SampleRequest,
        rng: &mut R,
        stream: u64,
    ) -> Result<TrajectoryRecord> {
        request.validate()?;
        if initial.grid().dim() != self.params.grid.dim() {
            return Err(Error::DimensionMismatch(
                "initial state does not live on the model grid".into(),
            ));
        }
        let mut psi = psi_on_model_grid(initial, self.params.grid);
        let mut t = 0.0;
        let mut next_flash = self.sample_waiting_time(rng);
        let mut flashes = Vec::new();
        let mut observables: Vec<(String, Vec<f64>)> = request
            .observables
            .iter()
            .map(|(name, _)| (name.clone(), Vec::with_capacity(request.times.len())))
            .collect();
        let mut states = Vec::new();
        for &ts in &request.times {
            while next_flash <= ts {
                psi = self.propagate_free(&psi, next_flash - t)?;
                t = next_flash;
                let event = self.sample_flash(&psi, t, rng)?;
                psi = self.apply_flash(&psi, &event)?;
                flashes.push(event);
                next_flash = t + self.sample_waiting_time(rng);
            }
            psi = self.propagate_free(&psi, ts - t)?;
            t = ts;
            for (j, (_, obs)) in request.observables.iter().enumerate() {
                observables[j].1.push(obs.expectation_wavefunction(&psi));
            }
            if request.keep_states {
                states.push(psi.density_matrix());
            }
        }
        Ok(TrajectoryRecord {
            times: request.times.clone(),
            observables,
            states,
            flashes,
            stream,
        })
    }

    fn master_tables(&self) -> &MasterTables {
        self.tables.get_or_init(|| {
            let grid = self.params.grid;
            let n = grid.points();
            let dim = grid.dim();
            let p = grid.particles();
            let dx = grid.dx();

            // Collapse-only factor by single-particle separation.
            let mut t_row = vec![0.0; n];
            for (s, slot) in t_row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for f in 0..n {
                    acc += self.profile[f] * self.profile[(n + f + s) % n];
                }
                *slot = acc * dx;
            }
            let cells: Vec<Vec<usize>> = (0..dim).map(|idx| grid.config_cells(idx)).collect();
            let collapse = DMatrix::from_fn(dim, dim, |a, b| {
                (0..p)
                    .map(|l| t_row[(n + cells[a][l] - cells[b][l]) % n])
                    .sum::<f64>()
            });

            let mut jump = CMat::zeros(dim, dim);
            let mut first_order = CMat::zeros(dim, dim);
            let mut phases = DMatrix::zeros(n, dim);
            for l in 0..p {
                for f in 0..n {
                    for (idx, cell_list) in cells.iter().enumerate() {
                        let mut acc = 0.0;
                        for (lp, &cell) in cell_list.iter().enumerate() {
                            if lp == l && !self.params.include_self_kick {
                                continue;
                            }
                            acc += self.params.constants.mass(lp)
                                * self.coulomb_row[(n + cell - f) % n];
                        }
                        phases[(f, idx)] = self.kick_scale * self.params.constants.mass(l) * acc;
                    }
                }
                for a in 0..dim {
                    for b in 0..dim {
                        let sa = cells[a][l];
                        let sb = cells[b][l];
                        let mut zero = c(0.0);
                        let mut one = c(0.0);
                        for f in 0..n {
                            let amp =
                                dx * self.profile[(n + sa - f) % n] * self.profile[(n + sb - f) % n];
                            if amp == 0.0 {
                                continue;
                            }
                            let dphi = phases[(f, a)] - phases[(f, b)];
                            zero += c(amp) * (I * c(dphi)).exp();
                            one += I * c(amp * dphi);
                        }
                        jump[(a, b)] += zero;
                        first_order[(a, b)] += one * c(self.params.lambda);
                    }
                }
            }
            MasterTables {
                collapse,
                jump,
                first_order,
            }
        })
    }

    /// Average-evolution generator with kicks:
    /// −(i/ħ)[H₀,ρ] + λ(table ⊙ ρ − P·ρ).
    pub fn master_generator(&self, rho: &CMat) -> CMat {
        let tables = self.master_tables();
        let lambda = self.params.lambda;
        let p = self.params.grid.particles() as f64;
        let mut out = self.hamiltonian_commutator(rho);
        for i in 0..rho.nrows() {
            for j in 0..rho.ncols() {
                out[(i, j)] += c(lambda) * (tables.jump[(i, j)] - c(p)) * rho[(i, j)];
            }
        }
        out
    }

    /// Same generator with the kicks switched off (collapse only).
    pub fn collapse_generator(&self, rho: &CMat) -> CMat {
        let tables = self.master_tables();
        let lambda = self.params.lambda;
        let p = self.params.grid.particles() as f64;
        let mut out = self.hamiltonian_commutator(rho);
        for i in 0..rho.nrows() {
            for j in 0..rho.ncols() {
                out[(i, j)] += c(lambda * (tables.collapse[(i, j)] - p)) * rho[(i, j)];
            }
        }
        out
    }

    /// Elementwise table of the kick term's first order in the phases; the
    /// full jump term equals collapse + this/λ·... + O(phase²) so that
    /// master ≈ collapse_generator + first_order_kick_table ⊙ ρ.
    pub fn first_order_kick_table(&self) -> &CMat {
        &self.master_tables().first_order
    }

    fn hamiltonian_commutator(&self, rho: &CMat) -> CMat {
        let h = self.hamiltonian();
        crate::linalg::commutator(h, rho)
            .map(|z| z * (-I * c(1.0 / self.params.constants.hbar())))
    }

    /// Effective pair potential over the configuration grid: each particle
    /// pair contributes −G·m·m'·(w ⋆ K)(separation), where w is the flash
    /// position density around a particle. The flashing particle's own kick
    /// exerts no net force, so no self term appears.
    pub fn pair_potential(&self) -> DVector<f64> {
        let grid = self.params.grid;
        let n = grid.points();
        let mut conv = vec![0.0; n];
        for (s, slot) in conv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in 0..n {
                acc += self.weight[u] * self.coulomb_row[(n + s - u) % n];
            }
            *slot = acc;
        }
        let g = self.params.constants.g();
        DVector::from_iterator(
            grid.dim(),
            (0..grid.dim()).map(|idx| {
                let cells = grid.config_cells(idx);
                let mut v = 0.0;
                for l in 0..grid.particles() {
                    for lp in (l + 1)..grid.particles() {
                        let sep = (n + cells[l] - cells[lp]) % n;
                        v -= g
                            * self.params.constants.mass(l)
                            * self.params.constants.mass(lp)
                            * conv[sep];
                    }
                }
                v
            }),
        )
    }

    /// The flash operation of one particle as a discrete POVM: Kraus
    /// operators √dx·L_f with the kick unitaries as outcome feedback.
    /// Intended for structural checks on small grids.
    pub fn collapse_povm(&self, particle: usize) -> Result<DiscretePovm> {
        let grid = self.params.grid;
        if particle >= grid.particles() {
            return Err(Error::InvalidParameter(format!(
                "particle {particle} out of range"
            )));
        }
        if grid.dim() > 64 {
            return Err(Error::InvalidParameter(
                "dense POVM assembly is capped at dimension 64".into(),
            ));
        }
        let n = grid.points();
        let sqrt_dx = grid.dx().sqrt();
        let mut kraus = Vec::with_capacity(n);
        let mut feedback = Vec::with_capacity(n);
        for f in 0..n {
            let mut k = CMat::zeros(grid.dim(), grid.dim());
            let mut u = CMat::zeros(grid.dim(), grid.dim());
            let phases = self.kick_phases(particle, f);
            for idx in 0..grid.dim() {
                let cell = grid.particle_cell(idx, particle);
                k[(idx, idx)] = c(sqrt_dx * self.profile[(n + cell - f) % n]);
                u[(idx, idx)] = (I * c(phases[idx])).exp();
            }
            kraus.push(k);
            feedback.push(u);
        }
        DiscretePovm::with_feedback(kraus, feedback)
    }
}

/// Rebind a state to the model's grid value (the dimensions are checked by
/// the caller); keeps borrowed inputs usable across the trajectory loop.
fn psi_on_model_grid(psi: &WaveFunction, grid: GridSpec) -> WaveFunction {
    WaveFunction::from_amplitudes(grid, psi.amplitudes().clone())
        .expect("state was already validated")
}

/// Adapter that runs flash trajectories from a fixed initial state.
pub struct FlashSource<'a> {
    pub model: &'a FlashModel,
    pub initial: WaveFunction,
}

impl crate::ensemble::TrajectoryModel for FlashSource<'_> {
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
