//! Periodic position grids, physical constants, and unit bookkeeping.
//!
//! All dynamics run on a one-dimensional periodic grid of N points with
//! spacing dx, in simulation units with ħ = 1 and the collapse length r_c as
//! the length unit. Three-dimensional physics enters only through radial
//! kernel forms (see `kernel`), never through the propagated grid.

use crate::error::{Error, Result};

/// Newtonian gravitational constant, m³·kg⁻¹·s⁻² (CODATA 2018).
pub const G_SI: f64 = 6.674_30e-11;
/// Reduced Planck constant, J·s (CODATA 2018).
pub const HBAR_SI: f64 = 1.054_571_817e-34;
/// Proton mass, kg.
pub const PROTON_MASS_KG: f64 = 1.672_621_923_69e-27;
/// Electron mass, kg.
pub const ELECTRON_MASS_KG: f64 = 9.109_383_701_5e-31;

/// Default cap on the total Hilbert-space dimension N^P.
pub const DEFAULT_MAX_DIM: usize = 4096;

/// One-dimensional periodic grid shared by states and operators.
///
/// Positions are xᵢ = i·dx for i in 0..N with period L = N·dx. For P
/// particles the configuration space is the P-fold product with dimension
/// N^P and integration measure dx^P.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    points: usize,
    dx: f64,
    particles: usize,
    max_dim: usize,
}

impl GridSpec {
    /// A grid with the default dimension cap. N = 2 is the smallest grid
    /// accepted so that two-level (qubit-like) cases remain expressible.
    pub fn new(points: usize, dx: f64, particles: usize) -> Result<Self> {
        Self::with_max_dim(points, dx, particles, DEFAULT_MAX_DIM)
    }

    pub fn with_max_dim(points: usize, dx: f64, particles: usize, max_dim: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 points, got {points}"
            )));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::InvalidParameter(format!("dx must be positive, got {dx}")));
        }
        if particles == 0 {
            return Err(Error::InvalidParameter("particle count must be ≥ 1".into()));
        }
        let mut dim: usize = 1;
        for _ in 0..particles {
            dim = dim.checked_mul(points).ok_or(Error::DimensionCap {
                requested: usize::MAX,
                points,
                particles,
                cap: max_dim,
            })?;
        }
        if dim > max_dim {
            return Err(Error::DimensionCap {
                requested: dim,
                points,
                particles,
                cap: max_dim,
            });
        }
        Ok(Self {
            points,
            dx,
            particles,
            max_dim,
        })
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn max_dim(&self) -> usize {
        self.max_dim
    }

    /// Total Hilbert-space dimension N^P.
    pub fn dim(&self) -> usize {
        self.points.pow(self.particles as u32)
    }

    /// Box length L = N·dx.
    pub fn length(&self) -> f64 {
        self.points as f64 * self.dx
    }

    /// Configuration-space volume element dx^P.
    pub fn measure(&self) -> f64 {
        self.dx.powi(self.particles as i32)
    }

    pub fn position(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    /// Minimum-image distance between grid points i and j.
    pub fn periodic_distance(&self, i: usize, j: usize) -> f64 {
        let raw = i.abs_diff(j) % self.points;
        let folded = raw.min(self.points - raw);
        folded as f64 * self.dx
    }

    /// Minimum-image distance between arbitrary coordinates.
    pub fn periodic_distance_f(&self, x: f64, y: f64) -> f64 {
        let l = self.length();
        let mut d = (x - y).rem_euclid(l);
        if d > l / 2.0 {
            d = l - d;
        }
        d
    }

    /// Signed momentum value of discrete mode j: kⱼ = 2π·j̃/(N·dx) with
    /// j̃ ∈ [−N/2, N/2). The Nyquist mode (even N) carries k = +π/dx.
    pub fn momentum(&self, j: usize) -> f64 {
        let n = self.points;
        let half = n / 2;
        let signed = if j <= half { j as isize } else { j as isize - n as isize };
        2.0 * std::f64::consts::PI * signed as f64 / (n as f64 * self.dx)
    }

    /// A copy of this grid describing a subset of the particles.
    pub fn subgrid(&self, particles: usize) -> Result<Self> {
        Self::with_max_dim(self.points, self.dx, particles, self.max_dim)
    }

    /// Flat configuration index for per-particle cell indices, particle 0
    /// most significant (consistent with Kronecker-product operator order).
    pub fn config_index(&self, cells: &[usize]) -> usize {
        debug_assert_eq!(cells.len(), self.particles);
        cells.iter().fold(0, |acc, &c| {
            debug_assert!(c < self.points);
            acc * self.points + c
        })
    }

    /// Per-particle cell indices for a flat configuration index.
    pub fn config_cells(&self, mut index: usize) -> Vec<usize> {
        let mut cells = vec![0; self.particles];
        for slot in cells.iter_mut().rev() {
            *slot = index % self.points;
            index /= self.points;
        }
        cells
    }

    /// Cell occupied by one particle within a flat configuration index.
    pub fn particle_cell(&self, index: usize, particle: usize) -> usize {
        debug_assert!(particle < self.particles);
        let shift = self.points.pow((self.particles - 1 - particle) as u32);
        (index / shift) % self.points
    }
}

/// Conversion factors between simulation units and SI, used only when
/// reporting; the dynamics never consults them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSystem {
    /// Metres per simulation length unit.
    pub length_m: f64,
    /// Seconds per simulation time unit.
    pub time_s: f64,
    /// Kilograms per simulation mass unit.
    pub mass_kg: f64,
}

impl UnitSystem {
    /// Simulation units coincide with SI.
    pub fn si() -> Self {
        Self {
            length_m: 1.0,
            time_s: 1.0,
            mass_kg: 1.0,
        }
    }

    /// Natural units pinned by a length scale and a mass scale, with the
    /// time scale fixed so that ħ = 1 in simulation units.
    pub fn natural(length_m: f64, mass_kg: f64) -> Self {
        Self {
            length_m,
            time_s: mass_kg * length_m * length_m / HBAR_SI,
            mass_kg,
        }
    }
}

/// Coupling constants and per-particle masses in simulation units.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalConstants {
    g: f64,
    hbar: f64,
    masses: Vec<f64>,
    units: UnitSystem,
}

impl PhysicalConstants {
    pub fn new(g: f64, hbar: f64, masses: Vec<f64>) -> Result<Self> {
        Self::with_units(g, hbar, masses, UnitSystem::si())
    }

    pub fn with_units(g: f64, hbar: f64, masses: Vec<f64>, units: UnitSystem) -> Result<Self> {
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::InvalidParameter(format!("G must be ≥ 0, got {g}")));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(Error::InvalidParameter(format!("ħ must be > 0, got {hbar}")));
        }
        if masses.is_empty() {
            return Err(Error::InvalidParameter("at least one particle mass required".into()));
        }
        if let Some(bad) = masses.iter().find(|&&m| !(m.is_finite() && m > 0.0)) {
            return Err(Error::InvalidParameter(format!("masses must be > 0, got {bad}")));
        }
        Ok(Self {
            g,
            hbar,
            masses,
            units,
        })
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, particle: usize) -> f64 {
        self.masses[particle]
    }

    pub fn units(&self) -> UnitSystem {
        self.units
    }

    /// The same constants with the coupling G replaced (used by control runs).
    pub fn with_g(&self, g: f64) -> Result<Self> {
        Self::with_units(g, self.hbar, self.masses.clone(), self.units)
    }
}
