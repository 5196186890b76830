//! Operator builders on the periodic grid: spectral kinetic terms, smearing,
//! the regularized Coulomb kernel, and smeared mass-density operators.
//!
//! Discretization conventions used throughout the crate:
//! * integrals become Σᵢ·dx^d, Dirac deltas become δᵢⱼ/dx^d;
//! * kinetic terms are exact on the discrete momentum grid (no stencil
//!   error);
//! * the Coulomb interaction is the doubly-smeared 3-D kernel
//!   K(r) = erf(r/2r_c)/r with K(0) = 1/(√π·r_c), evaluated at collinear
//!   minimum-image separations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhysicalConstants};
use crate::linalg::{c, CMat, CVec, I};

/// Normalized periodic Gaussian g(xᵢ) with Σᵢ g(xᵢ)·dx = 1 exactly; the
/// discrete representation of the smearing profile of width r_c.
pub fn periodic_gaussian(grid: GridSpec, r_c: f64) -> Result<DVector<f64>> {
    if !(r_c.is_finite() && r_c > 0.0) {
        return Err(Error::InvalidParameter(format!("r_c must be > 0, got {r_c}")));
    }
    let n = grid.points();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let d = grid.periodic_distance(i, 0);
        g[i] = (-d * d / (2.0 * r_c * r_c)).exp();
    }
    let total: f64 = g.sum() * grid.dx();
    Ok(g / total)
}

/// Circular convolution of a real field with the normalized Gaussian:
/// (smear f)ᵢ = Σⱼ g(xᵢ−xⱼ)·fⱼ·dx. Linear and exactly sum-preserving.
pub fn smear(grid: GridSpec, field: &DVector<f64>, r_c: f64) -> Result<DVector<f64>> {
    if field.len() != grid.points() {
        return Err(Error::DimensionMismatch(format!(
            "field has {} entries, grid has {} points",
            field.len(),
            grid.points()
        )));
    }
    let g = periodic_gaussian(grid, r_c)?;
    let n = grid.points();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let shift = (n + i - j) % n;
            acc += g[shift] * field[j];
        }
        out[i] = acc * grid.dx();
    }
    Ok(out)
}

/// Doubly-smeared 3-D Coulomb kernel at radial separation r:
/// (g_rc ⋆ g_rc ⋆ 1/|·|)(r) = erf(r/2r_c)/r, finite at the origin.
pub fn regularized_coulomb(r: f64, r_c: f64) -> f64 {
    if r.abs() < 1e-12 * r_c {
        return 1.0 / (std::f64::consts::PI.sqrt() * r_c)
            * (1.0 - r * r / (12.0 * r_c * r_c));
    }
    libm::erf(r / (2.0 * r_c)) / r
}

/// Radial derivative of the regularized Coulomb kernel, → −1/r² at long
/// range and → 0 at the origin.
pub fn regularized_coulomb_derivative(r: f64, r_c: f64) -> f64 {
    if r.abs() < 1e-12 * r_c {
        return 0.0;
    }
    let gauss = (-r * r / (4.0 * r_c * r_c)).exp()
        / (std::f64::consts::PI.sqrt() * r_c);
    gauss / r - libm::erf(r / (2.0 * r_c)) / (r * r)
}

/// Symmetric table K(xᵢ, xⱼ) of the regularized Coulomb kernel over
/// minimum-image grid separations.
pub fn regularized_coulomb_table(grid: GridSpec, r_c: f64) -> Result<DMatrix<f64>> {
    if !(r_c.is_finite() && r_c > 0.0) {
        return Err(Error::InvalidParameter(format!("r_c must be > 0, got {r_c}")));
    }
    let n = grid.points();
    // One pass over distinct separations, then fill by circulant symmetry.
    let by_sep: Vec<f64> = (0..n)
        .map(|s| regularized_coulomb(grid.periodic_distance(s, 0), r_c))
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| by_sep[i.abs_diff(j)]))
}

/// Single-particle kinetic matrix p̂²/2m in the position basis, assembled
/// from the exact discrete momentum eigenmodes:
/// T_ab = (1/N)·Σⱼ (ħ²kⱼ²/2m)·e^{i·kⱼ·(x_a−x_b)}.
pub fn kinetic_matrix(grid: GridSpec, mass: f64, hbar: f64) -> CMat {
    let n = grid.points();
    let energies: Vec<f64> = (0..n)
        .map(|j| {
            let k = grid.momentum(j);
            hbar * hbar * k * k / (2.0 * mass)
        })
        .collect();
    // T depends only on a−b mod N; compute one row of the circulant.
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for (s, slot) in row.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &e) in energies.iter().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * (j as f64) * (s as f64) / n as f64;
            acc += c(e) * (I * c(phase)).exp();
        }
        *slot = acc / c(n as f64);
    }
    CMat::from_fn(n, n, |a, b| {
        let s = (n + a - b) % n;
        row[s]
    })
}

/// Single-particle momentum matrix p̂ in the position basis. On even grids
/// the Nyquist mode has no well-defined sign and is assigned momentum zero,
/// so p̂² differs from the kinetic term by that single mode.
pub fn momentum_matrix(grid: GridSpec, hbar: f64) -> CMat {
    let n = grid.points();
    let momenta: Vec<f64> = (0..n)
        .map(|j| {
            if n % 2 == 0 && j == n / 2 {
                0.0
            } else {
                hbar * grid.momentum(j)
            }
        })
        .collect();
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for (s, slot) in row.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &p) in momenta.iter().enumerate() {
            let phase = 2.0 * std::f64::consts::PI * (j as f64) * (s as f64) / n as f64;
            acc += c(p) * (I * c(phase)).exp();
        }
        *slot = acc / c(n as f64);
    }
    CMat::from_fn(n, n, |a, b| {
        let s = (n + a - b) % n;
        row[s]
    })
}

/// Lifts a single-particle matrix to the P-particle space, acting on
/// `particle` and as identity elsewhere (particle 0 most significant).
pub fn lift_to_particle(grid: GridSpec, single: &CMat, particle: usize) -> Result<CMat> {
    let p = grid.particles();
    if particle >= p {
        return Err(Error::InvalidParameter(format!(
            "particle {particle} out of range for {p} particles"
        )));
    }
    let n = grid.points();
    if single.nrows() != n || single.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "single-particle matrix is {}×{}, grid has {n} points",
            single.nrows(),
            single.ncols()
        )));
    }
    let mut out = CMat::identity(1, 1);
    for l in 0..p {
        let factor = if l == particle {
            single.clone()
        } else {
            CMat::identity(n, n)
        };
        out = out.kronecker(&factor);
    }
    Ok(out)
}

/// Free Hamiltonian Σ_ℓ p̂_ℓ²/2m_ℓ plus an optional external potential given
/// as a real field over the full configuration grid.
pub fn build_hamiltonian(
    grid: GridSpec,
    constants: &PhysicalConstants,
    external_potential: Option<&DVector<f64>>,
) -> Result<CMat> {
    if constants.masses().len() != grid.particles() {
        return Err(Error::DimensionMismatch(format!(
            "{} masses for {} particles",
            constants.masses().len(),
            grid.particles()
        )));
    }
    let dim = grid.dim();
    let mut h = CMat::zeros(dim, dim);
    for l in 0..grid.particles() {
        let t = kinetic_matrix(grid, constants.mass(l), constants.hbar());
        h += lift_to_particle(grid, &t, l)?;
    }
    if let Some(v) = external_potential {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "external potential has {} entries, configuration grid has {dim}",
                v.len()
            )));
        }
        for i in 0..dim {
            h[(i, i)] += c(v[i]);
        }
    }
    Ok(h)
}

/// Position operator x̂_ℓ as a configuration-space diagonal. Meaningful for
/// states kept away from the periodic wrap.
pub fn position_diagonal(grid: GridSpec, particle: usize) -> DVector<f64> {
    DVector::from_iterator(
        grid.dim(),
        (0..grid.dim()).map(|idx| grid.position(grid.particle_cell(idx, particle))),
    )
}

/// Smeared mass-density operators M̂_rc(xᵢ): one diagonal per grid point,
/// with entries Σ_ℓ m_ℓ·g_rc(xᵢ − x̂_ℓ) evaluated per configuration.
///
/// Identities (exact on the grid): Σᵢ M̂_rc(xᵢ)·dx = Σ_ℓ m_ℓ · 1, and each
/// diagonal is a smearing of the raw point densities m_ℓ·δ/dx.
#[derive(Debug, Clone)]
pub struct MassDensity {
    diagonals: Vec<DVector<f64>>,
    grid: GridSpec,
    r_c: f64,
}

impl MassDensity {
    pub fn smeared(grid: GridSpec, constants: &PhysicalConstants, r_c: f64) -> Result<Self> {
        if constants.masses().len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} masses for {} particles",
                constants.masses().len(),
                grid.particles()
            )));
        }
        let g = periodic_gaussian(grid, r_c)?;
        let n = grid.points();
        let dim = grid.dim();
        let mut diagonals = Vec::with_capacity(n);
        for i in 0..n {
            let mut d = DVector::zeros(dim);
            for idx in 0..dim {
                let mut acc = 0.0;
                for l in 0..grid.particles() {
                    let cell = grid.particle_cell(idx, l);
                    let shift = (n + i - cell) % n;
                    acc += constants.mass(l) * g[shift];
                }
                d[idx] = acc;
            }
            diagonals.push(d);
        }
        Ok(Self {
            diagonals,
            grid,
            r_c,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn r_c(&self) -> f64 {
        self.r_c
    }

    /// Diagonal of M̂_rc(xᵢ).
    pub fn diagonal(&self, i: usize) -> &DVector<f64> {
        &self.diagonals[i]
    }

    pub fn diagonals(&self) -> &[DVector<f64>] {
        &self.diagonals
    }

    pub fn n_points(&self) -> usize {
        self.diagonals.len()
    }

    /// Dense matrix representation of M̂_rc(xᵢ) (diagonal).
    pub fn dense(&self, i: usize) -> CMat {
        CMat::from_diagonal(&CVec::from_iterator(
            self.grid.dim(),
            self.diagonals[i].iter().map(|&v| c(v)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::linalg::hermiticity_residual;

    fn grid1(n: usize, dx: f64) -> GridSpec {
        GridSpec::new(n, dx, 1).unwrap()
    }

    #[test]
    fn two_point_hamiltonian_has_known_spectrum() {
        // N = 2, free particle: eigenvalues 0 and ħ²(π/dx)²/2m.
        let grid = grid1(2, 0.3);
        let constants = PhysicalConstants::new(0.0, 1.0, vec![2.0]).unwrap();
        let h = build_hamiltonian(grid, &constants, None).unwrap();
        let eigs = crate::linalg::hermitian_eigenvalues(&h);
        let expected = (std::f64::consts::PI / 0.3).powi(2) / (2.0 * 2.0);
        assert_relative_eq!(eigs[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(eigs[1], expected, max_relative = 1e-12);
    }

    #[test]
    fn kinetic_matrix_reproduces_plane_wave_eigenvalues() {
        // Every discrete plane wave is an exact eigenvector with energy
        // ħ²k²/2m.
        let grid = grid1(12, 0.5);
        let mass = 3.0;
        let hbar = 1.0;
        let t = kinetic_matrix(grid, mass, hbar);
        assert!(hermiticity_residual(&t) < 1e-12);
        for j in 0..12 {
            let k = grid.momentum(j);
            let wave = CVec::from_iterator(
                12,
                (0..12).map(|a| (I * c(k * grid.position(a))).exp()),
            );
            let applied = &t * &wave;
            let expected = wave * c(hbar * hbar * k * k / (2.0 * mass));
            let diff = (applied - expected).norm();
            assert!(diff < 1e-10, "mode {j} defect {diff}");
        }
    }

    #[test]
    fn hamiltonian_adds_external_potential_on_diagonal() {
        let grid = grid1(8, 0.5);
        let constants = PhysicalConstants::new(0.0, 1.0, vec![1.0]).unwrap();
        let v = DVector::from_iterator(8, (0..8).map(|i| i as f64 * 0.1));
        let h0 = build_hamiltonian(grid, &constants, None).unwrap();
        let h = build_hamiltonian(grid, &constants, Some(&v)).unwrap();
        for i in 0..8 {
            assert_relative_eq!((h[(i, i)] - h0[(i, i)]).re, v[i], epsilon = 1e-13);
        }
        assert!(hermiticity_residual(&h) < 1e-12);
    }

    #[test]
    fn two_particle_hamiltonian_is_sum_of_liftings() {
        let grid = GridSpec::new(4, 0.5, 2).unwrap();
        let constants = PhysicalConstants::new(0.0, 1.0, vec![1.0, 5.0]).unwrap();
        let h = build_hamiltonian(grid, &constants, None).unwrap();
        assert!(hermiticity_residual(&h) < 1e-12);
        // Product of plane waves is an exact eigenvector.
        let k1 = grid.momentum(1);
        let k2 = grid.momentum(3);
        let one = |k: f64| {
            CVec::from_iterator(4, (0..4).map(|a| (I * c(k * grid.position(a))).exp()))
        };
        let wave = one(k1).kronecker(&one(k2));
        let applied = &h * &wave;
        let expected = wave * c(k1 * k1 / 2.0 + k2 * k2 / (2.0 * 5.0));
        assert!((applied - expected).norm() < 1e-10);
    }

    #[test]
    fn smearing_is_mass_preserving_and_has_gaussian_transfer() {
        let grid = grid1(64, 0.25);
        let r_c = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = DVector::from_fn(64, |_, _| rng.gen_range(-1.0..1.0));
        let smeared = smear(grid, &field, r_c).unwrap();
        assert_relative_eq!(smeared.sum() * 0.25, field.sum() * 0.25, epsilon = 1e-10);

        // On a mode the grid resolves well, smearing multiplies by the
        // continuum transfer function e^{−k²r_c²/2}.
        let q = 2;
        let k = 2.0 * std::f64::consts::PI * q as f64 / grid.length();
        let mode = DVector::from_fn(64, |i, _| (k * grid.position(i)).cos());
        let smeared_mode = smear(grid, &mode, r_c).unwrap();
        let expected = (-k * k * r_c * r_c / 2.0).exp();
        for i in 0..64 {
            assert_relative_eq!(smeared_mode[i], expected * mode[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn smearing_is_linear() {
        let grid = grid1(32, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = DVector::from_fn(32, |_, _| rng.gen_range(-2.0..2.0));
        let g = DVector::from_fn(32, |_, _| rng.gen_range(-2.0..2.0));
        let (a, b) = (1.7, -0.4);
        let lhs = smear(grid, &(&f * a + &g * b), 0.8).unwrap();
        let rhs = smear(grid, &f, 0.8).unwrap() * a + smear(grid, &g, 0.8).unwrap() * b;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn narrow_smearing_is_identity() {
        // r_c far below the grid spacing leaves fields unchanged.
        let grid = grid1(16, 0.5);
        let field = DVector::from_fn(16, |i, _| (i as f64).sin());
        let smeared = smear(grid, &field, 0.5 / 100.0).unwrap();
        assert!((smeared - field).amax() < 1e-6);
    }

    /// Numerical 3-D radial convolution oracle for the doubly-smeared
    /// Coulomb kernel: the potential of a Gaussian ball of width σ = √2·r_c,
    /// φ(r) = 4π[(1/r)∫₀^r s²g(s)ds + ∫_r^∞ s·g(s)ds].
    fn coulomb_oracle(r: f64, r_c: f64) -> f64 {
        let sigma2 = 2.0 * r_c * r_c;
        let g = |s: f64| {
            (-s * s / (2.0 * sigma2)).exp()
                / (2.0 * std::f64::consts::PI * sigma2).powf(1.5)
        };
        let steps = 200_000;
        let upper = 12.0 * r_c + r;
        let h = upper / steps as f64;
        let mut inner = 0.0;
        let mut outer = 0.0;
        // Trapezoid rule on [0, upper], splitting at r.
        for i in 0..steps {
            let s0 = i as f64 * h;
            let s1 = s0 + h;
            let f_inner = |s: f64| s * s * g(s);
            let f_outer = |s: f64| s * g(s);
            if s1 <= r {
                inner += 0.5 * (f_inner(s0) + f_inner(s1)) * h;
            } else if s0 >= r {
                outer += 0.5 * (f_outer(s0) + f_outer(s1)) * h;
            } else {
                inner += 0.5 * (f_inner(s0) + f_inner(r)) * (r - s0);
                outer += 0.5 * (f_outer(r) + f_outer(s1)) * (s1 - r);
            }
        }
        4.0 * std::f64::consts::PI * (inner / r + outer)
    }

    #[test]
    fn regularized_coulomb_matches_radial_convolution_oracle() {
        let r_c = 1.0;
        for &r in &[0.1, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let oracle = coulomb_oracle(r, r_c);
            let analytic = regularized_coulomb(r, r_c);
            assert_relative_eq!(analytic, oracle, max_relative = 1e-6);
        }
    }

    #[test]
    fn regularized_coulomb_is_finite_at_zero_and_bare_at_range() {
        let r_c = 1.0;
        assert_relative_eq!(
            regularized_coulomb(0.0, r_c),
            1.0 / std::f64::consts::PI.sqrt(),
            max_relative = 1e-12
        );
        // Within 1% of 1/r at 20·r_c and far better beyond.
        let r = 20.0;
        assert_relative_eq!(regularized_coulomb(r, r_c), 1.0 / r, max_relative = 1e-2);
        assert!((regularized_coulomb(r, r_c) - 1.0 / r).abs() / (1.0 / r) < 1e-10);
    }

    #[test]
    fn coulomb_derivative_matches_finite_difference() {
        let r_c = 0.7;
        for &r in &[0.05, 0.3, 1.0, 3.0, 9.0] {
            let h = 1e-6;
            let fd = (regularized_coulomb(r + h, r_c) - regularized_coulomb(r - h, r_c))
                / (2.0 * h);
            assert_relative_eq!(
                regularized_coulomb_derivative(r, r_c),
                fd,
                max_relative = 1e-6,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn coulomb_table_is_symmetric_and_matches_scalar_form() {
        let grid = grid1(16, 0.5);
        let table = regularized_coulomb_table(grid, 1.0).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_relative_eq!(table[(i, j)], table[(j, i)]);
                assert_relative_eq!(
                    table[(i, j)],
                    regularized_coulomb(grid.periodic_distance(i, j), 1.0),
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn mass_density_obeys_total_mass_sum_rule() {
        let grid = GridSpec::new(8, 0.5, 2).unwrap();
        let constants = PhysicalConstants::new(1.0, 1.0, vec![2.0, 7.0]).unwrap();
        let density = MassDensity::smeared(grid, &constants, 1.0).unwrap();
        let dim = grid.dim();
        // Σᵢ M̂_rc(xᵢ)·dx = (m₁+m₂)·1 exactly.
        for idx in 0..dim {
            let total: f64 = (0..8).map(|i| density.diagonal(i)[idx]).sum::<f64>() * 0.5;
            assert_relative_eq!(total, 9.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn mass_density_peaks_at_particle_position() {
        let grid = grid1(32, 0.25);
        let constants = PhysicalConstants::new(1.0, 1.0, vec![3.0]).unwrap();
        let density = MassDensity::smeared(grid, &constants, 0.5).unwrap();
        // For the configuration with the particle in cell 10, the density
        // profile over i is a Gaussian centred at x₁₀.
        let idx = 10;
        let profile: Vec<f64> = (0..32).map(|i| density.diagonal(i)[idx]).collect();
        let max_at = profile
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(max_at, 10);
        let g = periodic_gaussian(grid, 0.5).unwrap();
        for i in 0..32 {
            let shift = (32 + i - idx) % 32;
            assert_relative_eq!(profile[i], 3.0 * g[shift], epsilon = 1e-12);
        }
    }

    #[test]
    fn lift_to_particle_places_operator_correctly() {
        let grid = GridSpec::new(3, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = CMat::from_fn(3, 3, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let on0 = lift_to_particle(grid, &m, 0).unwrap();
        let on1 = lift_to_particle(grid, &m, 1).unwrap();
        let id = CMat::identity(3, 3);
        assert!((on0 - m.kronecker(&id)).norm() < 1e-14);
        assert!((on1 - id.kronecker(&m)).norm() < 1e-14);
    }
}
