//! Wavefunctions and density matrices on the periodic configuration grid.
//!
//! A [`WaveFunction`] stores amplitudes in continuum normalization:
//! ‖ψ‖² = Σᵢ|ψᵢ|²·dx^P = 1. A [`DensityMatrix`] absorbs the grid measure so
//! its plain matrix trace is 1; the two conventions agree on every
//! expectation value.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::linalg::{c, frobenius, hermiticity_residual, hermitian_eigenvalues, trace, CMat, CVec, I};

pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = -1e-10;

/// Pure state on the configuration grid, ‖ψ‖ = 1 in the grid measure.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    amplitudes: CVec,
    grid: GridSpec,
}

impl WaveFunction {
    /// Wraps raw amplitudes, normalizing them in the grid measure.
    pub fn from_amplitudes(grid: GridSpec, amplitudes: CVec) -> Result<Self> {
        if amplitudes.len() != grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "amplitude vector has {} entries, grid dimension is {}",
                amplitudes.len(),
                grid.dim()
            )));
        }
        if amplitudes.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numerical("non-finite amplitude".into()));
        }
        let state = Self { amplitudes, grid };
        state.normalized()
    }

    /// Gaussian packet for a single particle: |ψ|² has standard deviation
    /// `width` around `center`, and the phase e^{i p x / ħ} carries momentum
    /// `momentum` (ħ = 1). Displacements use the minimum image, so the packet
    /// must be narrow compared to the box.
    pub fn gaussian_packet(grid: GridSpec, center: f64, width: f64, momentum: f64) -> Result<Self> {
        if grid.particles() != 1 {
            return Err(Error::InvalidParameter(
                "gaussian_packet builds single-particle states; use product() for more".into(),
            ));
        }
        if !(width > 0.0) {
            return Err(Error::InvalidParameter(format!("packet width must be > 0, got {width}")));
        }
        let n = grid.points();
        let l = grid.length();
        let amplitudes = CVec::from_iterator(
            n,
            (0..n).map(|i| {
                let x = grid.position(i);
                let mut d = (x - center).rem_euclid(l);
                if d > l / 2.0 {
                    d -= l;
                }
                let envelope = (-d * d / (4.0 * width * width)).exp();
                c(envelope) * (I * c(momentum * x)).exp()
            }),
        );
        Self::from_amplitudes(grid, amplitudes)
    }

    /// Equal-weight superposition of two Gaussian packets at `center_a` and
    /// `center_b` with a relative phase.
    pub fn two_packet_superposition(
        grid: GridSpec,
        center_a: f64,
        center_b: f64,
        width: f64,
        relative_phase: f64,
    ) -> Result<Self> {
        let a = Self::gaussian_packet(grid, center_a, width, 0.0)?;
        let b = Self::gaussian_packet(grid, center_b, width, 0.0)?;
        let phase = (I * c(relative_phase)).exp();
        Self::from_amplitudes(grid, a.amplitudes + b.amplitudes * phase)
    }

    /// Product state of one packet per particle; `packets` are
    /// single-particle states on the same one-particle grid.
    pub fn product(grid: GridSpec, packets: &[WaveFunction]) -> Result<Self> {
        if packets.len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} packets for {} particles",
                packets.len(),
                grid.particles()
            )));
        }
        let mut amplitudes = CVec::from_element(1, c(1.0));
        for packet in packets {
            if packet.grid.points() != grid.points() || packet.grid.particles() != 1 {
                return Err(Error::DimensionMismatch(
                    "product factors must be single-particle states on the same grid".into(),
                ));
            }
            amplitudes = amplitudes.kronecker(&packet.amplitudes);
        }
        Self::from_amplitudes(grid, amplitudes)
    }

    /// Position eigenstate with each particle pinned to a grid cell.
    pub fn position_eigenstate(grid: GridSpec, cells: &[usize]) -> Result<Self> {
        if cells.len() != grid.particles() {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for {} particles",
                cells.len(),
                grid.particles()
            )));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= grid.points()) {
            return Err(Error::InvalidParameter(format!(
                "cell {bad} out of range for {} points",
                grid.points()
            )));
        }
        let mut amplitudes = CVec::zeros(grid.dim());
        amplitudes[grid.config_index(cells)] = c(1.0 / grid.measure().sqrt());
        Ok(Self { amplitudes, grid })
    }

    /// Haar-like random state (independent complex Gaussian amplitudes,
    /// normalized).
    pub fn random<R: Rng + ?Sized>(grid: GridSpec, rng: &mut R) -> Self {
        let dim = grid.dim();
        let amplitudes = CVec::from_iterator(
            dim,
            (0..dim).map(|_| {
                Complex64::new(
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                )
            }),
        );
        Self::from_amplitudes(grid, amplitudes).expect("random state normalizes")
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn amplitudes(&self) -> &CVec {
        &self.amplitudes
    }

    /// ‖ψ‖ in the grid measure.
    pub fn norm(&self) -> f64 {
        (self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.measure()).sqrt()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let norm = self.norm();
        if !(norm.is_finite() && norm > 1e-150) {
            return Err(Error::DegenerateDistribution { total: norm * norm });
        }
        self.amplitudes /= c(norm);
        Ok(self)
    }

    /// ⟨self|other⟩ in the grid measure.
    pub fn inner(&self, other: &WaveFunction) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * c(self.grid.measure())
    }

    /// |⟨self|other⟩|.
    pub fn overlap(&self, other: &WaveFunction) -> f64 {
        self.inner(other).norm()
    }

    /// ⟨ψ|O|ψ⟩ for a Hermitian operator matrix (real part returned).
    pub fn expectation(&self, op: &CMat) -> f64 {
        let applied = op * &self.amplitudes;
        (self
            .amplitudes
            .iter()
            .zip(applied.iter())
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * c(self.grid.measure()))
        .re
    }

    /// ⟨ψ|diag(d)|ψ⟩ for a position-diagonal operator.
    pub fn expectation_diagonal(&self, d: &DVector<f64>) -> f64 {
        self.amplitudes
            .iter()
            .zip(d.iter())
            .map(|(z, &v)| z.norm_sqr() * v)
            .sum::<f64>()
            * self.grid.measure()
    }

    /// Probability weight of each configuration cell (sums to 1).
    pub fn probabilities(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.amplitudes.len(),
            self.amplitudes.iter().map(|z| z.norm_sqr() * self.grid.measure()),
        )
    }

    /// |ψ⟩⟨ψ| with the grid measure absorbed (matrix trace 1).
    pub fn density_matrix(&self) -> DensityMatrix {
        let scale = c(self.grid.measure().sqrt());
        let v = &self.amplitudes * scale;
        let m = &v * v.adjoint();
        DensityMatrix::new_unchecked(m, self.grid)
    }
}

/// Mixed state with plain matrix trace 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMat,
    grid: GridSpec,
}

impl DensityMatrix {
    /// Validating constructor: Hermitian within 1e-10, trace 1 within 1e-10,
    /// positive semidefinite within −1e-10.
    pub fn new(matrix: CMat, grid: GridSpec) -> Result<Self> {
        let state = Self::new_unchecked(matrix, grid);
        state.validate()?;
        Ok(state)
    }

    /// Skips validation; used in stepping loops where the invariants are
    /// maintained by construction and spot-checked at sample times.
    pub fn new_unchecked(matrix: CMat, grid: GridSpec) -> Self {
        debug_assert_eq!(matrix.nrows(), grid.dim());
        debug_assert_eq!(matrix.ncols(), grid.dim());
        Self { matrix, grid }
    }

    /// Maximally mixed state 1/dim.
    pub fn maximally_mixed(grid: GridSpec) -> Self {
        let dim = grid.dim();
        Self::new_unchecked(CMat::identity(dim, dim) / c(dim as f64), grid)
    }

    /// Random full-rank mixed state (Ginibre ensemble, AA†/tr AA†).
    pub fn random<R: Rng + ?Sized>(grid: GridSpec, rng: &mut R) -> Self {
        let dim = grid.dim();
        let a = CMat::from_fn(dim, dim, |_, _| {
            Complex64::new(
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            )
        });
        let m = &a * a.adjoint();
        let tr = trace(&m).re;
        Self::new_unchecked(m / c(tr), grid)
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> Complex64 {
        trace(&self.matrix)
    }

    /// tr ρ², 1 for pure states.
    pub fn purity(&self) -> f64 {
        self.matrix
            .iter()
            .zip(self.matrix.transpose().iter())
            .map(|(a, b)| (a * b).re)
            .sum()
    }

    /// tr(Oρ) for a Hermitian operator (real part).
    pub fn expectation(&self, op: &CMat) -> f64 {
        trace(&(op * &self.matrix)).re
    }

    /// tr(diag(d)·ρ) for a position-diagonal operator.
    pub fn expectation_diagonal(&self, d: &DVector<f64>) -> f64 {
        self.matrix
            .diagonal()
            .iter()
            .zip(d.iter())
            .map(|(z, &v)| z.re * v)
            .sum()
    }

    /// Diagonal of ρ: probability weight per configuration cell.
    pub fn diagonal_probabilities(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.matrix.diagonal().iter().map(|z| z.re))
    }

    pub fn renormalized(mut self) -> Self {
        let tr = trace(&self.matrix).re;
        self.matrix /= c(tr);
        self
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eigenvalues(&self.matrix)[0]
    }

    /// Checks Hermiticity, unit trace, and positivity.
    pub fn validate(&self) -> Result<()> {
        let residual = hermiticity_residual(&self.matrix);
        if residual > HERMITICITY_TOL {
            return Err(Error::MatrixProperty {
                property: "Hermitian",
                residual,
                tolerance: HERMITICITY_TOL,
            });
        }
        let tr = trace(&self.matrix);
        let trace_residual = (tr - c(1.0)).norm();
        if trace_residual > TRACE_TOL {
            return Err(Error::MatrixProperty {
                property: "unit-trace",
                residual: trace_residual,
                tolerance: TRACE_TOL,
            });
        }
        let min_eig = self.min_eigenvalue();
        if min_eig < PSD_TOL {
            return Err(Error::MatrixProperty {
                property: "positive semidefinite",
                residual: min_eig,
                tolerance: PSD_TOL,
            });
        }
        Ok(())
    }

    /// Frobenius distance to another density matrix.
    pub fn frobenius_distance(&self, other: &DensityMatrix) -> f64 {
        frobenius(&(&self.matrix - &other.matrix))
    }

    /// Reduced state over the listed particles (sorted, non-empty, strict
    /// subset), tracing out the rest.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        let p = self.grid.particles();
        if p < 2 {
            return Err(Error::InvalidParameter(
                "partial trace needs at least two particles".into(),
            ));
        }
        if keep.is_empty() || keep.len() >= p {
            return Err(Error::InvalidParameter(
                "keep must be a non-empty strict subset of particles".into(),
            ));
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&k| k >= p) {
            return Err(Error::InvalidParameter(
                "keep must be sorted, unique, and in range".into(),
            ));
        }
        let traced: Vec<usize> = (0..p).filter(|i| !keep.contains(i)).collect();
        let n = self.grid.points();
        let sub = self.grid.subgrid(keep.len())?;
        let dim_keep = sub.dim();
        let dim_traced = n.pow(traced.len() as u32);

        // Flat index of the full configuration holding kept cells `a` and
        // traced cells `t`.
        let full_index = |a: usize, t: usize| -> usize {
            let mut cells = vec![0usize; p];
            let mut rest = a;
            for &k in keep.iter().rev() {
                cells[k] = rest % n;
                rest /= n;
            }
            let mut rest = t;
            for &d in traced.iter().rev() {
                cells[d] = rest % n;
                rest /= n;
            }
            self.grid.config_index(&cells)
        };

        let mut out = CMat::zeros(dim_keep, dim_keep);
        for a in 0..dim_keep {
            for b in 0..dim_keep {
                let mut sum = Complex64::new(0.0, 0.0);
                for t in 0..dim_traced {
                    sum += self.matrix[(full_index(a, t), full_index(b, t))];
                }
                out[(a, b)] = sum;
            }
        }
        Ok(DensityMatrix::new_unchecked(out, sub))
    }
}

impl From<&WaveFunction> for DensityMatrix {
    fn from(psi: &WaveFunction) -> Self {
        psi.density_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid1(n: usize, dx: f64) -> GridSpec {
        GridSpec::new(n, dx, 1).unwrap()
    }

    #[test]
    fn packet_normalizes_and_centers() {
        let grid = grid1(64, 0.25);
        let psi = WaveFunction::gaussian_packet(grid, 8.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(psi.norm(), 1.0, epsilon = 1e-12);
        let x: DVector<f64> = DVector::from_iterator(64, (0..64).map(|i| grid.position(i)));
        assert_relative_eq!(psi.expectation_diagonal(&x), 8.0, epsilon = 1e-9);
        // |ψ|² variance equals width².
        let x2 = x.map(|v| (v - 8.0) * (v - 8.0));
        assert_relative_eq!(psi.expectation_diagonal(&x2), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn density_matrix_from_pure_state_is_valid() {
        let grid = grid1(16, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let psi = WaveFunction::random(grid, &mut rng);
        let rho = psi.density_matrix();
        rho.validate().unwrap();
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn expectations_agree_between_conventions() {
        let grid = grid1(12, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let psi = WaveFunction::random(grid, &mut rng);
        let op = {
            let a = CMat::from_fn(12, 12, |i, j| {
                Complex64::new((i * j) as f64 * 0.01, i as f64 - j as f64)
            });
            (&a + a.adjoint()) * c(0.5)
        };
        let via_psi = psi.expectation(&op);
        let via_rho = psi.density_matrix().expectation(&op);
        assert_relative_eq!(via_psi, via_rho, epsilon = 1e-10);
    }

    #[test]
    fn position_eigenstate_probabilities_are_sharp() {
        let grid = GridSpec::new(6, 0.3, 2).unwrap();
        let psi = WaveFunction::position_eigenstate(grid, &[2, 5]).unwrap();
        let p = psi.probabilities();
        assert_relative_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(p[grid.config_index(&[2, 5])], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn partial_trace_of_product_recovers_factors() {
        let single = grid1(5, 0.4);
        let pair = GridSpec::new(5, 0.4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = WaveFunction::random(single, &mut rng);
        let b = WaveFunction::random(single, &mut rng);
        let psi = WaveFunction::product(pair, &[a.clone(), b.clone()]).unwrap();
        let rho = psi.density_matrix();
        let rho_a = rho.partial_trace(&[0]).unwrap();
        let rho_b = rho.partial_trace(&[1]).unwrap();
        assert!(rho_a.frobenius_distance(&a.density_matrix()) < 1e-12);
        assert!(rho_b.frobenius_distance(&b.density_matrix()) < 1e-12);
    }

    #[test]
    fn partial_trace_matches_schmidt_spectrum() {
        // Both reduced states of a random pure bipartite state share the
        // same non-zero spectrum.
        let pair = GridSpec::new(6, 0.9, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let psi = WaveFunction::random(pair, &mut rng);
        let rho = psi.density_matrix();
        let ea = hermitian_eigenvalues(rho.partial_trace(&[0]).unwrap().matrix());
        let eb = hermitian_eigenvalues(rho.partial_trace(&[1]).unwrap().matrix());
        for (a, b) in ea.iter().zip(eb.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn partial_trace_ignores_channels_on_discarded_particle() {
        // A Kraus channel on the discarded particle leaves the kept reduced
        // state untouched.
        let n = 4;
        let pair = GridSpec::new(n, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = DensityMatrix::random(pair, &mut rng);

        // Random channel on particle 1: two Kraus operators A, B with
        // A†A + B†B = 1, built from a random contraction.
        let raw = CMat::from_fn(n, n, |_, _| {
            Complex64::new(
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            )
        }) * c(0.1);
        let a_dag_a = raw.adjoint() * &raw;
        let (values, v) = crate::linalg::hermitian_eigen(&(CMat::identity(n, n) - a_dag_a));
        let sqrt = &v
            * CMat::from_diagonal(&CVec::from_iterator(n, values.iter().map(|&e| c(e.max(0.0).sqrt()))))
            * v.adjoint();
        let id = CMat::identity(n, n);
        let k1 = id.kronecker(&raw);
        let k2 = id.kronecker(&sqrt);
        let after = &k1 * rho.matrix() * k1.adjoint() + &k2 * rho.matrix() * k2.adjoint();
        let after = DensityMatrix::new(after, pair).unwrap();

        let before_reduced = rho.partial_trace(&[0]).unwrap();
        let after_reduced = after.partial_trace(&[0]).unwrap();
        assert!(before_reduced.frobenius_distance(&after_reduced) < 1e-10);
    }

    #[test]
    fn validation_rejects_defects() {
        let grid = grid1(4, 1.0);
        let dim = 4;
        let mut m = CMat::identity(dim, dim) / c(dim as f64);
        m[(0, 1)] = c(0.3);
        assert!(DensityMatrix::new(m.clone(), grid).is_err());
        m[(1, 0)] = c(0.3);
        // Hermitian and unit trace, but indefinite: eigenvalue 0.25 ± 0.3.
        assert!(DensityMatrix::new(m, grid).is_err());
        let bad_trace = CMat::identity(dim, dim);
        assert!(DensityMatrix::new(bad_trace, grid).is_err());
    }
}
