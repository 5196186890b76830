//! Operational signalling test: can a local action on one party's side be
//! read off the other party's reduced state later?
//!
//! The harness prepares an entangled two-particle state, lets Bob act on
//! his factor at time zero (or not), evolves both scenarios with the
//! chosen model, and compares Alice's reduced states by trace distance.
//!
//! For the linear models the evolution is the averaged generator, and the
//! comparison probes the structure of that generator. When it contains no
//! coupling between the parties, the distance vanishes identically: every
//! generator term acting on Bob's factor alone is trace annihilating, so
//! Bob's side of any power of the generator dies under the partial trace
//! before Alice can see it. With gravitational coupling switched on there
//! is a genuine second-order residual of size ~t²·⟨k²⟩_B·G·m_A·ΔK (Bob's
//! kinetic spread times the potential contrast across Alice's coherence),
//! which is the ordinary, causal influence of Bob's mass distribution and
//! stays at integrator-noise level for soft, heavy pointers.
//!
//! The self-gravitating model has no linear averaged form. The measured
//! scenario is evolved branch by branch: project Bob onto each occupied
//! cell, evolve each projected product state under the full nonlinear
//! flow, and mix the results with the Born weights. Because each branch
//! sources its own field, the mixture differs from the evolved
//! superposition by an amount that grows with the masses, and Bob's
//! forgotten measurement becomes visible to Alice.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::continuous::ContinuousModel;
use crate::ensemble::{reference_integrate, trace_distance};
use crate::error::{Error, Result};
use crate::flash::FlashModel;
use crate::grid::GridSpec;
use crate::linalg::{c, CMat, CVec};
use crate::sn::{evolve_sn, SNParams};
use crate::state::{DensityMatrix, WaveFunction};

/// Branch weights below this are dropped from the measured scenario.
const BRANCH_PROBABILITY_FLOOR: f64 = 1e-12;

/// Tolerance for validating a channel's Schur coefficient matrix.
const CHANNEL_MATRIX_TOL: f64 = 1e-9;

/// Which dynamics evolves the two scenarios. The linear entries carry the
/// integrator step for the averaged equation of motion.
pub enum ComparisonModel<'a> {
    Flash { model: &'a FlashModel, step: f64 },
    Continuous { model: &'a ContinuousModel, step: f64 },
    SelfGravitating { params: &'a SNParams },
}

impl ComparisonModel<'_> {
    fn grid(&self) -> GridSpec {
        match self {
            ComparisonModel::Flash { model, .. } => model.grid(),
            ComparisonModel::Continuous { model, .. } => model.grid(),
            ComparisonModel::SelfGravitating { .. } => {
                unreachable!("self-gravitating grid comes from the state")
            }
        }
    }
}

/// What Bob does to his factor at time zero.
///
/// `MeasureAndForget` is a projective position measurement with the
/// outcome discarded: full dephasing of Bob's position coherences for the
/// linear models, explicit branch-wise evolution for the self-gravitating
/// one. `DiagonalChannel` applies a general position-diagonal channel
/// given by its Schur coefficients C (Hermitian, positive semidefinite,
/// unit diagonal): ρ entries pick up the factor C[(j, j')] on Bob's
/// indices. Linear models only; a nonlinear flow has no well-defined
/// action on the resulting mixture.
pub enum BobAction {
    Nothing,
    MeasureAndForget,
    DiagonalChannel(CMat),
}

impl BobAction {
    fn validate(&self, points: usize) -> Result<()> {
        if let BobAction::DiagonalChannel(coeffs) = self {
            if coeffs.nrows() != points || coeffs.ncols() != points {
                return Err(Error::DimensionMismatch(format!(
                    "channel matrix is {}×{}, Bob's axis has {points} cells",
                    coeffs.nrows(),
                    coeffs.ncols()
                )));
            }
            let scale = coeffs.norm().max(1.0);
            if (coeffs - coeffs.adjoint()).norm() > CHANNEL_MATRIX_TOL * scale {
                return Err(Error::InvalidParameter(
                    "channel matrix must be Hermitian".into(),
                ));
            }
            for j in 0..points {
                if (coeffs[(j, j)] - c(1.0)).norm() > CHANNEL_MATRIX_TOL {
                    return Err(Error::InvalidParameter(
                        "channel matrix must have a unit diagonal".into(),
                    ));
                }
            }
            let min_eig = coeffs
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .min();
            if min_eig < -CHANNEL_MATRIX_TOL * scale {
                return Err(Error::InvalidParameter(format!(
                    "channel matrix must be positive semidefinite, minimum eigenvalue {min_eig}"
                )));
            }
        }
        Ok(())
    }
}

/// Alice's reduced states with and without Bob's action, and their trace
/// distance.
pub struct NoSignallingReport {
    pub alice_baseline: DensityMatrix,
    pub alice_after_action: DensityMatrix,
    pub distance: f64,
}

/// Runs both scenarios and compares Alice's reduced states.
///
/// The state must live on a two-particle grid, Alice first. `t_final`
/// must sit on the step grid of the chosen dynamics.
pub fn no_signalling_test(
    model: &ComparisonModel,
    entangled: &WaveFunction,
    action: &BobAction,
    t_final: f64,
) -> Result<NoSignallingReport> {
    let grid = entangled.grid();
    if grid.particles() != 2 {
        return Err(Error::InvalidParameter(format!(
            "the signalling comparison needs exactly two particles, got {}",
            grid.particles()
        )));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "comparison time must be > 0, got {t_final}"
        )));
    }
    match model {
        ComparisonModel::SelfGravitating { params } => params.validate(grid)?,
        _ => {
            if model.grid() != grid {
                return Err(Error::DimensionMismatch(
                    "model and state live on different grids".into(),
                ));
            }
        }
    }
    action.validate(grid.points())?;
    if matches!(model, ComparisonModel::SelfGravitating { .. })
        && matches!(action, BobAction::DiagonalChannel(_))
    {
        return Err(Error::InvalidParameter(
            "general channels are only defined for the linear models".into(),
        ));
    }

    let (baseline, acted) = rayon::join(
        || alice_after(model, entangled, &BobAction::Nothing, t_final),
        || alice_after(model, entangled, action, t_final),
    );
    let alice_baseline = baseline?;
    let alice_after_action = acted?;
    let distance = trace_distance(&alice_baseline, &alice_after_action);
    Ok(NoSignallingReport {
        alice_baseline,
        alice_after_action,
        distance,
    })
}

/// Alice's reduced state at `t_final` for one scenario.
fn alice_after(
    model: &ComparisonModel,
    entangled: &WaveFunction,
    action: &BobAction,
    t_final: f64,
) -> Result<DensityMatrix> {
    match model {
        ComparisonModel::Flash { model, step } => linear_scenario(
            |r| model.master_generator(r),
            entangled,
            action,
            t_final,
            *step,
        ),
        ComparisonModel::Continuous { model, step } => linear_scenario(
            |r| model.master_generator(r),
            entangled,
            action,
            t_final,
            *step,
        ),
        ComparisonModel::SelfGravitating { params } => match action {
            BobAction::Nothing => {
                let evolved = evolve_sn(entangled, t_final, params)?;
                evolved.density_matrix().partial_trace(&[0])
            }
            BobAction::MeasureAndForget => branch_scenario(entangled, params, t_final),
            BobAction::DiagonalChannel(_) => Err(Error::InvalidParameter(
                "general channels are only defined for the linear models".into(),
            )),
        },
    }
}

fn linear_scenario(
    generator: impl Fn(&CMat) -> CMat,
    entangled: &WaveFunction,
    action: &BobAction,
    t_final: f64,
    step: f64,
) -> Result<DensityMatrix> {
    let rho0 = apply_bob_action(&entangled.density_matrix(), action);
    let states = reference_integrate(generator, &rho0, &[t_final], step)?;
    states
        .last()
        .expect("one sample time yields one state")
        .partial_trace(&[0])
}

/// Schur-multiplies Bob's indices with the action's coefficient matrix.
fn apply_bob_action(rho: &DensityMatrix, action: &BobAction) -> DensityMatrix {
    let coeff: Box<dyn Fn(usize, usize) -> Complex64> = match action {
        BobAction::Nothing => Box::new(|_, _| c(1.0)),
        BobAction::MeasureAndForget => Box::new(|j, jp| c(if j == jp { 1.0 } else { 0.0 })),
        BobAction::DiagonalChannel(m) => Box::new(|j, jp| m[(j, jp)]),
    };
    let grid = rho.grid();
    let n = grid.points();
    let acted = CMat::from_fn(grid.dim(), grid.dim(), |a, b| {
        rho.matrix()[(a, b)] * coeff(a % n, b % n)
    });
    DensityMatrix::new_unchecked(acted, grid)
}

/// Measured scenario under the nonlinear flow: project Bob onto each
/// occupied cell, evolve the projected states separately, and mix Alice's
/// reduced states with the Born weights.
fn branch_scenario(
    entangled: &WaveFunction,
    params: &SNParams,
    t_final: f64,
) -> Result<DensityMatrix> {
    let grid = entangled.grid();
    let n = grid.points();
    let probs = entangled.probabilities();
    let mut bob_weights = DVector::<f64>::zeros(n);
    for (idx, &q) in probs.iter().enumerate() {
        bob_weights[idx % n] += q;
    }

    let mut mixed = CMat::zeros(n, n);
    for j in 0..n {
        let weight = bob_weights[j];
        if weight <= BRANCH_PROBABILITY_FLOOR {
            continue;
        }
        let mut amplitudes = CVec::zeros(grid.dim());
        let scale = c(1.0 / weight.sqrt());
        for i in 0..n {
            amplitudes[i * n + j] = entangled.amplitudes()[i * n + j] * scale;
        }
        let branch = WaveFunction::from_amplitudes(grid, amplitudes)?;
        let evolved = evolve_sn(&branch, t_final, params)?;
        let reduced = evolved.density_matrix().partial_trace(&[0])?;
        mixed += reduced.matrix() * c(weight);
    }
    let sub = grid.subgrid(1)?;
    Ok(DensityMatrix::new_unchecked(mixed, sub))
}
