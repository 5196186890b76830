//! Numerical laboratory for Newtonian models of stochastic semiclassical
//! gravity.
//!
//! The crate implements two gravitating collapse models and the tools to
//! compare them against quantum baselines:
//!
//! * a discrete **flash** model: Poisson-distributed weak position
//!   measurements whose outcomes source gravitational kick unitaries
//!   ([`flash`]);
//! * a **continuous** model: weak monitoring of the smeared mass density with
//!   a spatial noise kernel, fed back as a gravitational potential
//!   ([`continuous`]);
//! * the kernel optimization identifying the least-decohering noise kernel
//!   ([`kernel`]);
//! * a deterministic nonlinear Schrödinger–Newton baseline ([`sn`]) together
//!   with a no-signalling comparison harness ([`nosignal`]).
//!
//! Everything runs on a one-dimensional periodic grid in units with ħ = 1
//! and the collapse length r_c as the length unit; see [`grid::GridSpec`].
//! Ensemble Monte Carlo with deterministic parallel seeding lives in
//! [`ensemble`].

#![forbid(unsafe_code)]

pub mod continuous;
pub mod ensemble;
pub mod error;
pub mod flash;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod measurement;
pub mod nosignal;
pub mod operators;
pub mod sn;
pub mod state;
pub mod trajectory;

pub use continuous::{
    averaged_generator_matrix, averaged_gravity_generator, build_feedback_spec,
    build_mass_measurement_spec, decoherence_rates, periodic_coulomb_table, ContinuousModel,
    ContinuousParams, ContinuousSource, DecoherenceRates, GravitationalFeedbackSpec,
    GravityGeneratorTerms, NoiseKernel,
};
pub use ensemble::{
    run_ensemble, trace_distance, EnsembleAccumulator, EnsembleResult, EnsembleSpec,
    TrajectoryModel,
};
pub use error::{Error, Result};
pub use flash::{gravitational_radius, FlashEvent, FlashModel, FlashParams, FlashSource};
pub use grid::{GridSpec, PhysicalConstants, UnitSystem};
pub use kernel::{
    csl_parameters, minimize_mode, minimize_modes, minimum_kernel_realspace,
    total_decoherence_mode, Coupling, RadialKernelSpec,
};
pub use linalg::{CMat, CVec, C64};
pub use measurement::{
    BackactionRule, ContinuousMeasurementSpec, DiscretePovm, SignalIncrement,
};
pub use nosignal::{no_signalling_test, BobAction, ComparisonModel, NoSignallingReport};
pub use sn::{
    evolve_sn, evolve_sn_record, marginal_probabilities, sn_energy, sn_potential, SNParams,
};
pub use state::{DensityMatrix, WaveFunction};
pub use trajectory::{Observable, SampleRequest, TrajectoryRecord};
