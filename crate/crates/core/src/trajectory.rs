//! Per-trajectory sampling: what a stochastic run records and how callers
//! describe which quantities they want sampled.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::flash::FlashEvent;
use crate::linalg::CMat;
use crate::state::{DensityMatrix, WaveFunction};

/// An observable to be evaluated at each sample time. Position-like
/// quantities on a grid are diagonal; anything else is a dense Hermitian
/// matrix.
#[derive(Clone, Debug)]
pub enum Observable {
    Dense(CMat),
    Diagonal(DVector<f64>),
}

impl Observable {
    pub fn dim(&self) -> usize {
        match self {
            Observable::Dense(m) => m.nrows(),
            Observable::Diagonal(d) => d.len(),
        }
    }

    pub fn expectation_state(&self, rho: &DensityMatrix) -> f64 {
        match self {
            Observable::Dense(m) => rho.expectation(m),
            Observable::Diagonal(d) => rho.expectation_diagonal(d),
        }
    }

    pub fn expectation_wavefunction(&self, psi: &WaveFunction) -> f64 {
        match self {
            Observable::Dense(m) => psi.expectation(m),
            Observable::Diagonal(d) => psi.expectation_diagonal(d),
        }
    }
}

/// What a trajectory run should sample: at which times, which named
/// observables, and whether to keep full state snapshots.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub times: Vec<f64>,
    pub observables: Vec<(String, Observable)>,
    pub keep_states: bool,
}

impl SampleRequest {
    pub fn new(times: Vec<f64>) -> Self {
        Self {
            times,
            observables: Vec::new(),
            keep_states: false,
        }
    }

    pub fn with_observable(mut self, name: impl Into<String>, observable: Observable) -> Self {
        self.observables.push((name.into(), observable));
        self
    }

    pub fn keeping_states(mut self) -> Self {
        self.keep_states = true;
        self
    }

    /// Sample times must be finite, non-negative, and strictly increasing.
    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::InvalidParameter("at least one sample time is required".into()));
        }
        let mut prev = -1.0;
        for &t in &self.times {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidParameter(format!("sample time {t} is not usable")));
            }
            if t <= prev {
                return Err(Error::InvalidParameter(
                    "sample times must be strictly increasing".into(),
                ));
            }
            prev = t;
        }
        Ok(())
    }
}

/// Everything one stochastic trajectory reports back.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    /// Sample times, identical to the requested ones.
    pub times: Vec<f64>,
    /// One series per requested observable, in request order.
    pub observables: Vec<(String, Vec<f64>)>,
    /// State snapshots at the sample times; empty unless requested.
    pub states: Vec<DensityMatrix>,
    /// Jump events in time order; empty for diffusive models.
    pub flashes: Vec<FlashEvent>,
    /// RNG stream index that produced this trajectory.
    pub stream: u64,
}

impl TrajectoryRecord {
    pub fn observable(&self, name: &str) -> Option<&[f64]> {
        self.observables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}
