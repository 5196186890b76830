//! Ensemble Monte Carlo driver.
//!
//! Trajectories are derandomized by a master seed plus a per-trajectory
//! stream index, summed in fixed-size batches, and the batch sums are folded
//! in batch order. The result is bitwise identical for any worker count, and
//! partial accumulators from separate processes can be merged exactly as if
//! the batches had run side by side.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::linalg::{c, trace_distance_matrices, CMat};
use crate::state::DensityMatrix;
use crate::trajectory::{SampleRequest, TrajectoryRecord};

/// A stochastic model the driver can average: given a seeded RNG and a
/// sample request, it produces one trajectory record.
pub trait TrajectoryModel: Sync {
    fn grid(&self) -> GridSpec;

    fn run_trajectory(
        &self,
        rng: &mut ChaCha8Rng,
        stream: u64,
        request: &SampleRequest,
    ) -> Result<TrajectoryRecord>;
}

/// How many trajectories to run, how they are seeded, and what to sample.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub trajectories: usize,
    pub seed: u64,
    /// Trajectories are summed in fixed batches of this size; the grouping
    /// is part of the result's identity, not a performance knob.
    pub batch_size: usize,
    pub request: SampleRequest,
}

impl EnsembleSpec {
    pub const DEFAULT_BATCH: usize = 32;

    pub fn new(trajectories: usize, seed: u64, request: SampleRequest) -> Self {
        Self {
            trajectories,
            seed,
            batch_size: Self::DEFAULT_BATCH,
            request,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::InvalidParameter("ensemble needs at least one trajectory".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        self.request.validate()
    }

    pub fn n_batches(&self) -> usize {
        (self.trajectories + self.batch_size - 1) / self.batch_size
    }

    fn batch_range(&self, batch: usize) -> std::ops::Range<usize> {
        let lo = batch * self.batch_size;
        let hi = (lo + self.batch_size).min(self.trajectories);
        lo..hi
    }
}

/// Plain sums over one batch of trajectories.
#[derive(Clone, Debug)]
struct BatchSum {
    count: usize,
    obs_sum: Vec<Vec<f64>>,
    obs_sumsq: Vec<Vec<f64>>,
    state_sum: Option<Vec<CMat>>,
}

impl BatchSum {
    fn empty(request: &SampleRequest, dim: usize) -> Self {
        let n_times = request.times.len();
        let zeros = vec![vec![0.0; n_times]; request.observables.len()];
        Self {
            count: 0,
            obs_sum: zeros.clone(),
            obs_sumsq: zeros,
            state_sum: request
                .keep_states
                .then(|| vec![CMat::zeros(dim, dim); n_times]),
        }
    }

    fn add(&mut self, record: &TrajectoryRecord, request: &SampleRequest) -> Result<()> {
        if record.observables.len() != request.observables.len() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory reported {} observable series, request has {}",
                record.observables.len(),
                request.observables.len()
            )));
        }
        for (j, (name, series)) in record.observables.iter().enumerate() {
            if name != &request.observables[j].0 || series.len() != request.times.len() {
                return Err(Error::DimensionMismatch(format!(
                    "observable series '{name}' does not match the request"
                )));
            }
            for (i, &v) in series.iter().enumerate() {
                self.obs_sum[j][i] += v;
                self.obs_sumsq[j][i] += v * v;
            }
        }
        if let Some(sums) = &mut self.state_sum {
            if record.states.len() != request.times.len() {
                return Err(Error::DimensionMismatch(
                    "trajectory did not keep the requested state snapshots".into(),
                ));
            }
            for (sum, state) in sums.iter_mut().zip(record.states.iter()) {
                *sum += state.matrix();
            }
        }
        self.count += 1;
        Ok(())
    }

    fn add_batch(&mut self, other: &BatchSum) {
        self.count += other.count;
        for (a, b) in self.obs_sum.iter_mut().zip(other.obs_sum.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.obs_sumsq.iter_mut().zip(other.obs_sumsq.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        if let (Some(mine), Some(theirs)) = (&mut self.state_sum, &other.state_sum) {
            for (a, b) in mine.iter_mut().zip(theirs.iter()) {
                *a += b;
            }
        }
    }
}

/// Partial ensemble sums keyed by batch index. Merging two accumulators is
/// a disjoint union, so any grouping of batches folds to the same result.
pub struct EnsembleAccumulator {
    grid: GridSpec,
    seed: u64,
    request: SampleRequest,
    batches: BTreeMap<usize, BatchSum>,
}

impl EnsembleAccumulator {
    pub fn merge(mut self, other: EnsembleAccumulator) -> Result<EnsembleAccumulator> {
        if self.seed != other.seed || self.grid.dim() != other.grid.dim() {
            return Err(Error::InvalidParameter(
                "accumulators come from different ensembles".into(),
            ));
        }
        for (index, sum) in other.batches {
            if self.batches.insert(index, sum).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "batch {index} is present in both accumulators"
                )));
            }
        }
        Ok(self)
    }

    /// Fold the batches in index order into means and standard errors.
    pub fn finalize(&self) -> Result<EnsembleResult> {
        let mut total = BatchSum::empty(&self.request, self.grid.dim());
        for sum in self.batches.values() {
            total.add_batch(sum);
        }
        let m = total.count;
        if m == 0 {
            return Err(Error::InvalidParameter("no trajectories accumulated".into()));
        }
        let times = self.request.times.clone();
        let mut observables = Vec::with_capacity(self.request.observables.len());
        for (j, (name, _)) in self.request.observables.iter().enumerate() {
            let mean: Vec<f64> = total.obs_sum[j].iter().map(|&s| s / m as f64).collect();
            let stderr: Vec<f64> = total.obs_sum[j]
                .iter()
                .zip(total.obs_sumsq[j].iter())
                .map(|(&s, &sq)| {
                    if m < 2 {
                        0.0
                    } else {
                        let var = (sq - s * s / m as f64).max(0.0) / (m - 1) as f64;
                        (var / m as f64).sqrt()
                    }
                })
                .collect();
            observables.push(ObservableSeries {
                name: name.clone(),
                mean,
                stderr,
            });
        }
        let mean_states = total.state_sum.as_ref().map(|sums| {
            sums.iter()
                .map(|s| DensityMatrix::new_unchecked(s.map(|z| z / c(m as f64)), self.grid))
                .collect()
        });
        Ok(EnsembleResult {
            times,
            trajectories: m,
            seed: self.seed,
            observables,
            mean_states,
        })
    }
}

/// Mean and standard error of one observable across the ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Final ensemble averages.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub trajectories: usize,
    pub seed: u64,
    pub observables: Vec<ObservableSeries>,
    pub mean_states: Option<Vec<DensityMatrix>>,
}

impl EnsembleResult {
    pub fn observable(&self, name: &str) -> Option<&ObservableSeries> {
        self.observables.iter().find(|s| s.name == name)
    }

    /// Trace distance between each mean state and a reference solution.
    pub fn distances_to(&self, reference: &[DensityMatrix]) -> Result<Vec<f64>> {
        let states = self.mean_states.as_ref().ok_or_else(|| {
            Error::InvalidParameter("ensemble was run without state snapshots".into())
        })?;
        if states.len() != reference.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} mean states vs {} reference states",
                states.len(),
                reference.len()
            )));
        }
        Ok(states
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| trace_distance(a, b))
            .collect())
    }

    pub fn to_data(&self) -> EnsembleResultData {
        EnsembleResultData {
            schema: 1,
            times: self.times.clone(),
            trajectories: self.trajectories,
            seed: self.seed,
            observables: self.observables.clone(),
            mean_states: self
                .mean_states
                .as_ref()
                .map(|states| states.iter().map(|s| MatrixData::from_matrix(s.matrix())).collect()),
        }
    }
}

/// Serializable mirror of [`EnsembleResult`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleResultData {
    pub schema: u32,
    pub times: Vec<f64>,
    pub trajectories: usize,
    pub seed: u64,
    pub observables: Vec<ObservableSeries>,
    pub mean_states: Option<Vec<MatrixData>>,
}

/// Row-major complex matrix, split into real and imaginary parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixData {
    pub dim: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &CMat) -> Self {
        let dim = m.nrows();
        let mut re = Vec::with_capacity(dim * dim);
        let mut im = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                re.push(m[(i, j)].re);
                im.push(m[(i, j)].im);
            }
        }
        Self { dim, re, im }
    }

    pub fn to_matrix(&self) -> Result<CMat> {
        if self.re.len() != self.dim * self.dim || self.im.len() != self.dim * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "matrix payload length does not match dimension {}",
                self.dim
            )));
        }
        Ok(CMat::from_fn(self.dim, self.dim, |i, j| {
            crate::linalg::C64::new(self.re[i * self.dim + j], self.im[i * self.dim + j])
        }))
    }
}

/// Run a contiguous range of batches (for sharding across processes).
pub fn run_batch_range<M: TrajectoryModel>(
    model: &M,
    spec: &EnsembleSpec,
    batches: std::ops::Range<usize>,
) -> Result<EnsembleAccumulator> {
    spec.validate()?;
    if batches.end > spec.n_batches() {
        return Err(Error::InvalidParameter(format!(
            "batch range end {} exceeds the {} batches of this ensemble",
            batches.end,
            spec.n_batches()
        )));
    }
    let dim = model.grid().dim();
    let sums: Vec<(usize, BatchSum)> = batches
        .clone()
        .into_par_iter()
        .map(|batch| {
            let mut sum = BatchSum::empty(&spec.request, dim);
            for index in spec.batch_range(batch) {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(index as u64);
                let record = model.run_trajectory(&mut rng, index as u64, &spec.request)?;
                sum.add(&record, &spec.request)?;
            }
            Ok((batch, sum))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleAccumulator {
        grid: model.grid(),
        seed: spec.seed,
        request: spec.request.clone(),
        batches: sums.into_iter().collect(),
    })
}

/// Run the whole ensemble and fold it into means and standard errors.
pub fn run_ensemble<M: TrajectoryModel>(model: &M, spec: &EnsembleSpec) -> Result<EnsembleResult> {
    run_batch_range(model, spec, 0..spec.n_batches())?.finalize()
}

/// Trace distance (1/2)‖ρ − σ‖₁ between two states.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> f64 {
    trace_distance_matrices(a.matrix(), b.matrix())
}

/// Integrate dρ/dt = generator(ρ) with classical fixed-step RK4 and return
/// the states at the requested sample times.
///
/// The generator must be trace annihilating (its output at the initial state
/// is spot checked); each sample time must sit on the step grid. The final
/// trace is verified to stay within 1e-6 of one.
pub fn reference_integrate(
    generator: impl Fn(&CMat) -> CMat,
    initial: &DensityMatrix,
    sample_times: &[f64],
    dt: f64,
) -> Result<Vec<DensityMatrix>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let mut prev = -1.0;
    let mut target_steps = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        if t < 0.0 || t <= prev {
            return Err(Error::InvalidParameter(
                "sample times must be non-negative and strictly increasing".into(),
            ));
        }
        let steps = (t / dt).round();
        if (steps * dt - t).abs() > 1e-9 * dt.max(t) {
            return Err(Error::InvalidParameter(format!(
                "sample time {t} is not a multiple of dt = {dt}"
            )));
        }
        target_steps.push(steps as u64);
        prev = t;
    }
    let total_steps = *target_steps.last().unwrap_or(&0);
    if total_steps > 50_000_000 {
        return Err(Error::InvalidParameter(format!(
            "integration would take {total_steps} steps; increase dt"
        )));
    }

    let probe = generator(initial.matrix());
    let probe_trace = crate::linalg::trace(&probe).norm();
    let probe_scale = crate::linalg::frobenius(&probe).max(1e-300);
    if probe_trace > 1e-8 * probe_scale.max(1.0) {
        return Err(Error::MatrixProperty {
            property: "trace annihilating",
            residual: probe_trace,
            tolerance: 1e-8 * probe_scale.max(1.0),
        });
    }

    let mut rho = initial.matrix().clone();
    let mut out = Vec::with_capacity(sample_times.len());
    let mut next_target = 0usize;
    let mut step = 0u64;
    loop {
        while next_target < target_steps.len() && target_steps[next_target] == step {
            out.push(DensityMatrix::new_unchecked(rho.clone(), initial.grid()));
            next_target += 1;
        }
        if next_target == target_steps.len() {
            break;
        }
        let k1 = generator(&rho);
        let k2 = generator(&(&rho + &k1 * c(dt / 2.0)));
        let k3 = generator(&(&rho + &k2 * c(dt / 2.0)));
        let k4 = generator(&(&rho + &k3 * c(dt)));
        rho += (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(dt / 6.0);
        step += 1;
    }
    let drift = (crate::linalg::trace(&rho).re - 1.0).abs();
    if drift > 1e-6 {
        return Err(Error::Numerical(format!(
            "trace drifted by {drift:.3e} during reference integration"
        )));
    }
    Ok(out)
}

/// Least-squares fit of log y = slope·log x + intercept. Returns
/// (slope, intercept); all points must be positive.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("power-law fit needs at least two points".into()));
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let n = points.len() as f64;
    for &(x, y) in points {
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "power-law fit needs positive points, got ({x}, {y})"
            )));
        }
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return Err(Error::InvalidParameter("power-law fit points are degenerate".into()));
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Ok((slope, intercept))
}
