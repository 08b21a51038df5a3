//! Synthetic functional data, sparsification and the design-comparison
//! experiment.
//!
//! The generating model is a Karhunen–Loève expansion with Fourier
//! eigenfunctions on `[0, 1]`: `μ(t) = t + sin t`,
//! `ψ = √2 {sin 2πt, cos 2πt, sin 4πt, cos 4πt, sin 6πt, …}` and geometric
//! eigenvalues `λ_m = 10 / 2^m`.

mod experiment;

use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::criteria::CriterionError;
use crate::design::{DesignError, IncidenceMatrix};
use crate::fpca::{inner_product, trapezoid_weights, FitError, FpcaModel, SparseDataset, SubjectObs};
use crate::stream::{stream, Purpose};

pub use experiment::{
    five_number_summary, real_data_experiment, run_experiment, Cell, CellFailure, CellMetrics, CriterionRow, DenseData,
    ExperimentConfig, ExperimentResult, FailureRecord, Plan, Record, SummaryRow,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need {needed} subjects, only {available} available")]
    InsufficientSubjects { needed: usize, available: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Criterion(#[from] CriterionError),
}

/// Generating model and replication protocol of the simulation study.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SimConfig {
    /// Equally spaced points on `[0, 1]`.
    pub grid_points: usize,
    /// `λ_1 ≥ λ_2 ≥ …`; its length is the number of components.
    pub eigenvalues: Vec<f64>,
    pub sigma_e2: f64,
    pub n_datasets: usize,
    pub n_designs: usize,
    pub subject_counts: Vec<usize>,
    pub master_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid_points: 25,
            eigenvalues: (1..=5).map(|m| 10.0 / libm::pow(2.0, m as f64)).collect(),
            sigma_e2: 0.96875,
            n_datasets: 10,
            n_designs: 20,
            subject_counts: (5..=24).map(|k| 10 * k).collect(),
            master_seed: 20240601,
        }
    }
}

/// `√2 sin 2πt, √2 cos 2πt, √2 sin 4πt, …` at `t`.
pub fn fourier_basis(m: usize, t: f64) -> f64 {
    let freq = 2.0 * core::f64::consts::PI * (m / 2 + 1) as f64;
    let s = core::f64::consts::SQRT_2;
    if m % 2 == 0 {
        s * libm::sin(freq * t)
    } else {
        s * libm::cos(freq * t)
    }
}

pub fn mean_function(t: f64) -> f64 {
    t + libm::sin(t)
}

impl SimConfig {
    pub fn grid(&self) -> Vec<f64> {
        let v = self.grid_points;
        (0..v).map(|j| j as f64 / (v - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.grid_points < 2 {
            return bad("grid_points must be at least 2");
        }
        if self.eigenvalues.iter().any(|&l| !(l > 0.0)) || self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return bad("eigenvalues must be positive and non-increasing");
        }
        if !(self.sigma_e2 >= 0.0) {
            return bad("sigma_e2 must be non-negative");
        }
        if self.n_datasets == 0 || self.n_designs == 0 || self.subject_counts.is_empty() {
            return bad("n_datasets, n_designs and subject_counts must be non-empty");
        }
        if self.subject_counts.contains(&0) {
            return bad("subject counts must be positive");
        }
        // the eigenfunctions must be orthonormal on the discretised domain
        let grid = self.grid();
        let w = trapezoid_weights(&grid);
        let psi = self.eigenfunctions();
        for a in 0..psi.len() {
            for b in 0..=a {
                let target = if a == b { 1.0 } else { 0.0 };
                if libm::fabs(inner_product(&w, &psi[a], &psi[b]) - target) > 1e-3 {
                    return bad("grid too coarse for the eigenfunctions to be orthonormal");
                }
            }
        }
        Ok(())
    }

    pub fn eigenfunctions(&self) -> Vec<Vec<f64>> {
        let grid = self.grid();
        (0..self.eigenvalues.len()).map(|m| grid.iter().map(|&t| fourier_basis(m, t)).collect()).collect()
    }

    /// The generating model.
    pub fn true_model(&self) -> Result<FpcaModel, SimError> {
        let grid = self.grid();
        let mean = grid.iter().map(|&t| mean_function(t)).collect();
        Ok(FpcaModel::from_components(grid, mean, self.eigenvalues.clone(), self.eigenfunctions(), self.sigma_e2)?)
    }

    pub fn max_subjects(&self) -> usize {
        self.subject_counts.iter().copied().max().unwrap_or(0)
    }
}

/// Dense curves on the grid: the smooth trajectories and their noisy
/// observations, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// Draws `n` subjects of data set `dataset_id`. Subject `i` has its own
/// stream, so a smaller `n` yields a prefix of a larger one.
pub fn simulate_dataset(config: &SimConfig, dataset_id: usize, n: usize) -> SimulatedData {
    let grid = config.grid();
    let psi = config.eigenfunctions();
    let sd_e = libm::sqrt(config.sigma_e2);
    let mut x = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(config.master_seed, Purpose::Dataset, &[dataset_id as u64, i as u64]);
        let mut row: Vec<f64> = grid.iter().map(|&t| mean_function(t)).collect();
        for (lam, p) in config.eigenvalues.iter().zip(&psi) {
            let z: f64 = StandardNormal.sample(&mut rng);
            let xi = libm::sqrt(*lam) * z;
            for (r, pj) in row.iter_mut().zip(p) {
                *r += xi * pj;
            }
        }
        let noisy = row
            .iter()
            .map(|&xj| {
                let z: f64 = StandardNormal.sample(&mut rng);
                xj + sd_e * z
            })
            .collect();
        x.push(row);
        u.push(noisy);
    }
    SimulatedData { x, u }
}

/// Keeps, for subject `i`, the observations of row `i` of `dense` at the
/// grid points marked in row `i` of the design.
pub fn sparsify(dense: &[Vec<f64>], grid: &[f64], design: &IncidenceMatrix) -> Result<SparseDataset, SimError> {
    if design.grid_size() != grid.len() || dense.iter().any(|r| r.len() != grid.len()) {
        return Err(SimError::ShapeMismatch(alloc::format!(
            "design has {} grid points, data {}",
            design.grid_size(),
            grid.len()
        )));
    }
    if design.subjects() > dense.len() {
        return Err(SimError::ShapeMismatch(alloc::format!(
            "design has {} subjects, data only {}",
            design.subjects(),
            dense.len()
        )));
    }
    let subjects = (0..design.subjects())
        .map(|i| {
            let idx = design.row_indices(i);
            let vals = idx.iter().map(|&j| dense[i][j]).collect();
            SubjectObs::new(idx, vals)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SparseDataset::new(grid.to_vec(), subjects)?)
}
