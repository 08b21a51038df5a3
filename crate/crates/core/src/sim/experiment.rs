//! The replicated design comparison: for every subject count, structure,
//! design replicate and data set, sparsify, fit, and score.
//!
//! Work is split into independent [`Cell`]s so a caller can evaluate them in
//! any order or in parallel; [`Plan::assemble`] restores a fixed order.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{simulate_dataset, sparsify, SimConfig, SimError, SimulatedData};
use crate::criteria::{are_from_values, composite, rrmse, CandidateDesign, DEFAULT_COMPOSITE_WEIGHT};
use crate::design::{generate_with, DesignError, DesignSpec, HybridOptions, IncidenceMatrix, Structure};
use crate::fpca::{fit_pace, FitOptions, FpcaModel, SparseDataset, SubjectObs};
use crate::search::{search_optimal, threshold_analysis, CandidateTable, SearchMethod, ThresholdReport};
use crate::stream::{derive_seed, stream, Purpose};

/// Everything that defines one experiment run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ExperimentConfig {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub sim: SimConfig,
    pub structures: Vec<Structure>,
    /// Observations per pilot subject, and size of the next-study design.
    pub obs_per_subject: usize,
    pub snippet_frac: f64,
    /// Starting concurrence tolerance for hybrid designs.
    pub delta: f64,
    /// A hybrid construction that fails is retried with `delta + delta_step`,
    /// up to `delta_max`.
    pub delta_step: f64,
    pub delta_max: f64,
    pub gap: usize,
    pub hybrid: HybridOptions,
    pub thresholds: Vec<f64>,
    pub composite_weight: f64,
    pub search: SearchMethod,
    pub fit: FitOptions,
    /// Largest fraction of failed cells tolerated before the run counts as failed.
    pub failure_tolerance: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            structures: alloc::vec![Structure::Bibd, Structure::Random, Structure::Hybrid],
            obs_per_subject: 5,
            snippet_frac: 0.2,
            delta: 1.0,
            delta_step: 0.5,
            delta_max: 5.0,
            gap: 2,
            hybrid: HybridOptions::default(),
            thresholds: crate::search::DEFAULT_THRESHOLDS.to_vec(),
            composite_weight: DEFAULT_COMPOSITE_WEIGHT,
            search: SearchMethod::Exhaustive,
            fit: FitOptions::default(),
            failure_tolerance: 0.05,
        }
    }
}

impl ExperimentConfig {
    fn validate(&self, v: usize) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.structures.is_empty() {
            return bad("no structures".into());
        }
        if self.obs_per_subject == 0 || self.obs_per_subject > v {
            return bad(alloc::format!("obs_per_subject must be in 1..={}", v));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("thresholds must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.composite_weight) {
            return bad("composite_weight must lie in [0, 1]".into());
        }
        if !(self.delta >= 0.0) || !(self.delta_step > 0.0) || !(self.delta_max >= self.delta) {
            return bad("need 0 <= delta <= delta_max and delta_step > 0".into());
        }
        if !(0.0..=1.0).contains(&self.failure_tolerance) {
            return bad("failure_tolerance must lie in [0, 1]".into());
        }
        let mut counts = self.sim.subject_counts.clone();
        counts.sort_unstable();
        counts.dedup();
        if counts.len() != self.sim.subject_counts.len() {
            return bad("subject_counts contains duplicates".into());
        }
        Ok(())
    }
}

/// A dense data set with possibly missing (`NaN`) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseData {
    pub grid: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl DenseData {
    fn to_sparse(&self) -> Result<SparseDataset, SimError> {
        let subjects = self
            .rows
            .iter()
            .map(|r| {
                let idx: Vec<usize> = (0..r.len()).filter(|&j| !r[j].is_nan()).collect();
                let vals = idx.iter().map(|&j| r[j]).collect();
                SubjectObs::new(idx, vals)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SparseDataset::new(self.grid.clone(), subjects)?)
    }
}

/// One work item: a (structure, subject count, design replicate, data set).
/// All fields are 0-based positions into the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub structure: usize,
    pub count: usize,
    pub design: usize,
    pub dataset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub are: f64,
    pub rrmse: f64,
    pub composite: f64,
    pub t_opt: CandidateDesign,
    pub t_star: CandidateDesign,
    pub f_at_opt: f64,
    pub f_at_star: f64,
    pub rrmse_excluded: usize,
    pub components: usize,
    pub sigma_e2: f64,
    pub thresholds: Vec<ThresholdReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub stage: &'static str,
    pub message: String,
}

/// A long-format result record. `dataset` is `None` for the across-data-set
/// mean of a design. Ids are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub structure: Structure,
    pub n: usize,
    pub dataset: Option<usize>,
    pub design: usize,
    pub metric: String,
    pub value: f64,
}

/// One row of the per-cell criterion table.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionRow {
    pub structure: Structure,
    pub n: usize,
    pub dataset: usize,
    pub design: usize,
    /// Seed of the pilot design.
    pub seed: u64,
    pub are: f64,
    pub rrmse: f64,
    pub composite: f64,
    pub t_opt: CandidateDesign,
    pub t_star: CandidateDesign,
}

/// Box-plot statistics of the design means for one (structure, n, metric).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub structure: Structure,
    pub n: usize,
    pub metric: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// A failed cell, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    pub structure: Structure,
    pub n: usize,
    pub dataset: usize,
    pub design: usize,
    pub stage: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<Record>,
    pub criteria: Vec<CriterionRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<FailureRecord>,
    pub cells: usize,
}

impl ExperimentResult {
    pub fn failure_fraction(&self) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            self.failures.len() as f64 / self.cells as f64
        }
    }

    /// Mean records of one metric for a (structure, n).
    pub fn design_means(&self, structure: Structure, n: usize, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.structure == structure && r.n == n && r.dataset.is_none() && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary_for(&self, structure: Structure, n: usize, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.structure == structure && r.n == n && r.metric == metric)
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(min, q1, median, q3, max)`; `None` for empty input.
pub fn five_number_summary(values: &[f64]) -> Option<[f64; 5]> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some([s[0], quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75), s[s.len() - 1]])
}

struct DesignSlot {
    seed: u64,
    delta: f64,
    design: Result<IncidenceMatrix, DesignError>,
}

enum Source {
    Synthetic(Vec<SimulatedData>),
    Real {
        rows: Vec<Vec<f64>>,
        /// Trajectories recovered by the full-data fit.
        trajectories: Vec<Vec<f64>>,
        /// Per data set, a random order of all subjects.
        orders: Vec<Vec<usize>>,
    },
}

/// Prepared shared state of a run: truth, designs and data.
pub struct Plan {
    config: ExperimentConfig,
    grid: Vec<f64>,
    truth: FpcaModel,
    truth_table: CandidateTable,
    t_star: CandidateDesign,
    f_at_star: f64,
    designs: Vec<DesignSlot>,
    source: Source,
}

impl Plan {
    /// Simulation study with the generating model as truth.
    pub fn synthetic(config: &ExperimentConfig) -> Result<Plan, SimError> {
        config.sim.validate()?;
        let truth = config.sim.true_model()?;
        let datasets =
            (0..config.sim.n_datasets).map(|d| simulate_dataset(&config.sim, d, config.sim.max_subjects())).collect();
        Plan::build(config, truth, Source::Synthetic(datasets))
    }

    /// Real-data study: the fit to the full dense data is the truth and the
    /// pilot samples are drawn from its subjects without replacement.
    pub fn real(dense: &DenseData, config: &ExperimentConfig) -> Result<Plan, SimError> {
        let needed = config.sim.max_subjects();
        if dense.rows.len() < needed {
            return Err(SimError::InsufficientSubjects { needed, available: dense.rows.len() });
        }
        if config.sim.n_datasets == 0 || config.sim.n_designs == 0 || needed == 0 {
            return Err(SimError::InvalidConfig("empty protocol".into()));
        }
        let full = dense.to_sparse()?;
        let truth = fit_pace(&full, &config.fit)?;
        let trajectories = full
            .subjects
            .iter()
            .map(|s| truth.recover_trajectory(&truth.predict_scores(s)?))
            .collect::<Result<Vec<_>, _>>()?;
        let orders = (0..config.sim.n_datasets)
            .map(|d| {
                let mut order: Vec<usize> = (0..dense.rows.len()).collect();
                order.shuffle(&mut stream(config.sim.master_seed, Purpose::Subsample, &[d as u64]));
                order
            })
            .collect();
        Plan::build(config, truth, Source::Real { rows: dense.rows.clone(), trajectories, orders })
    }

    fn build(config: &ExperimentConfig, truth: FpcaModel, source: Source) -> Result<Plan, SimError> {
        let grid = truth.grid.clone();
        let v = grid.len();
        config.validate(v)?;
        let k = config.obs_per_subject;
        let truth_table = CandidateTable::build(&truth, k)?;
        let (t_star, f_at_star) = match &config.search {
            SearchMethod::Exhaustive => {
                let (i, f) = truth_table.argmax();
                (truth_table.design(i), f)
            }
            method => {
                let s = search_optimal(&truth, k, method)?;
                (s.design, s.value)
            }
        };
        let mut designs = Vec::new();
        for &s in &config.structures {
            for &n in &config.sim.subject_counts {
                for g in 0..config.sim.n_designs {
                    designs.push(make_design(config, s, n, v, g));
                }
            }
        }
        Ok(Plan { config: config.clone(), grid, truth, truth_table, t_star, f_at_star, designs, source })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn truth(&self) -> &FpcaModel {
        &self.truth
    }

    /// All cells in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let c = &self.config.sim;
        let mut out = Vec::new();
        for structure in 0..self.config.structures.len() {
            for count in 0..c.subject_counts.len() {
                for design in 0..c.n_designs {
                    for dataset in 0..c.n_datasets {
                        out.push(Cell { structure, count, design, dataset });
                    }
                }
            }
        }
        out
    }

    fn slot(&self, cell: &Cell) -> &DesignSlot {
        let c = &self.config.sim;
        &self.designs[(cell.structure * c.subject_counts.len() + cell.count) * c.n_designs + cell.design]
    }

    /// The pilot design of a cell (shared by all of its data sets).
    pub fn design(&self, cell: &Cell) -> Result<&IncidenceMatrix, &DesignError> {
        self.slot(cell).design.as_ref()
    }

    /// Observed noisy rows and true rows for the subjects of a cell, aligned
    /// with the design rows.
    fn subjects(&self, cell: &Cell, design: &IncidenceMatrix) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), CellFailure> {
        let n = design.subjects();
        match &self.source {
            Source::Synthetic(data) => {
                let d = &data[cell.dataset];
                Ok((d.u[..n].to_vec(), d.x[..n].to_vec()))
            }
            Source::Real { rows, trajectories, orders } => {
                // a subject missing any of its row's points is skipped in favour
                // of the next one in this data set's order
                let mut order = orders[cell.dataset].iter();
                let mut u = Vec::with_capacity(n);
                let mut x = Vec::with_capacity(n);
                for i in 0..n {
                    let idx = design.row_indices(i);
                    let s = order.find(|&&s| idx.iter().all(|&j| !rows[s][j].is_nan())).ok_or_else(|| CellFailure {
                        stage: "subsample",
                        message: alloc::format!("ran out of complete subjects after {}", i),
                    })?;
                    u.push(rows[*s].clone());
                    x.push(trajectories[*s].clone());
                }
                Ok((u, x))
            }
        }
    }

    /// Evaluates one cell.
    pub fn run_cell(&self, cell: &Cell) -> Result<CellMetrics, CellFailure> {
        let fail = |stage: &'static str| move |e: SimError| CellFailure { stage, message: e.to_string() };
        let design = self.design(cell).map_err(|e| CellFailure { stage: "design", message: e.to_string() })?;
        let (u, x) = self.subjects(cell, design)?;
        let sparse = sparsify(&u, &self.grid, design).map_err(fail("sparsify"))?;
        let model = fit_pace(&sparse, &self.config.fit).map_err(|e| fail("fit")(e.into()))?;
        let k = self.config.obs_per_subject;

        let table = CandidateTable::build(&model, k).map_err(|e| fail("search")(e.into()))?;
        let t_opt = match &self.config.search {
            SearchMethod::Exhaustive => table.design(table.argmax().0),
            method => search_optimal(&model, k, method).map_err(|e| fail("search")(e.into()))?.design,
        };
        let f_at_opt = self.truth_table.value_of(&t_opt).expect("design from the same grid");
        let are = are_from_values(f_at_opt, self.f_at_star).map_err(|e| fail("are")(e.into()))?;

        let mut truth_obs = Vec::with_capacity(sparse.subjects.len());
        let mut fitted_obs = Vec::with_capacity(sparse.subjects.len());
        for (s, xi) in sparse.subjects.iter().zip(&x) {
            let scores = model.predict_scores(s).map_err(|e| fail("scores")(e.into()))?;
            let traj = model.recover_trajectory(&scores).map_err(|e| fail("scores")(e.into()))?;
            truth_obs.push(s.indices.iter().map(|&j| xi[j]).collect());
            fitted_obs.push(s.indices.iter().map(|&j| traj[j]).collect());
        }
        let rr = rrmse(&truth_obs, &fitted_obs).map_err(|e| fail("rrmse")(e.into()))?;
        let comp = composite(are, rr.value, self.config.composite_weight).map_err(|e| fail("composite")(e.into()))?;
        let thresholds = threshold_analysis(&table, &self.truth_table, &self.config.thresholds)
            .map_err(|e| fail("threshold")(e.into()))?;
        Ok(CellMetrics {
            are,
            rrmse: rr.value,
            composite: comp,
            t_opt,
            t_star: self.t_star.clone(),
            f_at_opt,
            f_at_star: self.f_at_star,
            rrmse_excluded: rr.excluded,
            components: model.components(),
            sigma_e2: model.sigma_e2,
            thresholds,
        })
    }

    /// Builds the result from per-cell outcomes given in [`Plan::cells`] order.
    pub fn assemble(&self, outcomes: Vec<Result<CellMetrics, CellFailure>>) -> ExperimentResult {
        let cells = self.cells();
        assert_eq!(cells.len(), outcomes.len(), "one outcome per cell");
        let c = &self.config.sim;
        let per_design = c.n_datasets;
        let mut records = Vec::new();
        let mut criteria = Vec::new();
        let mut failures = Vec::new();
        let mut summary = Vec::new();
        let mut design_means: Vec<(String, Vec<f64>)> = Vec::new();

        for (chunk_cells, chunk) in cells.chunks(per_design).zip(outcomes.chunks(per_design)) {
            let head = chunk_cells[0];
            let structure = self.config.structures[head.structure];
            let n = c.subject_counts[head.count];
            let slot = self.slot(&head);
            let mut sums: Vec<(String, f64)> = Vec::new();
            let mut used = 0usize;
            for (cell, out) in chunk_cells.iter().zip(chunk) {
                match out {
                    Ok(m) => {
                        let metrics = metric_list(m);
                        if sums.is_empty() {
                            sums = metrics.iter().map(|(k, _)| (k.clone(), 0.0)).collect();
                        }
                        for ((_, acc), (_, x)) in sums.iter_mut().zip(&metrics) {
                            *acc += x;
                        }
                        used += 1;
                        for (metric, value) in metrics {
                            records.push(Record {
                                structure,
                                n,
                                dataset: Some(cell.dataset + 1),
                                design: cell.design + 1,
                                metric,
                                value,
                            });
                        }
                        criteria.push(CriterionRow {
                            structure,
                            n,
                            dataset: cell.dataset + 1,
                            design: cell.design + 1,
                            seed: slot.seed,
                            are: m.are,
                            rrmse: m.rrmse,
                            composite: m.composite,
                            t_opt: m.t_opt.clone(),
                            t_star: m.t_star.clone(),
                        });
                    }
                    Err(f) => failures.push(FailureRecord {
                        structure,
                        n,
                        dataset: cell.dataset + 1,
                        design: cell.design + 1,
                        stage: f.stage,
                        message: f.message.clone(),
                    }),
                }
            }
            let mean_record = |metric: String, value: f64| Record {
                structure,
                n,
                dataset: None,
                design: head.design + 1,
                metric,
                value,
            };
            for (metric, sum) in &sums {
                let value = sum / used as f64;
                records.push(mean_record(metric.clone(), value));
                match design_means.iter_mut().find(|(m, _)| m == metric) {
                    Some((_, v)) => v.push(value),
                    None => design_means.push((metric.clone(), alloc::vec![value])),
                }
            }
            records.push(mean_record("datasets_used".into(), used as f64));
            if structure == Structure::Hybrid && slot.design.is_ok() {
                records.push(mean_record("delta".into(), slot.delta));
            }

            // last design of this (structure, n): emit its box-plot summary
            if head.design + 1 == c.n_designs {
                for (metric, values) in design_means.drain(..) {
                    let [min, q1, median, q3, max] = five_number_summary(&values).expect("non-empty");
                    summary.push(SummaryRow { structure, n, metric, count: values.len(), min, q1, median, q3, max });
                }
            }
        }
        ExperimentResult { records, criteria, summary, failures, cells: cells.len() }
    }

    /// Evaluates every cell sequentially.
    pub fn run(&self) -> ExperimentResult {
        let outcomes = self.cells().iter().map(|c| self.run_cell(c)).collect();
        self.assemble(outcomes)
    }
}

fn metric_list(m: &CellMetrics) -> Vec<(String, f64)> {
    let mut out = alloc::vec![
        ("are".to_string(), m.are),
        ("rrmse".to_string(), m.rrmse),
        ("composite".to_string(), m.composite),
        ("f_at_opt".to_string(), m.f_at_opt),
        ("sigma_e2_hat".to_string(), m.sigma_e2),
        ("components".to_string(), m.components as f64),
        ("rrmse_excluded".to_string(), m.rrmse_excluded as f64),
    ];
    for t in &m.thresholds {
        out.push((alloc::format!("eff_worst@{}", t.theta), t.eff_worst));
        out.push((alloc::format!("eff_median@{}", t.theta), t.eff_median));
    }
    out
}

fn make_design(config: &ExperimentConfig, s: Structure, n: usize, v: usize, g: usize) -> DesignSlot {
    let seed = derive_seed(config.sim.master_seed, Purpose::Design, &[s.id(), n as u64, g as u64]);
    let spec = DesignSpec {
        n,
        v,
        k: config.obs_per_subject,
        w: if s == Structure::Hybrid { config.snippet_frac } else { 0.0 },
        delta: config.delta,
        gap: config.gap,
        seed,
    };
    let mut delta = config.delta;
    loop {
        let attempt = generate_with(s, &DesignSpec { delta, ..spec.clone() }, &config.hybrid);
        match attempt {
            Err(DesignError::ConstructionFailed { .. }) if delta + config.delta_step <= config.delta_max + 1e-9 => {
                delta += config.delta_step;
            }
            design => return DesignSlot { seed, delta, design },
        }
    }
}

/// Runs the simulation study sequentially.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    Ok(Plan::synthetic(config)?.run())
}

/// Runs the real-data study sequentially.
pub fn real_data_experiment(dense: &DenseData, config: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    Ok(Plan::real(dense, config)?.run())
}
