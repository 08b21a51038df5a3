//! File formats, parallel experiment execution and plotting on top of
//! [`pilotdesign_core`]. The `pilotdesign` binary is the command-line front end.

pub mod io;
pub mod plot;

pub use pilotdesign_core::{criteria, design, fpca, search, sim, stream, subsets};

use pilotdesign_core::sim::{ExperimentResult, Plan};
use rayon::prelude::*;

/// Evaluates every cell of `plan` on `threads` workers. The result does not
/// depend on the thread count.
pub fn run_plan(plan: &Plan, threads: usize) -> Result<ExperimentResult, rayon::ThreadPoolBuildError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
    let cells = plan.cells();
    let outcomes = pool.install(|| cells.par_iter().map(|c| plan.run_cell(c)).collect());
    Ok(plan.assemble(outcomes))
}
