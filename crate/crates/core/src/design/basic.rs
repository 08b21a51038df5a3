use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DesignError, DesignSpec, IncidenceMatrix, Structure};

/// Independent uniform K-subsets, one per subject.
pub fn generate_random_design(spec: &DesignSpec) -> Result<IncidenceMatrix, DesignError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows: Vec<Vec<usize>> =
        (0..spec.n).map(|_| rand::seq::index::sample(&mut rng, spec.v, spec.k).into_vec()).collect();
    Ok(IncidenceMatrix::from_index_rows(spec.v, &rows, Structure::Random, 0))
}

/// One run of K consecutive grid points per subject. The first pass over
/// subjects uses start positions `1..=v-K+1` in order; later passes use
/// seeded shuffles of the same positions.
pub fn generate_snippet_design(spec: &DesignSpec) -> Result<IncidenceMatrix, DesignError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let starts: Vec<usize> = (0..=spec.v - spec.k).collect();
    let mut order = starts.clone();
    let mut rows = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let slot = i % starts.len();
        if slot == 0 && i > 0 {
            order.copy_from_slice(&starts);
            order.shuffle(&mut rng);
        }
        let s = order[slot];
        rows.push((s..s + spec.k).collect::<Vec<_>>());
    }
    Ok(IncidenceMatrix::from_index_rows(spec.v, &rows, Structure::Snippet, spec.n))
}
