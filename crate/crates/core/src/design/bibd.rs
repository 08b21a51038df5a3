//! The 2-(25, 5, 1) design given by the affine plane of order 5.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DesignError, IncidenceMatrix, Structure};

pub const BIBD_POINTS: usize = 25;
pub const BIBD_BLOCKS: usize = 30;
const Q: usize = 5;

/// Lines of AG(2, 5) over points `(x, y)` labelled `5x + y`: the 25 lines
/// `y = mx + b` followed by the 5 vertical lines `x = c`.
fn affine_plane_lines() -> Vec<Vec<usize>> {
    let mut lines = Vec::with_capacity(BIBD_BLOCKS);
    for m in 0..Q {
        for b in 0..Q {
            lines.push((0..Q).map(|x| Q * x + (m * x + b) % Q).collect());
        }
    }
    for c in 0..Q {
        lines.push((0..Q).map(|y| Q * c + y).collect());
    }
    lines
}

/// A 30 × 25 BIBD with `(r, λ) = (6, 1)`. The seed drives a random relabelling
/// of the 25 points, so different seeds give isomorphic designs.
pub fn generate_bibd(seed: u64) -> IncidenceMatrix {
    let base = IncidenceMatrix::from_index_rows(BIBD_POINTS, &affine_plane_lines(), Structure::Bibd, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..BIBD_POINTS).collect();
    perm.shuffle(&mut rng);
    base.permute_columns(&perm)
}

/// Stacks `n_target / b` copies of `base` (with `b` its row count) followed by
/// `n_target mod b` distinct rows of `base` drawn at random.
pub fn extend_design(base: &IncidenceMatrix, n_target: usize, seed: u64) -> Result<IncidenceMatrix, DesignError> {
    let b = base.subjects();
    if n_target == 0 || b == 0 {
        return Err(DesignError::InvalidSpec("extension needs a non-empty base and a positive target".into()));
    }
    let mut rows: Vec<usize> = Vec::with_capacity(n_target);
    for _ in 0..n_target / b {
        rows.extend(0..b);
    }
    let rest = n_target % b;
    if rest > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1BD_0000_0000_0001);
        let mut extra = rand::seq::index::sample(&mut rng, b, rest).into_vec();
        extra.sort_unstable();
        rows.extend(extra);
    }
    Ok(base.with_rows(&rows))
}
