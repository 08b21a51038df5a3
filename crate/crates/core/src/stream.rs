//! Named, order-independent random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of `(master seed, purpose tag, ids...)`, so results never depend on
//! the order in which work items are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Dataset,
    Design,
    Subsample,
    Heuristic,
    Tiebreak,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Dataset => 0x6461_7461,
            Purpose::Design => 0x6465_7369,
            Purpose::Subsample => 0x7375_6273,
            Purpose::Heuristic => 0x6865_7572,
            Purpose::Tiebreak => 0x7469_6562,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a master seed, a purpose and a path of ids.
pub fn derive_seed(master: u64, purpose: Purpose, ids: &[u64]) -> u64 {
    let mut h = splitmix(master ^ splitmix(purpose.tag()));
    for &id in ids {
        h = splitmix(h ^ splitmix(id.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

/// Opens the stream named by `(master, purpose, ids)`.
pub fn stream(master: u64, purpose: Purpose, ids: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, ids))
}
