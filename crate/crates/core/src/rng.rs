//! Seeded, splittable random streams.
//!
//! Every random object in a peeling run is drawn from its own ChaCha8 stream,
//! addressed by a master seed and a short path of tags such as
//! `(level, role, block)`. Re-deriving a path always reproduces the same
//! numbers, independent of which other streams have been consumed.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Role tags used when deriving per-level streams.
pub mod role {
    pub const RIGHT: u64 = 1;
    pub const LEFT: u64 = 2;
    pub const DIAGONAL: u64 = 3;
    pub const RSVD_LEFT_SELECTOR: u64 = 4;
    pub const RSVD_DIAGONAL_SELECTOR: u64 = 5;
    pub const TRIAL: u64 = 6;
    pub const MISC: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the stream tree: a master seed plus a tag path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    path: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey { seed, path: splitmix64(0) }
    }

    /// Derives the child stream for `tag`.
    pub fn child(self, tag: u64) -> Self {
        StreamKey {
            seed: self.seed,
            path: splitmix64(self.path ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    pub fn at(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |k, &t| k.child(t))
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path);
        rng
    }

    /// A derived 64-bit seed, for handing to code that wants a plain seed.
    pub fn derived_seed(self) -> u64 {
        splitmix64(self.seed ^ self.path)
    }
}

/// Fills a `rows x cols` matrix with i.i.d. standard normals (ziggurat
/// sampler), column-major draw order.
pub fn gaussian_matrix<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}
