//! Grid-based random query points for descriptor training.
//!
//! Every `g x g` cell of the image receives exactly one query drawn
//! uniformly from the cell's open interior. Draws come from a counter-based
//! stream keyed by `(seed, iteration, cell)`, so the points for a given
//! iteration never depend on how many other samples were drawn before.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Pt2;

/// Query points in image-1 pixels, one per grid cell in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub points: Vec<Pt2>,
    pub grid_size: usize,
}

impl QuerySet {
    /// Wraps externally supplied query points (e.g. keypoints from another
    /// detector). No one-per-cell guarantee applies.
    pub fn from_points(points: Vec<Pt2>, grid_size: usize) -> Self {
        Self { points, grid_size }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Counter-based uniform stream: the ChaCha block counter is positioned from
/// the draw index, the stream id carries the iteration.
#[derive(Debug, Clone)]
pub struct CounterRng {
    rng: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64, iteration: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iteration);
        Self { rng }
    }

    /// Pair of uniforms in the open interval (0, 1) for draw `index`.
    pub fn open_pair(&mut self, index: u64) -> [f64; 2] {
        // Each draw consumes four 32-bit words.
        self.rng.set_word_pos(index as u128 * 4);
        [open_unit(self.rng.next_u64()), open_unit(self.rng.next_u64())]
    }

    /// Pair of uniforms in the closed interval [0, 1] for draw `index`.
    pub fn unit_pair(&mut self, index: u64) -> [f64; 2] {
        self.rng.set_word_pos(index as u128 * 4);
        [closed_unit(self.rng.next_u64()), closed_unit(self.rng.next_u64())]
    }
}

fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn closed_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / ((1u64 << 53) - 1) as f64)
}

/// Independent sub-seed for a `(tag, index)` pair (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One uniformly drawn point per `g_d x g_d` cell.
pub fn grid_random_queries(width: usize, height: usize, g_d: usize, seed: u64, iteration: u64) -> Result<QuerySet> {
    if g_d == 0 || width == 0 || height == 0 {
        return Err(Error::invalid("grid size and image dimensions must be positive"));
    }
    if !width.is_multiple_of(g_d) || !height.is_multiple_of(g_d) {
        return Err(Error::invalid(format!(
            "image {width}x{height} is not divisible by grid size {g_d}"
        )));
    }
    let (cols, rows) = (width / g_d, height / g_d);
    let g = g_d as f64;
    let mut rng = CounterRng::new(seed, iteration);
    let points = (0..rows * cols)
        .map(|cell| {
            let [a, b] = rng.open_pair(cell as u64);
            let (r, c) = (cell / cols, cell % cols);
            Pt2::new((c as f64 + a) * g, (r as f64 + b) * g)
        })
        .collect();
    Ok(QuerySet { points, grid_size: g_d })
}
