//! Benchmark fixtures shared by the criterion targets.

use punce_core::data::Label;
use punce_core::losses::EmbeddedBatch;
use punce_core::numerics::{row_l2_normalize, Matrix, RngStream};

/// Random unit-norm batch of `2b` views in `k` dimensions with the first
/// `labeled` sources marked positive.
pub fn random_batch(b: usize, k: usize, labeled: usize, seed: u64) -> EmbeddedBatch {
    let mut rng = RngStream::new(seed, 0);
    let n = 2 * b;
    let raw = Matrix::from_vec(n, k, (0..n * k).map(|_| rng.normal()).collect()).unwrap();
    let z = row_l2_normalize(&raw).unwrap();
    let s: Vec<bool> = (0..n).map(|i| i / 2 < labeled).collect();
    let y = s.iter().map(|&s| s.then_some(Label::Positive)).collect();
    EmbeddedBatch::new(z, (0..n).map(|i| i ^ 1).collect(), s, y, 0.5).unwrap()
}
