//! Paired permutation (sign-flip) test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 10_000;

/// Two-sided p-value for a zero mean paired difference between `x` and `y`,
/// from `iterations` random sign flips of the differences:
/// `(#{|T_perm| >= |T_obs|} + 1) / (iterations + 1)`.
///
/// Differences are sorted before use, so the result does not depend on the
/// order of the pairs.
pub fn paired_permutation_test(x: &[f64], y: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::contract("a paired test needs at least two pairs"));
    }
    if iterations == 0 {
        return Err(Error::contract("iterations must be positive"));
    }
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite paired difference".into()));
    }
    diffs.sort_by(f64::total_cmp);
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // Sign flips reorder the summation; treat rounding-level differences as ties.
    let tol = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>() / n;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..iterations {
        let t: f64 = diffs
            .iter()
            .map(|&d| if rng.random::<bool>() { d } else { -d })
            .sum::<f64>()
            / n;
        if t.abs() >= observed - tol {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (iterations + 1) as f64)
}
