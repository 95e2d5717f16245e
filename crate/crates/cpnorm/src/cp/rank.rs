//! Fit-threshold rank estimation.
//!
//! Probes ALS fits on a coarse ramp of ranks until the threshold is reached,
//! then binary-searches the interval between the last two probes. Every
//! probe is recorded so callers can export the rank/fit curve.

use super::{cp_als_with, AlsOptions};
use crate::tensor::DenseTensor;
use crate::{Error, Result};
use std::collections::BTreeMap;

// Probe budget. A probe only needs a yes/no against the threshold, so it
// runs in short chunks and continues (warm-started) only while crossing the
// threshold within the remaining budget still looks plausible. "Plausible"
// is a linear extrapolation of the last sweep's fit gain — generous, since
// ALS fit gains decay, so a rank is never abandoned while genuinely still
// converging; plateaued probes stop after one resume.
const PROBE_FIRST_CHUNK: usize = 4;
const PROBE_CHUNK: usize = 10;
const PROBE_TOTAL_SWEEPS: usize = 30;
const PROBE_STOP_TOL: f64 = 1e-5;

/// Search configuration for [`estimate_rank`].
#[derive(Debug, Clone)]
pub struct RankSearchOptions {
    /// ALS fit that counts as "reconstructed", typically 0.999.
    pub fit_threshold: f64,
    /// Ramp spacing; defaults to `max_rank / 32` (at least 1).
    pub rank_step: Option<usize>,
    /// Search cap; defaults to the CP-rank upper bound
    /// `min_k prod_{j != k} d_j`.
    pub max_rank: Option<usize>,
    pub seed: u64,
}

impl Default for RankSearchOptions {
    fn default() -> Self {
        RankSearchOptions {
            fit_threshold: 0.999,
            rank_step: None,
            max_rank: None,
            seed: 0,
        }
    }
}

/// Result of a rank search.
#[derive(Debug, Clone)]
pub struct RankEstimate {
    /// Smallest probed rank whose fit reached the threshold, or the search
    /// cap when the threshold was never reached.
    pub rank: usize,
    /// Fit at `rank`.
    pub fit: f64,
    /// Whether the threshold was reached within the cap.
    pub converged: bool,
    /// All probed `(rank, fit)` pairs, ascending in rank.
    pub curve: Vec<(usize, f64)>,
}

/// Upper bound on the CP rank of a tensor of the given shape.
pub fn cp_rank_upper_bound(shape: &[usize]) -> usize {
    let numel: usize = shape.iter().product();
    shape.iter().map(|&d| numel / d).min().unwrap_or(0)
}

/// Estimates the smallest rank whose ALS fit reaches the threshold.
pub fn estimate_rank(target: &DenseTensor, opts: &RankSearchOptions) -> Result<RankEstimate> {
    if !(0.0..=1.0).contains(&opts.fit_threshold) {
        return Err(Error::InvalidArgument(format!(
            "fit threshold must be in [0, 1], got {}",
            opts.fit_threshold
        )));
    }
    let bound = cp_rank_upper_bound(target.shape());
    let max_rank = opts.max_rank.unwrap_or(bound).min(bound).max(1);
    let step = opts
        .rank_step
        .unwrap_or_else(|| (max_rank / 32).max(1))
        .max(1);

    let mut probes: BTreeMap<usize, f64> = BTreeMap::new();
    let probe = |r: usize, probes: &mut BTreeMap<usize, f64>| -> Result<f64> {
        if let Some(&f) = probes.get(&r) {
            return Ok(f);
        }
        let probe_seed = opts
            .seed
            .wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let als = |sweeps: usize, init| {
            cp_als_with(
                target,
                r,
                &AlsOptions {
                    max_iters: sweeps,
                    stop_tol: PROBE_STOP_TOL,
                    seed: probe_seed,
                    target_fit: Some(opts.fit_threshold),
                    init,
                },
            )
        };
        let mut result = als(PROBE_FIRST_CHUNK, None)?;
        let mut used = PROBE_FIRST_CHUNK;
        while result.fit < opts.fit_threshold && used < PROBE_TOTAL_SWEEPS {
            let remaining = PROBE_TOTAL_SWEEPS - used;
            let optimistic = result.fit + result.fit_delta.max(0.0) * remaining as f64;
            if optimistic < opts.fit_threshold {
                break;
            }
            let chunk = PROBE_CHUNK.min(remaining);
            result = als(chunk, Some(result.cp))?;
            used += chunk;
        }
        probes.insert(r, result.fit);
        Ok(result.fit)
    };

    // Coarse ramp.
    let mut lo = 0usize; // highest rank known to miss the threshold
    let mut hi: Option<usize> = None; // lowest rank known to reach it
    let mut r = step;
    loop {
        let r_clamped = r.min(max_rank);
        let f = probe(r_clamped, &mut probes)?;
        if f >= opts.fit_threshold {
            hi = Some(r_clamped);
            break;
        }
        lo = r_clamped;
        if r_clamped == max_rank {
            break;
        }
        r += step;
    }

    let estimate = match hi {
        None => {
            let fit = probes[&max_rank];
            RankEstimate {
                rank: max_rank,
                fit,
                converged: false,
                curve: probes.into_iter().collect(),
            }
        }
        Some(mut hi) => {
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                let f = probe(mid, &mut probes)?;
                if f >= opts.fit_threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let fit = probes[&hi];
            RankEstimate {
                rank: hi,
                fit,
                converged: true,
                curve: probes.into_iter().collect(),
            }
        }
    };
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{random_cp, LambdaInit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic(shape: &[usize], rank: usize, seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_cp(shape, rank, LambdaInit::Ones, &mut rng)
            .unwrap()
            .reconstruct()
    }

    #[test]
    fn upper_bound_is_min_complement_product() {
        assert_eq!(cp_rank_upper_bound(&[4, 3]), 3);
        assert_eq!(cp_rank_upper_bound(&[32, 1, 3, 3]), 9);
        assert_eq!(cp_rank_upper_bound(&[64, 32, 3, 3]), 288);
        assert_eq!(cp_rank_upper_bound(&[9216, 128]), 128);
    }

    #[test]
    fn finds_exact_rank_of_synthetic_tensor() {
        let t = synthetic(&[6, 5, 4], 3, 41);
        let est = estimate_rank(
            &t,
            &RankSearchOptions {
                rank_step: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(est.converged);
        assert_eq!(est.rank, 3);
        assert!(est.fit >= 0.999);
    }

    #[test]
    fn random_matrix_needs_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..60)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        let t = DenseTensor::new(vec![10, 6], data).unwrap();
        let est = estimate_rank(&t, &RankSearchOptions::default()).unwrap();
        assert!(est.converged);
        assert_eq!(est.rank, 6);
    }

    #[test]
    fn capped_search_reports_non_convergence() {
        let t = synthetic(&[6, 5, 4], 4, 12);
        let est = estimate_rank(
            &t,
            &RankSearchOptions {
                max_rank: Some(2),
                rank_step: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!est.converged);
        assert_eq!(est.rank, 2);
        assert!(est.fit < 0.999);
    }

    #[test]
    fn curve_is_sorted_and_contains_result() {
        let t = synthetic(&[6, 5, 4], 3, 77);
        let est = estimate_rank(
            &t,
            &RankSearchOptions {
                rank_step: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(est.curve.windows(2).all(|w| w[0].0 < w[1].0));
        let at_result = est
            .curve
            .iter()
            .find(|(r, _)| *r == est.rank)
            .expect("curve holds the result");
        assert!(at_result.1 >= 0.999);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let t = synthetic(&[5, 4, 4], 2, 3);
        let a = estimate_rank(&t, &RankSearchOptions::default()).unwrap();
        let b = estimate_rank(&t, &RankSearchOptions::default()).unwrap();
        assert_eq!(a.rank, b.rank);
        assert_eq!(a.curve, b.curve);
    }
}
