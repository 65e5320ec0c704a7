//! Monte Carlo check of the linear-map lower bound between two random
//! projections: for `A, B` with i.i.d. entries of shape `m x k`,
//! `inf_C ||A C - B||_F^2 = ||(I - P_A) B||_F^2`, whose mean is `k (m - k)`
//! and which stays above `k (m - k) / 2` with overwhelming probability.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{projector_residual, Matrix};
use crate::synth::{derive_seed, gaussian_matrix, rng_from_seed};

pub const THEORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDist {
    /// `N(0, 1)`.
    #[default]
    Gaussian,
    /// `N(0, 2 / (m + k))`.
    XavierNormal,
    /// `U(-a, a)` with `a = sqrt(6 / (m + k))`.
    XavierUniform,
}

impl EntryDist {
    /// Per-entry variance.
    pub fn variance(self, m: usize, k: usize) -> f64 {
        match self {
            EntryDist::Gaussian => 1.0,
            EntryDist::XavierNormal | EntryDist::XavierUniform => 2.0 / (m + k) as f64,
        }
    }

    fn sample<R: Rng>(self, rng: &mut R, m: usize, k: usize) -> Matrix {
        match self {
            EntryDist::Gaussian => gaussian_matrix(rng, m, k, 1.0),
            EntryDist::XavierNormal => gaussian_matrix(rng, m, k, self.variance(m, k).sqrt()),
            EntryDist::XavierUniform => {
                let a = (6.0 / (m + k) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
                Matrix::from_fn(m, k, |_, _| u.sample(rng))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialOptions {
    pub dist: EntryDist,
    /// Debug hook: use `B = A`.
    pub tie_b_to_a: bool,
    /// Multiplies `B` after sampling.
    pub b_scale: Option<f64>,
}

fn check_dims(m: usize, k: usize) -> Result<()> {
    if k == 0 || 2 * k > m {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= m/2, got m={m}, k={k}"
        )));
    }
    Ok(())
}

/// Draws `A` then `B` from one stream seeded by `seed`.
pub fn sample_pair(m: usize, k: usize, seed: u64, opts: &TrialOptions) -> Result<(Matrix, Matrix)> {
    check_dims(m, k)?;
    let mut rng = rng_from_seed(seed);
    let a = opts.dist.sample(&mut rng, m, k);
    let mut b = if opts.tie_b_to_a {
        a.clone()
    } else {
        opts.dist.sample(&mut rng, m, k)
    };
    if let Some(s) = opts.b_scale {
        b = b.scale(s);
    }
    Ok((a, b))
}

pub fn trial_with(m: usize, k: usize, seed: u64, opts: &TrialOptions) -> Result<f64> {
    let (a, b) = sample_pair(m, k, seed, opts)?;
    projector_residual(&a, &b)
}

pub fn trial(m: usize, k: usize, seed: u64) -> Result<f64> {
    trial_with(m, k, seed, &TrialOptions::default())
}

/// Seed of trial `i` within an experiment seeded by `seed`.
pub fn trial_seed(seed: u64, i: u64) -> u64 {
    derive_seed(seed, i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub m: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub dist: EntryDist,
    pub values: Summary,
    /// `k (m - k) / 2`, scaled by the entry variance.
    pub threshold: f64,
    pub violations: usize,
    /// `k (m - k)`, scaled by the entry variance.
    pub expected_mean: f64,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn run_experiment(m: usize, k: usize, trials: usize, seed: u64) -> Result<TheoryReport> {
    run_experiment_with(m, k, trials, seed, EntryDist::Gaussian)
}

pub fn run_experiment_with(m: usize, k: usize, trials: usize, seed: u64, dist: EntryDist) -> Result<TheoryReport> {
    check_dims(m, k)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let opts = TrialOptions {
        dist,
        ..TrialOptions::default()
    };
    let values = (0..trials as u64)
        .into_par_iter()
        .map(|i| trial_with(m, k, trial_seed(seed, i), &opts))
        .collect::<Result<Vec<f64>>>()?;
    let expected_mean = (k * (m - k)) as f64 * dist.variance(m, k);
    let threshold = 0.5 * expected_mean;
    Ok(TheoryReport {
        schema_version: THEORY_SCHEMA_VERSION,
        m,
        k,
        trials,
        seed,
        dist,
        violations: values.iter().filter(|&&v| v < threshold).count(),
        values: Summary::of(&values),
        threshold,
        expected_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tied_pair_is_zero() {
        let opts = TrialOptions {
            tie_b_to_a: true,
            ..Default::default()
        };
        assert!(trial_with(4, 2, 7, &opts).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_large_k() {
        assert!(matches!(trial(8, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(trial(8, 0, 0), Err(Error::InvalidArgument(_))));
        assert!(trial(8, 4, 0).is_ok());
        assert!(run_experiment(8, 2, 0, 0).is_err());
    }

    #[test]
    fn rerun_is_bit_identical() {
        assert_eq!(trial(128, 32, 11).unwrap().to_bits(), trial(128, 32, 11).unwrap().to_bits());
    }

    #[test]
    fn single_trial_summary() {
        let r = run_experiment(16, 4, 1, 5).unwrap();
        assert_eq!(r.values.mean, r.values.min);
        assert_eq!(r.values.max, r.values.min);
        assert_eq!(r.values.stddev, 0.0);
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..100).map(|i| trial_seed(3, i)).collect();
        assert_eq!(s.len(), 100);
    }

    #[test]
    fn xavier_variants_scale_the_mean() {
        for dist in [EntryDist::XavierNormal, EntryDist::XavierUniform] {
            let r = run_experiment_with(32, 8, 400, 2, dist).unwrap();
            let rel = (r.values.mean - r.expected_mean).abs() / r.expected_mean;
            assert!(rel < 0.05, "{dist:?} rel {rel}");
        }
    }
}
