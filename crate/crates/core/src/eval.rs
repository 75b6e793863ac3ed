//! Time-dependent concordance over predicted survival curves, with
//! percentile-bootstrap confidence intervals.
//!
//! A pair (i, j) is comparable when subject i has an observed event strictly
//! before j's observed time; the pair is concordant when i's predicted
//! survival at its own event time is lower than j's at that same time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survival::SurvivalCurve;

/// Two survival values closer than this count as tied (worth half a pair).
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("no comparable pairs; concordance is undefined")]
    NoComparablePairs,
    #[error("all bootstrap replicates were degenerate")]
    AllReplicatesDegenerate,
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtdResult {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pairs: u64,
    pub n_boot: usize,
}

fn check(curves: &[SurvivalCurve], times: &[f64], events: &[u8]) -> Result<(), EvalError> {
    if curves.is_empty() {
        return Err(EvalError::Empty);
    }
    if curves.len() != times.len() || curves.len() != events.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} curves, {} times, {} events",
            curves.len(),
            times.len(),
            events.len()
        )));
    }
    Ok(())
}

/// `evals[i * n + j]` = subject j's predicted survival at subject i's
/// observed time; reused across bootstrap replicates.
fn eval_matrix(curves: &[SurvivalCurve], times: &[f64]) -> Vec<f64> {
    let n = curves.len();
    let mut evals = vec![0.0; n * n];
    for i in 0..n {
        for (j, curve) in curves.iter().enumerate() {
            evals[i * n + j] = curve.eval(times[i]);
        }
    }
    evals
}

/// Concordant mass and comparable-pair count over the subject multiset
/// `idx`; `None` when no pair is comparable.
fn ctd_over(
    evals: &[f64],
    n: usize,
    times: &[f64],
    events: &[u8],
    idx: &[usize],
) -> Option<(f64, u64)> {
    let mut mass = 0.0;
    let mut pairs = 0u64;
    for &i in idx {
        if events[i] != 1 {
            continue;
        }
        for &j in idx {
            if times[i] >= times[j] {
                continue;
            }
            pairs += 1;
            let si = evals[i * n + i];
            let sj = evals[i * n + j];
            if (si - sj).abs() <= TIE_EPS {
                mass += 0.5;
            } else if si < sj {
                mass += 1.0;
            }
        }
    }
    (pairs > 0).then(|| (mass / pairs as f64, pairs))
}

/// Time-dependent concordance index over per-subject survival curves.
pub fn ctd_index(
    curves: &[SurvivalCurve],
    times: &[f64],
    events: &[u8],
) -> Result<f64, EvalError> {
    check(curves, times, events)?;
    let n = curves.len();
    let evals = eval_matrix(curves, times);
    let idx: Vec<usize> = (0..n).collect();
    ctd_over(&evals, n, times, events, &idx)
        .map(|(score, _)| score)
        .ok_or(EvalError::NoComparablePairs)
}

/// Linear-interpolation percentile of pre-sorted values, `p` in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Percentile bootstrap over test subjects: resample with replacement,
/// recompute the concordance per replicate (replicates without comparable
/// pairs are skipped and logged), report the 2.5th/97.5th percentiles.
pub fn bootstrap_ci(
    curves: &[SurvivalCurve],
    times: &[f64],
    events: &[u8],
    n_boot: usize,
    seed: u64,
) -> Result<CtdResult, EvalError> {
    check(curves, times, events)?;
    if n_boot < 100 {
        return Err(EvalError::BadConfig(format!(
            "n_boot {n_boot} must be >= 100"
        )));
    }
    let n = curves.len();
    let evals = eval_matrix(curves, times);
    let all: Vec<usize> = (0..n).collect();
    let (point, n_pairs) =
        ctd_over(&evals, n, times, events, &all).ok_or(EvalError::NoComparablePairs)?;

    let mut scores = Vec::with_capacity(n_boot);
    let mut skipped = 0usize;
    for rep in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add((rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        match ctd_over(&evals, n, times, events, &idx) {
            Some((s, _)) => scores.push(s),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("bootstrap: skipped {skipped} of {n_boot} degenerate replicates");
    }
    if scores.is_empty() {
        return Err(EvalError::AllReplicatesDegenerate);
    }
    scores.sort_by(f64::total_cmp);
    let ci_low = percentile(&scores, 2.5);
    let ci_high = percentile(&scores, 97.5);
    Ok(CtdResult {
        point,
        ci_low,
        ci_high,
        n_pairs,
        n_boot,
    })
}
