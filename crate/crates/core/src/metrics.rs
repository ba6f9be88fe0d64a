//! Verification metrics: cosine scoring, TAR@FAR with a conservative
//! threshold rule, ROC curves, and k-fold threshold-selected accuracy.

use rand::seq::SliceRandom;

use crate::error::{Result, SeidError};
use crate::init::rng_for;

/// Genuine (same identity) and impostor (different identity) pair scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(SeidError::contract(
                "score set needs at least one genuine and one impostor score".to_string(),
            ));
        }
        if !self.genuine.iter().chain(&self.impostor).all(|s| s.is_finite()) {
            return Err(SeidError::contract("scores must be finite".to_string()));
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SeidError::shape(format!(
            "cosine: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SeidError::contract("cosine of a zero vector".to_string()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn fraction_at_or_above(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarAtFar {
    pub tar: f64,
    pub threshold: f64,
    /// FAR actually achieved at the chosen threshold (≤ the target).
    pub achieved_far: f64,
    /// Set when the impostor list is too small to resolve the target
    /// (fewer impostors than 1/far_target).
    pub small_sample: bool,
}

/// Accept convention is `score ≥ threshold`. The threshold is the smallest
/// impostor-score value whose FAR is ≤ the target; if every impostor value
/// overshoots, the next representable value above the impostor maximum is
/// used (FAR 0), the most conservative achievable operating point.
pub fn tar_at_far(scores: &ScoreSet, far_target: f64) -> Result<TarAtFar> {
    scores.validate()?;
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(SeidError::contract(format!(
            "far_target {far_target} must be in (0, 1]"
        )));
    }
    let mut candidates = scores.impostor.clone();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut threshold = f64::NAN;
    for &t in &candidates {
        if fraction_at_or_above(&scores.impostor, t) <= far_target {
            threshold = t;
            break;
        }
    }
    if threshold.is_nan() {
        threshold = next_up(*candidates.last().unwrap());
    }
    let small_sample = (scores.impostor.len() as f64) * far_target < 1.0;
    Ok(TarAtFar {
        tar: fraction_at_or_above(&scores.genuine, threshold),
        threshold,
        achieved_far: fraction_at_or_above(&scores.impostor, threshold),
        small_sample,
    })
}

/// Smallest f64 strictly greater than x (x finite).
fn next_up(x: f64) -> f64 {
    let bits = if x == 0.0 {
        1
    } else if x > 0.0 {
        x.to_bits() + 1
    } else {
        x.to_bits() - 1
    };
    f64::from_bits(bits)
}

/// (far, tar) per distinct threshold, far ascending; includes a FAR-0
/// endpoint and ends at (1, 1).
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.validate()?;
    let mut thresholds: Vec<f64> = scores
        .genuine
        .iter()
        .chain(&scores.impostor)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let top = next_up(thresholds[0]);
    let mut points = vec![(0.0, fraction_at_or_above(&scores.genuine, top))];
    for &t in &thresholds {
        points.push((
            fraction_at_or_above(&scores.impostor, t),
            fraction_at_or_above(&scores.genuine, t),
        ));
    }
    Ok(points)
}

/// Trapezoidal area under a (far, tar) curve.
pub fn roc_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationAccuracy {
    pub accuracy: f64,
    pub mean_threshold: f64,
}

fn accuracy_at(pairs: &[(f64, bool)], t: f64) -> f64 {
    let correct = pairs
        .iter()
        .filter(|&&(s, genuine)| (s >= t) == genuine)
        .count();
    correct as f64 / pairs.len() as f64
}

/// Candidate thresholds: accept-all, the midpoint between every adjacent
/// pair of distinct scores, reject-all.
fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = scores.to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals.dedup();
    let mut candidates = vec![vals[0] - 1.0];
    candidates.extend(vals.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(vals.last().unwrap() + 1.0);
    candidates
}

/// Best accept threshold on `train`, ties broken toward the smaller value.
fn best_threshold(train: &[(f64, bool)]) -> f64 {
    let scores: Vec<f64> = train.iter().map(|&(s, _)| s).collect();
    let candidates = threshold_candidates(&scores);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in &candidates {
        let acc = accuracy_at(train, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

/// LFW-style protocol: shuffle pairs with the seed, split into `folds`,
/// pick each fold's threshold on the remaining folds, score held out.
pub fn verification_accuracy(
    scores: &ScoreSet,
    folds: usize,
    seed: u64,
) -> Result<VerificationAccuracy> {
    scores.validate()?;
    if folds < 2 {
        return Err(SeidError::contract(format!("folds {folds} must be >= 2")));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(scores.impostor.iter().map(|&s| (s, false)))
        .collect();
    if pairs.len() < 2 * folds {
        return Err(SeidError::contract(format!(
            "{} pairs is too few for {folds} folds",
            pairs.len()
        )));
    }
    let mut rng = rng_for(seed, "verification.folds");
    pairs.shuffle(&mut rng);
    let n = pairs.len();
    let mut acc_sum = 0.0;
    let mut thr_sum = 0.0;
    for fold in 0..folds {
        let lo = fold * n / folds;
        let hi = (fold + 1) * n / folds;
        let held: &[(f64, bool)] = &pairs[lo..hi];
        let train: Vec<(f64, bool)> = pairs[..lo].iter().chain(&pairs[hi..]).copied().collect();
        let t = best_threshold(&train);
        acc_sum += accuracy_at(held, t);
        thr_sum += t;
    }
    Ok(VerificationAccuracy {
        accuracy: acc_sum / folds as f64,
        mean_threshold: thr_sum / folds as f64,
    })
}
