//! Brute-force reference implementations, written without reusing the
//! library's internals. Shared by the core property tests and the CLI
//! acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use webcp::conformal::{iteration_rng, ScoreTable};
use webcp::{AmbiguousCalibrationSet, Gamma, ThresholdRule};

/// Longest common block by trying every start pair. Ties go to the
/// smallest `i`, then the smallest `j`.
fn longest_block(a: &[char], b: &[char]) -> (usize, usize, usize) {
    let mut best = (0, 0, 0);
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut k = 0;
            while i + k < a.len() && j + k < b.len() && a[i + k] == b[j + k] {
                k += 1;
            }
            if k > best.2 {
                best = (i, j, k);
            }
        }
    }
    best
}

fn matched(a: &[char], b: &[char]) -> usize {
    let (i, j, k) = longest_block(a, b);
    if k == 0 {
        return 0;
    }
    k + matched(&a[..i], &b[..j]) + matched(&a[i + k..], &b[j + k..])
}

pub fn fuzzy_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * matched(&a, &b) as f64 / (a.len() + b.len()) as f64
}

/// Split conformal threshold by scanning every score. `alpha_pct` is
/// α in percent so the rank condition is compared in integers:
/// `100 * count >= (n + 1) * (100 - alpha_pct)`.
pub fn standard_threshold(scores: &[f64], alpha_pct: u32) -> Gamma {
    let n = scores.len() as u64;
    let need = (n + 1) * u64::from(100 - alpha_pct);
    let mut best: Option<f64> = None;
    for &g in scores {
        let count = scores.iter().filter(|&&s| s <= g).count() as u64;
        if 100 * count >= need && best.is_none_or(|b| g < b) {
            best = Some(g);
        }
    }
    best.map_or(Gamma::AllLabels, Gamma::Finite)
}

/// Monte Carlo threshold by direct evaluation of the coverage average at
/// every sampled score.
pub fn mc_threshold(samples: &[Vec<f64>], alpha: f64, rule: ThresholdRule) -> Gamma {
    let mut candidates: Vec<f64> = samples.iter().flatten().copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = samples.len() as f64;
    for g in candidates {
        let mut total = 0.0;
        for s in samples {
            let count = s.iter().filter(|&&x| x <= g).count() as f64;
            let plus = if rule == ThresholdRule::Strict { 1.0 } else { 0.0 };
            total += (count + plus) / (s.len() as f64 + 1.0);
        }
        let avg = total / m;
        let ok = match rule {
            ThresholdRule::Strict => avg > 1.0 - alpha,
            ThresholdRule::Conservative => avg >= 1.0 - alpha,
        };
        if ok {
            return Gamma::Finite(g);
        }
    }
    Gamma::AllLabels
}

/// Draws for iteration `m`: reject on `u < λ_junk`, then invert the
/// cumulative plausibility mass (classes in id order) at `v·Σλ`.
pub fn sample_scores(set: &AmbiguousCalibrationSet, scores: &ScoreTable, seed: u64, m: u64) -> Vec<f64> {
    let mut rng = iteration_rng(seed, m);
    let mut out = Vec::new();
    for e in set.entries() {
        let u: f64 = rng.random();
        if u < e.lambda_junk {
            continue;
        }
        let classes: Vec<(&String, f64)> = e.lambda.iter().filter(|(_, &l)| l > 0.0).map(|(k, &l)| (k, l)).collect();
        let total: f64 = e.lambda.values().sum();
        if total <= 0.0 {
            continue;
        }
        let v: f64 = rng.random::<f64>() * total;
        let mut cum = Vec::with_capacity(classes.len());
        let mut acc = 0.0;
        for (_, l) in &classes {
            acc += l;
            cum.push(acc);
        }
        let idx = cum.partition_point(|&c| c <= v).min(classes.len() - 1);
        out.push(scores.score(&e.example_id, classes[idx].0).unwrap());
    }
    out
}

pub fn coverage(sets: &BTreeMap<String, Vec<String>>, truth: &BTreeMap<String, String>) -> f64 {
    let hit = truth.iter().filter(|(id, y)| sets[*id].contains(y)).count();
    hit as f64 / truth.len() as f64
}
