//! Deterministic inputs for the benchmarks.

use std::collections::BTreeMap;

use rand::Rng;
use webcp::conformal::{iteration_rng, ScoreRecord};
use webcp::{AmbiguousCalibrationSet, PlausibilityVector, ScoreTable};

/// `n` calibration examples over `k` classes with random plausibilities,
/// some junk mass, and random classifier scores.
pub fn calibration_instance(n: usize, k: usize, seed: u64) -> (AmbiguousCalibrationSet, ScoreTable) {
    let mut rng = iteration_rng(seed, 0);
    let classes: Vec<String> = (0..k).map(|i| format!("class_{i}")).collect();
    let mut entries = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("web_{i:06}");
        let junk = rng.random_range(0.0..0.3);
        let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(4)).collect();
        let total: f64 = w.iter().sum();
        let lambda: BTreeMap<String, f64> =
            classes.iter().cloned().zip(w.iter().map(|x| x / total * (1.0 - junk))).collect();
        let lambda_junk = (1.0 - lambda.values().sum::<f64>()).clamp(0.0, 1.0);
        entries.push(PlausibilityVector {
            example_id: id.clone(),
            class_query: classes[i % k].clone(),
            lambda,
            lambda_junk,
            components: Default::default(),
        });
        records.push(ScoreRecord {
            example_id: id,
            scores: classes.iter().map(|c| (c.clone(), rng.random())).collect(),
            probabilities: None,
        });
    }
    let set = AmbiguousCalibrationSet::new(classes, entries).expect("valid instance");
    (set, ScoreTable::from_records(records).expect("valid scores"))
}

/// Pairs of file-name-like strings of roughly `len` characters.
pub fn filename_pairs(count: usize, len: usize, seed: u64) -> Vec<(String, String)> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_-.";
    fn word(rng: &mut impl Rng, len: usize) -> String {
        (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char).collect()
    }
    let mut rng = iteration_rng(seed, 1);
    (0..count).map(|_| (word(&mut rng, len), word(&mut rng, len))).collect()
}

/// Unit-ish random vectors of dimension `dim`.
pub fn vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = iteration_rng(seed, 2);
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_are_reproducible_and_valid() {
        let (a, sa) = calibration_instance(50, 4, 3);
        let (b, _) = calibration_instance(50, 4, 3);
        assert_eq!(a.entries().len(), 50);
        assert_eq!(a.entries(), b.entries());
        assert_eq!(sa.len(), 50);
        assert_eq!(filename_pairs(3, 8, 1), filename_pairs(3, 8, 1));
        assert_eq!(vectors(2, 16, 1)[1].len(), 16);
    }
}
