//! Nonconformity scores, Monte Carlo calibration over ambiguous labels,
//! split-conformal baselines and prediction sets.
//!
//! Scores are nonconformity values `V = 1 − p(y)` where `p` is the
//! classifier's softmax over classes, so a prediction set keeps every class
//! with `V ≤ γ`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::embedding::{cosine, softmax, EmbeddingError, EmbeddingMatrix};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::plausibility::PlausibilityVector;

/// Slack used when turning `(n+1)(1−α)` into an integer rank, so that
/// products such as `10 × (1 − 0.7)` land on 3 rather than 4.
const RANK_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no scores for example `{0}`")]
    MissingScores(String),
    #[error(
        "every Monte Carlo iteration sampled an empty calibration set; \
         mine a larger corpus or reduce junk probability"
    )]
    EmptyCalibration,
    #[error("calibration scores are empty")]
    NoScores,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Thresholds

/// A conformal threshold. `AllLabels` admits every class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Finite(f64),
    AllLabels,
}

impl Gamma {
    pub fn admits(self, score: f64) -> bool {
        match self {
            Gamma::Finite(g) => score <= g,
            Gamma::AllLabels => true,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Gamma::Finite(g) => g,
            Gamma::AllLabels => f64::INFINITY,
        }
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Finite(g) => write!(f, "{g}"),
            Gamma::AllLabels => f.write_str("all"),
        }
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Gamma::Finite(g) => s.serialize_f64(*g),
            Gamma::AllLabels => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(g) if g.is_finite() => Ok(Gamma::Finite(g)),
            Repr::Num(_) => Ok(Gamma::AllLabels),
            Repr::Str(s) if s == "all" => Ok(Gamma::AllLabels),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid gamma `{s}`"))),
        }
    }
}

/// How the Monte Carlo search decides a candidate is large enough.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdRule {
    /// `(1/M) Σ_m (#{V ≤ γ} + 1)/(n_m + 1) > 1 − α`.
    #[default]
    Strict,
    /// `(1/M) Σ_m #{V ≤ γ}/(n_m + 1) ≥ 1 − α`, which coincides with the
    /// classical `⌈(n+1)(1−α)⌉` order statistic when labels are certain.
    Conservative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub rule: ThresholdRule,
}

impl MonteCarloConfig {
    pub fn new(iterations: usize, alpha: f64, seed: u64) -> Self {
        MonteCarloConfig {
            iterations,
            alpha,
            seed,
            rule: ThresholdRule::Strict,
        }
    }

    pub fn validate(&self) -> Result<(), ConformalError> {
        if self.iterations == 0 {
            return Err(ConformalError::Config("Monte Carlo iterations must be at least 1".into()));
        }
        validate_alpha(self.alpha)
    }
}

pub fn validate_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Webcp,
    Standard,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Webcp => "webcp",
            Method::Standard => "standard",
        })
    }
}

/// Threshold artifact, with what is needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalThreshold {
    pub method: Method,
    pub gamma: Gamma,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<ThresholdRule>,
    /// Calibration points available before sampling.
    pub n_calibration: usize,
    /// `|C̃_m|` for every Monte Carlo iteration (empty for split CP).
    #[serde(default)]
    pub iteration_sizes: Vec<usize>,
}

impl ConformalThreshold {
    pub fn write(&self, path: &Path) -> Result<(), ConformalError> {
        let mut text = serde_json::to_string_pretty(self).expect("threshold serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| ConformalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ConformalError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConformalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConformalError::Invalid(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// Score tables

/// One line of `scores.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub example_id: String,
    pub scores: BTreeMap<String, f64>,
    /// Raw softmax probabilities, kept for score-distribution plots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<BTreeMap<String, f64>>,
}

/// Nonconformity scores per example and class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    classes: Vec<String>,
    rows: BTreeMap<String, ScoreRecord>,
}

impl ScoreTable {
    pub fn from_records(records: Vec<ScoreRecord>) -> Result<Self, ConformalError> {
        let Some(first) = records.first() else {
            return Ok(ScoreTable {
                classes: Vec::new(),
                rows: BTreeMap::new(),
            });
        };
        let classes: Vec<String> = first.scores.keys().cloned().collect();
        if classes.is_empty() {
            return Err(ConformalError::Invalid(format!("{}: empty score row", first.example_id)));
        }
        let mut rows = BTreeMap::new();
        for r in records {
            if !r.scores.keys().eq(classes.iter()) {
                return Err(ConformalError::Invalid(format!(
                    "{}: score row does not cover the class set",
                    r.example_id
                )));
            }
            if let Some((y, v)) = r.scores.iter().find(|(_, v)| !v.is_finite()) {
                return Err(ConformalError::Invalid(format!("{}: score for `{y}` is {v}", r.example_id)));
            }
            let id = r.example_id.clone();
            if rows.insert(id.clone(), r).is_some() {
                return Err(ConformalError::Invalid(format!("duplicate score row `{id}`")));
            }
        }
        Ok(ScoreTable { classes, rows })
    }

    /// Sorted class ids.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, example_id: &str) -> Result<&BTreeMap<String, f64>, ConformalError> {
        self.rows
            .get(example_id)
            .map(|r| &r.scores)
            .ok_or_else(|| ConformalError::MissingScores(example_id.to_string()))
    }

    pub fn score(&self, example_id: &str, class: &str) -> Result<f64, ConformalError> {
        self.row(example_id)?
            .get(class)
            .copied()
            .ok_or_else(|| ConformalError::Invalid(format!("no class `{class}` in scores of `{example_id}`")))
    }

    pub fn records(&self) -> impl Iterator<Item = &ScoreRecord> {
        self.rows.values()
    }

    /// Restrict to the given example ids (all must be present).
    pub fn subset<'a, I: IntoIterator<Item = &'a str>>(&self, ids: I) -> Result<ScoreTable, ConformalError> {
        let mut rows = BTreeMap::new();
        for id in ids {
            let r = self
                .rows
                .get(id)
                .ok_or_else(|| ConformalError::MissingScores(id.to_string()))?;
            rows.insert(id.to_string(), r.clone());
        }
        Ok(ScoreTable {
            classes: self.classes.clone(),
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ConformalError> {
        let records: Vec<&ScoreRecord> = self.rows.values().collect();
        Ok(write_jsonl(path, &records)?)
    }

    pub fn read(path: &Path) -> Result<Self, ConformalError> {
        ScoreTable::from_records(read_jsonl(path)?)
    }
}

/// Classifier nonconformity: per image, `p = softmax_T(cos(image, label_y))`
/// over classes and `V(y) = 1 − p(y)`. Rows are produced for `image_ids`.
pub fn nonconformity_scores(
    images: &EmbeddingMatrix,
    image_ids: &[String],
    labels: &EmbeddingMatrix,
    classes: &[String],
    temperature: f64,
) -> Result<ScoreTable, ConformalError> {
    let mut sorted: Vec<&String> = classes.iter().collect();
    sorted.sort();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(ConformalError::Config("class set is empty".into()));
    }
    let label_rows = sorted
        .iter()
        .map(|c| labels.require(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(image_ids.len());
    for id in image_ids {
        let img = images.require(id)?;
        let sims = label_rows
            .iter()
            .map(|l| cosine(img, l))
            .collect::<Result<Vec<_>, _>>()?;
        let p = softmax(&sims, temperature)?;
        let scores = sorted.iter().zip(&p).map(|(c, p)| ((*c).clone(), 1.0 - p)).collect();
        let probabilities = sorted.iter().zip(&p).map(|(c, p)| ((*c).clone(), *p)).collect();
        records.push(ScoreRecord {
            example_id: id.clone(),
            scores,
            probabilities: Some(probabilities),
        });
    }
    ScoreTable::from_records(records)
}

// ---------------------------------------------------------------------------
// Ambiguous calibration data

/// Web-mined calibration examples with their plausibility vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousCalibrationSet {
    classes: Vec<String>,
    entries: Vec<PlausibilityVector>,
}

impl AmbiguousCalibrationSet {
    pub fn new(classes: Vec<String>, mut entries: Vec<PlausibilityVector>) -> Result<Self, ConformalError> {
        let class_set: BTreeSet<String> = classes.into_iter().collect();
        if class_set.is_empty() {
            return Err(ConformalError::Config("class set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.example_id.as_str()) {
                return Err(ConformalError::Invalid(format!("duplicate example `{}`", e.example_id)));
            }
            if !e.lambda.keys().eq(class_set.iter()) {
                return Err(ConformalError::Invalid(format!(
                    "{}: plausibilities do not cover the class set",
                    e.example_id
                )));
            }
            e.validate().map_err(|err| ConformalError::Invalid(err.to_string()))?;
        }
        entries.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        Ok(AmbiguousCalibrationSet {
            classes: class_set.into_iter().collect(),
            entries,
        })
    }

    /// Classes inferred from the first entry.
    pub fn from_entries(entries: Vec<PlausibilityVector>) -> Result<Self, ConformalError> {
        let classes = entries
            .first()
            .map(|e| e.lambda.keys().cloned().collect())
            .unwrap_or_default();
        AmbiguousCalibrationSet::new(classes, entries)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Entries sorted by example id.
    pub fn entries(&self) -> &[PlausibilityVector] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), ConformalError> {
        Ok(write_jsonl(path, &self.entries)?)
    }

    pub fn read(path: &Path) -> Result<Self, ConformalError> {
        AmbiguousCalibrationSet::from_entries(read_jsonl(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPoint {
    pub example_id: String,
    pub class: String,
    pub score: f64,
}

/// Random stream for Monte Carlo iteration `m`: ChaCha20 keyed by `seed`
/// with stream id `m`, so iterations are independent of scheduling.
pub fn iteration_rng(seed: u64, m: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(m);
    rng
}

/// Draw one concrete calibration set: each entry is rejected with
/// probability `λ_junk`, otherwise labelled by a draw from `λ` renormalised
/// over the classes.
pub fn sample_calibration_iteration<R: Rng + ?Sized>(
    set: &AmbiguousCalibrationSet,
    scores: &ScoreTable,
    rng: &mut R,
) -> Result<Vec<SampledPoint>, ConformalError> {
    let mut out = Vec::new();
    for e in &set.entries {
        let u: f64 = rng.random();
        if u < e.lambda_junk {
            continue;
        }
        let total: f64 = e.lambda.values().sum();
        if total <= 0.0 {
            continue;
        }
        let v: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (y, &l) in &e.lambda {
            if l <= 0.0 {
                continue;
            }
            acc += l;
            chosen = Some(y);
            if v < acc {
                break;
            }
        }
        let class = chosen.expect("positive plausibility mass");
        out.push(SampledPoint {
            example_id: e.example_id.clone(),
            class: class.clone(),
            score: scores.score(&e.example_id, class)?,
        });
    }
    Ok(out)
}

/// All `M` Monte Carlo draws, iteration `m` on stream `m`.
pub fn draw_iterations(
    set: &AmbiguousCalibrationSet,
    scores: &ScoreTable,
    iterations: usize,
    seed: u64,
) -> Result<Vec<Vec<SampledPoint>>, ConformalError> {
    for e in &set.entries {
        scores.row(&e.example_id)?;
    }
    (0..iterations as u64)
        .map(|m| sample_calibration_iteration(set, scores, &mut iteration_rng(seed, m)))
        .collect()
}

/// Smallest candidate satisfying the Monte Carlo coverage condition over
/// per-iteration score samples. Candidates are the distinct sampled scores
/// followed by `AllLabels`.
pub fn threshold_from_samples(samples: &[Vec<f64>], alpha: f64, rule: ThresholdRule) -> Gamma {
    let mut sorted: Vec<Vec<f64>> = samples.to_vec();
    for s in &mut sorted {
        s.sort_by(f64::total_cmp);
    }
    let mut candidates: Vec<f64> = sorted.iter().flatten().copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let m = samples.len() as f64;
    let target = 1.0 - alpha;
    let mut cursor = vec![0usize; sorted.len()];
    for &g in &candidates {
        let mut sum = 0.0;
        for (s, c) in sorted.iter().zip(cursor.iter_mut()) {
            while *c < s.len() && s[*c] <= g {
                *c += 1;
            }
            let denom = (s.len() + 1) as f64;
            sum += match rule {
                ThresholdRule::Strict => (*c + 1) as f64 / denom,
                ThresholdRule::Conservative => *c as f64 / denom,
            };
        }
        let avg = sum / m;
        let ok = match rule {
            ThresholdRule::Strict => avg > target,
            ThresholdRule::Conservative => avg >= target,
        };
        if ok {
            return Gamma::Finite(g);
        }
    }
    Gamma::AllLabels
}

/// Monte Carlo conformal calibration over ambiguous labels.
pub fn mc_threshold(
    set: &AmbiguousCalibrationSet,
    scores: &ScoreTable,
    cfg: &MonteCarloConfig,
) -> Result<ConformalThreshold, ConformalError> {
    cfg.validate()?;
    let draws = draw_iterations(set, scores, cfg.iterations, cfg.seed)?;
    if draws.iter().all(Vec::is_empty) {
        return Err(ConformalError::EmptyCalibration);
    }
    let samples: Vec<Vec<f64>> = draws
        .iter()
        .map(|d| d.iter().map(|p| p.score).collect())
        .collect();
    let gamma = threshold_from_samples(&samples, cfg.alpha, cfg.rule);
    Ok(ConformalThreshold {
        method: Method::Webcp,
        gamma,
        alpha: cfg.alpha,
        mc_samples: Some(cfg.iterations),
        seed: Some(cfg.seed),
        rule: Some(cfg.rule),
        n_calibration: set.len(),
        iteration_sizes: draws.iter().map(Vec::len).collect(),
    })
}

/// Split conformal threshold: the `⌈(n+1)(1−α)⌉`-th smallest score, or
/// `AllLabels` when that rank exceeds `n`.
pub fn standard_threshold(scores: &[f64], alpha: f64) -> Result<Gamma, ConformalError> {
    validate_alpha(alpha)?;
    if scores.is_empty() {
        return Err(ConformalError::NoScores);
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(ConformalError::Invalid(format!("non-finite score {v}")));
    }
    let n = scores.len();
    let k = ((n + 1) as f64 * (1.0 - alpha) - RANK_SLACK).ceil().max(1.0) as usize;
    if k > n {
        return Ok(Gamma::AllLabels);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Gamma::Finite(sorted[k - 1]))
}

/// Scores of web examples at their queried class, ignoring plausibilities.
pub fn queried_class_scores(set: &AmbiguousCalibrationSet, scores: &ScoreTable) -> Result<Vec<f64>, ConformalError> {
    set.entries
        .iter()
        .map(|e| {
            if e.class_query.is_empty() {
                return Err(ConformalError::Invalid(format!("{}: no queried class recorded", e.example_id)));
            }
            scores.score(&e.example_id, &e.class_query)
        })
        .collect()
}

/// Split conformal threshold artifact over labelled scores.
pub fn standard_calibration(scores: &[f64], alpha: f64) -> Result<ConformalThreshold, ConformalError> {
    Ok(ConformalThreshold {
        method: Method::Standard,
        gamma: standard_threshold(scores, alpha)?,
        alpha,
        mc_samples: None,
        seed: None,
        rule: None,
        n_calibration: scores.len(),
        iteration_sizes: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Prediction sets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub example_id: String,
    pub members: Vec<String>,
    pub gamma: Gamma,
}

impl PredictionSet {
    pub fn contains(&self, class: &str) -> bool {
        self.members.iter().any(|m| m == class)
    }
}

/// Classes with score `≤ γ`, in class order.
pub fn predict_set(example_id: &str, scores: &BTreeMap<String, f64>, gamma: Gamma) -> PredictionSet {
    PredictionSet {
        example_id: example_id.to_string(),
        members: scores
            .iter()
            .filter(|(_, &s)| gamma.admits(s))
            .map(|(y, _)| y.clone())
            .collect(),
        gamma,
    }
}

pub fn predict_all(table: &ScoreTable, gamma: Gamma) -> Vec<PredictionSet> {
    table
        .records()
        .map(|r| predict_set(&r.example_id, &r.scores, gamma))
        .collect()
}

pub fn write_prediction_sets(path: &Path, sets: &[PredictionSet]) -> Result<(), ConformalError> {
    Ok(write_jsonl(path, sets)?)
}

pub fn read_prediction_sets(path: &Path) -> Result<Vec<PredictionSet>, ConformalError> {
    Ok(read_jsonl(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plausibility::PlausibilityComponents;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn one_hot_set(scores: &[f64]) -> (AmbiguousCalibrationSet, ScoreTable) {
        let cls = classes(2);
        let mut entries = Vec::new();
        let mut records = Vec::new();
        for (i, &s) in scores.iter().enumerate() {
            let id = format!("e{i:03}");
            entries.push(PlausibilityVector::one_hot(&id, &cls, "c0"));
            records.push(ScoreRecord {
                example_id: id,
                scores: [("c0".to_string(), s), ("c1".to_string(), 1.0 - s)].into(),
                probabilities: None,
            });
        }
        (
            AmbiguousCalibrationSet::new(cls, entries).unwrap(),
            ScoreTable::from_records(records).unwrap(),
        )
    }

    #[test]
    fn mc_threshold_strict_rule_example() {
        let (set, table) = one_hot_set(&[0.1, 0.2, 0.3, 0.4]);
        let t = mc_threshold(&set, &table, &MonteCarloConfig::new(1, 0.25, 7)).unwrap();
        assert_eq!(t.gamma, Gamma::Finite(0.3));
        assert_eq!(t.iteration_sizes, vec![4]);
        for m in [5, 10, 100] {
            let t = mc_threshold(&set, &table, &MonteCarloConfig::new(m, 0.25, 3)).unwrap();
            assert_eq!(t.gamma, Gamma::Finite(0.3));
        }
        let mut cfg = MonteCarloConfig::new(1, 0.25, 7);
        cfg.rule = ThresholdRule::Conservative;
        assert_eq!(mc_threshold(&set, &table, &cfg).unwrap().gamma, Gamma::Finite(0.4));
    }

    #[test]
    fn tiny_alpha() {
        // Under the strict rule the largest sampled score already gives
        // (n+1)/(n+1) = 1 > 1 - α; only the conservative rule runs out.
        let (set, table) = one_hot_set(&[0.1, 0.2, 0.3, 0.4]);
        let mut cfg = MonteCarloConfig::new(3, 1e-12, 0);
        assert_eq!(mc_threshold(&set, &table, &cfg).unwrap().gamma, Gamma::Finite(0.4));
        cfg.rule = ThresholdRule::Conservative;
        assert_eq!(mc_threshold(&set, &table, &cfg).unwrap().gamma, Gamma::AllLabels);
        assert_eq!(threshold_from_samples(&[vec![0.1, 0.2]], 1e-12, ThresholdRule::Strict), Gamma::Finite(0.2));
    }

    #[test]
    fn all_junk_is_an_error() {
        let cls = classes(2);
        let mut e = PlausibilityVector::one_hot("x", &cls, "c0");
        e.lambda.insert("c0".into(), 0.0);
        e.lambda_junk = 1.0;
        let set = AmbiguousCalibrationSet::new(cls, vec![e]).unwrap();
        let table = ScoreTable::from_records(vec![ScoreRecord {
            example_id: "x".into(),
            scores: [("c0".to_string(), 0.1), ("c1".to_string(), 0.9)].into(),
            probabilities: None,
        }])
        .unwrap();
        assert!(matches!(
            mc_threshold(&set, &table, &MonteCarloConfig::new(20, 0.1, 1)),
            Err(ConformalError::EmptyCalibration)
        ));
    }

    #[test]
    fn empty_iterations_count_as_one() {
        // One iteration empty, one with a single point.
        let g = threshold_from_samples(&[vec![], vec![0.5]], 0.3, ThresholdRule::Strict);
        // γ=0.5: (1 + 2/2)/2 = 1 > 0.7
        assert_eq!(g, Gamma::Finite(0.5));
        let g = threshold_from_samples(&[vec![], vec![]], 0.3, ThresholdRule::Strict);
        assert_eq!(g, Gamma::AllLabels);
    }

    #[test]
    fn standard_threshold_examples() {
        assert_eq!(standard_threshold(&[0.4, 0.1, 0.3, 0.2], 0.25).unwrap(), Gamma::Finite(0.4));
        assert_eq!(standard_threshold(&[0.2, 0.8], 0.5).unwrap(), Gamma::Finite(0.8));
        assert_eq!(standard_threshold(&[0.2], 0.1).unwrap(), Gamma::AllLabels);
        assert!(matches!(standard_threshold(&[], 0.1), Err(ConformalError::NoScores)));
        // (9+1)(1-0.7) evaluates to 3.0000000000000004 in f64; rank must be 3.
        let s: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        assert_eq!(standard_threshold(&s, 0.7).unwrap(), Gamma::Finite(0.3));
    }

    #[test]
    fn predict_set_examples() {
        let row: BTreeMap<String, f64> = [("a".to_string(), 0.2), ("b".to_string(), 0.5)].into();
        assert_eq!(predict_set("x", &row, Gamma::Finite(0.3)).members, vec!["a"]);
        assert_eq!(predict_set("x", &row, Gamma::AllLabels).members, vec!["a", "b"]);
        assert!(predict_set("x", &row, Gamma::Finite(0.0)).members.is_empty());
    }

    #[test]
    fn sampling_edge_cases_and_frequencies() {
        let cls = classes(2);
        let mk = |l0: f64, l1: f64, junk: f64| PlausibilityVector {
            example_id: "x".into(),
            class_query: "c0".into(),
            lambda: [("c0".to_string(), l0), ("c1".to_string(), l1)].into(),
            lambda_junk: junk,
            components: PlausibilityComponents::default(),
        };
        let table = ScoreTable::from_records(vec![ScoreRecord {
            example_id: "x".into(),
            scores: [("c0".to_string(), 0.1), ("c1".to_string(), 0.9)].into(),
            probabilities: None,
        }])
        .unwrap();

        let set = AmbiguousCalibrationSet::new(cls.clone(), vec![mk(0.0, 0.0, 1.0)]).unwrap();
        let mut rng = iteration_rng(5, 0);
        for _ in 0..1000 {
            assert!(sample_calibration_iteration(&set, &table, &mut rng).unwrap().is_empty());
        }
        let set = AmbiguousCalibrationSet::new(cls.clone(), vec![mk(0.0, 1.0, 0.0)]).unwrap();
        for _ in 0..1000 {
            let s = sample_calibration_iteration(&set, &table, &mut rng).unwrap();
            assert_eq!(s.len(), 1);
            assert_eq!(s[0].class, "c1");
            assert_eq!(s[0].score, 0.9);
        }

        let set = AmbiguousCalibrationSet::new(cls, vec![mk(0.5, 0.25, 0.25)]).unwrap();
        let draws = 100_000;
        let (mut kept, mut first) = (0usize, 0usize);
        for _ in 0..draws {
            if let Some(p) = sample_calibration_iteration(&set, &table, &mut rng).unwrap().pop() {
                kept += 1;
                first += usize::from(p.class == "c0");
            }
        }
        let keep_rate = kept as f64 / draws as f64;
        let freq = first as f64 / kept as f64;
        assert!((keep_rate - 0.75).abs() < 0.01, "keep rate {keep_rate}");
        assert!((freq - 2.0 / 3.0).abs() < 0.01, "class frequency {freq}");
    }

    #[test]
    fn nonconformity_examples() {
        let images = EmbeddingMatrix::from_rows(2, [("i", vec![1.0f32, 0.0]), ("j", vec![1.0, 1.0])]).unwrap();
        let labels = EmbeddingMatrix::from_rows(2, [("a", vec![1.0f32, 0.0]), ("b", vec![0.0, 1.0])]).unwrap();
        let ids = vec!["i".to_string(), "j".to_string()];
        let cls = vec!["a".to_string(), "b".to_string()];
        let t = nonconformity_scores(&images, &ids, &labels, &cls, 0.1).unwrap();
        let p = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((t.score("i", "a").unwrap() - (1.0 - p)).abs() < 1e-12);
        assert!((t.score("i", "b").unwrap() - p).abs() < 1e-12);
        assert!((t.score("j", "a").unwrap() - 0.5).abs() < 1e-12);
        let err = nonconformity_scores(&images, &["zz".to_string()], &labels, &cls, 0.1).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn gamma_serde() {
        assert_eq!(serde_json::to_string(&Gamma::Finite(0.25)).unwrap(), "0.25");
        assert_eq!(serde_json::to_string(&Gamma::AllLabels).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<Gamma>("\"all\"").unwrap(), Gamma::AllLabels);
        assert_eq!(serde_json::from_str::<Gamma>("0.5").unwrap(), Gamma::Finite(0.5));
        assert!(serde_json::from_str::<Gamma>("\"some\"").is_err());
    }
}
