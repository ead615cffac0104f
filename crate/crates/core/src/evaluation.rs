//! Coverage and efficiency evaluation, synthetic tasks and benchmark reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{
    draw_iterations, iteration_rng, nonconformity_scores, predict_set, queried_class_scores, standard_threshold,
    threshold_from_samples, validate_alpha, AmbiguousCalibrationSet, ConformalError, Gamma, PredictionSet,
    ScoreTable, ThresholdRule,
};
use crate::embedding::EmbeddingMatrix;
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::plausibility::{PlausibilityComponents, PlausibilityVector};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Random stream reserved for oracle subsampling.
const SUBSAMPLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub example_id: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledEvalSet {
    pub split: Split,
    pub items: Vec<LabeledItem>,
}

impl LabeledEvalSet {
    pub fn new(split: Split, items: Vec<LabeledItem>) -> Self {
        LabeledEvalSet { split, items }
    }

    pub fn validate(&self, classes: &[String]) -> Result<(), EvalError> {
        let mut seen = BTreeSet::new();
        for it in &self.items {
            if !seen.insert(&it.example_id) {
                return Err(EvalError::Mismatch(format!("duplicate labelled item `{}`", it.example_id)));
            }
            if !classes.contains(&it.class) {
                return Err(EvalError::Mismatch(format!(
                    "{}: class `{}` is not a task class",
                    it.example_id, it.class
                )));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.example_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        Ok(write_jsonl(path, &self.items)?)
    }

    pub fn read(path: &Path, split: Split) -> Result<Self, EvalError> {
        Ok(LabeledEvalSet::new(split, read_jsonl(path)?))
    }
}

/// Fraction of items whose true class is in their prediction set. Sets and
/// labels must cover the same example ids.
pub fn coverage(sets: &[PredictionSet], truth: &LabeledEvalSet) -> Result<f64, EvalError> {
    let by_id: BTreeMap<&str, &PredictionSet> = sets.iter().map(|s| (s.example_id.as_str(), s)).collect();
    if by_id.len() != sets.len() {
        return Err(EvalError::Mismatch("duplicate example id among prediction sets".into()));
    }
    if truth.items.len() != sets.len() {
        return Err(EvalError::Mismatch(format!(
            "{} prediction sets for {} labelled items",
            sets.len(),
            truth.items.len()
        )));
    }
    if sets.is_empty() {
        return Err(EvalError::Mismatch("no items to evaluate".into()));
    }
    let mut covered = 0usize;
    for it in &truth.items {
        let set = by_id
            .get(it.example_id.as_str())
            .ok_or_else(|| EvalError::Mismatch(format!("no prediction set for `{}`", it.example_id)))?;
        covered += usize::from(set.contains(&it.class));
    }
    Ok(covered as f64 / sets.len() as f64)
}

/// Mean prediction-set size.
pub fn efficiency(sets: &[PredictionSet]) -> Result<f64, EvalError> {
    if sets.is_empty() {
        return Err(EvalError::Mismatch("no prediction sets".into()));
    }
    Ok(sets.iter().map(|s| s.members.len()).sum::<usize>() as f64 / sets.len() as f64)
}

fn sets_for<'a, I: IntoIterator<Item = &'a str>>(
    scores: &ScoreTable,
    ids: I,
    gamma: Gamma,
) -> Result<Vec<PredictionSet>, EvalError> {
    ids.into_iter()
        .map(|id| Ok(predict_set(id, scores.row(id)?, gamma)))
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic tasks

/// Generator parameters for a synthetic classification task with a web-like
/// calibration split.
///
/// Each item has a prototype class `k`; its image embedding is
/// `center_k + noise_scale · ε` with `ε ~ N(0, I/dim)`. Its true label is
/// `k` with probability `1 − label_noise` and otherwise a uniformly chosen
/// other class, so labels are inherently ambiguous. Web items carry the
/// prototype as their queried class; a `junk_rate` fraction of them are
/// pure-noise images unrelated to any class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub dim: usize,
    pub noise_scale: f64,
    pub label_noise: f64,
    pub junk_rate: f64,
    pub n_calib: usize,
    pub n_test: usize,
    pub seed: u64,
    pub classifier_temperature: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            num_classes: 10,
            dim: 64,
            noise_scale: 4.0,
            label_noise: 0.0,
            junk_rate: 0.0,
            n_calib: 500,
            n_test: 2000,
            seed: 0,
            classifier_temperature: 0.07,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), EvalError> {
        let mut errs = Vec::new();
        if self.num_classes == 0 {
            errs.push("num_classes must be at least 1".to_string());
        }
        if self.dim == 0 {
            errs.push("dim must be at least 1".to_string());
        }
        if self.n_calib == 0 || self.n_test == 0 {
            errs.push("n_calib and n_test must be at least 1".to_string());
        }
        for (name, v) in [("label_noise", self.label_noise), ("junk_rate", self.junk_rate)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.num_classes == 1 && self.label_noise > 0.0 {
            errs.push("label_noise needs at least two classes".to_string());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!("noise_scale must be non-negative, got {}", self.noise_scale));
        }
        if !(self.classifier_temperature > 0.0 && self.classifier_temperature.is_finite()) {
            errs.push(format!(
                "classifier_temperature must be positive, got {}",
                self.classifier_temperature
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Config(errs.join("; ")))
        }
    }

    pub fn class_ids(&self) -> Vec<String> {
        let width = (self.num_classes.max(2) - 1).to_string().len();
        (0..self.num_classes).map(|k| format!("class{k:0width$}")).collect()
    }
}

/// Output of [`generate_synthetic_task`].
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub task: SyntheticTask,
    pub classes: Vec<String>,
    /// Class label embeddings (the cluster centers), keyed by class id.
    pub labels: EmbeddingMatrix,
    /// Image embeddings of the web, oracle and test items.
    pub images: EmbeddingMatrix,
    /// Web items with exact plausibilities: junk items get `λ_junk = 1`,
    /// the rest the true-label distribution given their prototype.
    pub web: AmbiguousCalibrationSet,
    /// Ids of web items that are junk.
    pub web_junk: BTreeSet<String>,
    /// Calibration items drawn from the test distribution, same size as the
    /// web split.
    pub oracle: LabeledEvalSet,
    pub test: LabeledEvalSet,
}

impl SyntheticData {
    /// Classifier nonconformity scores for every image.
    pub fn scores(&self) -> Result<ScoreTable, EvalError> {
        Ok(nonconformity_scores(
            &self.images,
            self.images.ids(),
            &self.labels,
            &self.classes,
            self.task.classifier_temperature,
        )?)
    }

    pub fn benchmark_inputs(&self) -> Result<BenchmarkInputs, EvalError> {
        Ok(BenchmarkInputs {
            web: self.web.clone(),
            oracle: Some(self.oracle.clone()),
            test: self.test.clone(),
            scores: self.scores()?,
        })
    }
}

fn gaussian(rng: &mut ChaCha20Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * sd).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Draw a true label for prototype `k`.
fn ambiguous_label(rng: &mut ChaCha20Rng, k: usize, num_classes: usize, noise: f64) -> usize {
    if noise > 0.0 && rng.random::<f64>() < noise {
        let other = rng.random_range(0..num_classes - 1);
        if other >= k {
            other + 1
        } else {
            other
        }
    } else {
        k
    }
}

/// Generate a seed-deterministic synthetic task.
pub fn generate_synthetic_task(task: &SyntheticTask) -> Result<SyntheticData, EvalError> {
    task.validate()?;
    let k_n = task.num_classes;
    let classes = task.class_ids();
    let mut rng = ChaCha20Rng::seed_from_u64(task.seed);

    let centers: Vec<Vec<f64>> = (0..k_n).map(|_| unit(gaussian(&mut rng, task.dim, 1.0))).collect();
    let labels = EmbeddingMatrix::from_rows(
        task.dim,
        classes.iter().zip(&centers).map(|(c, v)| (c.clone(), to_f32(v))),
    )
    .map_err(|e| EvalError::Config(e.to_string()))?;

    let mut image_rows: Vec<(String, Vec<f32>)> = Vec::new();
    let item = |rng: &mut ChaCha20Rng, k: usize| -> Vec<f32> {
        let noise = gaussian(rng, task.dim, task.noise_scale);
        to_f32(&centers[k].iter().zip(&noise).map(|(c, e)| c + e).collect::<Vec<_>>())
    };

    let mut web_entries = Vec::with_capacity(task.n_calib);
    let mut web_junk = BTreeSet::new();
    for i in 0..task.n_calib {
        let id = format!("web-{i:05}");
        let q = rng.random_range(0..k_n);
        let junk = task.junk_rate > 0.0 && rng.random::<f64>() < task.junk_rate;
        let (vector, lambda, lambda_junk) = if junk {
            web_junk.insert(id.clone());
            let v = to_f32(&unit(gaussian(&mut rng, task.dim, 1.0)));
            (v, classes.iter().map(|c| (c.clone(), 0.0)).collect(), 1.0)
        } else {
            let other = if k_n > 1 { task.label_noise / (k_n - 1) as f64 } else { 0.0 };
            let lambda = classes
                .iter()
                .enumerate()
                .map(|(y, c)| (c.clone(), if y == q { 1.0 - task.label_noise } else { other }))
                .collect();
            (item(&mut rng, q), lambda, 0.0)
        };
        image_rows.push((id.clone(), vector));
        web_entries.push(PlausibilityVector {
            example_id: id,
            class_query: classes[q].clone(),
            lambda,
            lambda_junk,
            components: PlausibilityComponents::default(),
        });
    }

    let labeled = |rng: &mut ChaCha20Rng, prefix: &str, n: usize, rows: &mut Vec<(String, Vec<f32>)>| {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}-{i:05}");
                let k = rng.random_range(0..k_n);
                let y = ambiguous_label(rng, k, k_n, task.label_noise);
                rows.push((id.clone(), item(rng, k)));
                LabeledItem {
                    example_id: id,
                    class: classes[y].clone(),
                }
            })
            .collect::<Vec<_>>()
    };
    let oracle = labeled(&mut rng, "oracle", task.n_calib, &mut image_rows);
    let test = labeled(&mut rng, "test", task.n_test, &mut image_rows);

    let images = EmbeddingMatrix::from_rows(task.dim, image_rows).map_err(|e| EvalError::Config(e.to_string()))?;
    let web = AmbiguousCalibrationSet::new(classes.clone(), web_entries)?;
    Ok(SyntheticData {
        task: task.clone(),
        classes,
        labels,
        images,
        web,
        web_junk,
        oracle: LabeledEvalSet::new(Split::Calibration, oracle),
        test: LabeledEvalSet::new(Split::Test, test),
    })
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// Monte Carlo calibration over plausibility vectors.
    Webcp,
    /// Split CP on web examples labelled by their queried class.
    StandardWeb,
    /// Split CP on labelled target-distribution data.
    Oracle,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Webcp => "webcp",
            BenchMethod::StandardWeb => "standard_web",
            BenchMethod::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub methods: Vec<BenchMethod>,
    pub alphas: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    pub rule: ThresholdRule,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            methods: vec![BenchMethod::Webcp, BenchMethod::StandardWeb, BenchMethod::Oracle],
            alphas: DEFAULT_ALPHAS.to_vec(),
            mc_samples: 100,
            seed: 0,
            rule: ThresholdRule::Strict,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.methods.is_empty() || self.alphas.is_empty() {
            return Err(EvalError::Config("methods and alphas must be non-empty".into()));
        }
        if self.mc_samples == 0 {
            return Err(EvalError::Config("mc_samples must be at least 1".into()));
        }
        for &a in &self.alphas {
            validate_alpha(a)?;
        }
        Ok(())
    }
}

/// Everything a benchmark needs. `scores` must cover the web, oracle and
/// test items.
#[derive(Debug, Clone)]
pub struct BenchmarkInputs {
    pub web: AmbiguousCalibrationSet,
    pub oracle: Option<LabeledEvalSet>,
    pub test: LabeledEvalSet,
    pub scores: ScoreTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub alpha: f64,
    pub calib_coverage: f64,
    pub calib_efficiency: f64,
    pub test_coverage: f64,
    pub test_efficiency: f64,
    pub delta_cov: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "method",
    "alpha",
    "calib_coverage",
    "calib_efficiency",
    "test_coverage",
    "test_efficiency",
    "delta_cov",
];

impl EvalReport {
    pub fn row(&self, method: BenchMethod, alpha: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method.name() && (r.alpha - alpha).abs() < 1e-12)
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:+.6}",
                r.method, r.alpha, r.calib_coverage, r.calib_efficiency, r.test_coverage, r.test_efficiency, r.delta_cov
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        write_text(path, &self.to_csv())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        write_text(path, &self.to_json())
    }

    /// Cell-wise mean of reports with identical row layout.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport, EvalError> {
        let Some(first) = reports.first() else {
            return Err(EvalError::Mismatch("no reports to average".into()));
        };
        let n = reports.len() as f64;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (i, base) in first.rows.iter().enumerate() {
            let mut acc = [0.0f64; 5];
            for rep in reports {
                let r = rep
                    .rows
                    .get(i)
                    .filter(|r| r.method == base.method && r.alpha == base.alpha)
                    .ok_or_else(|| EvalError::Mismatch("reports have different row layouts".into()))?;
                for (a, v) in acc.iter_mut().zip([
                    r.calib_coverage,
                    r.calib_efficiency,
                    r.test_coverage,
                    r.test_efficiency,
                    r.delta_cov,
                ]) {
                    *a += v;
                }
            }
            rows.push(ReportRow {
                method: base.method.clone(),
                alpha: base.alpha,
                calib_coverage: acc[0] / n,
                calib_efficiency: acc[1] / n,
                test_coverage: acc[2] / n,
                test_efficiency: acc[3] / n,
                delta_cov: acc[4] / n,
            });
        }
        Ok(EvalReport { rows })
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Keep `n` items chosen uniformly without replacement (order preserved),
/// or all of them when there are at most `n`.
pub fn subsample(set: &LabeledEvalSet, n: usize, seed: u64) -> LabeledEvalSet {
    if set.items.len() <= n {
        return set.clone();
    }
    let mut rng = iteration_rng(seed, SUBSAMPLE_STREAM);
    let mut picked = index::sample(&mut rng, set.items.len(), n).into_vec();
    picked.sort_unstable();
    LabeledEvalSet::new(set.split, picked.into_iter().map(|i| set.items[i].clone()).collect())
}

/// Evaluate every requested method at every alpha. Rows are ordered by
/// method (webcp, standard_web, oracle) and then by alpha as given.
pub fn run_benchmark(inputs: &BenchmarkInputs, cfg: &BenchmarkConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let classes = inputs.scores.classes().to_vec();
    inputs.test.validate(&classes)?;
    if inputs.test.is_empty() {
        return Err(EvalError::Mismatch("test split is empty".into()));
    }
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let web_ids: Vec<&str> = inputs.web.entries().iter().map(|e| e.example_id.as_str()).collect();
    let mut rows = Vec::new();
    for method in methods {
        match method {
            BenchMethod::Webcp => {
                let draws = draw_iterations(&inputs.web, &inputs.scores, cfg.mc_samples, cfg.seed)?;
                if draws.iter().all(Vec::is_empty) {
                    return Err(ConformalError::EmptyCalibration.into());
                }
                let samples: Vec<Vec<f64>> = draws.iter().map(|d| d.iter().map(|p| p.score).collect()).collect();
                for &alpha in &cfg.alphas {
                    let gamma = threshold_from_samples(&samples, alpha, cfg.rule);
                    let (cov_sum, nonempty) = samples
                        .iter()
                        .filter(|s| !s.is_empty())
                        .fold((0.0, 0usize), |(acc, n), s| {
                            let inside = s.iter().filter(|&&v| gamma.admits(v)).count();
                            (acc + inside as f64 / s.len() as f64, n + 1)
                        });
                    let calib_sets = sets_for(&inputs.scores, web_ids.iter().copied(), gamma)?;
                    rows.push(finish_row(
                        method,
                        alpha,
                        cov_sum / nonempty as f64,
                        efficiency(&calib_sets)?,
                        inputs,
                        gamma,
                    )?);
                }
            }
            BenchMethod::StandardWeb => {
                let calib = queried_class_scores(&inputs.web, &inputs.scores)?;
                for &alpha in &cfg.alphas {
                    let gamma = standard_threshold(&calib, alpha)?;
                    let inside = calib.iter().filter(|&&v| gamma.admits(v)).count();
                    let calib_sets = sets_for(&inputs.scores, web_ids.iter().copied(), gamma)?;
                    rows.push(finish_row(
                        method,
                        alpha,
                        inside as f64 / calib.len() as f64,
                        efficiency(&calib_sets)?,
                        inputs,
                        gamma,
                    )?);
                }
            }
            BenchMethod::Oracle => {
                let oracle = inputs
                    .oracle
                    .as_ref()
                    .ok_or_else(|| EvalError::Config("oracle method requires labelled target calibration data".into()))?;
                oracle.validate(&classes)?;
                let oracle = subsample(oracle, inputs.web.len(), cfg.seed);
                let calib = oracle
                    .items
                    .iter()
                    .map(|it| inputs.scores.score(&it.example_id, &it.class))
                    .collect::<Result<Vec<_>, _>>()?;
                for &alpha in &cfg.alphas {
                    let gamma = standard_threshold(&calib, alpha)?;
                    let calib_sets = sets_for(&inputs.scores, oracle.ids(), gamma)?;
                    rows.push(finish_row(
                        method,
                        alpha,
                        coverage(&calib_sets, &oracle)?,
                        efficiency(&calib_sets)?,
                        inputs,
                        gamma,
                    )?);
                }
            }
        }
    }
    Ok(EvalReport { rows })
}

fn finish_row(
    method: BenchMethod,
    alpha: f64,
    calib_coverage: f64,
    calib_efficiency: f64,
    inputs: &BenchmarkInputs,
    gamma: Gamma,
) -> Result<ReportRow, EvalError> {
    let test_sets = sets_for(&inputs.scores, inputs.test.ids(), gamma)?;
    let test_coverage = coverage(&test_sets, &inputs.test)?;
    Ok(ReportRow {
        method: method.name().to_string(),
        alpha,
        calib_coverage,
        calib_efficiency,
        test_coverage,
        test_efficiency: efficiency(&test_sets)?,
        delta_cov: test_coverage - (1.0 - alpha),
    })
}

/// Generate and benchmark the task once per seed, then average the reports.
pub fn run_synthetic_benchmark(
    task: &SyntheticTask,
    seeds: &[u64],
    cfg: &BenchmarkConfig,
) -> Result<EvalReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::Config("at least one seed is required".into()));
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = generate_synthetic_task(&SyntheticTask { seed, ..task.clone() })?;
        let cfg = BenchmarkConfig { seed, ..cfg.clone() };
        reports.push(run_benchmark(&data.benchmark_inputs()?, &cfg)?);
    }
    EvalReport::mean(&reports)
}
