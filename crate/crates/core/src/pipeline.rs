//! Declarative end-to-end runs: mine → embed-import → plausibility →
//! calibrate → predict → evaluate.
//!
//! All stage outputs live under `output_dir` and every produced file is
//! hashed into `run_manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::conformal::{
    mc_threshold, nonconformity_scores, predict_all, queried_class_scores, standard_calibration, validate_alpha,
    write_prediction_sets, AmbiguousCalibrationSet, ConformalThreshold, Method, MonteCarloConfig, ScoreTable,
    ThresholdRule,
};
use crate::embedding::{load_embeddings, store_embeddings, EmbedItem, EmbedKind, EmbedRequest, EmbedResponse, EmbeddingMatrix};
use crate::evaluation::{
    run_benchmark, BenchMethod, BenchmarkConfig, BenchmarkInputs, LabeledEvalSet, Split, DEFAULT_ALPHAS,
};
use crate::miner::{
    fill_template, mine_corpus, read_corpus, sha256_hex, validate_classes, write_corpus, ClassLabel, CorpusManifest,
    FetchPolicy, Fetcher, FixtureFetcher, FixtureSearchProvider, HttpFetcher, HttpSearchProvider, MineRequest,
    SearchProvider, CATEGORY_PLACEHOLDER, MANIFEST_FILE,
};
use crate::plausibility::{
    build_ambiguous_set, sentence_units, Aggregation, PlausibilityConfig, PlausibilityStores, PromptSet,
    PseudoLabelMap, Temperatures,
};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const EMBEDDING_INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    pub fn config(msg: impl Into<String>) -> Self {
        PipelineError::Config(vec![msg.into()])
    }

    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mine,
    EmbedImport,
    Plausibility,
    Calibrate,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Mine,
        Stage::EmbedImport,
        Stage::Plausibility,
        Stage::Calibrate,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::EmbedImport => "embed-import",
            Stage::Plausibility => "plausibility",
            Stage::Calibrate => "calibrate",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Parse a comma-separated stage list; the result is in pipeline order.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, String> {
    let mut stages = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect::<Result<Vec<_>, _>>()?;
    stages.sort();
    stages.dedup();
    if stages.is_empty() {
        return Err("no stages given".into());
    }
    Ok(stages)
}

// ---------------------------------------------------------------------------
// Embedding stores

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderRole {
    /// Sentence encoder for page text and class queries.
    Context,
    /// General vision-language model for content filtering and scoring.
    Content,
    /// The zero-shot classifier being calibrated.
    Classifier,
}

/// The six stores a run consumes, with their id conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Store {
    /// `<example>:alt`, `<example>:pre:<k>`, `<example>:post:<k>`.
    Sentences,
    /// Class ids, embedding the filled query template.
    Queries,
    /// Example ids.
    ContentImages,
    /// Literal prompt, negative-label and pseudo-label texts.
    ContentPrompts,
    /// Calibration example ids plus test and oracle ids.
    ClassifierImages,
    /// Class ids, embedding the filled prompt template.
    ClassifierLabels,
}

impl Store {
    pub const ALL: [Store; 6] = [
        Store::Sentences,
        Store::Queries,
        Store::ContentImages,
        Store::ContentPrompts,
        Store::ClassifierImages,
        Store::ClassifierLabels,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Store::Sentences => "sentences",
            Store::Queries => "queries",
            Store::ContentImages => "content_images",
            Store::ContentPrompts => "content_prompts",
            Store::ClassifierImages => "classifier_images",
            Store::ClassifierLabels => "classifier_labels",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.wcpe", self.name())
    }

    pub fn role(self) -> EncoderRole {
        match self {
            Store::Sentences | Store::Queries => EncoderRole::Context,
            Store::ContentImages | Store::ContentPrompts => EncoderRole::Content,
            Store::ClassifierImages | Store::ClassifierLabels => EncoderRole::Classifier,
        }
    }

    pub fn kind(self) -> EmbedKind {
        match self {
            Store::ContentImages | Store::ClassifierImages => EmbedKind::Image,
            _ => EmbedKind::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreIndexEntry {
    pub name: String,
    pub file: String,
    pub role: EncoderRole,
    pub dim: usize,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub stores: Vec<StoreIndexEntry>,
}

/// Embedding requests for the stores derivable from a corpus and config.
/// Classifier images are requested for corpus examples only; test and
/// oracle images have to come from dumps.
pub fn embedding_request(
    store: Store,
    corpus: &CorpusManifest,
    corpus_dir: &Path,
    cfg: &PipelineConfig,
    pseudo: &PseudoLabelMap,
) -> EmbedRequest {
    let mut examples: Vec<_> = corpus.examples.iter().collect();
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let item = |id: &str, payload: String| EmbedItem {
        id: id.to_string(),
        payload,
    };
    let image_path = |rel: &str| corpus_dir.join(rel).display().to_string();
    let items = match store {
        Store::Sentences => examples
            .iter()
            .flat_map(|e| sentence_units(e))
            .map(|(id, text)| item(&id, text))
            .collect(),
        Store::Queries => corpus
            .classes
            .iter()
            .map(|c| item(&c.id, fill_template(&cfg.query_template, c)))
            .collect(),
        Store::ClassifierLabels => corpus
            .classes
            .iter()
            .map(|c| item(&c.id, fill_template(&cfg.prompt_template, c)))
            .collect(),
        Store::ContentImages | Store::ClassifierImages => examples
            .iter()
            .map(|e| item(&e.example_id, image_path(&e.image_bytes_path)))
            .collect(),
        Store::ContentPrompts => {
            let mut texts: Vec<String> = cfg.prompts.invalid_form_prompts.clone();
            texts.push(cfg.prompts.negative_label.clone());
            texts.extend(pseudo.0.values().cloned());
            texts.sort();
            texts.dedup();
            texts.into_iter().map(|t| item(&t, t.clone())).collect()
        }
    };
    EmbedRequest {
        kind: store.kind(),
        items,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineTemperatures {
    pub context: f64,
    pub filter: f64,
    pub content: f64,
    pub classifier: f64,
}

impl Default for PipelineTemperatures {
    fn default() -> Self {
        PipelineTemperatures {
            context: 0.07,
            filter: 0.07,
            content: 0.07,
            classifier: 0.07,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchSettings {
    pub timeout_secs: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub user_agent: String,
    pub respect_robots: bool,
    pub max_in_flight: usize,
}

impl Default for FetchSettings {
    fn default() -> Self {
        let p = FetchPolicy::default();
        FetchSettings {
            timeout_secs: p.timeout.as_secs_f64(),
            retries: p.retries,
            backoff_ms: p.backoff.as_millis() as u64,
            user_agent: p.user_agent,
            respect_robots: p.respect_robots,
            max_in_flight: p.max_in_flight,
        }
    }
}

impl FetchSettings {
    pub fn policy(&self) -> FetchPolicy {
        FetchPolicy {
            timeout: Duration::from_secs_f64(self.timeout_secs),
            retries: self.retries,
            backoff: Duration::from_millis(self.backoff_ms),
            user_agent: self.user_agent.clone(),
            respect_robots: self.respect_robots,
            max_in_flight: self.max_in_flight.max(1),
        }
    }
}

fn default_template() -> String {
    format!("An image of {CATEGORY_PLACEHOLDER}")
}
fn default_alpha() -> f64 {
    0.1
}
fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_mc_samples() -> usize {
    100
}
fn default_method() -> Method {
    Method::Webcp
}

/// One JSON file describing a full run. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task_name: String,
    /// JSON list of `{"id", "display_name"}`.
    pub classes: PathBuf,
    #[serde(default = "default_template")]
    pub query_template: String,
    /// Template for the classifier's label embeddings.
    #[serde(default = "default_template")]
    pub prompt_template: String,
    pub per_class: usize,
    #[serde(default)]
    pub temperatures: PipelineTemperatures,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub prompts: PromptSet,
    pub pseudo_map: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Alpha grid for the evaluation report.
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub rule: ThresholdRule,
    /// Search provider: an `http(s)://` endpoint, or a fixture directory
    /// that also serves the pages and images.
    pub provider: String,
    #[serde(default)]
    pub fetch: FetchSettings,
    /// Directory of `<store>.json` embedding dumps.
    #[serde(default)]
    pub embedding_dumps: Option<PathBuf>,
    /// Embedding service endpoint per encoder role, used for stores with no dump.
    #[serde(default)]
    pub embedding_services: BTreeMap<EncoderRole, String>,
    /// `labels.jsonl` of the test split.
    pub test_labels: PathBuf,
    /// Labelled target-distribution calibration data for the oracle baseline.
    #[serde(default)]
    pub oracle_labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub embeddings_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    /// Make relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.classes);
        fix(&mut self.pseudo_map);
        fix(&mut self.test_labels);
        fix(&mut self.output_dir);
        for p in [
            &mut self.embedding_dumps,
            &mut self.oracle_labels,
            &mut self.corpus_dir,
            &mut self.embeddings_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if !is_http(&self.provider) {
            let p = Path::new(&self.provider);
            if p.is_relative() {
                self.provider = base.join(p).display().to_string();
            }
        }
    }

    /// Every violation, not just the first.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        if self.task_name.trim().is_empty() {
            errs.push("task_name is empty".to_string());
        }
        if self.per_class == 0 {
            errs.push("per_class must be at least 1".to_string());
        }
        for (name, t) in [("query_template", &self.query_template), ("prompt_template", &self.prompt_template)] {
            if !t.contains(CATEGORY_PLACEHOLDER) {
                errs.push(format!("{name} must contain {CATEGORY_PLACEHOLDER}"));
            }
        }
        let t = &self.temperatures;
        for (name, v) in [
            ("context", t.context),
            ("filter", t.filter),
            ("content", t.content),
            ("classifier", t.classifier),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("temperatures.{name} must be positive, got {v}"));
            }
        }
        if let Err(e) = self.prompts.validate() {
            errs.push(format!("prompts: {e}"));
        }
        if validate_alpha(self.alpha).is_err() {
            errs.push(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.alphas.is_empty() {
            errs.push("alphas is empty".to_string());
        }
        for &a in &self.alphas {
            if validate_alpha(a).is_err() {
                errs.push(format!("alphas: {a} is outside (0, 1)"));
            }
        }
        if self.mc_samples == 0 {
            errs.push("mc_samples must be at least 1".to_string());
        }
        if self.provider.trim().is_empty() {
            errs.push("provider is empty".to_string());
        } else if is_http(&self.provider) && Url::parse(&self.provider).is_err() {
            errs.push(format!("provider `{}` is not a valid URL", self.provider));
        }
        if !(self.fetch.timeout_secs > 0.0 && self.fetch.timeout_secs.is_finite()) {
            errs.push("fetch.timeout_secs must be positive".to_string());
        }
        if self.embedding_dumps.is_none() && self.embedding_services.is_empty() {
            errs.push("either embedding_dumps or embedding_services is required".to_string());
        }
        for (role, url) in &self.embedding_services {
            if Url::parse(url).is_err() {
                errs.push(format!("embedding_services.{role:?}: `{url}` is not a valid URL").to_lowercase());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(errs))
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.output_dir.join("corpus"))
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.embeddings_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("embeddings"))
    }

    pub fn plausibility_config(&self) -> PlausibilityConfig {
        PlausibilityConfig {
            temperatures: Temperatures {
                context: self.temperatures.context,
                filter: self.temperatures.filter,
                content: self.temperatures.content,
            },
            aggregation: self.aggregation,
            prompts: self.prompts.clone(),
        }
    }

    pub fn monte_carlo(&self) -> MonteCarloConfig {
        MonteCarloConfig {
            iterations: self.mc_samples,
            alpha: self.alpha,
            seed: self.seed,
            rule: self.rule,
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.output_dir.join(rel)
    }
}

fn is_http(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

pub fn read_classes(path: &Path) -> Result<Vec<ClassLabel>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let classes: Vec<ClassLabel> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    validate_classes(&classes).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(classes)
}

pub fn read_pseudo_map(path: &Path) -> Result<PseudoLabelMap, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Search provider and page fetcher for a provider string.
pub fn open_provider(
    provider: &str,
    policy: &FetchPolicy,
) -> Result<(Box<dyn SearchProvider>, Box<dyn Fetcher>), String> {
    if is_http(provider) {
        let url = Url::parse(provider).map_err(|e| format!("provider `{provider}`: {e}"))?;
        let search = HttpSearchProvider::new(url, policy).map_err(|e| e.to_string())?;
        let fetcher = HttpFetcher::new(policy.clone()).map_err(|e| e.to_string())?;
        Ok((Box::new(search), Box::new(fetcher)))
    } else {
        let dir = PathBuf::from(provider);
        if !dir.is_dir() {
            return Err(format!("fixture provider directory {} does not exist", dir.display()));
        }
        let fetcher = FixtureFetcher::open(&dir).map_err(|e| e.to_string())?;
        Ok((Box::new(FixtureSearchProvider::new(dir)), Box::new(fetcher)))
    }
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task_name: String,
    pub stages: Vec<Stage>,
    /// The primary output of each stage.
    pub artifacts: Vec<ArtifactRecord>,
    /// Supporting files (scores, drop reports, store files).
    pub intermediates: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn artifact(&self, path: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

fn record(output_dir: &Path, path: &Path) -> Result<ArtifactRecord, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let rel = path
        .strip_prefix(output_dir)
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .unwrap_or_else(|_| path.display().to_string());
    Ok(ArtifactRecord {
        path: rel,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn ensure_file(path: &Path, what: &str) -> Result<(), String> {
    if path.is_file() {
        Ok(())
    } else {
        Err(format!("{what} {} does not exist", path.display()))
    }
}

fn create_parent(path: &Path) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Stage outputs: primary artifact plus intermediates.
struct StageOutput {
    primary: PathBuf,
    intermediates: Vec<PathBuf>,
    counts: Vec<(&'static str, usize)>,
}

// ---------------------------------------------------------------------------
// Stages

fn load_store(dir: &Path, store: Store) -> Result<EmbeddingMatrix, String> {
    let path = dir.join(store.file_name());
    ensure_file(&path, "embedding store")?;
    load_embeddings(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn stage_mine(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    ensure_file(&cfg.classes, "class file")?;
    let classes = read_classes(&cfg.classes)?;
    let policy = cfg.fetch.policy();
    let (provider, fetcher) = open_provider(&cfg.provider, &policy)?;
    let req = MineRequest {
        task_name: cfg.task_name.clone(),
        classes,
        query_template: cfg.query_template.clone(),
        per_class: cfg.per_class,
        max_in_flight: policy.max_in_flight,
    };
    let corpus = mine_corpus(&req, provider.as_ref(), fetcher.as_ref()).map_err(|e| e.to_string())?;
    let dir = cfg.corpus_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| format!("cannot clear {}: {e}", dir.display()))?;
    }
    write_corpus(&dir, &corpus).map_err(|e| e.to_string())?;
    Ok(StageOutput {
        primary: dir.join(MANIFEST_FILE),
        intermediates: vec![dir.join(crate::miner::METADATA_FILE)],
        counts: vec![
            ("examples", corpus.manifest.examples.len()),
            ("warnings", corpus.manifest.warnings.len()),
        ],
    })
}

fn stage_embed_import(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    let corpus_dir = cfg.corpus_dir();
    let dir = cfg.embeddings_dir();
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut index = StoreIndex::default();
    let mut files = Vec::new();
    let mut dims: BTreeMap<EncoderRole, (Store, usize)> = BTreeMap::new();
    // Loaded lazily: only needed when a store comes from a service.
    let mut context: Option<(CorpusManifest, PseudoLabelMap)> = None;

    for store in Store::ALL {
        let dump = cfg
            .embedding_dumps
            .as_ref()
            .map(|d| d.join(format!("{}.json", store.name())))
            .filter(|p| p.is_file());
        let matrix = if let Some(path) = dump {
            import_dump(&path)?
        } else if let Some(endpoint) = cfg.embedding_services.get(&store.role()) {
            if context.is_none() {
                let corpus = read_corpus(&corpus_dir).map_err(|e| e.to_string())?;
                ensure_file(&cfg.pseudo_map, "pseudo-label map")?;
                context = Some((corpus, read_pseudo_map(&cfg.pseudo_map)?));
            }
            let (corpus, pseudo) = context.as_ref().expect("loaded above");
            let request = embedding_request(store, corpus, &corpus_dir, cfg, pseudo);
            let expected = dims.get(&store.role()).map(|(_, d)| *d);
            crate::embedding::fetch_embeddings(endpoint, &request, expected)
                .map_err(|e| format!("{} from {endpoint}: {e}", store.name()))?
        } else {
            let expected = cfg
                .embedding_dumps
                .as_ref()
                .map(|d| d.join(format!("{}.json", store.name())).display().to_string())
                .unwrap_or_else(|| format!("{}.json", store.name()));
            return Err(format!(
                "no embedding input for store `{}`: expected dump {expected} or a {:?} service",
                store.name(),
                store.role()
            )
            .to_lowercase());
        };
        if let Some((other, d)) = dims.get(&store.role()) {
            if *d != matrix.dim() {
                return Err(format!(
                    "store `{}` has dim {} but `{}` of the same encoder has dim {d}",
                    store.name(),
                    matrix.dim(),
                    other.name()
                ));
            }
        } else {
            dims.insert(store.role(), (store, matrix.dim()));
        }
        let path = dir.join(store.file_name());
        store_embeddings(&matrix, &path).map_err(|e| format!("{}: {e}", path.display()))?;
        let bytes = fs::read(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        index.stores.push(StoreIndexEntry {
            name: store.name().to_string(),
            file: store.file_name(),
            role: store.role(),
            dim: matrix.dim(),
            count: matrix.len(),
            sha256: sha256_hex(&bytes),
        });
        files.push(path);
    }
    let index_path = dir.join(EMBEDDING_INDEX_FILE);
    write_json(&index_path, &index)?;
    let total = index.stores.iter().map(|s| s.count).sum();
    Ok(StageOutput {
        primary: index_path,
        intermediates: files,
        counts: vec![("stores", index.stores.len()), ("vectors", total)],
    })
}

/// Read a `{"dim", "vectors"}` dump into a matrix with rows in id order.
pub fn import_dump(path: &Path) -> Result<EmbeddingMatrix, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let dump: EmbedResponse = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    dump.into_matrix().map_err(|e| format!("{}: {e}", path.display()))
}

fn stage_plausibility(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    let corpus_dir = cfg.corpus_dir();
    ensure_file(&corpus_dir.join(MANIFEST_FILE), "corpus manifest")?;
    let corpus = read_corpus(&corpus_dir).map_err(|e| e.to_string())?;
    ensure_file(&cfg.pseudo_map, "pseudo-label map")?;
    let pseudo = read_pseudo_map(&cfg.pseudo_map)?;
    let dir = cfg.embeddings_dir();
    let sentences = load_store(&dir, Store::Sentences)?;
    let queries = load_store(&dir, Store::Queries)?;
    let content_images = load_store(&dir, Store::ContentImages)?;
    let content_prompts = load_store(&dir, Store::ContentPrompts)?;
    let stores = PlausibilityStores {
        sentences: &sentences,
        queries: &queries,
        content_images: &content_images,
        content_prompts: &content_prompts,
    };
    let (set, dropped) =
        build_ambiguous_set(&corpus, &stores, &pseudo, &cfg.plausibility_config()).map_err(|e| e.to_string())?;
    let out = cfg.out("plausibilities.jsonl");
    create_parent(&out)?;
    set.write(&out).map_err(|e| e.to_string())?;
    let dropped_path = cfg.out("plausibility_dropped.json");
    write_json(&dropped_path, &dropped)?;
    Ok(StageOutput {
        primary: out,
        intermediates: vec![dropped_path],
        counts: vec![("vectors", set.len()), ("dropped", dropped.len())],
    })
}

fn classifier_scores<'a, I>(cfg: &PipelineConfig, classes: &[String], ids: I) -> Result<ScoreTable, String>
where
    I: IntoIterator<Item = &'a str>,
{
    let dir = cfg.embeddings_dir();
    let images = load_store(&dir, Store::ClassifierImages)?;
    let labels = load_store(&dir, Store::ClassifierLabels)?;
    let ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
    nonconformity_scores(&images, &ids, &labels, classes, cfg.temperatures.classifier).map_err(|e| e.to_string())
}

fn class_ids(cfg: &PipelineConfig) -> Result<Vec<String>, String> {
    ensure_file(&cfg.classes, "class file")?;
    Ok(read_classes(&cfg.classes)?.into_iter().map(|c| c.id).collect())
}

fn read_plausibilities(cfg: &PipelineConfig) -> Result<AmbiguousCalibrationSet, String> {
    let path = cfg.out("plausibilities.jsonl");
    ensure_file(&path, "plausibility file")?;
    AmbiguousCalibrationSet::read(&path).map_err(|e| e.to_string())
}

fn stage_calibrate(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    let set = read_plausibilities(cfg)?;
    let classes = class_ids(cfg)?;
    let scores = classifier_scores(cfg, &classes, set.entries().iter().map(|e| e.example_id.as_str()))?;
    let scores_path = cfg.out("scores/calibration.jsonl");
    create_parent(&scores_path)?;
    scores.write(&scores_path).map_err(|e| e.to_string())?;
    let threshold = match cfg.method {
        Method::Webcp => mc_threshold(&set, &scores, &cfg.monte_carlo()).map_err(|e| e.to_string())?,
        Method::Standard => {
            let s = queried_class_scores(&set, &scores).map_err(|e| e.to_string())?;
            standard_calibration(&s, cfg.alpha).map_err(|e| e.to_string())?
        }
    };
    log::info!(stage = "calibrate", gamma = threshold.gamma.to_string().as_str(); "threshold selected");
    let out = cfg.out("threshold.json");
    threshold.write(&out).map_err(|e| e.to_string())?;
    Ok(StageOutput {
        primary: out,
        intermediates: vec![scores_path],
        counts: vec![("calibration_points", set.len())],
    })
}

fn read_labels(path: &Path, split: Split, what: &str) -> Result<LabeledEvalSet, String> {
    ensure_file(path, what)?;
    LabeledEvalSet::read(path, split).map_err(|e| e.to_string())
}

fn stage_predict(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    let test = read_labels(&cfg.test_labels, Split::Test, "test label file")?;
    let classes = class_ids(cfg)?;
    let scores = classifier_scores(cfg, &classes, test.ids())?;
    let scores_path = cfg.out("scores/test.jsonl");
    create_parent(&scores_path)?;
    scores.write(&scores_path).map_err(|e| e.to_string())?;
    let threshold_path = cfg.out("threshold.json");
    ensure_file(&threshold_path, "threshold file")?;
    let threshold = ConformalThreshold::read(&threshold_path).map_err(|e| e.to_string())?;
    let sets = predict_all(&scores, threshold.gamma);
    let out = cfg.out("sets.jsonl");
    write_prediction_sets(&out, &sets).map_err(|e| e.to_string())?;
    Ok(StageOutput {
        primary: out,
        intermediates: vec![scores_path],
        counts: vec![("sets", sets.len())],
    })
}

fn stage_evaluate(cfg: &PipelineConfig) -> Result<StageOutput, String> {
    let set = read_plausibilities(cfg)?;
    let test = read_labels(&cfg.test_labels, Split::Test, "test label file")?;
    let oracle = match &cfg.oracle_labels {
        Some(p) => Some(read_labels(p, Split::Calibration, "oracle label file")?),
        None => None,
    };
    let classes = class_ids(cfg)?;
    let mut ids: Vec<&str> = set.entries().iter().map(|e| e.example_id.as_str()).collect();
    ids.extend(test.ids());
    if let Some(o) = &oracle {
        ids.extend(o.ids());
    }
    ids.sort_unstable();
    ids.dedup();
    let scores = classifier_scores(cfg, &classes, ids)?;
    let mut methods = vec![BenchMethod::Webcp, BenchMethod::StandardWeb];
    if oracle.is_some() {
        methods.push(BenchMethod::Oracle);
    }
    let inputs = BenchmarkInputs {
        web: set,
        oracle,
        test,
        scores,
    };
    let bench = BenchmarkConfig {
        methods,
        alphas: cfg.alphas.clone(),
        mc_samples: cfg.mc_samples,
        seed: cfg.seed,
        rule: cfg.rule,
    };
    let report = run_benchmark(&inputs, &bench).map_err(|e| e.to_string())?;
    let csv = cfg.out("report.csv");
    report.write_csv(&csv).map_err(|e| e.to_string())?;
    let json = cfg.out("report.json");
    report.write_json(&json).map_err(|e| e.to_string())?;
    Ok(StageOutput {
        primary: csv,
        intermediates: vec![json],
        counts: vec![("rows", report.rows.len())],
    })
}

/// Run the requested stages in pipeline order and write the run manifest.
pub fn run_pipeline(cfg: &PipelineConfig, stages: &[Stage]) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::config(format!("cannot create {}: {e}", cfg.output_dir.display())))?;

    let mut manifest = RunManifest {
        task_name: cfg.task_name.clone(),
        stages: stages.clone(),
        ..RunManifest::default()
    };
    for &stage in &stages {
        let start = Instant::now();
        log::info!(stage = stage.name(); "stage started");
        let result = match stage {
            Stage::Mine => stage_mine(cfg),
            Stage::EmbedImport => stage_embed_import(cfg),
            Stage::Plausibility => stage_plausibility(cfg),
            Stage::Calibrate => stage_calibrate(cfg),
            Stage::Predict => stage_predict(cfg),
            Stage::Evaluate => stage_evaluate(cfg),
        };
        let out = match result {
            Ok(out) => out,
            Err(message) => {
                log::error!(stage = stage.name(); "{message}");
                return Err(PipelineError::Stage { stage, message });
            }
        };
        let primary = record(&cfg.output_dir, &out.primary).map_err(|e| PipelineError::stage(stage, e))?;
        for p in &out.intermediates {
            manifest
                .intermediates
                .push(record(&cfg.output_dir, p).map_err(|e| PipelineError::stage(stage, e))?);
        }
        let elapsed_ms = start.elapsed().as_millis() as u64;
        let counts = out
            .counts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        log::info!(
            stage = stage.name(),
            elapsed_ms = elapsed_ms,
            artifact = primary.path.as_str(),
            counts = counts.as_str();
            "stage finished"
        );
        manifest.artifacts.push(primary);
    }
    write_json(&cfg.output_dir.join(RUN_MANIFEST_FILE), &manifest).map_err(PipelineError::config)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> PipelineConfig {
        serde_json::from_str(
            r#"{
                "task_name": "t",
                "classes": "classes.json",
                "per_class": 5,
                "pseudo_map": "pseudo.json",
                "provider": "web",
                "embedding_dumps": "dumps",
                "test_labels": "labels/test.jsonl",
                "output_dir": "run"
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_and_path_resolution() {
        let mut cfg = minimal();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.mc_samples, 100);
        assert_eq!(cfg.method, Method::Webcp);
        assert_eq!(cfg.alphas, DEFAULT_ALPHAS.to_vec());
        assert_eq!(cfg.query_template, "An image of <category>");
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.classes, PathBuf::from("/base/classes.json"));
        assert_eq!(cfg.provider, "/base/web");
        assert_eq!(cfg.corpus_dir(), PathBuf::from("/base/run/corpus"));
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = minimal();
        cfg.alpha = 1.5;
        cfg.per_class = 0;
        cfg.temperatures.classifier = 0.0;
        cfg.query_template = "no placeholder".into();
        cfg.embedding_dumps = None;
        let Err(PipelineError::Config(errs)) = cfg.validate() else {
            panic!("expected config error");
        };
        assert_eq!(errs.len(), 5, "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"task_name":"t","bogus":1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn stage_lists() {
        assert_eq!(
            parse_stages("evaluate,mine, calibrate").unwrap(),
            vec![Stage::Mine, Stage::Calibrate, Stage::Evaluate]
        );
        assert!(parse_stages("mine,fly").is_err());
        assert!(parse_stages("").is_err());
    }
}
