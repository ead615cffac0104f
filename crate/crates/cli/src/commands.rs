use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use serde::Deserialize;
use webcp::conformal::{
    nonconformity_scores, predict_all, queried_class_scores, read_prediction_sets, standard_calibration,
    write_prediction_sets, ConformalThreshold, ScoreTable,
};
use webcp::embedding::{fetch_embeddings, EmbedRequest};
use webcp::evaluation::{
    run_benchmark, run_synthetic_benchmark, BenchmarkConfig, BenchmarkInputs, LabeledEvalSet, Split, SyntheticTask,
};
use webcp::miner::{read_corpus, write_corpus, FetchPolicy, MineRequest};
use webcp::pipeline::{
    embedding_request, import_dump, open_provider, parse_stages, read_classes, read_pseudo_map, run_pipeline,
    PipelineConfig, PipelineError, Stage, Store,
};
use webcp::plausibility::PlausibilityStores;
use webcp::synth::{write_fixture, FixtureSpec};
use webcp::{
    build_ambiguous_set, load_embeddings, mc_threshold, store_embeddings, AmbiguousCalibrationSet, Method,
    MonteCarloConfig, PlausibilityConfig, ThresholdRule,
};

use crate::{
    CalibrateArgs, EmbedCheckArgs, EmbedImportArgs, EmbedRequestsArgs, EvaluateArgs, MethodArg, MineArgs,
    PlausibilityArgs, PredictArgs, RuleArg, RunArgs, ScoreArgs, SynthArgs,
};

/// How a command failed, which decides the exit status.
pub enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn config<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Config(e.into())
}

fn stage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Stage(e.into())
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Webcp => Method::Webcp,
            MethodArg::Standard => Method::Standard,
        }
    }
}

impl From<RuleArg> for ThresholdRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Strict => ThresholdRule::Strict,
            RuleArg::Conservative => ThresholdRule::Conservative,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Outcome {
    webcp::conformal::validate_alpha(alpha).map_err(config)
}

pub fn mine(a: MineArgs) -> Outcome {
    if a.per_class == 0 {
        return Err(config(anyhow!("--per-class must be at least 1")));
    }
    if !(a.timeout_secs > 0.0 && a.timeout_secs.is_finite()) {
        return Err(config(anyhow!("--timeout-secs must be positive")));
    }
    let classes = read_classes(&a.classes).map_err(|e| config(anyhow!(e)))?;
    let policy = FetchPolicy {
        timeout: Duration::from_secs_f64(a.timeout_secs),
        retries: a.retries,
        respect_robots: !a.ignore_robots,
        max_in_flight: a.max_in_flight.max(1),
        ..FetchPolicy::default()
    };
    let (provider, fetcher) = open_provider(&a.provider, &policy).map_err(|e| config(anyhow!(e)))?;
    let req = MineRequest {
        task_name: a.task_name,
        classes,
        query_template: a.template,
        per_class: a.per_class,
        max_in_flight: policy.max_in_flight,
    };
    let corpus = webcp::mine_corpus(&req, provider.as_ref(), fetcher.as_ref()).map_err(stage)?;
    write_corpus(&a.out, &corpus).map_err(stage)?;
    log::info!(
        examples = corpus.manifest.examples.len(),
        out = a.out.display().to_string().as_str();
        "corpus written"
    );
    Ok(())
}

pub fn embed_import(a: EmbedImportArgs) -> Outcome {
    let matrix = match (&a.input, &a.service, &a.request) {
        (Some(input), _, _) => import_dump(input).map_err(|e| stage(anyhow!(e)))?,
        (None, Some(endpoint), Some(request)) => {
            let req: EmbedRequest = read_json(request).map_err(config)?;
            fetch_embeddings(endpoint, &req, a.expect_dim).map_err(stage)?
        }
        _ => return Err(config(anyhow!("give a dump file, or --service with --request"))),
    };
    if let Some(d) = a.expect_dim.filter(|&d| d != matrix.dim()) {
        return Err(stage(anyhow!("expected dimension {d}, got {}", matrix.dim())));
    }
    create_parent(&a.out).map_err(stage)?;
    store_embeddings(&matrix, &a.out).map_err(stage)?;
    log::info!(dim = matrix.dim(), count = matrix.len(); "store written");
    Ok(())
}

pub fn embed_check(a: EmbedCheckArgs) -> Outcome {
    let m = load_embeddings(&a.store).map_err(|e| stage(anyhow!("{}: {e}", a.store.display())))?;
    if let Some(d) = a.expect_dim.filter(|&d| d != m.dim()) {
        return Err(stage(anyhow!("{}: dimension {} but {d} expected", a.store.display(), m.dim())));
    }
    if let Some(i) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(stage(anyhow!("{}: non-finite value in row `{}`", a.store.display(), m.ids()[i / m.dim()])));
    }
    let bytes = fs::read(&a.store).map_err(stage)?;
    let summary = serde_json::json!({
        "dim": m.dim(),
        "count": m.len(),
        "sha256": webcp::miner::sha256_hex(&bytes),
    });
    println!("{summary}");
    Ok(())
}

pub fn embed_requests(a: EmbedRequestsArgs) -> Outcome {
    let cfg = PipelineConfig::load(&a.config).map_err(pipeline_failure)?;
    let corpus_dir = cfg.corpus_dir();
    let corpus = read_corpus(&corpus_dir).map_err(stage)?;
    let pseudo = read_pseudo_map(&cfg.pseudo_map).map_err(|e| config(anyhow!(e)))?;
    for store in Store::ALL {
        let req = embedding_request(store, &corpus, &corpus_dir, &cfg, &pseudo);
        let path = a.out.join(format!("{}.request.json", store.name()));
        write_json(&path, &req).map_err(stage)?;
    }
    Ok(())
}

pub fn plausibility(a: PlausibilityArgs) -> Outcome {
    let cfg: PlausibilityConfig = match &a.config {
        Some(p) => read_json(p).map_err(config)?,
        None => PlausibilityConfig::default(),
    };
    cfg.validate().map_err(config)?;
    let pseudo = read_pseudo_map(&a.pseudo_map).map_err(|e| config(anyhow!(e)))?;
    let corpus = read_corpus(&a.corpus).map_err(stage)?;
    let load = |store: Store| {
        let path = a.embeddings.join(store.file_name());
        load_embeddings(&path).map_err(|e| stage(anyhow!("{}: {e}", path.display())))
    };
    let sentences = load(Store::Sentences)?;
    let queries = load(Store::Queries)?;
    let content_images = load(Store::ContentImages)?;
    let content_prompts = load(Store::ContentPrompts)?;
    let stores = PlausibilityStores {
        sentences: &sentences,
        queries: &queries,
        content_images: &content_images,
        content_prompts: &content_prompts,
    };
    let (set, dropped) = build_ambiguous_set(&corpus, &stores, &pseudo, &cfg).map_err(stage)?;
    create_parent(&a.out).map_err(stage)?;
    set.write(&a.out).map_err(stage)?;
    for d in &dropped {
        log::warn!(example_id = d.example_id.as_str(); "dropped: {}", d.reason);
    }
    log::info!(vectors = set.len(), dropped = dropped.len(); "plausibilities written");
    Ok(())
}

#[derive(Deserialize)]
struct IdLine {
    example_id: String,
}

pub fn score(a: ScoreArgs) -> Outcome {
    if !(a.temperature > 0.0 && a.temperature.is_finite()) {
        return Err(config(anyhow!("--temperature must be positive")));
    }
    let classes: Vec<String> = read_classes(&a.classes)
        .map_err(|e| config(anyhow!(e)))?
        .into_iter()
        .map(|c| c.id)
        .collect();
    let images = load_embeddings(&a.images).map_err(|e| stage(anyhow!("{}: {e}", a.images.display())))?;
    let labels = load_embeddings(&a.labels).map_err(|e| stage(anyhow!("{}: {e}", a.labels.display())))?;
    let ids: Vec<String> = match &a.ids {
        Some(p) => {
            let lines: Vec<IdLine> = webcp::jsonl::read_jsonl(p).map_err(stage)?;
            let unique: BTreeSet<String> = lines.into_iter().map(|l| l.example_id).collect();
            unique.into_iter().collect()
        }
        None => images.ids().to_vec(),
    };
    let table = nonconformity_scores(&images, &ids, &labels, &classes, a.temperature).map_err(stage)?;
    create_parent(&a.out).map_err(stage)?;
    table.write(&a.out).map_err(stage)?;
    log::info!(rows = table.len(); "scores written");
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Outcome {
    check_alpha(a.alpha)?;
    if a.mc_samples == 0 {
        return Err(config(anyhow!("--mc-samples must be at least 1")));
    }
    let method = Method::from(a.method);
    if a.labels.is_some() && method != Method::Standard {
        return Err(config(anyhow!("--labels only applies to --method standard")));
    }
    let scores = ScoreTable::read(&a.scores).map_err(stage)?;
    let threshold = if let Some(labels) = &a.labels {
        let items = LabeledEvalSet::read(labels, Split::Calibration).map_err(stage)?;
        let s = items
            .items
            .iter()
            .map(|it| scores.score(&it.example_id, &it.class))
            .collect::<Result<Vec<f64>, _>>()
            .map_err(stage)?;
        standard_calibration(&s, a.alpha).map_err(stage)?
    } else {
        let path = a.plausibilities.as_ref().expect("clap requires plausibilities without labels");
        let set = AmbiguousCalibrationSet::read(path).map_err(stage)?;
        match method {
            Method::Webcp => {
                let cfg = MonteCarloConfig {
                    rule: a.rule.into(),
                    ..MonteCarloConfig::new(a.mc_samples, a.alpha, a.seed)
                };
                mc_threshold(&set, &scores, &cfg).map_err(stage)?
            }
            Method::Standard => {
                let s = queried_class_scores(&set, &scores).map_err(stage)?;
                standard_calibration(&s, a.alpha).map_err(stage)?
            }
        }
    };
    create_parent(&a.out).map_err(stage)?;
    threshold.write(&a.out).map_err(stage)?;
    log::info!(method = method.to_string().as_str(), gamma = threshold.gamma.to_string().as_str(); "threshold written");
    Ok(())
}

pub fn predict(a: PredictArgs) -> Outcome {
    let scores = ScoreTable::read(&a.scores).map_err(stage)?;
    let threshold = ConformalThreshold::read(&a.threshold).map_err(stage)?;
    let sets = predict_all(&scores, threshold.gamma);
    create_parent(&a.out).map_err(stage)?;
    write_prediction_sets(&a.out, &sets).map_err(stage)?;
    // Read back so a broken writer fails here rather than downstream.
    let n = read_prediction_sets(&a.out).map_err(stage)?.len();
    log::info!(sets = n; "prediction sets written");
    Ok(())
}

/// `evaluate` input: a synthetic task run over several seeds, or files
/// from a finished calibration.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    #[serde(default)]
    synthetic: Option<SyntheticTask>,
    /// Seeds for the synthetic task; the task's own seed when empty.
    #[serde(default)]
    seeds: Vec<u64>,
    #[serde(default)]
    plausibilities: Option<PathBuf>,
    /// Scores covering the web, oracle and test items.
    #[serde(default)]
    scores: Option<PathBuf>,
    #[serde(default)]
    test_labels: Option<PathBuf>,
    #[serde(default)]
    oracle_labels: Option<PathBuf>,
    #[serde(default)]
    benchmark: BenchmarkConfig,
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let cfg: EvalConfig = read_json(&a.config).map_err(config)?;
    cfg.benchmark.validate().map_err(config)?;
    let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
    let report = match (&cfg.synthetic, &cfg.plausibilities, &cfg.scores, &cfg.test_labels) {
        (Some(task), None, None, None) => {
            task.validate().map_err(config)?;
            let seeds = if cfg.seeds.is_empty() { vec![task.seed] } else { cfg.seeds.clone() };
            run_synthetic_benchmark(task, &seeds, &cfg.benchmark).map_err(stage)?
        }
        (None, Some(p), Some(s), Some(t)) => {
            let oracle = match &cfg.oracle_labels {
                Some(o) => Some(LabeledEvalSet::read(&resolve(o), Split::Calibration).map_err(stage)?),
                None => None,
            };
            let inputs = BenchmarkInputs {
                web: AmbiguousCalibrationSet::read(&resolve(p)).map_err(stage)?,
                oracle,
                test: LabeledEvalSet::read(&resolve(t), Split::Test).map_err(stage)?,
                scores: ScoreTable::read(&resolve(s)).map_err(stage)?,
            };
            run_benchmark(&inputs, &cfg.benchmark).map_err(stage)?
        }
        _ => {
            return Err(config(anyhow!(
                "{}: give either `synthetic` or all of `plausibilities`, `scores` and `test_labels`",
                a.config.display()
            )))
        }
    };
    create_parent(&a.out).map_err(stage)?;
    report.write_csv(&a.out).map_err(stage)?;
    report.write_json(&a.out.with_extension("json")).map_err(stage)?;
    print!("{}", report.to_csv());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    let spec: FixtureSpec = match &a.spec {
        Some(p) => read_json(p).map_err(config)?,
        None => FixtureSpec::default(),
    };
    spec.validate().map_err(config)?;
    let summary = write_fixture(&spec, &a.out).map_err(stage)?;
    log::info!(
        pages = summary.pages,
        mined = summary.mined_examples,
        test = summary.test_items;
        "fixture written to {}",
        a.out.display()
    );
    Ok(())
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure::Config(e.into()),
        PipelineError::Stage { .. } => Failure::Stage(e.into()),
    }
}

pub fn run(a: RunArgs) -> Outcome {
    let mut cfg = PipelineConfig::load(&a.config).map_err(pipeline_failure)?;
    let cwd = std::env::current_dir().map_err(config)?;
    if let Some(v) = a.task_name {
        cfg.task_name = v;
    }
    if let Some(v) = a.per_class {
        cfg.per_class = v;
    }
    if let Some(v) = a.provider {
        cfg.provider = if v.starts_with("http://") || v.starts_with("https://") {
            v
        } else {
            cwd.join(v).display().to_string()
        };
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.method {
        cfg.method = v.into();
    }
    if let Some(v) = a.rule {
        cfg.rule = v.into();
    }
    if let Some(v) = a.output_dir {
        cfg.output_dir = cwd.join(v);
    }
    let stages = match &a.stages {
        Some(list) => parse_stages(list).map_err(|e| config(anyhow!(e)))?,
        None => Stage::ALL.to_vec(),
    };
    let manifest = run_pipeline(&cfg, &stages).map_err(pipeline_failure)?;
    if manifest.artifacts.len() != stages.len() {
        bail_stage(format!("{} artifacts for {} stages", manifest.artifacts.len(), stages.len()))?;
    }
    Ok(())
}

fn bail_stage(msg: String) -> Outcome {
    let r: anyhow::Result<()> = (|| bail!(msg))();
    r.map_err(stage)
}
