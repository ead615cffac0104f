//! Self-contained synthetic task directories.
//!
//! A fixture holds a small web (search results, HTML pages, images) to
//! mine, embedding dumps for every store the pipeline reads, labelled
//! oracle and test splits, and a `pipeline.json` that runs end to end.
//!
//! Layout:
//!
//! ```text
//! pipeline.json  classes.json  pseudo_map.json  synth_spec.json
//! web/routes.json  web/search/<class>.json  web/pages/*.html  web/images/*
//! embedding_dumps/<store>.json
//! labels/oracle.jsonl  labels/test.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{iteration_rng, Method, ThresholdRule};
use crate::embedding::{EmbedResponse, EmbeddingMatrix};
use crate::evaluation::{generate_synthetic_task, EvalError, SyntheticTask, DEFAULT_ALPHAS};
use crate::miner::{
    mine_corpus, ClassLabel, FixtureFailure, FixtureFetcher, FixtureRoute, FixtureRoutes, FixtureSearchProvider,
    MineError, MineRequest, MinedCorpus, RawSearchEntry,
};
use crate::pipeline::{FetchSettings, PipelineConfig, PipelineTemperatures, Store};
use crate::plausibility::{sentence_units, Aggregation, PromptSet, PseudoLabelMap};

const PAGE_HOST: &str = "https://pages.fixture.test";
const IMAGE_HOST: &str = "https://img.fixture.test";
const QUERY_TEMPLATE: &str = "An image of <category>";
const FETCHED_AT: &str = "2024-01-01T00:00:00Z";

/// Special pages every class gets; the rest are ordinary pages.
const SPECIAL_KINDS: [PageKind; 12] = [
    PageKind::Timeout,
    PageKind::Timeout,
    PageKind::Blocked,
    PageKind::NotFound,
    PageKind::LazyLoaded,
    PageKind::NoMatch,
    PageKind::NoContext,
    PageKind::MissingAlt,
    PageKind::MissingAlt,
    PageKind::LongText,
    PageKind::Malformed,
    PageKind::Resized,
];
/// Special pages that can never be accepted.
const UNUSABLE_KINDS: usize = 7;

const NAMES: [(&str, &str); 10] = [
    ("amber lichen", "lichen"),
    ("basalt moss", "moss"),
    ("cobalt fern", "fern"),
    ("dune sedge", "sedge"),
    ("ember thistle", "thistle"),
    ("frost clover", "clover"),
    ("garnet ivy", "ivy"),
    ("hazel reed", "reed"),
    ("indigo orchid", "orchid"),
    ("jade bracken", "bracken"),
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fixture spec: {0}")]
    Spec(String),
    #[error("output directory {0} is not empty")]
    NotEmpty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mine(#[from] MineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub task_name: String,
    /// Classifier-side generator; `n_calib` sizes the oracle split.
    pub task: SyntheticTask,
    pub per_class: usize,
    pub results_per_class: usize,
    /// Dimension of the context and content encoders.
    pub text_dim: usize,
    pub alpha: f64,
    pub mc_samples: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            task_name: "synthetic".into(),
            task: SyntheticTask {
                num_classes: 3,
                dim: 32,
                label_noise: 0.2,
                junk_rate: 0.1,
                n_calib: 159,
                n_test: 600,
                seed: 7,
                ..SyntheticTask::default()
            },
            per_class: 53,
            results_per_class: 60,
            text_dim: 32,
            alpha: 0.1,
            mc_samples: 100,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.task.validate()?;
        let mut errs = Vec::new();
        if self.task.num_classes > NAMES.len() * 10 {
            errs.push(format!("at most {} classes are supported", NAMES.len() * 10));
        }
        if self.results_per_class < SPECIAL_KINDS.len() + 1 {
            errs.push(format!("results_per_class must be at least {}", SPECIAL_KINDS.len() + 1));
        }
        if self.per_class == 0 || self.per_class + UNUSABLE_KINDS > self.results_per_class {
            errs.push(format!(
                "per_class must lie in 1..={}",
                self.results_per_class.saturating_sub(UNUSABLE_KINDS)
            ));
        }
        if self.text_dim < 2 {
            errs.push("text_dim must be at least 2".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            errs.push(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.mc_samples == 0 {
            errs.push("mc_samples must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Spec(errs.join("; ")))
        }
    }

    pub fn classes(&self) -> Vec<ClassLabel> {
        self.task
            .class_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| ClassLabel::new(id, class_name(i).0))
            .collect()
    }
}

fn class_name(i: usize) -> (String, String) {
    let (name, noun) = NAMES[i % NAMES.len()];
    if i < NAMES.len() {
        (name.to_string(), noun.to_string())
    } else {
        let round = i / NAMES.len() + 1;
        (format!("{name} {round}"), format!("{noun} {round}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PageKind {
    Normal,
    Timeout,
    Blocked,
    NotFound,
    LazyLoaded,
    NoMatch,
    NoContext,
    MissingAlt,
    LongText,
    Malformed,
    Resized,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub pages: usize,
    pub search_entries: usize,
    pub junk_pages: usize,
    pub mined_examples: usize,
    pub oracle_items: usize,
    pub test_items: usize,
}

struct PageText<'a> {
    name: &'a str,
    junk: bool,
}

fn sentence_pool(rng: &mut ChaCha20Rng, pool: &[String], n: usize) -> Vec<String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

impl PageText<'_> {
    fn pre(&self, rng: &mut ChaCha20Rng) -> Vec<String> {
        let n = self.name;
        if self.junk {
            return vec![
                format!("Survey results for {n} sightings are summarized below."),
                "Counts are grouped by region and by year.".to_string(),
            ];
        }
        let pool = [
            format!("Field notes on {n} from the spring survey."),
            format!("{} grows on damp rock and fallen timber.", capitalize(n)),
            format!("The close-up below shows the typical texture of {n}."),
            "Volunteers walked the northern trail twice this season.".to_string(),
            format!("Specimens of {n} were found near the old quarry."),
        ];
        sentence_pool(rng, &pool, 3)
    }

    fn post(&self, rng: &mut ChaCha20Rng) -> Vec<String> {
        let n = self.name;
        if self.junk {
            return vec!["Source: regional monitoring office.".to_string()];
        }
        let pool = [
            "Photographed in early morning light.".to_string(),
            "Compare it with the other specimens in the gallery.".to_string(),
            format!("Identification of {n} was confirmed by two volunteers."),
            "Scale bar shows one centimetre.".to_string(),
        ];
        sentence_pool(rng, &pool, 2)
    }

    fn alt(&self) -> String {
        if self.junk {
            "bar chart of yearly sightings".to_string()
        } else {
            format!("close-up photo of {}", self.name)
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn page_html(kind: PageKind, title: &str, text: &PageText<'_>, file: &str, rng: &mut ChaCha20Rng) -> String {
    let pre = text.pre(rng).join(" ");
    let post = text.post(rng).join(" ");
    let alt = escape(&text.alt());
    let head = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>\
         <style>body {{ font: 14px sans-serif; }}</style>\
         <script>window.dataLayer = [];</script></head>\n",
        escape(title)
    );
    let nav = "<nav><a href=\"/\">Home</a> <a href=\"/gallery\">Gallery</a></nav>\n";
    let footer = "<footer>Fixture Field Society</footer>\n</body></html>\n";
    let article = |img: &str| {
        format!(
            "<body>\n{nav}<article><h1>{}</h1>\n<p>{}</p>\n<figure>{img}<figcaption>Plate {}</figcaption></figure>\n<p>{}</p>\n</article>\n{footer}",
            escape(title),
            escape(&pre),
            rng_tag(file),
            escape(&post)
        )
    };
    match kind {
        PageKind::NoContext => format!("<html><body><img src=\"/media/{file}\"></body></html>\n"),
        PageKind::LazyLoaded => head
            + &article(&format!(
                "<img src=\"data:image/gif;base64,R0lGODlhAQABAAAAACw=\" data-src=\"/media/{file}\" alt=\"{alt}\">"
            )),
        PageKind::NoMatch => head + &article(&format!("<img src=\"/static/banner-advert.gif\" alt=\"{alt}\">")),
        PageKind::MissingAlt => head + &article(&format!("<img src=\"/media/{file}\" width=\"640\">")),
        PageKind::Resized => {
            let (stem, ext) = file.rsplit_once('.').unwrap_or((file, "jpg"));
            head + &article(&format!("<img src=\"/media/{stem}-640.{ext}\" alt=\"{alt}\">"))
        }
        PageKind::Malformed => format!(
            "<html><head><title>{}</title>\n<body><div class=content><p>{}<p>{}\n<img src=/media/{file} alt=\"{alt}\"></span>\n<p>{}</div>\n",
            escape(title),
            escape(&pre),
            escape(&text.pre(rng).join(" ")),
            escape(&post)
        ),
        PageKind::LongText => {
            let words = ["observation", "of", "the", "specimen", "along", "the", "trail"];
            let long: Vec<&str> = (0..320).map(|i| words[i % words.len()]).collect();
            let notes: Vec<String> = (1..=12).map(|i| format!("Note {i} about {}.", text.name)).collect();
            format!(
                "{head}<body>\n{nav}<article><p>{}</p>\n<img src=\"/media/{file}\" alt=\"{alt}\">\n<p>{}</p></article>\n{footer}",
                long.join(" "),
                escape(&notes.join(" "))
            )
        }
        _ => head + &article(&format!("<img src=\"/media/{file}\" alt=\"{alt}\" width=\"640\">")),
    }
}

fn rng_tag(file: &str) -> String {
    file.split('.').next().unwrap_or(file).to_string()
}

fn image_bytes(class_id: &str, rank: usize, junk: bool) -> Vec<u8> {
    let mut bytes = if junk {
        vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a]
    } else {
        vec![0xff, 0xd8, 0xff, 0xe0]
    };
    bytes.extend(format!("fixture image {class_id} {rank:02} junk={junk}").bytes());
    bytes.resize(bytes.len() + 64, 0);
    bytes
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), SynthError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write(path, text)
}

fn gaussian(rng: &mut ChaCha20Rng, dim: usize, scale: f64) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * sd).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mix(parts: &[(&[f64], f64)], noise: Vec<f64>) -> Vec<f32> {
    let mut out = noise;
    for (v, w) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out.into_iter().map(|x| x as f32).collect()
}

/// Per-page facts needed after mining.
struct PageFacts {
    junk: bool,
    class_index: usize,
    /// The class a mislabelled page is really about.
    other: Option<usize>,
}

/// Write a complete fixture into `out`, which must be empty or absent.
pub fn write_fixture(spec: &FixtureSpec, out: &Path) -> Result<FixtureSummary, SynthError> {
    spec.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(io_err(out))?;
        if entries.next().is_some() {
            return Err(SynthError::NotEmpty(out.display().to_string()));
        }
    }
    let classes = spec.classes();
    let seed = spec.task.seed;
    let web = out.join("web");
    let mut summary = FixtureSummary::default();

    // Pages, images, routes and search results.
    let mut layout = iteration_rng(seed, 1);
    let mut routes = BTreeMap::new();
    let mut facts: BTreeMap<String, PageFacts> = BTreeMap::new();
    for (ci, class) in classes.iter().enumerate() {
        let (name, _) = class_name(ci);
        let slug = name.replace(' ', "-");
        let mut kinds: Vec<PageKind> = SPECIAL_KINDS.to_vec();
        kinds.resize(spec.results_per_class, PageKind::Normal);
        kinds.shuffle(&mut layout);

        let mut results = Vec::new();
        for (i, kind) in kinds.into_iter().enumerate() {
            let rank = i + 1;
            let junk = layout.random::<f64>() < spec.task.junk_rate;
            let other_index = (!junk && classes.len() > 1 && layout.random::<f64>() < spec.task.label_noise)
                .then(|| (ci + 1 + layout.random_range(0..classes.len() - 1)) % classes.len());
            let ext = if junk { "png" } else { "jpg" };
            let file = format!("{slug}_{rank:02}.{ext}");
            let page_url = format!("{PAGE_HOST}/{}/{rank:02}.html", class.id);
            let image_url = format!("{IMAGE_HOST}/{}/{file}?w=640", class.id);
            results.push(RawSearchEntry {
                image_url: image_url.clone(),
                context_url: page_url.clone(),
                rank: rank as i64,
            });
            summary.pages += 1;
            summary.junk_pages += usize::from(junk);

            let failure = match kind {
                PageKind::Timeout => Some(FixtureFailure::Timeout),
                PageKind::Blocked => Some(FixtureFailure::Blocked),
                PageKind::NotFound => Some(FixtureFailure::NotFound),
                _ => None,
            };
            if let Some(error) = failure {
                routes.insert(page_url, FixtureRoute::Failure { error });
                continue;
            }
            // A mislabelled result is a page about some other class.
            let subject = other_index.map_or_else(|| name.clone(), |j| class_name(j).0);
            let text = PageText { name: &subject, junk };
            let title = format!("{} field notes {rank}", capitalize(&subject));
            let html = page_html(kind, &title, &text, &file, &mut layout);
            let page_file = format!("pages/{}-{rank:02}.html", class.id);
            let image_file = format!("images/{}-{rank:02}.{ext}", class.id);
            write(&web.join(&page_file), html)?;
            write(&web.join(&image_file), image_bytes(&class.id, rank, junk))?;
            routes.insert(page_url, FixtureRoute::File { file: page_file });
            routes.insert(image_url.clone(), FixtureRoute::File { file: image_file });
            facts.insert(
                image_url,
                PageFacts {
                    junk,
                    class_index: ci,
                    other: other_index,
                },
            );
        }
        // The same image reached from a second page further down the list.
        if let Some(first) = results.get(2).cloned() {
            results.push(RawSearchEntry {
                image_url: first.image_url,
                context_url: format!("{PAGE_HOST}/{}/mirror.html", class.id),
                rank: spec.results_per_class as i64 + 1,
            });
        }
        summary.search_entries += results.len();
        write_json(&web.join("search").join(format!("{}.json", class.id)), &results)?;
    }
    write_json(
        &web.join("routes.json"),
        &FixtureRoutes {
            fetched_at: FETCHED_AT.to_string(),
            routes,
        },
    )?;

    // Mine once here to learn example and sentence ids.
    let corpus: MinedCorpus = mine_corpus(
        &MineRequest {
            task_name: spec.task_name.clone(),
            classes: classes.clone(),
            query_template: QUERY_TEMPLATE.to_string(),
            per_class: spec.per_class,
            max_in_flight: 8,
        },
        &FixtureSearchProvider::new(&web),
        &FixtureFetcher::open(&web)?,
    )?;
    summary.mined_examples = corpus.manifest.examples.len();

    // Text-side encoders.
    let mut emb = iteration_rng(seed, 2);
    let d = spec.text_dim;
    let prompts = PromptSet::default();
    let pseudo = PseudoLabelMap(
        classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), format!("a close-up photo of {}", class_name(i).1)))
            .collect(),
    );
    let mut prompt_vecs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in prompts
        .invalid_form_prompts
        .iter()
        .chain([&prompts.negative_label])
        .chain(pseudo.0.values())
    {
        prompt_vecs.insert(p.clone(), unit(gaussian(&mut emb, d, 1.0)));
    }
    let query_vecs: Vec<Vec<f64>> = classes.iter().map(|_| unit(gaussian(&mut emb, d, 1.0))).collect();
    let names: Vec<String> = (0..classes.len()).map(|i| class_name(i).0.to_lowercase()).collect();

    let mut sentences = BTreeMap::new();
    let mut content_images = BTreeMap::new();
    let mut web_classifier: Vec<(String, usize, bool)> = Vec::new();
    let mut examples: Vec<_> = corpus.manifest.examples.iter().collect();
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    for ex in examples {
        for (id, text) in sentence_units(ex) {
            let lower = text.to_lowercase();
            let parts: Vec<(&[f64], f64)> = names
                .iter()
                .zip(&query_vecs)
                .filter(|(n, _)| lower.contains(n.as_str()))
                .map(|(_, q)| (q.as_slice(), 1.0))
                .collect();
            let noise = if parts.is_empty() { 1.0 } else { 0.3 };
            sentences.insert(id, mix(&parts, gaussian(&mut emb, d, noise)));
        }
        let f = &facts[&ex.image_url];
        let v = if f.junk {
            mix(&[(&prompt_vecs["a chart"], 1.0)], gaussian(&mut emb, d, 0.3))
        } else {
            let pseudo_of = |c: &str| &prompt_vecs[pseudo.get(c).expect("pseudo label per class")];
            let negative = (prompt_vecs[&prompts.negative_label].as_slice(), 0.6);
            match f.other {
                // Looks like the queried class at a glance, but is the other one.
                Some(j) => mix(
                    &[(pseudo_of(&ex.class_query), 0.3), (pseudo_of(&classes[j].id), 1.0), negative],
                    gaussian(&mut emb, d, 0.3),
                ),
                None => mix(&[(pseudo_of(&ex.class_query), 1.0), negative], gaussian(&mut emb, d, 0.3)),
            }
        };
        content_images.insert(ex.example_id.clone(), v);
        web_classifier.push((ex.example_id.clone(), f.class_index, f.junk));
    }

    // Classifier side: reuse the synthetic generator for centers, oracle
    // and test items; web items follow their page.
    let data = generate_synthetic_task(&spec.task)?;
    let mut classifier_images: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (id, row) in data.images.rows() {
        if !id.starts_with("web-") {
            classifier_images.insert(id.to_string(), row.to_vec());
        }
    }
    let mut cls_rng = iteration_rng(seed, 3);
    for (id, k, junk) in web_classifier {
        let v: Vec<f32> = if junk {
            unit(gaussian(&mut cls_rng, spec.task.dim, 1.0)).into_iter().map(|x| x as f32).collect()
        } else {
            let center: Vec<f64> = data.labels.row(k).iter().map(|&x| f64::from(x)).collect();
            mix(&[(&center, 1.0)], gaussian(&mut cls_rng, spec.task.dim, spec.task.noise_scale))
        };
        classifier_images.insert(id, v);
    }
    let labels: BTreeMap<String, Vec<f32>> = data.labels.rows().map(|(id, v)| (id.to_string(), v.to_vec())).collect();

    let to_f32 = |m: BTreeMap<String, Vec<f64>>| -> BTreeMap<String, Vec<f32>> {
        m.into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|x| x as f32).collect()))
            .collect()
    };
    let dumps = out.join("embedding_dumps");
    let stores: [(Store, usize, BTreeMap<String, Vec<f32>>); 6] = [
        (Store::Sentences, d, sentences),
        (
            Store::Queries,
            d,
            classes
                .iter()
                .zip(&query_vecs)
                .map(|(c, q)| (c.id.clone(), q.iter().map(|&x| x as f32).collect()))
                .collect(),
        ),
        (Store::ContentImages, d, content_images),
        (Store::ContentPrompts, d, to_f32(prompt_vecs)),
        (Store::ClassifierImages, spec.task.dim, classifier_images),
        (Store::ClassifierLabels, spec.task.dim, labels),
    ];
    for (store, dim, vectors) in stores {
        // Catch shape problems here rather than at import time.
        EmbeddingMatrix::from_rows(dim, vectors.clone()).map_err(|e| SynthError::Spec(e.to_string()))?;
        write_json(
            &dumps.join(format!("{}.json", store.name())),
            &EmbedResponse { dim, vectors },
        )?;
    }

    data.oracle
        .write(&create_dir(&out.join("labels"))?.join("oracle.jsonl"))?;
    data.test.write(&out.join("labels").join("test.jsonl"))?;
    summary.oracle_items = data.oracle.len();
    summary.test_items = data.test.len();

    write_json(&out.join("classes.json"), &classes)?;
    write_json(&out.join("pseudo_map.json"), &pseudo)?;
    write_json(&out.join("synth_spec.json"), spec)?;
    write_json(&out.join("pipeline.json"), &pipeline_config(spec))?;
    Ok(summary)
}

fn create_dir(path: &Path) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

/// The pipeline config written next to a fixture; paths are relative to it.
pub fn pipeline_config(spec: &FixtureSpec) -> PipelineConfig {
    PipelineConfig {
        task_name: spec.task_name.clone(),
        classes: "classes.json".into(),
        query_template: QUERY_TEMPLATE.into(),
        prompt_template: "A photo of <category>".into(),
        per_class: spec.per_class,
        temperatures: PipelineTemperatures {
            classifier: spec.task.classifier_temperature,
            ..PipelineTemperatures::default()
        },
        aggregation: Aggregation::Max,
        prompts: PromptSet::default(),
        pseudo_map: "pseudo_map.json".into(),
        alpha: spec.alpha,
        alphas: DEFAULT_ALPHAS.to_vec(),
        mc_samples: spec.mc_samples,
        seed: spec.task.seed,
        method: Method::Webcp,
        rule: ThresholdRule::Strict,
        provider: "web".into(),
        fetch: FetchSettings {
            respect_robots: false,
            ..FetchSettings::default()
        },
        embedding_dumps: Some("embedding_dumps".into()),
        embedding_services: BTreeMap::new(),
        test_labels: "labels/test.jsonl".into(),
        oracle_labels: Some("labels/oracle.jsonl".into()),
        output_dir: "run".into(),
        corpus_dir: None,
        embeddings_dir: None,
    }
}

/// Ids of junk pages' images, for tests that need ground truth.
pub fn junk_image_urls(web_dir: &Path) -> Result<BTreeSet<String>, SynthError> {
    let path = web_dir.join("routes.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let routes: FixtureRoutes = serde_json::from_str(&text).map_err(|e| SynthError::Spec(e.to_string()))?;
    Ok(routes
        .routes
        .into_iter()
        .filter(|(url, r)| url.ends_with(".png?w=640") && matches!(r, FixtureRoute::File { .. }))
        .map(|(url, _)| url)
        .collect())
}
