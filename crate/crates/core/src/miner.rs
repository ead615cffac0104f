//! Web calibration corpus acquisition.
//!
//! For every class the miner queries a search provider with the filled
//! query template, walks the results in rank order, fetches each hosting
//! page, finds the image in it, and keeps the alt text and bounded
//! surrounding text. A class stops at `per_class` accepted examples or when
//! its result list runs out. Per-entry failures are counted, never fatal.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;

use crate::html::{url_filename, Page};

pub const CATEGORY_PLACEHOLDER: &str = "<category>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: String,
    pub display_name: String,
}

impl ClassLabel {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        ClassLabel {
            id: id.into(),
            display_name: display_name.into(),
        }
    }
}

/// Check the class-set invariants: non-empty, unique ids, non-empty names.
pub fn validate_classes(classes: &[ClassLabel]) -> Result<(), MineError> {
    if classes.is_empty() {
        return Err(MineError::InvalidInput("class set is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in classes {
        if c.id.trim().is_empty() {
            return Err(MineError::InvalidInput("class id is empty".into()));
        }
        if c.display_name.trim().is_empty() {
            return Err(MineError::InvalidInput(format!("class `{}` has an empty display name", c.id)));
        }
        if !seen.insert(c.id.as_str()) {
            return Err(MineError::InvalidInput(format!("duplicate class id `{}`", c.id)));
        }
    }
    Ok(())
}

/// Substitute the class display name into a query or prompt template.
pub fn fill_template(template: &str, class: &ClassLabel) -> String {
    template.replace(CATEGORY_PLACEHOLDER, &class.display_name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub image_url: Url,
    pub context_url: Url,
    pub rank: u32,
}

/// One element of a provider response before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSearchEntry {
    pub image_url: String,
    pub context_url: String,
    pub rank: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedExample {
    pub example_id: String,
    pub class_query: String,
    pub image_bytes_path: String,
    pub alt_text: String,
    pub pre_text: String,
    pub post_text: String,
    pub source_url: String,
    pub image_url: String,
    pub fetched_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Result entries examined, in rank order.
    pub considered: usize,
    pub accepted: usize,
    pub skipped: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub task_name: String,
    pub classes: Vec<ClassLabel>,
    pub per_class_target: usize,
    pub query_template: String,
    pub examples: Vec<MinedExample>,
    #[serde(default)]
    pub stats: BTreeMap<String, ClassStats>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CorpusManifest {
    pub fn examples_for<'a>(&'a self, class_id: &'a str) -> impl Iterator<Item = &'a MinedExample> {
        self.examples.iter().filter(move |e| e.class_query == class_id)
    }

    /// Check the manifest invariants (class membership, per-class cap,
    /// unique ids, non-empty context).
    pub fn validate(&self) -> Result<(), MineError> {
        validate_classes(&self.classes)?;
        let mut per_class: HashMap<&str, usize> = HashMap::new();
        let mut ids = std::collections::HashSet::new();
        for e in &self.examples {
            if !self.classes.iter().any(|c| c.id == e.class_query) {
                return Err(MineError::InvalidInput(format!(
                    "example `{}` has unknown class `{}`",
                    e.example_id, e.class_query
                )));
            }
            if !ids.insert(e.example_id.as_str()) {
                return Err(MineError::InvalidInput(format!("duplicate example id `{}`", e.example_id)));
            }
            if e.alt_text.is_empty() && e.pre_text.is_empty() && e.post_text.is_empty() {
                return Err(MineError::InvalidInput(format!("example `{}` has no context", e.example_id)));
            }
            *per_class.entry(&e.class_query).or_default() += 1;
        }
        if let Some((class, n)) = per_class.iter().find(|(_, &n)| n > self.per_class_target) {
            return Err(MineError::InvalidInput(format!(
                "class `{class}` has {n} examples, above the target {}",
                self.per_class_target
            )));
        }
        Ok(())
    }
}

/// A mined corpus held in memory: the manifest plus image bytes keyed by
/// their corpus-relative path.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedCorpus {
    pub manifest: CorpusManifest,
    pub images: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search provider unreachable for class `{class}` (retriable): {message}")]
    Transport { class: String, message: String },
    #[error("search provider refused class `{class}`: {message}")]
    Denied { class: String, message: String },
    #[error("search provider sent an invalid response for class `{class}`: {message}")]
    InvalidResponse { class: String, message: String },
    #[error("invalid search request: {0}")]
    InvalidRequest(String),
}

impl SearchError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, SearchError::Transport { .. })
    }
}

#[derive(Debug, Error)]
pub enum MineError {
    #[error("invalid mining input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Malformed { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MineError + '_ {
    move |source| MineError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Search providers

pub trait SearchProvider: Sync {
    /// Raw results for `query`; post-processing happens in [`search_images`].
    fn search(&self, class: &ClassLabel, query: &str, want: usize) -> Result<Vec<RawSearchEntry>, SearchError>;
}

/// Query a provider and normalize its answer: drop entries with invalid
/// URLs or ranks, order by rank, remove repeated image URLs keeping the
/// best rank, and cut to `want`.
pub fn search_images(
    provider: &dyn SearchProvider,
    class: &ClassLabel,
    template: &str,
    want: usize,
) -> Result<Vec<SearchEntry>, SearchError> {
    if want == 0 {
        return Err(SearchError::InvalidRequest("want must be at least 1".into()));
    }
    let query = fill_template(template, class);
    let raw = provider.search(class, &query, want)?;
    let mut entries: Vec<SearchEntry> = raw
        .into_iter()
        .filter_map(|r| {
            let rank = u32::try_from(r.rank).ok().filter(|&k| k >= 1);
            let image_url = Url::parse(&r.image_url).ok();
            let context_url = Url::parse(&r.context_url).ok();
            match (rank, image_url, context_url) {
                (Some(rank), Some(image_url), Some(context_url)) => Some(SearchEntry {
                    image_url,
                    context_url,
                    rank,
                }),
                _ => {
                    log::warn!("class {}: dropping invalid search entry {:?}", class.id, r.image_url);
                    None
                }
            }
        })
        .collect();
    entries.sort_by_key(|e| e.rank);
    let mut seen = std::collections::HashSet::new();
    entries.retain(|e| seen.insert(e.image_url.as_str().to_string()));
    entries.truncate(want);
    Ok(entries)
}

/// Reads `<dir>/search/<class_id>.json`, the same JSON array an HTTP
/// provider returns. A missing file means no results.
pub struct FixtureSearchProvider {
    dir: PathBuf,
}

impl FixtureSearchProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureSearchProvider { dir: dir.into() }
    }
}

impl SearchProvider for FixtureSearchProvider {
    fn search(&self, class: &ClassLabel, _query: &str, _want: usize) -> Result<Vec<RawSearchEntry>, SearchError> {
        let path = self.dir.join("search").join(format!("{}.json", class.id));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => {
                return Err(SearchError::Transport {
                    class: class.id.clone(),
                    message: format!("{}: {e}", path.display()),
                })
            }
        };
        serde_json::from_str(&text).map_err(|e| SearchError::InvalidResponse {
            class: class.id.clone(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// `GET <endpoint>?q=<query>&num=<want>&class=<class id>` returning the
/// JSON array of search entries.
pub struct HttpSearchProvider {
    endpoint: Url,
    client: reqwest::blocking::Client,
    retries: u32,
    backoff: Duration,
}

impl HttpSearchProvider {
    pub fn new(endpoint: Url, policy: &FetchPolicy) -> Result<Self, SearchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .user_agent(policy.user_agent.clone())
            .build()
            .map_err(|e| SearchError::InvalidRequest(e.to_string()))?;
        Ok(HttpSearchProvider {
            endpoint,
            client,
            retries: policy.retries,
            backoff: policy.backoff,
        })
    }
}

impl SearchProvider for HttpSearchProvider {
    fn search(&self, class: &ClassLabel, query: &str, want: usize) -> Result<Vec<RawSearchEntry>, SearchError> {
        let mut url = self.endpoint.clone();
        url.query_pairs_mut()
            .append_pair("q", query)
            .append_pair("num", &want.to_string())
            .append_pair("class", &class.id);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let resp = match self.client.get(url.clone()).send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.as_u16() == 401 || status.as_u16() == 403 || status.as_u16() == 429 {
                return Err(SearchError::Denied {
                    class: class.id.clone(),
                    message: format!("provider answered {status}"),
                });
            }
            if status.is_server_error() {
                last = format!("provider answered {status}");
                continue;
            }
            if !status.is_success() {
                return Err(SearchError::InvalidResponse {
                    class: class.id.clone(),
                    message: format!("provider answered {status}"),
                });
            }
            return resp.json().map_err(|e| SearchError::InvalidResponse {
                class: class.id.clone(),
                message: e.to_string(),
            });
        }
        Err(SearchError::Transport {
            class: class.id.clone(),
            message: last,
        })
    }
}

// ---------------------------------------------------------------------------
// Fetchers

#[derive(Debug, Clone)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    /// RFC 3339 timestamp of the fetch.
    pub fetched_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("timed out")]
    Timeout,
    #[error("blocked: {0}")]
    Blocked(String),
    #[error("not found")]
    NotFound,
    #[error("transport error: {0}")]
    Transport(String),
}

pub trait Fetcher: Sync {
    fn fetch(&self, url: &Url) -> Result<Fetched, FetchError>;
}

#[derive(Debug, Clone)]
pub struct FetchPolicy {
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    pub user_agent: String,
    pub respect_robots: bool,
    /// Upper bound on concurrent page fetches.
    pub max_in_flight: usize,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            timeout: Duration::from_secs(15),
            retries: 2,
            backoff: Duration::from_millis(500),
            user_agent: concat!("webcp/", env!("CARGO_PKG_VERSION")).to_string(),
            respect_robots: true,
            max_in_flight: 8,
        }
    }
}

/// Parsed robots.txt rules that apply to one user agent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RobotsRules {
    rules: Vec<(bool, String)>,
}

impl RobotsRules {
    /// Select the group naming `agent` (case-insensitive substring of the
    /// agent's product token), falling back to `*`.
    pub fn parse(text: &str, agent: &str) -> Self {
        let product = agent.split('/').next().unwrap_or(agent).to_ascii_lowercase();
        let mut specific: Option<Vec<(bool, String)>> = None;
        let mut wildcard: Option<Vec<(bool, String)>> = None;
        let mut group_agents: Vec<String> = Vec::new();
        let mut group_rules: Vec<(bool, String)> = Vec::new();
        let mut in_rules = false;

        let mut flush = |agents: &mut Vec<String>, rules: &mut Vec<(bool, String)>| {
            for a in agents.iter() {
                if a == "*" {
                    wildcard.get_or_insert_with(Vec::new).extend(rules.iter().cloned());
                } else if !a.is_empty() && product.contains(a.as_str()) {
                    specific.get_or_insert_with(Vec::new).extend(rules.iter().cloned());
                }
            }
            agents.clear();
            rules.clear();
        };

        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            let Some((key, value)) = line.split_once(':') else {
                continue;
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim();
            match key.as_str() {
                "user-agent" => {
                    if in_rules {
                        flush(&mut group_agents, &mut group_rules);
                        in_rules = false;
                    }
                    group_agents.push(value.to_ascii_lowercase());
                }
                "allow" | "disallow" => {
                    in_rules = true;
                    if !value.is_empty() {
                        group_rules.push((key == "allow", value.to_string()));
                    }
                }
                _ => {}
            }
        }
        flush(&mut group_agents, &mut group_rules);
        RobotsRules {
            rules: specific.or(wildcard).unwrap_or_default(),
        }
    }

    /// Longest matching prefix decides; allow wins ties.
    pub fn allows(&self, path: &str) -> bool {
        let mut best: Option<(usize, bool)> = None;
        for (allow, prefix) in &self.rules {
            if path.starts_with(prefix.as_str()) {
                let len = prefix.len();
                best = match best {
                    Some((l, a)) if l > len || (l == len && a) => Some((l, a)),
                    _ => Some((len, *allow)),
                };
            }
        }
        best.map(|(_, allow)| allow).unwrap_or(true)
    }
}

/// HTTP fetcher with per-request timeout, retries with exponential backoff,
/// and an optional robots.txt check cached per origin.
pub struct HttpFetcher {
    client: reqwest::blocking::Client,
    policy: FetchPolicy,
    robots: Mutex<HashMap<String, RobotsRules>>,
}

impl HttpFetcher {
    pub fn new(policy: FetchPolicy) -> Result<Self, FetchError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(policy.timeout)
            .user_agent(policy.user_agent.clone())
            .build()
            .map_err(|e| FetchError::Transport(e.to_string()))?;
        Ok(HttpFetcher {
            client,
            policy,
            robots: Mutex::new(HashMap::new()),
        })
    }

    fn robots_for(&self, url: &Url) -> RobotsRules {
        let origin = url.origin().ascii_serialization();
        if let Some(r) = self.robots.lock().unwrap().get(&origin) {
            return r.clone();
        }
        let rules = match url.join("/robots.txt") {
            Ok(robots_url) => match self.client.get(robots_url).send() {
                Ok(resp) if resp.status().is_success() => resp
                    .text()
                    .map(|t| RobotsRules::parse(&t, &self.policy.user_agent))
                    .unwrap_or_default(),
                _ => RobotsRules::default(),
            },
            Err(_) => RobotsRules::default(),
        };
        self.robots.lock().unwrap().insert(origin, rules.clone());
        rules
    }

    fn fetch_once(&self, url: &Url) -> Result<Vec<u8>, (FetchError, bool)> {
        let resp = self.client.get(url.clone()).send().map_err(|e| {
            if e.is_timeout() {
                (FetchError::Timeout, true)
            } else {
                (FetchError::Transport(e.to_string()), true)
            }
        })?;
        let status = resp.status();
        match status.as_u16() {
            200..=299 => resp
                .bytes()
                .map(|b| b.to_vec())
                .map_err(|e| (FetchError::Transport(e.to_string()), true)),
            401 | 403 | 451 => Err((FetchError::Blocked(format!("status {status}")), false)),
            404 | 410 => Err((FetchError::NotFound, false)),
            408 | 429 | 500..=599 => Err((FetchError::Transport(format!("status {status}")), true)),
            _ => Err((FetchError::Transport(format!("status {status}")), false)),
        }
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &Url) -> Result<Fetched, FetchError> {
        if self.policy.respect_robots && !self.robots_for(url).allows(url.path()) {
            return Err(FetchError::Blocked("disallowed by robots.txt".into()));
        }
        let mut last = FetchError::Transport("no attempt made".into());
        for attempt in 0..=self.policy.retries {
            if attempt > 0 {
                thread::sleep(self.policy.backoff * 2u32.pow(attempt - 1));
            }
            match self.fetch_once(url) {
                Ok(bytes) => {
                    return Ok(Fetched {
                        bytes,
                        fetched_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                    })
                }
                Err((e, retriable)) => {
                    last = e;
                    if !retriable {
                        break;
                    }
                }
            }
        }
        Err(last)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureRoute {
    File { file: String },
    Failure { error: FixtureFailure },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureFailure {
    Timeout,
    Blocked,
    NotFound,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRoutes {
    #[serde(default = "epoch")]
    pub fetched_at: String,
    pub routes: BTreeMap<String, FixtureRoute>,
}

fn epoch() -> String {
    "1970-01-01T00:00:00Z".to_string()
}

/// Serves URLs from `<dir>/routes.json`, which maps each URL to a file
/// under `<dir>` or to a simulated failure. Unknown URLs are not found.
/// Every fetch reports the fixed `fetched_at` of the routes file.
pub struct FixtureFetcher {
    dir: PathBuf,
    routes: FixtureRoutes,
}

impl FixtureFetcher {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, MineError> {
        let dir = dir.into();
        let path = dir.join("routes.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let routes = serde_json::from_str(&text).map_err(|e| MineError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(FixtureFetcher { dir, routes })
    }
}

impl Fetcher for FixtureFetcher {
    fn fetch(&self, url: &Url) -> Result<Fetched, FetchError> {
        match self.routes.routes.get(url.as_str()) {
            None => Err(FetchError::NotFound),
            Some(FixtureRoute::Failure { error }) => Err(match error {
                FixtureFailure::Timeout => FetchError::Timeout,
                FixtureFailure::Blocked => FetchError::Blocked("fixture".into()),
                FixtureFailure::NotFound => FetchError::NotFound,
            }),
            Some(FixtureRoute::File { file }) => fs::read(self.dir.join(file))
                .map(|bytes| Fetched {
                    bytes,
                    fetched_at: self.routes.fetched_at.clone(),
                })
                .map_err(|e| FetchError::Transport(e.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Mining

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SkipReason {
    PageTimeout,
    PageBlocked,
    PageNotFound,
    PageError,
    NoImageMatch,
    LazyLoaded,
    ImageUnavailable,
    EmptyImage,
    MissingContext,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::PageTimeout => "page_timeout",
            SkipReason::PageBlocked => "page_blocked",
            SkipReason::PageNotFound => "page_not_found",
            SkipReason::PageError => "page_error",
            SkipReason::NoImageMatch => "no_image_match",
            SkipReason::LazyLoaded => "lazy_loaded",
            SkipReason::ImageUnavailable => "image_unavailable",
            SkipReason::EmptyImage => "empty_image",
            SkipReason::MissingContext => "missing_context",
        }
    }

    fn from_page_error(e: &FetchError) -> Self {
        match e {
            FetchError::Timeout => SkipReason::PageTimeout,
            FetchError::Blocked(_) => SkipReason::PageBlocked,
            FetchError::NotFound => SkipReason::PageNotFound,
            FetchError::Transport(_) => SkipReason::PageError,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineRequest {
    pub task_name: String,
    pub classes: Vec<ClassLabel>,
    pub query_template: String,
    pub per_class: usize,
    /// Upper bound on concurrently processed result entries.
    pub max_in_flight: usize,
}

struct Accepted {
    alt_text: String,
    pre_text: String,
    post_text: String,
    image: Vec<u8>,
    image_path: String,
    fetched_at: String,
}

fn image_extension(image_url: &Url) -> String {
    url_filename(image_url.as_str())
        .and_then(|name| name.rsplit_once('.').map(|(_, ext)| ext.to_string()))
        .filter(|ext| !ext.is_empty() && ext.len() <= 5 && ext.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or_else(|| "bin".to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn process_entry(entry: &SearchEntry, fetcher: &dyn Fetcher) -> Result<Accepted, SkipReason> {
    let page = fetcher
        .fetch(&entry.context_url)
        .map_err(|e| SkipReason::from_page_error(&e))?;
    let html = String::from_utf8_lossy(&page.bytes);
    let doc = Page::parse(&html);
    let m = doc.match_image(entry.image_url.as_str()).ok_or(SkipReason::NoImageMatch)?;
    if m.resolved_src(&entry.context_url).is_none() {
        return Err(SkipReason::LazyLoaded);
    }
    let ctx = doc.extract_context(&m);
    if ctx.is_empty() {
        return Err(SkipReason::MissingContext);
    }
    let image = fetcher
        .fetch(&entry.image_url)
        .map_err(|_| SkipReason::ImageUnavailable)?;
    if image.bytes.is_empty() {
        return Err(SkipReason::EmptyImage);
    }
    let image_path = format!("images/{}.{}", sha256_hex(&image.bytes), image_extension(&entry.image_url));
    Ok(Accepted {
        alt_text: ctx.alt_text,
        pre_text: ctx.pre_text,
        post_text: ctx.post_text,
        image: image.bytes,
        image_path,
        fetched_at: page.fetched_at,
    })
}

/// Mine up to `per_class` examples for every class.
///
/// Entries are processed in windows of `max_in_flight` concurrent workers
/// but accepted strictly in rank order, so the result does not depend on
/// scheduling.
pub fn mine_corpus(
    req: &MineRequest,
    provider: &dyn SearchProvider,
    fetcher: &dyn Fetcher,
) -> Result<MinedCorpus, MineError> {
    validate_classes(&req.classes)?;
    if req.per_class == 0 {
        return Err(MineError::InvalidInput("per-class target must be at least 1".into()));
    }
    if !req.query_template.contains(CATEGORY_PLACEHOLDER) {
        return Err(MineError::InvalidInput(format!(
            "query template must contain {CATEGORY_PLACEHOLDER}"
        )));
    }
    let window = req.max_in_flight.max(1);
    let mut examples = Vec::new();
    let mut images = BTreeMap::new();
    let mut stats = BTreeMap::new();
    let mut warnings = Vec::new();

    for class in &req.classes {
        // Ask for a deep list; many entries get skipped.
        let want = req.per_class.saturating_mul(4).max(req.per_class + 20);
        let entries = search_images(provider, class, &req.query_template, want)?;
        let mut cs = ClassStats::default();
        let mut next = 0usize;

        'class: while cs.accepted < req.per_class && next < entries.len() {
            let need = req.per_class - cs.accepted;
            let batch: Vec<(usize, &SearchEntry)> = entries
                .iter()
                .enumerate()
                .skip(next)
                .take(need.min(window))
                .collect();
            next += batch.len();
            let results: Vec<Result<Accepted, SkipReason>> = thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|(_, e)| s.spawn(move || process_entry(e, fetcher)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("mining worker panicked")).collect()
            });
            for ((pos, entry), result) in batch.into_iter().zip(results) {
                if cs.accepted == req.per_class {
                    break 'class;
                }
                cs.considered += 1;
                match result {
                    Ok(acc) => {
                        cs.accepted += 1;
                        examples.push(MinedExample {
                            example_id: format!("{}-{:04}", class.id, pos + 1),
                            class_query: class.id.clone(),
                            image_bytes_path: acc.image_path.clone(),
                            alt_text: acc.alt_text,
                            pre_text: acc.pre_text,
                            post_text: acc.post_text,
                            source_url: entry.context_url.to_string(),
                            image_url: entry.image_url.to_string(),
                            fetched_at: acc.fetched_at,
                        });
                        images.insert(acc.image_path, acc.image);
                    }
                    Err(reason) => {
                        log::info!(
                            "class {}: skipped rank {} ({}): {}",
                            class.id,
                            entry.rank,
                            reason.as_str(),
                            entry.context_url
                        );
                        *cs.skipped.entry(reason.as_str().to_string()).or_default() += 1;
                    }
                }
            }
        }
        if cs.accepted == 0 {
            let w = format!("class `{}` yielded no examples ({} results)", class.id, entries.len());
            log::warn!("{w}");
            warnings.push(w);
        } else if cs.accepted < req.per_class {
            let w = format!(
                "class `{}` yielded {} of {} examples before results ran out",
                class.id, cs.accepted, req.per_class
            );
            log::warn!("{w}");
            warnings.push(w);
        }
        stats.insert(class.id.clone(), cs);
    }

    Ok(MinedCorpus {
        manifest: CorpusManifest {
            task_name: req.task_name.clone(),
            classes: req.classes.clone(),
            per_class_target: req.per_class,
            query_template: req.query_template.clone(),
            examples,
            stats,
            warnings,
        },
        images,
    })
}

// ---------------------------------------------------------------------------
// Corpus layout: manifest.json, metadata.jsonl, images/<sha256>.<ext>

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.jsonl";

pub fn manifest_bytes(manifest: &CorpusManifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

pub fn write_corpus(dir: &Path, corpus: &MinedCorpus) -> Result<(), MineError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    for (rel, bytes) in &corpus.images {
        let path = dir.join(rel);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let path = dir.join(METADATA_FILE);
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    for e in &corpus.manifest.examples {
        let line = serde_json::to_string(e).expect("example serializes");
        writeln!(file, "{line}").map_err(io_err(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_bytes(&corpus.manifest)).map_err(io_err(&path))
}

/// Load `manifest.json` and check that every referenced image exists and
/// is non-empty.
pub fn read_corpus(dir: &Path) -> Result<CorpusManifest, MineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| MineError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for e in &manifest.examples {
        let img = dir.join(&e.image_bytes_path);
        let meta = fs::metadata(&img).map_err(io_err(&img))?;
        if meta.len() == 0 {
            return Err(MineError::Malformed {
                path: img.display().to_string(),
                message: "image file is empty".into(),
            });
        }
    }
    Ok(manifest)
}
