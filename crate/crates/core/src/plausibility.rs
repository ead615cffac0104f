//! Plausibility vectors for web-mined examples.
//!
//! Each example gets a per-class plausibility `λ(y) = h(y) · c(y) · s_neg`
//! and a junk probability `λ_junk = 1 − Σ_y λ(y)`, where
//!
//! * `c` is context alignment: softmax over classes of the best
//!   sentence-to-query cosine of the page text,
//! * `s_neg` is the form filter: probability of the plain "negative" prompt
//!   against the invalid-form prompts (diagrams, charts, text),
//! * `h` is content alignment: the simplified class label against the
//!   negative prompt, as a two-way softmax.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::AmbiguousCalibrationSet;
use crate::embedding::{cosine, softmax, EmbeddingError, EmbeddingMatrix};
use crate::miner::{ClassLabel, CorpusManifest, MinedExample};
use crate::text::stored_sentences;

/// Tolerance on `Σλ + λ_junk == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Clamping beyond this much is reported.
const CLAMP_WARN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PlausibilityError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("no example survived plausibility scoring ({dropped} dropped)")]
    Empty { dropped: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub invalid_form_prompts: Vec<String>,
    pub negative_label: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            invalid_form_prompts: vec![
                "an image with a lot of text".into(),
                "an image of a graph".into(),
                "an image of a diagram".into(),
                "a chart".into(),
            ],
            negative_label: "an image".into(),
        }
    }
}

impl PromptSet {
    pub fn validate(&self) -> Result<(), PlausibilityError> {
        if self.negative_label.trim().is_empty() {
            return Err(PlausibilityError::Config("negative label is empty".into()));
        }
        let mut seen = BTreeSet::new();
        seen.insert(self.negative_label.as_str());
        for p in &self.invalid_form_prompts {
            if p.trim().is_empty() {
                return Err(PlausibilityError::Config("empty invalid-form prompt".into()));
            }
            if !seen.insert(p.as_str()) {
                return Err(PlausibilityError::Config(format!("prompt `{p}` appears twice")));
            }
        }
        Ok(())
    }
}

/// Simplified, visually generic label per class id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoLabelMap(pub BTreeMap<String, String>);

impl PseudoLabelMap {
    pub fn get(&self, class_id: &str) -> Result<&str, PlausibilityError> {
        match self.0.get(class_id) {
            Some(s) if !s.trim().is_empty() => Ok(s),
            Some(_) => Err(PlausibilityError::Config(format!("pseudo label for class `{class_id}` is empty"))),
            None => Err(PlausibilityError::Config(format!("no pseudo label for class `{class_id}`"))),
        }
    }

    pub fn validate(&self, classes: &[ClassLabel]) -> Result<(), PlausibilityError> {
        classes.iter().try_for_each(|c| self.get(&c.id).map(|_| ()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub context: f64,
    pub filter: f64,
    pub content: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            context: 0.07,
            filter: 0.07,
            content: 0.07,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlausibilityConfig {
    pub temperatures: Temperatures,
    pub aggregation: Aggregation,
    pub prompts: PromptSet,
}

impl PlausibilityConfig {
    pub fn validate(&self) -> Result<(), PlausibilityError> {
        let t = &self.temperatures;
        for (name, v) in [("context", t.context), ("filter", t.filter), ("content", t.content)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlausibilityError::Config(format!("{name} temperature must be positive, got {v}")));
            }
        }
        self.prompts.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityComponents {
    /// Context alignment `c(y)`.
    pub context: BTreeMap<String, f64>,
    /// Content alignment `h(y)`.
    pub content: BTreeMap<String, f64>,
    pub s_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityVector {
    pub example_id: String,
    /// Class whose query retrieved the example (empty when unknown).
    #[serde(default)]
    pub class_query: String,
    pub lambda: BTreeMap<String, f64>,
    pub lambda_junk: f64,
    #[serde(default)]
    pub components: PlausibilityComponents,
}

impl PlausibilityVector {
    /// Check `Σλ + λ_junk == 1` and that every entry lies in [0, 1].
    pub fn validate(&self) -> Result<(), PlausibilityError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda_junk) || !self.lambda.values().all(|&v| in_unit(v)) {
            return Err(PlausibilityError::Domain(format!(
                "{}: plausibility entries must lie in [0, 1]",
                self.example_id
            )));
        }
        let total: f64 = self.lambda.values().sum::<f64>() + self.lambda_junk;
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(PlausibilityError::Domain(format!(
                "{}: plausibilities sum to {total}",
                self.example_id
            )));
        }
        Ok(())
    }

    /// One-hot vector on `class` with no junk mass.
    pub fn one_hot(example_id: impl Into<String>, classes: &[String], class: &str) -> Self {
        let lambda = classes
            .iter()
            .map(|c| (c.clone(), if c == class { 1.0 } else { 0.0 }))
            .collect();
        PlausibilityVector {
            example_id: example_id.into(),
            class_query: class.to_string(),
            lambda,
            lambda_junk: 0.0,
            components: PlausibilityComponents::default(),
        }
    }
}

/// Context alignment: per class, aggregate the sentence cosines against the
/// class query, then softmax across classes.
pub fn context_scores(
    sentences: &[&[f32]],
    queries: &[(&str, &[f32])],
    temperature: f64,
    aggregation: Aggregation,
) -> Result<BTreeMap<String, f64>, PlausibilityError> {
    if sentences.is_empty() {
        return Err(PlausibilityError::Domain("example has no embedded sentences".into()));
    }
    let mut raw = Vec::with_capacity(queries.len());
    for (_, q) in queries {
        let sims = sentences
            .iter()
            .map(|s| cosine(s, q))
            .collect::<Result<Vec<f64>, _>>()?;
        raw.push(match aggregation {
            Aggregation::Max => sims.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
        });
    }
    let probs = softmax(&raw, temperature)?;
    Ok(queries.iter().map(|(id, _)| id.to_string()).zip(probs).collect())
}

/// Form filter: probability mass of the negative prompt among the
/// invalid-form prompts plus the negative prompt.
pub fn content_filter(
    image: &[f32],
    invalid_prompts: &[&[f32]],
    negative: &[f32],
    temperature: f64,
) -> Result<f64, PlausibilityError> {
    let mut logits = invalid_prompts
        .iter()
        .map(|p| cosine(image, p))
        .collect::<Result<Vec<f64>, _>>()?;
    logits.push(cosine(image, negative)?);
    let probs = softmax(&logits, temperature)?;
    Ok(*probs.last().expect("negative prompt present"))
}

/// Content alignment: per class, two-way softmax of the image against its
/// pseudo label and against the negative prompt; the pseudo-label side.
pub fn content_scores(
    image: &[f32],
    pseudo: &[(&str, &[f32])],
    negative: &[f32],
    temperature: f64,
) -> Result<BTreeMap<String, f64>, PlausibilityError> {
    let neg = cosine(image, negative)?;
    let mut out = BTreeMap::new();
    for (id, p) in pseudo {
        let probs = softmax(&[cosine(image, p)?, neg], temperature)?;
        out.insert(id.to_string(), probs[0]);
    }
    Ok(out)
}

/// Junk mass before clamping: `1 − Σ_y λ(y)`.
pub fn unclamped_junk(lambda: &BTreeMap<String, f64>) -> f64 {
    1.0 - lambda.values().sum::<f64>()
}

/// Combine context, content and filter scores into a plausibility vector.
pub fn combine(
    example_id: &str,
    context: &BTreeMap<String, f64>,
    content: &BTreeMap<String, f64>,
    s_neg: f64,
) -> Result<PlausibilityVector, PlausibilityError> {
    if context.len() != content.len() || !context.keys().eq(content.keys()) {
        return Err(PlausibilityError::Domain(format!(
            "{example_id}: context and content scores cover different classes"
        )));
    }
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    if !in_unit(s_neg) || !context.values().chain(content.values()).all(|&v| in_unit(v)) {
        return Err(PlausibilityError::Domain(format!("{example_id}: scores must lie in [0, 1]")));
    }
    let lambda: BTreeMap<String, f64> = context
        .iter()
        .map(|(y, &c)| (y.clone(), content[y] * c * s_neg))
        .collect();
    let junk = unclamped_junk(&lambda);
    let clamped = junk.clamp(0.0, 1.0);
    if (clamped - junk).abs() > CLAMP_WARN {
        log::warn!("{example_id}: junk probability {junk} clamped to {clamped}");
    }
    Ok(PlausibilityVector {
        example_id: example_id.to_string(),
        class_query: String::new(),
        lambda,
        lambda_junk: clamped,
        components: PlausibilityComponents {
            context: context.clone(),
            content: content.clone(),
            s_neg,
        },
    })
}

// ---------------------------------------------------------------------------
// Corpus-level construction

/// Embedding stores consumed by plausibility scoring.
///
/// Id conventions: `sentences` rows are keyed by [`sentence_units`] ids,
/// `queries` by class id, `content_images` by example id, and
/// `content_prompts` by the literal prompt text (invalid-form prompts,
/// negative label, pseudo labels).
pub struct PlausibilityStores<'a> {
    pub sentences: &'a EmbeddingMatrix,
    pub queries: &'a EmbeddingMatrix,
    pub content_images: &'a EmbeddingMatrix,
    pub content_prompts: &'a EmbeddingMatrix,
}

/// Sentence units of an example with their embedding ids:
/// `<example>:alt`, `<example>:pre:<k>`, `<example>:post:<k>`.
pub fn sentence_units(example: &MinedExample) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let alt = example.alt_text.trim();
    if !alt.is_empty() {
        out.push((format!("{}:alt", example.example_id), alt.to_string()));
    }
    for (field, text) in [("pre", &example.pre_text), ("post", &example.post_text)] {
        for (k, s) in stored_sentences(text).into_iter().enumerate() {
            out.push((format!("{}:{field}:{k}", example.example_id), s.to_string()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedExample {
    pub example_id: String,
    pub reason: String,
}

/// Score every mined example. Examples without any embedded sentence or
/// without a content image embedding are dropped and reported; the result
/// is sorted by example id.
pub fn build_ambiguous_set(
    corpus: &CorpusManifest,
    stores: &PlausibilityStores<'_>,
    pseudo: &PseudoLabelMap,
    config: &PlausibilityConfig,
) -> Result<(AmbiguousCalibrationSet, Vec<DroppedExample>), PlausibilityError> {
    config.validate()?;
    pseudo.validate(&corpus.classes)?;
    let t = config.temperatures;

    let mut class_ids: Vec<&str> = corpus.classes.iter().map(|c| c.id.as_str()).collect();
    class_ids.sort_unstable();
    let queries = class_ids
        .iter()
        .map(|id| Ok((*id, stores.queries.get(id).ok_or_else(|| missing("query", id))?)))
        .collect::<Result<Vec<_>, PlausibilityError>>()?;
    let pseudo_vecs = class_ids
        .iter()
        .map(|id| {
            let label = pseudo.get(id)?;
            let v = stores
                .content_prompts
                .get(label)
                .ok_or_else(|| missing("pseudo label", label))?;
            Ok((*id, v))
        })
        .collect::<Result<Vec<_>, PlausibilityError>>()?;
    let invalid = config
        .prompts
        .invalid_form_prompts
        .iter()
        .map(|p| stores.content_prompts.get(p).ok_or_else(|| missing("prompt", p)))
        .collect::<Result<Vec<_>, _>>()?;
    let negative = stores
        .content_prompts
        .get(&config.prompts.negative_label)
        .ok_or_else(|| missing("negative label", &config.prompts.negative_label))?;

    let mut entries = Vec::new();
    let mut dropped = Vec::new();
    let mut examples: Vec<&MinedExample> = corpus.examples.iter().collect();
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));

    for ex in examples {
        let units = sentence_units(ex);
        let sentences: Vec<&[f32]> = units.iter().filter_map(|(id, _)| stores.sentences.get(id)).collect();
        if sentences.is_empty() {
            log::warn!("{}: dropped, no embedded sentences", ex.example_id);
            dropped.push(DroppedExample {
                example_id: ex.example_id.clone(),
                reason: "no embedded sentences".into(),
            });
            continue;
        }
        if sentences.len() < units.len() {
            log::info!(
                "{}: {} of {} sentences lack embeddings",
                ex.example_id,
                units.len() - sentences.len(),
                units.len()
            );
        }
        let Some(image) = stores.content_images.get(&ex.example_id) else {
            log::warn!("{}: dropped, no content image embedding", ex.example_id);
            dropped.push(DroppedExample {
                example_id: ex.example_id.clone(),
                reason: "no content image embedding".into(),
            });
            continue;
        };
        let c = context_scores(&sentences, &queries, t.context, config.aggregation)?;
        let s_neg = content_filter(image, &invalid, negative, t.filter)?;
        let h = content_scores(image, &pseudo_vecs, negative, t.content)?;
        let mut v = combine(&ex.example_id, &c, &h, s_neg)?;
        v.class_query = ex.class_query.clone();
        entries.push(v);
    }
    if entries.is_empty() {
        return Err(PlausibilityError::Empty { dropped: dropped.len() });
    }
    let classes = class_ids.into_iter().map(str::to_string).collect();
    let set = AmbiguousCalibrationSet::new(classes, entries)
        .map_err(|e| PlausibilityError::Domain(e.to_string()))?;
    Ok((set, dropped))
}

fn missing(what: &str, id: &str) -> PlausibilityError {
    PlausibilityError::Config(format!("no embedding for {what} `{id}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn context_symmetric_sentences_give_uniform_scores() {
        // A sentence orthogonal to four mutually orthogonal queries.
        let s = [0.0f32, 0.0, 0.0, 0.0, 1.0];
        let q: Vec<[f32; 5]> = (0..4)
            .map(|i| {
                let mut v = [0.0; 5];
                v[i] = 1.0;
                v
            })
            .collect();
        let ids = ["a", "b", "c", "d"];
        let queries: Vec<(&str, &[f32])> = ids.iter().zip(&q).map(|(id, v)| (*id, &v[..])).collect();
        let c = context_scores(&[&s], &queries, 0.07, Aggregation::Max).unwrap();
        for v in c.values() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn context_sharp_class_dominates() {
        let s = [1.0f32, 0.0];
        let qa = [1.0f32, 0.0];
        let qb = [0.0f32, 1.0];
        let c = context_scores(&[&s], &[("a", &qa), ("b", &qb)], 0.1, Aggregation::Max).unwrap();
        // 1 / (1 + e^-10)
        assert!(c["a"] > 0.99);
        assert!((c["a"] - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn context_single_class_is_certain() {
        let s = [0.3f32, -0.2];
        let q = [-1.0f32, 0.5];
        let c = context_scores(&[&s], &[("only", &q)], 0.07, Aggregation::Max).unwrap();
        assert_eq!(c["only"], 1.0);
    }

    #[test]
    fn context_requires_sentences() {
        let q = [1.0f32];
        assert!(context_scores(&[], &[("a", &q)], 0.07, Aggregation::Max).is_err());
    }

    #[test]
    fn mean_aggregation_differs_from_max() {
        let s1 = [1.0f32, 0.0];
        let s2 = [0.0f32, 1.0];
        let qa = [1.0f32, 0.0];
        let qb = [0.6f32, 0.8];
        let max = context_scores(&[&s1, &s2], &[("a", &qa), ("b", &qb)], 1.0, Aggregation::Max).unwrap();
        let mean = context_scores(&[&s1, &s2], &[("a", &qa), ("b", &qb)], 1.0, Aggregation::Mean).unwrap();
        // max: a=1.0, b=0.8 ; mean: a=0.5, b=0.7
        assert!(max["a"] > max["b"]);
        assert!(mean["a"] < mean["b"]);
    }

    #[test]
    fn filter_examples() {
        let img = [1.0f32, 1.0];
        let p1 = [1.0f32, 1.0];
        let p2 = [2.0f32, 2.0];
        let neg = [3.0f32, 3.0];
        let s = content_filter(&img, &[&p1, &p2], &neg, 0.07).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(content_filter(&img, &[], &neg, 0.07).unwrap(), 1.0);

        // Image cosine 0.9 to a graph prompt, 0.1 to the negative.
        let img = [1.0f32, 0.0, 0.0];
        let graph = [0.9f32, (1.0f32 - 0.81).sqrt(), 0.0];
        let neg = [0.1f32, 0.0, (1.0f32 - 0.01).sqrt()];
        let s = content_filter(&img, &[&graph], &neg, 0.1).unwrap();
        assert!(s < 1e-3);
    }

    #[test]
    fn content_examples() {
        let img = [1.0f32, 0.0];
        let pseudo = [1.0f32, 0.0];
        let neg = [0.0f32, 1.0];
        let h = content_scores(&img, &[("a", &pseudo), ("b", &pseudo)], &neg, 0.1).unwrap();
        assert!((h["a"] - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
        assert_eq!(h["a"], h["b"]);
        let h = content_scores(&img, &[("a", &neg)], &neg, 0.1).unwrap();
        assert_eq!(h["a"], 0.5);
    }

    #[test]
    fn combine_examples() {
        let v = combine("e", &map(&[("a", 0.5)]), &map(&[("a", 0.8)]), 0.9).unwrap();
        assert_eq!(v.lambda["a"], 0.8f64 * 0.5 * 0.9);
        assert!((v.lambda["a"] - 0.36).abs() <= f64::EPSILON);

        let v = combine("e", &map(&[("a", 0.5), ("b", 0.5)]), &map(&[("a", 0.8), ("b", 0.6)]), 0.9).unwrap();
        assert!((v.lambda["b"] - 0.27).abs() < 1e-12);
        assert!((v.lambda_junk - (1.0 - 0.36 - 0.27)).abs() < 1e-12);
        v.validate().unwrap();

        let v = combine("e", &map(&[("a", 0.3), ("b", 0.7)]), &map(&[("a", 1.0), ("b", 1.0)]), 0.0).unwrap();
        assert!(v.lambda.values().all(|&x| x == 0.0));
        assert_eq!(v.lambda_junk, 1.0);

        assert!(combine("e", &map(&[("a", 1.0)]), &map(&[("b", 1.0)]), 1.0).is_err());
        assert!(combine("e", &map(&[("a", 1.5)]), &map(&[("a", 1.0)]), 1.0).is_err());
    }

    #[test]
    fn junk_complement_of_two_class_lambdas() {
        // λ = (0.36, 0.24) → λ_junk = 0.40
        let v = combine("e", &map(&[("a", 0.6), ("b", 0.4)]), &map(&[("a", 0.6), ("b", 0.6)]), 1.0).unwrap();
        assert!((v.lambda["a"] - 0.36).abs() < 1e-12);
        assert!((v.lambda["b"] - 0.24).abs() < 1e-12);
        assert!((v.lambda_junk - 0.40).abs() < 1e-12);
    }

    #[test]
    fn prompt_and_pseudo_validation() {
        PromptSet::default().validate().unwrap();
        let dup = PromptSet {
            invalid_form_prompts: vec!["a chart".into(), "a chart".into()],
            negative_label: "an image".into(),
        };
        assert!(dup.validate().is_err());
        let pseudo = PseudoLabelMap([("a".to_string(), "microscope image".to_string())].into());
        assert!(pseudo.validate(&[ClassLabel::new("a", "A")]).is_ok());
        let err = pseudo.validate(&[ClassLabel::new("b", "B")]).unwrap_err();
        assert!(err.to_string().contains("`b`"));
    }

    #[test]
    fn sentence_unit_ids() {
        let ex = MinedExample {
            example_id: "acne-0001".into(),
            class_query: "acne".into(),
            image_bytes_path: "images/x.jpg".into(),
            alt_text: "acne on cheek".into(),
            pre_text: "One.\nTwo.".into(),
            post_text: "".into(),
            source_url: "https://p/".into(),
            image_url: "https://i/x.jpg".into(),
            fetched_at: "1970-01-01T00:00:00Z".into(),
        };
        let ids: Vec<String> = sentence_units(&ex).into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, vec!["acne-0001:alt", "acne-0001:pre:0", "acne-0001:pre:1"]);
    }
}
