//! Locating a search-result image inside its hosting page and pulling the
//! alt text and surrounding plaintext out of the HTML.

use ego_tree::iter::Edge;
use scraper::{Html, Node};
use url::Url;

use crate::fuzzy::fuzzy_ratio;
use crate::text::{self, MAX_CONTEXT_SENTENCES, MAX_CONTEXT_TOKENS};

/// Minimum filename similarity for an `<img>` to count as the search result.
pub const MATCH_THRESHOLD: f64 = 0.85;

/// `<img>` attributes that may carry the image address, in lookup order.
/// `url-src` and `data-src` are the usual lazy-loading carriers.
pub const SOURCE_ATTRIBUTES: [&str; 3] = ["src", "url-src", "data-src"];

const SKIPPED_ELEMENTS: [&str; 6] = ["head", "script", "style", "noscript", "template", "iframe"];

const BLOCK_ELEMENTS: [&str; 38] = [
    "address", "article", "aside", "blockquote", "body", "br", "caption", "dd", "details", "div",
    "dl", "dt", "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5",
    "h6", "header", "hr", "html", "li", "main", "nav", "ol", "p", "pre", "section", "summary",
    "table", "td", "th", "tr",
];

/// A leniently parsed HTML document.
pub struct Page {
    doc: Html,
}

/// Where the search-result image was found in a [`Page`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// Position of the element among all `<img>` elements, document order.
    pub img_ordinal: usize,
    /// Attribute that matched (`src`, `url-src` or `data-src`).
    pub attribute: String,
    /// Raw value of the matching attribute.
    pub value: String,
    /// Raw `src` attribute of the element, if any.
    pub src: Option<String>,
    pub ratio: f64,
}

impl ImageMatch {
    /// Absolute http(s) address of the element's `src`, resolved against the
    /// page URL. `None` means the element has no usable `src` (empty,
    /// missing, or an inline `data:` placeholder), which is how lazily
    /// loaded images show up in static HTML.
    pub fn resolved_src(&self, page_url: &Url) -> Option<Url> {
        let src = self.src.as_deref()?.trim();
        if src.is_empty() || src.starts_with("data:") {
            return None;
        }
        let url = page_url.join(src).ok()?;
        matches!(url.scheme(), "http" | "https").then_some(url)
    }
}

/// Alt text plus the plaintext immediately around a matched image.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImageContext {
    pub alt_text: String,
    /// Sentences before the image, one per line.
    pub pre_text: String,
    /// Sentences after the image, one per line.
    pub post_text: String,
}

impl ImageContext {
    pub fn is_empty(&self) -> bool {
        self.alt_text.is_empty() && self.pre_text.is_empty() && self.post_text.is_empty()
    }
}

/// Normalized file name of a URL or relative reference: final path segment
/// with query and fragment removed, percent-decoded and lowercased.
pub fn url_filename(reference: &str) -> Option<String> {
    let reference = reference.trim();
    if reference.is_empty() || reference.starts_with("data:") {
        return None;
    }
    let end = reference.find(['?', '#']).unwrap_or(reference.len());
    let path = &reference[..end];
    let segment = path.rsplit('/').next().unwrap_or("");
    if segment.is_empty() {
        return None;
    }
    let decoded = percent_encoding::percent_decode_str(segment).decode_utf8_lossy();
    Some(decoded.to_lowercase())
}

impl Page {
    pub fn parse(html: &str) -> Self {
        Page {
            doc: Html::parse_document(html),
        }
    }

    fn images(&self) -> impl Iterator<Item = &scraper::node::Element> {
        self.doc.tree.nodes().filter_map(|n| match n.value() {
            Node::Element(e) if e.name() == "img" => Some(e),
            _ => None,
        })
    }

    /// First `<img>` whose source filename is a close match for the
    /// filename of `image_url`.
    pub fn match_image(&self, image_url: &str) -> Option<ImageMatch> {
        let wanted = url_filename(image_url)?;
        for (ordinal, img) in self.images().enumerate() {
            for attr in SOURCE_ATTRIBUTES {
                let Some(value) = img.attr(attr) else {
                    continue;
                };
                let Some(name) = url_filename(value) else {
                    continue;
                };
                let ratio = fuzzy_ratio(&wanted, &name);
                if ratio > MATCH_THRESHOLD {
                    return Some(ImageMatch {
                        img_ordinal: ordinal,
                        attribute: attr.to_string(),
                        value: value.to_string(),
                        src: img.attr("src").map(str::to_string),
                        ratio,
                    });
                }
            }
        }
        None
    }

    /// Alt text and bounded surrounding text for a match on this page.
    pub fn extract_context(&self, m: &ImageMatch) -> ImageContext {
        let mut before = Blocks::default();
        let mut after = Blocks::default();
        let mut alt = None;
        let mut skip_depth = 0usize;
        let mut img_seen = 0usize;
        let mut past_target = false;

        for edge in self.doc.tree.root().traverse() {
            match edge {
                Edge::Open(node) => match node.value() {
                    Node::Element(e) => {
                        let name = e.name();
                        if SKIPPED_ELEMENTS.contains(&name) {
                            skip_depth += 1;
                            continue;
                        }
                        if skip_depth > 0 {
                            continue;
                        }
                        if name == "img" {
                            if img_seen == m.img_ordinal {
                                alt = Some(e.attr("alt").unwrap_or("").to_string());
                                past_target = true;
                            }
                            img_seen += 1;
                        }
                        if BLOCK_ELEMENTS.contains(&name) {
                            current(&mut before, &mut after, past_target).boundary();
                        }
                    }
                    Node::Text(t) if skip_depth == 0 => {
                        current(&mut before, &mut after, past_target).push(t);
                    }
                    _ => {}
                },
                Edge::Close(node) => {
                    if let Node::Element(e) = node.value() {
                        let name = e.name();
                        if SKIPPED_ELEMENTS.contains(&name) {
                            skip_depth = skip_depth.saturating_sub(1);
                        } else if skip_depth == 0 && BLOCK_ELEMENTS.contains(&name) {
                            current(&mut before, &mut after, past_target).boundary();
                        }
                    }
                }
            }
        }

        ImageContext {
            alt_text: alt.map(|a| alt_plaintext(&a)).unwrap_or_default(),
            pre_text: text::bounded_tail(
                &before.sentences(),
                MAX_CONTEXT_TOKENS,
                MAX_CONTEXT_SENTENCES,
            ),
            post_text: text::bounded_head(
                &after.sentences(),
                MAX_CONTEXT_TOKENS,
                MAX_CONTEXT_SENTENCES,
            ),
        }
    }
}

fn current<'a>(before: &'a mut Blocks, after: &'a mut Blocks, past: bool) -> &'a mut Blocks {
    if past {
        after
    } else {
        before
    }
}

/// Text split into block-level pieces. Each piece is later split into
/// sentences, so every block boundary also ends a sentence.
#[derive(Default)]
struct Blocks {
    done: Vec<String>,
    open: String,
}

impl Blocks {
    fn push(&mut self, s: &str) {
        self.open.push_str(s);
    }

    fn boundary(&mut self) {
        if !self.open.trim().is_empty() {
            self.done.push(std::mem::take(&mut self.open));
        } else {
            self.open.clear();
        }
    }

    fn sentences(mut self) -> Vec<String> {
        self.boundary();
        self.done
            .iter()
            .flat_map(|block| text::split_sentences(block))
            .collect()
    }
}

/// Alt attributes sometimes carry markup; keep only its text.
fn alt_plaintext(alt: &str) -> String {
    if !alt.contains('<') {
        return text::collapse_whitespace(alt);
    }
    let frag = Html::parse_fragment(alt);
    let joined: String = frag.root_element().text().collect::<Vec<_>>().join(" ");
    text::collapse_whitespace(&joined)
}

/// Convenience wrapper: parse, match, and extract in one call.
pub fn match_image_in_page(html: &str, image_url: &str) -> Option<ImageMatch> {
    Page::parse(html).match_image(image_url)
}
