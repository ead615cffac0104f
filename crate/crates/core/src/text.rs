//! Plaintext helpers: whitespace tokens, rule-based sentences, and the
//! token/sentence truncation bounds applied to page context.

/// Maximum whitespace tokens kept on each side of a matched image.
pub const MAX_CONTEXT_TOKENS: usize = 256;
/// Maximum sentences kept on each side of a matched image.
pub const MAX_CONTEXT_SENTENCES: usize = 10;

/// Collapse every whitespace run to one space and trim the ends.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '\u{201d}' | '\u{2019}')
}

/// Split one block of text into sentences.
///
/// A sentence ends after a run of `.`, `!` or `?` (plus any closing quotes
/// or brackets) that is followed by whitespace and then by a character that
/// is not lowercase, or by the end of the text. Abbreviations followed by a
/// lowercase word ("e.g. this") therefore do not split.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if !is_terminator(chars[i]) {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < chars.len() && (is_terminator(chars[end]) || is_closer(chars[end])) {
            end += 1;
        }
        let mut next = end;
        while next < chars.len() && chars[next].is_whitespace() {
            next += 1;
        }
        let boundary = next == chars.len()
            || (next > end && !chars[next].is_lowercase());
        if boundary {
            push_sentence(&mut out, &chars[start..end]);
            start = next;
            i = next;
        } else {
            i = end;
        }
    }
    if start < chars.len() {
        push_sentence(&mut out, &chars[start..]);
    }
    out
}

fn push_sentence(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = collapse_whitespace(&s);
    if !s.is_empty() {
        out.push(s);
    }
}

/// Keep the leading part of `sentences` that fits the bounds.
///
/// The sentence bound and the token bound are applied independently and
/// the result with fewer tokens is kept. Sentences are joined by `\n`, so
/// the line count of the result is its sentence count.
pub fn bounded_head(sentences: &[String], max_tokens: usize, max_sentences: usize) -> String {
    let by_sentence: Vec<Vec<&str>> = sentences
        .iter()
        .take(max_sentences)
        .map(|s| s.split_whitespace().collect())
        .collect();
    let mut by_token: Vec<Vec<&str>> = Vec::new();
    let mut budget = max_tokens;
    for s in sentences {
        if budget == 0 {
            break;
        }
        let toks: Vec<&str> = s.split_whitespace().take(budget).collect();
        budget -= toks.len();
        by_token.push(toks);
    }
    join_lines(shorter(by_sentence, by_token))
}

/// Keep the trailing part of `sentences` that fits the bounds (the text
/// immediately before an anchor). Same selection rule as [`bounded_head`].
pub fn bounded_tail(sentences: &[String], max_tokens: usize, max_sentences: usize) -> String {
    let skip = sentences.len().saturating_sub(max_sentences);
    let by_sentence: Vec<Vec<&str>> = sentences[skip..]
        .iter()
        .map(|s| s.split_whitespace().collect())
        .collect();
    let mut by_token: Vec<Vec<&str>> = Vec::new();
    let mut budget = max_tokens;
    for s in sentences.iter().rev() {
        if budget == 0 {
            break;
        }
        let toks: Vec<&str> = s.split_whitespace().collect();
        let keep = toks.len().min(budget);
        budget -= keep;
        by_token.push(toks[toks.len() - keep..].to_vec());
    }
    by_token.reverse();
    join_lines(shorter(by_sentence, by_token))
}

fn shorter<'a>(a: Vec<Vec<&'a str>>, b: Vec<Vec<&'a str>>) -> Vec<Vec<&'a str>> {
    let count = |v: &Vec<Vec<&str>>| v.iter().map(Vec::len).sum::<usize>();
    if count(&b) < count(&a) {
        b
    } else {
        a
    }
}

fn join_lines(sentences: Vec<Vec<&str>>) -> String {
    sentences
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Sentences of a stored context field (one per non-empty line).
pub fn stored_sentences(field: &str) -> Vec<&str> {
    field.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}
