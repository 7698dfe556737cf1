//! Shared text utilities: stopwords, normalization and tokenization.

use std::collections::HashSet;
use std::sync::OnceLock;

const STOPWORDS_RAW: &str = include_str!("../data/stopwords_en.txt");

/// Frozen English stopword list shipped with the crate.
pub fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_RAW
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

/// True for whitespace tokens that look like hyperlinks.
pub fn is_url_token(token: &str) -> bool {
    let lower = token.to_ascii_lowercase();
    let lower = lower.trim_start_matches(|c: char| !c.is_alphanumeric());
    if lower.starts_with("www.") {
        return true;
    }
    match lower.find("://") {
        Some(pos) => {
            pos > 0
                && lower[..pos]
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '+' || c == '.' || c == '-')
        }
        None => false,
    }
}

fn keep_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '.' | '!' | '?' | '\'' | '-' | ',')
}

/// Normalizes raw text into a list of cleaned whitespace tokens.
///
/// Hyperlinks are dropped, characters other than alphanumerics, sentence
/// punctuation, apostrophes, hyphens and commas are removed, and tokens
/// carrying non-ASCII letters are discarded as non-English.
pub fn normalize_tokens(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for token in raw.split_whitespace() {
        if is_url_token(token) {
            continue;
        }
        let cleaned: String = token
            .chars()
            .map(|c| if c == '\u{2019}' || c == '\u{2018}' { '\'' } else { c })
            .filter(|&c| keep_char(c))
            .collect();
        if cleaned.is_empty() || !cleaned.is_ascii() {
            continue;
        }
        out.push(cleaned);
    }
    out
}

/// Normalized text as a single space-joined string.
pub fn normalize(raw: &str) -> String {
    normalize_tokens(raw).join(" ")
}

/// Lowercase alphanumeric tokens split on every non-alphanumeric boundary.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Rounds to six significant digits so serialized floats are diff-stable.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Formats a float for text exports with six significant digits.
pub fn fmt6(x: f64) -> String {
    format!("{}", sig6(x))
}
