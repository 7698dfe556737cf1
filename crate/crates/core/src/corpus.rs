//! Article and comment corpora: JSONL ingestion, sentence segmentation and
//! comment filtering.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{is_stopword, normalize_tokens};

/// Abbreviations that never terminate a sentence (compared lowercase).
pub const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "st.", "u.s.", "u.k.", "vs.", "etc.", "jr.", "sr.", "prof.",
    "gen.", "col.", "lt.", "sgt.", "gov.", "sen.", "rep.", "jan.", "feb.", "aug.", "sept.",
    "oct.", "nov.", "dec.", "e.g.", "i.e.",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    RecordInvalid { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub url: String,
    pub domain: String,
    pub title: String,
    pub text: String,
    pub published: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: usize,
    pub article_url: String,
    pub domain: String,
    pub published: NaiveDate,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentRecord {
    pub comment_id: String,
    pub author: String,
    pub community: String,
    pub created: i64,
    pub body: String,
}

impl CommentRecord {
    /// UTC calendar day of `created`.
    pub fn day(&self) -> NaiveDate {
        DateTime::from_timestamp(self.created, 0)
            .map(|t| t.date_naive())
            .unwrap_or_default()
    }
}

/// A comment as it appears in a `comments.jsonl` dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawComment {
    pub id: String,
    pub author: String,
    pub subreddit: String,
    pub created_utc: i64,
    pub body: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub articles: Vec<ArticleRecord>,
    pub duplicates_dropped: usize,
}

impl Corpus {
    /// Builds a corpus from records, dropping url duplicates and sorting by
    /// (published, url).
    pub fn from_articles(records: impl IntoIterator<Item = ArticleRecord>) -> Self {
        let mut seen = HashSet::new();
        let mut articles = Vec::new();
        let mut duplicates_dropped = 0;
        for rec in records {
            if seen.insert(rec.url.clone()) {
                articles.push(rec);
            } else {
                duplicates_dropped += 1;
            }
        }
        articles.sort_by(|a, b| (a.published, &a.url).cmp(&(b.published, &b.url)));
        Corpus {
            articles,
            duplicates_dropped,
        }
    }

    /// Explodes every article into sentences with dense ids in corpus order.
    pub fn sentences(&self) -> Vec<SentenceRecord> {
        let mut out = Vec::new();
        for article in &self.articles {
            for mut s in split_sentences(article) {
                s.sentence_id = out.len();
                out.push(s);
            }
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        for a in &self.articles {
            serde_json::to_writer(&mut w, a).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawArticle {
    url: Option<String>,
    domain: Option<String>,
    title: Option<String>,
    text: Option<String>,
    published: Option<String>,
}

fn invalid(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::RecordInvalid {
        line,
        reason: reason.into(),
    }
}

fn parse_article(line_no: usize, line: &str) -> Result<ArticleRecord, CorpusError> {
    let raw: RawArticle =
        serde_json::from_str(line).map_err(|e| invalid(line_no, format!("malformed json: {e}")))?;
    let field = |v: Option<String>, name: &str| v.ok_or_else(|| invalid(line_no, format!("missing field `{name}`")));
    let url = field(raw.url, "url")?;
    if url.is_empty() {
        return Err(invalid(line_no, "empty url"));
    }
    let domain = field(raw.domain, "domain")?.trim().to_ascii_lowercase();
    if domain.is_empty() || domain.contains("://") || domain.contains('/') {
        return Err(invalid(line_no, format!("bad domain `{domain}`")));
    }
    let title = field(raw.title, "title")?;
    let text = field(raw.text, "text")?;
    let published = field(raw.published, "published")?;
    let published = NaiveDate::parse_from_str(published.trim(), "%Y-%m-%d")
        .map_err(|e| invalid(line_no, format!("unparseable date `{published}`: {e}")))?;
    Ok(ArticleRecord {
        url,
        domain,
        title,
        text,
        published,
    })
}

/// Reads an `articles.jsonl` file. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn ingest_articles(path: &Path) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_article(idx + 1, &line)?);
    }
    let corpus = Corpus::from_articles(records);
    if corpus.duplicates_dropped > 0 {
        log::warn!(
            "{}: dropped {} duplicate article(s) by url",
            path.display(),
            corpus.duplicates_dropped
        );
    }
    Ok(corpus)
}

pub fn ingest_comments(path: &Path) -> Result<Vec<RawComment>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: RawComment = serde_json::from_str(&line).map_err(|e| invalid(idx + 1, e.to_string()))?;
        out.push(c);
    }
    Ok(out)
}

pub fn write_comments_jsonl(comments: &[CommentRecord], path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in comments {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn is_terminal(token: &str) -> bool {
    if token.ends_with('!') || token.ends_with('?') {
        return true;
    }
    token.ends_with('.') && !ABBREVIATIONS.contains(&token.to_ascii_lowercase().as_str())
}

/// Splits normalized text into sentence strings without their terminal
/// punctuation.
pub fn split_text(raw: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let flush = |current: &mut Vec<String>, sentences: &mut Vec<String>| {
        if let Some(last) = current.pop() {
            let trimmed = last.trim_end_matches(['.', '!', '?']);
            if !trimmed.is_empty() {
                current.push(trimmed.to_string());
            }
        }
        if !current.is_empty() {
            sentences.push(current.join(" "));
        }
        current.clear();
    };
    for token in normalize_tokens(raw) {
        let terminal = is_terminal(&token);
        current.push(token);
        if terminal {
            flush(&mut current, &mut sentences);
        }
    }
    flush(&mut current, &mut sentences);
    sentences
}

/// Segments one article into sentence records. Ids are local (0-based);
/// [`Corpus::sentences`] renumbers them densely over the corpus.
pub fn split_sentences(article: &ArticleRecord) -> Vec<SentenceRecord> {
    split_text(&article.text)
        .into_iter()
        .enumerate()
        .map(|(i, text)| SentenceRecord {
            sentence_id: i,
            article_url: article.url.clone(),
            domain: article.domain.clone(),
            published: article.published,
            text,
        })
        .collect()
}

/// ASCII-share and stopword test standing in for language detection.
pub fn looks_english(raw: &str) -> bool {
    let visible: Vec<char> = raw.chars().filter(|c| !c.is_whitespace()).collect();
    if visible.is_empty() {
        return false;
    }
    let ascii = visible
        .iter()
        .filter(|c| c.is_ascii_alphanumeric() || c.is_ascii_punctuation())
        .count();
    if (ascii as f64) < 0.8 * visible.len() as f64 {
        return false;
    }
    let words: Vec<String> = raw
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect();
    words.len() < 6 || words.iter().any(|w| is_stopword(w))
}

/// Keeps comments with more than `min_words` words that pass the English
/// heuristic; bodies are normalized like article text.
pub fn filter_comments(comments: &[RawComment], min_words: usize) -> Vec<CommentRecord> {
    comments
        .iter()
        .filter_map(|c| {
            if !looks_english(&c.body) {
                return None;
            }
            let tokens = normalize_tokens(&c.body);
            if tokens.len() <= min_words {
                return None;
            }
            Some(CommentRecord {
                comment_id: c.id.clone(),
                author: c.author.clone(),
                community: c.subreddit.clone(),
                created: c.created_utc,
                body: tokens.join(" "),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn article(text: &str) -> ArticleRecord {
        ArticleRecord {
            url: "https://a.example/1".into(),
            domain: "a.example".into(),
            title: "t".into(),
            text: text.into(),
            published: NaiveDate::from_ymd_opt(2022, 1, 5).unwrap(),
        }
    }

    fn raw(body: &str) -> RawComment {
        RawComment {
            id: "c".into(),
            author: "u".into(),
            subreddit: "russia".into(),
            created_utc: 1_640_995_200,
            body: body.into(),
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        let s = split_sentences(&article("Russia invaded. The West reacted?"));
        let texts: Vec<_> = s.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["Russia invaded", "The West reacted"]);
    }

    #[test]
    fn removes_urls() {
        let s = split_sentences(&article("see https://x.example now."));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].text, "see now");
    }

    #[test]
    fn abbreviations_do_not_split() {
        let s = split_sentences(&article("Dr. Putin spoke."));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].text, "Dr. Putin spoke");
        assert_eq!(split_text("The U.S. and the U.K. agreed. Then left!").len(), 2);
    }

    #[test]
    fn empty_fragments_dropped() {
        assert!(split_text("... ?! ☺").is_empty());
        assert!(split_text("").is_empty());
    }

    #[test]
    fn sentences_inherit_article_fields() {
        let a = article("One. Two.");
        for s in split_sentences(&a) {
            assert_eq!(s.domain, a.domain);
            assert_eq!(s.published, a.published);
            assert_eq!(s.article_url, a.url);
        }
    }

    #[test]
    fn short_comment_dropped() {
        assert!(filter_comments(&[raw("no")], 3).is_empty());
        assert!(filter_comments(&[raw("three words only")], 3).is_empty());
    }

    #[test]
    fn four_word_english_comment_kept() {
        let kept = filter_comments(&[raw("nato should expand now")], 3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].body, "nato should expand now");
        assert_eq!(kept[0].community, "russia");
    }

    #[test]
    fn cyrillic_comment_dropped() {
        assert!(filter_comments(&[raw("Слава России и всем нашим друзьям")], 3).is_empty());
    }

    #[test]
    fn long_comment_without_stopwords_dropped() {
        assert!(!looks_english("zelensky putin biden macron scholz johnson"));
        assert!(looks_english("zelensky and putin biden macron scholz johnson"));
    }

    #[test]
    fn ingest_valid_and_dedup() {
        let f = write_lines(&[
            r#"{"url":"u2","domain":"RT.com","title":"b","text":"x.","published":"2022-01-02"}"#,
            r#"{"url":"u1","domain":"tass.com","title":"a","text":"y.","published":"2022-01-02"}"#,
            r#"{"url":"u1","domain":"tass.com","title":"a","text":"y.","published":"2022-01-03"}"#,
        ]);
        let c = ingest_articles(f.path()).unwrap();
        assert_eq!(c.articles.len(), 2);
        assert_eq!(c.duplicates_dropped, 1);
        assert_eq!(c.articles[0].url, "u1");
        assert_eq!(c.articles[1].domain, "rt.com");
    }

    #[test]
    fn ingest_two_records() {
        let f = write_lines(&[
            r#"{"url":"u1","domain":"a.com","title":"a","text":"y.","published":"2022-01-02"}"#,
            r#"{"url":"u2","domain":"b.com","title":"b","text":"z.","published":"2022-01-01"}"#,
        ]);
        assert_eq!(ingest_articles(f.path()).unwrap().articles.len(), 2);
    }

    #[test]
    fn missing_published_reports_line() {
        let f = write_lines(&[
            r#"{"url":"u1","domain":"a.com","title":"a","text":"y.","published":"2022-01-02"}"#,
            r#"{"url":"u2","domain":"a.com","title":"a","text":"y."}"#,
        ]);
        match ingest_articles(f.path()) {
            Err(CorpusError::RecordInvalid { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_date_and_domain_rejected() {
        let f = write_lines(&[r#"{"url":"u","domain":"a.com","title":"","text":"","published":"2022-13-01"}"#]);
        assert!(matches!(ingest_articles(f.path()), Err(CorpusError::RecordInvalid { line: 1, .. })));
        let f = write_lines(&[r#"{"url":"u","domain":"https://a.com","title":"","text":"","published":"2022-01-01"}"#]);
        assert!(matches!(ingest_articles(f.path()), Err(CorpusError::RecordInvalid { line: 1, .. })));
    }

    #[test]
    fn ingest_serialize_ingest_round_trip() {
        let f = write_lines(&[
            r#"{"url":"u2","domain":"rt.com","title":"b \"q\"","text":"x. ü","published":"2022-01-02"}"#,
            r#"{"url":"u1","domain":"tass.com","title":"a","text":"y.","published":"2022-01-02"}"#,
        ]);
        let first = ingest_articles(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        first.write_jsonl(out.path()).unwrap();
        let bytes1 = std::fs::read(out.path()).unwrap();
        let second = ingest_articles(out.path()).unwrap();
        assert_eq!(first.articles, second.articles);
        let out2 = tempfile::NamedTempFile::new().unwrap();
        second.write_jsonl(out2.path()).unwrap();
        assert_eq!(bytes1, std::fs::read(out2.path()).unwrap());
    }

    #[test]
    fn comment_day_is_utc() {
        let mut c = filter_comments(&[raw("nato should expand now")], 3).remove(0);
        c.created = 1_646_092_799; // 2022-02-28T23:59:59Z
        assert_eq!(c.day(), NaiveDate::from_ymd_opt(2022, 2, 28).unwrap());
    }

    proptest! {
        #[test]
        fn splitting_is_idempotent(text in "[a-zA-Z .!?,'-]{0,80}|(Dr|Mr|U\\.S)\\. [a-z]{1,8}\\.") {
            for s in split_text(&text) {
                prop_assert_eq!(split_text(&s), vec![s.clone()]);
            }
        }

        #[test]
        fn filter_output_is_subset(bodies in proptest::collection::vec("[a-z ]{0,40}", 0..12), min_words in 0usize..5) {
            let raws: Vec<RawComment> = bodies.iter().enumerate().map(|(i, b)| RawComment {
                id: i.to_string(), author: "a".into(), subreddit: "s".into(), created_utc: 0, body: b.clone(),
            }).collect();
            let kept = filter_comments(&raws, min_words);
            prop_assert!(kept.len() <= raws.len());
            for k in kept {
                prop_assert!(raws.iter().any(|r| r.id == k.comment_id));
                prop_assert!(k.body.split_whitespace().count() > min_words);
            }
        }
    }
}
