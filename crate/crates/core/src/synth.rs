//! Seeded synthetic fixtures: Gaussian blobs, uniform noise, token-family
//! texts and a small multi-domain narrative corpus with planted origins.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ArticleRecord, RawComment};
use crate::reduce::Coordinates;
use crate::text::is_stopword;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Isotropic Gaussian blobs around `centers`. Returns points and the blob
/// index of each point.
pub fn gaussian_blobs(centers: &[Vec<f64>], per_blob: usize, sigma: f64, seed: u64) -> (Coordinates, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            rows.push(c.iter().map(|&m| m + sigma * standard_normal(&mut rng)).collect::<Vec<_>>());
            labels.push(b as i64);
        }
    }
    (Coordinates::from_rows(&rows), labels)
}

pub fn uniform_points(n: usize, dims: usize, seed: u64) -> Coordinates {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dims).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    Coordinates::from_rows(&rows)
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Distinct pronounceable pseudo-words, none of them stopwords.
pub fn pseudo_words(count: usize, rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..4);
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !is_stopword(&w) && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// `families × per_family` texts; each draws `tokens_per_text` distinct
/// words from its family's `vocab` pseudo-words.
pub fn token_family_texts(
    families: usize,
    per_family: usize,
    vocab: usize,
    tokens_per_text: usize,
    seed: u64,
) -> (Vec<String>, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = BTreeSet::new();
    let vocabs: Vec<Vec<String>> = (0..families).map(|_| pseudo_words(vocab, &mut rng, &mut taken)).collect();
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (f, words) in vocabs.iter().enumerate() {
        for _ in 0..per_family {
            let picked: Vec<&String> = words.choose_multiple(&mut rng, tokens_per_text).collect();
            texts.push(picked.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" "));
            labels.push(f as i64);
        }
    }
    (texts, labels)
}

/// Shape of the synthetic narrative corpus.
#[derive(Debug, Clone)]
pub struct NarrativeSpec {
    pub families: usize,
    pub sentences_per_family: usize,
    pub sentences_per_article: usize,
    pub core_tokens: usize,
    pub peripheral_tokens: usize,
    pub peripheral_per_sentence: usize,
    pub comments_per_family: usize,
    pub domains: Vec<String>,
    pub seed: u64,
}

impl Default for NarrativeSpec {
    fn default() -> Self {
        NarrativeSpec {
            families: 3,
            sentences_per_family: 200,
            sentences_per_article: 5,
            core_tokens: 4,
            peripheral_tokens: 24,
            peripheral_per_sentence: 4,
            comments_per_family: 100,
            domains: ["alpha-news.example", "beta-wire.example", "gamma-post.example", "delta-daily.example"]
                .map(String::from)
                .to_vec(),
            seed: 2022,
        }
    }
}

/// Generated corpus plus the ground truth planted in it.
#[derive(Debug, Clone)]
pub struct NarrativeFixture {
    pub articles: Vec<ArticleRecord>,
    pub comments: Vec<RawComment>,
    /// Family of every article, keyed by url.
    pub article_family: BTreeMap<String, usize>,
    /// Family each comment paraphrases, keyed by comment id.
    pub comment_family: BTreeMap<String, usize>,
    pub planted_first_day: Vec<NaiveDate>,
    pub planted_originators: Vec<BTreeSet<String>>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Builds a corpus where each family's articles start on a planted day at
/// planted originator domains and later spread to the other domains.
/// Comments paraphrase one family: all its core words, one peripheral word
/// and two filler words.
pub fn narrative_fixture(spec: &NarrativeSpec) -> NarrativeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = BTreeSet::new();
    let filler = pseudo_words(40, &mut rng, &mut taken);
    let base = NaiveDate::from_ymd_opt(2022, 1, 3).unwrap();
    let n_domains = spec.domains.len();

    let mut articles = Vec::new();
    let mut comments = Vec::new();
    let mut article_family = BTreeMap::new();
    let mut comment_family = BTreeMap::new();
    let mut planted_first_day = Vec::new();
    let mut planted_originators = Vec::new();

    for f in 0..spec.families {
        let core = pseudo_words(spec.core_tokens, &mut rng, &mut taken);
        let periphery = pseudo_words(spec.peripheral_tokens, &mut rng, &mut taken);
        let first_day = base + Days::new(f as u64 * 2);
        // every third family is co-originated by two domains
        let originators: BTreeSet<String> = if f % 3 == 1 && n_domains > 1 {
            [f % n_domains, (f + 1) % n_domains].iter().map(|&d| spec.domains[d].clone()).collect()
        } else {
            [spec.domains[f % n_domains].clone()].into()
        };
        let others: Vec<&String> = spec.domains.iter().filter(|d| !originators.contains(*d)).collect();

        let n_articles = spec.sentences_per_family.div_ceil(spec.sentences_per_article);
        for a in 0..n_articles {
            let (domain, day) = if a < originators.len() {
                (originators.iter().nth(a).unwrap().clone(), first_day)
            } else if others.is_empty() || rng.gen_bool(0.2) {
                let d = originators.iter().nth(rng.gen_range(0..originators.len())).unwrap();
                (d.clone(), first_day + Days::new(rng.gen_range(0..15)))
            } else {
                ((*others.choose(&mut rng).unwrap()).clone(), first_day + Days::new(rng.gen_range(1..15)))
            };
            let count = spec
                .sentences_per_article
                .min(spec.sentences_per_family - a * spec.sentences_per_article);
            let sentences: Vec<String> = (0..count)
                .map(|_| {
                    let mut words: Vec<&str> = core.iter().map(String::as_str).collect();
                    words.extend(
                        periphery
                            .choose_multiple(&mut rng, spec.peripheral_per_sentence)
                            .map(String::as_str),
                    );
                    words.shuffle(&mut rng);
                    format!("{}.", capitalize(&words.join(" ")))
                })
                .collect();
            let url = format!("https://{domain}/f{f}/a{a}");
            article_family.insert(url.clone(), f);
            articles.push(ArticleRecord {
                url,
                domain,
                title: format!("{} {}", capitalize(&core[0]), core[1]),
                text: sentences.join(" "),
                published: day,
            });
        }

        for c in 0..spec.comments_per_family {
            let mut words: Vec<&str> = core.iter().map(String::as_str).collect();
            words.push(periphery.choose(&mut rng).unwrap());
            words.extend(filler.choose_multiple(&mut rng, 2).map(String::as_str));
            words.shuffle(&mut rng);
            let id = format!("f{f}c{c}");
            comment_family.insert(id.clone(), f);
            let day = first_day + Days::new(rng.gen_range(1..20));
            let created = day.and_hms_opt(12, 0, 0).unwrap().and_utc().timestamp() + rng.gen_range(0..3600);
            comments.push(RawComment {
                id,
                author: format!("user{}", rng.gen_range(0..60)),
                subreddit: "synthetic".into(),
                created_utc: created,
                body: format!("I think the {} and {}", words[..4].join(" "), words[4..].join(" ")),
            });
        }
        planted_first_day.push(first_day);
        planted_originators.push(originators);
    }

    NarrativeFixture {
        articles,
        comments,
        article_family,
        comment_family,
        planted_first_day,
        planted_originators,
    }
}

impl NarrativeFixture {
    /// Writes `articles.jsonl` and `comments.jsonl` into `dir`.
    pub fn write_files(&self, dir: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(dir.join("articles.jsonl"))?);
        for a in &self.articles {
            serde_json::to_writer(&mut w, a)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("comments.jsonl"))?);
        for c in &self.comments {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}
