//! Comment-to-narrative matching by centroid semantic search, threshold
//! sweeps, user concentration and the precision-labeling harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CommentRecord;
use crate::embed::{centroid, cosine, EmbedError, EmbeddingMatrix};
use crate::text::fmt6;
use crate::topics::TopicModel;

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const SWEEP_THRESHOLDS: [f64; 4] = [0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("zero vector")]
    ZeroVector,
    #[error("no centroids to match against")]
    NoCentroids,
    #[error("provider mismatch: {0}")]
    ProviderMismatch(String),
    #[error("no matched comments")]
    NoMatches,
    #[error("unlabeled rows: {0}")]
    UnlabeledRows(String),
    #[error("label refers to unknown topic {0}")]
    UnknownTopicInLabels(usize),
    #[error("line {line}: {reason}")]
    BadSheet { line: usize, reason: String },
    #[error(transparent)]
    Embed(EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<EmbedError> for MatchError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::ZeroVector => MatchError::ZeroVector,
            other => MatchError::Embed(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub comment_id: String,
    pub cluster: usize,
    pub similarity: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityCounts {
    pub total: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub results: Vec<MatchResult>,
    pub threshold: f64,
    pub mapped_fraction: f64,
    pub per_cluster_counts: BTreeMap<usize, usize>,
    pub per_day_counts: BTreeMap<NaiveDate, usize>,
    pub per_community: BTreeMap<String, CommunityCounts>,
}

impl MatchReport {
    pub fn matched_count(&self) -> usize {
        self.results.iter().filter(|r| r.matched).count()
    }

    /// Mapped share as a percentage string, one decimal, half-to-even.
    pub fn mapped_percent(&self) -> String {
        percent_half_even(self.matched_count() as u64, self.results.len() as u64)
    }
}

/// `100·num/den` to one decimal place, rounding half to even, computed on
/// integers.
pub fn percent_half_even(num: u64, den: u64) -> String {
    if den == 0 {
        return "0.0".into();
    }
    let scaled = u128::from(num) * 1000;
    let den = u128::from(den);
    let (mut q, r) = (scaled / den, scaled % den);
    if 2 * r > den || (2 * r == den && q % 2 == 1) {
        q += 1;
    }
    format!("{}.{}", q / 10, q % 10)
}

/// Mean member embedding per cluster. Clusters whose mean vanishes are
/// skipped with a warning.
pub fn cluster_centroids(members: &BTreeMap<usize, Vec<usize>>, x: &EmbeddingMatrix) -> BTreeMap<usize, Vec<f32>> {
    let mut out = BTreeMap::new();
    for (&c, ids) in members {
        let rows: Vec<&[f32]> = ids.iter().map(|&i| x.row(i)).collect();
        match centroid(&rows) {
            Ok(v) => {
                out.insert(c, v);
            }
            Err(e) => log::warn!("cluster {c}: centroid skipped ({e})"),
        }
    }
    out
}

/// Best cluster by cosine; ties go to the lower id.
pub fn best_cluster(e: &[f32], centroids: &BTreeMap<usize, Vec<f32>>) -> Result<(usize, f64), MatchError> {
    let mut best: Option<(usize, f64)> = None;
    for (&c, v) in centroids {
        let s = cosine(e, v)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.ok_or(MatchError::NoCentroids)
}

pub fn match_comment(
    comment_id: &str,
    e: &[f32],
    centroids: &BTreeMap<usize, Vec<f32>>,
    threshold: f64,
) -> Result<MatchResult, MatchError> {
    let (cluster, similarity) = best_cluster(e, centroids)?;
    Ok(MatchResult {
        comment_id: comment_id.to_string(),
        cluster,
        similarity,
        matched: similarity >= threshold,
    })
}

fn check_provider(model: &TopicModel, emb: &EmbeddingMatrix, n_comments: usize) -> Result<(), MatchError> {
    if emb.provider_id != model.provider_id || emb.dim != model.dim {
        return Err(MatchError::ProviderMismatch(format!(
            "comments embedded with {} (dim {}), sentences with {} (dim {})",
            emb.provider_id, emb.dim, model.provider_id, model.dim
        )));
    }
    if emb.rows != n_comments {
        return Err(MatchError::ProviderMismatch(format!(
            "{} embedding rows for {n_comments} comments",
            emb.rows
        )));
    }
    Ok(())
}

/// Best-cluster search for every comment, independent of any threshold.
pub fn score_comments(
    comments: &[CommentRecord],
    emb: &EmbeddingMatrix,
    model: &TopicModel,
) -> Result<Vec<(usize, f64)>, MatchError> {
    check_provider(model, emb, comments.len())?;
    if comments.is_empty() {
        return Ok(Vec::new());
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..comments.len())
            .into_par_iter()
            .map(|i| best_cluster(emb.row(i), &model.centroids))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..comments.len())
            .map(|i| best_cluster(emb.row(i), &model.centroids))
            .collect()
    }
}

/// Applies a threshold to precomputed best matches and aggregates.
pub fn report_from_scores(comments: &[CommentRecord], scores: &[(usize, f64)], threshold: f64) -> MatchReport {
    let mut report = MatchReport {
        results: Vec::with_capacity(comments.len()),
        threshold,
        mapped_fraction: 0.0,
        per_cluster_counts: BTreeMap::new(),
        per_day_counts: BTreeMap::new(),
        per_community: BTreeMap::new(),
    };
    for (c, &(cluster, similarity)) in comments.iter().zip(scores) {
        let matched = similarity >= threshold;
        let community = report.per_community.entry(c.community.clone()).or_default();
        community.total += 1;
        if matched {
            community.matched += 1;
            *report.per_cluster_counts.entry(cluster).or_default() += 1;
            *report.per_day_counts.entry(c.day()).or_default() += 1;
        }
        report.results.push(MatchResult {
            comment_id: c.comment_id.clone(),
            cluster,
            similarity,
            matched,
        });
    }
    if !comments.is_empty() {
        report.mapped_fraction = report.matched_count() as f64 / comments.len() as f64;
    }
    report
}

pub fn match_corpus(
    comments: &[CommentRecord],
    emb: &EmbeddingMatrix,
    model: &TopicModel,
    threshold: f64,
) -> Result<MatchReport, MatchError> {
    let scores = score_comments(comments, emb, model)?;
    Ok(report_from_scores(comments, &scores, threshold))
}

/// Mapped fraction per threshold from a single matching pass.
pub fn sweep_thresholds(
    comments: &[CommentRecord],
    emb: &EmbeddingMatrix,
    model: &TopicModel,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>, MatchError> {
    let scores = score_comments(comments, emb, model)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = scores.iter().filter(|&&(_, s)| s >= t).count();
            let frac = if scores.is_empty() {
                0.0
            } else {
                hits as f64 / scores.len() as f64
            };
            (t, frac)
        })
        .collect())
}

/// Second-stage filter: the comment's mean similarity to the cluster's
/// sentences must reach the mean pairwise similarity among them. Clusters
/// with fewer than two members fall back to `cos(e, member) >= threshold`.
pub fn sentence_level_filter(e: &[f32], members: &[&[f32]], threshold: f64) -> Result<bool, MatchError> {
    match members.len() {
        0 => Err(MatchError::NoCentroids),
        1 => Ok(cosine(e, members[0])? >= threshold),
        m => {
            let mut to_comment = 0.0;
            for row in members {
                to_comment += cosine(e, row)?;
            }
            let mut pairwise = 0.0;
            for i in 0..m {
                for j in i + 1..m {
                    pairwise += cosine(members[i], members[j])?;
                }
            }
            Ok(to_comment / m as f64 >= pairwise / (m * (m - 1) / 2) as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserConcentration {
    /// Fewest authors accounting for at least half of matched comments.
    pub users_for_half: usize,
    /// `users_for_half` over distinct matched authors.
    pub user_fraction: f64,
    pub distinct_authors: usize,
    /// `(author, matched count, cumulative share)` in descending count order.
    pub curve: Vec<(String, usize, f64)>,
}

pub fn user_concentration(report: &MatchReport, comments: &[CommentRecord]) -> Result<UserConcentration, MatchError> {
    let author_of: BTreeMap<&str, &str> = comments
        .iter()
        .map(|c| (c.comment_id.as_str(), c.author.as_str()))
        .collect();
    let mut per_author: BTreeMap<&str, usize> = BTreeMap::new();
    for r in report.results.iter().filter(|r| r.matched) {
        let author = author_of.get(r.comment_id.as_str()).copied().unwrap_or("");
        *per_author.entry(author).or_default() += 1;
    }
    let total: usize = per_author.values().sum();
    if total == 0 {
        return Err(MatchError::NoMatches);
    }
    let mut ranked: Vec<(&str, usize)> = per_author.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut curve = Vec::with_capacity(ranked.len());
    let mut cum = 0;
    let mut users_for_half = 0;
    for (i, (author, count)) in ranked.iter().enumerate() {
        cum += count;
        if users_for_half == 0 && 2 * cum >= total {
            users_for_half = i + 1;
        }
        curve.push((author.to_string(), *count, cum as f64 / total as f64));
    }
    Ok(UserConcentration {
        users_for_half,
        user_fraction: users_for_half as f64 / ranked.len() as f64,
        distinct_authors: ranked.len(),
        curve,
    })
}

/// One row of the labeling sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub topic: usize,
    pub comment_id: String,
    pub similarity: f64,
    pub body: String,
    pub verdict: Option<bool>,
}

/// Rows for the `top_k` clusters with most matches plus `random_k` other
/// matched clusters drawn with `seed`.
pub fn precision_sample(
    report: &MatchReport,
    comments: &[CommentRecord],
    top_k: usize,
    random_k: usize,
    seed: u64,
) -> Vec<SampleRow> {
    let mut ranked: Vec<(usize, usize)> = report.per_cluster_counts.iter().map(|(&c, &n)| (c, n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut chosen: BTreeSet<usize> = ranked.iter().take(top_k).map(|&(c, _)| c).collect();
    let rest: Vec<usize> = ranked.iter().skip(top_k).map(|&(c, _)| c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chosen.extend(rest.choose_multiple(&mut rng, random_k).copied());

    let body_of: BTreeMap<&str, &str> = comments
        .iter()
        .map(|c| (c.comment_id.as_str(), c.body.as_str()))
        .collect();
    let mut rows: Vec<SampleRow> = report
        .results
        .iter()
        .filter(|r| r.matched && chosen.contains(&r.cluster))
        .map(|r| SampleRow {
            topic: r.cluster,
            comment_id: r.comment_id.clone(),
            similarity: r.similarity,
            body: body_of.get(r.comment_id.as_str()).unwrap_or(&"").to_string(),
            verdict: None,
        })
        .collect();
    rows.sort_by(|a, b| a.topic.cmp(&b.topic).then_with(|| a.comment_id.cmp(&b.comment_id)));
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Splits one CSV record, honoring double-quoted fields.
pub fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

const SHEET_HEADER: &str = "topic,comment_id,similarity,body,verdict";

pub fn write_sample_csv(rows: &[SampleRow], path: &Path) -> Result<(), MatchError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SHEET_HEADER}")?;
    for r in rows {
        let verdict = match r.verdict {
            Some(true) => "correct",
            Some(false) => "incorrect",
            None => "",
        };
        let body = r.body.replace(['\n', '\r'], " ");
        writeln!(
            w,
            "{},{},{},{},{}",
            r.topic,
            csv_field(&r.comment_id),
            fmt6(r.similarity),
            csv_field(&body),
            verdict
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_csv(path: &Path) -> Result<Vec<SampleRow>, MatchError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| MatchError::BadSheet {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let f = split_csv_line(&line);
        if f.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let verdict = match f[4].trim().to_ascii_lowercase().as_str() {
            "" => None,
            "correct" | "1" | "y" | "yes" | "true" => Some(true),
            "incorrect" | "0" | "n" | "no" | "false" => Some(false),
            _ => return Err(bad("verdict must be correct/incorrect")),
        };
        rows.push(SampleRow {
            topic: f[0].trim().parse().map_err(|_| bad("bad topic id"))?,
            comment_id: f[1].clone(),
            similarity: f[2].trim().parse().map_err(|_| bad("bad similarity"))?,
            body: f[3].clone(),
            verdict,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionScore {
    /// topic → (correct, labeled, precision %)
    pub per_topic: BTreeMap<usize, (usize, usize, f64)>,
    pub correct: usize,
    pub labeled: usize,
    pub overall: f64,
}

/// Precision per topic and pooled over all labeled rows, in percent.
pub fn score_precision(rows: &[SampleRow], known_topics: Option<&BTreeSet<usize>>) -> Result<PrecisionScore, MatchError> {
    if rows.is_empty() {
        return Err(MatchError::UnlabeledRows("no rows".into()));
    }
    let unlabeled: Vec<&str> = rows
        .iter()
        .filter(|r| r.verdict.is_none())
        .map(|r| r.comment_id.as_str())
        .collect();
    if !unlabeled.is_empty() {
        return Err(MatchError::UnlabeledRows(unlabeled.join(" ")));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(known) = known_topics {
            if !known.contains(&r.topic) {
                return Err(MatchError::UnknownTopicInLabels(r.topic));
            }
        }
        let e = per.entry(r.topic).or_default();
        e.1 += 1;
        if r.verdict == Some(true) {
            e.0 += 1;
        }
    }
    let correct: usize = per.values().map(|v| v.0).sum();
    let labeled: usize = per.values().map(|v| v.1).sum();
    Ok(PrecisionScore {
        per_topic: per
            .into_iter()
            .map(|(t, (c, l))| (t, (c, l, 100.0 * c as f64 / l as f64)))
            .collect(),
        correct,
        labeled,
        overall: 100.0 * correct as f64 / labeled as f64,
    })
}

/// Writes `matches.csv`.
pub fn write_matches_csv(report: &MatchReport, comments: &[CommentRecord], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "comment_id,community,author,created_utc,cluster,similarity,matched")?;
    for (r, c) in report.results.iter().zip(comments) {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            csv_field(&r.comment_id),
            csv_field(&c.community),
            csv_field(&c.author),
            c.created,
            r.cluster,
            fmt6(r.similarity),
            r.matched
        )?;
    }
    w.flush()
}

/// Reads `matches.csv` back into results, in file order.
pub fn read_matches_csv(path: &Path) -> Result<Vec<MatchResult>, MatchError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| MatchError::BadSheet {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let f = split_csv_line(&line);
        if f.len() != 7 {
            return Err(bad("expected 7 columns"));
        }
        out.push(MatchResult {
            comment_id: f[0].clone(),
            cluster: f[4].parse().map_err(|_| bad("bad cluster"))?,
            similarity: f[5].parse().map_err(|_| bad("bad similarity"))?,
            matched: f[6].parse().map_err(|_| bad("bad matched flag"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{embed_batch, HashProvider};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn comment(id: &str, author: &str, created: i64) -> CommentRecord {
        CommentRecord {
            comment_id: id.into(),
            author: author.into(),
            community: "russia".into(),
            created,
            body: format!("body of {id}"),
        }
    }

    fn model(centroids: &[(usize, Vec<f32>)]) -> TopicModel {
        TopicModel {
            cluster_members: centroids.iter().map(|(c, _)| (*c, vec![])).collect(),
            keywords: BTreeMap::new(),
            centroids: centroids.iter().cloned().collect(),
            outlier_ids: vec![],
            provider_id: "t".into(),
            dim: 2,
        }
    }

    fn matrix(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_raw(rows.concat(), rows[0].len(), "t").unwrap()
    }

    #[test]
    fn centroids_exclude_outliers_and_skip_degenerate() {
        let x = matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.6, 0.8]]);
        let members = BTreeMap::from([(0, vec![3]), (1, vec![0, 2])]);
        let c = cluster_centroids(&members, &x);
        assert_eq!(c[&0], x.row(3).to_vec());
        assert!(!c.contains_key(&1));
    }

    #[test]
    fn identical_comment_matches_its_cluster() {
        let centroids = BTreeMap::from([(3, vec![0.0f32, 1.0]), (7, vec![0.6, 0.8])]);
        let r = match_comment("c", &[0.6, 0.8], &centroids, 0.6).unwrap();
        assert_eq!((r.cluster, r.matched), (7, true));
        assert_abs_diff_eq!(r.similarity, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_comment_reports_best_unmatched() {
        let centroids = BTreeMap::from([(1, vec![1.0f32, 0.0, 0.0]), (2, vec![0.0, 1.0, 0.0])]);
        let r = match_comment("c", &[0.0, 0.0, 1.0], &centroids, 0.6).unwrap();
        assert!(!r.matched);
        assert_eq!(r.cluster, 1);
        assert!(matches!(match_comment("c", &[0.0, 0.0, 0.0], &centroids, 0.6), Err(MatchError::ZeroVector)));
    }

    #[test]
    fn tie_goes_to_lower_cluster_id() {
        let centroids = BTreeMap::from([(5, vec![1.0f32, 0.0]), (2, vec![0.0, 1.0])]);
        let r = match_comment("c", &[1.0, 1.0], &centroids, 0.6).unwrap();
        assert_eq!(r.cluster, 2);
    }

    #[test]
    fn corpus_of_copies_fully_mapped_and_empty_is_zero() {
        let m = model(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let comments = vec![comment("a", "u1", 0), comment("b", "u2", 86_400)];
        let emb = matrix(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let r = match_corpus(&comments, &emb, &m, 0.6).unwrap();
        assert_eq!(r.mapped_fraction, 1.0);
        assert_eq!(r.per_day_counts.len(), 2);
        assert_eq!(r.per_community["russia"], CommunityCounts { total: 2, matched: 2 });

        let empty = EmbeddingMatrix::from_raw(vec![], 2, "t").unwrap();
        let r = match_corpus(&[], &empty, &m, 0.6).unwrap();
        assert_eq!(r.mapped_fraction, 0.0);
        assert!(r.results.is_empty());
    }

    #[test]
    fn provider_mismatch_detected() {
        let m = model(&[(0, vec![1.0, 0.0])]);
        let emb = EmbeddingMatrix::from_raw(vec![1.0, 0.0], 2, "other").unwrap();
        assert!(matches!(
            match_corpus(&[comment("a", "u", 0)], &emb, &m, 0.6),
            Err(MatchError::ProviderMismatch(_))
        ));
    }

    #[test]
    fn sweep_edge_cases() {
        let m = model(&[(0, vec![1.0, 0.0])]);
        let comments = vec![comment("a", "u", 0), comment("b", "u", 0), comment("c", "u", 0)];
        let emb = matrix(&[&[1.0, 0.0], &[1.0, 1.0], &[-1.0, 0.2]]);
        let sweep = sweep_thresholds(&comments, &emb, &m, &[-1.0, 0.4, 0.5, 0.6, 0.7]).unwrap();
        assert_eq!(sweep[0].1, 1.0);
        for w in sweep.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn sentence_filter_cases() {
        let s = [0.6f32, 0.8];
        assert!(sentence_level_filter(&s, &[&s, &s], 0.6).unwrap());
        let a = [1.0f32, 0.0, 0.0];
        let b = [0.9f32, 0.1, 0.0];
        assert!(!sentence_level_filter(&[0.0, 0.0, 1.0], &[&a, &b], 0.6).unwrap());
        assert!(sentence_level_filter(&[1.0, 0.1, 0.0], &[&a], 0.6).unwrap());
        assert!(!sentence_level_filter(&[0.0, 1.0, 0.0], &[&a], 0.6).unwrap());
    }

    fn report_for(authors: &[&str]) -> (MatchReport, Vec<CommentRecord>) {
        let comments: Vec<CommentRecord> = authors
            .iter()
            .enumerate()
            .map(|(i, a)| comment(&format!("c{i}"), a, 0))
            .collect();
        let scores = vec![(0usize, 0.9); comments.len()];
        (report_from_scores(&comments, &scores, 0.6), comments)
    }

    #[test]
    fn concentration_single_author() {
        let (r, c) = report_for(&["solo", "solo", "solo"]);
        let u = user_concentration(&r, &c).unwrap();
        assert_eq!(u.users_for_half, 1);
        assert_eq!(u.user_fraction, 1.0);
        assert_eq!(u.curve[0].2, 1.0);
    }

    #[test]
    fn concentration_ten_authors() {
        let names: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (r, c) = report_for(&refs);
        let u = user_concentration(&r, &c).unwrap();
        assert_eq!(u.users_for_half, 5);
        assert_eq!(u.user_fraction, 0.5);
    }

    #[test]
    fn concentration_requires_matches() {
        let comments = vec![comment("a", "u", 0)];
        let r = report_from_scores(&comments, &[(0, 0.1)], 0.6);
        assert!(matches!(user_concentration(&r, &comments), Err(MatchError::NoMatches)));
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent_half_even(21_250, 53_569), "39.7");
        assert_eq!(percent_half_even(1, 8), "12.5");
        assert_eq!(percent_half_even(1, 16), "6.2"); // 6.25 -> even
        assert_eq!(percent_half_even(3, 16), "18.8"); // 18.75 -> even
        assert_eq!(percent_half_even(0, 0), "0.0");
    }

    fn labeled(topic: usize, n: usize, correct: usize) -> Vec<SampleRow> {
        (0..n)
            .map(|i| SampleRow {
                topic,
                comment_id: format!("t{topic}c{i}"),
                similarity: 0.7,
                body: "b".into(),
                verdict: Some(i < correct),
            })
            .collect()
    }

    #[test]
    fn precision_scores() {
        let s = score_precision(&labeled(1, 10, 9), None).unwrap();
        assert_abs_diff_eq!(s.overall, 90.0);
        assert!(matches!(score_precision(&[], None), Err(MatchError::UnlabeledRows(_))));
        let mut rows = labeled(1, 2, 2);
        rows[1].verdict = None;
        assert!(matches!(score_precision(&rows, None), Err(MatchError::UnlabeledRows(_))));
        let known = BTreeSet::from([1]);
        assert!(matches!(
            score_precision(&labeled(4, 1, 1), Some(&known)),
            Err(MatchError::UnknownTopicInLabels(4))
        ));
        let mut pooled = labeled(1, 4, 4);
        pooled.extend(labeled(2, 1, 0));
        let s = score_precision(&pooled, Some(&BTreeSet::from([1, 2]))).unwrap();
        assert_abs_diff_eq!(s.overall, 80.0);
        assert_eq!(s.per_topic[&2], (0, 1, 0.0));
    }

    #[test]
    fn sample_sheet_round_trip() {
        let comments: Vec<CommentRecord> = (0..30)
            .map(|i| CommentRecord {
                body: format!("says \"hi\", number {i}"),
                ..comment(&format!("c{i}"), "u", 0)
            })
            .collect();
        let scores: Vec<(usize, f64)> = (0..30).map(|i| (i % 15, 0.8)).collect();
        let report = report_from_scores(&comments, &scores, 0.6);
        let rows = precision_sample(&report, &comments, 3, 2, 5);
        let topics: BTreeSet<usize> = rows.iter().map(|r| r.topic).collect();
        assert_eq!(topics.len(), 5);
        assert_eq!(rows.len(), 10);
        assert_eq!(rows, precision_sample(&report, &comments, 3, 2, 5));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sample_csv(&rows, &p).unwrap();
        let back = read_sample_csv(&p).unwrap();
        assert_eq!(back, rows);
        assert!(matches!(score_precision(&back, None), Err(MatchError::UnlabeledRows(_))));
    }

    #[test]
    fn matches_csv_round_trip() {
        let comments = vec![comment("a,1", "u", 5), comment("b", "v", 6)];
        let report = report_from_scores(&comments, &[(2, 0.75), (0, 0.1)], 0.6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_matches_csv(&report, &comments, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("comment_id,community,author,created_utc,cluster,similarity,matched\n\"a,1\",russia,u,5,2,0.75,true\n"));
        assert_eq!(read_matches_csv(&p).unwrap(), report.results);
    }

    proptest! {
        #[test]
        fn thresholds_are_monotone_and_consistent(
            seeds in proptest::collection::vec(0u64..1000, 5..25),
        ) {
            let p = HashProvider::new(64, 1);
            let sentences = ["alpha beta gamma", "delta epsilon", "beta zeta eta", "theta iota kappa"];
            let x = embed_batch(&sentences, &p).unwrap();
            let labels = crate::cluster::ClusterLabels { labels: vec![0, 1, 0, 2], probabilities: vec![1.0; 4], n_clusters: 3 };
            let model = TopicModel::build(&sentences, &labels, &x).unwrap();
            let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "other"];
            let comments: Vec<CommentRecord> = seeds.iter().enumerate().map(|(i, s)| CommentRecord {
                body: (0..4).map(|k| words[((s >> k) as usize * 7 + k) % words.len()]).collect::<Vec<_>>().join(" "),
                ..comment(&format!("c{i}"), "u", 0)
            }).collect();
            let texts: Vec<&str> = comments.iter().map(|c| c.body.as_str()).collect();
            let emb = embed_batch(&texts, &p).unwrap();
            let sweep = sweep_thresholds(&comments, &emb, &model, &SWEEP_THRESHOLDS).unwrap();
            let mut prev: Option<BTreeSet<String>> = None;
            for (t, frac) in sweep {
                let r = match_corpus(&comments, &emb, &model, t).unwrap();
                prop_assert_eq!(r.mapped_fraction, frac);
                let set: BTreeSet<String> = r.results.iter().filter(|m| m.matched).map(|m| m.comment_id.clone()).collect();
                for m in &r.results {
                    prop_assert_eq!(m.matched, m.similarity >= t);
                }
                if let Some(p) = &prev { prop_assert!(set.is_subset(p)); }
                prev = Some(set);
            }
        }

        #[test]
        fn argmax_invariant_to_centroid_scaling(
            e in proptest::collection::vec(-1f32..1.0, 3),
            c in proptest::collection::vec(proptest::collection::vec(-1f32..1.0, 3), 1..5),
            scale in 0.1f32..10.0,
        ) {
            prop_assume!(crate::embed::norm(&e) > 1e-2 && c.iter().all(|v| crate::embed::norm(v) > 1e-2));
            let base: BTreeMap<usize, Vec<f32>> = c.iter().cloned().enumerate().collect();
            let mut scaled = base.clone();
            scaled.get_mut(&0).unwrap().iter_mut().for_each(|x| *x *= scale);
            let a = best_cluster(&e, &base).unwrap();
            let b = best_cluster(&e, &scaled).unwrap();
            prop_assume!(c.len() == 1 || {
                let mut s: Vec<f64> = base.values().map(|v| cosine(&e, v).unwrap()).collect();
                s.sort_by(|x, y| y.total_cmp(x));
                s[0] - s[1] > 1e-5
            });
            prop_assert_eq!(a.0, b.0);
        }
    }
}
