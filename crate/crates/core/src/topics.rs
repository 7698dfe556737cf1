//! Class-based TF-IDF keywords per cluster and topic-quality metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterLabels;
use crate::embed::{cosine, embed_batch, EmbedError, EmbeddingMatrix, EmbeddingProvider};
use crate::matching::cluster_centroids;
use crate::text::{is_stopword, sig6, word_tokens};

pub const TOP_N: usize = 10;
pub const MIN_TERM_COUNT: u64 = 2;

#[derive(Debug, Error)]
pub enum TopicsError {
    #[error("unknown cluster {0}")]
    UnknownCluster(usize),
    #[error("topic {0} has fewer than 2 keywords")]
    TooFewKeywords(usize),
    #[error("no cluster with at least 2 members")]
    NoEligibleClusters,
    #[error("label count {labels} does not match {rows} rows")]
    LengthMismatch { labels: usize, rows: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub term: String,
    pub weight: f64,
}

/// Unigrams and bigrams of one text. Stopwords are removed first and
/// bigrams never bridge a removed word.
pub fn terms_of(text: &str) -> (Vec<String>, Vec<String>) {
    let mut unigrams = Vec::new();
    let mut bigrams = Vec::new();
    let mut prev: Option<String> = None;
    for tok in word_tokens(text) {
        if is_stopword(&tok) {
            prev = None;
            continue;
        }
        if let Some(p) = prev.take() {
            bigrams.push(format!("{p} {tok}"));
        }
        unigrams.push(tok.clone());
        prev = Some(tok);
    }
    (unigrams, bigrams)
}

/// Term counts per cluster and overall.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermStats {
    pub per_cluster: BTreeMap<usize, BTreeMap<String, u64>>,
    pub global: BTreeMap<String, u64>,
    /// Average retained term count per cluster.
    pub avg_tokens: f64,
}

impl TermStats {
    pub fn from_counts(per_cluster: BTreeMap<usize, BTreeMap<String, u64>>) -> Self {
        let mut global: BTreeMap<String, u64> = BTreeMap::new();
        for counts in per_cluster.values() {
            for (t, &c) in counts {
                *global.entry(t.clone()).or_default() += c;
            }
        }
        let total: u64 = global.values().sum();
        let avg_tokens = if per_cluster.is_empty() {
            0.0
        } else {
            total as f64 / per_cluster.len() as f64
        };
        TermStats {
            per_cluster,
            global,
            avg_tokens,
        }
    }
}

/// Counts unigrams and bigrams per cluster from `(cluster, text)` pairs and
/// drops terms seen fewer than `min_count` times overall.
pub fn build_vocabulary<'a>(docs: impl IntoIterator<Item = (usize, &'a str)>, min_count: u64) -> TermStats {
    let mut per_cluster: BTreeMap<usize, BTreeMap<String, u64>> = BTreeMap::new();
    let mut global: BTreeMap<String, u64> = BTreeMap::new();
    for (cluster, text) in docs {
        let counts = per_cluster.entry(cluster).or_default();
        let (uni, bi) = terms_of(text);
        for t in uni.into_iter().chain(bi) {
            *global.entry(t.clone()).or_default() += 1;
            *counts.entry(t).or_default() += 1;
        }
    }
    for counts in per_cluster.values_mut() {
        counts.retain(|t, _| global[t] >= min_count);
    }
    TermStats::from_counts(per_cluster)
}

/// Top keywords of `cluster` by `tf_tc · ln(1 + A / tf_t)`, ties broken
/// lexicographically.
pub fn ctfidf_keywords(stats: &TermStats, cluster: usize, top_n: usize) -> Result<Vec<Keyword>, TopicsError> {
    let counts = stats.per_cluster.get(&cluster).ok_or(TopicsError::UnknownCluster(cluster))?;
    let mut scored: Vec<Keyword> = counts
        .iter()
        .map(|(t, &tf)| Keyword {
            term: t.clone(),
            weight: tf as f64 * (1.0 + stats.avg_tokens / stats.global[t] as f64).ln(),
        })
        .collect();
    scored.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.term.cmp(&b.term)));
    scored.truncate(top_n);
    Ok(scored)
}

/// Clusters, their keywords and centroids over one sentence collection.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub cluster_members: BTreeMap<usize, Vec<usize>>,
    pub keywords: BTreeMap<usize, Vec<Keyword>>,
    pub centroids: BTreeMap<usize, Vec<f32>>,
    pub outlier_ids: Vec<usize>,
    pub provider_id: String,
    pub dim: usize,
}

pub fn members_from_labels(labels: &[i64]) -> (BTreeMap<usize, Vec<usize>>, Vec<usize>) {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut outliers = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            outliers.push(i);
        } else {
            members.entry(l as usize).or_default().push(i);
        }
    }
    (members, outliers)
}

impl TopicModel {
    /// Builds the model with freshly extracted keywords.
    pub fn build(texts: &[&str], labels: &ClusterLabels, x: &EmbeddingMatrix) -> Result<Self, TopicsError> {
        if texts.len() != labels.labels.len() || x.rows != texts.len() {
            return Err(TopicsError::LengthMismatch {
                labels: labels.labels.len(),
                rows: texts.len().max(x.rows),
            });
        }
        let stats = build_vocabulary(
            texts
                .iter()
                .zip(&labels.labels)
                .filter(|(_, &l)| l >= 0)
                .map(|(t, &l)| (l as usize, *t)),
            MIN_TERM_COUNT,
        );
        let mut keywords = BTreeMap::new();
        for &c in stats.per_cluster.keys() {
            keywords.insert(c, ctfidf_keywords(&stats, c, TOP_N)?);
        }
        Self::from_parts(&labels.labels, keywords, x)
    }

    /// Assembles a model from labels and known keywords; centroids are
    /// recomputed from `x`.
    pub fn from_parts(
        labels: &[i64],
        keywords: BTreeMap<usize, Vec<Keyword>>,
        x: &EmbeddingMatrix,
    ) -> Result<Self, TopicsError> {
        if labels.len() != x.rows {
            return Err(TopicsError::LengthMismatch {
                labels: labels.len(),
                rows: x.rows,
            });
        }
        let (cluster_members, outlier_ids) = members_from_labels(labels);
        let centroids = cluster_centroids(&cluster_members, x);
        Ok(TopicModel {
            cluster_members,
            keywords,
            centroids,
            outlier_ids,
            provider_id: x.provider_id.clone(),
            dim: x.dim,
        })
    }

    pub fn n_topics(&self) -> usize {
        self.cluster_members.len()
    }

    pub fn to_file(&self, samples: usize) -> TopicsFile {
        TopicsFile {
            topics: self
                .cluster_members
                .iter()
                .map(|(&id, members)| TopicEntry {
                    id,
                    size: members.len(),
                    keywords: self
                        .keywords
                        .get(&id)
                        .map(|ks| {
                            ks.iter()
                                .map(|k| Keyword {
                                    term: k.term.clone(),
                                    weight: sig6(k.weight),
                                })
                                .collect()
                        })
                        .unwrap_or_default(),
                    sample_sentence_ids: members.iter().take(samples).copied().collect(),
                })
                .collect(),
        }
    }
}

/// `topics.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicsFile {
    pub topics: Vec<TopicEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub id: usize,
    pub size: usize,
    pub keywords: Vec<Keyword>,
    pub sample_sentence_ids: Vec<usize>,
}

impl TopicsFile {
    pub fn keywords(&self) -> BTreeMap<usize, Vec<Keyword>> {
        self.topics.iter().map(|t| (t.id, t.keywords.clone())).collect()
    }
}

fn mean_pairwise_cosine(rows: &[&[f32]]) -> Result<f64, EmbedError> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += cosine(rows[i], rows[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 1.0 } else { sum / pairs as f64 })
}

/// Mean pairwise keyword similarity per topic, mapped to `[0, 1]`, averaged
/// over topics.
pub fn coherence(model: &TopicModel, provider: &dyn EmbeddingProvider) -> Result<f64, TopicsError> {
    let mut scores = Vec::new();
    for (&id, kws) in &model.keywords {
        if kws.len() < 2 {
            return Err(TopicsError::TooFewKeywords(id));
        }
        let terms: Vec<&str> = kws.iter().map(|k| k.term.as_str()).collect();
        let m = embed_batch(&terms, provider)?;
        let rows: Vec<&[f32]> = m.iter_rows().collect();
        scores.push((mean_pairwise_cosine(&rows)? + 1.0) / 2.0);
    }
    if scores.is_empty() {
        return Err(TopicsError::NoEligibleClusters);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Unique keyword terms over total keyword slots.
pub fn diversity(model: &TopicModel) -> f64 {
    let total: usize = model.keywords.values().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let unique: BTreeSet<&str> = model.keywords.values().flatten().map(|k| k.term.as_str()).collect();
    unique.len() as f64 / total as f64
}

/// Mean over clusters (with ≥ 2 members) of the mean pairwise cosine among
/// member embeddings.
///
/// Rows are unit vectors, so the pairwise mean is `(|Σv|² − m) / (m(m−1))`.
pub fn intra_cluster_similarity(model: &TopicModel, x: &EmbeddingMatrix) -> Result<f64, TopicsError> {
    let mut scores = Vec::new();
    for members in model.cluster_members.values() {
        let m = members.len();
        if m < 2 {
            continue;
        }
        let mut acc = vec![0f64; x.dim];
        let mut sq = 0.0;
        for &i in members {
            let row = x.row(i);
            let n2: f64 = row.iter().map(|&v| f64::from(v).powi(2)).sum();
            let inv = 1.0 / n2.sqrt();
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += f64::from(v) * inv;
            }
            sq += 1.0;
        }
        let total: f64 = acc.iter().map(|a| a * a).sum();
        scores.push((total - sq) / (m * (m - 1)) as f64);
    }
    if scores.is_empty() {
        return Err(TopicsError::NoEligibleClusters);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashProvider;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|&(t, c)| (t.to_string(), c)).collect()
    }

    fn two_cluster_stats() -> TermStats {
        TermStats::from_counts(BTreeMap::from([
            (1, counts(&[("nato", 2), ("biden", 1)])),
            (2, counts(&[("gas", 1), ("biden", 1)])),
        ]))
    }

    fn kw(terms: &[&str]) -> Vec<Keyword> {
        terms
            .iter()
            .map(|t| Keyword {
                term: t.to_string(),
                weight: 1.0,
            })
            .collect()
    }

    fn model_with_keywords(topics: Vec<Vec<Keyword>>) -> TopicModel {
        TopicModel {
            cluster_members: (0..topics.len()).map(|i| (i, vec![i])).collect(),
            keywords: topics.into_iter().enumerate().collect(),
            centroids: BTreeMap::new(),
            outlier_ids: vec![],
            provider_id: "t".into(),
            dim: 2,
        }
    }

    #[test]
    fn unigrams_and_bigrams() {
        let (u, b) = terms_of("NATO expands fast");
        assert_eq!(u, ["nato", "expands", "fast"]);
        assert_eq!(b, ["nato expands", "expands fast"]);
        let (u, b) = terms_of("the war");
        assert_eq!(u, ["war"]);
        assert!(b.is_empty());
        let (_, b) = terms_of("gas prices and the pipeline deal");
        assert_eq!(b, ["gas prices", "pipeline deal"]);
    }

    #[test]
    fn vocabulary_min_count_and_empty() {
        assert_eq!(build_vocabulary(std::iter::empty(), 2), TermStats::default());
        let s = build_vocabulary([(0, "nato expands"), (1, "nato retreats")], 2);
        assert_eq!(s.global, counts(&[("nato", 2)]));
        assert_eq!(s.per_cluster[&0], counts(&[("nato", 1)]));
    }

    #[test]
    fn ctfidf_hand_computed_weight() {
        let s = two_cluster_stats();
        assert_abs_diff_eq!(s.avg_tokens, 2.5);
        let kws = ctfidf_keywords(&s, 1, 10).unwrap();
        assert_eq!(kws[0].term, "nato");
        assert_abs_diff_eq!(kws[0].weight, 2.0 * 2.25f64.ln(), epsilon = 1e-12);
        // gas appears only in cluster 2, once
        let kws = ctfidf_keywords(&s, 2, 10).unwrap();
        let gas = kws.iter().find(|k| k.term == "gas").unwrap();
        assert_abs_diff_eq!(gas.weight, (1.0 + 2.5f64).ln(), epsilon = 1e-12);
        assert_eq!(kws.len(), 2);
        assert!(matches!(ctfidf_keywords(&s, 9, 10), Err(TopicsError::UnknownCluster(9))));
    }

    #[test]
    fn keyword_ties_break_lexicographically() {
        let s = TermStats::from_counts(BTreeMap::from([(0, counts(&[("zeta", 1), ("alpha", 1), ("mid", 1)]))]));
        let terms: Vec<_> = ctfidf_keywords(&s, 0, 10).unwrap().into_iter().map(|k| k.term).collect();
        assert_eq!(terms, ["alpha", "mid", "zeta"]);
    }

    #[test]
    fn diversity_examples() {
        let a: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
        let b: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
        let ar: Vec<&str> = a.iter().map(String::as_str).collect();
        let br: Vec<&str> = b.iter().map(String::as_str).collect();
        assert_eq!(diversity(&model_with_keywords(vec![kw(&ar), kw(&br)])), 1.0);
        assert_eq!(diversity(&model_with_keywords(vec![kw(&ar), kw(&ar)])), 0.5);
        assert_eq!(diversity(&model_with_keywords(vec![kw(&ar)])), 1.0);
    }

    struct TableProvider(BTreeMap<&'static str, Vec<f32>>);

    impl EmbeddingProvider for TableProvider {
        fn id(&self) -> String {
            "table".into()
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed_texts(&self, texts: &[&str]) -> Result<Vec<f32>, EmbedError> {
            Ok(texts.iter().flat_map(|t| self.0[t].clone()).collect())
        }
    }

    #[test]
    fn coherence_examples() {
        let p = TableProvider(BTreeMap::from([
            ("x", vec![1.0, 0.0]),
            ("x2", vec![2.0, 0.0]),
            ("y", vec![0.0, 1.0]),
        ]));
        assert_abs_diff_eq!(coherence(&model_with_keywords(vec![kw(&["x", "x2"])]), &p).unwrap(), 1.0);
        assert_abs_diff_eq!(coherence(&model_with_keywords(vec![kw(&["x", "y"])]), &p).unwrap(), 0.5);
        assert!(matches!(
            coherence(&model_with_keywords(vec![kw(&["x"])]), &p),
            Err(TopicsError::TooFewKeywords(0))
        ));
        let c = coherence(&model_with_keywords(vec![kw(&["x", "y"]), kw(&["x", "x2", "y"])]), &HashProvider::default()).unwrap();
        assert!((0.0..=1.0).contains(&c));
    }

    fn matrix(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_raw(rows.concat(), rows[0].len(), "t").unwrap()
    }

    #[test]
    fn intra_similarity_examples() {
        let x = matrix(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.5, 0.5]]);
        let mut m = model_with_keywords(vec![]);
        m.cluster_members = BTreeMap::from([(0, vec![0, 1])]);
        assert_abs_diff_eq!(intra_cluster_similarity(&m, &x).unwrap(), 1.0, epsilon = 1e-12);
        m.cluster_members = BTreeMap::from([(0, vec![1, 2])]);
        assert_abs_diff_eq!(intra_cluster_similarity(&m, &x).unwrap(), 0.0, epsilon = 1e-12);
        m.cluster_members = BTreeMap::from([(0, vec![4])]);
        assert!(matches!(intra_cluster_similarity(&m, &x), Err(TopicsError::NoEligibleClusters)));
    }

    #[test]
    fn intra_similarity_matches_pairwise_oracle() {
        let (texts, labels) = crate::synth::token_family_texts(3, 12, 9, 4, 4);
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let x = embed_batch(&refs, &HashProvider::default()).unwrap();
        let mut m = model_with_keywords(vec![]);
        m.cluster_members = members_from_labels(&labels).0;
        let mut per = Vec::new();
        for members in m.cluster_members.values() {
            let rows: Vec<&[f32]> = members.iter().map(|&i| x.row(i)).collect();
            per.push(mean_pairwise_cosine(&rows).unwrap());
        }
        let oracle = per.iter().sum::<f64>() / per.len() as f64;
        assert_abs_diff_eq!(intra_cluster_similarity(&m, &x).unwrap(), oracle, epsilon = 1e-9);
    }

    #[test]
    fn build_model_and_topics_file() {
        let texts = ["nato expands east", "nato expands again", "gas prices rise", "gas prices fall", "random"];
        let labels = ClusterLabels {
            labels: vec![0, 0, 1, 1, -1],
            probabilities: vec![1.0, 1.0, 1.0, 1.0, 0.0],
            n_clusters: 2,
        };
        let x = embed_batch(&texts, &HashProvider::default()).unwrap();
        let m = TopicModel::build(&texts, &labels, &x).unwrap();
        assert_eq!(m.outlier_ids, vec![4]);
        assert_eq!(m.keywords[&0][0].term, "expands");
        assert!(m.keywords.values().all(|k| k.len() <= TOP_N));
        assert!(!m.keywords.contains_key(&usize::MAX));
        let f = m.to_file(5);
        let json = serde_json::to_string(&f).unwrap();
        assert!(json.starts_with(r#"{"topics":[{"id":0,"size":2,"keywords":[{"term":"#));
        let back: TopicsFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn counts_reconcile_and_scaling_preserves_ranking(
            raw in proptest::collection::btree_map(0usize..4, proptest::collection::btree_map("[a-e]{1,2}", 1u64..6, 1..8), 1..4),
            k in 2u64..5,
        ) {
            let stats = TermStats::from_counts(raw.clone());
            for (t, &g) in &stats.global {
                let s: u64 = stats.per_cluster.values().filter_map(|c| c.get(t)).sum();
                prop_assert_eq!(s, g);
            }
            let scaled = TermStats::from_counts(raw.iter().map(|(&c, m)| (c, m.iter().map(|(t, &v)| (t.clone(), v * k)).collect())).collect());
            for &c in raw.keys() {
                let a = ctfidf_keywords(&stats, c, 10).unwrap();
                let b = ctfidf_keywords(&scaled, c, 10).unwrap();
                prop_assert!(a.iter().all(|kw| kw.weight >= 0.0));
                let ta: Vec<_> = a.iter().map(|kw| &kw.term).collect();
                let tb: Vec<_> = b.iter().map(|kw| &kw.term).collect();
                prop_assert_eq!(ta, tb);
            }
        }
    }
}
