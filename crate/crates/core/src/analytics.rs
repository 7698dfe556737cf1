//! Topic origination, spread, the broadcaster/echoer graph, comment
//! attribution and the per-domain statistical tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::matching::MatchReport;
use crate::stats::{mann_whitney_u, pearson, StatResult, StatsError};
use crate::text::{fmt6, sig6};
use crate::topics::TopicModel;

/// Largest X in the spread CDF.
pub const SPREAD_CDF_MAX: usize = 9;
pub const FAMILY_ALPHA: f64 = 0.05;
pub const CORRELATION_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicOrigin {
    pub first_day: NaiveDate,
    pub originators: BTreeSet<String>,
    /// Containing articles per domain.
    pub articles_per_domain: BTreeMap<String, usize>,
    /// Earliest containing article per domain.
    pub first_day_per_domain: BTreeMap<String, NaiveDate>,
}

impl TopicOrigin {
    pub fn total_articles(&self) -> usize {
        self.articles_per_domain.values().sum()
    }

    pub fn origin_articles(&self) -> usize {
        self.originators.iter().map(|d| self.articles_per_domain[d]).sum()
    }

    /// Containing articles from domains outside the originators.
    pub fn external_articles(&self) -> usize {
        self.total_articles() - self.origin_articles()
    }

    /// Distinct non-originating domains with a containing article.
    pub fn spread(&self) -> usize {
        self.articles_per_domain.len() - self.originators.len()
    }

    /// Non-originating domains writing about the topic strictly after its
    /// first day.
    pub fn later_domains(&self) -> impl Iterator<Item = &String> {
        self.first_day_per_domain
            .iter()
            .filter(|(d, &day)| !self.originators.contains(*d) && day > self.first_day)
            .map(|(d, _)| d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainOrigin {
    pub origin_topic_count: usize,
    pub avg_origin_articles: f64,
    pub avg_non_origin_articles: f64,
    pub avg_external_articles_per_origin_topic: f64,
    /// Fraction of originating topics reaching at least X other domains,
    /// X = 0..=9. Empty when the domain originates nothing.
    pub spread_cdf: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginReport {
    pub topics: BTreeMap<usize, TopicOrigin>,
    pub domains: BTreeMap<String, DomainOrigin>,
}

fn mean(xs: &[usize]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<usize>() as f64 / xs.len() as f64
    }
}

/// Per-topic origins. An article contains a topic when at least one of its
/// sentences is in the cluster. `sentences` is indexed like the model rows.
pub fn assign_origins(model: &TopicModel, sentences: &[SentenceRecord]) -> OriginReport {
    let mut topics = BTreeMap::new();
    for (&topic, members) in &model.cluster_members {
        let mut articles: BTreeMap<&str, (&str, NaiveDate)> = BTreeMap::new();
        for &i in members {
            let s = &sentences[i];
            articles.insert(&s.article_url, (&s.domain, s.published));
        }
        let Some(first_day) = articles.values().map(|a| a.1).min() else {
            continue;
        };
        let mut articles_per_domain: BTreeMap<String, usize> = BTreeMap::new();
        let mut first_day_per_domain: BTreeMap<String, NaiveDate> = BTreeMap::new();
        for &(domain, day) in articles.values() {
            *articles_per_domain.entry(domain.to_string()).or_default() += 1;
            let e = first_day_per_domain.entry(domain.to_string()).or_insert(day);
            *e = (*e).min(day);
        }
        let originators = first_day_per_domain
            .iter()
            .filter(|(_, &d)| d == first_day)
            .map(|(d, _)| d.clone())
            .collect();
        topics.insert(
            topic,
            TopicOrigin {
                first_day,
                originators,
                articles_per_domain,
                first_day_per_domain,
            },
        );
    }
    let all_domains: BTreeSet<&str> = sentences.iter().map(|s| s.domain.as_str()).collect();
    let domains = all_domains
        .into_iter()
        .map(|d| (d.to_string(), spread_stats_for(&topics, d)))
        .collect();
    OriginReport { topics, domains }
}

fn spread_stats_for(topics: &BTreeMap<usize, TopicOrigin>, domain: &str) -> DomainOrigin {
    let mut origin_counts = Vec::new();
    let mut other_counts = Vec::new();
    let mut external = Vec::new();
    let mut spreads = Vec::new();
    for t in topics.values() {
        let Some(&own) = t.articles_per_domain.get(domain) else {
            continue;
        };
        if t.originators.contains(domain) {
            origin_counts.push(own);
            external.push(t.external_articles());
            spreads.push(t.spread());
        } else {
            other_counts.push(own);
        }
    }
    let spread_cdf = if spreads.is_empty() {
        Vec::new()
    } else {
        (0..=SPREAD_CDF_MAX)
            .map(|x| spreads.iter().filter(|&&s| s >= x).count() as f64 / spreads.len() as f64)
            .collect()
    };
    DomainOrigin {
        origin_topic_count: origin_counts.len(),
        avg_origin_articles: mean(&origin_counts),
        avg_non_origin_articles: mean(&other_counts),
        avg_external_articles_per_origin_topic: mean(&external),
        spread_cdf,
    }
}

/// Per-domain spread CDF and external-article averages.
pub fn spread_stats(report: &OriginReport) -> BTreeMap<String, DomainOrigin> {
    report
        .domains
        .keys()
        .map(|d| (d.clone(), spread_stats_for(&report.topics, d)))
        .collect()
}

impl OriginReport {
    /// Copy with every float rounded to 6 significant digits.
    pub fn rounded(&self) -> OriginReport {
        let mut out = self.clone();
        for d in out.domains.values_mut() {
            d.avg_origin_articles = sig6(d.avg_origin_articles);
            d.avg_non_origin_articles = sig6(d.avg_non_origin_articles);
            d.avg_external_articles_per_origin_topic = sig6(d.avg_external_articles_per_origin_topic);
            d.spread_cdf.iter_mut().for_each(|v| *v = sig6(*v));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.rounded()).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeClass {
    Broadcaster,
    Echoer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub domain: String,
    pub out_weight: usize,
    pub in_weight: usize,
    pub class: NodeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadGraph {
    /// Sorted by domain.
    pub nodes: Vec<GraphNode>,
    /// `(origin, receiver) → weight`.
    pub edges: BTreeMap<(String, String), usize>,
}

/// Edge `d → r` counts `d`'s originating topics that `r`, not itself an
/// originator, wrote about strictly after the first day.
pub fn build_spread_graph(report: &OriginReport) -> SpreadGraph {
    let mut edges: BTreeMap<(String, String), usize> = BTreeMap::new();
    for t in report.topics.values() {
        for r in t.later_domains() {
            for d in &t.originators {
                *edges.entry((d.clone(), r.clone())).or_default() += 1;
            }
        }
    }
    let mut out_w: BTreeMap<&str, usize> = BTreeMap::new();
    let mut in_w: BTreeMap<&str, usize> = BTreeMap::new();
    for ((d, r), &w) in &edges {
        *out_w.entry(d).or_default() += w;
        *in_w.entry(r).or_default() += w;
    }
    let nodes = report
        .domains
        .keys()
        .map(|d| {
            let out_weight = out_w.get(d.as_str()).copied().unwrap_or(0);
            let in_weight = in_w.get(d.as_str()).copied().unwrap_or(0);
            GraphNode {
                domain: d.clone(),
                out_weight,
                in_weight,
                class: if out_weight > in_weight {
                    NodeClass::Broadcaster
                } else {
                    NodeClass::Echoer
                },
            }
        })
        .collect();
    SpreadGraph { nodes, edges }
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

impl SpreadGraph {
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph spread {\n");
        for n in &self.nodes {
            let class = match n.class {
                NodeClass::Broadcaster => "broadcaster",
                NodeClass::Echoer => "echoer",
            };
            let _ = writeln!(
                s,
                "  {} [out_weight={}, in_weight={}, class={class}];",
                dot_id(&n.domain),
                n.out_weight,
                n.in_weight
            );
        }
        for ((d, r), w) in &self.edges {
            let _ = writeln!(s, "  {} -> {} [weight={w}];", dot_id(d), dot_id(r));
        }
        s.push_str("}\n");
        s
    }
}

/// Matched comments per originating domain. Co-originated clusters count
/// for every originator.
pub fn comment_origin_attribution(report: &OriginReport, matches: &MatchReport) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = report.domains.keys().map(|d| (d.clone(), 0)).collect();
    for (cluster, &count) in &matches.per_cluster_counts {
        if let Some(t) = report.topics.get(cluster) {
            for d in &t.originators {
                *out.entry(d.clone()).or_default() += count;
            }
        }
    }
    out
}

/// One line of `stats.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub test: String,
    pub subject: String,
    pub result: Result<StatResult, String>,
    pub alpha: f64,
    /// Report the statistic only when significant.
    pub suppress_insignificant: bool,
}

impl StatRow {
    fn new(test: &str, subject: &str, result: Result<StatResult, StatsError>, alpha: f64, suppress: bool) -> Self {
        let result = match result {
            Ok(r) | Err(StatsError::DegenerateSamples(r)) => Ok(r),
            Err(e) => Err(e.to_string()),
        };
        StatRow {
            test: test.into(),
            subject: subject.into(),
            result,
            alpha,
            suppress_insignificant: suppress,
        }
    }

    pub fn significant(&self) -> bool {
        matches!(&self.result, Ok(r) if r.p_value <= self.alpha)
    }

    fn csv_line(&self) -> String {
        match &self.result {
            Ok(r) => {
                let sig = self.significant();
                let statistic = if self.suppress_insignificant && !sig {
                    String::new()
                } else {
                    fmt6(r.statistic)
                };
                let decision = if sig { "significant" } else { "not_significant" };
                format!(
                    "{},{},{},{},{statistic},{},{},{decision}",
                    self.test,
                    self.subject,
                    r.n,
                    r.m,
                    fmt6(r.p_value),
                    fmt6(self.alpha)
                )
            }
            Err(reason) => format!(
                "{},{},,,,,{},skipped: {}",
                self.test,
                self.subject,
                fmt6(self.alpha),
                reason.replace(',', ";")
            ),
        }
    }
}

/// Per-domain rank-sum test of own articles on originated versus other
/// covered topics, at a Bonferroni-corrected level; per-domain correlation
/// of own versus external articles on originated topics; and, given
/// matches, article versus matched-comment correlations.
pub fn domain_statistics(report: &OriginReport, matches: Option<&MatchReport>) -> Vec<StatRow> {
    let mut rows = Vec::new();
    let n_domains = report.domains.len().max(1);
    let bonferroni = FAMILY_ALPHA / n_domains as f64;
    for domain in report.domains.keys() {
        let mut origin = Vec::new();
        let mut other = Vec::new();
        let mut external = Vec::new();
        for t in report.topics.values() {
            let Some(&own) = t.articles_per_domain.get(domain) else {
                continue;
            };
            if t.originators.contains(domain) {
                origin.push(own as f64);
                external.push(t.external_articles() as f64);
            } else {
                other.push(own as f64);
            }
        }
        rows.push(StatRow::new("mann_whitney_origin_vs_other", domain, mann_whitney_u(&origin, &other), bonferroni, false));
        rows.push(StatRow::new("pearson_own_vs_external", domain, pearson(&origin, &external), CORRELATION_ALPHA, true));
    }
    if let Some(m) = matches {
        let comments = |t: &usize| m.per_cluster_counts.get(t).copied().unwrap_or(0) as f64;
        let (x, y): (Vec<f64>, Vec<f64>) = report
            .topics
            .iter()
            .map(|(id, t)| (t.total_articles() as f64, comments(id)))
            .unzip();
        rows.push(StatRow::new("pearson_articles_vs_comments", "all", pearson(&x, &y), CORRELATION_ALPHA, true));
        for domain in report.domains.keys() {
            let (x, y): (Vec<f64>, Vec<f64>) = report
                .topics
                .iter()
                .map(|(id, t)| (t.articles_per_domain.get(domain).copied().unwrap_or(0) as f64, comments(id)))
                .unzip();
            rows.push(StatRow::new("pearson_articles_vs_comments", domain, pearson(&x, &y), CORRELATION_ALPHA, true));
        }
    }
    rows
}

pub fn stats_csv(rows: &[StatRow]) -> String {
    let mut s = String::from("test,subject,n,m,statistic,p_value,alpha,decision\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}
