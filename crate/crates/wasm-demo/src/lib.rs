//! Browser bindings: cluster pasted sentences into a 2-D map, fit the
//! layout curve, and sweep the comment-matching threshold.

use std::collections::BTreeMap;

use narrative_core::embed::{embed_batch, EmbeddingMatrix};
use narrative_core::matching::best_cluster;
use narrative_core::reduce::{curve, curve_grid, fit_ab, target_curve};
use narrative_core::synth::token_family_texts;
use narrative_core::{hdbscan, umap_reduce, HashProvider, HdbscanParams, TopicModel, UmapParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DEMO_DIM: usize = 256;
const KEYWORDS_SHOWN: usize = 5;

#[derive(Serialize)]
struct Point {
    x: f64,
    y: f64,
    label: i64,
    text: String,
}

#[derive(Serialize)]
struct Topic {
    id: usize,
    size: usize,
    keywords: Vec<String>,
}

#[derive(Serialize)]
struct Layout {
    points: Vec<Point>,
    topics: Vec<Topic>,
    outlier_fraction: f64,
}

#[derive(Serialize)]
struct SweepRow {
    threshold: f64,
    matched: usize,
    per_topic: BTreeMap<usize, usize>,
}

fn lines(text: &str) -> Vec<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

fn provider() -> HashProvider {
    HashProvider::new(DEMO_DIM, HashProvider::default().seed)
}

/// One clustered sentence collection, kept so the sweep can reuse it.
#[wasm_bindgen]
pub struct Demo {
    sentences: Vec<String>,
    coords: Vec<[f64; 2]>,
    labels: Vec<i64>,
    model: TopicModel,
}

impl Demo {
    pub fn build(text: &str, n_neighbors: usize, min_cluster_size: usize, seed: u64) -> Result<Demo, String> {
        let sentences = lines(text);
        if sentences.len() <= n_neighbors {
            return Err(format!(
                "need more than {n_neighbors} sentences, got {}",
                sentences.len()
            ));
        }
        let x: EmbeddingMatrix = embed_batch(&sentences, &provider()).map_err(|e| e.to_string())?;
        let params = UmapParams {
            n_neighbors,
            n_components: 2,
            seed,
            ..UmapParams::default()
        };
        let c = umap_reduce(&x, &params).map_err(|e| e.to_string())?;
        let labels = hdbscan(&c, &HdbscanParams::with_min_cluster_size(min_cluster_size)).map_err(|e| e.to_string())?;
        let model = TopicModel::build(&sentences, &labels, &x).map_err(|e| e.to_string())?;
        Ok(Demo {
            sentences: sentences.iter().map(|s| s.to_string()).collect(),
            coords: (0..c.rows).map(|i| [c.row(i)[0], c.row(i)[1]]).collect(),
            labels: labels.labels,
            model,
        })
    }

    pub fn layout(&self) -> String {
        let points = self
            .coords
            .iter()
            .zip(&self.labels)
            .zip(&self.sentences)
            .map(|((p, &label), text)| Point {
                x: p[0],
                y: p[1],
                label,
                text: text.clone(),
            })
            .collect();
        let topics = self
            .model
            .cluster_members
            .iter()
            .map(|(&id, members)| Topic {
                id,
                size: members.len(),
                keywords: self
                    .model
                    .keywords
                    .get(&id)
                    .map(|k| k.iter().take(KEYWORDS_SHOWN).map(|k| k.term.clone()).collect())
                    .unwrap_or_default(),
            })
            .collect();
        let layout = Layout {
            points,
            topics,
            outlier_fraction: self.model.outlier_ids.len() as f64 / self.labels.len() as f64,
        };
        serde_json::to_string(&layout).expect("layout serializes")
    }

    /// Matched comment counts for thresholds `0, step, 2·step, …, 1`.
    pub fn sweep(&self, comments: &str, step: f64) -> Result<String, String> {
        if !(step > 0.0 && step <= 1.0) {
            return Err("step must lie in (0, 1]".into());
        }
        let comments = lines(comments);
        if comments.is_empty() {
            return Err("no comments".into());
        }
        let e = embed_batch(&comments, &provider()).map_err(|e| e.to_string())?;
        let best: Vec<(usize, f64)> = (0..e.rows)
            .map(|i| best_cluster(e.row(i), &self.model.centroids))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let steps = (1.0 / step).round() as usize;
        let rows: Vec<SweepRow> = (0..=steps)
            .map(|k| {
                let threshold = (k as f64 * step).min(1.0);
                let mut per_topic = BTreeMap::new();
                for &(c, s) in &best {
                    if s >= threshold {
                        *per_topic.entry(c).or_insert(0) += 1;
                    }
                }
                SweepRow {
                    threshold,
                    matched: per_topic.values().sum(),
                    per_topic,
                }
            })
            .collect();
        Ok(serde_json::to_string(&rows).expect("sweep serializes"))
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(text: &str, n_neighbors: usize, min_cluster_size: usize, seed: u32) -> Result<Demo, JsError> {
        Demo::build(text, n_neighbors, min_cluster_size, seed as u64).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = layoutJson)]
    pub fn layout_json(&self) -> String {
        self.layout()
    }

    #[wasm_bindgen(js_name = sweepJson)]
    pub fn sweep_json(&self, comments: &str, step: f64) -> Result<String, JsError> {
        self.sweep(comments, step).map_err(|e| JsError::new(&e))
    }
}

/// Fitted `(a, b)` plus target and fitted curves on the fitting grid.
pub fn curve_fit(min_dist: f64, spread: f64) -> Result<String, String> {
    let fit = fit_ab(min_dist, spread).map_err(|e| e.to_string())?;
    let samples: Vec<[f64; 3]> = curve_grid(spread)
        .into_iter()
        .map(|d| [d, target_curve(d, min_dist, spread), curve(d, fit.a, fit.b)])
        .collect();
    Ok(serde_json::json!({
        "a": fit.a,
        "b": fit.b,
        "rms": fit.rms,
        "max_abs_error": fit.max_abs_error,
        "samples": samples,
    })
    .to_string())
}

#[wasm_bindgen(js_name = fitCurveJson)]
pub fn fit_curve_json(min_dist: f64, spread: f64) -> Result<String, JsError> {
    curve_fit(min_dist, spread).map_err(|e| JsError::new(&e))
}

/// Pseudo-word sentences from `families` separate vocabularies, one per line.
#[wasm_bindgen(js_name = sampleSentences)]
pub fn sample_sentences(families: usize, per_family: usize, seed: u32) -> String {
    let (texts, _) = token_family_texts(families.max(1), per_family.max(1), 12, 5, seed as u64);
    texts.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_sample_families() {
        let text = sample_sentences(3, 40, 9);
        let demo = Demo::build(&text, 10, 10, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&demo.layout()).unwrap();
        assert_eq!(v["points"].as_array().unwrap().len(), 120);
        assert_eq!(v["topics"].as_array().unwrap().len(), 3);
        assert!(v["outlier_fraction"].as_f64().unwrap() < 0.2);
    }

    #[test]
    fn sweep_is_monotone() {
        let text = sample_sentences(2, 30, 4);
        let demo = Demo::build(&text, 8, 8, 2).unwrap();
        let comments: Vec<&str> = text.lines().step_by(7).collect();
        let rows: Vec<serde_json::Value> =
            serde_json::from_str(&demo.sweep(&comments.join("\n"), 0.1).unwrap()).unwrap();
        assert_eq!(rows.len(), 11);
        let counts: Vec<u64> = rows.iter().map(|r| r["matched"].as_u64().unwrap()).collect();
        assert_eq!(counts[0], comments.len() as u64);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert!(demo.sweep("x", 0.0).is_err());
    }

    #[test]
    fn curve_fit_reports_samples() {
        let v: serde_json::Value = serde_json::from_str(&curve_fit(0.1, 1.0).unwrap()).unwrap();
        assert!(v["a"].as_f64().unwrap() > 0.0);
        assert_eq!(v["samples"].as_array().unwrap().len(), 300);
        assert!(curve_fit(0.1, 0.0).is_err());
    }

    #[test]
    fn too_few_sentences() {
        assert!(Demo::build("one\ntwo", 5, 5, 0).is_err());
    }
}
