//! Stage orchestration with on-disk artifacts, digest-keyed caching and a
//! run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{assign_origins, build_spread_graph, comment_origin_attribution, domain_statistics, stats_csv};
use crate::cluster::{hdbscan, ClusterLabels, HdbscanParams};
use crate::corpus::{filter_comments, ingest_articles, ingest_comments, write_comments_jsonl, CommentRecord, SentenceRecord};
use crate::embed::{embed_batch, stable_hash, write_emb1, EmbeddingMatrix, EmbeddingProvider, FileProvider, HashProvider, DEFAULT_DIM};
use crate::matching::{
    percent_half_even, read_matches_csv, report_from_scores, score_comments, user_concentration, write_matches_csv,
    MatchReport, SWEEP_THRESHOLDS,
};
use crate::reduce::{umap_reduce, Coordinates, UmapParams};
use crate::text::sig6;
use crate::topics::{members_from_labels, TopicModel, TopicsFile};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST: &str = "run_manifest.json";

/// Artifact file names inside the output directory.
pub mod artifact {
    pub const ARTICLES: &str = "articles.jsonl";
    pub const SENTENCES: &str = "sentences.jsonl";
    pub const COMMENTS: &str = "comments.jsonl";
    pub const SENTENCE_EMB: &str = "sentence_embeddings.emb";
    pub const COMMENT_EMB: &str = "comment_embeddings.emb";
    pub const EMB_META: &str = "embeddings_meta.json";
    pub const COORDS_BIN: &str = "coordinates.bin";
    pub const COORDS_CSV: &str = "coordinates.csv";
    pub const LABELS: &str = "labels.csv";
    pub const TOPICS: &str = "topics.json";
    pub const MATCHES: &str = "matches.csv";
    pub const MATCH_SUMMARY: &str = "match_summary.json";
    pub const ORIGIN: &str = "origin_report.json";
    pub const GRAPH: &str = "spread_graph.dot";
    pub const STATS: &str = "stats.csv";
    pub const ATTRIBUTION: &str = "attribution.csv";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("artifact missing: {0} (run the producing stage first)")]
    ArtifactMissing(PathBuf),
    #[error("unsupported format `{format}` for {what}")]
    UnsupportedFormat { what: String, format: String },
    #[error("stage {stage} failed: {message}")]
    StageFailure { stage: String, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_) | PipelineError::UnsupportedFormat { .. } => 2,
            PipelineError::MissingInput(_) | PipelineError::ArtifactMissing(_) | PipelineError::StageFailure { .. } => 3,
            PipelineError::Io(_) => 4,
        }
    }
}

fn fail(stage: &str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError + '_ {
    move |e| PipelineError::StageFailure {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderConfig {
    Hash { dim: usize, seed: u64 },
    /// Precomputed vectors; comment vectors are needed only when matching.
    File { sentences: PathBuf, comments: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub articles: PathBuf,
    pub comments: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub provider: ProviderConfig,
    pub umap: UmapParams,
    pub hdbscan: HdbscanParams,
    pub threshold: f64,
    pub min_comment_words: usize,
    pub sample_sentences: usize,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "articles",
    "comments",
    "out_dir",
    "seed",
    "provider",
    "embed_dim",
    "embed_seed",
    "sentence_embeddings",
    "comment_embeddings",
    "n_neighbors",
    "n_components",
    "min_dist",
    "spread",
    "n_epochs",
    "negative_sample_rate",
    "min_cluster_size",
    "min_samples",
    "threshold",
    "min_comment_words",
    "sample_sentences",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse()
        .map_err(|_| PipelineError::ConfigInvalid(format!("`{key}`: cannot parse `{v}`")))
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Config, PipelineError> {
        let mut kv = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("line {}: expected `key = value`", idx + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(PipelineError::ConfigInvalid(format!("line {}: unknown key `{k}`", idx + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(PipelineError::ConfigInvalid(format!("line {}: duplicate key `{k}`", idx + 1)));
            }
        }
        Self::from_map(kv, base_dir)
    }

    pub fn load(path: &Path) -> Result<Config, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn from_map(kv: BTreeMap<String, String>, base_dir: &Path) -> Result<Config, PipelineError> {
        let get = |k: &str| kv.get(k).map(String::as_str);
        let path = |k: &str| get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let articles =
            path("articles").ok_or_else(|| PipelineError::ConfigInvalid("`articles` is required".into()))?;
        let defaults = UmapParams::default();
        let umap = UmapParams {
            n_neighbors: get("n_neighbors").map_or(Ok(defaults.n_neighbors), |v| parse_value("n_neighbors", v))?,
            n_components: get("n_components").map_or(Ok(defaults.n_components), |v| parse_value("n_components", v))?,
            min_dist: get("min_dist").map_or(Ok(defaults.min_dist), |v| parse_value("min_dist", v))?,
            spread: get("spread").map_or(Ok(defaults.spread), |v| parse_value("spread", v))?,
            n_epochs: get("n_epochs").map_or(Ok(defaults.n_epochs), |v| parse_value("n_epochs", v))?,
            negative_sample_rate: get("negative_sample_rate")
                .map_or(Ok(defaults.negative_sample_rate), |v| parse_value("negative_sample_rate", v))?,
            seed: defaults.seed,
        };
        let provider = match get("provider").unwrap_or("hash") {
            "hash" => ProviderConfig::Hash {
                dim: get("embed_dim").map_or(Ok(DEFAULT_DIM), |v| parse_value("embed_dim", v))?,
                seed: get("embed_seed").map_or(Ok(HashProvider::default().seed), |v| parse_value("embed_seed", v))?,
            },
            "file" => ProviderConfig::File {
                sentences: path("sentence_embeddings").ok_or_else(|| {
                    PipelineError::ConfigInvalid("provider = file needs `sentence_embeddings`".into())
                })?,
                comments: path("comment_embeddings"),
            },
            other => return Err(PipelineError::ConfigInvalid(format!("unknown provider `{other}`"))),
        };
        let cfg = Config {
            articles,
            comments: path("comments"),
            out_dir: path("out_dir").unwrap_or_else(|| PathBuf::from("out")),
            seed: get("seed").map_or(Ok(42), |v| parse_value("seed", v))?,
            provider,
            umap,
            hdbscan: HdbscanParams {
                min_cluster_size: get("min_cluster_size").map_or(Ok(10), |v| parse_value("min_cluster_size", v))?,
                min_samples: get("min_samples").map(|v| parse_value("min_samples", v)).transpose()?,
            },
            threshold: get("threshold").map_or(Ok(0.6), |v| parse_value("threshold", v))?,
            min_comment_words: get("min_comment_words").map_or(Ok(3), |v| parse_value("min_comment_words", v))?,
            sample_sentences: get("sample_sentences").map_or(Ok(5), |v| parse_value("sample_sentences", v))?,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::ConfigInvalid(m.to_string()));
        if self.umap.n_neighbors < 2 {
            return bad("n_neighbors must be at least 2");
        }
        if self.umap.n_components == 0 {
            return bad("n_components must be at least 1");
        }
        if self.umap.min_dist < 0.0 || self.umap.spread <= 0.0 {
            return bad("need min_dist >= 0 and spread > 0");
        }
        if self.hdbscan.min_cluster_size < 2 {
            return bad("min_cluster_size must be at least 2");
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [-1, 1]");
        }
        if let ProviderConfig::Hash { dim: 0, .. } = self.provider {
            return bad("embed_dim must be positive");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(name)
    }

    /// Seed of one stage: stable hash of its name XOR the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stable_hash(0, stage) ^ self.seed
    }

    /// Every effective setting, one sorted `key=value` per line.
    pub fn canonical(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("articles", self.articles.display().to_string());
        kv.insert("comments", self.comments.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv.insert("out_dir", self.out_dir.display().to_string());
        kv.insert("seed", self.seed.to_string());
        match &self.provider {
            ProviderConfig::Hash { dim, seed } => {
                kv.insert("provider", "hash".into());
                kv.insert("embed_dim", dim.to_string());
                kv.insert("embed_seed", seed.to_string());
            }
            ProviderConfig::File { sentences, comments } => {
                kv.insert("provider", "file".into());
                kv.insert("sentence_embeddings", sentences.display().to_string());
                kv.insert(
                    "comment_embeddings",
                    comments.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                );
            }
        }
        kv.insert("n_neighbors", self.umap.n_neighbors.to_string());
        kv.insert("n_components", self.umap.n_components.to_string());
        kv.insert("min_dist", format!("{:?}", self.umap.min_dist));
        kv.insert("spread", format!("{:?}", self.umap.spread));
        kv.insert("n_epochs", self.umap.n_epochs.to_string());
        kv.insert("negative_sample_rate", self.umap.negative_sample_rate.to_string());
        kv.insert("min_cluster_size", self.hdbscan.min_cluster_size.to_string());
        kv.insert("min_samples", self.hdbscan.min_samples().to_string());
        kv.insert("threshold", format!("{:?}", self.threshold));
        kv.insert("min_comment_words", self.min_comment_words.to_string());
        kv.insert("sample_sentences", self.sample_sentences.to_string());
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|_| PipelineError::ArtifactMissing(path.to_path_buf()))?;
    Ok(sha256_hex(&bytes))
}

fn now_rfc3339() -> String {
    let secs = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0);
    DateTime::from_timestamp(secs, 0).map(|t| t.to_rfc3339()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub input_digest: String,
    /// Input artifact → digest.
    pub inputs: BTreeMap<String, String>,
    /// Output artifact → digest.
    pub outputs: BTreeMap<String, String>,
    pub skipped: bool,
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn load(path: &Path) -> Option<RunManifest> {
        serde_json::from_slice(&fs::read(path).ok()?).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Embed,
    Reduce,
    Cluster,
    Keywords,
    Match,
    Analytics,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Reduce,
        Stage::Cluster,
        Stage::Keywords,
        Stage::Match,
        Stage::Analytics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Keywords => "keywords",
            Stage::Match => "match",
            Stage::Analytics => "analytics",
        }
    }
}

/// Runs stages against one config and records them in the manifest.
pub struct Pipeline {
    pub cfg: Config,
    previous: Option<RunManifest>,
    manifest: RunManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

impl Pipeline {
    pub fn new(cfg: Config) -> Result<Self, PipelineError> {
        fs::create_dir_all(cfg.out(""))?;
        let previous = RunManifest::load(&cfg.out(MANIFEST));
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.into(),
            config_hash: sha256_hex(cfg.canonical().as_bytes()),
            seed: cfg.seed,
            stages: previous.as_ref().map(|m| m.stages.clone()).unwrap_or_default(),
            started: now_rfc3339(),
            finished: String::new(),
        };
        Ok(Pipeline { cfg, previous, manifest })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn has_comments(&self) -> bool {
        self.cfg.comments.is_some()
    }

    /// External inputs, upstream artifacts and parameters of a stage.
    fn stage_inputs(&self, stage: Stage) -> (Vec<PathBuf>, Vec<&'static str>, String) {
        use artifact::*;
        let c = &self.cfg;
        let mut external = Vec::new();
        let mut upstream = Vec::new();
        let params = match stage {
            Stage::Ingest => {
                external.push(c.resolve(&c.articles));
                if let Some(p) = &c.comments {
                    external.push(c.resolve(p));
                }
                format!("min_comment_words={}", c.min_comment_words)
            }
            Stage::Embed => {
                upstream.push(SENTENCES);
                if self.has_comments() {
                    upstream.push(COMMENTS);
                }
                match &c.provider {
                    ProviderConfig::Hash { dim, seed } => format!("hash dim={dim} seed={seed}"),
                    ProviderConfig::File { sentences, comments } => {
                        external.push(c.resolve(sentences));
                        if let (Some(p), true) = (comments, self.has_comments()) {
                            external.push(c.resolve(p));
                        }
                        "file".into()
                    }
                }
            }
            Stage::Reduce => {
                upstream.extend([SENTENCE_EMB, EMB_META]);
                let u = &c.umap;
                format!(
                    "k={} d={} min_dist={:?} spread={:?} epochs={} neg={} seed={}",
                    u.n_neighbors,
                    u.n_components,
                    u.min_dist,
                    u.spread,
                    u.n_epochs,
                    u.negative_sample_rate,
                    c.stage_seed("reduce")
                )
            }
            Stage::Cluster => {
                upstream.push(COORDS_BIN);
                format!("mcs={} ms={}", c.hdbscan.min_cluster_size, c.hdbscan.min_samples())
            }
            Stage::Keywords => {
                upstream.extend([SENTENCES, LABELS, SENTENCE_EMB, EMB_META]);
                format!("samples={}", c.sample_sentences)
            }
            Stage::Match => {
                upstream.extend([COMMENTS, COMMENT_EMB, SENTENCE_EMB, EMB_META, LABELS]);
                format!("threshold={:?}", c.threshold)
            }
            Stage::Analytics => {
                upstream.extend([SENTENCES, LABELS]);
                if self.has_comments() {
                    upstream.push(MATCHES);
                }
                String::new()
            }
        };
        (external, upstream, params)
    }

    fn stage_outputs(&self, stage: Stage) -> Vec<&'static str> {
        use artifact::*;
        match stage {
            Stage::Ingest if self.has_comments() => vec![ARTICLES, SENTENCES, COMMENTS],
            Stage::Ingest => vec![ARTICLES, SENTENCES],
            Stage::Embed if self.has_comments() => vec![SENTENCE_EMB, COMMENT_EMB, EMB_META],
            Stage::Embed => vec![SENTENCE_EMB, EMB_META],
            Stage::Reduce => vec![COORDS_BIN, COORDS_CSV],
            Stage::Cluster => vec![LABELS],
            Stage::Keywords => vec![TOPICS],
            Stage::Match => vec![MATCHES, MATCH_SUMMARY],
            Stage::Analytics if self.has_comments() => vec![ORIGIN, GRAPH, STATS, ATTRIBUTION],
            Stage::Analytics => vec![ORIGIN, GRAPH, STATS],
        }
    }

    /// Stages of a full run; matching needs comments.
    pub fn planned_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| *s != Stage::Match || self.has_comments())
            .collect()
    }

    /// Runs one stage unless its inputs and outputs match the last record.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let started = now_rfc3339();
        let (external, upstream, params) = self.stage_inputs(stage);
        let mut inputs = BTreeMap::new();
        for p in &external {
            if !p.exists() {
                return Err(PipelineError::MissingInput(p.clone()));
            }
            inputs.insert(p.display().to_string(), file_digest(p)?);
        }
        for name in &upstream {
            inputs.insert(name.to_string(), file_digest(&self.cfg.out(name))?);
        }
        let seed = self.cfg.stage_seed(stage.name());
        let mut h = Sha256::new();
        h.update(format!("{TOOL_VERSION}\n{}\n{params}\nseed={seed}\n", stage.name()));
        for (k, v) in &inputs {
            // external inputs are keyed by content only, so moving a file
            // does not invalidate the cache
            let key = if upstream.contains(&k.as_str()) { k.as_str() } else { "external" };
            h.update(format!("{key}={v}\n"));
        }
        let input_digest = hex::encode(h.finalize());

        let outputs_now = |names: &[&str]| -> Option<BTreeMap<String, String>> {
            names
                .iter()
                .map(|n| file_digest(&self.cfg.out(n)).ok().map(|d| (n.to_string(), d)))
                .collect()
        };
        let names = self.stage_outputs(stage);
        let cached = self.previous.as_ref().and_then(|m| m.stage(stage.name())).filter(|rec| {
            rec.input_digest == input_digest && outputs_now(&names).as_ref() == Some(&rec.outputs)
        });
        let (outputs, skipped) = if let Some(rec) = cached {
            log::info!("{}: inputs unchanged, skipped", stage.name());
            (rec.outputs.clone(), true)
        } else {
            log::info!("{}: running", stage.name());
            self.execute(stage)?;
            let outputs = outputs_now(&names).ok_or_else(|| PipelineError::StageFailure {
                stage: stage.name().into(),
                message: "stage did not write all outputs".into(),
            })?;
            (outputs, false)
        };
        let rec = StageRecord {
            name: stage.name().into(),
            seed,
            input_digest,
            inputs,
            outputs,
            skipped,
            started,
            finished: now_rfc3339(),
        };
        match self.manifest.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(slot) => *slot = rec,
            None => self.manifest.stages.push(rec),
        }
        self.manifest.stages.sort_by_key(|s| Stage::ALL.iter().position(|x| x.name() == s.name));
        self.write_manifest()?;
        Ok(if skipped { StageOutcome::Skipped } else { StageOutcome::Ran })
    }

    fn write_manifest(&mut self) -> Result<(), PipelineError> {
        self.manifest.finished = now_rfc3339();
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        fs::write(self.cfg.out(MANIFEST), s)?;
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
        self.planned_stages()
            .into_iter()
            .map(|s| self.run_stage(s).map(|o| (s, o)))
            .collect()
    }

    fn execute(&self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Embed => self.embed(),
            Stage::Reduce => self.reduce(),
            Stage::Cluster => self.cluster(),
            Stage::Keywords => self.keywords(),
            Stage::Match => self.match_comments(),
            Stage::Analytics => self.analytics(),
        }
    }

    fn ingest(&self) -> Result<(), PipelineError> {
        let f = fail("ingest");
        let corpus = ingest_articles(&self.cfg.resolve(&self.cfg.articles)).map_err(|e| f(&e))?;
        corpus.write_jsonl(&self.cfg.out(artifact::ARTICLES)).map_err(|e| f(&e))?;
        write_jsonl(&self.cfg.out(artifact::SENTENCES), &corpus.sentences())?;
        if let Some(p) = &self.cfg.comments {
            let raw = ingest_comments(&self.cfg.resolve(p)).map_err(|e| f(&e))?;
            let kept = filter_comments(&raw, self.cfg.min_comment_words);
            log::info!("ingest: kept {} of {} comments", kept.len(), raw.len());
            write_comments_jsonl(&kept, &self.cfg.out(artifact::COMMENTS)).map_err(|e| f(&e))?;
        }
        Ok(())
    }

    fn embed(&self) -> Result<(), PipelineError> {
        let f = fail("embed");
        let sentences: Vec<SentenceRecord> = read_jsonl(&self.cfg.out(artifact::SENTENCES))?;
        let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
        let comments: Option<Vec<CommentRecord>> = if self.has_comments() {
            Some(read_jsonl(&self.cfg.out(artifact::COMMENTS))?)
        } else {
            None
        };
        let (sent, com) = match &self.cfg.provider {
            ProviderConfig::Hash { dim, seed } => {
                let p = HashProvider::new(*dim, *seed);
                let s = embed_batch(&texts, &p).map_err(|e| f(&e))?;
                let c = match &comments {
                    Some(cs) => Some(embed_comments(cs, &p).map_err(|e| f(&e))?),
                    None => None,
                };
                (s, c)
            }
            ProviderConfig::File { sentences: sp, comments: cp } => {
                let p = FileProvider::open(&self.cfg.resolve(sp)).map_err(|e| f(&e))?;
                let s = embed_batch(&texts, &p).map_err(|e| f(&e))?;
                let c = match (&comments, cp) {
                    (Some(cs), Some(cp)) => {
                        let pc = FileProvider::open(&self.cfg.resolve(cp)).map_err(|e| f(&e))?;
                        let mut m = embed_comments(cs, &pc).map_err(|e| f(&e))?;
                        // both files come from one external model
                        m.provider_id = s.provider_id.clone();
                        Some(m)
                    }
                    (Some(_), None) => return Err(f(&"comments configured without `comment_embeddings`")),
                    _ => None,
                };
                (s, c)
            }
        };
        write_emb1(&self.cfg.out(artifact::SENTENCE_EMB), sent.rows, sent.dim, &sent.data).map_err(|e| f(&e))?;
        if let Some(c) = &com {
            write_emb1(&self.cfg.out(artifact::COMMENT_EMB), c.rows, c.dim, &c.data).map_err(|e| f(&e))?;
        }
        let meta = EmbeddingMeta {
            provider_id: sent.provider_id.clone(),
            dim: sent.dim,
            sentence_rows: sent.rows,
            comment_rows: com.as_ref().map(|c| c.rows),
        };
        write_json(&self.cfg.out(artifact::EMB_META), &meta)
    }

    fn reduce(&self) -> Result<(), PipelineError> {
        let x = self.load_sentence_embeddings()?;
        let params = UmapParams {
            seed: self.cfg.stage_seed("reduce"),
            ..self.cfg.umap.clone()
        };
        let coords = umap_reduce(&x, &params).map_err(|e| fail("reduce")(&e))?;
        write_coordinates(&self.cfg.out(artifact::COORDS_BIN), &coords)?;
        coords.write_csv(&x.row_keys, &self.cfg.out(artifact::COORDS_CSV))?;
        Ok(())
    }

    fn cluster(&self) -> Result<(), PipelineError> {
        let coords = read_coordinates(&self.cfg.out(artifact::COORDS_BIN))?;
        let labels = hdbscan(&coords, &self.cfg.hdbscan).map_err(|e| fail("cluster")(&e))?;
        log::info!(
            "cluster: {} clusters, {:.1}% outliers",
            labels.n_clusters,
            100.0 * labels.outlier_fraction()
        );
        let keys: Vec<String> = (0..coords.rows).map(|i| i.to_string()).collect();
        labels.write_csv(&keys, &self.cfg.out(artifact::LABELS))?;
        Ok(())
    }

    fn keywords(&self) -> Result<(), PipelineError> {
        let sentences: Vec<SentenceRecord> = read_jsonl(&self.cfg.out(artifact::SENTENCES))?;
        let labels = read_labels(&self.cfg.out(artifact::LABELS))?;
        let x = self.load_sentence_embeddings()?;
        let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
        let model = TopicModel::build(&texts, &labels, &x).map_err(|e| fail("keywords")(&e))?;
        write_json(&self.cfg.out(artifact::TOPICS), &model.to_file(self.cfg.sample_sentences))
    }

    /// Topic model with centroids recomputed from the stored artifacts.
    pub fn load_model(&self) -> Result<TopicModel, PipelineError> {
        let labels = read_labels(&self.cfg.out(artifact::LABELS))?;
        let x = self.load_sentence_embeddings()?;
        let keywords = match fs::read(self.cfg.out(artifact::TOPICS)) {
            Ok(bytes) => serde_json::from_slice::<TopicsFile>(&bytes)
                .map_err(|e| fail("keywords")(&e))?
                .keywords(),
            Err(_) => BTreeMap::new(),
        };
        TopicModel::from_parts(&labels.labels, keywords, &x).map_err(|e| fail("keywords")(&e))
    }

    pub fn load_comments(&self) -> Result<(Vec<CommentRecord>, EmbeddingMatrix), PipelineError> {
        let comments: Vec<CommentRecord> = read_jsonl(&self.cfg.out(artifact::COMMENTS))?;
        let meta = self.load_meta()?;
        let emb = load_matrix(&self.cfg.out(artifact::COMMENT_EMB), &meta.provider_id)?;
        Ok((comments, emb))
    }

    fn match_comments(&self) -> Result<(), PipelineError> {
        let f = fail("match");
        let model = self.load_model()?;
        let (comments, emb) = self.load_comments()?;
        let scores = score_comments(&comments, &emb, &model).map_err(|e| f(&e))?;
        let report = report_from_scores(&comments, &scores, self.cfg.threshold);
        write_matches_csv(&report, &comments, &self.cfg.out(artifact::MATCHES))?;
        let sweep = SWEEP_THRESHOLDS
            .iter()
            .map(|&t| (format!("{t:?}"), sig6(report_from_scores(&comments, &scores, t).mapped_fraction)))
            .collect();
        let concentration = user_concentration(&report, &comments).ok();
        let summary = MatchSummary {
            threshold: report.threshold,
            comments: report.results.len(),
            matched: report.matched_count(),
            mapped_percent: report.mapped_percent(),
            sweep,
            per_cluster_counts: report.per_cluster_counts.clone(),
            per_day_counts: report.per_day_counts.iter().map(|(d, n)| (d.to_string(), *n)).collect(),
            per_community: report
                .per_community
                .iter()
                .map(|(k, v)| (k.clone(), (v.matched, v.total, percent_half_even(v.matched as u64, v.total as u64))))
                .collect(),
            users_for_half: concentration.as_ref().map(|c| c.users_for_half),
            user_fraction: concentration.as_ref().map(|c| sig6(c.user_fraction)),
        };
        write_json(&self.cfg.out(artifact::MATCH_SUMMARY), &summary)
    }

    /// Match report rebuilt from `matches.csv`.
    pub fn load_match_report(&self) -> Result<MatchReport, PipelineError> {
        let path = self.cfg.out(artifact::MATCHES);
        if !path.exists() {
            return Err(PipelineError::ArtifactMissing(path));
        }
        let comments: Vec<CommentRecord> = read_jsonl(&self.cfg.out(artifact::COMMENTS))?;
        let results = read_matches_csv(&path).map_err(|e| fail("match")(&e))?;
        if results.len() != comments.len() {
            return Err(fail("match")(&"matches.csv does not line up with comments.jsonl"));
        }
        let scores: Vec<(usize, f64)> = results.iter().map(|r| (r.cluster, r.similarity)).collect();
        let threshold = self.cfg.threshold;
        let mut report = report_from_scores(&comments, &scores, threshold);
        // keep the stored decisions in case the threshold was overridden
        for (r, stored) in report.results.iter_mut().zip(&results) {
            r.matched = stored.matched;
        }
        Ok(report)
    }

    fn analytics(&self) -> Result<(), PipelineError> {
        let sentences: Vec<SentenceRecord> = read_jsonl(&self.cfg.out(artifact::SENTENCES))?;
        let labels = read_labels(&self.cfg.out(artifact::LABELS))?;
        let (cluster_members, outlier_ids) = members_from_labels(&labels.labels);
        let model = TopicModel {
            cluster_members,
            keywords: BTreeMap::new(),
            centroids: BTreeMap::new(),
            outlier_ids,
            provider_id: String::new(),
            dim: 0,
        };
        let report = assign_origins(&model, &sentences);
        let matches = if self.has_comments() {
            Some(self.load_match_report()?)
        } else {
            None
        };
        fs::write(self.cfg.out(artifact::ORIGIN), report.to_json())?;
        fs::write(self.cfg.out(artifact::GRAPH), build_spread_graph(&report).to_dot())?;
        fs::write(
            self.cfg.out(artifact::STATS),
            stats_csv(&domain_statistics(&report, matches.as_ref())),
        )?;
        if let Some(m) = &matches {
            let mut s = String::from("domain,matched_comments\n");
            for (d, n) in comment_origin_attribution(&report, m) {
                s.push_str(&format!("{d},{n}\n"));
            }
            fs::write(self.cfg.out(artifact::ATTRIBUTION), s)?;
        }
        Ok(())
    }

    fn load_meta(&self) -> Result<EmbeddingMeta, PipelineError> {
        let path = self.cfg.out(artifact::EMB_META);
        let bytes = fs::read(&path).map_err(|_| PipelineError::ArtifactMissing(path))?;
        serde_json::from_slice(&bytes).map_err(|e| fail("embed")(&e))
    }

    pub fn load_sentence_embeddings(&self) -> Result<EmbeddingMatrix, PipelineError> {
        let meta = self.load_meta()?;
        load_matrix(&self.cfg.out(artifact::SENTENCE_EMB), &meta.provider_id)
    }
}

fn embed_comments(comments: &[CommentRecord], p: &dyn EmbeddingProvider) -> Result<EmbeddingMatrix, crate::embed::EmbedError> {
    let texts: Vec<&str> = comments.iter().map(|c| c.body.as_str()).collect();
    embed_batch(&texts, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub provider_id: String,
    pub dim: usize,
    pub sentence_rows: usize,
    pub comment_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub threshold: f64,
    pub comments: usize,
    pub matched: usize,
    pub mapped_percent: String,
    /// threshold → mapped fraction
    pub sweep: BTreeMap<String, f64>,
    pub per_cluster_counts: BTreeMap<usize, usize>,
    pub per_day_counts: BTreeMap<String, usize>,
    /// community → (matched, total, percent)
    pub per_community: BTreeMap<String, (usize, usize, String)>,
    pub users_for_half: Option<usize>,
    pub user_fraction: Option<f64>,
}

/// Stored vectors are already unit-norm, so they are taken as is.
fn load_matrix(path: &Path, provider_id: &str) -> Result<EmbeddingMatrix, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::ArtifactMissing(path.to_path_buf()));
    }
    let (rows, dim, data) = crate::embed::read_emb1(path).map_err(|e| fail("embed")(&e))?;
    Ok(EmbeddingMatrix {
        rows,
        dim,
        data,
        provider_id: provider_id.to_string(),
        row_keys: (0..rows).map(|i| i.to_string()).collect(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(|_| PipelineError::ArtifactMissing(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::StageFailure {
            stage: "load".into(),
            message: format!("{}:{}: {e}", path.display(), i + 1),
        })?);
    }
    Ok(out)
}

const COORDS_MAGIC: &[u8; 4] = b"CRD1";

/// `CRD1`, u32 LE rows, u32 LE dims, then f64 LE values row-major.
pub fn write_coordinates(path: &Path, c: &Coordinates) -> Result<(), PipelineError> {
    let mut bytes = Vec::with_capacity(12 + 8 * c.data.len());
    bytes.extend_from_slice(COORDS_MAGIC);
    bytes.extend_from_slice(&(c.rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(c.dims as u32).to_le_bytes());
    for v in &c.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_coordinates(path: &Path) -> Result<Coordinates, PipelineError> {
    let bytes = fs::read(path).map_err(|_| PipelineError::ArtifactMissing(path.to_path_buf()))?;
    let bad = || PipelineError::StageFailure {
        stage: "load".into(),
        message: format!("{} is not a coordinates file", path.display()),
    };
    if bytes.len() < 12 || &bytes[..4] != COORDS_MAGIC {
        return Err(bad());
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 8 * rows * dims {
        return Err(bad());
    }
    let data = bytes[12..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Coordinates { rows, dims, data })
}

/// Reads `labels.csv` back; probabilities keep their 6-digit rounding.
pub fn read_labels(path: &Path) -> Result<ClusterLabels, PipelineError> {
    let text = fs::read_to_string(path).map_err(|_| PipelineError::ArtifactMissing(path.to_path_buf()))?;
    let bad = |i: usize| PipelineError::StageFailure {
        stage: "load".into(),
        message: format!("{}:{}: bad label row", path.display(), i + 1),
    };
    let mut labels = Vec::new();
    let mut probabilities = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut f = line.split(',');
        let (_, l, p) = (f.next(), f.next(), f.next());
        labels.push(l.and_then(|v| v.parse::<i64>().ok()).ok_or_else(|| bad(i))?);
        probabilities.push(p.and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(i))?);
    }
    let n_clusters = labels
        .iter()
        .filter(|&&l| l >= 0)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    Ok(ClusterLabels {
        labels,
        probabilities,
        n_clusters,
    })
}
