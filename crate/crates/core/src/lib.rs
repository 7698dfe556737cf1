//! Sentence-level narrative analysis.
//!
//! The pipeline splits news articles into sentences, embeds them, reduces the
//! embeddings with UMAP, groups them with HDBSCAN into narrative clusters and
//! labels each cluster with class-based TF-IDF keywords. Short social-media
//! comments are then matched to clusters by centroid cosine similarity, and
//! the topic assignments feed origination, spread and statistics reports.
//!
//! Every stage is deterministic for a fixed seed.

pub mod analytics;
pub mod cluster;
pub mod corpus;
pub mod embed;
pub mod export;
pub mod matching;
pub mod pipeline;
pub mod reduce;
pub mod stats;
pub mod synth;
pub mod text;
pub mod topics;

pub use cluster::{hdbscan, ClusterLabels, HdbscanParams};
pub use corpus::{ArticleRecord, CommentRecord, Corpus, SentenceRecord};
pub use embed::{EmbeddingMatrix, EmbeddingProvider, FileProvider, HashProvider};
pub use matching::{MatchReport, MatchResult};
pub use reduce::{umap_reduce, Coordinates, UmapParams};
pub use topics::TopicModel;
