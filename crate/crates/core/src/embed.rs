//! Embedding providers, the `EMB1` matrix file format and basic vector math.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::text::{is_stopword, word_tokens};

pub const DEFAULT_DIM: usize = 768;
const EMB1_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text at row {0} is empty")]
    EmptyText(usize),
    #[error("provider mismatch: {0}")]
    ProviderMismatch(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("centroid norm below 1e-8")]
    DegenerateCentroid,
    #[error("empty input")]
    EmptyInput,
    #[error("malformed EMB1 file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major matrix of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub provider_id: String,
    pub row_keys: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn with_row_keys(mut self, keys: Vec<String>) -> Result<Self, EmbedError> {
        if keys.len() != self.rows {
            return Err(EmbedError::ProviderMismatch(format!(
                "{} keys for {} rows",
                keys.len(),
                self.rows
            )));
        }
        self.row_keys = keys;
        Ok(self)
    }

    /// Builds a matrix from raw rows, normalizing each to unit length.
    pub fn from_raw(
        data: Vec<f32>,
        dim: usize,
        provider_id: impl Into<String>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(EmbedError::BadFile(format!("{} values not divisible by dim {dim}", data.len())));
        }
        let rows = data.len() / dim;
        let mut data = data;
        for row in data.chunks_exact_mut(dim) {
            normalize_in_place(row)?;
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            provider_id: provider_id.into(),
            row_keys: (0..rows).map(|i| i.to_string()).collect(),
        })
    }
}

fn normalize_in_place(row: &mut [f32]) -> Result<(), EmbedError> {
    let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector);
    }
    for x in row.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// Source of sentence/comment vectors. Implementations must be deterministic.
pub trait EmbeddingProvider: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Returns `texts.len() * dim()` values, row-major. Rows need not be
    /// normalized; [`embed_batch`] does that.
    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<f32>, EmbedError>;
}

/// Signed feature hashing of content tokens into `dim` buckets.
///
/// Texts that share tokens get correlated vectors, so cosine similarity
/// tracks lexical overlap. Stopwords are skipped unless a text has nothing
/// else.
#[derive(Debug, Clone)]
pub struct HashProvider {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashProvider {
    fn default() -> Self {
        HashProvider {
            dim: DEFAULT_DIM,
            seed: 0x5eed,
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Stable 64-bit hash of a string under a seed.
pub fn stable_hash(seed: u64, s: &str) -> u64 {
    fnv1a(seed, s.as_bytes())
}

impl HashProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashProvider { dim, seed }
    }

    fn add_token(&self, v: &mut [f32], token: &str) {
        let h = stable_hash(self.seed, token);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 40) & 1 == 1 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let all: Vec<String> = word_tokens(text).collect();
        let content: Vec<&String> = all.iter().filter(|t| !is_stopword(t)).collect();
        if !content.is_empty() {
            content.iter().for_each(|t| self.add_token(&mut v, t));
        } else {
            all.iter().for_each(|t| self.add_token(&mut v, t));
        }
        if v.iter().all(|&x| x == 0.0) {
            self.add_token(&mut v, &format!("\u{0}{}", text.trim().to_lowercase()));
        }
        v
    }
}

impl EmbeddingProvider for HashProvider {
    fn id(&self) -> String {
        format!("hash-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<f32>, EmbedError> {
        #[cfg(feature = "parallel")]
        let rows: Vec<Vec<f32>> = {
            use rayon::prelude::*;
            texts.par_iter().map(|t| self.embed_one(t)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let rows: Vec<Vec<f32>> = texts.iter().map(|t| self.embed_one(t)).collect();
        Ok(rows.concat())
    }
}

/// Precomputed vectors loaded from an `EMB1` file, consumed in row order.
#[derive(Debug, Clone)]
pub struct FileProvider {
    pub path: PathBuf,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FileProvider {
    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let (rows, dim, data) = read_emb1(path)?;
        Ok(FileProvider {
            path: path.to_path_buf(),
            rows,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl EmbeddingProvider for FileProvider {
    fn id(&self) -> String {
        let name = self
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("file:{name}")
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<f32>, EmbedError> {
        if texts.len() != self.rows {
            return Err(EmbedError::ProviderMismatch(format!(
                "{} holds {} rows but {} texts were given",
                self.path.display(),
                self.rows,
                texts.len()
            )));
        }
        Ok(self.data.clone())
    }
}

/// Embeds texts in order; every output row has unit L2 norm.
pub fn embed_batch(
    texts: &[&str],
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingMatrix, EmbedError> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbedError::EmptyText(i));
    }
    let dim = provider.dim();
    let raw = provider.embed_texts(texts)?;
    if raw.len() != texts.len() * dim {
        return Err(EmbedError::ProviderMismatch(format!(
            "provider returned {} values for {} rows of dim {dim}",
            raw.len(),
            texts.len()
        )));
    }
    let mut m = EmbeddingMatrix::from_raw(raw, dim, provider.id())?;
    m.rows = texts.len();
    Ok(m)
}

pub fn write_emb1(path: &Path, rows: usize, dim: usize, data: &[f32]) -> Result<(), EmbedError> {
    if data.len() != rows * dim {
        return Err(EmbedError::BadFile(format!("{} values for {rows}x{dim}", data.len())));
    }
    let rows32 = u32::try_from(rows).map_err(|_| EmbedError::BadFile("too many rows".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| EmbedError::BadFile("dim too large".into()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMB1_MAGIC)?;
    w.write_all(&rows32.to_le_bytes())?;
    w.write_all(&dim32.to_le_bytes())?;
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_emb1(path: &Path) -> Result<(usize, usize, Vec<f32>), EmbedError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_emb1(&bytes)
}

pub fn parse_emb1(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), EmbedError> {
    if bytes.len() < 12 || &bytes[..4] != EMB1_MAGIC {
        return Err(EmbedError::BadFile("missing EMB1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != rows * dim * 4 {
        return Err(EmbedError::BadFile(format!(
            "expected {} payload bytes, found {}",
            rows * dim * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
}

pub fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity, computed in double precision.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of rows. Not renormalized.
pub fn centroid(rows: &[&[f32]]) -> Result<Vec<f32>, EmbedError> {
    let first = rows.first().ok_or(EmbedError::EmptyInput)?;
    let dim = first.len();
    let mut acc = vec![0f64; dim];
    for r in rows {
        if r.len() != dim {
            return Err(EmbedError::DimMismatch(dim, r.len()));
        }
        for (a, &x) in acc.iter_mut().zip(r.iter()) {
            *a += f64::from(x);
        }
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    if mean.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-8 {
        return Err(EmbedError::DegenerateCentroid);
    }
    Ok(mean.into_iter().map(|x| x as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_texts_identical_rows() {
        let p = HashProvider::default();
        let m = embed_batch(&["nato expands east", "nato expands east"], &p).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.dim, 768);
        assert_eq!(m.rows, 2);
    }

    #[test]
    fn rows_are_unit_norm() {
        let p = HashProvider::default();
        let m = embed_batch(&["a b c", "the", "!!!", "Sanctions hit the economy hard"], &p).unwrap();
        for row in m.iter_rows() {
            assert_abs_diff_eq!(norm(row), 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn empty_text_rejected() {
        let p = HashProvider::default();
        assert!(matches!(embed_batch(&["ok", "  "], &p), Err(EmbedError::EmptyText(1))));
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-7);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EmbedError::ZeroVector)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(EmbedError::DimMismatch(1, 2))));
    }

    #[test]
    fn centroid_examples() {
        let u = [0.6f32, 0.8];
        assert_eq!(centroid(&[&u, &u]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(centroid(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            centroid(&[&[1.0, 0.0], &[-1.0, 0.0]]),
            Err(EmbedError::DegenerateCentroid)
        ));
        assert!(matches!(centroid(&[]), Err(EmbedError::EmptyInput)));
    }

    #[test]
    fn emb1_round_trip_and_file_provider() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.emb");
        write_emb1(&path, 2, 3, &[3.0, 0.0, 4.0, 0.0, 1.0, 0.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..12], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 12 + 24);

        let p = FileProvider::open(&path).unwrap();
        let m = embed_batch(&["x", "y"], &p).unwrap();
        assert_eq!(m.row(0), &[0.6, 0.0, 0.8]);
        assert!(matches!(embed_batch(&["x"], &p), Err(EmbedError::ProviderMismatch(_))));
    }

    #[test]
    fn truncated_emb1_rejected() {
        let mut bytes = b"EMB1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1f32.to_le_bytes());
        assert!(matches!(parse_emb1(&bytes), Err(EmbedError::BadFile(_))));
    }

    #[test]
    fn disjoint_token_texts_are_nearly_orthogonal() {
        let p = HashProvider::new(256, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total = 0.0;
        let pairs = 1000;
        for i in 0..pairs {
            let mk = |prefix: &str, rng: &mut ChaCha8Rng| {
                (0..rng.gen_range(3..10))
                    .map(|j| format!("{prefix}{i}w{j}x{}", rng.gen::<u32>()))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let a = mk("a", &mut rng);
            let b = mk("b", &mut rng);
            total += cosine(&p.embed_one(&a), &p.embed_one(&b)).unwrap().abs();
        }
        assert!(total / pairs as f64 <= 0.2, "mean |cos| = {}", total / pairs as f64);
    }

    #[test]
    fn embedding_order_independent_of_batching() {
        let p = HashProvider::default();
        let texts = ["alpha beta", "gamma", "delta epsilon zeta"];
        let all = embed_batch(&texts, &p).unwrap();
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(embed_batch(&[t], &p).unwrap().row(0), all.row(i));
        }
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(v in proptest::collection::vec(-10f32..10.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-3);
            prop_assert!((cosine(&v, &v).unwrap() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn cosine_scale_invariant(
            pair in (1usize..12).prop_flat_map(|d| (
                proptest::collection::vec(-5f32..5.0, d),
                proptest::collection::vec(-5f32..5.0, d),
            )),
            alpha in 0.01f32..100.0,
        ) {
            let (u, v) = pair;
            prop_assume!(norm(&u) > 1e-2 && norm(&v) > 1e-2);
            let scaled: Vec<f32> = u.iter().map(|x| x * alpha).collect();
            let a = cosine(&scaled, &v).unwrap();
            let b = cosine(&u, &v).unwrap();
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!((b - cosine(&v, &u).unwrap()).abs() <= 1e-12);
        }
    }
}
