//! Embedded vector index: exact flat scan or HNSW, cosine metric, with a
//! checksummed on-disk format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PISCOVEC" | version u16
//! dim u32 | backend_id str | metric u8 | kind u8 | M u32 | ef_construction u32 | ef_search u32 | seed u64
//! count u64 | count x id str | count x dim x f32
//! [hnsw only] entry u32 (u32::MAX = none) | per node: layers u8, per layer: n u32, n x u32
//! checksum u64
//! ```
//! `str` is a u32 byte length followed by UTF-8.

mod hnsw;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, Reader, Writer};
use crate::embed::{cosine_values, EmbeddingVector};
use hnsw::{HnswGraph, Scored, Visited};

const MAGIC: &[u8; 8] = b"PISCOVEC";
const VERSION: u16 = 1;
const NO_ENTRY: u32 = u32::MAX;
/// Upper bound for ef when a range query keeps widening.
pub const RANGE_EF_CAP: usize = 1024;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: index has {expected}, vector has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("backend mismatch: index has {expected:?}, vector has {got:?}")]
    BackendMismatch { expected: String, got: String },
    #[error("invalid index parameters: {0}")]
    InvalidParams(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    CorruptFile(String),
}

impl IndexError {
    pub fn kind(&self) -> &'static str {
        match self {
            IndexError::DuplicateId(_) => "DuplicateId",
            IndexError::DimMismatch { .. } => "DimMismatch",
            IndexError::BackendMismatch { .. } => "BackendMismatch",
            IndexError::InvalidParams(_) => "InvalidParams",
            IndexError::IoFailure(_) => "IoFailure",
            IndexError::CorruptFile(_) => "CorruptFile",
        }
    }
}

impl From<CodecError> for IndexError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io(io) => IndexError::IoFailure(io),
            CodecError::Corrupt(m) => IndexError::CorruptFile(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Hnsw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    /// Seeds level assignment.
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0x5eed_0f1e_a4e5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMeta {
    pub dim: usize,
    pub backend_id: String,
    pub metric: Metric,
    pub kind: IndexKind,
    pub hnsw: HnswParams,
}

impl IndexMeta {
    pub fn flat(dim: usize, backend_id: impl Into<String>) -> Self {
        Self {
            dim,
            backend_id: backend_id.into(),
            metric: Metric::Cosine,
            kind: IndexKind::Flat,
            hnsw: HnswParams::default(),
        }
    }

    pub fn hnsw(dim: usize, backend_id: impl Into<String>, params: HnswParams) -> Self {
        Self {
            kind: IndexKind::Hnsw,
            hnsw: params,
            ..Self::flat(dim, backend_id)
        }
    }

    fn validate(&self) -> Result<(), IndexError> {
        if self.dim == 0 {
            return Err(IndexError::InvalidParams("dim must be positive".into()));
        }
        let p = &self.hnsw;
        if p.m < 2 || p.m > 256 {
            return Err(IndexError::InvalidParams(format!("M must be in 2..=256, got {}", p.m)));
        }
        if p.ef_construction == 0 || p.ef_search == 0 {
            return Err(IndexError::InvalidParams("ef values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub email_id: String,
    pub score: f64,
}

/// Vector store with exact or HNSW search. Readers take `&self`; inserts need
/// `&mut self`, so a shared `RwLock` gives the many-readers/one-writer contract.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    meta: IndexMeta,
    ids: Vec<String>,
    lookup: HashMap<String, u32>,
    data: Vec<f32>,
    zero: Vec<bool>,
    graph: Option<HnswGraph>,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.ids == other.ids
            && self.data == other.data
            && self.graph == other.graph
    }
}

impl VectorIndex {
    pub fn new(meta: IndexMeta) -> Result<Self, IndexError> {
        meta.validate()?;
        let graph = (meta.kind == IndexKind::Hnsw).then(|| HnswGraph::new(meta.hnsw));
        Ok(Self {
            meta,
            ids: Vec::new(),
            lookup: HashMap::new(),
            data: Vec::new(),
            zero: Vec::new(),
            graph,
        })
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, email_id: &str) -> bool {
        self.lookup.contains_key(email_id)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Stored vector for `email_id`.
    pub fn get(&self, email_id: &str) -> Option<EmbeddingVector> {
        let &i = self.lookup.get(email_id)?;
        EmbeddingVector::new(self.row(i).to_vec(), self.meta.backend_id.clone()).ok()
    }

    fn row(&self, i: u32) -> &[f32] {
        let d = self.meta.dim;
        &self.data[i as usize * d..(i as usize + 1) * d]
    }

    fn score_nodes(&self, a: u32, b: u32) -> f64 {
        cosine_values(self.row(a), self.zero[a as usize], self.row(b), self.zero[b as usize])
    }

    fn check(&self, vec: &EmbeddingVector) -> Result<(), IndexError> {
        if vec.dim() != self.meta.dim {
            return Err(IndexError::DimMismatch {
                expected: self.meta.dim,
                got: vec.dim(),
            });
        }
        if vec.backend_id() != self.meta.backend_id {
            return Err(IndexError::BackendMismatch {
                expected: self.meta.backend_id.clone(),
                got: vec.backend_id().to_string(),
            });
        }
        Ok(())
    }

    /// Validates an insert without performing it.
    pub fn check_insert(&self, email_id: &str, vec: &EmbeddingVector) -> Result<(), IndexError> {
        self.check(vec)?;
        if self.lookup.contains_key(email_id) {
            return Err(IndexError::DuplicateId(email_id.to_string()));
        }
        if self.ids.len() >= NO_ENTRY as usize {
            return Err(IndexError::InvalidParams("index is full".into()));
        }
        Ok(())
    }

    pub fn insert(&mut self, email_id: &str, vec: &EmbeddingVector) -> Result<(), IndexError> {
        self.check_insert(email_id, vec)?;
        let node = self.ids.len() as u32;
        self.ids.push(email_id.to_string());
        self.lookup.insert(email_id.to_string(), node);
        self.data.extend_from_slice(vec.values());
        self.zero.push(vec.is_zero());
        if let Some(mut graph) = self.graph.take() {
            let mut visited = Visited::with_capacity(self.ids.len());
            let q_row = self.row(node);
            let q_zero = vec.is_zero();
            let sim_q = |n: u32| cosine_values(q_row, q_zero, self.row(n), self.zero[n as usize]);
            let pair = |a: u32, b: u32| self.score_nodes(a, b);
            graph.insert(node, &sim_q, &pair, &mut visited);
            self.graph = Some(graph);
        }
        Ok(())
    }

    fn to_hits(&self, mut scored: Vec<Scored>) -> Vec<Hit> {
        scored.sort_unstable_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| self.ids[a.node as usize].cmp(&self.ids[b.node as usize]))
        });
        scored
            .into_iter()
            .map(|s| Hit {
                email_id: self.ids[s.node as usize].clone(),
                score: s.score,
            })
            .collect()
    }

    fn scan(&self, query: &EmbeddingVector) -> Vec<Scored> {
        let q_zero = query.is_zero();
        (0..self.ids.len() as u32)
            .map(|n| Scored {
                score: cosine_values(query.values(), q_zero, self.row(n), self.zero[n as usize]),
                node: n,
            })
            .collect()
    }

    fn graph_search(&self, graph: &HnswGraph, query: &EmbeddingVector, ef: usize) -> Vec<Scored> {
        let q_zero = query.is_zero();
        let sim = |n: u32| cosine_values(query.values(), q_zero, self.row(n), self.zero[n as usize]);
        let mut visited = Visited::with_capacity(self.ids.len());
        graph.search(&sim, ef, &mut visited)
    }

    /// Top `k` hits by cosine, sorted by score descending then id ascending.
    /// Flat indexes are exact; HNSW searches with `ef = max(ef_search, k)`.
    pub fn search_knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, IndexError> {
        self.check(query)?;
        if k == 0 || self.is_empty() {
            return Ok(Vec::new());
        }
        let mut hits = match &self.graph {
            None => self.to_hits(self.scan(query)),
            Some(g) => self.to_hits(self.graph_search(g, query, self.meta.hnsw.ef_search.max(k))),
        };
        hits.truncate(k);
        Ok(hits)
    }

    /// Every hit with score >= `tau`, sorted like [`Self::search_knn`]. HNSW
    /// doubles ef while the whole beam is still above `tau`, up to
    /// [`RANGE_EF_CAP`].
    pub fn search_range(&self, query: &EmbeddingVector, tau: f64) -> Result<Vec<Hit>, IndexError> {
        self.check(query)?;
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let found = match &self.graph {
            None => self.scan(query),
            Some(g) => {
                let mut ef = self.meta.hnsw.ef_search;
                loop {
                    let beam = self.graph_search(g, query, ef);
                    let exhausted = beam.len() < ef;
                    let frontier_below = beam.last().map_or(true, |s| s.score < tau);
                    if exhausted || frontier_below || ef >= RANGE_EF_CAP {
                        break beam;
                    }
                    ef = (ef * 2).min(RANGE_EF_CAP);
                }
            }
        };
        Ok(self.to_hits(found.into_iter().filter(|s| s.score >= tau).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(m.dim as u32);
        w.str(&m.backend_id);
        w.u8(match m.metric {
            Metric::Cosine => 0,
        });
        w.u8(match m.kind {
            IndexKind::Flat => 0,
            IndexKind::Hnsw => 1,
        });
        w.u32(m.hnsw.m as u32);
        w.u32(m.hnsw.ef_construction as u32);
        w.u32(m.hnsw.ef_search as u32);
        w.u64(m.hnsw.seed);
        w.u64(self.ids.len() as u64);
        for id in &self.ids {
            w.str(id);
        }
        for &v in &self.data {
            w.f32(v);
        }
        if let Some(g) = &self.graph {
            w.u32(g.entry.unwrap_or(NO_ENTRY));
            for layers in &g.links {
                w.u8(layers.len() as u8);
                for list in layers {
                    w.u32(list.len() as u32);
                    for &n in list {
                        w.u32(n);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader::open(bytes, MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        let backend_id = r.str()?;
        let metric = match r.u8()? {
            0 => Metric::Cosine,
            other => return Err(IndexError::CorruptFile(format!("unknown metric {other}"))),
        };
        let kind = match r.u8()? {
            0 => IndexKind::Flat,
            1 => IndexKind::Hnsw,
            other => return Err(IndexError::CorruptFile(format!("unknown index kind {other}"))),
        };
        let hnsw = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            ef_search: r.u32()? as usize,
            seed: r.u64()?,
        };
        let meta = IndexMeta {
            dim,
            backend_id,
            metric,
            kind,
            hnsw,
        };
        meta.validate()
            .map_err(|e| IndexError::CorruptFile(e.to_string()))?;
        let count = r.count(4 + 4 * dim)?;
        let mut index = VectorIndex::new(meta)?;
        for i in 0..count {
            let id = r.str()?;
            if index.lookup.insert(id.clone(), i as u32).is_some() {
                return Err(IndexError::CorruptFile(format!("duplicate id {id:?}")));
            }
            index.ids.push(id);
        }
        index.data.reserve(count * dim);
        for _ in 0..count * dim {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(IndexError::CorruptFile("non-finite vector component".into()));
            }
            index.data.push(v);
        }
        for i in 0..count as u32 {
            let row = index.row(i);
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > 1e-5 {
                return Err(IndexError::CorruptFile(format!("vector {i} is not unit norm")));
            }
            index.zero.push(norm == 0.0);
        }
        if let Some(g) = index.graph.as_mut() {
            let entry = r.u32()?;
            g.entry = (entry != NO_ENTRY).then_some(entry);
            g.links.reserve(count);
            for _ in 0..count {
                let n_layers = r.u8()? as usize;
                let mut layers = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    let n = r.u32()? as usize;
                    if n.saturating_mul(4) > r.remaining() {
                        return Err(IndexError::CorruptFile("link list exceeds file".into()));
                    }
                    let mut list = Vec::with_capacity(n);
                    for _ in 0..n {
                        list.push(r.u32()?);
                    }
                    layers.push(list);
                }
                g.links.push(layers);
            }
            g.validate(count).map_err(IndexError::CorruptFile)?;
        }
        r.finish()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        codec::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        EmbeddingVector::normalized(&raw, "t")
    }

    fn build(kind: IndexKind, n: usize, dim: usize, seed: u64) -> (VectorIndex, Vec<EmbeddingVector>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = match kind {
            IndexKind::Flat => IndexMeta::flat(dim, "t"),
            IndexKind::Hnsw => IndexMeta::hnsw(dim, "t", HnswParams::default()),
        };
        let mut idx = VectorIndex::new(meta).unwrap();
        let vecs: Vec<_> = (0..n).map(|_| random_unit(&mut rng, dim)).collect();
        for (i, v) in vecs.iter().enumerate() {
            idx.insert(&format!("e{i:05}"), v).unwrap();
        }
        (idx, vecs)
    }

    #[test]
    fn insert_and_duplicate() {
        let mut idx = VectorIndex::new(IndexMeta::flat(8, "t")).unwrap();
        let v = EmbeddingVector::normalized(&[1.0; 8], "t");
        idx.insert("a", &v).unwrap();
        assert_eq!(idx.len(), 1);
        assert!(matches!(idx.insert("a", &v), Err(IndexError::DuplicateId(_))));
        assert!(matches!(
            idx.insert("b", &EmbeddingVector::zeros(9, "t")),
            Err(IndexError::DimMismatch { .. })
        ));
        assert!(matches!(
            idx.insert("b", &EmbeddingVector::zeros(8, "u")),
            Err(IndexError::BackendMismatch { .. })
        ));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn flat_self_query_and_truncation() {
        let (idx, vecs) = build(IndexKind::Flat, 50, 16, 1);
        let hits = idx.search_knn(&vecs[7], 1).unwrap();
        assert_eq!(hits[0].email_id, "e00007");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        let all = idx.search_knn(&vecs[0], 500).unwrap();
        assert_eq!(all.len(), 50);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_break_by_id() {
        let mut idx = VectorIndex::new(IndexMeta::flat(8, "t")).unwrap();
        let v = EmbeddingVector::normalized(&[1.0; 8], "t");
        for id in ["c", "a", "b"] {
            idx.insert(id, &v).unwrap();
        }
        let ids: Vec<_> = idx.search_knn(&v, 3).unwrap().into_iter().map(|h| h.email_id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::new(IndexMeta::hnsw(8, "t", HnswParams::default())).unwrap();
        let q = EmbeddingVector::normalized(&[1.0; 8], "t");
        assert!(idx.search_knn(&q, 5).unwrap().is_empty());
        assert!(idx.search_range(&q, -1.0).unwrap().is_empty());
    }

    #[test]
    fn range_full_and_exact() {
        let (idx, vecs) = build(IndexKind::Flat, 40, 16, 2);
        assert_eq!(idx.search_range(&vecs[3], -1.0).unwrap().len(), 40);
        let top = idx.search_range(&vecs[3], 1.0 - 1e-6).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].email_id, "e00003");
    }

    #[test]
    fn zero_vectors_follow_cosine_conventions() {
        let mut idx = VectorIndex::new(IndexMeta::flat(8, "t")).unwrap();
        idx.insert("z", &EmbeddingVector::zeros(8, "t")).unwrap();
        idx.insert("v", &EmbeddingVector::normalized(&[1.0; 8], "t")).unwrap();
        let hits = idx.search_knn(&EmbeddingVector::zeros(8, "t"), 2).unwrap();
        assert_eq!(hits[0], Hit { email_id: "z".into(), score: 1.0 });
        assert_eq!(hits[1].score, 0.0);
    }

    #[test]
    fn hnsw_small_recall() {
        let (idx, vecs) = build(IndexKind::Hnsw, 2000, 32, 3);
        let (flat, _) = build(IndexKind::Flat, 2000, 32, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hit = 0;
        for _ in 0..100 {
            let q = random_unit(&mut rng, 32);
            let truth: Vec<_> = flat.search_knn(&q, 10).unwrap().into_iter().map(|h| h.email_id).collect();
            let got = idx.search_knn(&q, 10).unwrap();
            hit += got.iter().filter(|h| truth.contains(&h.email_id)).count();
        }
        assert!(hit as f64 / 1000.0 >= 0.95, "recall {}", hit as f64 / 1000.0);
        // every stored vector is its own best match
        for (i, v) in vecs.iter().enumerate().step_by(97) {
            assert_eq!(idx.search_knn(v, 1).unwrap()[0].email_id, format!("e{i:05}"));
        }
    }

    #[test]
    fn hnsw_build_is_deterministic() {
        let (a, _) = build(IndexKind::Hnsw, 300, 16, 4);
        let (b, _) = build(IndexKind::Hnsw, 300, 16, 4);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn persistence_round_trip() {
        for kind in [IndexKind::Flat, IndexKind::Hnsw] {
            let (idx, vecs) = build(kind, 100, 16, 5);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.pvec");
            idx.save(&path).unwrap();
            let back = VectorIndex::load(&path).unwrap();
            assert_eq!(back, idx);
            for q in vecs.iter().take(20) {
                assert_eq!(back.search_knn(q, 5).unwrap(), idx.search_knn(q, 5).unwrap());
            }
        }
    }

    #[test]
    fn truncated_and_garbage_files_are_corrupt() {
        let (idx, _) = build(IndexKind::Hnsw, 30, 8, 6);
        let bytes = idx.to_bytes();
        for cut in [0, 5, 17, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                VectorIndex::from_bytes(&bytes[..cut]),
                Err(IndexError::CorruptFile(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[40] ^= 0xff;
        assert!(matches!(VectorIndex::from_bytes(&bad), Err(IndexError::CorruptFile(_))));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            VectorIndex::load(&dir.path().join("missing")),
            Err(IndexError::IoFailure(_))
        ));
    }

    #[test]
    fn invalid_params() {
        let mut meta = IndexMeta::hnsw(8, "t", HnswParams::default());
        meta.hnsw.m = 1;
        assert!(matches!(VectorIndex::new(meta), Err(IndexError::InvalidParams(_))));
    }

    #[test]
    fn get_returns_stored_vector() {
        let (idx, vecs) = build(IndexKind::Flat, 5, 8, 7);
        assert_eq!(idx.get("e00002").unwrap().values(), vecs[2].values());
        assert!(idx.get("nope").is_none());
        let _ = rand::thread_rng().gen::<u8>();
    }
}
