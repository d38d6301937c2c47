//! Online leader clustering of embeddings, cluster labels, verdicts and the
//! size/lifespan analytics.
//!
//! An email joins the cluster whose leader (first member) is most similar, if
//! that similarity reaches `tau`; otherwise it starts a new cluster. Leaders
//! are scanned exhaustively, so assignment is exact and depends only on the
//! insertion order.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PISCOCLU" | version u16
//! dim u32 | backend_id str | next_id u64 | clusters u64
//! per cluster: id u64 | label u8 | first_seen i64 | last_seen i64 | leader dim x f32
//!              | members u64 | per member: email_id str | received_at i64 | score f64
//! checksum u64
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, Reader, Writer};
use crate::embed::{cosine_values, EmbeddingVector};

const MAGIC: &[u8; 8] = b"PISCOCLU";
const VERSION: u16 = 1;

pub type ClusterId = u64;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("email {0:?} is already assigned")]
    DuplicateId(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("tau must be in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("dimension mismatch: store has {expected}, vector has {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("backend mismatch: store has {expected:?}, vector has {got:?}")]
    BackendMismatch { expected: String, got: String },
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("corrupt cluster file: {0}")]
    CorruptFile(String),
}

impl ClusterError {
    pub fn kind(&self) -> &'static str {
        match self {
            ClusterError::DuplicateId(_) => "DuplicateId",
            ClusterError::UnknownCluster(_) => "UnknownCluster",
            ClusterError::InvalidTau(_) => "InvalidTau",
            ClusterError::DimMismatch { .. } => "DimMismatch",
            ClusterError::BackendMismatch { .. } => "BackendMismatch",
            ClusterError::IoFailure(_) => "IoFailure",
            ClusterError::CorruptFile(_) => "CorruptFile",
        }
    }
}

impl From<CodecError> for ClusterError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Io(e) => ClusterError::IoFailure(e),
            CodecError::Corrupt(m) => ClusterError::CorruptFile(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Spam,
    Clean,
    Unlabeled,
}

impl Label {
    fn code(self) -> u8 {
        match self {
            Label::Unlabeled => 0,
            Label::Spam => 1,
            Label::Clean => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Label::Unlabeled),
            1 => Some(Label::Spam),
            2 => Some(Label::Clean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Spam => "spam",
            Label::Clean => "clean",
            Label::Unlabeled => "unlabeled",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spam" => Ok(Label::Spam),
            "clean" => Ok(Label::Clean),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Spam,
    Clean,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub matched_cluster: Option<ClusterId>,
    /// Best similarity to any leader (0 on an empty store).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub email_id: String,
    pub received_at: i64,
    pub score_to_leader: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    pub cluster_id: ClusterId,
    pub leader: EmbeddingVector,
    pub members: Vec<Member>,
    pub first_seen: i64,
    pub last_seen: i64,
    pub label: Label,
}

impl ClusterRecord {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    /// `(cluster_size, cluster_count)`, ascending by size.
    pub buckets: Vec<(usize, usize)>,
    pub total_clusters: usize,
    /// Singleton clusters over all clusters; 0 when there are none.
    pub singleton_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifespanRow {
    pub cluster_id: ClusterId,
    pub first_seen: i64,
    pub last_seen: i64,
    pub lifespan_seconds: i64,
    pub member_count: usize,
}

/// Singleton clusters over total clusters, 0 when `total` is 0.
pub fn singleton_fraction(singletons: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        singletons as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStore {
    dim: usize,
    backend_id: String,
    clusters: Vec<ClusterRecord>,
    leader_zero: Vec<bool>,
    by_email: HashMap<String, ClusterId>,
    next_id: ClusterId,
}

impl ClusterStore {
    pub fn new(dim: usize, backend_id: impl Into<String>) -> Self {
        Self {
            dim,
            backend_id: backend_id.into(),
            clusters: Vec::new(),
            leader_zero: Vec::new(),
            by_email: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn email_count(&self) -> usize {
        self.by_email.len()
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn get(&self, id: ClusterId) -> Option<&ClusterRecord> {
        self.position(id).map(|i| &self.clusters[i])
    }

    pub fn cluster_of(&self, email_id: &str) -> Option<ClusterId> {
        self.by_email.get(email_id).copied()
    }

    fn position(&self, id: ClusterId) -> Option<usize> {
        // ids are assigned in increasing order and never removed
        self.clusters.binary_search_by_key(&id, |c| c.cluster_id).ok()
    }

    fn check_vec(&self, vec: &EmbeddingVector) -> Result<(), ClusterError> {
        if vec.dim() != self.dim {
            return Err(ClusterError::DimMismatch {
                expected: self.dim,
                got: vec.dim(),
            });
        }
        if vec.backend_id() != self.backend_id {
            return Err(ClusterError::BackendMismatch {
                expected: self.backend_id.clone(),
                got: vec.backend_id().to_string(),
            });
        }
        Ok(())
    }

    /// Best leader by similarity; ties go to the lowest cluster id.
    fn best_leader(&self, vec: &EmbeddingVector) -> Option<(usize, f64)> {
        let zero = vec.is_zero();
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.clusters.iter().enumerate() {
            let s = cosine_values(vec.values(), zero, c.leader.values(), self.leader_zero[i]);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best
    }

    /// Assigns an email to a cluster, creating one when no leader reaches `tau`.
    pub fn assign(
        &mut self,
        email_id: &str,
        vec: &EmbeddingVector,
        received_at: i64,
        tau: f64,
    ) -> Result<(ClusterId, f64), ClusterError> {
        check_tau(tau)?;
        self.check_vec(vec)?;
        if self.by_email.contains_key(email_id) {
            return Err(ClusterError::DuplicateId(email_id.to_string()));
        }
        if let Some((i, score)) = self.best_leader(vec).filter(|&(_, s)| s >= tau) {
            let c = &mut self.clusters[i];
            c.members.push(Member {
                email_id: email_id.to_string(),
                received_at,
                score_to_leader: score,
            });
            c.first_seen = c.first_seen.min(received_at);
            c.last_seen = c.last_seen.max(received_at);
            let id = c.cluster_id;
            self.by_email.insert(email_id.to_string(), id);
            return Ok((id, score));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.leader_zero.push(vec.is_zero());
        self.clusters.push(ClusterRecord {
            cluster_id: id,
            leader: vec.clone(),
            members: vec![Member {
                email_id: email_id.to_string(),
                received_at,
                score_to_leader: 1.0,
            }],
            first_seen: received_at,
            last_seen: received_at,
            label: Label::Unlabeled,
        });
        self.by_email.insert(email_id.to_string(), id);
        Ok((id, 1.0))
    }

    /// Sets a cluster label; the last write wins.
    pub fn label_cluster(&mut self, id: ClusterId, label: Label) -> Result<(), ClusterError> {
        let i = self.position(id).ok_or(ClusterError::UnknownCluster(id))?;
        self.clusters[i].label = label;
        Ok(())
    }

    /// Read-only verdict for `vec`. Fails only when the vector does not belong
    /// to this store's embedding space.
    pub fn verdict(&self, vec: &EmbeddingVector, tau: f64) -> Result<Verdict, ClusterError> {
        check_tau(tau)?;
        self.check_vec(vec)?;
        Ok(match self.best_leader(vec) {
            None => Verdict {
                decision: Decision::Unknown,
                matched_cluster: None,
                score: 0.0,
            },
            Some((i, score)) if score >= tau => {
                let c = &self.clusters[i];
                Verdict {
                    decision: match c.label {
                        Label::Spam => Decision::Spam,
                        Label::Clean => Decision::Clean,
                        Label::Unlabeled => Decision::Unknown,
                    },
                    matched_cluster: Some(c.cluster_id),
                    score,
                }
            }
            Some((_, score)) => Verdict {
                decision: Decision::Unknown,
                matched_cluster: None,
                score,
            },
        })
    }

    pub fn size_histogram(&self) -> SizeHistogram {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for c in &self.clusters {
            *counts.entry(c.size()).or_default() += 1;
        }
        let singletons = counts.get(&1).copied().unwrap_or(0);
        SizeHistogram {
            buckets: counts.into_iter().collect(),
            total_clusters: self.clusters.len(),
            singleton_fraction: singleton_fraction(singletons, self.clusters.len()),
        }
    }

    /// One row per cluster in id order.
    pub fn lifespan_stats(&self) -> Vec<LifespanRow> {
        self.clusters
            .iter()
            .map(|c| LifespanRow {
                cluster_id: c.cluster_id,
                first_seen: c.first_seen,
                last_seen: c.last_seen,
                lifespan_seconds: c.last_seen - c.first_seen,
                member_count: c.size(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.dim as u32);
        w.str(&self.backend_id);
        w.u64(self.next_id);
        w.u64(self.clusters.len() as u64);
        for c in &self.clusters {
            w.u64(c.cluster_id);
            w.u8(c.label.code());
            w.i64(c.first_seen);
            w.i64(c.last_seen);
            for &v in c.leader.values() {
                w.f32(v);
            }
            w.u64(c.members.len() as u64);
            for m in &c.members {
                w.str(&m.email_id);
                w.i64(m.received_at);
                w.f64(m.score_to_leader);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ClusterError> {
        let corrupt = |m: &str| ClusterError::CorruptFile(m.to_string());
        let mut r = Reader::open(bytes, MAGIC, VERSION)?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(corrupt("zero dimension"));
        }
        let backend_id = r.str()?;
        let next_id = r.u64()?;
        let n = r.count(8 + 1 + 16 + dim * 4 + 8)?;
        let mut store = ClusterStore::new(dim, backend_id.clone());
        let mut prev: ClusterId = 0;
        for _ in 0..n {
            let id = r.u64()?;
            if id <= prev || id >= next_id {
                return Err(corrupt("cluster ids out of order"));
            }
            prev = id;
            let label = Label::from_code(r.u8()?).ok_or_else(|| corrupt("bad label"))?;
            let first_seen = r.i64()?;
            let last_seen = r.i64()?;
            if first_seen > last_seen {
                return Err(corrupt("first_seen after last_seen"));
            }
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let v = r.f32()?;
                if !v.is_finite() {
                    return Err(corrupt("non-finite leader value"));
                }
                values.push(v);
            }
            let leader = EmbeddingVector::new(values, backend_id.clone())
                .map_err(|e| ClusterError::CorruptFile(format!("leader of cluster {id}: {e}")))?;
            let m = r.count(4 + 8 + 8)?;
            if m == 0 {
                return Err(corrupt("empty cluster"));
            }
            let mut members = Vec::with_capacity(m);
            for _ in 0..m {
                let email_id = r.str()?;
                let received_at = r.i64()?;
                let score_to_leader = r.f64()?;
                if !(received_at >= first_seen && received_at <= last_seen) || !score_to_leader.is_finite() {
                    return Err(corrupt("member outside cluster bounds"));
                }
                if store.by_email.insert(email_id.clone(), id).is_some() {
                    return Err(ClusterError::CorruptFile(format!("email {email_id:?} in two clusters")));
                }
                members.push(Member {
                    email_id,
                    received_at,
                    score_to_leader,
                });
            }
            store.leader_zero.push(leader.is_zero());
            store.clusters.push(ClusterRecord {
                cluster_id: id,
                leader,
                members,
                first_seen,
                last_seen,
                label,
            });
        }
        r.finish()?;
        store.next_id = next_id;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        codec::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

fn check_tau(tau: f64) -> Result<(), ClusterError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(ClusterError::InvalidTau(tau))
    }
}

fn utc(ts: i64) -> String {
    chrono::DateTime::from_timestamp(ts, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| ts.to_string())
}

/// `cluster_size,cluster_count` rows.
pub fn histogram_csv(h: &SizeHistogram) -> String {
    let mut out = String::from("cluster_size,cluster_count\n");
    for (size, count) in &h.buckets {
        let _ = writeln!(out, "{size},{count}");
    }
    out
}

/// `cluster_id,first_seen,last_seen,lifespan_seconds,member_count` rows,
/// timestamps as RFC 3339 UTC.
pub fn lifespan_csv(rows: &[LifespanRow]) -> String {
    let mut out = String::from("cluster_id,first_seen,last_seen,lifespan_seconds,member_count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.cluster_id,
            utc(r.first_seen),
            utc(r.last_seen),
            r.lifespan_seconds,
            r.member_count
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const B: &str = "t";

    fn v(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(raw, B)
    }

    #[test]
    fn first_and_identical() {
        let mut s = ClusterStore::new(3, B);
        assert_eq!(s.assign("a", &v(&[1.0, 0.0, 0.0]), 10, 0.9).unwrap(), (1, 1.0));
        let (id, score) = s.assign("b", &v(&[1.0, 0.0, 0.0]), 20, 0.9).unwrap();
        assert_eq!(id, 1);
        assert!((score - 1.0).abs() < 1e-12);
        assert!(matches!(
            s.assign("a", &v(&[0.0, 1.0, 0.0]), 30, 0.9),
            Err(ClusterError::DuplicateId(_))
        ));
        assert_eq!(s.email_count(), 2);
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let mut s = ClusterStore::new(2, B);
        s.assign("a", &v(&[1.0, 0.0]), 0, 0.99).unwrap();
        s.assign("b", &v(&[0.0, 1.0]), 0, 0.99).unwrap();
        // equidistant from both leaders
        let (id, _) = s.assign("c", &v(&[1.0, 1.0]), 0, 0.5).unwrap();
        assert_eq!(id, 1);
    }

    #[test]
    fn labels_and_verdicts() {
        let mut s = ClusterStore::new(2, B);
        let empty = s.verdict(&v(&[1.0, 0.0]), 0.9).unwrap();
        assert_eq!((empty.decision, empty.matched_cluster, empty.score), (Decision::Unknown, None, 0.0));
        assert!(matches!(s.label_cluster(99, Label::Spam), Err(ClusterError::UnknownCluster(99))));
        s.assign("a", &v(&[1.0, 0.0]), 0, 0.9).unwrap();
        let before = s.clone();
        assert_eq!(s.verdict(&v(&[1.0, 0.0]), 0.9).unwrap().decision, Decision::Unknown);
        s.label_cluster(1, Label::Spam).unwrap();
        let spam = s.verdict(&v(&[1.0, 0.0]), 0.9).unwrap();
        assert_eq!((spam.decision, spam.matched_cluster), (Decision::Spam, Some(1)));
        assert!((spam.score - 1.0).abs() < 1e-12);
        // cos 60 degrees = 0.5
        let far = s.verdict(&v(&[0.5, 0.75f64.sqrt()]), 0.9).unwrap();
        assert_eq!((far.decision, far.matched_cluster), (Decision::Unknown, None));
        assert!((far.score - 0.5).abs() < 1e-6);
        s.label_cluster(1, Label::Clean).unwrap();
        assert_eq!(s.get(1).unwrap().label, Label::Clean);
        assert_eq!(before.size_histogram(), s.size_histogram());
        assert!(matches!(
            s.verdict(&v(&[1.0, 0.0, 0.0]), 0.9),
            Err(ClusterError::DimMismatch { .. })
        ));
        assert!(matches!(s.verdict(&v(&[1.0, 0.0]), 0.0), Err(ClusterError::InvalidTau(_))));
    }

    fn five_cluster_fixture() -> ClusterStore {
        let mut s = ClusterStore::new(5, B);
        let sizes = [1, 1, 3, 4, 4];
        let mut t = 0;
        for (k, &n) in sizes.iter().enumerate() {
            let mut raw = [0.0; 5];
            raw[k] = 1.0;
            for j in 0..n {
                s.assign(&format!("e{k}-{j}"), &v(&raw), t, 0.9).unwrap();
                t += 100;
            }
        }
        s
    }

    #[test]
    fn histogram_fixture() {
        let s = five_cluster_fixture();
        let h = s.size_histogram();
        assert_eq!(h.buckets, vec![(1, 2), (3, 1), (4, 2)]);
        assert_eq!(h.total_clusters, 5);
        assert!((h.singleton_fraction - 0.4).abs() < 1e-12);
        assert_eq!(histogram_csv(&h), "cluster_size,cluster_count\n1,2\n3,1\n4,2\n");
        let empty = ClusterStore::new(5, B).size_histogram();
        assert_eq!((empty.buckets.len(), empty.total_clusters, empty.singleton_fraction), (0, 0, 0.0));
    }

    #[test]
    fn lifespans() {
        let mut s = ClusterStore::new(2, B);
        s.assign("a", &v(&[1.0, 0.0]), 400, 0.9).unwrap();
        s.assign("b", &v(&[1.0, 0.0]), 100, 0.9).unwrap();
        s.assign("c", &v(&[0.0, 1.0]), 50, 0.9).unwrap();
        let rows = s.lifespan_stats();
        assert_eq!(rows[0].lifespan_seconds, 300);
        assert_eq!((rows[0].first_seen, rows[0].last_seen), (100, 400));
        assert_eq!(rows[1].lifespan_seconds, 0);
        let csv = lifespan_csv(&rows);
        assert!(csv.starts_with("cluster_id,first_seen,last_seen,lifespan_seconds,member_count\n1,1970-01-01T00:01:40Z,1970-01-01T00:06:40Z,300,2\n"));
    }

    #[test]
    fn persistence_round_trip() {
        let mut s = five_cluster_fixture();
        s.label_cluster(3, Label::Spam).unwrap();
        let bytes = s.to_bytes();
        let back = ClusterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        for cut in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                ClusterStore::from_bytes(&bytes[..cut]),
                Err(ClusterError::CorruptFile(_))
            ));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pclu");
        s.save(&p).unwrap();
        assert_eq!(ClusterStore::load(&p).unwrap(), s);
        assert!(matches!(
            ClusterStore::load(&dir.path().join("missing")),
            Err(ClusterError::IoFailure(_))
        ));
    }

    fn replay(points: &[Vec<f64>], tau: f64) -> Vec<ClusterId> {
        let mut s = ClusterStore::new(points[0].len(), B);
        points
            .iter()
            .enumerate()
            .map(|(i, p)| s.assign(&format!("p{i}"), &v(p), i as i64, tau).unwrap().0)
            .collect()
    }

    #[test]
    fn three_blobs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..20 {
            for (c, center) in centers.iter().enumerate() {
                pts.push(center.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect::<Vec<f64>>());
                truth.push(c as u64 + 1);
            }
        }
        assert_eq!(replay(&pts, 0.9), truth);
    }

    proptest! {
        #[test]
        fn invariants(raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..40), tau in 0.3f64..1.0) {
            let mut s = ClusterStore::new(4, B);
            for (i, p) in raw.iter().enumerate() {
                s.assign(&format!("e{i}"), &v(p), (i as i64 * 37) % 11, tau).unwrap();
            }
            let h = s.size_histogram();
            prop_assert_eq!(h.buckets.iter().map(|b| b.1).sum::<usize>(), s.len());
            prop_assert_eq!(h.buckets.iter().map(|b| b.0 * b.1).sum::<usize>(), raw.len());
            for c in s.clusters() {
                prop_assert!(c.first_seen <= c.last_seen);
                prop_assert_eq!(c.members[0].score_to_leader, 1.0);
                for m in &c.members[1..] {
                    prop_assert!(m.score_to_leader >= tau);
                }
            }
            let again = replay(&raw, tau);
            let ids: Vec<ClusterId> = (0..raw.len()).map(|i| s.cluster_of(&format!("e{i}")).unwrap()).collect();
            prop_assert_eq!(ids, again);
            let before = s.to_bytes();
            let _ = s.verdict(&v(&raw[0]), tau).unwrap();
            prop_assert_eq!(before, s.to_bytes());
        }
    }
}
