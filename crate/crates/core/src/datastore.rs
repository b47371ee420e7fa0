//! kNN policy datastore: query embeddings labeled with the source that
//! served them best, searched exhaustively by cosine similarity.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "SRPD" | version u32 = 1 | dim u32 | count u64
//! token table: u16 n, then n × (u16 byte length, UTF-8 bytes)
//! count × entry: id u64 | label u16 | meta_len u32 | meta bytes | dim × f32
//! CRC32 (IEEE) of every preceding byte, u32
//! ```

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbeddingClient, SourceDist};
use crate::prompt::routing_prefix;
use crate::registry::SourceRegistry;

pub const MAGIC: &[u8; 4] = b"SRPD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("vector has {got} dimensions, datastore expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {0} is not a registered source")]
    UnknownLabel(String),
    #[error("no entry with id {0}")]
    UnknownId(u64),
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("datastore is empty")]
    EmptyStore,
    #[error("cannot normalize a zero or non-finite vector")]
    ZeroVector,
    #[error("rollout for {query:?}: {reason}")]
    BadRollout { query: String, reason: String },
    #[error("datastore tokens {store:?} do not match registry {registry:?}")]
    TokenTableMismatch { store: Vec<String>, registry: Vec<String> },
    #[error("embedding failed: {0}")]
    Embedding(#[from] BackendError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy datastore file (bad magic)")]
    BadMagic,
    #[error("unsupported datastore format version {0}")]
    VersionMismatch(u32),
    #[error("datastore checksum mismatch")]
    ChecksumMismatch,
    #[error("datastore file is truncated")]
    Truncated,
    #[error("datastore file is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub id: u64,
    pub key: Vec<f32>,
    pub label: u16,
    pub meta: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub similarity: f64,
    pub label: u16,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub neighbors: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

/// One QA pair evaluated under every source: the best answer
/// log-likelihood each source achieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query: String,
    #[serde(default)]
    pub answer: String,
    pub logliks: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<String>,
}

/// L2-normalizes `v`, computing in f64.
pub fn normalize(v: &[f32]) -> Result<Vec<f64>, DatastoreError> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(DatastoreError::ZeroVector);
    }
    Ok(v.iter().map(|x| f64::from(*x) / norm).collect())
}

fn by_similarity(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDatastore {
    dim: usize,
    tokens: Vec<String>,
    entries: Vec<PolicyEntry>,
    next_id: u64,
}

impl PolicyDatastore {
    pub fn new(dim: usize, tokens: Vec<String>) -> Self {
        PolicyDatastore {
            dim,
            tokens,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    pub fn for_registry(dim: usize, registry: &SourceRegistry) -> Self {
        Self::new(dim, registry.token_list())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&PolicyEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn label_token(&self, label: u16) -> Option<&str> {
        self.tokens.get(label as usize).map(String::as_str)
    }

    pub fn label_of(&self, token: &str) -> Option<u16> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u16)
    }

    /// Errors unless the token table equals the registry order.
    pub fn check_registry(&self, registry: &SourceRegistry) -> Result<(), DatastoreError> {
        if registry.tokens().eq(self.tokens.iter().map(String::as_str)) {
            Ok(())
        } else {
            Err(DatastoreError::TokenTableMismatch {
                store: self.tokens.clone(),
                registry: registry.token_list(),
            })
        }
    }

    /// Appends a pre-computed key; returns the new entry id.
    pub fn insert_vector(&mut self, key: &[f32], label: &str, meta: Option<String>) -> Result<u64, DatastoreError> {
        let label = self
            .label_of(label)
            .ok_or_else(|| DatastoreError::UnknownLabel(label.to_string()))?;
        self.insert_labeled(key, label, meta)
    }

    fn insert_labeled(&mut self, key: &[f32], label: u16, meta: Option<String>) -> Result<u64, DatastoreError> {
        if key.len() != self.dim {
            return Err(DatastoreError::DimensionMismatch {
                expected: self.dim,
                got: key.len(),
            });
        }
        let key = normalize(key)?.into_iter().map(|x| x as f32).collect();
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(PolicyEntry {
            id,
            key,
            label,
            meta: meta.filter(|m| !m.is_empty()),
        });
        Ok(id)
    }

    /// Embeds `key_text` and appends it under `label`.
    pub fn upsert_entry(
        &mut self,
        key_text: &str,
        label: &str,
        meta: Option<String>,
        embed: &EmbeddingClient,
    ) -> Result<u64, DatastoreError> {
        if self.label_of(label).is_none() {
            return Err(DatastoreError::UnknownLabel(label.to_string()));
        }
        let key = embed.embed_query(key_text)?;
        self.insert_vector(&key, label, meta)
    }

    pub fn remove_entry(&mut self, id: u64) -> Result<(), DatastoreError> {
        let idx = self
            .entries
            .binary_search_by_key(&id, |e| e.id)
            .map_err(|_| DatastoreError::UnknownId(id))?;
        self.entries.remove(idx);
        Ok(())
    }

    /// Exact top-`k` by cosine similarity, ties broken by ascending id.
    pub fn knn_search(&self, query: &[f32], k: usize) -> Result<NeighborSet, DatastoreError> {
        if query.len() != self.dim {
            return Err(DatastoreError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let q = normalize(query)?;
        let mut scored: Vec<Neighbor> = self
            .entries
            .iter()
            .map(|e| {
                let dot: f64 = e.key.iter().zip(&q).map(|(k, q)| f64::from(*k) * q).sum();
                Neighbor {
                    id: e.id,
                    similarity: dot.clamp(-1.0, 1.0),
                    label: e.label,
                }
            })
            .collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(NeighborSet::default());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_similarity);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_similarity);
        Ok(NeighborSet { neighbors: scored })
    }

    /// Label frequencies among `neighbors`, over every token in the table.
    pub fn neighbor_distribution(&self, neighbors: &NeighborSet) -> Result<SourceDist, DatastoreError> {
        if neighbors.is_empty() {
            return Err(DatastoreError::EmptyNeighborSet);
        }
        let mut counts = vec![0usize; self.tokens.len()];
        for n in &neighbors.neighbors {
            let slot = counts
                .get_mut(n.label as usize)
                .ok_or_else(|| DatastoreError::Corrupt(format!("label {} out of range", n.label)))?;
            *slot += 1;
        }
        let total = neighbors.len() as f64;
        Ok(self
            .tokens
            .iter()
            .zip(counts)
            .map(|(t, c)| (t.clone(), c as f64 / total))
            .collect())
    }

    pub fn label_histogram(&self) -> IndexMap<String, usize> {
        let mut hist: IndexMap<String, usize> = self.tokens.iter().map(|t| (t.clone(), 0)).collect();
        for e in &self.entries {
            if let Some(t) = self.tokens.get(e.label as usize) {
                hist[t] += 1;
            }
        }
        hist
    }

    /// One entry per rollout, labeled with the argmax-likelihood source.
    /// Ties go to the internal source, then to the lowest registry index.
    pub fn build_from_rollouts(
        rollouts: &[Rollout],
        registry: &SourceRegistry,
        embed: &EmbeddingClient,
    ) -> Result<Self, DatastoreError> {
        let mut store = Self::for_registry(embed.dim(), registry);
        for r in rollouts {
            let label = rollout_label(r, registry)?;
            let key = embed.embed_query(&routing_prefix(&r.query))?;
            let meta = r.meta.clone().or_else(|| Some(r.query.clone()));
            store.insert_labeled(&key, label as u16, meta)?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + self.entries.len() * (14 + 4 * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.tokens.len() as u16).to_le_bytes());
        for t in &self.tokens {
            buf.extend_from_slice(&(t.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.as_bytes());
        }
        for e in &self.entries {
            buf.extend_from_slice(&e.id.to_le_bytes());
            buf.extend_from_slice(&e.label.to_le_bytes());
            let meta = e.meta.as_deref().unwrap_or("");
            buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            buf.extend_from_slice(meta.as_bytes());
            for x in &e.key {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatastoreError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(DatastoreError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(DatastoreError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DatastoreError::VersionMismatch(version));
        }
        // header through token-table count, plus the checksum
        if bytes.len() < 4 + 4 + 4 + 8 + 2 + 4 {
            return Err(DatastoreError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(DatastoreError::ChecksumMismatch);
        }

        let mut r = Reader { buf: body, pos: 8 };
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let n_tokens = r.u16()?;
        let mut tokens = Vec::with_capacity(n_tokens as usize);
        for _ in 0..n_tokens {
            let len = r.u16()? as usize;
            tokens.push(r.utf8(len)?);
        }
        if dim == 0 {
            return Err(DatastoreError::Corrupt("dim is zero".into()));
        }
        let entry_min = 8 + 2 + 4 + 4 * dim as u64;
        if count.saturating_mul(entry_min) > (body.len() - r.pos) as u64 {
            return Err(DatastoreError::Truncated);
        }
        let mut entries = Vec::with_capacity(count as usize);
        let mut last_id = None;
        for _ in 0..count {
            let id = r.u64()?;
            if last_id.is_some_and(|prev| id <= prev) {
                return Err(DatastoreError::Corrupt(format!("ids not increasing at {id}")));
            }
            last_id = Some(id);
            let label = r.u16()?;
            if label as usize >= tokens.len() {
                return Err(DatastoreError::Corrupt(format!("label {label} out of range")));
            }
            let meta_len = r.u32()? as usize;
            let meta = r.utf8(meta_len)?;
            let key = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            entries.push(PolicyEntry {
                id,
                key,
                label,
                meta: (!meta.is_empty()).then_some(meta),
            });
        }
        if r.pos != body.len() {
            return Err(DatastoreError::Corrupt("trailing bytes after entries".into()));
        }
        Ok(PolicyDatastore {
            dim,
            tokens,
            next_id: last_id.map_or(0, |id| id + 1),
            entries,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn persist(&self, path: &Path) -> Result<(), DatastoreError> {
        let tmp = path.with_extension("srpd.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self, DatastoreError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Header line, then `id,label,v0,...` per entry.
    pub fn export_text(&self) -> Result<String, DatastoreError> {
        if self.entries.is_empty() {
            return Err(DatastoreError::EmptyStore);
        }
        let mut out = String::from("id,label");
        for i in 0..self.dim {
            out.push_str(&format!(",k{i}"));
        }
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!("{},{}", e.id, self.tokens[e.label as usize]));
            for x in &e.key {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn export_vectors(&self, path: &Path) -> Result<(), DatastoreError> {
        std::fs::write(path, self.export_text()?)?;
        Ok(())
    }
}

fn rollout_label(r: &Rollout, registry: &SourceRegistry) -> Result<usize, DatastoreError> {
    let bad = |reason: String| DatastoreError::BadRollout {
        query: r.query.clone(),
        reason,
    };
    for token in r.logliks.keys() {
        if !registry.contains(token) {
            return Err(bad(format!("unregistered source {token}")));
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, spec) in registry.sources().iter().enumerate() {
        let ll = *r
            .logliks
            .get(&spec.token)
            .ok_or_else(|| bad(format!("missing likelihood for {}", spec.token)))?;
        if !ll.is_finite() {
            return Err(bad(format!("non-finite likelihood for {}", spec.token)));
        }
        best = match best {
            Some((_, b)) if ll < b => best,
            Some((_, b)) if ll == b && idx != registry.internal_index() => best,
            _ => Some((idx, ll)),
        };
    }
    Ok(best.expect("registry is non-empty").0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatastoreError> {
        let end = self.pos.checked_add(n).ok_or(DatastoreError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DatastoreError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, DatastoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, DatastoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, DatastoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, DatastoreError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn utf8(&mut self, len: usize) -> Result<String, DatastoreError> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DatastoreError::Corrupt("invalid UTF-8".into()))
    }
}

/// Snapshot-swapping wrapper: readers grab an `Arc` of the current store,
/// writers are serialized and publish a modified copy.
#[derive(Debug)]
pub struct SharedDatastore {
    current: RwLock<Arc<PolicyDatastore>>,
    writer: Mutex<()>,
}

impl SharedDatastore {
    pub fn new(store: PolicyDatastore) -> Self {
        SharedDatastore {
            current: RwLock::new(Arc::new(store)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<PolicyDatastore> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Applies `f` to a copy and publishes it only if `f` succeeds.
    pub fn update<R, E>(&self, f: impl FnOnce(&mut PolicyDatastore) -> Result<R, E>) -> Result<R, E> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockEmbedder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tokens() -> Vec<String> {
        vec!["<Self>".into(), "<Wiki>".into()]
    }

    fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> PolicyDatastore {
        let mut s = PolicyDatastore::new(dim, tokens());
        for i in 0..n {
            let label = if rng.random_bool(0.5) { "<Self>" } else { "<Wiki>" };
            s.insert_vector(&random_vec(rng, dim), label, Some(format!("q{i}")))
                .unwrap();
        }
        s
    }

    /// Brute force: score everything, full sort.
    fn oracle(store: &PolicyDatastore, q: &[f32], k: usize) -> Vec<u64> {
        let norm: f64 = q.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        let mut all: Vec<(f64, u64)> = store
            .entries()
            .iter()
            .map(|e| {
                let s: f64 = e.key.iter().zip(q).map(|(k, x)| *k as f64 * (*x as f64 / norm)).sum();
                (s.clamp(-1.0, 1.0), e.id)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, id)| id).collect()
    }

    #[test]
    fn self_match_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = random_store(&mut rng, 20, 8);
        let v = random_vec(&mut rng, 8);
        let id = s.insert_vector(&v, "<Wiki>", None).unwrap();
        let hit = s.knn_search(&v, 1).unwrap();
        assert_eq!(hit.ids(), vec![id]);
        assert!((hit.neighbors[0].similarity - 1.0).abs() < 1e-6);

        let mut small = random_store(&mut rng, 30, 8);
        assert_eq!(small.knn_search(&v, 100).unwrap().len(), 30);
        small.remove_entry(0).unwrap();
        assert_eq!(small.knn_search(&v, 100).unwrap().len(), 29);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_store(&mut rng, 200, 16);
        for _ in 0..20 {
            let q = random_vec(&mut rng, 16);
            assert_eq!(s.knn_search(&q, 10).unwrap().ids(), oracle(&s, &q, 10));
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut s = PolicyDatastore::new(2, tokens());
        for _ in 0..5 {
            s.insert_vector(&[1.0, 0.0], "<Self>", None).unwrap();
        }
        assert_eq!(s.knn_search(&[2.0, 0.0], 3).unwrap().ids(), vec![0, 1, 2]);
    }

    #[test]
    fn dimension_and_zero_vector_errors() {
        let s = PolicyDatastore::new(4, tokens());
        assert!(matches!(
            s.knn_search(&[1.0, 0.0], 1),
            Err(DatastoreError::DimensionMismatch { expected: 4, got: 2 })
        ));
        assert!(matches!(s.knn_search(&[0.0; 4], 1), Err(DatastoreError::ZeroVector)));
        assert!(s.knn_search(&[1.0; 4], 5).unwrap().is_empty());
    }

    #[test]
    fn neighbor_distribution_counts() {
        let mut s = PolicyDatastore::new(2, tokens());
        for i in 0..30 {
            let label = if i < 9 { "<Wiki>" } else { "<Self>" };
            s.insert_vector(&[1.0, i as f32 * 0.01], label, None).unwrap();
        }
        let nn = s.knn_search(&[1.0, 0.0], 30).unwrap();
        let d = s.neighbor_distribution(&nn).unwrap();
        assert_eq!(d["<Wiki>"], 0.3);
        assert_eq!(d["<Self>"], 0.7);
        assert_eq!(d.keys().collect::<Vec<_>>(), vec!["<Self>", "<Wiki>"]);

        let five = NeighborSet {
            neighbors: (0..5)
                .map(|id| Neighbor {
                    id,
                    similarity: 1.0,
                    label: 0,
                })
                .collect(),
        };
        let d = s.neighbor_distribution(&five).unwrap();
        assert_eq!((d["<Self>"], d["<Wiki>"]), (1.0, 0.0));
        assert!(matches!(
            s.neighbor_distribution(&NeighborSet::default()),
            Err(DatastoreError::EmptyNeighborSet)
        ));
    }

    #[test]
    fn audit_edits() {
        let embed = EmbeddingClient::new(std::sync::Arc::new(MockEmbedder::new(8)), 8);
        let mut s = PolicyDatastore::new(8, tokens());
        assert_eq!(s.upsert_entry("first", "<Self>", None, &embed).unwrap(), 0);
        assert_eq!(s.len(), 1);
        assert!(matches!(
            s.upsert_entry("x", "<Foo>", None, &embed),
            Err(DatastoreError::UnknownLabel(_))
        ));
        assert_eq!(s.upsert_entry("second", "<Wiki>", None, &embed).unwrap(), 1);
        assert_eq!(s.upsert_entry("third", "<Wiki>", None, &embed).unwrap(), 2);

        let q = embed.embed_query("third").unwrap();
        assert_eq!(s.knn_search(&q, 1).unwrap().ids(), vec![2]);
        s.remove_entry(2).unwrap();
        assert!(!s.knn_search(&q, 10).unwrap().ids().contains(&2));
        assert!(matches!(s.remove_entry(2), Err(DatastoreError::UnknownId(2))));
        assert_eq!(s.upsert_entry("fourth", "<Self>", None, &embed).unwrap(), 3);
        assert_eq!(s.get(1).unwrap().label, 1);
    }

    #[test]
    fn rollout_labels_and_ties() {
        let reg = SourceRegistry::two_source();
        let embed = EmbeddingClient::new(std::sync::Arc::new(MockEmbedder::new(8)), 8);
        let empty = PolicyDatastore::build_from_rollouts(&[], &reg, &embed).unwrap();
        assert!(empty.is_empty());

        let r = |s: f64, w: f64| Rollout {
            query: format!("q {s} {w}"),
            answer: "a".into(),
            logliks: [("<Self>".to_string(), s), ("<Wiki>".to_string(), w)]
                .into_iter()
                .collect(),
            meta: None,
        };
        let store =
            PolicyDatastore::build_from_rollouts(&[r(-2.0, -3.0), r(-3.0, -2.0), r(-1.0, -1.0)], &reg, &embed).unwrap();
        let labels: Vec<_> = store
            .entries()
            .iter()
            .map(|e| store.label_token(e.label).unwrap())
            .collect();
        assert_eq!(labels, vec!["<Self>", "<Wiki>", "<Self>"]);

        let mut missing = r(-1.0, -2.0);
        missing.logliks.shift_remove("<Wiki>");
        assert!(matches!(
            PolicyDatastore::build_from_rollouts(&[missing], &reg, &embed),
            Err(DatastoreError::BadRollout { .. })
        ));
    }

    #[test]
    fn three_source_tie_prefers_lowest_external_index() {
        let reg = SourceRegistry::three_source();
        let rollout = Rollout {
            query: "q".into(),
            answer: "a".into(),
            logliks: [("<Self>", -5.0), ("<Wiki>", -1.0), ("<Pubmed>", -1.0)]
                .into_iter()
                .map(|(t, v)| (t.to_string(), v))
                .collect(),
            meta: None,
        };
        assert_eq!(rollout_label(&rollout, &reg).unwrap(), 1);
    }

    #[test]
    fn persistence_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.srpd");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 100, 12);
        s.persist(&path).unwrap();
        let back = PolicyDatastore::restore(&path).unwrap();
        assert_eq!(back, s);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let empty = PolicyDatastore::new(3, tokens());
        assert_eq!(PolicyDatastore::from_bytes(&empty.to_bytes()).unwrap(), empty);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            PolicyDatastore::from_bytes(&bad),
            Err(DatastoreError::BadMagic)
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            PolicyDatastore::from_bytes(&v2),
            Err(DatastoreError::VersionMismatch(2))
        ));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x55;
        assert!(matches!(
            PolicyDatastore::from_bytes(&flipped),
            Err(DatastoreError::ChecksumMismatch)
        ));
        for cut in [0, 3, 6, 10, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(PolicyDatastore::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        assert!(matches!(
            PolicyDatastore::restore(&dir.path().join("missing")),
            Err(DatastoreError::Io(_))
        ));
    }

    #[test]
    fn export_format() {
        let mut s = PolicyDatastore::new(3, tokens());
        assert!(matches!(s.export_text(), Err(DatastoreError::EmptyStore)));
        s.insert_vector(&[0.3, -0.2, 0.9], "<Wiki>", None).unwrap();
        s.insert_vector(&[1.0, 2.0, 3.0], "<Self>", None).unwrap();
        let text = s.export_text().unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "id,label,k0,k1,k2");
        for (line, e) in lines[1..].iter().zip(s.entries()) {
            let fields: Vec<_> = line.split(',').collect();
            assert_eq!(fields[0].parse::<u64>().unwrap(), e.id);
            assert_eq!(fields[1], s.label_token(e.label).unwrap());
            for (f, k) in fields[2..].iter().zip(&e.key) {
                assert!((f.parse::<f32>().unwrap() - k).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn snapshots_are_isolated_from_writes() {
        let shared = SharedDatastore::new(PolicyDatastore::new(2, tokens()));
        let before = shared.snapshot();
        shared.update(|s| s.insert_vector(&[1.0, 0.0], "<Self>", None)).unwrap();
        assert!(before.is_empty());
        assert_eq!(shared.snapshot().len(), 1);
        let failed: Result<u64, DatastoreError> = shared.update(|s| s.insert_vector(&[1.0, 0.0], "<Nope>", None));
        assert!(failed.is_err());
        assert_eq!(shared.snapshot().len(), 1);
    }

    proptest! {
        #[test]
        fn returned_neighbors_dominate_the_rest(seed in any::<u64>(), n in 1usize..60, k in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, n, 6);
            let q = random_vec(&mut rng, 6);
            let nn = s.knn_search(&q, k).unwrap();
            prop_assert_eq!(nn.len(), k.min(n));
            let qn = normalize(&q).unwrap();
            let worst = nn.neighbors.last().unwrap().similarity;
            for e in s.entries() {
                if !nn.ids().contains(&e.id) {
                    let sim: f64 = e.key.iter().zip(&qn).map(|(a, b)| *a as f64 * b).sum();
                    prop_assert!(sim.clamp(-1.0, 1.0) <= worst);
                }
            }
        }

        #[test]
        fn adding_never_lowers_top1(seed in any::<u64>(), n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random_store(&mut rng, n, 5);
            let q = random_vec(&mut rng, 5);
            let before = s.knn_search(&q, 1).unwrap().neighbors[0].similarity;
            s.insert_vector(&random_vec(&mut rng, 5), "<Wiki>", None).unwrap();
            let after = s.knn_search(&q, 1).unwrap().neighbors[0].similarity;
            prop_assert!(after >= before);
        }

        #[test]
        fn double_round_trip_is_byte_identical(seed in any::<u64>(), n in 0usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, n, 4);
            let once = s.to_bytes();
            let twice = PolicyDatastore::from_bytes(&once).unwrap().to_bytes();
            prop_assert_eq!(once, twice);
        }
    }
}
