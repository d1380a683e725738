//! Hash-partitioned in-memory datasets with primary-key storage, secondary
//! B-tree/R-tree indexes, and record-level read consistency.
//!
//! Each partition keeps a sorted, read-optimized base component plus a small
//! write delta; writes land in the delta and fold into the base once the
//! delta passes a threshold. Quiescent datasets therefore serve reads from
//! the packed base, while a partition with recent updates pays extra
//! lookup, locking, and merge-comparison costs on every access until the
//! next fold. Secondary indexes are maintained on every write; replaced
//! entries are tolerated in the index and filtered by an exact recheck
//! against the latest committed record at probe time.

mod log;
mod rtree;

pub use log::{LogOp, PartitionLog};
pub use rtree::{Entry as RTreeEntry, RTree};

use crate::data::{
    extract_primary_key, serialize_record, stable_hash64, Circle, Datatype, KeyBytes, KeyError,
    Record, Rect, ValidationError, Value, ValueKind,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Bound;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

const DEFAULT_MERGE_THRESHOLD: usize = 8192;
const SCAN_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StorageError {
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset {0:?} already exists")]
    DatasetExists(String),
    #[error("unknown index {0:?}")]
    UnknownIndex(String),
    #[error("index {0:?} already exists")]
    IndexExists(String),
    #[error("invalid dataset descriptor: {0}")]
    InvalidDescriptor(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WriteError {
    #[error("duplicate primary key")]
    DuplicateKey,
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("persistence log write failed: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexKind {
    BTree { field: String },
    RTree { point_field: String },
}

impl IndexKind {
    pub fn field(&self) -> &str {
        match self {
            IndexKind::BTree { field } => field,
            IndexKind::RTree { point_field } => point_field,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDescriptor {
    pub name: String,
    pub kind: IndexKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub datatype: Datatype,
    pub primary_key: Vec<String>,
    pub indexes: Vec<IndexDescriptor>,
    pub partition_count: usize,
}

impl DatasetDescriptor {
    pub fn new(
        name: impl Into<String>,
        datatype: Datatype,
        primary_key: Vec<String>,
        partition_count: usize,
    ) -> Self {
        DatasetDescriptor {
            name: name.into(),
            datatype,
            primary_key,
            indexes: Vec::new(),
            partition_count,
        }
    }
}

type StoredRecord = (Record, u64);

#[derive(Debug)]
enum IndexData {
    BTree(BTreeMap<KeyBytes, BTreeSet<KeyBytes>>),
    RTree(RTree),
}

#[derive(Debug)]
struct IndexState {
    desc: IndexDescriptor,
    data: IndexData,
}

impl IndexState {
    fn add(&mut self, record: &Record, pk: &KeyBytes) {
        let field = self.desc.kind.field();
        match (&mut self.data, record.field(field)) {
            (IndexData::BTree(map), value) if value.is_scalar() => {
                if let Ok(vk) = KeyBytes::from_scalar(value) {
                    map.entry(vk).or_default().insert(pk.clone());
                }
            }
            (IndexData::RTree(tree), Value::Point(p)) => {
                tree.insert(RTreeEntry::from_point(*p, pk.clone()));
            }
            _ => {} // unindexable value; the record can never match a probe
        }
    }
}

#[derive(Debug, Default)]
struct PartState {
    base: Vec<(KeyBytes, StoredRecord)>, // sorted by key
    delta: BTreeMap<KeyBytes, StoredRecord>,
    commit_seq: u64,
    live_count: usize,
    approx_bytes: usize,
    indexes: Vec<IndexState>,
    log: Option<PartitionLog>,
}

impl PartState {
    fn get(&self, key: &KeyBytes) -> Option<&StoredRecord> {
        if let Some(hit) = self.delta.get(key) {
            return Some(hit);
        }
        self.base
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| &self.base[i].1)
    }

    fn contains(&self, key: &KeyBytes) -> bool {
        self.get(key).is_some()
    }

    // Folds the delta into the base; indexes are already live.
    fn merge_delta(&mut self) {
        if self.delta.is_empty() {
            return;
        }
        let delta = std::mem::take(&mut self.delta);
        let mut merged = Vec::with_capacity(self.base.len() + delta.len());
        let mut base_iter = std::mem::take(&mut self.base).into_iter().peekable();
        for (key, stored) in delta {
            while let Some((bk, _)) = base_iter.peek() {
                if *bk < key {
                    merged.push(base_iter.next().unwrap());
                } else {
                    break;
                }
            }
            if let Some((bk, _)) = base_iter.peek() {
                if *bk == key {
                    base_iter.next();
                }
            }
            merged.push((key, stored));
        }
        merged.extend(base_iter);
        self.base = merged;
    }
}

#[derive(Debug)]
pub struct PartitionStore {
    state: RwLock<PartState>,
}

/// A dataset: one partition per placement slot, routed by the stable hash
/// of the primary key.
#[derive(Debug)]
pub struct DatasetStore {
    desc: DatasetDescriptor,
    partitions: Vec<PartitionStore>,
    merge_threshold: AtomicUsize,
}

impl DatasetStore {
    fn new(desc: DatasetDescriptor) -> Self {
        let partitions = (0..desc.partition_count.max(1))
            .map(|_| PartitionStore {
                state: RwLock::new(PartState::default()),
            })
            .collect();
        DatasetStore {
            desc,
            partitions,
            merge_threshold: AtomicUsize::new(DEFAULT_MERGE_THRESHOLD),
        }
    }

    pub fn descriptor(&self) -> &DatasetDescriptor {
        &self.desc
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn set_merge_threshold(&self, n: usize) {
        self.merge_threshold.store(n.max(1), Ordering::Relaxed);
    }

    pub fn key_of(&self, record: &Record) -> Result<KeyBytes, KeyError> {
        extract_primary_key(record, &self.desc.primary_key)
    }

    pub fn partition_for(&self, key: &KeyBytes) -> usize {
        (stable_hash64(key.as_slice()) % self.partitions.len() as u64) as usize
    }

    pub fn insert(&self, record: Record) -> Result<(), WriteError> {
        self.write(record, false, None)
    }

    pub fn upsert(&self, record: Record) -> Result<(), WriteError> {
        self.write(record, true, None)
    }

    /// Writer path for records that were already hash-routed to `partition`.
    pub fn upsert_into_partition(&self, partition: usize, record: Record) -> Result<(), WriteError> {
        self.write(record, true, Some(partition))
    }

    fn write(
        &self,
        record: Record,
        replace: bool,
        partition: Option<usize>,
    ) -> Result<(), WriteError> {
        self.desc.datatype.validate(&record)?;
        let key = self.key_of(&record)?;
        let routed = self.partition_for(&key);
        let p = partition.unwrap_or(routed);
        debug_assert_eq!(p, routed, "record routed to a foreign partition");
        let part = &self.partitions[p];
        let mut state = part.state.write().unwrap();
        let existed = state.contains(&key);
        if existed && !replace {
            return Err(WriteError::DuplicateKey);
        }
        state.commit_seq += 1;
        let seq = state.commit_seq;
        let bytes = serialize_record(&record);
        if let Some(log) = state.log.as_mut() {
            let op = if replace { LogOp::Upsert } else { LogOp::Insert };
            log.append(op, &bytes).map_err(|e| WriteError::Log(e.to_string()))?;
        }
        if !existed {
            state.live_count += 1;
        }
        state.approx_bytes += bytes.len();
        for index in &mut state.indexes {
            index.add(&record, &key);
        }
        state.delta.insert(key, (record, seq));
        if state.delta.len() >= self.merge_threshold.load(Ordering::Relaxed) {
            state.merge_delta();
        }
        Ok(())
    }

    /// Latest committed version of the record under `key`, if any.
    pub fn read_by_key(&self, key: &KeyBytes) -> Option<Record> {
        let part = &self.partitions[self.partition_for(key)];
        let state = part.state.read().unwrap();
        state.get(key).map(|(rec, _)| rec.clone())
    }

    pub fn count(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.state.read().unwrap().live_count)
            .sum()
    }

    /// Approximate total payload bytes, used for join-budget checks.
    pub fn approx_bytes(&self) -> usize {
        self.partitions
            .iter()
            .map(|p| p.state.read().unwrap().approx_bytes)
            .sum()
    }

    /// Monotone dataset version: total commits across partitions.
    pub fn version(&self) -> u64 {
        self.partitions
            .iter()
            .map(|p| p.state.read().unwrap().commit_seq)
            .sum()
    }

    /// Streams every record, partition by partition, in key order within
    /// each partition. The scan does not snapshot: a record committed before
    /// the scan reaches its key is visible.
    pub fn scan(&self) -> ScanIter<'_> {
        ScanIter {
            dataset: self,
            partition: 0,
            end_partition: self.partitions.len(),
            cursor: None,
            buffer: std::collections::VecDeque::new(),
        }
    }

    /// As [`scan`](Self::scan) but for one partition.
    pub fn scan_partition(&self, partition: usize) -> ScanIter<'_> {
        ScanIter {
            dataset: self,
            partition,
            end_partition: (partition + 1).min(self.partitions.len()),
            cursor: None,
            buffer: std::collections::VecDeque::new(),
        }
    }

    fn fill_chunk(
        &self,
        partition: usize,
        cursor: &Option<KeyBytes>,
        buffer: &mut std::collections::VecDeque<Record>,
    ) -> Option<KeyBytes> {
        let state = self.partitions[partition].state.read().unwrap();
        let start = match cursor {
            None => 0,
            Some(c) => match state.base.binary_search_by(|(k, _)| k.cmp(c)) {
                Ok(i) => i + 1,
                Err(i) => i,
            },
        };
        let mut base_iter = state.base[start..].iter().peekable();
        let mut delta_iter = match cursor {
            None => state.delta.range::<KeyBytes, _>(..),
            Some(c) => state.delta.range((Bound::Excluded(c.clone()), Bound::Unbounded)),
        }
        .peekable();
        let mut last = None;
        while buffer.len() < SCAN_CHUNK {
            let take_delta = match (base_iter.peek(), delta_iter.peek()) {
                (None, None) => break,
                (Some(_), None) => false,
                (None, Some(_)) => true,
                (Some((bk, _)), Some((dk, _))) => {
                    if *dk == bk {
                        base_iter.next(); // shadowed by the delta version
                        true
                    } else {
                        *dk < bk
                    }
                }
            };
            let (key, rec) = if take_delta {
                let (k, (rec, _)) = delta_iter.next().unwrap();
                (k.clone(), rec.clone())
            } else {
                let (k, (rec, _)) = base_iter.next().unwrap();
                (k.clone(), rec.clone())
            };
            buffer.push_back(rec);
            last = Some(key);
        }
        last
    }

    pub fn create_index(&self, desc: IndexDescriptor) -> Result<(), StorageError> {
        if let Some(declared) = self
            .desc
            .datatype
            .required
            .iter()
            .find(|(f, _)| f == desc.kind.field())
        {
            let ok = match desc.kind {
                IndexKind::BTree { .. } => {
                    !matches!(declared.1, ValueKind::Point | ValueKind::Rectangle | ValueKind::Circle | ValueKind::Array | ValueKind::Object)
                }
                IndexKind::RTree { .. } => declared.1 == ValueKind::Point,
            };
            if !ok {
                return Err(StorageError::InvalidDescriptor(format!(
                    "field {:?} kind does not match index kind",
                    desc.kind.field()
                )));
            }
        }
        for part in &self.partitions {
            let mut state = part.state.write().unwrap();
            if state.indexes.iter().any(|i| i.desc.name == desc.name) {
                return Err(StorageError::IndexExists(desc.name.clone()));
            }
            // bulk-build over the existing records
            let data = match &desc.kind {
                IndexKind::BTree { field } => {
                    let mut map: BTreeMap<KeyBytes, BTreeSet<KeyBytes>> = BTreeMap::new();
                    for (key, (rec, _)) in merged_entries(&state) {
                        let value = rec.field(field);
                        if value.is_scalar() {
                            if let Ok(vk) = KeyBytes::from_scalar(value) {
                                map.entry(vk).or_default().insert(key.clone());
                            }
                        }
                    }
                    IndexData::BTree(map)
                }
                IndexKind::RTree { point_field } => {
                    let mut entries = Vec::new();
                    for (key, (rec, _)) in merged_entries(&state) {
                        if let Value::Point(p) = rec.field(point_field) {
                            entries.push(RTreeEntry::from_point(*p, key.clone()));
                        }
                    }
                    IndexData::RTree(RTree::bulk_load(entries))
                }
            };
            state.indexes.push(IndexState {
                desc: desc.clone(),
                data,
            });
        }
        Ok(())
    }

    pub fn has_index(&self, name: &str) -> bool {
        self.partitions[0]
            .state
            .read()
            .unwrap()
            .indexes
            .iter()
            .any(|i| i.desc.name == name)
    }

    /// Finds an index over `field` of the given structural kind.
    pub fn index_on(&self, field: &str, rtree: bool) -> Option<String> {
        let state = self.partitions[0].state.read().unwrap();
        state
            .indexes
            .iter()
            .find(|i| {
                i.desc.kind.field() == field
                    && matches!(&i.desc.kind, IndexKind::RTree { .. }) == rtree
            })
            .map(|i| i.desc.name.clone())
    }

    /// B-tree probe: exactly the records whose indexed field lies within the
    /// value range, fetched through the primary store.
    pub fn index_lookup(
        &self,
        index: &str,
        lo: Bound<&Value>,
        hi: Bound<&Value>,
    ) -> Result<Vec<Record>, StorageError> {
        let enc = |b: Bound<&Value>| -> Result<Bound<KeyBytes>, StorageError> {
            Ok(match b {
                Bound::Unbounded => Bound::Unbounded,
                Bound::Included(v) => Bound::Included(KeyBytes::from_scalar(v).map_err(|_| {
                    StorageError::InvalidDescriptor("non-scalar probe value".into())
                })?),
                Bound::Excluded(v) => Bound::Excluded(KeyBytes::from_scalar(v).map_err(|_| {
                    StorageError::InvalidDescriptor("non-scalar probe value".into())
                })?),
            })
        };
        let (lo_k, hi_k) = (enc(lo)?, enc(hi)?);
        let in_range = |v: &Value| -> bool {
            let Ok(vk) = KeyBytes::from_scalar(v) else {
                return false;
            };
            let lo_ok = match &lo_k {
                Bound::Unbounded => true,
                Bound::Included(b) => vk >= *b,
                Bound::Excluded(b) => vk > *b,
            };
            let hi_ok = match &hi_k {
                Bound::Unbounded => true,
                Bound::Included(b) => vk <= *b,
                Bound::Excluded(b) => vk < *b,
            };
            lo_ok && hi_ok
        };
        let mut out = Vec::new();
        let mut found = false;
        for part in &self.partitions {
            let state = part.state.read().unwrap();
            let Some(idx) = state.indexes.iter().find(|i| i.desc.name == index) else {
                continue;
            };
            found = true;
            let IndexData::BTree(map) = &idx.data else {
                return Err(StorageError::UnknownIndex(index.to_string()));
            };
            let field = idx.desc.kind.field();
            let mut candidates: BTreeSet<KeyBytes> = BTreeSet::new();
            for (_, pks) in map.range((lo_k.clone(), hi_k.clone())) {
                candidates.extend(pks.iter().cloned());
            }
            for pk in candidates {
                if let Some((rec, _)) = state.get(&pk) {
                    // recheck against the latest committed version
                    if in_range(rec.field(field)) {
                        out.push(rec.clone());
                    }
                }
            }
        }
        if !found {
            return Err(StorageError::UnknownIndex(index.to_string()));
        }
        Ok(out)
    }

    /// R-tree probe: bounding-box prefilter, then the exact circle test
    /// against the latest committed point.
    pub fn index_lookup_circle(
        &self,
        index: &str,
        circle: &Circle,
    ) -> Result<Vec<Record>, StorageError> {
        let bbox = circle.bounding_box();
        let mut out = Vec::new();
        let mut found = false;
        for part in &self.partitions {
            let state = part.state.read().unwrap();
            let Some(idx) = state.indexes.iter().find(|i| i.desc.name == index) else {
                continue;
            };
            found = true;
            let IndexData::RTree(tree) = &idx.data else {
                return Err(StorageError::UnknownIndex(index.to_string()));
            };
            let field = idx.desc.kind.field();
            let mut hits = Vec::new();
            tree.search(&bbox, &mut hits);
            let candidates: BTreeSet<KeyBytes> = hits.into_iter().collect();
            for pk in candidates {
                if let Some((rec, _)) = state.get(&pk) {
                    if let Value::Point(p) = rec.field(field) {
                        if circle.contains_point(p) {
                            out.push(rec.clone());
                        }
                    }
                }
            }
        }
        if !found {
            return Err(StorageError::UnknownIndex(index.to_string()));
        }
        Ok(out)
    }

    /// R-tree probe with a rectangle query window.
    pub fn index_lookup_box(&self, index: &str, query: &Rect) -> Result<Vec<Record>, StorageError> {
        let mut out = Vec::new();
        let mut found = false;
        for part in &self.partitions {
            let state = part.state.read().unwrap();
            let Some(idx) = state.indexes.iter().find(|i| i.desc.name == index) else {
                continue;
            };
            found = true;
            let IndexData::RTree(tree) = &idx.data else {
                return Err(StorageError::UnknownIndex(index.to_string()));
            };
            let field = idx.desc.kind.field();
            let mut hits = Vec::new();
            tree.search(query, &mut hits);
            let candidates: BTreeSet<KeyBytes> = hits.into_iter().collect();
            for pk in candidates {
                if let Some((rec, _)) = state.get(&pk) {
                    if let Value::Point(p) = rec.field(field) {
                        if query.contains_point(p) {
                            out.push(rec.clone());
                        }
                    }
                }
            }
        }
        if !found {
            return Err(StorageError::UnknownIndex(index.to_string()));
        }
        Ok(out)
    }

    /// Loads a batch directly, bypassing the delta; used for fixtures.
    pub fn bulk_load(&self, records: Vec<Record>) -> Result<(), WriteError> {
        let mut routed: Vec<Vec<(KeyBytes, Record)>> =
            (0..self.partitions.len()).map(|_| Vec::new()).collect();
        for record in records {
            self.desc.datatype.validate(&record)?;
            let key = self.key_of(&record)?;
            routed[self.partition_for(&key)].push((key, record));
        }
        for (p, mut batch) in routed.into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            batch.sort_by(|a, b| a.0.cmp(&b.0));
            let part = &self.partitions[p];
            let mut state = part.state.write().unwrap();
            for (key, record) in batch {
                state.commit_seq += 1;
                let seq = state.commit_seq;
                let bytes_len = serialize_record(&record).len();
                let existed = state.contains(&key);
                if !existed {
                    state.live_count += 1;
                }
                state.approx_bytes += bytes_len;
                for index in &mut state.indexes {
                    index.add(&record, &key);
                }
                state.delta.insert(key, (record, seq));
            }
            state.merge_delta();
        }
        Ok(())
    }
}

fn merged_entries<'a>(
    state: &'a PartState,
) -> impl Iterator<Item = (&'a KeyBytes, &'a StoredRecord)> + 'a {
    // base entries shadowed by the delta are skipped
    let delta = &state.delta;
    state
        .base
        .iter()
        .filter(move |(k, _)| !delta.contains_key(k))
        .map(|(k, s)| (k, s))
        .chain(delta.iter())
}

pub struct ScanIter<'a> {
    dataset: &'a DatasetStore,
    partition: usize,
    end_partition: usize,
    cursor: Option<KeyBytes>,
    buffer: std::collections::VecDeque<Record>,
}

impl Iterator for ScanIter<'_> {
    type Item = Record;

    fn next(&mut self) -> Option<Record> {
        loop {
            if let Some(rec) = self.buffer.pop_front() {
                return Some(rec);
            }
            if self.partition >= self.end_partition {
                return None;
            }
            match self
                .dataset
                .fill_chunk(self.partition, &self.cursor, &mut self.buffer)
            {
                Some(last) => self.cursor = Some(last),
                None => {
                    self.partition += 1;
                    self.cursor = None;
                }
            }
        }
    }
}

/// Registry of datasets, one entry per declared dataset name.
#[derive(Debug)]
pub struct StorageEngine {
    datasets: RwLock<HashMap<String, Arc<DatasetStore>>>,
    persist_dir: Option<PathBuf>,
}

impl StorageEngine {
    pub fn new() -> Arc<StorageEngine> {
        Arc::new(StorageEngine {
            datasets: RwLock::new(HashMap::new()),
            persist_dir: None,
        })
    }

    /// Engine whose datasets append to per-partition log files under `dir`
    /// and replay them at creation.
    pub fn with_persistence(dir: PathBuf) -> Arc<StorageEngine> {
        Arc::new(StorageEngine {
            datasets: RwLock::new(HashMap::new()),
            persist_dir: Some(dir),
        })
    }

    pub fn create_dataset(
        &self,
        desc: DatasetDescriptor,
    ) -> Result<Arc<DatasetStore>, StorageError> {
        if desc.primary_key.is_empty() {
            return Err(StorageError::InvalidDescriptor(
                "primary key must name at least one field".into(),
            ));
        }
        for field in &desc.primary_key {
            if !desc.datatype.required.iter().any(|(f, _)| f == field) {
                return Err(StorageError::InvalidDescriptor(format!(
                    "primary key field {field:?} is not a required field of {}",
                    desc.datatype.name
                )));
            }
        }
        let mut datasets = self.datasets.write().unwrap();
        if datasets.contains_key(&desc.name) {
            return Err(StorageError::DatasetExists(desc.name));
        }
        let name = desc.name.clone();
        let indexes = desc.indexes.clone();
        let store = Arc::new(DatasetStore::new(desc));
        for index in indexes {
            store.create_index(index)?;
        }
        if let Some(dir) = &self.persist_dir {
            let mut replayed = Vec::new();
            for p in 0..store.partition_count() {
                let path = dir.join(format!("{name}.{p}.log"));
                let (log, entries) =
                    PartitionLog::open(&path).map_err(|e| StorageError::InvalidDescriptor(
                        format!("cannot open persistence log: {e}"),
                    ))?;
                replayed.extend(entries);
                store.partitions[p].state.write().unwrap().log = Some(log);
            }
            for (_, record) in replayed {
                // replayed writes must not re-append
                let key = store.key_of(&record).map_err(|e| {
                    StorageError::InvalidDescriptor(format!("bad logged record: {e}"))
                })?;
                let p = store.partition_for(&key);
                let part = &store.partitions[p];
                let mut state = part.state.write().unwrap();
                state.commit_seq += 1;
                let seq = state.commit_seq;
                if !state.contains(&key) {
                    state.live_count += 1;
                }
                state.approx_bytes += serialize_record(&record).len();
                for index in &mut state.indexes {
                    index.add(&record, &key);
                }
                state.delta.insert(key, (record, seq));
            }
            for p in &store.partitions {
                p.state.write().unwrap().merge_delta();
            }
        }
        datasets.insert(name, store.clone());
        Ok(store)
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<DatasetStore>, StorageError> {
        self.datasets
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| StorageError::UnknownDataset(name.to_string()))
    }

    pub fn has_dataset(&self, name: &str) -> bool {
        self.datasets.read().unwrap().contains_key(name)
    }

    pub fn dataset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.datasets.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record;

    fn ratings_desc(partitions: usize) -> DatasetDescriptor {
        DatasetDescriptor::new(
            "SafetyRatings",
            Datatype::new(
                "SafetyRatingType",
                vec![
                    ("country_code".into(), ValueKind::Text),
                    ("safety_rating".into(), ValueKind::Text),
                ],
                true,
            ),
            vec!["country_code".into()],
            partitions,
        )
    }

    fn rating(code: &str, rating: &str) -> Record {
        record! {
            "country_code" => Value::Text(code.into()),
            "safety_rating" => Value::Text(rating.into()),
        }
    }

    #[test]
    fn upsert_replaces_previous_object() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(2)).unwrap();
        ds.upsert(rating("US", "3")).unwrap();
        ds.upsert(rating("US", "4")).unwrap();
        let key = ds.key_of(&rating("US", "x")).unwrap();
        let rec = ds.read_by_key(&key).unwrap();
        assert_eq!(rec.field("safety_rating"), &Value::Text("4".into()));
        assert_eq!(ds.count(), 1);
    }

    #[test]
    fn insert_rejects_duplicate_key() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(2)).unwrap();
        ds.insert(rating("US", "3")).unwrap();
        assert_eq!(ds.insert(rating("US", "4")), Err(WriteError::DuplicateKey));
        // read-your-writes
        let key = ds.key_of(&rating("US", "3")).unwrap();
        assert_eq!(ds.read_by_key(&key).unwrap(), rating("US", "3"));
    }

    #[test]
    fn read_absent_key_returns_none() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(2)).unwrap();
        let key = ds.key_of(&rating("ZZ", "0")).unwrap();
        assert!(ds.read_by_key(&key).is_none());
    }

    #[test]
    fn scan_is_key_ordered_per_partition_and_complete() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(4)).unwrap();
        for i in 0..100 {
            ds.upsert(rating(&format!("C{i:03}"), "1")).unwrap();
        }
        let records: Vec<Record> = ds.scan().collect();
        assert_eq!(records.len(), 100);
        // per-partition key order
        for p in 0..4 {
            let keys: Vec<KeyBytes> = ds
                .scan_partition(p)
                .map(|r| ds.key_of(&r).unwrap())
                .collect();
            let mut sorted = keys.clone();
            sorted.sort();
            assert_eq!(keys, sorted);
        }
        // partition disjointness: no duplicates across partitions
        let mut all: Vec<KeyBytes> = records.iter().map(|r| ds.key_of(r).unwrap()).collect();
        let total = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), total);
    }

    #[test]
    fn scan_racing_upsert_sees_new_version() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(1)).unwrap();
        for i in 0..600 {
            ds.upsert(rating(&format!("C{i:04}"), "old")).unwrap();
        }
        let mut scan = ds.scan();
        // consume the first chunk only
        for _ in 0..10 {
            scan.next().unwrap();
        }
        // update a record the scan has not reached (chunk size is 256)
        ds.upsert(rating("C0500", "new")).unwrap();
        let seen: Vec<Record> = scan.collect();
        let hit = seen
            .iter()
            .find(|r| r.field("country_code") == &Value::Text("C0500".into()))
            .unwrap();
        assert_eq!(hit.field("safety_rating"), &Value::Text("new".into()));
    }

    #[test]
    fn btree_index_matches_scan_filter() {
        let engine = StorageEngine::new();
        let ds = engine.create_dataset(ratings_desc(3)).unwrap();
        for i in 0..200 {
            ds.upsert(rating(&format!("C{:03}", i % 50), &format!("{}", i % 7)))
                .unwrap();
        }
        ds.create_index(IndexDescriptor {
            name: "rating_idx".into(),
            kind: IndexKind::BTree {
                field: "safety_rating".into(),
            },
        })
        .unwrap();
        // updates after index creation exercise the live maintenance path
        for i in 0..50 {
            ds.upsert(rating(&format!("C{i:03}"), &format!("{}", (i + 1) % 7)))
                .unwrap();
        }
        let probe = Value::Text("3".into());
        let mut got: Vec<String> = ds
            .index_lookup("rating_idx", Bound::Included(&probe), Bound::Included(&probe))
            .unwrap()
            .iter()
            .map(|r| r.field("country_code").as_text().unwrap().to_string())
            .collect();
        got.sort();
        let mut want: Vec<String> = ds
            .scan()
            .filter(|r| r.field("safety_rating") == &probe)
            .map(|r| r.field("country_code").as_text().unwrap().to_string())
            .collect();
        want.sort();
        assert_eq!(got, want);
        assert!(!want.is_empty());

        // empty range and unknown index
        let empty = ds
            .index_lookup(
                "rating_idx",
                Bound::Included(&Value::Text("zz".into())),
                Bound::Included(&Value::Text("zz".into())),
            )
            .unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            ds.index_lookup("nope", Bound::Unbounded, Bound::Unbounded),
            Err(StorageError::UnknownIndex(_))
        ));
    }

    #[test]
    fn persistence_log_replays_on_reopen() {
        let dir = std::env::temp_dir().join(format!("idea-store-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        {
            let engine = StorageEngine::with_persistence(dir.clone());
            let ds = engine.create_dataset(ratings_desc(2)).unwrap();
            ds.insert(rating("US", "3")).unwrap();
            ds.upsert(rating("US", "4")).unwrap();
            ds.upsert(rating("FR", "2")).unwrap();
        }
        let engine = StorageEngine::with_persistence(dir.clone());
        let ds = engine.create_dataset(ratings_desc(2)).unwrap();
        assert_eq!(ds.count(), 2);
        let key = ds.key_of(&rating("US", "x")).unwrap();
        assert_eq!(
            ds.read_by_key(&key).unwrap().field("safety_rating"),
            &Value::Text("4".into())
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn pk_must_be_required_field() {
        let engine = StorageEngine::new();
        let mut desc = ratings_desc(1);
        desc.primary_key = vec!["nonexistent".into()];
        assert!(matches!(
            engine.create_dataset(desc),
            Err(StorageError::InvalidDescriptor(_))
        ));
    }
}
