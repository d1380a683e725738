//! Partition holders: bounded frame queues that guard a runtime partition
//! and hand data across job boundaries. A passive holder is pulled from by
//! other jobs in batches; an active holder is fed by other jobs and pushes
//! to the downstream operator wired into its own job. Producers block when
//! the queue is full; nothing is ever dropped.

use crate::runtime::Frame;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

pub const DEFAULT_HOLDER_CAPACITY: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HolderId {
    /// Entity this holder belongs to, e.g. `feedname:intake`.
    pub entity: String,
    pub partition: usize,
}

impl HolderId {
    pub fn new(entity: impl Into<String>, partition: usize) -> Self {
        HolderId {
            entity: entity.into(),
            partition,
        }
    }
}

impl fmt::Display for HolderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.entity, self.partition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HolderMode {
    Passive,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HolderState {
    Open,
    Draining,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HolderError {
    #[error("holder id {0} already registered")]
    DuplicateHolderId(String),
    #[error("unknown holder id {0}")]
    UnknownHolderId(String),
    #[error("holder {0} is closed")]
    HolderClosed(String),
    #[error("operation not allowed for a {mode:?} holder")]
    WrongMode { mode: HolderMode },
}

/// A batch assembled from queued frames by a passive holder.
#[derive(Debug, Default)]
pub struct Batch {
    pub records: Vec<Vec<u8>>,
    pub end_of_feed: bool,
}

struct Queue {
    frames: VecDeque<Frame>,
    state: HolderState,
    queued_records: usize,
    total_offered: u64,
    total_taken: u64,
}

struct HolderInner {
    id: HolderId,
    mode: HolderMode,
    capacity: usize,
    queue: Mutex<Queue>,
    not_full: Condvar,
    not_empty: Condvar,
}

/// Clonable handle to a partition holder.
#[derive(Clone)]
pub struct PartitionHolder {
    inner: Arc<HolderInner>,
}

impl fmt::Debug for PartitionHolder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartitionHolder")
            .field("id", &self.inner.id)
            .field("mode", &self.inner.mode)
            .finish()
    }
}

impl PartitionHolder {
    pub fn new(id: HolderId, mode: HolderMode, capacity: usize) -> Self {
        PartitionHolder {
            inner: Arc::new(HolderInner {
                id,
                mode,
                capacity: capacity.max(1),
                queue: Mutex::new(Queue {
                    frames: VecDeque::new(),
                    state: HolderState::Open,
                    queued_records: 0,
                    total_offered: 0,
                    total_taken: 0,
                }),
                not_full: Condvar::new(),
                not_empty: Condvar::new(),
            }),
        }
    }

    pub fn id(&self) -> &HolderId {
        &self.inner.id
    }

    pub fn mode(&self) -> HolderMode {
        self.inner.mode
    }

    pub fn state(&self) -> HolderState {
        self.inner.queue.lock().unwrap().state
    }

    pub fn queued_frames(&self) -> usize {
        self.inner.queue.lock().unwrap().frames.len()
    }

    pub fn queued_records(&self) -> usize {
        self.inner.queue.lock().unwrap().queued_records
    }

    /// (total records offered, total records taken) so far.
    pub fn totals(&self) -> (u64, u64) {
        let q = self.inner.queue.lock().unwrap();
        (q.total_offered, q.total_taken)
    }

    /// Enqueues a frame, blocking while the queue is at capacity. An EOF
    /// frame moves the holder to Draining: no further frames are accepted,
    /// consumers still see everything queued before it.
    pub fn offer_frame(&self, frame: Frame) -> Result<(), HolderError> {
        let mut q = self.inner.queue.lock().unwrap();
        loop {
            if q.state != HolderState::Open {
                return Err(HolderError::HolderClosed(self.inner.id.to_string()));
            }
            if q.frames.len() < self.inner.capacity {
                break;
            }
            q = self.inner.not_full.wait(q).unwrap();
        }
        q.queued_records += frame.records.len();
        q.total_offered += frame.records.len() as u64;
        if frame.is_eof {
            q.state = HolderState::Draining;
        }
        q.frames.push_back(frame);
        drop(q);
        self.inner.not_empty.notify_all();
        Ok(())
    }

    /// Push-side entry point for active holders; same queue semantics as
    /// [`offer_frame`](Self::offer_frame) but rejected on passive holders.
    pub fn push_downstream(&self, frame: Frame) -> Result<(), HolderError> {
        if self.inner.mode != HolderMode::Active {
            return Err(HolderError::WrongMode {
                mode: self.inner.mode,
            });
        }
        self.offer_frame(frame)
    }

    /// Pulls up to `batch_size` records, blocking until at least one record
    /// is queued or end of feed. Encountering an EOF frame finishes the
    /// batch immediately with `end_of_feed` set, without waiting for a full
    /// batch; once drained the holder reports end of feed forever.
    pub fn poll_batch(&self, batch_size: usize) -> Result<Batch, HolderError> {
        if self.inner.mode != HolderMode::Passive {
            return Err(HolderError::WrongMode {
                mode: self.inner.mode,
            });
        }
        let mut q = self.inner.queue.lock().unwrap();
        loop {
            if !q.frames.is_empty() || q.state == HolderState::Closed {
                break;
            }
            q = self.inner.not_empty.wait(q).unwrap();
        }
        let mut batch = Batch::default();
        if q.state == HolderState::Closed && q.frames.is_empty() {
            batch.end_of_feed = true;
            return Ok(batch);
        }
        while batch.records.len() < batch_size {
            let Some(front) = q.frames.front_mut() else {
                break;
            };
            if front.is_eof {
                q.frames.pop_front();
                q.state = HolderState::Closed;
                batch.end_of_feed = true;
                break;
            }
            let room = batch_size - batch.records.len();
            if front.records.len() <= room {
                let frame = q.frames.pop_front().unwrap();
                batch.records.extend(frame.records);
            } else {
                // split the frame, leaving the remainder queued
                let taken: Vec<Vec<u8>> = front.records.drain(..room).collect();
                batch.records.extend(taken);
            }
        }
        q.queued_records -= batch.records.len();
        q.total_taken += batch.records.len() as u64;
        drop(q);
        self.inner.not_full.notify_all();
        Ok(batch)
    }

    /// Blocking frame pop for the operator that drains an active holder.
    /// The EOF frame is returned to the caller; afterwards the holder is
    /// Closed and `take_frame` returns None.
    pub fn take_frame(&self) -> Option<Frame> {
        let mut q = self.inner.queue.lock().unwrap();
        loop {
            if let Some(frame) = q.frames.pop_front() {
                q.queued_records -= frame.records.len();
                q.total_taken += frame.records.len() as u64;
                if frame.is_eof {
                    q.state = HolderState::Closed;
                }
                drop(q);
                self.inner.not_full.notify_all();
                return Some(frame);
            }
            if q.state != HolderState::Open {
                return None;
            }
            q = self.inner.not_empty.wait(q).unwrap();
        }
    }

    /// Forces the holder closed, waking all waiters; used on abort paths.
    pub fn close(&self) {
        let mut q = self.inner.queue.lock().unwrap();
        q.state = HolderState::Closed;
        drop(q);
        self.inner.not_empty.notify_all();
        self.inner.not_full.notify_all();
    }
}

/// Per-node registry mapping holder ids to holders.
#[derive(Default)]
pub struct HolderManager {
    holders: Mutex<HashMap<HolderId, PartitionHolder>>,
}

impl fmt::Debug for HolderManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.holders.lock().unwrap().len();
        write!(f, "HolderManager({n} holders)")
    }
}

impl HolderManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, holder: PartitionHolder) -> Result<(), HolderError> {
        let mut map = self.holders.lock().unwrap();
        let id = holder.id().clone();
        if map.contains_key(&id) {
            return Err(HolderError::DuplicateHolderId(id.to_string()));
        }
        map.insert(id, holder);
        Ok(())
    }

    pub fn lookup(&self, id: &HolderId) -> Result<PartitionHolder, HolderError> {
        self.holders
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| HolderError::UnknownHolderId(id.to_string()))
    }

    pub fn deregister(&self, id: &HolderId) -> Result<PartitionHolder, HolderError> {
        self.holders
            .lock()
            .unwrap()
            .remove(id)
            .ok_or_else(|| HolderError::UnknownHolderId(id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    fn data_frame(seq: u64, n: usize) -> Frame {
        Frame::data(0, seq, (0..n).map(|i| vec![i as u8]).collect())
    }

    fn passive(capacity: usize) -> PartitionHolder {
        PartitionHolder::new(HolderId::new("t:intake", 0), HolderMode::Passive, capacity)
    }

    #[test]
    fn registry_semantics() {
        let mgr = HolderManager::new();
        let h = passive(4);
        mgr.register(h.clone()).unwrap();
        assert_eq!(mgr.lookup(h.id()).unwrap().id(), h.id());
        assert!(matches!(
            mgr.register(h.clone()),
            Err(HolderError::DuplicateHolderId(_))
        ));
        assert!(matches!(
            mgr.lookup(&HolderId::new("nope", 0)),
            Err(HolderError::UnknownHolderId(_))
        ));
        mgr.deregister(h.id()).unwrap();
        assert!(mgr.lookup(h.id()).is_err());
    }

    #[test]
    fn poll_assembles_across_frames_and_splits() {
        let h = passive(8);
        for seq in 0..3 {
            h.offer_frame(data_frame(seq, 128)).unwrap();
        }
        // 3 frames x 128 records, batch of 420 -> all 384 available
        let batch = h.poll_batch(420).unwrap();
        assert_eq!(batch.records.len(), 384);
        assert!(!batch.end_of_feed);

        // exactly batch_size when more is queued
        for seq in 3..8 {
            h.offer_frame(data_frame(seq, 128)).unwrap();
        }
        let batch = h.poll_batch(420).unwrap();
        assert_eq!(batch.records.len(), 420);
        assert_eq!(h.queued_records(), 5 * 128 - 420);
    }

    #[test]
    fn eof_finishes_partial_batch_without_waiting() {
        let h = passive(8);
        h.offer_frame(data_frame(0, 10)).unwrap();
        h.offer_frame(Frame::eof(0, 1)).unwrap();
        let batch = h.poll_batch(420).unwrap();
        assert_eq!(batch.records.len(), 10);
        assert!(batch.end_of_feed);
        // drained holder keeps reporting end of feed
        let batch = h.poll_batch(420).unwrap();
        assert!(batch.records.is_empty() && batch.end_of_feed);
        // and accepts nothing new
        assert!(matches!(
            h.offer_frame(data_frame(9, 1)),
            Err(HolderError::HolderClosed(_))
        ));
    }

    #[test]
    fn producer_blocks_at_capacity_and_resumes_after_poll() {
        let h = passive(32);
        for seq in 0..32 {
            h.offer_frame(data_frame(seq, 4)).unwrap();
        }
        assert_eq!(h.queued_frames(), 32);
        let offered = Arc::new(AtomicUsize::new(0));
        let h2 = h.clone();
        let offered2 = offered.clone();
        let producer = std::thread::spawn(move || {
            h2.offer_frame(data_frame(32, 4)).unwrap();
            offered2.store(1, Ordering::SeqCst);
        });
        std::thread::sleep(Duration::from_millis(60));
        assert_eq!(offered.load(Ordering::SeqCst), 0, "producer should block");
        assert_eq!(h.queued_frames(), 32);
        let batch = h.poll_batch(4).unwrap();
        assert_eq!(batch.records.len(), 4);
        producer.join().unwrap();
        assert_eq!(offered.load(Ordering::SeqCst), 1);
        // no loss, no duplication at quiescence
        let (offered_total, taken_total) = h.totals();
        assert_eq!(offered_total - taken_total, h.queued_records() as u64);
    }

    #[test]
    fn fifo_order_is_preserved() {
        let h = passive(8);
        let mut expected = Vec::new();
        for seq in 0..5 {
            let frame = Frame::data(0, seq, vec![vec![seq as u8, 1], vec![seq as u8, 2]]);
            expected.extend(frame.records.clone());
            h.offer_frame(frame).unwrap();
        }
        let batch = h.poll_batch(100).unwrap();
        assert_eq!(batch.records, expected);
    }

    #[test]
    fn active_holder_mode_checks() {
        let active = PartitionHolder::new(HolderId::new("t:storage", 0), HolderMode::Active, 8);
        let passive = passive(8);
        assert!(matches!(
            passive.push_downstream(data_frame(0, 1)),
            Err(HolderError::WrongMode { .. })
        ));
        assert!(matches!(
            active.poll_batch(1),
            Err(HolderError::WrongMode { .. })
        ));
        // push order equals take order, EOF observed last
        for seq in 0..5 {
            active.push_downstream(data_frame(seq, 2)).unwrap();
        }
        active.push_downstream(Frame::eof(0, 5)).unwrap();
        let mut seqs = Vec::new();
        while let Some(frame) = active.take_frame() {
            seqs.push((frame.sequence, frame.is_eof));
        }
        assert_eq!(
            seqs,
            vec![
                (0, false),
                (1, false),
                (2, false),
                (3, false),
                (4, false),
                (5, true)
            ]
        );
        assert!(active.take_frame().is_none());
    }
}
