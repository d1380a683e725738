//! Job compilation, wiring, and execution. Each operator partition runs on
//! its own thread; frames move through bounded channels, and a channel
//! closes once an EOF frame has arrived from every producing partition.
//! Failures abort the job fast: an erroring operator drops its outputs
//! without EOF, which propagates as an upstream-closed error downstream and
//! a send failure upstream.

use super::job::{ConnectorKind, InvalidSpec, JobSpec};
use super::operators::{instantiate, OpContext};
use super::{Cluster, Frame};
use crate::data::{deserialize_record, extract_primary_key, stable_hash64, KeyBytes, Record};
use crate::deploy::SlotBindings;
use crate::holders::HolderError;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Frames buffered per channel between operators.
pub const CHANNEL_CAPACITY: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpError {
    #[error("aborted")]
    Aborted,
    #[error("upstream closed before end of stream")]
    Upstream,
    #[error(transparent)]
    Holder(#[from] HolderError),
    #[error("io error: {0}")]
    Io(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("missing key field: {0}")]
    Key(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl OpError {
    fn is_secondary(&self) -> bool {
        matches!(self, OpError::Aborted | OpError::Upstream)
    }
}

/// The stable routing function for hash partitioning: a pure function of
/// the key bytes and the partition count.
pub fn hash_partition(key: &KeyBytes, partitions: usize) -> usize {
    (stable_hash64(key.as_slice()) % partitions.max(1) as u64) as usize
}

/// Validated compilation materials, cached per node when predeployed.
#[derive(Debug)]
pub struct CompiledJob {
    pub spec: JobSpec,
    /// Topological operator order established by validation.
    pub topo: Vec<usize>,
}

/// Validates and "distributes" a spec: the canonical wire form is decoded
/// once per node, mirroring a real deployment. Counts as one compilation.
pub(crate) fn compile_and_distribute(
    spec: &JobSpec,
    cluster: &Cluster,
) -> Result<Vec<Arc<CompiledJob>>, InvalidSpec> {
    let topo = spec.validate(cluster.node_count())?;
    cluster.inner.compile_count.fetch_add(1, Ordering::SeqCst);
    let wire = serde_json::to_vec(spec).expect("job specs serialize");
    let mut per_node = Vec::with_capacity(cluster.node_count());
    for _ in 0..cluster.node_count() {
        let spec: JobSpec = serde_json::from_slice(&wire).expect("job specs deserialize");
        per_node.push(Arc::new(CompiledJob {
            spec,
            topo: topo.clone(),
        }));
    }
    Ok(per_node)
}

/// Compiles and instantiates a job from scratch (the non-predeployed path).
pub fn build_job(spec: JobSpec, cluster: &Cluster) -> Result<JobInstance, InvalidSpec> {
    let per_node = compile_and_distribute(&spec, cluster)?;
    Ok(JobInstance {
        per_node,
        bindings: Arc::new(SlotBindings::new()),
        cluster: cluster.clone(),
        in_flight: None,
    })
}

/// A built but not yet running job: one operator instance per declared
/// partition, wired per the connectors.
pub struct JobInstance {
    pub(crate) per_node: Vec<Arc<CompiledJob>>,
    pub(crate) bindings: Arc<SlotBindings>,
    pub(crate) cluster: Cluster,
    pub(crate) in_flight: Option<crate::deploy::InFlightGuard>,
}

#[derive(Debug)]
pub struct JobState {
    abort: AtomicBool,
    failures: Mutex<Vec<(String, OpError)>>,
    collected: Mutex<Vec<Record>>,
    feed_eof_partitions: Mutex<HashSet<usize>>,
}

impl JobState {
    pub fn abort_requested(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }

    pub(crate) fn record_failure(&self, op: &str, error: OpError) {
        self.abort.store(true, Ordering::Relaxed);
        self.failures.lock().unwrap().push((op.to_string(), error));
    }

    pub(crate) fn collect(&self, record: Record) {
        self.collected.lock().unwrap().push(record);
    }

    /// Marks that this partition observed the feed EOF this invocation.
    pub(crate) fn mark_feed_eof(&self, partition: usize) {
        self.feed_eof_partitions.lock().unwrap().insert(partition);
    }

    pub(crate) fn feed_eof(&self, partition: usize) -> bool {
        self.feed_eof_partitions.lock().unwrap().contains(&partition)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub records_in: u64,
    pub records_out: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Completed,
    Failed { op: String, cause: String },
}

/// Outcome of one job run: per-operator record counts and wall time.
#[derive(Debug)]
pub struct JobResult {
    pub outcome: JobOutcome,
    pub counts: BTreeMap<String, OpCounts>,
    pub wall: Duration,
    pub collected: Vec<Record>,
    pub feed_eof_partitions: HashSet<usize>,
}

impl JobResult {
    pub fn is_ok(&self) -> bool {
        self.outcome == JobOutcome::Completed
    }

    pub fn records_in(&self, op: &str) -> u64 {
        self.counts.get(op).map(|c| c.records_in).unwrap_or(0)
    }

    pub fn records_out(&self, op: &str) -> u64 {
        self.counts.get(op).map(|c| c.records_out).unwrap_or(0)
    }
}

#[derive(Debug)]
struct SharedCounts {
    records_in: AtomicU64,
    records_out: AtomicU64,
}

/// Receiving end of an operator's merged input: one channel fed by every
/// inbound connector, closed after an EOF from each producing partition.
pub(crate) struct InputChannel {
    rx: Receiver<Frame>,
    expected_eofs: usize,
    seen_eofs: usize,
    counts: Arc<SharedCounts>,
}

impl InputChannel {
    /// Next data frame, or None once all producers signalled EOF.
    pub fn recv(&mut self) -> Result<Option<Frame>, OpError> {
        loop {
            if self.seen_eofs >= self.expected_eofs {
                return Ok(None);
            }
            match self.rx.recv() {
                Ok(frame) if frame.is_eof => {
                    self.seen_eofs += 1;
                }
                Ok(frame) => {
                    self.counts
                        .records_in
                        .fetch_add(frame.record_count() as u64, Ordering::Relaxed);
                    return Ok(Some(frame));
                }
                Err(_) => return Err(OpError::Upstream),
            }
        }
    }
}

/// Sending side of one outbound connector for one producing partition.
pub(crate) struct OutputPort {
    kind: ConnectorKind,
    senders: Vec<SyncSender<Frame>>,
    source_partition: u32,
    sequences: Vec<u64>,
    rr_next: usize,
    eof_sent: bool,
    counts: Arc<SharedCounts>,
    abort: Arc<JobState>,
}

impl OutputPort {
    fn send_to(&mut self, target: usize, records: Vec<Vec<u8>>) -> Result<(), OpError> {
        if records.is_empty() {
            return Ok(());
        }
        self.counts
            .records_out
            .fetch_add(records.len() as u64, Ordering::Relaxed);
        let frame = Frame::data(self.source_partition, self.sequences[target], records);
        self.sequences[target] += 1;
        self.blocking_send(target, frame)
    }

    // bounded send that still notices job aborts
    fn blocking_send(&self, target: usize, frame: Frame) -> Result<(), OpError> {
        let mut frame = frame;
        loop {
            match self.senders[target].try_send(frame) {
                Ok(()) => return Ok(()),
                Err(TrySendError::Disconnected(_)) => return Err(OpError::Aborted),
                Err(TrySendError::Full(f)) => {
                    if self.abort.abort_requested() {
                        return Err(OpError::Aborted);
                    }
                    frame = f;
                    std::thread::sleep(Duration::from_micros(200));
                }
            }
        }
    }

    /// Routes one producer frame's records per the connector kind.
    pub fn send_records(&mut self, records: Vec<Vec<u8>>) -> Result<(), OpError> {
        if records.is_empty() {
            return Ok(());
        }
        match &self.kind {
            ConnectorKind::OneToOne => {
                let target = self.source_partition as usize;
                self.send_to(target, records)
            }
            ConnectorKind::RoundRobin => {
                let target = self.rr_next % self.senders.len();
                self.rr_next += 1;
                self.send_to(target, records)
            }
            ConnectorKind::Broadcast => {
                for target in 0..self.senders.len() {
                    self.send_to(target, records.clone())?;
                }
                Ok(())
            }
            ConnectorKind::HashPartition { key_fields } => {
                let key_fields = key_fields.clone();
                let partitions = self.senders.len();
                let mut buckets: Vec<Vec<Vec<u8>>> = vec![Vec::new(); partitions];
                for bytes in records {
                    let record = deserialize_record(&bytes)
                        .map_err(|e| OpError::Eval(e.to_string()))?;
                    let key = extract_primary_key(&record, &key_fields)
                        .map_err(|e| OpError::Key(e.to_string()))?;
                    buckets[hash_partition(&key, partitions)].push(bytes);
                }
                for (target, bucket) in buckets.into_iter().enumerate() {
                    self.send_to(target, bucket)?;
                }
                Ok(())
            }
        }
    }

    /// Broadcasts the EOF marker to every target exactly once.
    pub fn send_eof(&mut self) -> Result<(), OpError> {
        if self.eof_sent {
            return Ok(());
        }
        self.eof_sent = true;
        for target in 0..self.senders.len() {
            let frame = Frame::eof(self.source_partition, self.sequences[target]);
            self.sequences[target] += 1;
            self.blocking_send(target, frame)?;
        }
        Ok(())
    }
}

impl JobInstance {
    /// Spawns every operator partition and returns the running job.
    pub fn start(self) -> RunningJob {
        let started_at = Instant::now();
        let spec = &self.per_node[0].spec;
        let n_ops = spec.operators.len();
        let state = Arc::new(JobState {
            abort: AtomicBool::new(false),
            failures: Mutex::new(Vec::new()),
            collected: Mutex::new(Vec::new()),
            feed_eof_partitions: Mutex::new(HashSet::new()),
        });
        let counts: Vec<Arc<SharedCounts>> = (0..n_ops)
            .map(|_| {
                Arc::new(SharedCounts {
                    records_in: AtomicU64::new(0),
                    records_out: AtomicU64::new(0),
                })
            })
            .collect();

        // one channel per (operator, partition); every inbound connector
        // funnels into it
        let mut senders: Vec<Vec<Option<SyncSender<Frame>>>> = Vec::with_capacity(n_ops);
        let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> = Vec::with_capacity(n_ops);
        let mut expected: Vec<Vec<usize>> = Vec::with_capacity(n_ops);
        for op in &spec.operators {
            senders.push((0..op.partition_count).map(|_| None).collect());
            receivers.push((0..op.partition_count).map(|_| None).collect());
            expected.push(vec![0; op.partition_count]);
        }
        let index_of: HashMap<String, usize> = spec
            .operators
            .iter()
            .enumerate()
            .map(|(i, o)| (o.id.clone(), i))
            .collect();
        for c in &spec.connectors {
            let from = index_of[&c.from];
            let to = index_of[&c.to];
            for p in 0..spec.operators[to].partition_count {
                if senders[to][p].is_none() {
                    let (tx, rx) = std::sync::mpsc::sync_channel(CHANNEL_CAPACITY);
                    senders[to][p] = Some(tx);
                    receivers[to][p] = Some(rx);
                }
                expected[to][p] += spec.operators[from].partition_count;
            }
        }

        // output ports per (operator, partition)
        let mut ports: Vec<Vec<Vec<OutputPort>>> = spec
            .operators
            .iter()
            .map(|op| (0..op.partition_count).map(|_| Vec::new()).collect())
            .collect();
        for c in &spec.connectors {
            let from = index_of[&c.from];
            let to = index_of[&c.to];
            let target_senders: Vec<SyncSender<Frame>> = senders[to]
                .iter()
                .map(|s| s.as_ref().expect("channel created").clone())
                .collect();
            for p in 0..spec.operators[from].partition_count {
                ports[from][p].push(OutputPort {
                    kind: c.kind.clone(),
                    senders: target_senders.clone(),
                    source_partition: p as u32,
                    sequences: vec![0; target_senders.len()],
                    rr_next: 0,
                    eof_sent: false,
                    counts: counts[from].clone(),
                    abort: state.clone(),
                });
            }
        }
        drop(senders);

        let mut handles = Vec::new();
        // spawn in topological order so upstream operators come up first
        for &o in &self.per_node[0].topo {
            let op = &spec.operators[o];
            for p in 0..op.partition_count {
                let node = op.node_placement[p];
                // operators read the spec copy cached on their own node
                let descriptor = self.per_node[node].spec.operators[o].clone();
                let input = receivers[o][p].take().map(|rx| InputChannel {
                    rx,
                    expected_eofs: expected[o][p],
                    seen_eofs: 0,
                    counts: counts[o].clone(),
                });
                let outputs = std::mem::take(&mut ports[o][p]);
                let mut ctx = OpContext {
                    op_id: descriptor.id.clone(),
                    node,
                    partition: p,
                    partition_count: op.partition_count,
                    cluster: self.cluster.clone(),
                    input,
                    outputs,
                    state: state.clone(),
                    bindings: self.bindings.clone(),
                };
                let kind = descriptor.kind.clone();
                let thread_state = state.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("{}[{}]", descriptor.id, p))
                    .spawn(move || {
                        let result = match instantiate(&kind, &ctx) {
                            Ok(mut behavior) => behavior.run(&mut ctx),
                            Err(e) => Err(e),
                        };
                        match result {
                            Ok(()) => {
                                for port in &mut ctx.outputs {
                                    let _ = port.send_eof();
                                }
                            }
                            Err(e) => {
                                thread_state.record_failure(&ctx.op_id, e);
                                // outputs drop without EOF, aborting downstream
                            }
                        }
                    })
                    .expect("spawn operator thread");
                handles.push(handle);
            }
        }

        RunningJob {
            state,
            handles,
            counts,
            op_ids: spec.operators.iter().map(|o| o.id.clone()).collect(),
            started_at,
            _in_flight: self.in_flight,
        }
    }

    /// Builds, runs to completion, and reports.
    pub fn run(self) -> JobResult {
        self.start().wait()
    }
}

/// Control handle for a started job; safe to share for abort requests.
#[derive(Debug)]
pub struct RunningJob {
    state: Arc<JobState>,
    handles: Vec<std::thread::JoinHandle<()>>,
    counts: Vec<Arc<SharedCounts>>,
    op_ids: Vec<String>,
    started_at: Instant,
    _in_flight: Option<crate::deploy::InFlightGuard>,
}

impl RunningJob {
    pub fn abort(&self) {
        self.state.abort.store(true, Ordering::Relaxed);
    }

    pub fn state(&self) -> Arc<JobState> {
        self.state.clone()
    }

    /// Blocks until every operator finished and assembles the result.
    pub fn wait(self) -> JobResult {
        for handle in self.handles {
            let _ = handle.join();
        }
        let wall = self.started_at.elapsed();
        let failures = self.state.failures.lock().unwrap();
        let outcome = match failures
            .iter()
            .find(|(_, e)| !e.is_secondary())
            .or_else(|| failures.first())
        {
            Some((op, cause)) => JobOutcome::Failed {
                op: op.clone(),
                cause: cause.to_string(),
            },
            None => JobOutcome::Completed,
        };
        drop(failures);
        let counts = self
            .op_ids
            .iter()
            .zip(self.counts.iter())
            .map(|(id, c)| {
                (
                    id.clone(),
                    OpCounts {
                        records_in: c.records_in.load(Ordering::Relaxed),
                        records_out: c.records_out.load(Ordering::Relaxed),
                    },
                )
            })
            .collect();
        let collected = std::mem::take(&mut *self.state.collected.lock().unwrap());
        let feed_eof_partitions = self.state.feed_eof_partitions.lock().unwrap().clone();
        JobResult {
            outcome,
            counts,
            wall,
            collected,
            feed_eof_partitions,
        }
    }
}
