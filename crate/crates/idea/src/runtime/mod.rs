//! Partitioned dataflow runtime: job specifications run as one thread per
//! operator partition on a simulated cluster of N node contexts in one
//! process. Frames of serialized records flow through bounded channels
//! routed by connectors.

mod exec;
mod job;
mod operators;

pub use exec::{
    build_job, hash_partition, JobInstance, JobOutcome, JobResult, JobState, OpCounts, OpError,
    RunningJob, CHANNEL_CAPACITY,
};
pub use job::{
    ConnectorDescriptor, ConnectorKind, InvalidSpec, JobSpec, NodeId, OperatorDescriptor,
    OperatorKind,
};
pub use operators::{CustomOperator, CustomOperatorFactory, OpContext, OperatorBehavior};
pub(crate) use exec::compile_and_distribute as exec_compile_and_distribute;

use crate::eval::{FunctionCatalog, NativeRegistry};
use crate::feed::FeedRegistry;
use crate::holders::HolderManager;
use crate::storage::StorageEngine;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

/// Records cap per frame; frames also close at [`DEFAULT_FRAME_BYTES`].
pub const DEFAULT_FRAME_RECORDS: usize = 128;
pub const DEFAULT_FRAME_BYTES: usize = 64 * 1024;

/// A unit of data exchange: a batch of serialized records from one
/// producing partition. EOF frames carry no records and close the channel
/// from that producer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Frame {
    pub source_partition: u32,
    pub sequence: u64,
    pub is_eof: bool,
    pub records: Vec<Vec<u8>>,
}

impl Frame {
    pub fn data(source_partition: u32, sequence: u64, records: Vec<Vec<u8>>) -> Frame {
        Frame {
            source_partition,
            sequence,
            is_eof: false,
            records,
        }
    }

    pub fn eof(source_partition: u32, sequence: u64) -> Frame {
        Frame {
            source_partition,
            sequence,
            is_eof: true,
            records: Vec::new(),
        }
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn payload_bytes(&self) -> usize {
        self.records.iter().map(Vec::len).sum()
    }
}

/// Packs records into frames of at most 128 records or 64 KiB of payload,
/// whichever closes first.
pub struct FrameBuilder {
    records: Vec<Vec<u8>>,
    bytes: usize,
}

impl Default for FrameBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameBuilder {
    pub fn new() -> FrameBuilder {
        FrameBuilder {
            records: Vec::with_capacity(DEFAULT_FRAME_RECORDS),
            bytes: 0,
        }
    }

    /// Adds a record; returns a full frame's records when the frame closed.
    pub fn push(&mut self, record: Vec<u8>) -> Option<Vec<Vec<u8>>> {
        self.bytes += record.len();
        self.records.push(record);
        if self.records.len() >= DEFAULT_FRAME_RECORDS || self.bytes >= DEFAULT_FRAME_BYTES {
            self.bytes = 0;
            Some(std::mem::take(&mut self.records))
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<Vec<Vec<u8>>> {
        self.bytes = 0;
        if self.records.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.records))
        }
    }
}

/// Shared engine services operators reach at runtime.
#[derive(Clone)]
pub struct RuntimeServices {
    pub storage: Arc<StorageEngine>,
    pub functions: Arc<FunctionCatalog>,
    pub natives: Arc<NativeRegistry>,
    pub feeds: Arc<FeedRegistry>,
}

struct NodeContext {
    holder_manager: HolderManager,
    /// Predeployed compilation materials cached on this node.
    job_cache: Mutex<HashMap<u64, Arc<exec::CompiledJob>>>,
}

pub(crate) struct ClusterInner {
    nodes: Vec<NodeContext>,
    pub(crate) compile_count: AtomicU64,
    pub(crate) next_id: AtomicU64,
    pub(crate) deployed: Mutex<HashMap<u64, crate::deploy::DeployedMeta>>,
    custom_ops: RwLock<HashMap<String, Arc<dyn CustomOperatorFactory>>>,
    services: OnceLock<RuntimeServices>,
}

/// Handle to the simulated cluster: N node contexts in one process. Node 0
/// plays the controller, where feed management runs.
#[derive(Clone)]
pub struct Cluster {
    pub(crate) inner: Arc<ClusterInner>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Cluster({} nodes)", self.node_count())
    }
}

impl Cluster {
    pub fn new(node_count: usize) -> Cluster {
        let nodes = (0..node_count.max(1))
            .map(|_| NodeContext {
                holder_manager: HolderManager::new(),
                job_cache: Mutex::new(HashMap::new()),
            })
            .collect();
        Cluster {
            inner: Arc::new(ClusterInner {
                nodes,
                compile_count: AtomicU64::new(0),
                next_id: AtomicU64::new(1),
                deployed: Mutex::new(HashMap::new()),
                custom_ops: RwLock::new(HashMap::new()),
                services: OnceLock::new(),
            }),
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.nodes.len()
    }

    pub fn all_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count()).collect()
    }

    pub fn holder_manager(&self, node: NodeId) -> &HolderManager {
        &self.inner.nodes[node].holder_manager
    }

    /// Total spec compilations performed; predeployed invocations must not
    /// move this counter.
    pub fn compile_count(&self) -> u64 {
        self.inner.compile_count.load(Ordering::SeqCst)
    }

    pub fn set_services(&self, services: RuntimeServices) {
        let _ = self.inner.services.set(services);
    }

    pub fn services(&self) -> Option<&RuntimeServices> {
        self.inner.services.get()
    }

    pub fn register_custom_op(&self, name: &str, factory: Arc<dyn CustomOperatorFactory>) {
        self.inner
            .custom_ops
            .write()
            .unwrap()
            .insert(name.to_string(), factory);
    }

    pub(crate) fn custom_op(&self, name: &str) -> Option<Arc<dyn CustomOperatorFactory>> {
        self.inner.custom_ops.read().unwrap().get(name).cloned()
    }

    pub(crate) fn node_cache(&self, node: NodeId) -> &Mutex<HashMap<u64, Arc<exec::CompiledJob>>> {
        &self.inner.nodes[node].job_cache
    }

    pub(crate) fn fresh_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::SeqCst)
    }
}
