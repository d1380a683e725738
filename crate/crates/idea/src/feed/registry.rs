//! Shared per-feed runtime state reachable from operators: counters, stop
//! flags, pre-bound listeners, the compiled function, and stream-model
//! evaluators. Pure data; orchestration lives in the feed manager.

use crate::eval::{CompiledFunction, EvalContext, StreamEvaluator};
use std::collections::HashMap;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

/// Lossless-pipeline counters; `stored + skipped == ingested` on clean stop.
#[derive(Debug, Default)]
pub struct FeedMetrics {
    adapter_lines: AtomicU64,
    ingested: AtomicU64,
    parsed: AtomicU64,
    skipped: AtomicU64,
    stored: AtomicU64,
}

impl FeedMetrics {
    pub fn bump_adapter_lines(&self) {
        self.adapter_lines.fetch_add(1, Ordering::Relaxed);
    }

    pub fn bump_ingested(&self, n: u64) {
        self.ingested.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bump_parsed(&self) {
        self.parsed.fetch_add(1, Ordering::Relaxed);
    }

    pub fn bump_skipped(&self, n: u64) {
        self.skipped.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bump_stored(&self) {
        self.stored.fetch_add(1, Ordering::Relaxed);
    }

    pub fn adapter_lines(&self) -> u64 {
        self.adapter_lines.load(Ordering::SeqCst)
    }

    pub fn ingested(&self) -> u64 {
        self.ingested.load(Ordering::SeqCst)
    }

    pub fn parsed(&self) -> u64 {
        self.parsed.load(Ordering::SeqCst)
    }

    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::SeqCst)
    }

    pub fn stored(&self) -> u64 {
        self.stored.load(Ordering::SeqCst)
    }
}

/// One computing-job invocation: its start, wall time, and record count. The
/// wall time of an invocation is the feed's refresh period.
#[derive(Debug, Clone)]
pub struct InvocationSample {
    pub seq: u64,
    pub started: Instant,
    pub wall: Duration,
    pub records: u64,
}

/// Runtime state of one active feed.
pub struct FeedRuntime {
    pub name: String,
    pub metrics: FeedMetrics,
    stop_requested: AtomicBool,
    storage_eof_sent: Vec<AtomicBool>,
    partition_eof: Vec<AtomicBool>,
    listeners: Mutex<HashMap<usize, TcpListener>>,
    function: Mutex<Option<Arc<CompiledFunction>>>,
    eval_ctx: Mutex<Option<EvalContext>>,
    stream_evals: Mutex<HashMap<usize, Arc<StreamEvaluator>>>,
    invocations: Mutex<Vec<InvocationSample>>,
    current_invocation: AtomicU64,
    audit: AtomicBool,
}

impl std::fmt::Debug for FeedRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedRuntime").field("name", &self.name).finish()
    }
}

impl FeedRuntime {
    pub fn new(name: &str, partitions: usize) -> Arc<FeedRuntime> {
        Arc::new(FeedRuntime {
            name: name.to_string(),
            metrics: FeedMetrics::default(),
            stop_requested: AtomicBool::new(false),
            storage_eof_sent: (0..partitions).map(|_| AtomicBool::new(false)).collect(),
            partition_eof: (0..partitions).map(|_| AtomicBool::new(false)).collect(),
            listeners: Mutex::new(HashMap::new()),
            function: Mutex::new(None),
            eval_ctx: Mutex::new(None),
            stream_evals: Mutex::new(HashMap::new()),
            invocations: Mutex::new(Vec::new()),
            current_invocation: AtomicU64::new(0),
            audit: AtomicBool::new(false),
        })
    }

    pub fn request_stop(&self) {
        self.stop_requested.store(true, Ordering::SeqCst);
    }

    pub fn stop_requested(&self) -> bool {
        self.stop_requested.load(Ordering::SeqCst)
    }

    /// True once, per partition; later callers see the EOF as already sent.
    pub fn storage_eof_already_sent(&self, partition: usize) -> bool {
        self.storage_eof_sent[partition].swap(true, Ordering::SeqCst)
    }

    pub fn mark_partition_eof(&self, partition: usize) {
        self.partition_eof[partition].store(true, Ordering::SeqCst);
    }

    pub fn all_partitions_eof(&self) -> bool {
        self.partition_eof
            .iter()
            .all(|b| b.load(Ordering::SeqCst))
    }

    pub fn put_listener(&self, partition: usize, listener: TcpListener) {
        self.listeners.lock().unwrap().insert(partition, listener);
    }

    pub fn take_listener(&self, partition: usize) -> Option<TcpListener> {
        self.listeners.lock().unwrap().remove(&partition)
    }

    pub fn set_function(&self, function: Arc<CompiledFunction>, ctx: EvalContext) {
        *self.function.lock().unwrap() = Some(function);
        *self.eval_ctx.lock().unwrap() = Some(ctx);
    }

    pub fn compiled_function(&self) -> Option<Arc<CompiledFunction>> {
        self.function.lock().unwrap().clone()
    }

    pub fn eval_context(&self) -> Option<EvalContext> {
        self.eval_ctx.lock().unwrap().clone()
    }

    pub fn put_stream_evaluator(&self, partition: usize, evaluator: StreamEvaluator) {
        self.stream_evals
            .lock()
            .unwrap()
            .insert(partition, Arc::new(evaluator));
    }

    pub fn stream_evaluator(&self, partition: usize) -> Option<Arc<StreamEvaluator>> {
        self.stream_evals.lock().unwrap().get(&partition).cloned()
    }

    pub fn begin_invocation(&self) -> u64 {
        self.current_invocation.fetch_add(1, Ordering::SeqCst) + 1
    }

    pub fn current_invocation(&self) -> u64 {
        self.current_invocation.load(Ordering::SeqCst)
    }

    pub fn record_invocation(&self, sample: InvocationSample) {
        self.invocations.lock().unwrap().push(sample);
    }

    pub fn invocations(&self) -> Vec<InvocationSample> {
        self.invocations.lock().unwrap().clone()
    }

    pub fn enable_audit(&self) {
        self.audit.store(true, Ordering::SeqCst);
    }

    pub fn audit_enabled(&self) -> bool {
        self.audit.load(Ordering::SeqCst)
    }
}

/// Registry of active feed runtimes, shared with the dataflow operators.
#[derive(Debug, Default)]
pub struct FeedRegistry {
    feeds: RwLock<HashMap<String, Arc<FeedRuntime>>>,
}

impl FeedRegistry {
    pub fn new() -> Arc<FeedRegistry> {
        Arc::new(FeedRegistry::default())
    }

    pub fn insert(&self, runtime: Arc<FeedRuntime>) {
        self.feeds
            .write()
            .unwrap()
            .insert(runtime.name.clone(), runtime);
    }

    pub fn get(&self, name: &str) -> Option<Arc<FeedRuntime>> {
        self.feeds.read().unwrap().get(name).cloned()
    }

    pub fn remove(&self, name: &str) -> Option<Arc<FeedRuntime>> {
        self.feeds.write().unwrap().remove(name)
    }
}
