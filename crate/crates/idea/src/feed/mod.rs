//! Feed lifecycle: a long-running intake job (adapter, round-robin
//! partitioner, passive intake holders), a predeployed computing job
//! (poll, parse, enrich, push) invoked once per batch by the active feed
//! manager on the controller node, and a long-running storage job (active
//! storage holders, hash partitioner, partition writers).
//!
//! Stopping a feed makes the intake stop accepting data and append an EOF
//! record; in-flight batches drain, the final partial batch is processed
//! without waiting to fill, and the storage job stops after the last
//! computing invocation.

mod registry;

pub use registry::{FeedMetrics, FeedRegistry, FeedRuntime, InvocationSample};

use crate::deploy::{deploy, invoke, undeploy, DeployedJobId, JobTemplate, SlotBindings};
use crate::eval::{
    compile_function, open_stream_evaluator, CompileOptions, EvalContext, EvalError, EvalModel,
    FunctionDecl, FunctionDeclBody, Statefulness,
};
use crate::holders::{HolderId, HolderMode, PartitionHolder, DEFAULT_HOLDER_CAPACITY};
use crate::runtime::{
    Cluster, ConnectorKind, JobSpec, NodeId, OperatorDescriptor, OperatorKind, RunningJob,
    RuntimeServices,
};
use std::collections::HashMap;
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Holder entity for a feed's intake stage.
pub fn intake_entity(feed: &str) -> String {
    format!("{feed}:intake")
}

/// Holder entity for a feed's storage stage.
pub fn storage_entity(feed: &str) -> String {
    format!("{feed}:storage")
}

pub const DEFAULT_BATCH_SIZE: usize = 420;

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterConfig {
    /// Newline-delimited records over TCP; partition i listens on
    /// `base_port + i`, one partition per intake node.
    Socket { host: String, base_port: u16 },
    /// Replays a newline-delimited file at a target rate (0 = unthrottled).
    FileReplay { path: PathBuf, rate_per_sec: u32 },
}

/// Declarative feed configuration.
#[derive(Debug, Clone)]
pub struct FeedDescriptor {
    pub name: String,
    pub type_name: String,
    pub adapter: AdapterConfig,
    pub target_dataset: Option<String>,
    pub applied_function: Option<String>,
    pub batch_size: usize,
    pub model: EvalModel,
    pub intake_nodes: Vec<NodeId>,
    pub holder_capacity: usize,
    pub allow_stale_stream: bool,
    pub use_indexes: bool,
    pub audit_invocations: bool,
}

impl FeedDescriptor {
    pub fn new(
        name: impl Into<String>,
        type_name: impl Into<String>,
        adapter: AdapterConfig,
    ) -> Self {
        FeedDescriptor {
            name: name.into(),
            type_name: type_name.into(),
            adapter,
            target_dataset: None,
            applied_function: None,
            batch_size: DEFAULT_BATCH_SIZE,
            model: EvalModel::PerBatch,
            intake_nodes: vec![0],
            holder_capacity: DEFAULT_HOLDER_CAPACITY,
            allow_stale_stream: false,
            use_indexes: true,
            audit_invocations: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedState {
    Created,
    Connected,
    Running,
    Stopping,
    Stopped,
}

#[derive(Debug, thiserror::Error)]
pub enum FeedError {
    #[error("unknown feed {0:?}")]
    UnknownFeed(String),
    #[error("feed {0:?} already exists")]
    FeedExists(String),
    #[error("illegal feed state: expected {expected:?}, feed is {actual:?}")]
    IllegalFeedState {
        expected: FeedState,
        actual: FeedState,
    },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("cannot bind adapter socket: {0}")]
    Bind(String),
    #[error("replay file not found: {0}")]
    FileNotFound(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid feed job: {0}")]
    Job(String),
    #[error("feed descriptor invalid: {0}")]
    Descriptor(String),
}

/// Counters and refresh periods reported after a feed run.
#[derive(Debug, Clone)]
pub struct FeedSummary {
    pub adapter_lines: u64,
    pub ingested: u64,
    pub parsed: u64,
    pub stored: u64,
    pub skipped: u64,
    pub invocations: Vec<InvocationSample>,
    pub failure: Option<String>,
}

impl FeedSummary {
    pub fn refresh_periods(&self) -> Vec<Duration> {
        self.invocations.iter().map(|i| i.wall).collect()
    }
}

struct FeedEntry {
    descriptor: FeedDescriptor,
    state: FeedState,
    runtime: Option<Arc<FeedRuntime>>,
    intake_job: Option<RunningJob>,
    storage_job: Option<RunningJob>,
    afm_loop: Option<std::thread::JoinHandle<()>>,
    deployed: Option<DeployedJobId>,
    failure: Arc<Mutex<Option<String>>>,
}

/// The active feed manager: creates, connects, starts, and stops feeds, and
/// keeps exactly one computing-job invocation in flight per running feed.
/// Conceptually it lives on the controller node (node 0).
pub struct FeedManager {
    cluster: Cluster,
    services: RuntimeServices,
    feeds: Mutex<HashMap<String, FeedEntry>>,
}

impl FeedManager {
    pub fn new(cluster: Cluster, services: RuntimeServices) -> FeedManager {
        FeedManager {
            cluster,
            services,
            feeds: Mutex::new(HashMap::new()),
        }
    }

    pub fn create_feed(&self, descriptor: FeedDescriptor) -> Result<(), FeedError> {
        if descriptor.batch_size == 0 {
            return Err(FeedError::Descriptor("batch size must be at least 1".into()));
        }
        if descriptor.intake_nodes.is_empty()
            || descriptor
                .intake_nodes
                .iter()
                .any(|&n| n >= self.cluster.node_count())
        {
            return Err(FeedError::Descriptor(
                "intake nodes must name existing cluster nodes".into(),
            ));
        }
        let mut feeds = self.feeds.lock().unwrap();
        if feeds.contains_key(&descriptor.name) {
            return Err(FeedError::FeedExists(descriptor.name.clone()));
        }
        feeds.insert(
            descriptor.name.clone(),
            FeedEntry {
                descriptor,
                state: FeedState::Created,
                runtime: None,
                intake_job: None,
                storage_job: None,
                afm_loop: None,
                deployed: None,
                failure: Arc::new(Mutex::new(None)),
            },
        );
        Ok(())
    }

    pub fn state(&self, name: &str) -> Result<FeedState, FeedError> {
        let feeds = self.feeds.lock().unwrap();
        feeds
            .get(name)
            .map(|e| e.state)
            .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))
    }

    pub fn connect_feed(
        &self,
        name: &str,
        dataset: &str,
        function: Option<&str>,
    ) -> Result<(), FeedError> {
        if !self.services.storage.has_dataset(dataset) {
            return Err(FeedError::UnknownDataset(dataset.to_string()));
        }
        if let Some(f) = function {
            if !self.services.functions.contains(f) && !self.services.natives.contains(f) {
                return Err(FeedError::UnknownFunction(f.to_string()));
            }
        }
        let mut feeds = self.feeds.lock().unwrap();
        let entry = feeds
            .get_mut(name)
            .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
        if entry.state != FeedState::Created {
            return Err(FeedError::IllegalFeedState {
                expected: FeedState::Created,
                actual: entry.state,
            });
        }
        entry.descriptor.target_dataset = Some(dataset.to_string());
        entry.descriptor.applied_function = function.map(|f| f.to_string());
        entry.state = FeedState::Connected;
        Ok(())
    }

    /// Starts the intake and storage jobs, predeploys the computing job,
    /// and launches the invocation loop.
    pub fn start_feed(&self, name: &str) -> Result<(), FeedError> {
        let mut feeds = self.feeds.lock().unwrap();
        let entry = feeds
            .get_mut(name)
            .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
        if entry.state != FeedState::Connected {
            return Err(FeedError::IllegalFeedState {
                expected: FeedState::Connected,
                actual: entry.state,
            });
        }
        let descriptor = entry.descriptor.clone();
        let dataset_name = descriptor
            .target_dataset
            .clone()
            .ok_or_else(|| FeedError::Descriptor("feed is not connected to a dataset".into()))?;
        let dataset = self
            .services
            .storage
            .dataset(&dataset_name)
            .map_err(|_| FeedError::UnknownDataset(dataset_name.clone()))?;
        let nodes = self.cluster.node_count();
        let runtime = FeedRuntime::new(name, nodes);
        if descriptor.audit_invocations {
            runtime.enable_audit();
        }

        // compile the attached function and pre-open stream evaluators so
        // policy violations surface before anything runs
        let eval_ctx = EvalContext::new(
            self.services.storage.clone(),
            self.services.natives.clone(),
        )
        .with_stale_stream(descriptor.allow_stale_stream)
        .with_indexes(descriptor.use_indexes);
        if let Some(fname) = &descriptor.applied_function {
            let decl = match self.services.functions.get(fname) {
                Some(decl) => decl,
                None if self.services.natives.contains(fname) => Arc::new(FunctionDecl {
                    name: fname.clone(),
                    params: vec!["record".into()],
                    body: FunctionDeclBody::Native {
                        factory: fname.clone(),
                        resource: self.services.natives.resource_of(fname),
                    },
                }),
                None => return Err(FeedError::UnknownFunction(fname.clone())),
            };
            let compiled = compile_function(
                &decl,
                &self.services.storage,
                &self.services.natives,
                CompileOptions {
                    use_indexes: descriptor.use_indexes,
                    allow_function_calls: false,
                },
            )
            .map_err(EvalError::Compile)?;
            if descriptor.model == EvalModel::Stream {
                if compiled.statefulness == Statefulness::Stateful && !descriptor.allow_stale_stream
                {
                    return Err(FeedError::Eval(EvalError::StatefulStreamRejected));
                }
                for p in 0..nodes {
                    let evaluator = open_stream_evaluator(&compiled, &eval_ctx)?;
                    runtime.put_stream_evaluator(p, evaluator);
                }
            }
            runtime.set_function(compiled, eval_ctx);
        }

        // bind adapter resources up front so BindError/FileNotFound surface here
        match &descriptor.adapter {
            AdapterConfig::Socket { host, base_port } => {
                for (i, _) in descriptor.intake_nodes.iter().enumerate() {
                    let addr = (host.as_str(), base_port + i as u16);
                    let listener =
                        TcpListener::bind(addr).map_err(|e| FeedError::Bind(e.to_string()))?;
                    runtime.put_listener(i, listener);
                }
            }
            AdapterConfig::FileReplay { path, .. } => {
                if !path.exists() {
                    return Err(FeedError::FileNotFound(path.display().to_string()));
                }
            }
        }

        // register the cross-job holders
        let all_nodes: Vec<NodeId> = (0..nodes).collect();
        for &node in &all_nodes {
            self.cluster
                .holder_manager(node)
                .register(PartitionHolder::new(
                    HolderId::new(intake_entity(name), node),
                    HolderMode::Passive,
                    descriptor.holder_capacity,
                ))
                .map_err(|e| FeedError::Job(e.to_string()))?;
            self.cluster
                .holder_manager(node)
                .register(PartitionHolder::new(
                    HolderId::new(storage_entity(name), node),
                    HolderMode::Active,
                    descriptor.holder_capacity,
                ))
                .map_err(|e| FeedError::Job(e.to_string()))?;
        }
        self.services.feeds.insert(runtime.clone());

        // intake job: adapter -> partitioner -> intake holders
        let adapter_kind = match &descriptor.adapter {
            AdapterConfig::Socket { host, base_port } => OperatorKind::SocketAdapter {
                feed: name.to_string(),
                host: host.clone(),
                base_port: *base_port,
            },
            AdapterConfig::FileReplay { path, rate_per_sec } => OperatorKind::FileReplayAdapter {
                feed: name.to_string(),
                path: path.display().to_string(),
                rate_per_sec: *rate_per_sec,
            },
        };
        let mut intake = JobSpec::new();
        intake.add_operator(OperatorDescriptor::on_nodes(
            "intake-adapter",
            adapter_kind,
            descriptor.intake_nodes.clone(),
        ));
        intake.add_operator(OperatorDescriptor::on_nodes(
            "intake-partitioner",
            OperatorKind::Partitioner,
            descriptor.intake_nodes.clone(),
        ));
        intake.add_operator(OperatorDescriptor::on_nodes(
            "intake-holder",
            OperatorKind::OfferToHolder {
                entity: intake_entity(name),
            },
            all_nodes.clone(),
        ));
        intake.connect(
            ConnectorKind::OneToOne,
            "intake-adapter",
            "intake-partitioner",
        );
        intake.connect(
            ConnectorKind::RoundRobin,
            "intake-partitioner",
            "intake-holder",
        );

        // storage job: storage holders -> hash partitioner -> writers
        let mut storage = JobSpec::new();
        storage.add_operator(OperatorDescriptor::on_nodes(
            "storage-holder",
            OperatorKind::DrainHolder {
                entity: storage_entity(name),
            },
            all_nodes.clone(),
        ));
        storage.add_operator(OperatorDescriptor::on_nodes(
            "storage-partitioner",
            OperatorKind::Partitioner,
            all_nodes.clone(),
        ));
        storage.add_operator(OperatorDescriptor::on_nodes(
            "storage-writer",
            OperatorKind::StorageWriter {
                dataset: dataset_name.clone(),
                feed: Some(name.to_string()),
            },
            all_nodes.clone(),
        ));
        storage.connect(
            ConnectorKind::OneToOne,
            "storage-holder",
            "storage-partitioner",
        );
        storage.connect(
            ConnectorKind::HashPartition {
                key_fields: dataset.descriptor().primary_key.clone(),
            },
            "storage-partitioner",
            "storage-writer",
        );

        // computing job template: poll -> parse -> enrich -> push
        let mut computing = JobSpec::new();
        computing.add_operator(OperatorDescriptor::on_nodes(
            "compute-poll",
            OperatorKind::PollHolder {
                entity: intake_entity(name),
                batch_size: descriptor.batch_size,
                feed: Some(name.to_string()),
            },
            all_nodes.clone(),
        ));
        computing.add_operator(OperatorDescriptor::on_nodes(
            "compute-parser",
            OperatorKind::Parser {
                feed: Some(name.to_string()),
                required_key: Some(dataset.descriptor().primary_key.clone()),
            },
            all_nodes.clone(),
        ));
        let mut tail = "compute-parser".to_string();
        computing.connect(ConnectorKind::OneToOne, "compute-poll", "compute-parser");
        if let Some(fname) = &descriptor.applied_function {
            computing.add_operator(OperatorDescriptor::on_nodes(
                "compute-udf",
                OperatorKind::UdfEval {
                    function: fname.clone(),
                    model: descriptor.model,
                    feed: Some(name.to_string()),
                },
                all_nodes.clone(),
            ));
            computing.connect(ConnectorKind::OneToOne, &tail, "compute-udf");
            tail = "compute-udf".to_string();
        }
        computing.add_operator(OperatorDescriptor::on_nodes(
            "compute-sink",
            OperatorKind::FeedComputeSink {
                feed: name.to_string(),
            },
            all_nodes.clone(),
        ));
        computing.connect(ConnectorKind::OneToOne, &tail, "compute-sink");

        let intake_job = crate::runtime::build_job(intake, &self.cluster)
            .map_err(|e| FeedError::Job(e.to_string()))?
            .start();
        let storage_job = crate::runtime::build_job(storage, &self.cluster)
            .map_err(|e| FeedError::Job(e.to_string()))?
            .start();
        let deployed = deploy(
            &self.cluster,
            &JobTemplate {
                spec: computing,
                parameter_slots: Vec::new(),
            },
        )
        .map_err(|e| FeedError::Job(e.to_string()))?;

        // the invocation loop: one computing job in flight per feed, a new
        // one as soon as the previous finishes, until the feed EOF
        let afm_runtime = runtime.clone();
        let afm_cluster = self.cluster.clone();
        let afm_failure = entry.failure.clone();
        let afm_loop = std::thread::Builder::new()
            .name(format!("afm-{name}"))
            .spawn(move || loop {
                let seq = afm_runtime.begin_invocation();
                let started = Instant::now();
                let job = match invoke(&afm_cluster, deployed, SlotBindings::new()) {
                    Ok(job) => job,
                    Err(e) => {
                        *afm_failure.lock().unwrap() = Some(e.to_string());
                        break;
                    }
                };
                let result = job.wait();
                let records = result.records_out("compute-poll");
                afm_runtime.record_invocation(InvocationSample {
                    seq,
                    started,
                    wall: started.elapsed(),
                    records,
                });
                if !result.is_ok() {
                    if let crate::runtime::JobOutcome::Failed { op, cause } = &result.outcome {
                        *afm_failure.lock().unwrap() = Some(format!("{op}: {cause}"));
                    }
                    afm_runtime.request_stop();
                    break;
                }
                if afm_runtime.all_partitions_eof() {
                    break;
                }
            })
            .expect("spawn feed manager loop");

        entry.runtime = Some(runtime);
        entry.intake_job = Some(intake_job);
        entry.storage_job = Some(storage_job);
        entry.afm_loop = Some(afm_loop);
        entry.deployed = Some(deployed);
        entry.state = FeedState::Running;
        Ok(())
    }

    /// Stops a running feed: the intake stops accepting data and emits the
    /// EOF record, queued batches drain, and the storage job finishes.
    pub fn stop_feed(&self, name: &str) -> Result<FeedSummary, FeedError> {
        {
            let mut feeds = self.feeds.lock().unwrap();
            let entry = feeds
                .get_mut(name)
                .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
            if entry.state != FeedState::Running {
                return Err(FeedError::IllegalFeedState {
                    expected: FeedState::Running,
                    actual: entry.state,
                });
            }
            entry.state = FeedState::Stopping;
            if let Some(rt) = &entry.runtime {
                rt.request_stop();
            }
        }
        self.drain(name)
    }

    /// Waits for a feed that ends on its own (file replay) to drain fully.
    pub fn wait_until_stopped(&self, name: &str) -> Result<FeedSummary, FeedError> {
        {
            let mut feeds = self.feeds.lock().unwrap();
            let entry = feeds
                .get_mut(name)
                .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
            match entry.state {
                FeedState::Running | FeedState::Stopping => {}
                FeedState::Stopped => return self.summary_locked(entry),
                other => {
                    return Err(FeedError::IllegalFeedState {
                        expected: FeedState::Running,
                        actual: other,
                    })
                }
            }
            entry.state = FeedState::Stopping;
        }
        self.drain(name)
    }

    fn drain(&self, name: &str) -> Result<FeedSummary, FeedError> {
        // take the handles out so joins happen without holding the lock
        let (intake, afm, storage) = {
            let mut feeds = self.feeds.lock().unwrap();
            let entry = feeds
                .get_mut(name)
                .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
            (
                entry.intake_job.take(),
                entry.afm_loop.take(),
                entry.storage_job.take(),
            )
        };
        if let Some(job) = intake {
            let result = job.wait();
            if let crate::runtime::JobOutcome::Failed { op, cause } = &result.outcome {
                self.note_failure(name, &format!("{op}: {cause}"));
            }
        }
        if let Some(handle) = afm {
            let _ = handle.join();
        }
        if let Some(job) = storage {
            let result = job.wait();
            if let crate::runtime::JobOutcome::Failed { op, cause } = &result.outcome {
                self.note_failure(name, &format!("{op}: {cause}"));
            }
        }
        let mut feeds = self.feeds.lock().unwrap();
        let entry = feeds
            .get_mut(name)
            .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
        if let Some(id) = entry.deployed.take() {
            let _ = undeploy(&self.cluster, id);
        }
        for node in 0..self.cluster.node_count() {
            let _ = self
                .cluster
                .holder_manager(node)
                .deregister(&HolderId::new(intake_entity(name), node));
            let _ = self
                .cluster
                .holder_manager(node)
                .deregister(&HolderId::new(storage_entity(name), node));
        }
        entry.state = FeedState::Stopped;
        self.summary_locked(entry)
    }

    fn note_failure(&self, name: &str, cause: &str) {
        if let Some(entry) = self.feeds.lock().unwrap().get(name) {
            let mut failure = entry.failure.lock().unwrap();
            if failure.is_none() {
                *failure = Some(cause.to_string());
            }
        }
    }

    fn summary_locked(&self, entry: &FeedEntry) -> Result<FeedSummary, FeedError> {
        let runtime = entry
            .runtime
            .as_ref()
            .ok_or_else(|| FeedError::Job("feed never started".into()))?;
        Ok(FeedSummary {
            adapter_lines: runtime.metrics.adapter_lines(),
            ingested: runtime.metrics.ingested(),
            parsed: runtime.metrics.parsed(),
            stored: runtime.metrics.stored(),
            skipped: runtime.metrics.skipped(),
            invocations: runtime.invocations(),
            failure: entry.failure.lock().unwrap().clone(),
        })
    }

    pub fn summary(&self, name: &str) -> Result<FeedSummary, FeedError> {
        let feeds = self.feeds.lock().unwrap();
        let entry = feeds
            .get(name)
            .ok_or_else(|| FeedError::UnknownFeed(name.to_string()))?;
        self.summary_locked(entry)
    }

    pub fn runtime(&self, name: &str) -> Option<Arc<FeedRuntime>> {
        self.services.feeds.get(name)
    }
}
