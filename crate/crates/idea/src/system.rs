//! Engine facade: one simulated cluster plus the storage engine, type and
//! function catalogs, native registry, and feed manager, with a statement
//! executor over the declarative surface.

use crate::data::{Datatype, Value, ValueKind};
use crate::eval::{
    eval_const_expr, run_query, EvalContext, EvalError, EvalModel, FunctionCatalog, FunctionDecl,
    FunctionDeclBody, NativeRegistry,
};
use crate::feed::{AdapterConfig, FeedDescriptor, FeedManager, FeedRegistry, FeedSummary};
use crate::query::{
    self, ast, parse_script, QueryError, Statement, StatementKind,
};
use crate::runtime::{Cluster, RuntimeServices};
use crate::storage::{
    DatasetDescriptor, IndexDescriptor, IndexKind, StorageEngine, StorageError, WriteError,
};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error(transparent)]
    Parse(#[from] QueryError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Write(#[from] WriteError),
    #[error(transparent)]
    Feed(#[from] crate::feed::FeedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("unknown type {0:?}")]
    UnknownType(String),
    #[error("invalid statement: {0}")]
    Invalid(String),
}

/// Result of executing one statement.
#[derive(Debug)]
pub enum StatementOutcome {
    Done(String),
    Rows(Vec<Value>),
    Stored { count: usize },
    FeedStopped(FeedSummary),
}

/// An embedded engine instance over an N-node simulated cluster.
pub struct System {
    cluster: Cluster,
    storage: Arc<StorageEngine>,
    functions: Arc<FunctionCatalog>,
    natives: Arc<NativeRegistry>,
    types: RwLock<HashMap<String, Datatype>>,
    feeds: FeedManager,
}

impl System {
    pub fn new(nodes: usize) -> System {
        Self::with_storage(nodes, StorageEngine::new())
    }

    /// Engine whose datasets persist through an append-only log directory.
    pub fn with_persistence(nodes: usize, dir: std::path::PathBuf) -> System {
        Self::with_storage(nodes, StorageEngine::with_persistence(dir))
    }

    fn with_storage(nodes: usize, storage: Arc<StorageEngine>) -> System {
        let cluster = Cluster::new(nodes);
        let functions = FunctionCatalog::new();
        let natives = NativeRegistry::with_builtins();
        let feed_registry = FeedRegistry::new();
        let services = RuntimeServices {
            storage: storage.clone(),
            functions: functions.clone(),
            natives: natives.clone(),
            feeds: feed_registry.clone(),
        };
        cluster.set_services(services.clone());
        let feeds = FeedManager::new(cluster.clone(), services);
        System {
            cluster,
            storage,
            functions,
            natives,
            types: RwLock::new(HashMap::new()),
            feeds,
        }
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn storage(&self) -> &Arc<StorageEngine> {
        &self.storage
    }

    pub fn functions(&self) -> &Arc<FunctionCatalog> {
        &self.functions
    }

    pub fn natives(&self) -> &Arc<NativeRegistry> {
        &self.natives
    }

    pub fn feeds(&self) -> &FeedManager {
        &self.feeds
    }

    pub fn datatype(&self, name: &str) -> Option<Datatype> {
        self.types.read().unwrap().get(name).cloned()
    }

    pub fn eval_context(&self) -> EvalContext {
        EvalContext::new(self.storage.clone(), self.natives.clone())
    }

    /// Parses and executes a whole script, stopping at the first error.
    pub fn execute_script(&self, text: &str) -> Result<Vec<StatementOutcome>, SystemError> {
        let statements = parse_script(text)?;
        let mut outcomes = Vec::with_capacity(statements.len());
        for stmt in &statements {
            outcomes.push(self.execute_statement(stmt)?);
        }
        Ok(outcomes)
    }

    pub fn execute_statement(&self, stmt: &Statement) -> Result<StatementOutcome, SystemError> {
        match &stmt.kind {
            StatementKind::CreateType(t) => {
                let mut required = Vec::new();
                for (field, type_name) in &t.fields {
                    let kind = ValueKind::from_type_name(type_name)
                        .ok_or_else(|| SystemError::UnknownType(type_name.clone()))?;
                    required.push((field.clone(), kind));
                }
                let datatype = Datatype::new(t.name.clone(), required, t.open);
                self.types
                    .write()
                    .unwrap()
                    .insert(t.name.clone(), datatype);
                Ok(StatementOutcome::Done(format!("created type {}", t.name)))
            }
            StatementKind::CreateDataset(d) => {
                let datatype = self
                    .datatype(&d.datatype)
                    .ok_or_else(|| SystemError::UnknownType(d.datatype.clone()))?;
                self.storage.create_dataset(DatasetDescriptor::new(
                    d.name.clone(),
                    datatype,
                    d.primary_key.clone(),
                    self.cluster.node_count(),
                ))?;
                Ok(StatementOutcome::Done(format!("created dataset {}", d.name)))
            }
            StatementKind::CreateIndex(i) => {
                let dataset = self.storage.dataset(&i.dataset)?;
                let kind = match i.kind {
                    ast::IndexKindName::BTree => IndexKind::BTree {
                        field: i.field.clone(),
                    },
                    ast::IndexKindName::RTree => IndexKind::RTree {
                        point_field: i.field.clone(),
                    },
                };
                dataset.create_index(IndexDescriptor {
                    name: i.name.clone(),
                    kind,
                })?;
                Ok(StatementOutcome::Done(format!("created index {}", i.name)))
            }
            StatementKind::CreateFunction(f) => {
                self.functions.register(FunctionDecl {
                    name: f.name.clone(),
                    params: f.params.clone(),
                    body: FunctionDeclBody::Query(f.body.clone()),
                });
                Ok(StatementOutcome::Done(format!("created function {}", f.name)))
            }
            StatementKind::CreateFeed(f) => {
                let descriptor = feed_descriptor_from_config(&f.name, &f.with, &self.cluster)?;
                self.feeds.create_feed(descriptor)?;
                Ok(StatementOutcome::Done(format!("created feed {}", f.name)))
            }
            StatementKind::ConnectFeed(c) => {
                self.feeds
                    .connect_feed(&c.feed, &c.dataset, c.function.as_deref())?;
                Ok(StatementOutcome::Done(format!(
                    "connected feed {} to {}",
                    c.feed, c.dataset
                )))
            }
            StatementKind::StartFeed(name) => {
                self.feeds.start_feed(name)?;
                Ok(StatementOutcome::Done(format!("started feed {name}")))
            }
            StatementKind::StopFeed(name) => {
                let summary = self.feeds.stop_feed(name)?;
                Ok(StatementOutcome::FeedStopped(summary))
            }
            StatementKind::Insert(stmt) => self.run_dml(stmt, false),
            StatementKind::Upsert(stmt) => self.run_dml(stmt, true),
            StatementKind::Query(q) => {
                let ctx = self.eval_context();
                let rows = run_query(q, &ctx, &self.functions)?;
                Ok(StatementOutcome::Rows(rows))
            }
        }
    }

    fn run_dml(
        &self,
        stmt: &ast::InsertStmt,
        replace: bool,
    ) -> Result<StatementOutcome, SystemError> {
        let dataset = self.storage.dataset(&stmt.dataset)?;
        let values: Vec<Value> = match &stmt.source {
            ast::InsertSource::Collection(expr) => {
                let ctx = self.eval_context();
                match eval_const_expr(expr, &ctx)? {
                    Value::Array(items) => items,
                    single => vec![single],
                }
            }
            ast::InsertSource::Query(q) => {
                let ctx = self.eval_context();
                run_query(q, &ctx, &self.functions)?
            }
        };
        let mut count = 0;
        for value in values {
            let Value::Object(record) = value else {
                return Err(SystemError::Invalid(
                    "INSERT sources must produce records".into(),
                ));
            };
            if replace {
                dataset.upsert(record)?;
            } else {
                dataset.insert(record)?;
            }
            count += 1;
        }
        Ok(StatementOutcome::Stored { count })
    }
}

fn feed_descriptor_from_config(
    name: &str,
    config: &crate::data::Record,
    cluster: &Cluster,
) -> Result<FeedDescriptor, SystemError> {
    let text = |field: &str| -> Option<String> {
        config.get(field).and_then(|v| v.as_text()).map(String::from)
    };
    let type_name = text("type-name")
        .ok_or_else(|| SystemError::Invalid("feed config needs \"type-name\"".into()))?;
    if let Some(format) = text("format") {
        if !format.eq_ignore_ascii_case("json") {
            return Err(SystemError::Invalid(format!(
                "unsupported feed format {format:?}"
            )));
        }
    }
    let adapter_name = text("adapter-name")
        .ok_or_else(|| SystemError::Invalid("feed config needs \"adapter-name\"".into()))?;
    let (adapter, intake_nodes) = match adapter_name.as_str() {
        "socket_adapter" => {
            let sockets = text("sockets")
                .ok_or_else(|| SystemError::Invalid("socket_adapter needs \"sockets\"".into()))?;
            let endpoints: Vec<&str> = sockets.split(',').map(str::trim).collect();
            let first = endpoints
                .first()
                .and_then(|e| e.rsplit_once(':'))
                .ok_or_else(|| SystemError::Invalid("sockets must be host:port".into()))?;
            let base_port: u16 = first
                .1
                .parse()
                .map_err(|_| SystemError::Invalid("invalid socket port".into()))?;
            let nodes: Vec<usize> = (0..endpoints.len().min(cluster.node_count())).collect();
            (
                AdapterConfig::Socket {
                    host: first.0.to_string(),
                    base_port,
                },
                nodes,
            )
        }
        "file_replay" => {
            let path = text("path")
                .ok_or_else(|| SystemError::Invalid("file_replay needs \"path\"".into()))?;
            let rate = config
                .get("rate")
                .and_then(|v| v.as_i64())
                .unwrap_or(0)
                .max(0) as u32;
            (
                AdapterConfig::FileReplay {
                    path: path.into(),
                    rate_per_sec: rate,
                },
                vec![0],
            )
        }
        other => {
            return Err(SystemError::Invalid(format!(
                "unknown adapter {other:?}"
            )))
        }
    };
    let mut descriptor = FeedDescriptor::new(name, type_name, adapter);
    descriptor.intake_nodes = intake_nodes;
    if let Some(batch) = config.get("batch-size").and_then(|v| v.as_i64()) {
        if batch < 1 {
            return Err(SystemError::Invalid("batch-size must be at least 1".into()));
        }
        descriptor.batch_size = batch as usize;
    }
    if let Some(model) = text("model") {
        descriptor.model = match model.to_ascii_lowercase().as_str() {
            "record" => EvalModel::PerRecord,
            "batch" => EvalModel::PerBatch,
            "stream" => EvalModel::Stream,
            other => {
                return Err(SystemError::Invalid(format!(
                    "unknown evaluation model {other:?}"
                )))
            }
        };
    }
    if let Some(capacity) = config.get("holder-capacity").and_then(|v| v.as_i64()) {
        descriptor.holder_capacity = capacity.max(1) as usize;
    }
    if let Some(Value::Boolean(b)) = config.get("allow-stale-stream") {
        descriptor.allow_stale_stream = *b;
    }
    if let Some(Value::Boolean(b)) = config.get("use-indexes") {
        descriptor.use_indexes = *b;
    }
    Ok(descriptor)
}

/// Convenience wrapper for scripts held in strings.
pub fn execute(system: &System, script: &str) -> Result<Vec<StatementOutcome>, SystemError> {
    system.execute_script(script)
}

#[allow(unused_imports)]
use query::print_statement as _keep; // parser and printer stay API peers
