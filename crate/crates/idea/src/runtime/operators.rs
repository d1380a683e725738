//! Operator behaviors: adapters, parser, holder endpoints, UDF evaluator,
//! storage writer, and sinks. An operator runs on one thread, pulls frames
//! from its merged input, and pushes through its outbound connectors.

use super::exec::{InputChannel, JobState, OpError, OutputPort};
use super::job::{NodeId, OperatorKind};
use super::{Cluster, Frame, FrameBuilder, RuntimeServices};
use crate::data::{deserialize_record, parse_json, serialize_record, Record};
use crate::deploy::{SlotBindings, SlotValue};
use crate::eval::{self, EvalModel};
use crate::holders::{HolderError, HolderId, PartitionHolder};
use std::io::Read;
use std::sync::Arc;
use std::time::{Duration, Instant};

pub struct OpContext {
    pub op_id: String,
    pub node: NodeId,
    pub partition: usize,
    pub partition_count: usize,
    pub cluster: Cluster,
    pub(crate) input: Option<InputChannel>,
    pub(crate) outputs: Vec<OutputPort>,
    pub state: Arc<JobState>,
    pub bindings: Arc<SlotBindings>,
}

impl OpContext {
    /// Next inbound frame; None once every producer signalled EOF.
    pub fn recv(&mut self) -> Result<Option<Frame>, OpError> {
        match self.input.as_mut() {
            Some(input) => input.recv(),
            None => Ok(None),
        }
    }

    /// Emits one producer frame through every outbound connector.
    pub fn send_records(&mut self, records: Vec<Vec<u8>>) -> Result<(), OpError> {
        if records.is_empty() {
            return Ok(());
        }
        if self.outputs.len() == 1 {
            return self.outputs[0].send_records(records);
        }
        for port in &mut self.outputs {
            port.send_records(records.clone())?;
        }
        Ok(())
    }

    pub fn services(&self) -> Result<&RuntimeServices, OpError> {
        self.cluster
            .services()
            .ok_or_else(|| OpError::Config("runtime services are not wired".into()))
    }

    fn holder(&self, entity: &str) -> Result<PartitionHolder, OpError> {
        Ok(self
            .cluster
            .holder_manager(self.node)
            .lookup(&HolderId::new(entity, self.partition))?)
    }

    pub fn collect(&self, record: Record) {
        self.state.collect(record);
    }
}

pub trait OperatorBehavior: Send {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError>;
}

pub type CustomOperator = Box<dyn OperatorBehavior>;

/// Factory for `Custom` operators, registered on the cluster by name.
pub trait CustomOperatorFactory: Send + Sync {
    fn instantiate(
        &self,
        config: &serde_json::Value,
        bindings: &SlotBindings,
        partition: usize,
    ) -> Result<CustomOperator, OpError>;
}

pub(crate) fn instantiate(
    kind: &OperatorKind,
    ctx: &OpContext,
) -> Result<Box<dyn OperatorBehavior>, OpError> {
    Ok(match kind {
        OperatorKind::SocketAdapter { feed, .. } => Box::new(SocketAdapterOp {
            feed: feed.clone(),
        }),
        OperatorKind::FileReplayAdapter {
            feed,
            path,
            rate_per_sec,
        } => Box::new(FileReplayOp {
            feed: feed.clone(),
            path: path.clone(),
            rate_per_sec: *rate_per_sec,
        }),
        OperatorKind::BatchSource { slot } => Box::new(BatchSourceOp { slot: slot.clone() }),
        OperatorKind::Partitioner => Box::new(PartitionerOp),
        OperatorKind::OfferToHolder { entity } => Box::new(OfferToHolderOp {
            entity: entity.clone(),
        }),
        OperatorKind::PollHolder {
            entity,
            batch_size,
            feed,
        } => Box::new(PollHolderOp {
            entity: entity.clone(),
            batch_size: *batch_size,
            feed: feed.clone(),
        }),
        OperatorKind::DrainHolder { entity } => Box::new(DrainHolderOp {
            entity: entity.clone(),
        }),
        OperatorKind::FeedComputeSink { feed } => Box::new(FeedComputeSinkOp {
            feed: feed.clone(),
        }),
        OperatorKind::Parser { feed, required_key } => Box::new(ParserOp {
            feed: feed.clone(),
            required_key: required_key.clone(),
        }),
        OperatorKind::UdfEval {
            function,
            model,
            feed,
        } => Box::new(UdfEvalOp {
            function: function.clone(),
            model: *model,
            feed: feed.clone(),
        }),
        OperatorKind::StorageWriter { dataset, feed } => Box::new(StorageWriterOp {
            dataset: dataset.clone(),
            feed: feed.clone(),
        }),
        OperatorKind::Sink { collect } => Box::new(SinkOp { collect: *collect }),
        OperatorKind::Custom { name, config, .. } => {
            let factory = ctx
                .cluster
                .custom_op(name)
                .ok_or_else(|| OpError::Config(format!("unknown custom operator {name:?}")))?;
            factory.instantiate(config, &ctx.bindings, ctx.partition)?
        }
    })
}

struct BatchSourceOp {
    slot: String,
}

impl OperatorBehavior for BatchSourceOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let records = match ctx.bindings.get(&self.slot) {
            Some(SlotValue::Batch(records)) => records.clone(),
            Some(SlotValue::Scalar(_)) => {
                return Err(OpError::Config(format!(
                    "slot {:?} is bound to a scalar, expected a batch",
                    self.slot
                )))
            }
            None => {
                return Err(OpError::Config(format!("unbound slot {:?}", self.slot)));
            }
        };
        let mut fb = FrameBuilder::new();
        for record in &records {
            if let Some(frame) = fb.push(serialize_record(record)) {
                ctx.send_records(frame)?;
            }
        }
        if let Some(frame) = fb.flush() {
            ctx.send_records(frame)?;
        }
        Ok(())
    }
}

struct SocketAdapterOp {
    feed: String,
}

impl OperatorBehavior for SocketAdapterOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let services = ctx.services()?;
        let feed = services
            .feeds
            .get(&self.feed)
            .ok_or_else(|| OpError::Config(format!("unknown feed {:?}", self.feed)))?;
        let listener = feed
            .take_listener(ctx.partition)
            .ok_or_else(|| OpError::Config("socket listener was not bound".into()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| OpError::Io(e.to_string()))?;
        let mut fb = FrameBuilder::new();
        let stop = |ctx: &OpContext| feed.stop_requested() || ctx.state.abort_requested();
        'accepting: while !stop(ctx) {
            let stream = match listener.accept() {
                Ok((stream, _)) => stream,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(OpError::Io(e.to_string())),
            };
            stream
                .set_nonblocking(false)
                .map_err(|e| OpError::Io(e.to_string()))?;
            stream
                .set_read_timeout(Some(Duration::from_millis(25)))
                .map_err(|e| OpError::Io(e.to_string()))?;
            let mut stream = stream;
            let mut pending: Vec<u8> = Vec::new();
            let mut chunk = [0u8; 16 * 1024];
            loop {
                match stream.read(&mut chunk) {
                    Ok(0) => continue 'accepting, // client done; await the next one
                    Ok(n) => {
                        pending.extend_from_slice(&chunk[..n]);
                        while let Some(pos) = pending.iter().position(|&b| b == b'\n') {
                            let mut line: Vec<u8> = pending.drain(..=pos).collect();
                            line.pop();
                            if line.last() == Some(&b'\r') {
                                line.pop();
                            }
                            if line.is_empty() {
                                continue;
                            }
                            feed.metrics.bump_adapter_lines();
                            if let Some(frame) = fb.push(line) {
                                ctx.send_records(frame)?;
                            }
                        }
                    }
                    Err(e)
                        if matches!(
                            e.kind(),
                            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                        ) =>
                    {
                        if stop(ctx) {
                            break 'accepting;
                        }
                    }
                    Err(_) => continue 'accepting,
                }
            }
        }
        if let Some(frame) = fb.flush() {
            ctx.send_records(frame)?;
        }
        Ok(())
    }
}

struct FileReplayOp {
    feed: String,
    path: String,
    rate_per_sec: u32,
}

impl OperatorBehavior for FileReplayOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let services = ctx.services()?;
        let feed = services.feeds.get(&self.feed);
        let text = std::fs::read(&self.path)
            .map_err(|e| OpError::Io(format!("{}: {e}", self.path)))?;
        let start = Instant::now();
        let mut emitted: u64 = 0;
        let mut fb = FrameBuilder::new();
        for line in text.split(|&b| b == b'\n') {
            if ctx.state.abort_requested()
                || feed.as_ref().map(|f| f.stop_requested()).unwrap_or(false)
            {
                break;
            }
            let line = if line.last() == Some(&b'\r') {
                &line[..line.len() - 1]
            } else {
                line
            };
            if line.is_empty() {
                continue;
            }
            if self.rate_per_sec > 0 {
                // pace against the wall clock
                let due = start + Duration::from_secs_f64(emitted as f64 / self.rate_per_sec as f64);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
            if let Some(f) = &feed {
                f.metrics.bump_adapter_lines();
            }
            emitted += 1;
            if let Some(frame) = fb.push(line.to_vec()) {
                ctx.send_records(frame)?;
            }
        }
        if let Some(frame) = fb.flush() {
            ctx.send_records(frame)?;
        }
        Ok(())
    }
}

struct PartitionerOp;

impl OperatorBehavior for PartitionerOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        while let Some(frame) = ctx.recv()? {
            ctx.send_records(frame.records)?;
        }
        Ok(())
    }
}

struct OfferToHolderOp {
    entity: String,
}

impl OperatorBehavior for OfferToHolderOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let holder = ctx.holder(&self.entity)?;
        let mut seq = 0;
        while let Some(frame) = ctx.recv()? {
            holder.offer_frame(Frame::data(ctx.partition as u32, seq, frame.records))?;
            seq += 1;
        }
        match holder.offer_frame(Frame::eof(ctx.partition as u32, seq)) {
            Ok(()) | Err(HolderError::HolderClosed(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

struct PollHolderOp {
    entity: String,
    batch_size: usize,
    feed: Option<String>,
}

impl OperatorBehavior for PollHolderOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let holder = ctx.holder(&self.entity)?;
        let batch = holder.poll_batch(self.batch_size)?;
        if let Some(feed) = &self.feed {
            if let Some(rt) = ctx.services()?.feeds.get(feed) {
                rt.metrics.bump_ingested(batch.records.len() as u64);
                if batch.end_of_feed {
                    rt.mark_partition_eof(ctx.partition);
                }
            }
        }
        if batch.end_of_feed {
            ctx.state.mark_feed_eof(ctx.partition);
        }
        let mut fb = FrameBuilder::new();
        for record in batch.records {
            if let Some(frame) = fb.push(record) {
                ctx.send_records(frame)?;
            }
        }
        if let Some(frame) = fb.flush() {
            ctx.send_records(frame)?;
        }
        Ok(())
    }
}

struct DrainHolderOp {
    entity: String,
}

impl OperatorBehavior for DrainHolderOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let holder = ctx.holder(&self.entity)?;
        while let Some(frame) = holder.take_frame() {
            if frame.is_eof {
                break;
            }
            ctx.send_records(frame.records)?;
        }
        Ok(())
    }
}

struct FeedComputeSinkOp {
    feed: String,
}

impl OperatorBehavior for FeedComputeSinkOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let services = ctx.services()?;
        let rt = services
            .feeds
            .get(&self.feed)
            .ok_or_else(|| OpError::Config(format!("unknown feed {:?}", self.feed)))?;
        let holder = ctx.holder(&crate::feed::storage_entity(&self.feed))?;
        let mut seq = 0;
        while let Some(frame) = ctx.recv()? {
            holder.push_downstream(Frame::data(ctx.partition as u32, seq, frame.records))?;
            seq += 1;
        }
        // forward the feed EOF exactly once per partition, from the
        // invocation that observed it
        if ctx.state.feed_eof(ctx.partition) && !rt.storage_eof_already_sent(ctx.partition) {
            match holder.push_downstream(Frame::eof(ctx.partition as u32, seq)) {
                Ok(()) | Err(HolderError::HolderClosed(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }
}

struct ParserOp {
    feed: Option<String>,
    required_key: Option<Vec<String>>,
}

impl OperatorBehavior for ParserOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let feed = match &self.feed {
            Some(name) => ctx.services()?.feeds.get(name),
            None => None,
        };
        let mut fb = FrameBuilder::new();
        while let Some(frame) = ctx.recv()? {
            for line in frame.records {
                let parsed = std::str::from_utf8(&line)
                    .ok()
                    .and_then(|text| parse_json(text).ok())
                    .filter(|record| match &self.required_key {
                        Some(fields) => {
                            crate::data::extract_primary_key(record, fields).is_ok()
                        }
                        None => true,
                    });
                match parsed {
                    Some(record) => {
                        if let Some(f) = &feed {
                            f.metrics.bump_parsed();
                        }
                        if let Some(out) = fb.push(serialize_record(&record)) {
                            ctx.send_records(out)?;
                        }
                    }
                    None => {
                        if let Some(f) = &feed {
                            f.metrics.bump_skipped(1);
                        }
                    }
                }
            }
        }
        if let Some(out) = fb.flush() {
            ctx.send_records(out)?;
        }
        Ok(())
    }
}

struct UdfEvalOp {
    function: String,
    model: EvalModel,
    feed: Option<String>,
}

impl UdfEvalOp {
    fn resolve(
        &self,
        ctx: &OpContext,
    ) -> Result<(Arc<eval::CompiledFunction>, eval::EvalContext), OpError> {
        let services = ctx.services()?;
        if let Some(feed) = &self.feed {
            let rt = services
                .feeds
                .get(feed)
                .ok_or_else(|| OpError::Config(format!("unknown feed {:?}", feed)))?;
            let function = rt
                .compiled_function()
                .ok_or_else(|| OpError::Config("feed has no compiled function".into()))?;
            let eval_ctx = rt
                .eval_context()
                .ok_or_else(|| OpError::Config("feed has no evaluation context".into()))?;
            Ok((function, eval_ctx))
        } else {
            let decl = services
                .functions
                .get(&self.function)
                .ok_or_else(|| OpError::Config(format!("unknown function {:?}", self.function)))?;
            let function = eval::compile_function(
                &decl,
                &services.storage,
                &services.natives,
                eval::CompileOptions::default(),
            )
            .map_err(|e| OpError::Eval(e.to_string()))?;
            let eval_ctx =
                eval::EvalContext::new(services.storage.clone(), services.natives.clone());
            Ok((function, eval_ctx))
        }
    }

    fn audit_tag(&self, ctx: &OpContext) -> Option<(String, i64)> {
        let feed = self.feed.as_ref()?;
        let rt = ctx.services().ok()?.feeds.get(feed)?;
        if rt.audit_enabled() {
            Some(("_invocation".to_string(), rt.current_invocation() as i64))
        } else {
            None
        }
    }
}

impl OperatorBehavior for UdfEvalOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let (function, eval_ctx) = self.resolve(ctx)?;
        let feed = match &self.feed {
            Some(name) => ctx.services()?.feeds.get(name),
            None => None,
        };
        let audit = self.audit_tag(ctx);
        let mut fb = FrameBuilder::new();
        let emit = |ctx: &mut OpContext,
                        fb: &mut FrameBuilder,
                        output: eval::BatchOutput|
         -> Result<(), OpError> {
            if let Some(f) = &feed {
                f.metrics.bump_skipped(output.skipped.len() as u64);
            }
            for mut record in output.records {
                if let Some((field, seq)) = &audit {
                    record.set(field.clone(), crate::data::Value::Int64(*seq));
                }
                if let Some(frame) = fb.push(serialize_record(&record)) {
                    ctx.send_records(frame)?;
                }
            }
            Ok(())
        };
        match self.model {
            EvalModel::PerBatch => {
                // the whole invocation input is one batch
                let mut batch = Vec::new();
                while let Some(frame) = ctx.recv()? {
                    for bytes in frame.records {
                        batch.push(
                            deserialize_record(&bytes).map_err(|e| OpError::Eval(e.to_string()))?,
                        );
                    }
                }
                if !batch.is_empty() {
                    let output = eval::evaluate_batch(&function, &batch, &eval_ctx)
                        .map_err(|e| OpError::Eval(e.to_string()))?;
                    emit(ctx, &mut fb, output)?;
                }
            }
            EvalModel::PerRecord => {
                while let Some(frame) = ctx.recv()? {
                    for bytes in frame.records {
                        let record = deserialize_record(&bytes)
                            .map_err(|e| OpError::Eval(e.to_string()))?;
                        let output =
                            eval::evaluate_batch(&function, std::slice::from_ref(&record), &eval_ctx)
                                .map_err(|e| OpError::Eval(e.to_string()))?;
                        emit(ctx, &mut fb, output)?;
                    }
                }
            }
            EvalModel::Stream => {
                // feed runs share one evaluator across invocations
                let shared = feed
                    .as_ref()
                    .and_then(|f| f.stream_evaluator(ctx.partition));
                let local;
                let evaluator: &eval::StreamEvaluator = match &shared {
                    Some(ev) => ev.as_ref(),
                    None => {
                        local = eval::open_stream_evaluator(&function, &eval_ctx)
                            .map_err(|e| OpError::Eval(e.to_string()))?;
                        &local
                    }
                };
                while let Some(frame) = ctx.recv()? {
                    let mut batch = Vec::with_capacity(frame.records.len());
                    for bytes in frame.records {
                        batch.push(
                            deserialize_record(&bytes).map_err(|e| OpError::Eval(e.to_string()))?,
                        );
                    }
                    let output = evaluator.apply(&batch);
                    emit(ctx, &mut fb, output)?;
                }
            }
        }
        if let Some(frame) = fb.flush() {
            ctx.send_records(frame)?;
        }
        Ok(())
    }
}

struct StorageWriterOp {
    dataset: String,
    feed: Option<String>,
}

impl OperatorBehavior for StorageWriterOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        let services = ctx.services()?;
        let dataset = services
            .storage
            .dataset(&self.dataset)
            .map_err(|e| OpError::Storage(e.to_string()))?;
        if dataset.partition_count() != ctx.partition_count {
            return Err(OpError::Config(format!(
                "writer partitions ({}) do not match dataset partitions ({})",
                ctx.partition_count,
                dataset.partition_count()
            )));
        }
        let feed = match &self.feed {
            Some(name) => services.feeds.get(name),
            None => None,
        };
        while let Some(frame) = ctx.recv()? {
            for bytes in frame.records {
                let record =
                    deserialize_record(&bytes).map_err(|e| OpError::Eval(e.to_string()))?;
                match dataset.upsert_into_partition(ctx.partition, record) {
                    Ok(()) => {
                        if let Some(f) = &feed {
                            f.metrics.bump_stored();
                        }
                    }
                    Err(crate::storage::WriteError::Log(e)) => return Err(OpError::Io(e)),
                    Err(_) => {
                        // bad record: skip and count, keep the feed alive
                        if let Some(f) = &feed {
                            f.metrics.bump_skipped(1);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct SinkOp {
    collect: bool,
}

impl OperatorBehavior for SinkOp {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), OpError> {
        while let Some(frame) = ctx.recv()? {
            if self.collect {
                for bytes in frame.records {
                    let record =
                        deserialize_record(&bytes).map_err(|e| OpError::Eval(e.to_string()))?;
                    ctx.collect(record);
                }
            }
        }
        Ok(())
    }
}
