//! Predeployed jobs: compile a parameterized job specification once, cache
//! the compilation materials on every node, and invoke it repeatedly with
//! fresh parameters. The compile counter moves once per deploy and never on
//! invocation.

use crate::data::{Record, Value};
use crate::runtime::{Cluster, InvalidSpec, JobInstance, JobSpec, OperatorKind, RunningJob};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// A parameter value bound at invocation time.
#[derive(Debug, Clone)]
pub enum SlotValue {
    Batch(Vec<Record>),
    Scalar(Value),
}

pub type SlotBindings = BTreeMap<String, SlotValue>;

/// Builds bindings for the common single-batch case.
pub fn batch_binding(slot: &str, records: Vec<Record>) -> SlotBindings {
    let mut bindings = SlotBindings::new();
    bindings.insert(slot.to_string(), SlotValue::Batch(records));
    bindings
}

/// A job specification with named parameter slots; each slot must be used
/// exactly once in the spec.
#[derive(Debug, Clone)]
pub struct JobTemplate {
    pub spec: JobSpec,
    pub parameter_slots: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeployedJobId(pub u64);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DeployError {
    #[error(transparent)]
    Invalid(#[from] InvalidSpec),
    #[error("slot {slot:?} is used {count} times in the spec, expected exactly once")]
    SlotUse { slot: String, count: usize },
    #[error("spec uses undeclared slot {0:?}")]
    UndeclaredSlot(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvokeError {
    #[error("unknown deployed job")]
    UnknownDeployedJob,
    #[error("unbound slot {0:?}")]
    UnboundSlot(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UndeployError {
    #[error("unknown deployed job")]
    UnknownDeployedJob,
    #[error("an invocation is still in flight")]
    InvocationInFlight,
}

#[derive(Debug)]
pub(crate) struct DeployedMeta {
    slots: Vec<String>,
    in_flight: Arc<AtomicUsize>,
}

/// Decrements the deployed job's in-flight count when the invocation ends.
#[derive(Debug)]
pub struct InFlightGuard(Arc<AtomicUsize>);

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

// slot markers inside custom-op configs look like {"$slot": "name"}
fn count_slot_uses(spec: &JobSpec, slot: &str, out: &mut usize) {
    for op in &spec.operators {
        match &op.kind {
            OperatorKind::BatchSource { slot: s } if s == slot => *out += 1,
            OperatorKind::Custom { config, .. } => {
                count_in_json(config, slot, out);
            }
            _ => {}
        }
    }
}

fn count_in_json(value: &serde_json::Value, slot: &str, out: &mut usize) {
    match value {
        serde_json::Value::Object(map) => {
            if map.len() == 1 {
                if let Some(serde_json::Value::String(name)) = map.get("$slot") {
                    if name == slot {
                        *out += 1;
                    }
                    return;
                }
            }
            for v in map.values() {
                count_in_json(v, slot, out);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                count_in_json(v, slot, out);
            }
        }
        _ => {}
    }
}

fn used_slots(spec: &JobSpec) -> Vec<String> {
    let mut slots = spec.batch_slots();
    for op in &spec.operators {
        if let OperatorKind::Custom { config, .. } = &op.kind {
            collect_json_slots(config, &mut slots);
        }
    }
    slots
}

fn collect_json_slots(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::Object(map) => {
            if map.len() == 1 {
                if let Some(serde_json::Value::String(name)) = map.get("$slot") {
                    out.push(name.clone());
                    return;
                }
            }
            for v in map.values() {
                collect_json_slots(v, out);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                collect_json_slots(v, out);
            }
        }
        _ => {}
    }
}

/// Compiles the template once and caches the materials on every node.
pub fn deploy(cluster: &Cluster, template: &JobTemplate) -> Result<DeployedJobId, DeployError> {
    for slot in &template.parameter_slots {
        let mut count = 0;
        count_slot_uses(&template.spec, slot, &mut count);
        if count != 1 {
            return Err(DeployError::SlotUse {
                slot: slot.clone(),
                count,
            });
        }
    }
    for used in used_slots(&template.spec) {
        if !template.parameter_slots.contains(&used) {
            return Err(DeployError::UndeclaredSlot(used));
        }
    }
    let per_node = crate::runtime::exec_compile_and_distribute(&template.spec, cluster)?;
    let id = DeployedJobId(cluster.fresh_id());
    for (node, compiled) in per_node.into_iter().enumerate() {
        cluster.node_cache(node).lock().unwrap().insert(id.0, compiled);
    }
    cluster.inner.deployed.lock().unwrap().insert(
        id.0,
        DeployedMeta {
            slots: template.parameter_slots.clone(),
            in_flight: Arc::new(AtomicUsize::new(0)),
        },
    );
    Ok(id)
}

/// Starts a fresh run from the cached compilation; no recompilation.
pub fn invoke(
    cluster: &Cluster,
    id: DeployedJobId,
    bindings: SlotBindings,
) -> Result<RunningJob, InvokeError> {
    let guard = {
        let deployed = cluster.inner.deployed.lock().unwrap();
        let meta = deployed.get(&id.0).ok_or(InvokeError::UnknownDeployedJob)?;
        for slot in &meta.slots {
            if !bindings.contains_key(slot) {
                return Err(InvokeError::UnboundSlot(slot.clone()));
            }
        }
        meta.in_flight.fetch_add(1, Ordering::SeqCst);
        InFlightGuard(meta.in_flight.clone())
    };
    let mut per_node = Vec::with_capacity(cluster.node_count());
    for node in 0..cluster.node_count() {
        let compiled = cluster
            .node_cache(node)
            .lock()
            .unwrap()
            .get(&id.0)
            .cloned()
            .ok_or(InvokeError::UnknownDeployedJob)?;
        per_node.push(compiled);
    }
    let instance = JobInstance {
        per_node,
        bindings: Arc::new(bindings),
        cluster: cluster.clone(),
        in_flight: Some(guard),
    };
    Ok(instance.start())
}

/// Releases the cached materials; fails while an invocation is in flight.
pub fn undeploy(cluster: &Cluster, id: DeployedJobId) -> Result<(), UndeployError> {
    let mut deployed = cluster.inner.deployed.lock().unwrap();
    let meta = deployed.get(&id.0).ok_or(UndeployError::UnknownDeployedJob)?;
    if meta.in_flight.load(Ordering::SeqCst) > 0 {
        return Err(UndeployError::InvocationInFlight);
    }
    deployed.remove(&id.0);
    drop(deployed);
    for node in 0..cluster.node_count() {
        cluster.node_cache(node).lock().unwrap().remove(&id.0);
    }
    Ok(())
}
