//! Job specifications: operator and connector descriptors forming a DAG,
//! validated before instantiation. Specs are plain serializable data so a
//! compiled job can be distributed to (simulated) nodes.

use crate::eval::EvalModel;
use serde::{Deserialize, Serialize};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvalidSpec {
    #[error("operator graph contains a cycle")]
    Cycle,
    #[error("duplicate operator id {0:?}")]
    DuplicateOperatorId(String),
    #[error("connector references unknown operator {0:?}")]
    DanglingConnector(String),
    #[error("operator {op:?} declares {declared} partitions but places {placed}")]
    PlacementMismatch {
        op: String,
        declared: usize,
        placed: usize,
    },
    #[error("operator {op:?} placed on node {node} of a {nodes}-node cluster")]
    NodeOutOfRange { op: String, node: usize, nodes: usize },
    #[error("one-to-one connector {from:?} -> {to:?} joins {from_parts} and {to_parts} partitions")]
    OneToOneArity {
        from: String,
        to: String,
        from_parts: usize,
        to_parts: usize,
    },
    #[error("non-source operator {0:?} has no inbound connector")]
    NoInbound(String),
    #[error("source operator {0:?} has an inbound connector")]
    SourceWithInput(String),
    #[error("parameter slot {slot:?} bound {count} times in the spec")]
    SlotCount { slot: String, count: usize },
    #[error("unknown custom operator {0:?}")]
    UnknownCustomOp(String),
}

/// What an operator instance does at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// TCP newline-record listener; partition i serves `base_port + i`.
    SocketAdapter {
        feed: String,
        host: String,
        base_port: u16,
    },
    /// Replays a newline-record file, optionally throttled.
    FileReplayAdapter {
        feed: String,
        path: String,
        /// Records per second; 0 means unthrottled.
        rate_per_sec: u32,
    },
    /// Emits the batch bound to a parameter slot, then finishes.
    BatchSource { slot: String },
    /// Identity stage; routing belongs to the outbound connector.
    Partitioner,
    /// Offers every inbound frame (and the final EOF) to the local holder
    /// registered under `entity`.
    OfferToHolder { entity: String },
    /// Pulls one batch per run from a local passive holder.
    PollHolder {
        entity: String,
        batch_size: usize,
        feed: Option<String>,
    },
    /// Drains a local active holder into this job until its EOF.
    DrainHolder { entity: String },
    /// Feed computing-job sink: pushes enriched frames to the local storage
    /// holder, forwarding the feed EOF exactly once per partition.
    FeedComputeSink { feed: String },
    /// Parses newline JSON into records; failures are skipped and counted.
    Parser {
        feed: Option<String>,
        /// Fields every parsed record must supply (the target primary key).
        required_key: Option<Vec<String>>,
    },
    /// Applies an enrichment function under the given model.
    UdfEval {
        function: String,
        model: EvalModel,
        feed: Option<String>,
    },
    /// Writes records into its aligned dataset partition.
    StorageWriter {
        dataset: String,
        feed: Option<String>,
    },
    /// Counts (and optionally collects) records.
    Sink { collect: bool },
    /// Factory-registered operator, for tests and extensions.
    Custom {
        name: String,
        source: bool,
        config: serde_json::Value,
    },
}

impl OperatorKind {
    pub fn is_source(&self) -> bool {
        matches!(
            self,
            OperatorKind::SocketAdapter { .. }
                | OperatorKind::FileReplayAdapter { .. }
                | OperatorKind::BatchSource { .. }
                | OperatorKind::PollHolder { .. }
                | OperatorKind::DrainHolder { .. }
                | OperatorKind::Custom { source: true, .. }
        )
    }

    /// Structural category of the operator.
    pub fn category(&self) -> &'static str {
        match self {
            OperatorKind::SocketAdapter { .. }
            | OperatorKind::FileReplayAdapter { .. }
            | OperatorKind::BatchSource { .. } => "adapter",
            OperatorKind::Partitioner => "partitioner",
            OperatorKind::OfferToHolder { .. }
            | OperatorKind::PollHolder { .. }
            | OperatorKind::DrainHolder { .. }
            | OperatorKind::FeedComputeSink { .. } => "partition-holder",
            OperatorKind::Parser { .. } => "parser",
            OperatorKind::UdfEval { .. } => "udf-evaluator",
            OperatorKind::StorageWriter { .. } => "storage-writer",
            OperatorKind::Sink { .. } => "sink",
            OperatorKind::Custom { .. } => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorDescriptor {
    pub id: String,
    pub kind: OperatorKind,
    pub partition_count: usize,
    pub node_placement: Vec<NodeId>,
}

impl OperatorDescriptor {
    /// One partition per listed node.
    pub fn on_nodes(id: impl Into<String>, kind: OperatorKind, nodes: Vec<NodeId>) -> Self {
        OperatorDescriptor {
            id: id.into(),
            kind,
            partition_count: nodes.len(),
            node_placement: nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConnectorKind {
    /// Partition i feeds partition i; requires equal partition counts.
    OneToOne,
    /// Frame k from a producer goes to partition k mod P.
    RoundRobin,
    /// Records are split by the stable hash of their key fields.
    HashPartition { key_fields: Vec<String> },
    /// Every frame is copied to all partitions.
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorDescriptor {
    pub kind: ConnectorKind,
    pub from: String,
    pub to: String,
}

/// A dataflow job: a DAG of operators joined by connectors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub operators: Vec<OperatorDescriptor>,
    pub connectors: Vec<ConnectorDescriptor>,
}

impl JobSpec {
    pub fn new() -> JobSpec {
        JobSpec::default()
    }

    pub fn add_operator(&mut self, op: OperatorDescriptor) -> &mut Self {
        self.operators.push(op);
        self
    }

    pub fn connect(
        &mut self,
        kind: ConnectorKind,
        from: impl Into<String>,
        to: impl Into<String>,
    ) -> &mut Self {
        self.connectors.push(ConnectorDescriptor {
            kind,
            from: from.into(),
            to: to.into(),
        });
        self
    }

    pub fn operator(&self, id: &str) -> Option<&OperatorDescriptor> {
        self.operators.iter().find(|o| o.id == id)
    }

    /// Validates the structural invariants and returns a topological order
    /// of operator indices.
    pub fn validate(&self, cluster_nodes: usize) -> Result<Vec<usize>, InvalidSpec> {
        let mut seen = std::collections::HashSet::new();
        for op in &self.operators {
            if !seen.insert(&op.id) {
                return Err(InvalidSpec::DuplicateOperatorId(op.id.clone()));
            }
            if op.partition_count != op.node_placement.len() || op.partition_count == 0 {
                return Err(InvalidSpec::PlacementMismatch {
                    op: op.id.clone(),
                    declared: op.partition_count,
                    placed: op.node_placement.len(),
                });
            }
            for &node in &op.node_placement {
                if node >= cluster_nodes {
                    return Err(InvalidSpec::NodeOutOfRange {
                        op: op.id.clone(),
                        node,
                        nodes: cluster_nodes,
                    });
                }
            }
        }
        let index_of = |id: &str| self.operators.iter().position(|o| o.id == id);
        let mut inbound = vec![0usize; self.operators.len()];
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); self.operators.len()];
        for c in &self.connectors {
            let from = index_of(&c.from)
                .ok_or_else(|| InvalidSpec::DanglingConnector(c.from.clone()))?;
            let to = index_of(&c.to).ok_or_else(|| InvalidSpec::DanglingConnector(c.to.clone()))?;
            if c.kind == ConnectorKind::OneToOne {
                let (fp, tp) = (
                    self.operators[from].partition_count,
                    self.operators[to].partition_count,
                );
                if fp != tp {
                    return Err(InvalidSpec::OneToOneArity {
                        from: c.from.clone(),
                        to: c.to.clone(),
                        from_parts: fp,
                        to_parts: tp,
                    });
                }
            }
            adjacency[from].push(to);
            inbound[to] += 1;
        }
        for (i, op) in self.operators.iter().enumerate() {
            if op.kind.is_source() {
                if inbound[i] > 0 {
                    return Err(InvalidSpec::SourceWithInput(op.id.clone()));
                }
            } else if inbound[i] == 0 {
                return Err(InvalidSpec::NoInbound(op.id.clone()));
            }
        }
        // Kahn's algorithm; leftovers mean a cycle
        let mut degree = inbound.clone();
        let mut queue: std::collections::VecDeque<usize> = degree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut topo = Vec::with_capacity(self.operators.len());
        while let Some(i) = queue.pop_front() {
            topo.push(i);
            for &next in &adjacency[i] {
                degree[next] -= 1;
                if degree[next] == 0 {
                    queue.push_back(next);
                }
            }
        }
        if topo.len() != self.operators.len() {
            return Err(InvalidSpec::Cycle);
        }
        Ok(topo)
    }

    /// Slots referenced by batch sources, each of which must appear once.
    pub fn batch_slots(&self) -> Vec<String> {
        let mut slots = Vec::new();
        for op in &self.operators {
            if let OperatorKind::BatchSource { slot } = &op.kind {
                slots.push(slot.clone());
            }
        }
        slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sink(id: &str, nodes: Vec<usize>) -> OperatorDescriptor {
        OperatorDescriptor::on_nodes(id, OperatorKind::Sink { collect: false }, nodes)
    }

    fn source(id: &str, nodes: Vec<usize>) -> OperatorDescriptor {
        OperatorDescriptor::on_nodes(
            id,
            OperatorKind::BatchSource {
                slot: "input".into(),
            },
            nodes,
        )
    }

    #[test]
    fn placement_counts_follow_nodes() {
        let op = source("src", vec![0, 1, 2]);
        assert_eq!(op.partition_count, 3);
        let mut spec = JobSpec::new();
        spec.add_operator(op).add_operator(sink("out", vec![0]));
        spec.connect(ConnectorKind::RoundRobin, "src", "out");
        assert!(spec.validate(3).is_ok());
    }

    #[test]
    fn cycle_is_rejected() {
        let mut spec = JobSpec::new();
        spec.add_operator(OperatorDescriptor::on_nodes(
            "a",
            OperatorKind::Partitioner,
            vec![0],
        ))
        .add_operator(OperatorDescriptor::on_nodes(
            "b",
            OperatorKind::Partitioner,
            vec![0],
        ));
        spec.connect(ConnectorKind::OneToOne, "a", "b");
        spec.connect(ConnectorKind::OneToOne, "b", "a");
        assert_eq!(spec.validate(1), Err(InvalidSpec::Cycle));
    }

    #[test]
    fn one_to_one_arity_mismatch_is_rejected() {
        let mut spec = JobSpec::new();
        spec.add_operator(source("src", vec![0, 1, 2]))
            .add_operator(sink("out", vec![0, 1]));
        spec.connect(ConnectorKind::OneToOne, "src", "out");
        assert!(matches!(
            spec.validate(3),
            Err(InvalidSpec::OneToOneArity { .. })
        ));
    }

    #[test]
    fn dangling_and_orphan_operators_are_rejected() {
        let mut spec = JobSpec::new();
        spec.add_operator(source("src", vec![0]));
        spec.connect(ConnectorKind::OneToOne, "src", "ghost");
        assert!(matches!(
            spec.validate(1),
            Err(InvalidSpec::DanglingConnector(_))
        ));

        let mut spec = JobSpec::new();
        spec.add_operator(source("src", vec![0]))
            .add_operator(sink("out", vec![0]));
        assert_eq!(spec.validate(1), Err(InvalidSpec::NoInbound("out".into())));
    }

    #[test]
    fn node_out_of_range_is_rejected() {
        let mut spec = JobSpec::new();
        spec.add_operator(source("src", vec![5]));
        assert!(matches!(
            spec.validate(2),
            Err(InvalidSpec::NodeOutOfRange { .. })
        ));
    }
}
