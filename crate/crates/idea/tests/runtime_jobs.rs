//! Dataflow runtime behavior: routing, conservation, EOF propagation,
//! failure handling, and the predeployed-job lifecycle.

use idea::data::{Record, Value};
use idea::deploy::{batch_binding, deploy, invoke, undeploy, JobTemplate, SlotBindings};
use idea::record;
use idea::runtime::{
    build_job, hash_partition, Cluster, ConnectorKind, CustomOperator, CustomOperatorFactory,
    JobOutcome, JobSpec, OpContext, OperatorBehavior, OperatorDescriptor, OperatorKind,
};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

fn rec(i: i64) -> Record {
    record! {"id" => Value::Int64(i), "text" => Value::Text(format!("r{i}"))}
}

fn batch(n: i64) -> Vec<Record> {
    (0..n).map(rec).collect()
}

/// Custom sink that counts records per partition.
struct PartitionCounterFactory {
    counts: Arc<Vec<AtomicU64>>,
    frames: Arc<Vec<AtomicU64>>,
}

struct PartitionCounter {
    counts: Arc<Vec<AtomicU64>>,
    frames: Arc<Vec<AtomicU64>>,
}

impl CustomOperatorFactory for PartitionCounterFactory {
    fn instantiate(
        &self,
        _config: &serde_json::Value,
        _bindings: &SlotBindings,
        _partition: usize,
    ) -> Result<CustomOperator, idea::runtime::OpError> {
        Ok(Box::new(PartitionCounter {
            counts: self.counts.clone(),
            frames: self.frames.clone(),
        }))
    }
}

impl OperatorBehavior for PartitionCounter {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), idea::runtime::OpError> {
        while let Some(frame) = ctx.recv()? {
            self.counts[ctx.partition].fetch_add(frame.record_count() as u64, Ordering::SeqCst);
            self.frames[ctx.partition].fetch_add(1, Ordering::SeqCst);
        }
        Ok(())
    }
}

fn counter_cluster(nodes: usize, partitions: usize) -> (Cluster, Arc<Vec<AtomicU64>>, Arc<Vec<AtomicU64>>) {
    let cluster = Cluster::new(nodes);
    let counts: Arc<Vec<AtomicU64>> =
        Arc::new((0..partitions).map(|_| AtomicU64::new(0)).collect());
    let frames: Arc<Vec<AtomicU64>> =
        Arc::new((0..partitions).map(|_| AtomicU64::new(0)).collect());
    cluster.register_custom_op(
        "partition_counter",
        Arc::new(PartitionCounterFactory {
            counts: counts.clone(),
            frames: frames.clone(),
        }),
    );
    (cluster, counts, frames)
}

/// Source that emits `count` single-record frames, or fails at `fail_at`.
struct EmitterFactory;

struct Emitter {
    count: i64,
    fail_at: Option<i64>,
}

impl CustomOperatorFactory for EmitterFactory {
    fn instantiate(
        &self,
        config: &serde_json::Value,
        _bindings: &SlotBindings,
        _partition: usize,
    ) -> Result<CustomOperator, idea::runtime::OpError> {
        Ok(Box::new(Emitter {
            count: config["count"].as_i64().unwrap_or(0),
            fail_at: config["fail_at"].as_i64(),
        }))
    }
}

impl OperatorBehavior for Emitter {
    fn run(&mut self, ctx: &mut OpContext) -> Result<(), idea::runtime::OpError> {
        for i in 0..self.count {
            if self.fail_at == Some(i) {
                return Err(idea::runtime::OpError::Eval("synthetic failure".into()));
            }
            ctx.send_records(vec![idea::data::serialize_record(&rec(i))])?;
        }
        Ok(())
    }
}

fn emitter(id: &str, count: i64, fail_at: Option<i64>, nodes: Vec<usize>) -> OperatorDescriptor {
    OperatorDescriptor::on_nodes(
        id,
        OperatorKind::Custom {
            name: "emitter".into(),
            source: true,
            config: serde_json::json!({"count": count, "fail_at": fail_at}),
        },
        nodes,
    )
}

#[test]
fn round_robin_assigns_frames_in_order() {
    let (cluster, counts, frames) = counter_cluster(3, 3);
    cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
    let mut spec = JobSpec::new();
    spec.add_operator(emitter("src", 5, None, vec![0]));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Custom {
            name: "partition_counter".into(),
            source: false,
            config: serde_json::Value::Null,
        },
        vec![0, 1, 2],
    ));
    spec.connect(ConnectorKind::RoundRobin, "src", "out");
    let result = build_job(spec, &cluster).unwrap().run();
    assert!(result.is_ok(), "{:?}", result.outcome);
    // frames 0..4 -> partitions 0,1,2,0,1
    let per: Vec<u64> = frames.iter().map(|c| c.load(Ordering::SeqCst)).collect();
    assert_eq!(per, vec![2, 2, 1]);
    let recs: Vec<u64> = counts.iter().map(|c| c.load(Ordering::SeqCst)).collect();
    assert_eq!(recs.iter().sum::<u64>(), 5);
}

#[test]
fn broadcast_copies_to_every_partition() {
    let (cluster, counts, _) = counter_cluster(4, 4);
    cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
    let mut spec = JobSpec::new();
    spec.add_operator(emitter("src", 10, None, vec![0]));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Custom {
            name: "partition_counter".into(),
            source: false,
            config: serde_json::Value::Null,
        },
        vec![0, 1, 2, 3],
    ));
    spec.connect(ConnectorKind::Broadcast, "src", "out");
    assert!(build_job(spec, &cluster).unwrap().run().is_ok());
    for c in counts.iter() {
        assert_eq!(c.load(Ordering::SeqCst), 10);
    }
}

#[test]
fn hash_partitioning_is_stable_and_disjoint() {
    let run = || {
        let (cluster, counts, _) = counter_cluster(4, 4);
        cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
        let mut spec = JobSpec::new();
        spec.add_operator(emitter("src", 64, None, vec![0]));
        spec.add_operator(OperatorDescriptor::on_nodes(
            "out",
            OperatorKind::Custom {
                name: "partition_counter".into(),
                source: false,
                config: serde_json::Value::Null,
            },
            vec![0, 1, 2, 3],
        ));
        spec.connect(
            ConnectorKind::HashPartition {
                key_fields: vec!["id".into()],
            },
            "src",
            "out",
        );
        assert!(build_job(spec, &cluster).unwrap().run().is_ok());
        counts
            .iter()
            .map(|c| c.load(Ordering::SeqCst))
            .collect::<Vec<u64>>()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "partition assignment must be reproducible");
    assert_eq!(first.iter().sum::<u64>(), 64);
    // the routing function itself is pure and matches the observed split
    let key = idea::data::extract_primary_key(&rec(7), &["id".into()]).unwrap();
    assert_eq!(hash_partition(&key, 4), hash_partition(&key, 4));
}

#[test]
fn record_conservation_through_passthrough_stages() {
    let cluster = Cluster::new(2);
    cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
    let mut spec = JobSpec::new();
    spec.add_operator(emitter("src", 100, None, vec![0]));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "stage",
        OperatorKind::Partitioner,
        vec![0, 1],
    ));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: false },
        vec![0],
    ));
    spec.connect(ConnectorKind::RoundRobin, "src", "stage");
    spec.connect(ConnectorKind::RoundRobin, "stage", "out");
    let result = build_job(spec, &cluster).unwrap().run();
    assert!(result.is_ok());
    assert_eq!(result.records_out("src"), 100);
    assert_eq!(result.records_in("out"), 100);
}

#[test]
fn empty_source_completes_cleanly() {
    let cluster = Cluster::new(1);
    cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
    let mut spec = JobSpec::new();
    spec.add_operator(emitter("src", 0, None, vec![0]));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: false },
        vec![0],
    ));
    spec.connect(ConnectorKind::OneToOne, "src", "out");
    let result = build_job(spec, &cluster).unwrap().run();
    assert!(result.is_ok());
    assert_eq!(result.records_in("out"), 0);
}

#[test]
fn operator_failure_aborts_job_with_root_cause() {
    let cluster = Cluster::new(2);
    cluster.register_custom_op("emitter", Arc::new(EmitterFactory));
    let mut spec = JobSpec::new();
    spec.add_operator(emitter("src", 1000, Some(37), vec![0]));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "stage",
        OperatorKind::Partitioner,
        vec![0, 1],
    ));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: false },
        vec![1],
    ));
    spec.connect(ConnectorKind::RoundRobin, "src", "stage");
    spec.connect(ConnectorKind::RoundRobin, "stage", "out");
    let result = build_job(spec, &cluster).unwrap().run();
    match result.outcome {
        JobOutcome::Failed { op, cause } => {
            assert_eq!(op, "src");
            assert!(cause.contains("synthetic failure"), "{cause}");
        }
        other => panic!("expected failure, got {other:?}"),
    }
}

#[test]
fn deploy_compiles_once_across_invocations() {
    let cluster = Cluster::new(3);
    let mut spec = JobSpec::new();
    spec.add_operator(OperatorDescriptor::on_nodes(
        "src",
        OperatorKind::BatchSource {
            slot: "inputBatch".into(),
        },
        vec![0],
    ));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: true },
        vec![0, 1, 2],
    ));
    spec.connect(ConnectorKind::RoundRobin, "src", "out");
    let template = JobTemplate {
        spec,
        parameter_slots: vec!["inputBatch".into()],
    };
    assert_eq!(cluster.compile_count(), 0);
    let id = deploy(&cluster, &template).unwrap();
    assert_eq!(cluster.compile_count(), 1);
    for _ in 0..3 {
        let job = invoke(&cluster, id, batch_binding("inputBatch", batch(420))).unwrap();
        let result = job.wait();
        assert!(result.is_ok());
        assert_eq!(result.records_in("out"), 420);
    }
    assert_eq!(cluster.compile_count(), 1, "invocations must not recompile");

    // distinct templates get distinct ids
    let id2 = deploy(&cluster, &template).unwrap();
    assert_ne!(id, id2);
    assert_eq!(cluster.compile_count(), 2);
}

#[test]
fn invoke_output_matches_fresh_build() {
    let make_spec = || {
        let mut spec = JobSpec::new();
        spec.add_operator(OperatorDescriptor::on_nodes(
            "src",
            OperatorKind::BatchSource {
                slot: "inputBatch".into(),
            },
            vec![0],
        ));
        spec.add_operator(OperatorDescriptor::on_nodes(
            "out",
            OperatorKind::Sink { collect: true },
            vec![0, 1],
        ));
        spec.connect(ConnectorKind::RoundRobin, "src", "out");
        spec
    };
    let cluster = Cluster::new(2);
    let id = deploy(
        &cluster,
        &JobTemplate {
            spec: make_spec(),
            parameter_slots: vec!["inputBatch".into()],
        },
    )
    .unwrap();
    let via_invoke = invoke(&cluster, id, batch_binding("inputBatch", batch(50)))
        .unwrap()
        .wait();

    // fresh build+run of the fully bound spec on a clean cluster
    let cluster2 = Cluster::new(2);
    let fresh_id = deploy(
        &cluster2,
        &JobTemplate {
            spec: make_spec(),
            parameter_slots: vec!["inputBatch".into()],
        },
    )
    .unwrap();
    let via_fresh = invoke(&cluster2, fresh_id, batch_binding("inputBatch", batch(50)))
        .unwrap()
        .wait();

    let mut a = via_invoke.collected;
    let mut b = via_fresh.collected;
    let key = |r: &Record| r.field("id").as_i64().unwrap();
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);
    assert_eq!(a.len(), 50);
}

#[test]
fn invoke_errors_and_undeploy_lifecycle() {
    let cluster = Cluster::new(1);
    let mut spec = JobSpec::new();
    spec.add_operator(OperatorDescriptor::on_nodes(
        "src",
        OperatorKind::BatchSource {
            slot: "inputBatch".into(),
        },
        vec![0],
    ));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: false },
        vec![0],
    ));
    spec.connect(ConnectorKind::OneToOne, "src", "out");
    let template = JobTemplate {
        spec,
        parameter_slots: vec!["inputBatch".into()],
    };
    let id = deploy(&cluster, &template).unwrap();

    // missing slot
    let err = invoke(&cluster, id, SlotBindings::new()).unwrap_err();
    assert_eq!(
        err,
        idea::deploy::InvokeError::UnboundSlot("inputBatch".into())
    );

    // undeploy then invoke
    undeploy(&cluster, id).unwrap();
    assert_eq!(
        invoke(&cluster, id, batch_binding("inputBatch", batch(1))).unwrap_err(),
        idea::deploy::InvokeError::UnknownDeployedJob
    );
    assert_eq!(
        undeploy(&cluster, id).unwrap_err(),
        idea::deploy::UndeployError::UnknownDeployedJob
    );

    // a slot that never appears in the spec is rejected at deploy
    let bad = JobTemplate {
        spec: template.spec.clone(),
        parameter_slots: vec!["inputBatch".into(), "ghost".into()],
    };
    assert!(matches!(
        deploy(&cluster, &bad),
        Err(idea::deploy::DeployError::SlotUse { .. })
    ));

    // invalid spec is rejected at deploy
    let mut cyclic = JobSpec::new();
    cyclic.add_operator(OperatorDescriptor::on_nodes(
        "a",
        OperatorKind::Partitioner,
        vec![0],
    ));
    cyclic.add_operator(OperatorDescriptor::on_nodes(
        "b",
        OperatorKind::Partitioner,
        vec![0],
    ));
    cyclic.connect(ConnectorKind::OneToOne, "a", "b");
    cyclic.connect(ConnectorKind::OneToOne, "b", "a");
    assert!(matches!(
        deploy(
            &cluster,
            &JobTemplate {
                spec: cyclic,
                parameter_slots: vec![]
            }
        ),
        Err(idea::deploy::DeployError::Invalid(_))
    ));
}

#[test]
fn undeploy_refuses_while_invocation_in_flight() {
    // a source that blocks until released
    struct GateFactory {
        release: Arc<std::sync::atomic::AtomicBool>,
    }
    struct Gate {
        release: Arc<std::sync::atomic::AtomicBool>,
    }
    impl CustomOperatorFactory for GateFactory {
        fn instantiate(
            &self,
            _c: &serde_json::Value,
            _b: &SlotBindings,
            _p: usize,
        ) -> Result<CustomOperator, idea::runtime::OpError> {
            Ok(Box::new(Gate {
                release: self.release.clone(),
            }))
        }
    }
    impl OperatorBehavior for Gate {
        fn run(&mut self, _ctx: &mut OpContext) -> Result<(), idea::runtime::OpError> {
            while !self.release.load(Ordering::SeqCst) {
                std::thread::sleep(std::time::Duration::from_millis(2));
            }
            Ok(())
        }
    }
    let cluster = Cluster::new(1);
    let release = Arc::new(std::sync::atomic::AtomicBool::new(false));
    cluster.register_custom_op(
        "gate",
        Arc::new(GateFactory {
            release: release.clone(),
        }),
    );
    let mut spec = JobSpec::new();
    spec.add_operator(OperatorDescriptor::on_nodes(
        "src",
        OperatorKind::Custom {
            name: "gate".into(),
            source: true,
            config: serde_json::Value::Null,
        },
        vec![0],
    ));
    spec.add_operator(OperatorDescriptor::on_nodes(
        "out",
        OperatorKind::Sink { collect: false },
        vec![0],
    ));
    spec.connect(ConnectorKind::OneToOne, "src", "out");
    let id = deploy(
        &cluster,
        &JobTemplate {
            spec,
            parameter_slots: vec![],
        },
    )
    .unwrap();
    let running = invoke(&cluster, id, SlotBindings::new()).unwrap();
    assert_eq!(
        undeploy(&cluster, id).unwrap_err(),
        idea::deploy::UndeployError::InvocationInFlight
    );
    release.store(true, Ordering::SeqCst);
    assert!(running.wait().is_ok());
    undeploy(&cluster, id).unwrap();
}

#[test]
fn invoke_to_start_is_cheaper_than_cold_compile_run() {
    let make_spec = || {
        let mut spec = JobSpec::new();
        spec.add_operator(OperatorDescriptor::on_nodes(
            "src",
            OperatorKind::BatchSource {
                slot: "inputBatch".into(),
            },
            vec![0],
        ));
        for stage in 0..4 {
            spec.add_operator(OperatorDescriptor::on_nodes(
                format!("stage{stage}"),
                OperatorKind::Partitioner,
                vec![0, 1, 2, 3],
            ));
        }
        spec.add_operator(OperatorDescriptor::on_nodes(
            "out",
            OperatorKind::Sink { collect: false },
            vec![0, 1, 2, 3],
        ));
        spec.connect(ConnectorKind::RoundRobin, "src", "stage0");
        for stage in 0..3 {
            spec.connect(
                ConnectorKind::RoundRobin,
                format!("stage{stage}"),
                format!("stage{}", stage + 1),
            );
        }
        spec.connect(ConnectorKind::OneToOne, "stage3", "out");
        spec
    };
    let cluster = Cluster::new(4);
    let id = deploy(
        &cluster,
        &JobTemplate {
            spec: make_spec(),
            parameter_slots: vec!["inputBatch".into()],
        },
    )
    .unwrap();
    let records = batch(420);
    let trials = 50;
    let mut invoke_latencies = Vec::new();
    let mut cold_latencies = Vec::new();
    for _ in 0..trials {
        let t0 = std::time::Instant::now();
        let job = invoke(&cluster, id, batch_binding("inputBatch", records.clone())).unwrap();
        invoke_latencies.push(t0.elapsed());
        assert!(job.wait().is_ok());

        let t1 = std::time::Instant::now();
        let spec = make_spec();
        let fresh = build_job(spec, &cluster).unwrap();
        // bind by deploying fresh each time would be the true cold path; a
        // plain build+run lower-bounds it and must still lose
        let result = idea::deploy::invoke(
            &cluster,
            {
                let t = JobTemplate {
                    spec: make_spec(),
                    parameter_slots: vec!["inputBatch".into()],
                };
                let fresh_id = deploy(&cluster, &t).unwrap();
                fresh_id
            },
            batch_binding("inputBatch", records.clone()),
        )
        .unwrap()
        .wait();
        assert!(result.is_ok());
        drop(fresh);
        cold_latencies.push(t1.elapsed());
    }
    invoke_latencies.sort();
    cold_latencies.sort();
    let median_invoke = invoke_latencies[trials / 2];
    let median_cold = cold_latencies[trials / 2];
    assert!(
        median_invoke < median_cold,
        "invoke-to-start {median_invoke:?} should beat cold compile+run {median_cold:?}"
    );
}
