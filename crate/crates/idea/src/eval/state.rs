//! Evaluator state and the three evaluation models.
//!
//! State (materialized scans, hash tables, index handles, cached
//! uncorrelated subqueries, initialized natives) is built fresh per call
//! for the per-batch and per-record models, and exactly once at open for
//! the stream model. Subquery match lists are ordered by the matched
//! records' primary keys so outputs are deterministic and unaffected by
//! spilling.

use super::expr::{
    eval_expr, total_cmp_values, truthy, Binding, CExpr, Env, EvalFail, ExprHost, GroupCtx,
};
use super::join::{hash_join_with_spill, Row};
use super::native::NativeFunction;
use super::plan::{
    AggPlan, CompileError, DatasetRef, EnrichPlan, GroupPlan, ProbeStrategy, QueryPlan,
    Statefulness, SubPlan, SubSelect,
};
use super::{CompiledBody, CompiledFunction, EvalContext};
use crate::data::{print_json_value, serialize_record, KeyBytes, Record, Value};
use crate::storage::DatasetStore;
use std::sync::OnceLock;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("evaluation failed: {0}")]
    Fail(#[from] EvalFail),
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
    #[error(transparent)]
    Join(#[from] super::join::JoinError),
    #[error("stateful function rejected for stream evaluation")]
    StatefulStreamRejected,
    #[error("stream build state of {bytes} bytes exceeds the join memory budget of {budget}")]
    StreamBuildOverflow { bytes: usize, budget: usize },
    #[error("native function error: {0}")]
    Native(String),
}

/// Result of evaluating a batch: enriched records in input order, minus the
/// failed ones, which are reported with their index and cause.
#[derive(Debug, Default)]
pub struct BatchOutput {
    pub records: Vec<Record>,
    pub skipped: Vec<(usize, String)>,
}

enum RelState {
    /// Materialized rows, probed by filtering.
    Rows(Vec<Row>),
    /// Materialized rows plus an equality hash table over the build keys.
    Hash {
        table: HashMap<Vec<u8>, Vec<u32>>,
        rows: Vec<Row>,
    },
    /// Index nested-loop probe; no state is materialized, so reference
    /// updates are visible per probe.
    Index {
        dataset: Arc<DatasetStore>,
        alias: String,
    },
    /// Build side larger than the budget: joined per batch with spilling.
    Deferred {
        dataset: Arc<DatasetStore>,
        alias: String,
    },
}

pub struct EvaluatorState {
    subplans: Arc<Vec<SubPlan>>,
    rels: Vec<RelState>,
    cached: Vec<OnceLock<Value>>,
    natives: HashMap<String, Box<dyn NativeFunction>>,
    pub build_bytes: usize,
}

pub(crate) type CallHook<'a> = &'a dyn Fn(&str, &[Value]) -> Result<Value, EvalFail>;

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum BuildMode {
    /// Defer oversized hash builds to the spilling join.
    Batch,
    /// Always materialize (top-level queries).
    Eager,
    /// Refuse oversized state instead of spilling.
    Stream,
}

impl EvaluatorState {
    pub(crate) fn build(
        subplans: Arc<Vec<SubPlan>>,
        base_env: &Env<'_>,
        ctx: &EvalContext,
        mode: BuildMode,
        native_names: &[String],
        call: Option<CallHook<'_>>,
    ) -> Result<EvaluatorState, EvalError> {
        let mut natives = HashMap::new();
        for name in native_names {
            let instance = ctx
                .natives
                .instantiate(name)
                .map_err(|e| EvalError::Native(e.to_string()))?;
            natives.insert(name.clone(), instance);
        }
        let mut state = EvaluatorState {
            subplans: subplans.clone(),
            rels: Vec::new(),
            cached: (0..subplans.len()).map(|_| OnceLock::new()).collect(),
            natives,
            build_bytes: 0,
        };
        for plan in subplans.iter() {
            // nested subplans carry lower ids, so their rels already exist
            let (rel, bytes) = build_rel(&state, plan, base_env, ctx, mode, call)?;
            state.rels.push(rel);
            state.build_bytes += bytes;
        }
        if mode == BuildMode::Stream && state.build_bytes > ctx.join_budget {
            return Err(EvalError::StreamBuildOverflow {
                bytes: state.build_bytes,
                budget: ctx.join_budget,
            });
        }
        // freeze uncorrelated subqueries now; stream evaluators must never
        // recompute them later
        for (id, plan) in subplans.iter().enumerate() {
            if !plan.correlated {
                let host = Host {
                    state: &state,
                    ctx,
                    grace: None,
                    record_index: 0,
                    call,
                };
                let value = host.eval_subplan(id, base_env)?;
                let _ = state.cached[id].set(value);
            }
        }
        Ok(state)
    }

}

fn build_rel(
    state: &EvaluatorState,
    plan: &SubPlan,
    base_env: &Env<'_>,
    ctx: &EvalContext,
    mode: BuildMode,
    call: Option<CallHook<'_>>,
) -> Result<(RelState, usize), EvalError> {
    // index nested-loop probes materialize nothing
    if let ProbeStrategy::SpatialCircle {
        index: Some(_),
        alias,
        ..
    } = &plan.probe
    {
        let source = plan.sources.iter().find(|s| s.alias == *alias).unwrap();
        let DatasetRef::Stored(name) = &source.dataset else {
            unreachable!("index probe over a bound collection");
        };
        return Ok((
            RelState::Index {
                dataset: ctx.storage.dataset(name)?,
                alias: alias.clone(),
            },
            0,
        ));
    }
    // oversized single-dataset hash builds are joined with spilling, one
    // batch at a time
    if mode == BuildMode::Batch && plan.sources.len() == 1 {
        if let (ProbeStrategy::HashEq { .. }, DatasetRef::Stored(name)) =
            (&plan.probe, &plan.sources[0].dataset)
        {
            let dataset = ctx.storage.dataset(name)?;
            if dataset.approx_bytes() > ctx.join_budget {
                return Ok((
                    RelState::Deferred {
                        dataset,
                        alias: plan.sources[0].alias.clone(),
                    },
                    0,
                ));
            }
        }
    }

    let host = Host {
        state,
        ctx,
        grace: None,
        record_index: 0,
        call,
    };
    let mut sides: Vec<Vec<Row>> = Vec::new();
    for source in &plan.sources {
        sides.push(materialize_source(source, base_env, ctx)?);
    }
    let mut rows: Vec<Row> = match sides.len() {
        0 => vec![Row {
            bindings: Vec::new(),
            pks: Vec::new(),
        }],
        1 => sides.pop().unwrap(),
        2 => {
            let right = sides.pop().unwrap();
            let left = sides.pop().unwrap();
            join_sides(plan, left, right, base_env, &host)?
        }
        _ => unreachable!("validated at compile time"),
    };
    // row-local filters (and row LETs) apply during materialization
    if !plan.inter_preds.is_empty() || !plan.row_lets.is_empty() {
        let mut kept = Vec::with_capacity(rows.len());
        for row in rows {
            let mut scratch = base_env.child();
            bind_row(&mut scratch, &row);
            for (name, expr) in &plan.row_lets {
                let v = eval_expr(expr, &scratch, &host, None)?;
                scratch.bind(name.clone(), Binding::Val(v));
            }
            let mut pass = true;
            for pred in &plan.inter_preds {
                if !truthy(&eval_expr(pred, &scratch, &host, None)?) {
                    pass = false;
                    break;
                }
            }
            if pass {
                kept.push(row);
            }
        }
        rows = kept;
    }
    let bytes: usize = rows
        .iter()
        .map(|r| {
            r.bindings
                .iter()
                .map(|(_, rec)| serialize_record(rec).len() + 48)
                .sum::<usize>()
        })
        .sum();

    if let ProbeStrategy::HashEq { build_keys, .. } = &plan.probe {
        let mut table: HashMap<Vec<u8>, Vec<u32>> = HashMap::new();
        for (i, row) in rows.iter().enumerate() {
            let mut env = base_env.child();
            bind_row(&mut env, row);
            if let Some(key) = encode_key(build_keys, &env, &host)? {
                table.entry(key).or_default().push(i as u32);
            }
        }
        return Ok((RelState::Hash { table, rows }, bytes));
    }
    Ok((RelState::Rows(rows), bytes))
}

fn materialize_source(
    source: &super::plan::CSource,
    base_env: &Env<'_>,
    ctx: &EvalContext,
) -> Result<Vec<Row>, EvalError> {
    match &source.dataset {
        DatasetRef::Stored(name) => {
            let dataset = ctx.storage.dataset(name)?;
            let mut rows = Vec::new();
            for record in dataset.scan() {
                let pk = dataset
                    .key_of(&record)
                    .map_err(|e| EvalFail::Other(e.to_string()))?;
                rows.push(Row::single(source.alias.clone(), Arc::new(record), pk));
            }
            Ok(rows)
        }
        DatasetRef::Bound(name) => {
            let binding = base_env
                .lookup(name)
                .ok_or_else(|| EvalFail::UnknownIdentifier(name.clone()))?;
            let Value::Array(items) = binding.as_value() else {
                return Err(EvalFail::Type(format!("{name:?} is not a collection")).into());
            };
            let mut rows = Vec::new();
            for (i, item) in items.into_iter().enumerate() {
                let Value::Object(rec) = item else {
                    return Err(EvalFail::Type(format!(
                        "collection {name:?} holds a non-record element"
                    ))
                    .into());
                };
                let pk = KeyBytes((i as u64).to_be_bytes().to_vec());
                rows.push(Row::single(source.alias.clone(), Arc::new(rec), pk));
            }
            Ok(rows)
        }
    }
}

// dataset-dataset join during state build: hash on the detected equality
// pair, nested loop otherwise
fn join_sides(
    plan: &SubPlan,
    left: Vec<Row>,
    right: Vec<Row>,
    base_env: &Env<'_>,
    host: &Host<'_>,
) -> Result<Vec<Row>, EvalError> {
    let mut out = Vec::new();
    match &plan.inter_hash {
        Some((left_key, right_key)) => {
            let mut table: HashMap<Vec<u8>, Vec<u32>> = HashMap::new();
            for (i, row) in right.iter().enumerate() {
                let mut env = base_env.child();
                bind_row(&mut env, row);
                if let Some(key) = encode_key(std::slice::from_ref(right_key), &env, host)? {
                    table.entry(key).or_default().push(i as u32);
                }
            }
            for lrow in &left {
                let mut env = base_env.child();
                bind_row(&mut env, lrow);
                if let Some(key) = encode_key(std::slice::from_ref(left_key), &env, host)? {
                    if let Some(matches) = table.get(&key) {
                        for &ri in matches {
                            out.push(lrow.joined(&right[ri as usize]));
                        }
                    }
                }
            }
        }
        None => {
            for lrow in &left {
                for rrow in &right {
                    out.push(lrow.joined(rrow));
                }
            }
        }
    }
    Ok(out)
}

fn bind_row(env: &mut Env<'_>, row: &Row) {
    for (alias, record) in &row.bindings {
        env.bind(alias.clone(), Binding::Rec(record.clone()));
    }
}

/// Encodes probe/build key expressions into comparable bytes; None when any
/// key is absent (absent keys never join).
fn encode_key(
    keys: &[CExpr],
    env: &Env<'_>,
    host: &dyn ExprHost,
) -> Result<Option<Vec<u8>>, EvalFail> {
    let mut out = Vec::new();
    for key in keys {
        let v = eval_expr(key, env, host, None)?;
        if v.is_absent() {
            return Ok(None);
        }
        match KeyBytes::from_scalar(&v) {
            Ok(k) => out.extend_from_slice(&k.0),
            Err(_) => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Per-call evaluation context wiring the state, the storage-backed
/// context, and optional spilled-join candidates together.
pub(crate) struct Host<'a> {
    pub state: &'a EvaluatorState,
    #[allow(dead_code)] // reserved for probe paths that need the context
    pub ctx: &'a EvalContext,
    /// Spill-joined candidates: subplan id -> per-record rows.
    pub grace: Option<&'a HashMap<usize, HashMap<usize, Vec<Row>>>>,
    pub record_index: usize,
    /// Enrichment-function call hook for top-level queries.
    pub call: Option<CallHook<'a>>,
}

impl Host<'_> {
    fn plan(&self, id: usize) -> &SubPlan {
        &self.state.subplans[id]
    }

    fn candidate_rows(&self, id: usize, env: &Env<'_>) -> Result<Vec<Row>, EvalFail> {
        let plan = self.plan(id);
        let rows = match (&self.state.rels[id], &plan.probe) {
            (RelState::Deferred { .. }, _) => {
                let grace = self
                    .grace
                    .and_then(|g| g.get(&id))
                    .ok_or_else(|| EvalFail::Other("missing spilled join result".into()))?;
                grace.get(&self.record_index).cloned().unwrap_or_default()
            }
            (RelState::Hash { table, rows }, ProbeStrategy::HashEq { probe_keys, .. }) => {
                match encode_key(probe_keys, env, self)? {
                    None => Vec::new(),
                    Some(key) => table
                        .get(&key)
                        .map(|idxs| idxs.iter().map(|&i| rows[i as usize].clone()).collect())
                        .unwrap_or_default(),
                }
            }
            (
                RelState::Index { dataset, alias },
                ProbeStrategy::SpatialCircle {
                    center,
                    radius,
                    index: Some(index),
                    ..
                },
            ) => {
                let Some(circle) = make_circle(center, radius, env, self)? else {
                    return Ok(Vec::new());
                };
                let records = dataset
                    .index_lookup_circle(index, &circle)
                    .map_err(|e| EvalFail::Other(e.to_string()))?;
                let mut rows = Vec::with_capacity(records.len());
                for record in records {
                    let pk = dataset
                        .key_of(&record)
                        .map_err(|e| EvalFail::Other(e.to_string()))?;
                    rows.push(Row::single(alias.clone(), Arc::new(record), pk));
                }
                rows
            }
            (
                RelState::Rows(rows),
                ProbeStrategy::SpatialCircle {
                    alias,
                    field,
                    center,
                    radius,
                    ..
                },
            ) => {
                let Some(circle) = make_circle(center, radius, env, self)? else {
                    return Ok(Vec::new());
                };
                rows.iter()
                    .filter(|row| {
                        row.bindings
                            .iter()
                            .find(|(a, _)| a == alias)
                            .map(|(_, rec)| match rec.field(field) {
                                Value::Point(p) => circle.contains_point(p),
                                _ => false,
                            })
                            .unwrap_or(false)
                    })
                    .cloned()
                    .collect()
            }
            (RelState::Rows(rows), ProbeStrategy::All) => rows.clone(),
            (RelState::Rows(rows), ProbeStrategy::HashEq { probe_keys, build_keys }) => {
                // hash build was skipped (non-batch path); probe by equality
                let probe = encode_key(probe_keys, env, self)?;
                let mut out = Vec::new();
                if let Some(probe) = probe {
                    for row in rows {
                        let mut renv = env.child();
                        bind_row(&mut renv, row);
                        if encode_key(build_keys, &renv, self)?.as_deref() == Some(&probe[..]) {
                            out.push(row.clone());
                        }
                    }
                }
                out
            }
            (RelState::Hash { rows, .. }, _) => rows.clone(),
            (RelState::Index { .. }, _) => {
                return Err(EvalFail::Other("inconsistent probe state".into()))
            }
        };
        Ok(rows)
    }

    /// Candidates surviving the residual predicates, ordered by primary key.
    fn matching_rows(&self, id: usize, env: &Env<'_>) -> Result<Vec<Row>, EvalFail> {
        let plan = self.plan(id);
        let mut rows = self.candidate_rows(id, env)?;
        if !plan.residual.is_empty() {
            let mut kept = Vec::with_capacity(rows.len());
            for row in rows {
                let mut renv = env.child();
                bind_row(&mut renv, &row);
                let mut pass = true;
                for pred in &plan.residual {
                    if !truthy(&eval_expr(pred, &renv, self, None)?) {
                        pass = false;
                        break;
                    }
                }
                if pass {
                    kept.push(row);
                }
            }
            rows = kept;
        }
        rows.sort_by(|a, b| a.pks.cmp(&b.pks));
        Ok(rows)
    }

    pub(crate) fn eval_subplan(&self, id: usize, env: &Env<'_>) -> Result<Value, EvalFail> {
        let plan = self.plan(id);
        if !plan.correlated {
            if let Some(v) = self.state.cached[id].get() {
                return Ok(v.clone());
            }
        }
        let rows = self.matching_rows(id, env)?;
        let items = if let Some(group) = &plan.group {
            let groups = self.group_rows(plan, group, &rows, env)?;
            let mut entries: Vec<(Vec<Value>, Vec<Value>)> = groups;
            entries.sort_by(|a, b| cmp_value_tuples(&a.0, &b.0));
            let mut ordered: Vec<(Vec<Value>, Vec<Value>)> = entries;
            if let Some(order) = &plan.order {
                let mut keyed: Vec<(Value, (Vec<Value>, Vec<Value>))> = Vec::new();
                for entry in ordered {
                    let gctx = GroupCtx {
                        keys: &entry.0,
                        aggs: &entry.1,
                    };
                    let k = eval_expr(&order.key, env, self, Some(&gctx))?;
                    keyed.push((k, entry));
                }
                keyed.sort_by(|a, b| {
                    let ord = total_cmp_values(&a.0, &b.0);
                    if order.desc {
                        ord.reverse()
                    } else {
                        ord
                    }
                });
                ordered = keyed.into_iter().map(|(_, e)| e).collect();
            }
            if let Some(limit) = plan.limit {
                ordered.truncate(limit);
            }
            let mut out = Vec::with_capacity(ordered.len());
            for (keys, aggs) in &ordered {
                let gctx = GroupCtx { keys, aggs };
                let v = self.project(plan, env, None, Some(&gctx))?;
                if !v.is_missing() {
                    out.push(v);
                }
            }
            out
        } else {
            let mut ordered: Vec<&Row> = rows.iter().collect();
            if let Some(order) = &plan.order {
                let mut keyed: Vec<(Value, &Row)> = Vec::new();
                for row in ordered {
                    let mut renv = env.child();
                    bind_row(&mut renv, row);
                    keyed.push((eval_expr(&order.key, &renv, self, None)?, row));
                }
                keyed.sort_by(|a, b| {
                    let ord = total_cmp_values(&a.0, &b.0);
                    if order.desc {
                        ord.reverse()
                    } else {
                        ord
                    }
                });
                ordered = keyed.into_iter().map(|(_, r)| r).collect();
            }
            if let Some(limit) = plan.limit {
                ordered.truncate(limit);
            }
            let mut out = Vec::with_capacity(ordered.len());
            for row in ordered {
                let mut renv = env.child();
                bind_row(&mut renv, row);
                let v = self.project(plan, env, Some(&renv), None)?;
                if !v.is_missing() {
                    out.push(v);
                }
            }
            out
        };
        Ok(Value::Array(items))
    }

    fn project(
        &self,
        plan: &SubPlan,
        outer: &Env<'_>,
        row_env: Option<&Env<'_>>,
        group: Option<&GroupCtx<'_>>,
    ) -> Result<Value, EvalFail> {
        let env = row_env.unwrap_or(outer);
        match &plan.select {
            SubSelect::Value(expr) => eval_expr(expr, env, self, group),
            SubSelect::Items(items) => {
                let mut rec = Record::with_capacity(items.len());
                for (name, expr) in items {
                    rec.set(name.clone(), eval_expr(expr, env, self, group)?);
                }
                Ok(Value::Object(rec))
            }
        }
    }

    fn group_rows(
        &self,
        _plan: &SubPlan,
        group: &GroupPlan,
        rows: &[Row],
        env: &Env<'_>,
    ) -> Result<Vec<(Vec<Value>, Vec<Value>)>, EvalFail> {
        struct AggAcc {
            count: i64,
            sum_int: i64,
            sum_float: f64,
            sum_is_float: bool,
            sum_seen: bool,
        }
        impl AggAcc {
            fn new() -> Self {
                AggAcc {
                    count: 0,
                    sum_int: 0,
                    sum_float: 0.0,
                    sum_is_float: false,
                    sum_seen: false,
                }
            }
        }
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<(Vec<Value>, Vec<AggAcc>)> = Vec::new();
        // a query aggregating without GROUP BY forms one implicit group,
        // present even over zero rows
        if group.keys.is_empty() {
            index.insert(String::new(), 0);
            groups.push((
                Vec::new(),
                group.aggs.iter().map(|_| AggAcc::new()).collect(),
            ));
        }
        for row in rows {
            let mut renv = env.child();
            bind_row(&mut renv, row);
            let mut keys = Vec::with_capacity(group.keys.len());
            let mut enc = String::new();
            for (_, kexpr) in &group.keys {
                let v = eval_expr(kexpr, &renv, self, None)?;
                enc.push_str(&print_json_value(&v));
                enc.push('\u{1f}');
                keys.push(v);
            }
            let slot = match index.get(&enc) {
                Some(&i) => i,
                None => {
                    index.insert(enc, groups.len());
                    groups.push((keys, group.aggs.iter().map(|_| AggAcc::new()).collect()));
                    groups.len() - 1
                }
            };
            let accs = &mut groups[slot].1;
            for (acc, agg) in accs.iter_mut().zip(group.aggs.iter()) {
                match agg {
                    AggPlan::CountStar => acc.count += 1,
                    AggPlan::CountExpr(e) => {
                        if !eval_expr(e, &renv, self, None)?.is_absent() {
                            acc.count += 1;
                        }
                    }
                    AggPlan::Sum(e) => {
                        let v = eval_expr(e, &renv, self, None)?;
                        match v {
                            Value::Missing | Value::Null => {}
                            Value::Int64(n) => {
                                acc.sum_seen = true;
                                if acc.sum_is_float {
                                    acc.sum_float += n as f64;
                                } else {
                                    acc.sum_int += n;
                                }
                            }
                            Value::Float64(f) => {
                                acc.sum_seen = true;
                                if !acc.sum_is_float {
                                    acc.sum_is_float = true;
                                    acc.sum_float = acc.sum_int as f64;
                                }
                                acc.sum_float += f;
                            }
                            other => {
                                return Err(EvalFail::Type(format!(
                                    "sum over non-numeric {}",
                                    other.kind()
                                )))
                            }
                        }
                    }
                }
            }
        }
        Ok(groups
            .into_iter()
            .map(|(keys, accs)| {
                let aggs = accs
                    .iter()
                    .zip(group.aggs.iter())
                    .map(|(acc, agg)| match agg {
                        AggPlan::CountStar | AggPlan::CountExpr(_) => Value::Int64(acc.count),
                        AggPlan::Sum(_) => {
                            if !acc.sum_seen {
                                Value::Null
                            } else if acc.sum_is_float {
                                Value::Float64(acc.sum_float)
                            } else {
                                Value::Int64(acc.sum_int)
                            }
                        }
                    })
                    .collect();
                (keys, aggs)
            })
            .collect())
    }
}

fn cmp_value_tuples(a: &[Value], b: &[Value]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let ord = total_cmp_values(x, y);
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

fn make_circle(
    center: &CExpr,
    radius: &CExpr,
    env: &Env<'_>,
    host: &dyn ExprHost,
) -> Result<Option<crate::data::Circle>, EvalFail> {
    let c = eval_expr(center, env, host, None)?;
    let r = eval_expr(radius, env, host, None)?;
    match (c, r) {
        (Value::Point(p), r) => match r.as_f64() {
            Some(radius) if radius > 0.0 && radius.is_finite() => {
                Ok(Some(crate::data::Circle::new(p, radius)))
            }
            _ => Err(EvalFail::Type("circle radius must be positive".into())),
        },
        (Value::Missing | Value::Null, _) => Ok(None),
        (other, _) => Err(EvalFail::Type(format!(
            "spatial probe center must be a point, got {}",
            other.kind()
        ))),
    }
}

impl ExprHost for Host<'_> {
    fn subquery(&self, id: usize, env: &Env<'_>) -> Result<Value, EvalFail> {
        self.eval_subplan(id, env)
    }

    fn exists(&self, id: usize, env: &Env<'_>) -> Result<bool, EvalFail> {
        let plan = self.plan(id);
        if !plan.correlated {
            if let Some(Value::Array(items)) = self.state.cached[id].get() {
                return Ok(!items.is_empty());
            }
        }
        // short-circuit: any candidate surviving the residual suffices
        let rows = self.candidate_rows(id, env)?;
        if plan.residual.is_empty() {
            return Ok(!rows.is_empty());
        }
        for row in rows {
            let mut renv = env.child();
            bind_row(&mut renv, &row);
            let mut pass = true;
            for pred in &plan.residual {
                if !truthy(&eval_expr(pred, &renv, self, None)?) {
                    pass = false;
                    break;
                }
            }
            if pass {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn native(&self, name: &str, args: &[Value]) -> Result<Value, EvalFail> {
        let f = self
            .state
            .natives
            .get(name)
            .ok_or_else(|| EvalFail::Other(format!("native {name:?} not initialized")))?;
        f.evaluate(args).map_err(|e| EvalFail::Native(e.to_string()))
    }

    fn function_call(&self, name: &str, args: &[Value]) -> Result<Value, EvalFail> {
        match self.call {
            Some(call) => call(name, args),
            None => Err(EvalFail::Other(format!(
                "function {name:?} cannot be called in this context"
            ))),
        }
    }
}

fn collect_native_names_expr(expr: &CExpr, out: &mut Vec<String>) {
    match expr {
        CExpr::Native(name, args) => {
            if !out.contains(name) {
                out.push(name.clone());
            }
            for a in args {
                collect_native_names_expr(a, out);
            }
        }
        CExpr::Path(b, _) => collect_native_names_expr(b, out),
        CExpr::Index(b, i) => {
            collect_native_names_expr(b, out);
            collect_native_names_expr(i, out);
        }
        CExpr::Object(fields) => fields
            .iter()
            .for_each(|(_, e)| collect_native_names_expr(e, out)),
        CExpr::ArrayLit(items) | CExpr::Builtin(_, items) | CExpr::FunctionCall(_, items) => {
            items.iter().for_each(|e| collect_native_names_expr(e, out))
        }
        CExpr::Not(e) | CExpr::Neg(e) => collect_native_names_expr(e, out),
        CExpr::Bin(_, l, r) | CExpr::In(l, r) | CExpr::NotIn(l, r) => {
            collect_native_names_expr(l, out);
            collect_native_names_expr(r, out);
        }
        CExpr::Case {
            operand,
            arms,
            otherwise,
        } => {
            if let Some(op) = operand {
                collect_native_names_expr(op, out);
            }
            for (w, t) in arms {
                collect_native_names_expr(w, out);
                collect_native_names_expr(t, out);
            }
            if let Some(e) = otherwise {
                collect_native_names_expr(e, out);
            }
        }
        _ => {}
    }
}

fn collect_native_names_sub(plan: &SubPlan, out: &mut Vec<String>) {
    for (_, e) in &plan.row_lets {
        collect_native_names_expr(e, out);
    }
    for e in plan
        .inter_preds
        .iter()
        .chain(plan.residual.iter())
    {
        collect_native_names_expr(e, out);
    }
    if let Some((l, r)) = &plan.inter_hash {
        collect_native_names_expr(l, out);
        collect_native_names_expr(r, out);
    }
    match &plan.probe {
        ProbeStrategy::HashEq {
            probe_keys,
            build_keys,
        } => {
            for e in probe_keys.iter().chain(build_keys.iter()) {
                collect_native_names_expr(e, out);
            }
        }
        ProbeStrategy::SpatialCircle { center, radius, .. } => {
            collect_native_names_expr(center, out);
            collect_native_names_expr(radius, out);
        }
        ProbeStrategy::All => {}
    }
    match &plan.select {
        SubSelect::Value(e) => collect_native_names_expr(e, out),
        SubSelect::Items(items) => items
            .iter()
            .for_each(|(_, e)| collect_native_names_expr(e, out)),
    }
    if let Some(g) = &plan.group {
        for (_, e) in &g.keys {
            collect_native_names_expr(e, out);
        }
        for agg in &g.aggs {
            match agg {
                AggPlan::CountExpr(e) | AggPlan::Sum(e) => collect_native_names_expr(e, out),
                AggPlan::CountStar => {}
            }
        }
    }
    if let Some(o) = &plan.order {
        collect_native_names_expr(&o.key, out);
    }
}

pub(crate) fn native_names_of_plan(plan: &EnrichPlan) -> Vec<String> {
    let mut out = Vec::new();
    for (_, e) in &plan.lets {
        collect_native_names_expr(e, &mut out);
    }
    for (_, e) in &plan.fields {
        collect_native_names_expr(e, &mut out);
    }
    for sub in plan.subplans.iter() {
        collect_native_names_sub(sub, &mut out);
    }
    out
}

pub(crate) fn native_names_of_query(plan: &QueryPlan) -> Vec<String> {
    let mut out = Vec::new();
    for (_, e) in &plan.pre_lets {
        collect_native_names_expr(e, &mut out);
    }
    for sub in plan.subplans.iter() {
        collect_native_names_sub(sub, &mut out);
    }
    out
}

/// Declarative evaluator over a built state: enriches one record.
pub(crate) fn enrich_record(
    plan: &EnrichPlan,
    host: &Host<'_>,
    record: &Record,
) -> Result<Record, EvalFail> {
    let mut env = Env::root();
    env.bind(plan.param.clone(), Binding::Rec(Arc::new(record.clone())));
    for (name, expr) in &plan.lets {
        let v = eval_expr(expr, &env, host, None)?;
        env.bind(name.clone(), Binding::Val(v));
    }
    let star = env
        .lookup(&plan.star)
        .ok_or_else(|| EvalFail::UnknownIdentifier(plan.star.clone()))?;
    let mut out = match star {
        Binding::Rec(r) => r.as_ref().clone(),
        Binding::Val(Value::Object(r)) => r.clone(),
        Binding::Val(other) => {
            return Err(EvalFail::Type(format!(
                "cannot merge fields of {}",
                other.kind()
            )))
        }
    };
    for (name, expr) in &plan.fields {
        let v = eval_expr(expr, &env, host, None)?;
        out.set(name.clone(), v);
    }
    Ok(out)
}

/// Precomputed spill-join results for every deferred subplan of a batch.
pub(crate) fn grace_candidates(
    plan: &EnrichPlan,
    state: &EvaluatorState,
    batch: &[Record],
    ctx: &EvalContext,
) -> Result<Option<HashMap<usize, HashMap<usize, Vec<Row>>>>, EvalError> {
    let mut all: Option<HashMap<usize, HashMap<usize, Vec<Row>>>> = None;
    for (id, sub) in plan.subplans.iter().enumerate() {
        let RelState::Deferred { dataset, alias } = &state.rels[id] else {
            continue;
        };
        let ProbeStrategy::HashEq {
            probe_keys,
            build_keys,
        } = &sub.probe
        else {
            continue;
        };
        let host = Host {
            state,
            ctx,
            grace: None,
            record_index: 0,
            call: None,
        };
        // probe keys per input record
        let mut probes = Vec::new();
        for (i, record) in batch.iter().enumerate() {
            let mut env = Env::root();
            env.bind(plan.param.clone(), Binding::Rec(Arc::new(record.clone())));
            if let Some(key) = encode_key(probe_keys, &env, &host)? {
                probes.push((i, key));
            }
        }
        // stream the dataset scan as the build side without materializing it
        let build_err = std::cell::RefCell::new(None::<EvalFail>);
        let result = {
            let alias = alias.clone();
            let build_iter = dataset.scan().filter_map(|record| {
                let pk = dataset.key_of(&record).ok()?;
                let row = Row::single(alias.clone(), Arc::new(record), pk);
                let mut env = Env::root();
                bind_row(&mut env, &row);
                match encode_key(build_keys, &env, &host) {
                    Ok(Some(key)) => Some((key, row)),
                    Ok(None) => None,
                    Err(e) => {
                        build_err.borrow_mut().get_or_insert(e);
                        None
                    }
                }
            });
            hash_join_with_spill(build_iter, &probes, ctx.join_budget, &ctx.spill_dir)?
        };
        if let Some(e) = build_err.into_inner() {
            return Err(e.into());
        }
        all.get_or_insert_with(HashMap::new).insert(id, result);
    }
    Ok(all)
}

/// Evaluates a function over a batch: state is built fresh for this call,
/// output preserves input order, and failing records are skipped and
/// reported rather than aborting the batch.
pub fn evaluate_batch(
    f: &CompiledFunction,
    batch: &[Record],
    ctx: &EvalContext,
) -> Result<BatchOutput, EvalError> {
    match &f.body {
        CompiledBody::Native { factory } => {
            let instance = ctx
                .natives
                .instantiate(factory)
                .map_err(|e| EvalError::Native(e.to_string()))?;
            let mut out = BatchOutput::default();
            for (i, record) in batch.iter().enumerate() {
                match instance.evaluate(&[Value::Object(record.clone())]) {
                    Ok(Value::Object(rec)) => out.records.push(rec),
                    Ok(other) => out
                        .skipped
                        .push((i, format!("native returned {}", other.kind()))),
                    Err(e) => out.skipped.push((i, e.to_string())),
                }
            }
            Ok(out)
        }
        CompiledBody::Plan(plan) => {
            let base = Env::root();
            let state = EvaluatorState::build(
                plan.subplans.clone(),
                &base,
                ctx,
                BuildMode::Batch,
                &native_names_of_plan(plan),
                None,
            )?;
            let grace = grace_candidates(plan, &state, batch, ctx)?;
            let mut out = BatchOutput::default();
            for (i, record) in batch.iter().enumerate() {
                let host = Host {
                    state: &state,
                    ctx,
                    grace: grace.as_ref(),
                    record_index: i,
                    call: None,
                };
                match enrich_record(plan, &host, record) {
                    Ok(rec) => out.records.push(rec),
                    Err(e) => out.skipped.push((i, e.to_string())),
                }
            }
            Ok(out)
        }
    }
}

/// Per-record model: equivalent to a one-element batch, so any state is
/// rebuilt for every record and reference updates are visible immediately.
pub fn evaluate_record(
    f: &CompiledFunction,
    record: &Record,
    ctx: &EvalContext,
) -> Result<Record, EvalError> {
    let out = evaluate_batch(f, std::slice::from_ref(record), ctx)?;
    match out.records.into_iter().next() {
        Some(rec) => Ok(rec),
        None => {
            let cause = out
                .skipped
                .into_iter()
                .next()
                .map(|(_, c)| c)
                .unwrap_or_else(|| "record produced no output".into());
            Err(EvalError::Fail(EvalFail::Other(cause)))
        }
    }
}

/// Stream-model evaluator: state is built once at open and reused for every
/// batch. Stateful functions are rejected unless the context explicitly
/// allows stale stream state; builds larger than the join budget fail
/// instead of spilling, since a stream never ends.
pub struct StreamEvaluator {
    plan: Arc<CompiledFunction>,
    state: Option<EvaluatorState>,
    native: Option<Box<dyn NativeFunction>>,
    ctx: EvalContext,
}

pub fn open_stream_evaluator(
    f: &Arc<CompiledFunction>,
    ctx: &EvalContext,
) -> Result<StreamEvaluator, EvalError> {
    if f.statefulness == Statefulness::Stateful && !ctx.allow_stale_stream {
        return Err(EvalError::StatefulStreamRejected);
    }
    match &f.body {
        CompiledBody::Native { factory } => {
            let instance = ctx
                .natives
                .instantiate(factory)
                .map_err(|e| EvalError::Native(e.to_string()))?;
            Ok(StreamEvaluator {
                plan: f.clone(),
                state: None,
                native: Some(instance),
                ctx: ctx.clone(),
            })
        }
        CompiledBody::Plan(plan) => {
            let base = Env::root();
            let state = EvaluatorState::build(
                plan.subplans.clone(),
                &base,
                ctx,
                BuildMode::Stream,
                &native_names_of_plan(plan),
                None,
            )?;
            Ok(StreamEvaluator {
                plan: f.clone(),
                state: Some(state),
                native: None,
                ctx: ctx.clone(),
            })
        }
    }
}

impl StreamEvaluator {
    /// Applies the function to a batch reusing the open state.
    pub fn apply(&self, batch: &[Record]) -> BatchOutput {
        let mut out = BatchOutput::default();
        match (&self.plan.body, &self.state, &self.native) {
            (CompiledBody::Native { .. }, _, Some(instance)) => {
                for (i, record) in batch.iter().enumerate() {
                    match instance.evaluate(&[Value::Object(record.clone())]) {
                        Ok(Value::Object(rec)) => out.records.push(rec),
                        Ok(other) => out
                            .skipped
                            .push((i, format!("native returned {}", other.kind()))),
                        Err(e) => out.skipped.push((i, e.to_string())),
                    }
                }
            }
            (CompiledBody::Plan(plan), Some(state), _) => {
                for (i, record) in batch.iter().enumerate() {
                    let host = Host {
                        state,
                        ctx: &self.ctx,
                        grace: None,
                        record_index: i,
                        call: None,
                    };
                    match enrich_record(plan, &host, record) {
                        Ok(rec) => out.records.push(rec),
                        Err(e) => out.skipped.push((i, e.to_string())),
                    }
                }
            }
            _ => unreachable!("stream evaluator built without state"),
        }
        out
    }
}
