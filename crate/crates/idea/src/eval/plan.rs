//! Compiles parsed function bodies and queries into execution plans.
//!
//! A subquery compiles to a scan over one or two datasets plus a probe
//! strategy extracted from its predicates: equality conjuncts between the
//! input record and a scan column become a hash build/probe pair; a
//! point-in-circle predicate over an indexed point column becomes an index
//! nested-loop probe; everything else stays a residual filter over the
//! materialized rows. Plan shape is dictated by the query itself plus the
//! index hint, never by cost.

use super::expr::{Builtin, CExpr};
use super::native::NativeRegistry;
use crate::query::ast::{
    BinOp, Expr, FromItem, GroupItem, QueryExpr, SelectHead, SelectItem,
};
use crate::storage::StorageEngine;
use std::collections::HashSet;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error("unknown dataset or binding {0:?}")]
    UnknownDataset(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("unknown identifier {0:?}")]
    UnknownIdentifier(String),
    #[error("unsupported query shape: {0}")]
    Unsupported(String),
    #[error("invalid aggregate usage: {0}")]
    BadAggregate(String),
}

/// Whether a function may build intermediate state over reference data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statefulness {
    Stateless,
    Stateful,
}

#[derive(Debug, Clone, Copy)]
pub struct CompileOptions {
    /// When false, spatial probes never use an index (the "naive" plans).
    pub use_indexes: bool,
    /// Allow calls to registered enrichment functions (top-level queries).
    pub allow_function_calls: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            use_indexes: true,
            allow_function_calls: false,
        }
    }
}

#[derive(Debug, Clone)]
pub enum DatasetRef {
    Stored(String),
    Bound(String),
}

#[derive(Debug, Clone)]
pub struct CSource {
    pub dataset: DatasetRef,
    pub alias: String,
}

#[derive(Debug, Clone)]
pub enum ProbeStrategy {
    /// Scan every materialized row; residual predicates do the filtering.
    All,
    /// Composite-key hash probe: build keys over scan aliases, probe keys
    /// over the outer environment.
    HashEq {
        probe_keys: Vec<CExpr>,
        build_keys: Vec<CExpr>,
    },
    /// Distance-to-center probe over a point column, optionally served by
    /// an R-tree index.
    SpatialCircle {
        alias: String,
        field: String,
        center: CExpr,
        radius: CExpr,
        index: Option<String>,
    },
}

#[derive(Debug, Clone)]
pub enum SubSelect {
    Value(CExpr),
    Items(Vec<(String, CExpr)>),
}

#[derive(Debug, Clone)]
pub enum AggPlan {
    CountStar,
    CountExpr(CExpr),
    Sum(CExpr),
}

#[derive(Debug, Clone)]
pub struct GroupPlan {
    pub keys: Vec<(String, CExpr)>,
    pub aggs: Vec<AggPlan>,
}

#[derive(Debug, Clone)]
pub struct OrderPlan {
    pub key: CExpr,
    pub desc: bool,
}

#[derive(Debug, Clone)]
pub struct SubPlan {
    pub sources: Vec<CSource>,
    pub row_lets: Vec<(String, CExpr)>,
    /// Equality pair joining source 0 and source 1 rows.
    pub inter_hash: Option<(CExpr, CExpr)>,
    /// Row-local predicates applied while materializing.
    pub inter_preds: Vec<CExpr>,
    pub probe: ProbeStrategy,
    /// Probe-correlated predicates not consumed by the strategy.
    pub residual: Vec<CExpr>,
    pub select: SubSelect,
    pub group: Option<GroupPlan>,
    pub order: Option<OrderPlan>,
    pub limit: Option<usize>,
    pub correlated: bool,
}

/// Compiled enrichment function body: bind the input record, evaluate the
/// LET chain, then merge computed fields into a copy of the input.
#[derive(Debug, Clone)]
pub struct EnrichPlan {
    pub param: String,
    pub lets: Vec<(String, CExpr)>,
    pub star: String,
    pub fields: Vec<(String, CExpr)>,
    pub subplans: Arc<Vec<SubPlan>>,
}

/// Compiled top-level query: statement LETs evaluated once, then the main
/// subplan produces the result rows.
#[derive(Debug, Clone)]
pub struct QueryPlan {
    pub pre_lets: Vec<(String, CExpr)>,
    pub main: usize,
    pub subplans: Arc<Vec<SubPlan>>,
}

pub(crate) struct Compiler<'a> {
    storage: &'a StorageEngine,
    natives: &'a NativeRegistry,
    known_functions: Option<&'a dyn Fn(&str) -> bool>,
    opts: CompileOptions,
    subplans: Vec<SubPlan>,
}

#[derive(Clone, Default)]
pub(crate) struct Scope {
    names: Vec<String>,
}

impl Scope {
    fn with(&self, extra: &[String]) -> Scope {
        let mut names = self.names.clone();
        names.extend(extra.iter().cloned());
        Scope { names }
    }

    fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }
}

impl<'a> Compiler<'a> {
    pub fn new(
        storage: &'a StorageEngine,
        natives: &'a NativeRegistry,
        known_functions: Option<&'a dyn Fn(&str) -> bool>,
        opts: CompileOptions,
    ) -> Self {
        Compiler {
            storage,
            natives,
            known_functions,
            opts,
            subplans: Vec::new(),
        }
    }

    /// Compiles a single-parameter function body of the star-merge shape.
    pub fn compile_function_body(
        mut self,
        param: &str,
        body: &QueryExpr,
    ) -> Result<EnrichPlan, CompileError> {
        if !body.from.is_empty() {
            return Err(CompileError::Unsupported(
                "function bodies select from their input record, not a FROM clause".into(),
            ));
        }
        if body.where_clause.is_some()
            || !body.group_by.is_empty()
            || !body.order_by.is_empty()
            || body.limit.is_some()
        {
            return Err(CompileError::Unsupported(
                "function bodies support only LET bindings and a SELECT head".into(),
            ));
        }
        let mut scope = Scope {
            names: vec![param.to_string()],
        };
        let mut lets = Vec::new();
        for binding in body.lets.iter().chain(body.post_lets.iter()) {
            let compiled = self.compile_expr(&binding.expr, &scope)?;
            lets.push((binding.name.clone(), compiled));
            scope.names.push(binding.name.clone());
        }
        let SelectHead::Items(items) = &body.select else {
            return Err(CompileError::Unsupported(
                "function bodies must merge the input record (SELECT x.*, ...)".into(),
            ));
        };
        let mut star = None;
        let mut fields = Vec::new();
        for (i, item) in items.iter().enumerate() {
            match item {
                SelectItem::Star { source } => {
                    if star.is_some() {
                        return Err(CompileError::Unsupported(
                            "multiple .* items in a function body".into(),
                        ));
                    }
                    if !scope.contains(source) {
                        return Err(CompileError::UnknownIdentifier(source.clone()));
                    }
                    star = Some(source.clone());
                }
                SelectItem::Expr { expr, alias } => {
                    let name = derive_name(expr, alias, i);
                    fields.push((name, self.compile_expr(expr, &scope)?));
                }
            }
        }
        let star = star.ok_or_else(|| {
            CompileError::Unsupported("function bodies must include an input.* item".into())
        })?;
        Ok(EnrichPlan {
            param: param.to_string(),
            lets,
            star,
            fields,
            subplans: Arc::new(self.subplans),
        })
    }

    /// Compiles a top-level query statement.
    pub fn compile_query(mut self, q: &QueryExpr) -> Result<QueryPlan, CompileError> {
        let mut scope = Scope::default();
        let mut pre_lets = Vec::new();
        for binding in &q.lets {
            if contains_subquery(&binding.expr) {
                return Err(CompileError::Unsupported(
                    "subquery in a statement-level LET".into(),
                ));
            }
            let compiled = self.compile_expr(&binding.expr, &scope)?;
            pre_lets.push((binding.name.clone(), compiled));
            scope.names.push(binding.name.clone());
        }
        let mut inner = q.clone();
        inner.lets = Vec::new();
        let main = self.compile_subquery(&inner, &scope)?;
        Ok(QueryPlan {
            pre_lets,
            main,
            subplans: Arc::new(self.subplans),
        })
    }

    fn compile_subquery(&mut self, q: &QueryExpr, outer: &Scope) -> Result<usize, CompileError> {
        if !q.lets.is_empty() {
            return Err(CompileError::Unsupported("LET before SELECT in a subquery".into()));
        }
        if q.from.len() > 2 {
            return Err(CompileError::Unsupported(
                "more than two datasources in one FROM clause".into(),
            ));
        }
        // resolve sources
        let mut sources = Vec::new();
        for FromItem { source, alias } in &q.from {
            let dataset = if self.storage.has_dataset(source) {
                DatasetRef::Stored(source.clone())
            } else if outer.contains(source) {
                DatasetRef::Bound(source.clone())
            } else {
                return Err(CompileError::UnknownDataset(source.clone()));
            };
            sources.push(CSource {
                dataset,
                alias: alias.clone(),
            });
        }
        let aliases: Vec<String> = sources.iter().map(|s| s.alias.clone()).collect();
        let alias_set: HashSet<String> = aliases.iter().cloned().collect();
        let row_let_names: Vec<String> = q.post_lets.iter().map(|l| l.name.clone()).collect();
        let row_scope = outer.with(&aliases).with(&row_let_names);

        let correlated = {
            let mut free = HashSet::new();
            collect_query_refs(q, &mut free);
            free.iter()
                .any(|n| outer.contains(n) && !alias_set.contains(n))
        };
        if correlated && !q.post_lets.is_empty() {
            return Err(CompileError::Unsupported(
                "LET inside a correlated subquery".into(),
            ));
        }
        let mut row_lets = Vec::new();
        {
            let mut scope = outer.with(&aliases);
            for binding in &q.post_lets {
                row_lets.push((binding.name.clone(), self.compile_expr(&binding.expr, &scope)?));
                scope.names.push(binding.name.clone());
            }
        }

        // split the WHERE clause into row-local and probe-correlated parts
        let mut local_set: HashSet<String> = alias_set.clone();
        local_set.extend(row_let_names.iter().cloned());
        let mut conjuncts = Vec::new();
        if let Some(w) = &q.where_clause {
            flatten_and(w, &mut conjuncts);
        }
        let mut inter_ast = Vec::new();
        let mut probe_ast = Vec::new();
        for c in conjuncts {
            let mut refs = HashSet::new();
            collect_expr_refs(c, &mut refs);
            let uses_outer = refs
                .iter()
                .any(|n| !local_set.contains(n) && outer.contains(n));
            if uses_outer {
                probe_ast.push(c);
            } else {
                inter_ast.push(c);
            }
        }

        // dataset-dataset equality pair for two-source joins
        let mut inter_hash = None;
        let mut inter_preds = Vec::new();
        for c in &inter_ast {
            if inter_hash.is_none() && sources.len() == 2 {
                if let Some(pair) = self.try_inter_equi(c, &aliases, &row_scope)? {
                    inter_hash = Some(pair);
                    continue;
                }
            }
            inter_preds.push(self.compile_expr(c, &row_scope)?);
        }

        // probe strategy extraction: equality pairs first, a spatial circle
        // probe otherwise; unconsumed conjuncts stay residual filters
        let mut probe_keys = Vec::new();
        let mut build_keys = Vec::new();
        let mut non_equi: Vec<&Expr> = Vec::new();
        for c in &probe_ast {
            if let Some((probe, build)) = split_equi(c, &local_set, outer) {
                probe_keys.push(self.compile_expr(probe, outer)?);
                build_keys.push(self.compile_expr(build, &row_scope)?);
            } else {
                non_equi.push(*c);
            }
        }
        let mut residual_ast: Vec<&Expr> = Vec::new();
        let probe = if !probe_keys.is_empty() {
            residual_ast = non_equi;
            ProbeStrategy::HashEq {
                probe_keys,
                build_keys,
            }
        } else {
            let mut chosen = None;
            for c in non_equi {
                if chosen.is_none() {
                    if let Some(found) = match_spatial_circle(c, &alias_set, outer) {
                        chosen = Some(found);
                        continue;
                    }
                }
                residual_ast.push(c);
            }
            match chosen {
                Some((alias, field, center, radius)) => {
                    let index = self.resolve_spatial_index(
                        &sources,
                        &alias,
                        &field,
                        inter_hash.is_some() || !inter_preds.is_empty() || sources.len() > 1,
                    );
                    ProbeStrategy::SpatialCircle {
                        alias,
                        field,
                        center: self.compile_expr(center, outer)?,
                        radius: self.compile_expr(radius, outer)?,
                        index,
                    }
                }
                None => ProbeStrategy::All,
            }
        };
        let mut residual = Vec::new();
        for c in residual_ast {
            residual.push(self.compile_expr(c, &row_scope)?);
        }

        // grouped vs plain select
        let grouped = !q.group_by.is_empty()
            || head_has_aggregate(&q.select)
            || q.order_by.iter().any(|o| has_agg_call(&o.expr));
        let (select, group, order) = if grouped {
            let mut keys = Vec::new();
            for (i, item) in q.group_by.iter().enumerate() {
                let GroupItem { expr, alias } = item;
                let name = alias
                    .clone()
                    .unwrap_or_else(|| derive_name(expr, &None, i));
                keys.push((name, expr.clone()));
            }
            let mut agg_ctx = AggContext {
                key_asts: keys.iter().map(|(_, e)| e.clone()).collect(),
                key_aliases: keys.iter().map(|(n, _)| n.clone()).collect(),
                aggs: Vec::new(),
                agg_asts: Vec::new(),
            };
            let select = match &q.select {
                SelectHead::Value(e) => {
                    SubSelect::Value(self.compile_grouped(e, &mut agg_ctx, &row_scope)?)
                }
                SelectHead::Items(items) => {
                    let mut out = Vec::new();
                    for (i, item) in items.iter().enumerate() {
                        match item {
                            SelectItem::Star { .. } => {
                                return Err(CompileError::BadAggregate(
                                    ".* in a grouped query".into(),
                                ))
                            }
                            SelectItem::Expr { expr, alias } => {
                                let name = derive_name(expr, alias, i);
                                out.push((
                                    name,
                                    self.compile_grouped(expr, &mut agg_ctx, &row_scope)?,
                                ));
                            }
                        }
                    }
                    SubSelect::Items(out)
                }
            };
            let order = self.compile_order(q, |me, e| me.compile_grouped(e, &mut agg_ctx, &row_scope))?;
            let compiled_keys = keys
                .iter()
                .map(|(n, e)| Ok((n.clone(), self.compile_expr(e, &row_scope)?)))
                .collect::<Result<Vec<_>, CompileError>>()?;
            (
                select,
                Some(GroupPlan {
                    keys: compiled_keys,
                    aggs: agg_ctx.aggs,
                }),
                order,
            )
        } else {
            let select = match &q.select {
                SelectHead::Value(e) => SubSelect::Value(self.compile_expr(e, &row_scope)?),
                SelectHead::Items(items) => {
                    let mut out = Vec::new();
                    for (i, item) in items.iter().enumerate() {
                        match item {
                            SelectItem::Star { source } => {
                                if !row_scope.contains(source) {
                                    return Err(CompileError::UnknownIdentifier(source.clone()));
                                }
                                return Err(CompileError::Unsupported(
                                    ".* inside a subquery select".into(),
                                ));
                            }
                            SelectItem::Expr { expr, alias } => {
                                let name = derive_name(expr, alias, i);
                                out.push((name, self.compile_expr(expr, &row_scope)?));
                            }
                        }
                    }
                    SubSelect::Items(out)
                }
            };
            let order = self.compile_order(q, |me, e| me.compile_expr(e, &row_scope))?;
            (select, None, order)
        };

        let limit = match &q.limit {
            None => None,
            Some(Expr::Literal(crate::data::Value::Int64(n))) if *n >= 0 => Some(*n as usize),
            Some(_) => {
                return Err(CompileError::Unsupported(
                    "LIMIT must be a non-negative integer literal".into(),
                ))
            }
        };

        self.subplans.push(SubPlan {
            sources,
            row_lets,
            inter_hash,
            inter_preds,
            probe,
            residual,
            select,
            group,
            order,
            limit,
            correlated,
        });
        Ok(self.subplans.len() - 1)
    }

    fn compile_order<F>(&mut self, q: &QueryExpr, mut compile: F) -> Result<Option<OrderPlan>, CompileError>
    where
        F: FnMut(&mut Self, &Expr) -> Result<CExpr, CompileError>,
    {
        match q.order_by.len() {
            0 => Ok(None),
            1 => {
                let item = &q.order_by[0];
                Ok(Some(OrderPlan {
                    key: compile(self, &item.expr)?,
                    desc: item.desc,
                }))
            }
            _ => Err(CompileError::Unsupported(
                "ORDER BY with multiple keys".into(),
            )),
        }
    }

    // dataset-dataset equality: one side per alias
    fn try_inter_equi(
        &mut self,
        c: &Expr,
        aliases: &[String],
        row_scope: &Scope,
    ) -> Result<Option<(CExpr, CExpr)>, CompileError> {
        let Expr::Binary(BinOp::Eq, lhs, rhs) = c else {
            return Ok(None);
        };
        let (mut l, mut r) = (HashSet::new(), HashSet::new());
        collect_expr_refs(lhs, &mut l);
        collect_expr_refs(rhs, &mut r);
        let only = |set: &HashSet<String>, alias: &str| {
            !set.is_empty() && set.iter().all(|n| n == alias)
        };
        let (a0, a1) = (&aliases[0], &aliases[1]);
        if only(&l, a0) && only(&r, a1) {
            Ok(Some((
                self.compile_expr(lhs, row_scope)?,
                self.compile_expr(rhs, row_scope)?,
            )))
        } else if only(&l, a1) && only(&r, a0) {
            Ok(Some((
                self.compile_expr(rhs, row_scope)?,
                self.compile_expr(lhs, row_scope)?,
            )))
        } else {
            Ok(None)
        }
    }

    fn resolve_spatial_index(
        &self,
        sources: &[CSource],
        alias: &str,
        field: &str,
        has_inter: bool,
    ) -> Option<String> {
        if !self.opts.use_indexes || sources.len() != 1 || has_inter {
            return None;
        }
        let source = sources.iter().find(|s| s.alias == alias)?;
        let DatasetRef::Stored(name) = &source.dataset else {
            return None;
        };
        let dataset = self.storage.dataset(name).ok()?;
        dataset.index_on(field, true)
    }

    fn compile_grouped(
        &mut self,
        expr: &Expr,
        agg: &mut AggContext,
        row_scope: &Scope,
    ) -> Result<CExpr, CompileError> {
        // whole-expression match against a group key
        for (i, key) in agg.key_asts.iter().enumerate() {
            if expr == key {
                return Ok(CExpr::GroupKey(i));
            }
        }
        if let Expr::Ident(name) = expr {
            if let Some(i) = agg.key_aliases.iter().position(|a| a == name) {
                return Ok(CExpr::GroupKey(i));
            }
        }
        match expr {
            Expr::Call {
                namespace: None,
                name,
                args,
            } if name.eq_ignore_ascii_case("count") || name.eq_ignore_ascii_case("sum") => {
                for (i, seen) in agg.agg_asts.iter().enumerate() {
                    if seen == expr {
                        return Ok(CExpr::Agg(i));
                    }
                }
                let plan = if name.eq_ignore_ascii_case("count") {
                    match args.as_slice() {
                        [Expr::Star] => AggPlan::CountStar,
                        [e] => AggPlan::CountExpr(self.compile_expr(e, row_scope)?),
                        _ => {
                            return Err(CompileError::BadAggregate(
                                "count takes one argument".into(),
                            ))
                        }
                    }
                } else {
                    match args.as_slice() {
                        [e] => AggPlan::Sum(self.compile_expr(e, row_scope)?),
                        _ => {
                            return Err(CompileError::BadAggregate("sum takes one argument".into()))
                        }
                    }
                };
                agg.aggs.push(plan);
                agg.agg_asts.push(expr.clone());
                Ok(CExpr::Agg(agg.aggs.len() - 1))
            }
            Expr::Binary(op, lhs, rhs) => Ok(CExpr::Bin(
                *op,
                Box::new(self.compile_grouped(lhs, agg, row_scope)?),
                Box::new(self.compile_grouped(rhs, agg, row_scope)?),
            )),
            Expr::Literal(v) => Ok(CExpr::Lit(v.clone())),
            other => Err(CompileError::BadAggregate(format!(
                "expression must be a group key or aggregate: {other:?}"
            ))),
        }
    }

    pub(crate) fn compile_expr(&mut self, expr: &Expr, scope: &Scope) -> Result<CExpr, CompileError> {
        Ok(match expr {
            Expr::Literal(v) => CExpr::Lit(v.clone()),
            Expr::ObjectLit(fields) => CExpr::Object(
                fields
                    .iter()
                    .map(|(n, e)| Ok((n.clone(), self.compile_expr(e, scope)?)))
                    .collect::<Result<Vec<_>, CompileError>>()?,
            ),
            Expr::ArrayLit(items) => CExpr::ArrayLit(
                items
                    .iter()
                    .map(|e| self.compile_expr(e, scope))
                    .collect::<Result<Vec<_>, CompileError>>()?,
            ),
            Expr::Ident(name) => {
                if !scope.contains(name) {
                    return Err(CompileError::UnknownIdentifier(name.clone()));
                }
                CExpr::Var(name.clone())
            }
            Expr::Path(base, field) => {
                CExpr::Path(Box::new(self.compile_expr(base, scope)?), field.clone())
            }
            Expr::Index(base, index) => CExpr::Index(
                Box::new(self.compile_expr(base, scope)?),
                Box::new(self.compile_expr(index, scope)?),
            ),
            Expr::Star => {
                return Err(CompileError::Unsupported(
                    "* outside an aggregate call".into(),
                ))
            }
            Expr::Call {
                namespace,
                name,
                args,
            } => {
                let compiled_args = args
                    .iter()
                    .map(|a| self.compile_expr(a, scope))
                    .collect::<Result<Vec<_>, CompileError>>()?;
                if let Some(ns) = namespace {
                    let key = format!("{ns}#{name}");
                    if !self.natives.contains(&key) {
                        return Err(CompileError::UnknownFunction(key));
                    }
                    CExpr::Native(key, compiled_args)
                } else if let Some(b) = Builtin::resolve(name) {
                    CExpr::Builtin(b, compiled_args)
                } else if name.eq_ignore_ascii_case("count") || name.eq_ignore_ascii_case("sum") {
                    return Err(CompileError::BadAggregate(format!(
                        "{name} outside a grouped query"
                    )));
                } else if self.natives.contains(name) {
                    CExpr::Native(name.clone(), compiled_args)
                } else if self.opts.allow_function_calls
                    && self.known_functions.map(|f| f(name)).unwrap_or(false)
                {
                    CExpr::FunctionCall(name.clone(), compiled_args)
                } else {
                    return Err(CompileError::UnknownFunction(name.clone()));
                }
            }
            Expr::Not(inner) => CExpr::Not(Box::new(self.compile_expr(inner, scope)?)),
            Expr::Neg(inner) => CExpr::Neg(Box::new(self.compile_expr(inner, scope)?)),
            Expr::Binary(op, lhs, rhs) => CExpr::Bin(
                *op,
                Box::new(self.compile_expr(lhs, scope)?),
                Box::new(self.compile_expr(rhs, scope)?),
            ),
            Expr::In {
                negated,
                item,
                collection,
            } => {
                let item = Box::new(self.compile_expr(item, scope)?);
                let coll = Box::new(self.compile_expr(collection, scope)?);
                if *negated {
                    CExpr::NotIn(item, coll)
                } else {
                    CExpr::In(item, coll)
                }
            }
            Expr::Exists(q) => CExpr::ExistsSub(self.compile_subquery(q, scope)?),
            Expr::Subquery(q) => CExpr::Sub(self.compile_subquery(q, scope)?),
            Expr::Case {
                operand,
                arms,
                otherwise,
            } => CExpr::Case {
                operand: operand
                    .as_ref()
                    .map(|e| self.compile_expr(e, scope).map(Box::new))
                    .transpose()?,
                arms: arms
                    .iter()
                    .map(|(w, t)| {
                        Ok((self.compile_expr(w, scope)?, self.compile_expr(t, scope)?))
                    })
                    .collect::<Result<Vec<_>, CompileError>>()?,
                otherwise: otherwise
                    .as_ref()
                    .map(|e| self.compile_expr(e, scope).map(Box::new))
                    .transpose()?,
            },
        })
    }
}

struct AggContext {
    key_asts: Vec<Expr>,
    key_aliases: Vec<String>,
    aggs: Vec<AggPlan>,
    agg_asts: Vec<Expr>,
}

fn derive_name(expr: &Expr, alias: &Option<String>, index: usize) -> String {
    if let Some(a) = alias {
        return a.clone();
    }
    match expr {
        Expr::Path(_, field) => field.clone(),
        Expr::Ident(name) => name.clone(),
        _ => format!("${}", index + 1),
    }
}

fn flatten_and<'a>(expr: &'a Expr, out: &mut Vec<&'a Expr>) {
    match expr {
        Expr::Binary(BinOp::And, lhs, rhs) => {
            flatten_and(lhs, out);
            flatten_and(rhs, out);
        }
        other => out.push(other),
    }
}

/// Equality conjunct with one side over scan rows and the other over the
/// outer environment; returns (probe side, build side).
fn split_equi<'a>(
    c: &'a Expr,
    local: &HashSet<String>,
    outer: &Scope,
) -> Option<(&'a Expr, &'a Expr)> {
    let Expr::Binary(BinOp::Eq, lhs, rhs) = c else {
        return None;
    };
    let (mut l, mut r) = (HashSet::new(), HashSet::new());
    collect_expr_refs(lhs, &mut l);
    collect_expr_refs(rhs, &mut r);
    let is_local = |set: &HashSet<String>| !set.is_empty() && set.iter().all(|n| local.contains(n));
    let is_outer = |set: &HashSet<String>| {
        set.iter().all(|n| !local.contains(n)) && set.iter().all(|n| outer.contains(n))
    };
    if is_local(&l) && is_outer(&r) {
        Some((rhs, lhs))
    } else if is_local(&r) && is_outer(&l) {
        Some((lhs, rhs))
    } else {
        None
    }
}

fn circle_of(e: &Expr) -> Option<(&Expr, &Expr)> {
    if let Expr::Call {
        namespace: None,
        name,
        args,
    } = e
    {
        if name == "create_circle" && args.len() == 2 {
            return Some((&args[0], &args[1]));
        }
    }
    None
}

/// Matches `spatial_intersect(point-ish, circle-ish)` in all the shapes the
/// workloads use; returns (alias, point field, center expr, radius expr).
fn match_spatial_circle<'a>(
    c: &'a Expr,
    aliases: &HashSet<String>,
    outer: &Scope,
) -> Option<(String, String, &'a Expr, &'a Expr)> {
    let Expr::Call {
        namespace: None,
        name,
        args,
    } = c
    else {
        return None;
    };
    if name != "spatial_intersect" || args.len() != 2 {
        return None;
    }
    let alias_point = |e: &Expr| -> Option<(String, String)> {
        if let Expr::Path(base, field) = e {
            if let Expr::Ident(alias) = base.as_ref() {
                if aliases.contains(alias) {
                    return Some((alias.clone(), field.clone()));
                }
            }
        }
        None
    };
    let outer_only = |e: &Expr| -> bool {
        let mut refs = HashSet::new();
        collect_expr_refs(e, &mut refs);
        refs.iter().all(|n| !aliases.contains(n) && outer.contains(n))
    };

    for (a, b) in [(&args[0], &args[1]), (&args[1], &args[0])] {
        // dataset point within a circle centered on the input
        if let (Some((alias, field)), Some((center, radius))) = (alias_point(a), circle_of(b)) {
            if outer_only(center) && outer_only(radius) {
                return Some((alias, field, center, radius));
            }
        }
        // input point within a circle centered on the dataset point
        if let Some((center_inner, radius)) = circle_of(b) {
            if let Some((alias, field)) = alias_point(center_inner) {
                if outer_only(a) && outer_only(radius) {
                    // distance(input, dataset point) <= radius, symmetric
                    return Some((alias, field, a, radius));
                }
            }
        }
    }
    None
}

fn head_has_aggregate(head: &SelectHead) -> bool {
    match head {
        SelectHead::Value(e) => has_agg_call(e),
        SelectHead::Items(items) => items.iter().any(|i| match i {
            SelectItem::Star { .. } => false,
            SelectItem::Expr { expr, .. } => has_agg_call(expr),
        }),
    }
}

fn has_agg_call(expr: &Expr) -> bool {
    match expr {
        Expr::Call {
            namespace: None,
            name,
            args,
        } => {
            name.eq_ignore_ascii_case("count")
                || name.eq_ignore_ascii_case("sum")
                || args.iter().any(has_agg_call)
        }
        Expr::Binary(_, l, r) => has_agg_call(l) || has_agg_call(r),
        Expr::Not(e) | Expr::Neg(e) => has_agg_call(e),
        Expr::Path(e, _) => has_agg_call(e),
        Expr::Index(b, i) => has_agg_call(b) || has_agg_call(i),
        Expr::Case {
            operand,
            arms,
            otherwise,
        } => {
            operand.as_deref().map(has_agg_call).unwrap_or(false)
                || arms.iter().any(|(w, t)| has_agg_call(w) || has_agg_call(t))
                || otherwise.as_deref().map(has_agg_call).unwrap_or(false)
        }
        _ => false,
    }
}

pub(crate) fn contains_subquery(expr: &Expr) -> bool {
    match expr {
        Expr::Subquery(_) | Expr::Exists(_) => true,
        Expr::In {
            item, collection, ..
        } => contains_subquery(item) || contains_subquery(collection),
        Expr::Binary(_, l, r) => contains_subquery(l) || contains_subquery(r),
        Expr::Not(e) | Expr::Neg(e) => contains_subquery(e),
        Expr::Path(e, _) => contains_subquery(e),
        Expr::Index(b, i) => contains_subquery(b) || contains_subquery(i),
        Expr::Call { args, .. } => args.iter().any(contains_subquery),
        Expr::ArrayLit(items) => items.iter().any(contains_subquery),
        Expr::ObjectLit(fields) => fields.iter().any(|(_, e)| contains_subquery(e)),
        Expr::Case {
            operand,
            arms,
            otherwise,
        } => {
            operand.as_deref().map(contains_subquery).unwrap_or(false)
                || arms
                    .iter()
                    .any(|(w, t)| contains_subquery(w) || contains_subquery(t))
                || otherwise.as_deref().map(contains_subquery).unwrap_or(false)
        }
        _ => false,
    }
}

/// Root identifiers referenced by an expression, descending into nested
/// subqueries (their own aliases are not masked out, which errs toward
/// treating expressions as correlated).
pub(crate) fn collect_expr_refs(expr: &Expr, out: &mut HashSet<String>) {
    match expr {
        Expr::Ident(name) => {
            out.insert(name.clone());
        }
        Expr::Path(base, _) => collect_expr_refs(base, out),
        Expr::Index(base, index) => {
            collect_expr_refs(base, out);
            collect_expr_refs(index, out);
        }
        Expr::Call { args, .. } => {
            for a in args {
                collect_expr_refs(a, out);
            }
        }
        Expr::Not(e) | Expr::Neg(e) => collect_expr_refs(e, out),
        Expr::Binary(_, l, r) => {
            collect_expr_refs(l, out);
            collect_expr_refs(r, out);
        }
        Expr::In {
            item, collection, ..
        } => {
            collect_expr_refs(item, out);
            collect_expr_refs(collection, out);
        }
        Expr::Exists(q) | Expr::Subquery(q) => collect_query_refs(q, out),
        Expr::Case {
            operand,
            arms,
            otherwise,
        } => {
            if let Some(op) = operand {
                collect_expr_refs(op, out);
            }
            for (w, t) in arms {
                collect_expr_refs(w, out);
                collect_expr_refs(t, out);
            }
            if let Some(e) = otherwise {
                collect_expr_refs(e, out);
            }
        }
        Expr::ArrayLit(items) => {
            for i in items {
                collect_expr_refs(i, out);
            }
        }
        Expr::ObjectLit(fields) => {
            for (_, e) in fields {
                collect_expr_refs(e, out);
            }
        }
        Expr::Literal(_) | Expr::Star => {}
    }
}

fn collect_query_refs(q: &QueryExpr, out: &mut HashSet<String>) {
    let mut inner = HashSet::new();
    for binding in q.lets.iter().chain(q.post_lets.iter()) {
        collect_expr_refs(&binding.expr, &mut inner);
    }
    match &q.select {
        SelectHead::Value(e) => collect_expr_refs(e, &mut inner),
        SelectHead::Items(items) => {
            for item in items {
                if let SelectItem::Expr { expr, .. } = item {
                    collect_expr_refs(expr, &mut inner);
                }
            }
        }
    }
    if let Some(w) = &q.where_clause {
        collect_expr_refs(w, &mut inner);
    }
    for g in &q.group_by {
        collect_expr_refs(&g.expr, &mut inner);
    }
    for o in &q.order_by {
        collect_expr_refs(&o.expr, &mut inner);
    }
    if let Some(l) = &q.limit {
        collect_expr_refs(l, &mut inner);
    }
    // names bound inside this query do not escape
    let bound: HashSet<String> = q
        .from
        .iter()
        .map(|f| f.alias.clone())
        .chain(q.post_lets.iter().map(|l| l.name.clone()))
        .chain(q.lets.iter().map(|l| l.name.clone()))
        .collect();
    for name in inner {
        if !bound.contains(&name) {
            out.insert(name);
        }
    }
}

/// Syntactic statefulness classification: a function is stateful when it
/// reads a datasource that is not locally bound, or contains join, group,
/// order, limit, exists, or in-subquery operators anywhere in its body.
pub fn classify_body(params: &[String], body: &QueryExpr) -> Statefulness {
    let mut bound: HashSet<String> = params.iter().cloned().collect();
    if query_is_stateful(body, &mut bound) {
        Statefulness::Stateful
    } else {
        Statefulness::Stateless
    }
}

fn query_is_stateful(q: &QueryExpr, bound: &mut HashSet<String>) -> bool {
    if !q.group_by.is_empty() || !q.order_by.is_empty() || q.limit.is_some() || q.from.len() > 1 {
        return true;
    }
    for f in &q.from {
        if !bound.contains(&f.source) {
            return true; // reads a dataset
        }
        bound.insert(f.alias.clone());
    }
    let mut exprs: Vec<&Expr> = Vec::new();
    for binding in q.lets.iter().chain(q.post_lets.iter()) {
        exprs.push(&binding.expr);
        bound.insert(binding.name.clone());
    }
    match &q.select {
        SelectHead::Value(e) => exprs.push(e),
        SelectHead::Items(items) => {
            for item in items {
                if let SelectItem::Expr { expr, .. } = item {
                    exprs.push(expr);
                }
            }
        }
    }
    if let Some(w) = &q.where_clause {
        exprs.push(w);
    }
    exprs.iter().any(|e| expr_is_stateful(e, bound))
}

fn expr_is_stateful(expr: &Expr, bound: &mut HashSet<String>) -> bool {
    match expr {
        Expr::Exists(_) => true,
        Expr::In { .. } => true,
        Expr::Subquery(q) => query_is_stateful(q, &mut bound.clone()),
        Expr::Binary(_, l, r) => expr_is_stateful(l, bound) || expr_is_stateful(r, bound),
        Expr::Not(e) | Expr::Neg(e) => expr_is_stateful(e, bound),
        Expr::Path(e, _) => expr_is_stateful(e, bound),
        Expr::Index(b, i) => expr_is_stateful(b, bound) || expr_is_stateful(i, bound),
        Expr::Call { args, .. } => args.iter().any(|a| expr_is_stateful(a, bound)),
        Expr::ArrayLit(items) => items.iter().any(|i| expr_is_stateful(i, bound)),
        Expr::ObjectLit(fields) => fields.iter().any(|(_, e)| expr_is_stateful(e, bound)),
        Expr::Case {
            operand,
            arms,
            otherwise,
        } => {
            operand
                .as_deref()
                .map(|e| expr_is_stateful(e, bound))
                .unwrap_or(false)
                || arms
                    .iter()
                    .any(|(w, t)| expr_is_stateful(w, bound) || expr_is_stateful(t, bound))
                || otherwise
                    .as_deref()
                    .map(|e| expr_is_stateful(e, bound))
                    .unwrap_or(false)
        }
        _ => false,
    }
}

pub(crate) use Scope as CompileScope;
