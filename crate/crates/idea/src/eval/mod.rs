//! Enrichment function framework: native plugin functions and declarative
//! bodies compiled into probe plans, a stateless/stateful classifier, and
//! the per-record, per-batch, and stream evaluation models.

pub mod expr;
pub mod join;
pub mod native;
pub mod plan;
mod state;

pub use expr::{edit_distance, eval_builtin, total_cmp_values, Binding, Builtin, Env, EvalFail};
pub use join::{hash_join_with_spill, JoinError, Row};
pub use native::{NativeError, NativeFunction, NativeRegistry};
pub use plan::{classify_body, CompileError, CompileOptions, EnrichPlan, Statefulness};
pub use state::{
    evaluate_batch, evaluate_record, open_stream_evaluator, BatchOutput, EvalError,
    EvaluatorState, StreamEvaluator,
};

use crate::data::Value;
use crate::query::ast::QueryExpr;
use crate::storage::StorageEngine;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

pub const DEFAULT_JOIN_BUDGET: usize = 8 * 1024 * 1024;
const MIN_JOIN_BUDGET: usize = 64 * 1024 + 1; // must exceed one frame

/// How an attached function is evaluated on a feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalModel {
    /// State refreshed per record; sees every reference change.
    PerRecord,
    /// State refreshed per batch; changes are captured between batches.
    PerBatch,
    /// State built once at open; stale for stateful functions.
    Stream,
}

/// A registered function definition, before planning.
#[derive(Debug, Clone)]
pub struct FunctionDecl {
    pub name: String,
    pub params: Vec<String>,
    pub body: FunctionDeclBody,
}

#[derive(Debug, Clone)]
pub enum FunctionDeclBody {
    Query(QueryExpr),
    Native {
        factory: String,
        resource: Option<PathBuf>,
    },
}

/// Statefulness classification of a function definition: declarative bodies
/// that reference a dataset or contain join/group/order/limit/exists/in are
/// stateful; natives are stateful iff they declare a resource file.
pub fn classify(decl: &FunctionDecl) -> Statefulness {
    match &decl.body {
        FunctionDeclBody::Query(q) => classify_body(&decl.params, q),
        FunctionDeclBody::Native { resource, .. } => {
            if resource.is_some() {
                Statefulness::Stateful
            } else {
                Statefulness::Stateless
            }
        }
    }
}

#[derive(Debug)]
pub(crate) enum CompiledBody {
    Native { factory: String },
    Plan(plan::EnrichPlan),
}

/// A planned function ready for evaluation.
#[derive(Debug)]
pub struct CompiledFunction {
    pub name: String,
    pub arity: usize,
    pub statefulness: Statefulness,
    pub(crate) body: CompiledBody,
}

/// Plans a declared function against the current catalog state.
pub fn compile_function(
    decl: &FunctionDecl,
    storage: &StorageEngine,
    natives: &NativeRegistry,
    opts: CompileOptions,
) -> Result<Arc<CompiledFunction>, CompileError> {
    let statefulness = classify(decl);
    let body = match &decl.body {
        FunctionDeclBody::Native { factory, .. } => {
            if !natives.contains(factory) {
                return Err(CompileError::UnknownFunction(factory.clone()));
            }
            CompiledBody::Native {
                factory: factory.clone(),
            }
        }
        FunctionDeclBody::Query(q) => {
            if decl.params.len() != 1 {
                return Err(CompileError::Unsupported(format!(
                    "declarative functions take exactly one record parameter, {} takes {}",
                    decl.name,
                    decl.params.len()
                )));
            }
            let compiler = plan::Compiler::new(storage, natives, None, opts);
            CompiledBody::Plan(compiler.compile_function_body(&decl.params[0], q)?)
        }
    };
    Ok(Arc::new(CompiledFunction {
        name: decl.name.clone(),
        arity: decl.params.len(),
        statefulness,
        body,
    }))
}

/// Registry of declared functions.
#[derive(Debug, Default)]
pub struct FunctionCatalog {
    decls: RwLock<HashMap<String, Arc<FunctionDecl>>>,
}

impl FunctionCatalog {
    pub fn new() -> Arc<FunctionCatalog> {
        Arc::new(FunctionCatalog::default())
    }

    /// Registers or replaces a function definition.
    pub fn register(&self, decl: FunctionDecl) {
        self.decls
            .write()
            .unwrap()
            .insert(decl.name.clone(), Arc::new(decl));
    }

    pub fn get(&self, name: &str) -> Option<Arc<FunctionDecl>> {
        self.decls.read().unwrap().get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.decls.read().unwrap().contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.decls.read().unwrap().keys().cloned().collect();
        names.sort();
        names
    }
}

/// Everything an evaluator needs besides the function itself.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub storage: Arc<StorageEngine>,
    pub natives: Arc<NativeRegistry>,
    pub join_budget: usize,
    pub spill_dir: PathBuf,
    pub allow_stale_stream: bool,
    pub use_indexes: bool,
}

impl EvalContext {
    pub fn new(storage: Arc<StorageEngine>, natives: Arc<NativeRegistry>) -> EvalContext {
        EvalContext {
            storage,
            natives,
            join_budget: DEFAULT_JOIN_BUDGET,
            spill_dir: std::env::temp_dir().join("idea-spill"),
            allow_stale_stream: false,
            use_indexes: true,
        }
    }

    /// Budgets below one frame are clamped up.
    pub fn with_join_budget(mut self, budget: usize) -> EvalContext {
        self.join_budget = budget.max(MIN_JOIN_BUDGET);
        self
    }

    pub fn with_stale_stream(mut self, allow: bool) -> EvalContext {
        self.allow_stale_stream = allow;
        self
    }

    pub fn with_indexes(mut self, use_indexes: bool) -> EvalContext {
        self.use_indexes = use_indexes;
        self
    }

    pub(crate) fn compile_opts(&self) -> CompileOptions {
        CompileOptions {
            use_indexes: self.use_indexes,
            allow_function_calls: false,
        }
    }
}

/// Runs a top-level query statement: statement LETs bind once, then the
/// main body produces its rows. Registered enrichment functions may be
/// called; each call evaluates against fresh state, so it sees the latest
/// committed reference data.
pub fn run_query(
    q: &QueryExpr,
    ctx: &EvalContext,
    functions: &FunctionCatalog,
) -> Result<Vec<Value>, EvalError> {
    let known = |name: &str| functions.contains(name);
    let compiler = plan::Compiler::new(
        &ctx.storage,
        &ctx.natives,
        Some(&known),
        CompileOptions {
            use_indexes: ctx.use_indexes,
            allow_function_calls: true,
        },
    );
    let qplan = Arc::new(compiler.compile_query(q)?);
    let subplans = qplan.subplans.clone();

    // function-call hook: compile on first use, fresh state per call
    let compiled: std::cell::RefCell<HashMap<String, Arc<CompiledFunction>>> =
        std::cell::RefCell::new(HashMap::new());
    let call = |name: &str, args: &[Value]| -> Result<Value, EvalFail> {
        let f = {
            let mut cache = compiled.borrow_mut();
            match cache.get(name) {
                Some(f) => f.clone(),
                None => {
                    let decl = functions
                        .get(name)
                        .ok_or_else(|| EvalFail::Other(format!("unknown function {name:?}")))?;
                    let f = compile_function(&decl, &ctx.storage, &ctx.natives, ctx.compile_opts())
                        .map_err(|e| EvalFail::Other(e.to_string()))?;
                    cache.insert(name.to_string(), f.clone());
                    f
                }
            }
        };
        if args.len() != f.arity {
            return Err(EvalFail::Type(format!(
                "{name} expects {} arguments, got {}",
                f.arity,
                args.len()
            )));
        }
        let Some(Value::Object(record)) = args.first() else {
            return Err(EvalFail::Type(format!("{name} expects a record argument")));
        };
        let enriched = evaluate_record(&f, record, ctx).map_err(|e| match e {
            EvalError::Fail(f) => f,
            other => EvalFail::Other(other.to_string()),
        })?;
        // functions yield collections; callers take the first element
        Ok(Value::Array(vec![Value::Object(enriched)]))
    };

    let mut base = Env::root();
    let shell = state::EvaluatorState::build(
        Arc::new(Vec::new()),
        &base,
        ctx,
        state::BuildMode::Eager,
        &[],
        None,
    )?;
    for (name, expr) in &qplan.pre_lets {
        let host = state::Host {
            state: &shell,
            ctx,
            grace: None,
            record_index: 0,
            call: Some(&call),
        };
        let v = expr::eval_expr(expr, &base, &host, None)?;
        base.bind(name.clone(), Binding::Val(v));
    }
    let built = state::EvaluatorState::build(
        subplans,
        &base,
        ctx,
        state::BuildMode::Eager,
        &state::native_names_of_query(&qplan),
        Some(&call),
    )?;
    let host = state::Host {
        state: &built,
        ctx,
        grace: None,
        record_index: 0,
        call: Some(&call),
    };
    match host.eval_subplan(qplan.main, &base)? {
        Value::Array(items) => Ok(items),
        other => Ok(vec![other]),
    }
}

/// Evaluates a constant expression (literals, object/array construction,
/// builtins); used for INSERT payloads.
pub fn eval_const_expr(
    expr: &crate::query::ast::Expr,
    ctx: &EvalContext,
) -> Result<Value, EvalError> {
    let compiler = plan::Compiler::new(&ctx.storage, &ctx.natives, None, ctx.compile_opts());
    let compiled = {
        let mut c = compiler;
        let scope = plan::CompileScope::default();
        c.compile_expr(expr, &scope)?
    };
    let env = Env::root();
    let shell = state::EvaluatorState::build(
        Arc::new(Vec::new()),
        &env,
        ctx,
        state::BuildMode::Eager,
        &[],
        None,
    )?;
    let host = state::Host {
        state: &shell,
        ctx,
        grace: None,
        record_index: 0,
        call: None,
    };
    Ok(expr::eval_expr(&compiled, &env, &host, None)?)
}
