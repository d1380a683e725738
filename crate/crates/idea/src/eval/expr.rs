//! Compiled scalar expressions and their evaluation semantics.
//!
//! Absence propagates: predicates over Missing evaluate false, comparisons
//! with Missing/Null yield Missing, and collection construction drops
//! Missing elements. Present-but-wrongly-typed arguments raise a type
//! error, which callers turn into a skipped record.

use crate::data::{
    datetime_plus_duration, parse_datetime, parse_duration, Circle, Point, Record, Value,
};
use crate::query::BinOp;
use std::cmp::Ordering;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalFail {
    #[error("type error: {0}")]
    Type(String),
    #[error("unknown identifier {0:?}")]
    UnknownIdentifier(String),
    #[error("native function failed: {0}")]
    Native(String),
    #[error("evaluation failed: {0}")]
    Other(String),
}

/// A value bound in an evaluation environment. Records are shared, not
/// copied, since rows bind the same reference data many times.
#[derive(Debug, Clone)]
pub enum Binding {
    Val(Value),
    Rec(Arc<Record>),
}

impl Binding {
    pub fn as_value(&self) -> Value {
        match self {
            Binding::Val(v) => v.clone(),
            Binding::Rec(r) => Value::Object(r.as_ref().clone()),
        }
    }

    fn field(&self, name: &str) -> Value {
        match self {
            Binding::Rec(r) => r.field(name).clone(),
            Binding::Val(Value::Object(r)) => r.field(name).clone(),
            Binding::Val(_) => Value::Missing,
        }
    }
}

/// Chained name environment; inner scopes shadow outer ones.
#[derive(Debug, Default)]
pub struct Env<'a> {
    parent: Option<&'a Env<'a>>,
    names: Vec<(String, Binding)>,
}

impl<'a> Env<'a> {
    pub fn root() -> Env<'static> {
        Env {
            parent: None,
            names: Vec::new(),
        }
    }

    pub fn child(&'a self) -> Env<'a> {
        Env {
            parent: Some(self),
            names: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, binding: Binding) {
        self.names.push((name.into(), binding));
    }

    pub fn lookup(&self, name: &str) -> Option<&Binding> {
        for (n, b) in self.names.iter().rev() {
            if n == name {
                return Some(b);
            }
        }
        self.parent.and_then(|p| p.lookup(name))
    }
}

/// Scalar builtin functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Contains,
    EditDistance,
    SpatialIntersect,
    SpatialDistance,
    CreatePoint,
    CreateCircle,
    DurationLit,
    DateTimeLit,
    DateTimeCompare,
    DateTimePlusDuration,
}

impl Builtin {
    pub fn resolve(name: &str) -> Option<Builtin> {
        Some(match name {
            "contains" => Builtin::Contains,
            "edit_distance" => Builtin::EditDistance,
            "spatial_intersect" => Builtin::SpatialIntersect,
            "spatial_distance" => Builtin::SpatialDistance,
            "create_point" => Builtin::CreatePoint,
            "create_circle" => Builtin::CreateCircle,
            "duration" => Builtin::DurationLit,
            "datetime" => Builtin::DateTimeLit,
            "datetime_compare" => Builtin::DateTimeCompare,
            "datetime_plus_duration" => Builtin::DateTimePlusDuration,
            _ => return None,
        })
    }
}

/// Compiled expression tree. Subquery references are resolved through the
/// evaluator that owns the plan; grouped queries compile aggregate calls
/// and group keys into dedicated slots.
#[derive(Debug, Clone)]
pub enum CExpr {
    Lit(Value),
    Var(String),
    Path(Box<CExpr>, String),
    Index(Box<CExpr>, Box<CExpr>),
    Object(Vec<(String, CExpr)>),
    ArrayLit(Vec<CExpr>),
    Builtin(Builtin, Vec<CExpr>),
    Native(String, Vec<CExpr>),
    /// Call of a registered enrichment function; yields the collection of
    /// enriched records (top-level query contexts only).
    FunctionCall(String, Vec<CExpr>),
    Not(Box<CExpr>),
    Neg(Box<CExpr>),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
    In(Box<CExpr>, Box<CExpr>),
    NotIn(Box<CExpr>, Box<CExpr>),
    Case {
        operand: Option<Box<CExpr>>,
        arms: Vec<(CExpr, CExpr)>,
        otherwise: Option<Box<CExpr>>,
    },
    /// Subquery by plan id; evaluates to an Array.
    Sub(usize),
    /// EXISTS over a subquery plan; evaluates to a Boolean.
    ExistsSub(usize),
    /// Aggregate slot, valid in grouped select/order expressions.
    Agg(usize),
    /// Group key slot, valid in grouped select/order expressions.
    GroupKey(usize),
}

/// Group evaluation context: key values and aggregate results of one group.
pub struct GroupCtx<'a> {
    pub keys: &'a [Value],
    pub aggs: &'a [Value],
}

/// Hook through which expressions reach subqueries, natives, and registered
/// functions; implemented by the evaluator state.
pub trait ExprHost {
    fn subquery(&self, id: usize, env: &Env<'_>) -> Result<Value, EvalFail>;
    fn exists(&self, id: usize, env: &Env<'_>) -> Result<bool, EvalFail>;
    fn native(&self, name: &str, args: &[Value]) -> Result<Value, EvalFail>;
    fn function_call(&self, name: &str, args: &[Value]) -> Result<Value, EvalFail>;
}

pub fn truthy(v: &Value) -> bool {
    matches!(v, Value::Boolean(true))
}

/// SQL-style equality: Missing/Null on either side yields None, numeric
/// kinds compare promoted, mismatched kinds are unequal.
pub fn eq_values(a: &Value, b: &Value) -> Option<bool> {
    if a.is_absent() || b.is_absent() {
        return None;
    }
    match (a, b) {
        (Value::Int64(_) | Value::Float64(_), Value::Int64(_) | Value::Float64(_)) => {
            Some(a.as_f64() == b.as_f64())
        }
        _ => Some(a == b),
    }
}

/// SQL-style ordering comparison; None when either side is absent or the
/// kinds are not comparable.
pub fn cmp_values(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int64(x), Value::Int64(y)) => Some(x.cmp(y)),
        (Value::Int64(_) | Value::Float64(_), Value::Int64(_) | Value::Float64(_)) => {
            a.as_f64().unwrap().partial_cmp(&b.as_f64().unwrap())
        }
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Boolean(x), Value::Boolean(y)) => Some(x.cmp(y)),
        (Value::DateTime(x), Value::DateTime(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// Deterministic total order over values, used for sorting and tie-breaks:
/// absent values first, then by kind rank, then by value.
pub fn total_cmp_values(a: &Value, b: &Value) -> Ordering {
    fn rank(v: &Value) -> u8 {
        match v {
            Value::Missing => 0,
            Value::Null => 1,
            Value::Boolean(_) => 2,
            Value::Int64(_) | Value::Float64(_) => 3,
            Value::Text(_) => 4,
            Value::DateTime(_) => 5,
            Value::Duration(_) => 6,
            Value::Point(_) => 7,
            Value::Rectangle(_) => 8,
            Value::Circle(_) => 9,
            Value::Array(_) => 10,
            Value::Object(_) => 11,
        }
    }
    let (ra, rb) = (rank(a), rank(b));
    if ra != rb {
        return ra.cmp(&rb);
    }
    if let Some(ord) = cmp_values(a, b) {
        return ord;
    }
    match (a, b) {
        (Value::Array(x), Value::Array(y)) => {
            for (xe, ye) in x.iter().zip(y.iter()) {
                let ord = total_cmp_values(xe, ye);
                if ord != Ordering::Equal {
                    return ord;
                }
            }
            x.len().cmp(&y.len())
        }
        _ => format!("{a:?}").cmp(&format!("{b:?}")),
    }
}

pub fn eval_expr(
    expr: &CExpr,
    env: &Env<'_>,
    host: &dyn ExprHost,
    group: Option<&GroupCtx<'_>>,
) -> Result<Value, EvalFail> {
    match expr {
        CExpr::Lit(v) => Ok(v.clone()),
        CExpr::Var(name) => env
            .lookup(name)
            .map(|b| b.as_value())
            .ok_or_else(|| EvalFail::UnknownIdentifier(name.clone())),
        CExpr::Path(base, field) => {
            // avoid materializing the base record for the common alias.field case
            if let CExpr::Var(name) = base.as_ref() {
                if let Some(binding) = env.lookup(name) {
                    return Ok(binding.field(field));
                }
                return Err(EvalFail::UnknownIdentifier(name.clone()));
            }
            let base = eval_expr(base, env, host, group)?;
            Ok(match base {
                Value::Object(rec) => rec.field(field).clone(),
                _ => Value::Missing,
            })
        }
        CExpr::Index(base, index) => {
            let base = eval_expr(base, env, host, group)?;
            let index = eval_expr(index, env, host, group)?;
            Ok(match (base, index) {
                (Value::Array(items), Value::Int64(i)) => {
                    if i >= 0 && (i as usize) < items.len() {
                        items[i as usize].clone()
                    } else {
                        Value::Missing
                    }
                }
                _ => Value::Missing,
            })
        }
        CExpr::Object(fields) => {
            let mut rec = Record::with_capacity(fields.len());
            for (name, fe) in fields {
                rec.set(name.clone(), eval_expr(fe, env, host, group)?);
            }
            Ok(Value::Object(rec))
        }
        CExpr::ArrayLit(items) => {
            let mut out = Vec::with_capacity(items.len());
            for item in items {
                let v = eval_expr(item, env, host, group)?;
                if !v.is_missing() {
                    out.push(v);
                }
            }
            Ok(Value::Array(out))
        }
        CExpr::Builtin(b, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval_expr(a, env, host, group)?);
            }
            eval_builtin(*b, &vals)
        }
        CExpr::Native(name, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval_expr(a, env, host, group)?);
            }
            host.native(name, &vals)
        }
        CExpr::FunctionCall(name, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval_expr(a, env, host, group)?);
            }
            host.function_call(name, &vals)
        }
        CExpr::Not(inner) => {
            let v = eval_expr(inner, env, host, group)?;
            Ok(Value::Boolean(!truthy(&v)))
        }
        CExpr::Neg(inner) => match eval_expr(inner, env, host, group)? {
            Value::Int64(v) => Ok(Value::Int64(-v)),
            Value::Float64(v) => Ok(Value::Float64(-v)),
            Value::Missing | Value::Null => Ok(Value::Missing),
            other => Err(EvalFail::Type(format!("cannot negate {}", other.kind()))),
        },
        CExpr::Bin(op, lhs, rhs) => {
            let l = eval_expr(lhs, env, host, group)?;
            match op {
                BinOp::And => {
                    if !truthy(&l) {
                        return Ok(Value::Boolean(false));
                    }
                    let r = eval_expr(rhs, env, host, group)?;
                    Ok(Value::Boolean(truthy(&r)))
                }
                BinOp::Or => {
                    if truthy(&l) {
                        return Ok(Value::Boolean(true));
                    }
                    let r = eval_expr(rhs, env, host, group)?;
                    Ok(Value::Boolean(truthy(&r)))
                }
                BinOp::Eq | BinOp::Ne => {
                    let r = eval_expr(rhs, env, host, group)?;
                    Ok(match eq_values(&l, &r) {
                        None => Value::Missing,
                        Some(eq) => Value::Boolean(if *op == BinOp::Eq { eq } else { !eq }),
                    })
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                    let r = eval_expr(rhs, env, host, group)?;
                    Ok(match cmp_values(&l, &r) {
                        None => Value::Missing,
                        Some(ord) => Value::Boolean(match op {
                            BinOp::Lt => ord == Ordering::Less,
                            BinOp::Le => ord != Ordering::Greater,
                            BinOp::Gt => ord == Ordering::Greater,
                            BinOp::Ge => ord != Ordering::Less,
                            _ => unreachable!(),
                        }),
                    })
                }
                BinOp::Add | BinOp::Sub => {
                    let r = eval_expr(rhs, env, host, group)?;
                    arith(*op, &l, &r)
                }
            }
        }
        CExpr::In(item, collection) | CExpr::NotIn(item, collection) => {
            let v = eval_expr(item, env, host, group)?;
            let coll = eval_expr(collection, env, host, group)?;
            let negate = matches!(expr, CExpr::NotIn(_, _));
            match coll {
                Value::Array(items) => {
                    if v.is_absent() {
                        return Ok(Value::Missing);
                    }
                    let found = items.iter().any(|i| eq_values(&v, i) == Some(true));
                    Ok(Value::Boolean(found != negate))
                }
                Value::Missing | Value::Null => Ok(Value::Missing),
                other => Err(EvalFail::Type(format!(
                    "IN requires a collection, got {}",
                    other.kind()
                ))),
            }
        }
        CExpr::Case {
            operand,
            arms,
            otherwise,
        } => {
            let operand = match operand {
                Some(op) => Some(eval_expr(op, env, host, group)?),
                None => None,
            };
            for (when, then) in arms {
                let w = eval_expr(when, env, host, group)?;
                let hit = match &operand {
                    Some(op) => eq_values(op, &w) == Some(true),
                    None => truthy(&w),
                };
                if hit {
                    return eval_expr(then, env, host, group);
                }
            }
            match otherwise {
                Some(e) => eval_expr(e, env, host, group),
                None => Ok(Value::Null),
            }
        }
        CExpr::Sub(id) => host.subquery(*id, env),
        CExpr::ExistsSub(id) => Ok(Value::Boolean(host.exists(*id, env)?)),
        CExpr::Agg(i) => group
            .and_then(|g| g.aggs.get(*i).cloned())
            .ok_or_else(|| EvalFail::Other("aggregate outside group context".into())),
        CExpr::GroupKey(i) => group
            .and_then(|g| g.keys.get(*i).cloned())
            .ok_or_else(|| EvalFail::Other("group key outside group context".into())),
    }
}

fn arith(op: BinOp, l: &Value, r: &Value) -> Result<Value, EvalFail> {
    if l.is_absent() || r.is_absent() {
        return Ok(Value::Missing);
    }
    match (l, r) {
        (Value::Int64(a), Value::Int64(b)) => {
            let v = match op {
                BinOp::Add => a.checked_add(*b),
                BinOp::Sub => a.checked_sub(*b),
                _ => unreachable!(),
            };
            v.map(Value::Int64)
                .ok_or_else(|| EvalFail::Type("integer overflow".into()))
        }
        (Value::Int64(_) | Value::Float64(_), Value::Int64(_) | Value::Float64(_)) => {
            let (a, b) = (l.as_f64().unwrap(), r.as_f64().unwrap());
            Ok(Value::Float64(match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                _ => unreachable!(),
            }))
        }
        (Value::DateTime(dt), Value::Duration(d)) => {
            let d = if op == BinOp::Sub {
                crate::data::Duration::new(-d.months, -d.millis)
            } else {
                *d
            };
            datetime_plus_duration(*dt, d)
                .map(Value::DateTime)
                .map_err(|e| EvalFail::Type(e.to_string()))
        }
        (Value::Duration(d), Value::DateTime(dt)) if op == BinOp::Add => {
            datetime_plus_duration(*dt, *d)
                .map(Value::DateTime)
                .map_err(|e| EvalFail::Type(e.to_string()))
        }
        _ => Err(EvalFail::Type(format!(
            "cannot apply {} to {} and {}",
            op.symbol(),
            l.kind(),
            r.kind()
        ))),
    }
}

pub fn eval_builtin(b: Builtin, args: &[Value]) -> Result<Value, EvalFail> {
    if args.iter().any(Value::is_absent) && !matches!(b, Builtin::DateTimeCompare) {
        return Ok(Value::Missing);
    }
    match b {
        Builtin::Contains => match args {
            [Value::Text(hay), Value::Text(needle)] => {
                Ok(Value::Boolean(hay.contains(needle.as_str())))
            }
            _ => Err(EvalFail::Type("contains expects (string, string)".into())),
        },
        Builtin::EditDistance => match args {
            [Value::Text(a), Value::Text(b)] => Ok(Value::Int64(edit_distance(a, b) as i64)),
            _ => Err(EvalFail::Type("edit_distance expects (string, string)".into())),
        },
        Builtin::SpatialIntersect => match args {
            [a, b] => spatial_intersect(a, b).map(Value::Boolean),
            _ => Err(EvalFail::Type("spatial_intersect expects 2 arguments".into())),
        },
        Builtin::SpatialDistance => match args {
            [Value::Point(p), Value::Point(q)] => Ok(Value::Float64(p.distance(q))),
            _ => Err(EvalFail::Type("spatial_distance expects (point, point)".into())),
        },
        Builtin::CreatePoint => match args {
            [x, y] => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => {
                    Ok(Value::Point(Point::new(x, y)))
                }
                _ => Err(EvalFail::Type("create_point expects finite numbers".into())),
            },
            _ => Err(EvalFail::Type("create_point expects 2 arguments".into())),
        },
        Builtin::CreateCircle => match args {
            [Value::Point(center), r] => match r.as_f64() {
                Some(radius) if radius > 0.0 && radius.is_finite() => {
                    Ok(Value::Circle(Circle::new(*center, radius)))
                }
                _ => Err(EvalFail::Type("circle radius must be positive".into())),
            },
            _ => Err(EvalFail::Type("create_circle expects (point, number)".into())),
        },
        Builtin::DurationLit => match args {
            [Value::Text(s)] => parse_duration(s)
                .map(Value::Duration)
                .map_err(|e| EvalFail::Type(e.to_string())),
            _ => Err(EvalFail::Type("duration expects a period string".into())),
        },
        Builtin::DateTimeLit => match args {
            [Value::Text(s)] => parse_datetime(s)
                .map(Value::DateTime)
                .map_err(|e| EvalFail::Type(e.to_string())),
            _ => Err(EvalFail::Type("datetime expects a timestamp string".into())),
        },
        Builtin::DateTimeCompare => match args {
            [Value::DateTime(a), Value::DateTime(b)] => {
                Ok(Value::Int64(match a.epoch_millis.cmp(&b.epoch_millis) {
                    Ordering::Less => -1,
                    Ordering::Equal => 0,
                    Ordering::Greater => 1,
                }))
            }
            [a, b] if a.is_absent() || b.is_absent() => Ok(Value::Missing),
            _ => Err(EvalFail::Type("datetime_compare expects datetimes".into())),
        },
        Builtin::DateTimePlusDuration => match args {
            [Value::DateTime(dt), Value::Duration(d)] => datetime_plus_duration(*dt, *d)
                .map(Value::DateTime)
                .map_err(|e| EvalFail::Type(e.to_string())),
            _ => Err(EvalFail::Type(
                "datetime_plus_duration expects (datetime, duration)".into(),
            )),
        },
    }
}

fn spatial_intersect(a: &Value, b: &Value) -> Result<bool, EvalFail> {
    match (a, b) {
        (Value::Point(p), Value::Circle(c)) | (Value::Circle(c), Value::Point(p)) => {
            Ok(c.contains_point(p))
        }
        (Value::Point(p), Value::Rectangle(r)) | (Value::Rectangle(r), Value::Point(p)) => {
            Ok(r.contains_point(p))
        }
        (Value::Rectangle(r1), Value::Rectangle(r2)) => Ok(r1.intersects(r2)),
        _ => Err(EvalFail::Type(format!(
            "spatial_intersect cannot compare {} and {}",
            a.kind(),
            b.kind()
        ))),
    }
}

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let subst = prev[j] + usize::from(ca != cb);
            cur[j + 1] = subst.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    // exhaustive-recursion reference used only to pin expected values
    fn edit_distance_oracle(a: &[char], b: &[char]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let cost = usize::from(a[0] != b[0]);
        (edit_distance_oracle(&a[1..], &b[1..]) + cost)
            .min(edit_distance_oracle(&a[1..], b) + 1)
            .min(edit_distance_oracle(a, &b[1..]) + 1)
    }

    #[test]
    fn edit_distance_matches_reference() {
        let cases = [
            ("kitten", "sitting", 3usize),
            ("", "", 0),
            ("abc", "abc", 0),
            ("abc", "", 3),
            ("flaw", "lawn", 2),
            ("gumbo", "gambol", 2),
        ];
        for (a, b, want) in cases {
            assert_eq!(edit_distance(a, b), want, "{a} vs {b}");
            let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            assert_eq!(edit_distance_oracle(&ac, &bc), want);
        }
    }

    #[test]
    fn spatial_predicates_are_inclusive() {
        let c = Value::Circle(Circle::new(Point::new(0.0, 0.0), 1.5));
        assert_eq!(
            spatial_intersect(&Value::Point(Point::new(0.0, 0.0)), &c),
            Ok(true)
        );
        assert_eq!(
            spatial_intersect(&Value::Point(Point::new(1.5, 0.0)), &c),
            Ok(true)
        );
        assert_eq!(
            spatial_intersect(&Value::Point(Point::new(2.0, 0.0)), &c),
            Ok(false)
        );
    }

    #[test]
    fn comparisons_with_missing_yield_missing() {
        assert_eq!(eq_values(&Value::Missing, &Value::Int64(1)), None);
        assert_eq!(cmp_values(&Value::Null, &Value::Int64(1)), None);
        assert_eq!(eq_values(&Value::Int64(1), &Value::Float64(1.0)), Some(true));
        assert_eq!(
            eq_values(&Value::Text("a".into()), &Value::Int64(1)),
            Some(false)
        );
    }
}
