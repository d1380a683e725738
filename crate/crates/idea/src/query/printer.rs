//! Canonical pretty-printer. `parse(print(ast)) == ast` for every statement
//! the parser accepts, which the round-trip tests rely on.

use super::ast::*;
use crate::data::{print_json, Value};
use std::fmt::Write;

/// Renders a statement with its trailing ';'.
pub fn print_statement(stmt: &Statement) -> String {
    let mut out = String::new();
    write_statement(&stmt.kind, &mut out);
    out.push(';');
    out
}

/// Renders a whole script, one statement per line.
pub fn print_script(stmts: &[Statement]) -> String {
    stmts
        .iter()
        .map(print_statement)
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders a bare query (function body form).
pub fn print_query(q: &QueryExpr) -> String {
    let mut out = String::new();
    write_query(q, &mut out);
    out
}

fn write_statement(kind: &StatementKind, out: &mut String) {
    match kind {
        StatementKind::CreateType(t) => {
            let mode = if t.open { "OPEN" } else { "CLOSED" };
            let _ = write!(out, "CREATE TYPE {} AS {} {{ ", t.name, mode);
            for (i, (f, ty)) in t.fields.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "{f} : {ty}");
            }
            out.push_str(" }");
        }
        StatementKind::CreateDataset(d) => {
            let _ = write!(
                out,
                "CREATE DATASET {}({}) PRIMARY KEY {}",
                d.name,
                d.datatype,
                d.primary_key.join(", ")
            );
        }
        StatementKind::CreateIndex(i) => {
            let kind = match i.kind {
                IndexKindName::BTree => "BTREE",
                IndexKindName::RTree => "RTREE",
            };
            let _ = write!(
                out,
                "CREATE INDEX {} ON {}({}) TYPE {}",
                i.name, i.dataset, i.field, kind
            );
        }
        StatementKind::CreateFunction(f) => {
            let _ = write!(out, "CREATE FUNCTION {}({}) {{ ", f.name, f.params.join(", "));
            write_query(&f.body, out);
            out.push_str(" }");
        }
        StatementKind::CreateFeed(f) => {
            let _ = write!(out, "CREATE FEED {} WITH ", f.name);
            out.push_str(&print_json(&f.with));
        }
        StatementKind::ConnectFeed(c) => {
            let _ = write!(out, "CONNECT FEED {} TO DATASET {}", c.feed, c.dataset);
            if let Some(func) = &c.function {
                let _ = write!(out, " APPLY FUNCTION {func}");
            }
        }
        StatementKind::StartFeed(name) => {
            let _ = write!(out, "START FEED {name}");
        }
        StatementKind::StopFeed(name) => {
            let _ = write!(out, "STOP FEED {name}");
        }
        StatementKind::Insert(i) | StatementKind::Upsert(i) => {
            let verb = if matches!(kind, StatementKind::Upsert(_)) {
                "UPSERT"
            } else {
                "INSERT"
            };
            let _ = write!(out, "{verb} INTO {}(", i.dataset);
            match &i.source {
                InsertSource::Collection(expr) => write_expr(expr, 0, out),
                InsertSource::Query(q) => write_query(q, out),
            }
            out.push(')');
        }
        StatementKind::Query(q) => write_query(q, out),
    }
}

fn write_query(q: &QueryExpr, out: &mut String) {
    for binding in &q.lets {
        let _ = write!(out, "LET {} = ", binding.name);
        write_expr(&binding.expr, 0, out);
        out.push(' ');
    }
    out.push_str("SELECT ");
    match &q.select {
        SelectHead::Value(expr) => {
            out.push_str("VALUE ");
            write_expr(expr, 0, out);
        }
        SelectHead::Items(items) => {
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                match item {
                    SelectItem::Star { source } => {
                        let _ = write!(out, "{source}.*");
                    }
                    SelectItem::Expr { expr, alias } => {
                        write_expr(expr, 0, out);
                        if let Some(alias) = alias {
                            let _ = write!(out, " AS {alias}");
                        }
                    }
                }
            }
        }
    }
    if !q.from.is_empty() {
        out.push_str(" FROM ");
        for (i, item) in q.from.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{} {}", item.source, item.alias);
        }
    }
    for binding in &q.post_lets {
        let _ = write!(out, " LET {} = ", binding.name);
        write_expr(&binding.expr, 0, out);
    }
    if let Some(cond) = &q.where_clause {
        out.push_str(" WHERE ");
        write_expr(cond, 0, out);
    }
    if !q.group_by.is_empty() {
        out.push_str(" GROUP BY ");
        for (i, item) in q.group_by.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write_expr(&item.expr, 0, out);
            if let Some(alias) = &item.alias {
                let _ = write!(out, " AS {alias}");
            }
        }
    }
    if !q.order_by.is_empty() {
        out.push_str(" ORDER BY ");
        for (i, item) in q.order_by.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write_expr(&item.expr, 0, out);
            if item.desc {
                out.push_str(" DESC");
            }
        }
    }
    if let Some(limit) = &q.limit {
        out.push_str(" LIMIT ");
        write_expr(limit, 0, out);
    }
}

fn prec_of(expr: &Expr) -> u8 {
    match expr {
        Expr::Binary(op, _, _) => op.precedence(),
        Expr::In { .. } => 3,
        Expr::Not(_) => 2,
        Expr::Neg(_) => 6,
        _ => 7,
    }
}

fn write_expr(expr: &Expr, min_prec: u8, out: &mut String) {
    let prec = prec_of(expr);
    let parens = prec < min_prec;
    if parens {
        out.push('(');
    }
    match expr {
        Expr::Literal(v) => write_literal(v, out),
        Expr::ObjectLit(fields) => {
            out.push('{');
            for (i, (k, v)) in fields.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                quote_string(k, out);
                out.push_str(": ");
                write_expr(v, 0, out);
            }
            out.push('}');
        }
        Expr::ArrayLit(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(item, 0, out);
            }
            out.push(']');
        }
        Expr::Ident(name) => out.push_str(name),
        Expr::Path(base, field) => {
            write_expr(base, 7, out);
            let _ = write!(out, ".{field}");
        }
        Expr::Index(base, index) => {
            write_expr(base, 7, out);
            out.push('[');
            write_expr(index, 0, out);
            out.push(']');
        }
        Expr::Call {
            namespace,
            name,
            args,
        } => {
            if let Some(ns) = namespace {
                let _ = write!(out, "{ns}#");
            }
            let _ = write!(out, "{name}(");
            for (i, arg) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(arg, 0, out);
            }
            out.push(')');
        }
        Expr::Star => out.push('*'),
        Expr::Not(inner) => {
            out.push_str("NOT ");
            write_expr(inner, 3, out);
        }
        Expr::Neg(inner) => {
            out.push('-');
            write_expr(inner, 6, out);
        }
        Expr::Binary(op, lhs, rhs) => {
            write_expr(lhs, op.precedence(), out);
            let _ = write!(out, " {} ", op.symbol());
            write_expr(rhs, op.precedence() + 1, out);
        }
        Expr::In {
            negated,
            item,
            collection,
        } => {
            write_expr(item, 4, out);
            out.push_str(if *negated { " NOT IN " } else { " IN " });
            write_expr(collection, 4, out);
        }
        Expr::Exists(q) => {
            out.push_str("EXISTS(");
            write_query(q, out);
            out.push(')');
        }
        Expr::Subquery(q) => {
            out.push('(');
            write_query(q, out);
            out.push(')');
        }
        Expr::Case {
            operand,
            arms,
            otherwise,
        } => {
            out.push_str("CASE ");
            if let Some(op) = operand {
                write_expr(op, 0, out);
                out.push(' ');
            }
            for (cond, result) in arms {
                out.push_str("WHEN ");
                write_expr(cond, 0, out);
                out.push_str(" THEN ");
                write_expr(result, 0, out);
                out.push(' ');
            }
            if let Some(e) = otherwise {
                out.push_str("ELSE ");
                write_expr(e, 0, out);
                out.push(' ');
            }
            out.push_str("END");
        }
    }
    if parens {
        out.push(')');
    }
}

fn write_literal(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("NULL"),
        Value::Missing => out.push_str("MISSING"),
        Value::Boolean(true) => out.push_str("true"),
        Value::Boolean(false) => out.push_str("false"),
        Value::Int64(n) => {
            let _ = write!(out, "{n}");
        }
        Value::Float64(f) => {
            if f.fract() == 0.0 && f.is_finite() && f.abs() < 1e15 {
                let _ = write!(out, "{f:.1}");
            } else {
                let _ = write!(out, "{f}");
            }
        }
        Value::Text(s) => quote_string(s, out),
        // non-scalar literals do not occur in parsed ASTs
        other => {
            let _ = write!(out, "{other:?}");
        }
    }
}

fn quote_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}
