//! Hand-written recursive-descent parser. Statements are ';'-terminated;
//! `--` starts a line comment. Anything outside the supported subset is
//! rejected with an explicit error, never silently misparsed.

use super::ast::*;
use super::token::{tokenize, Tok, Token};
use super::QueryError;
use crate::data::{Record, Value};

const MAX_DEPTH: u32 = 64;

/// Words that terminate expressions and cannot serve as identifiers or
/// implicit aliases.
const RESERVED: &[&str] = &[
    "select", "from", "where", "group", "order", "by", "limit", "let", "case", "when", "then",
    "else", "end", "exists", "in", "and", "or", "not", "true", "false", "null", "missing", "asc",
    "desc", "as", "value",
];

/// Parses a script into a list of statements in source order.
pub fn parse_script(text: &str) -> Result<Vec<Statement>, QueryError> {
    let mut p = Parser::new(text)?;
    let mut out = Vec::new();
    while !p.at_eof() {
        let stmt = p.parse_statement()?;
        p.expect_semi()?;
        out.push(stmt);
        while p.eat_tok(&Tok::Semi) {}
    }
    Ok(out)
}

/// Parses a single statement; the trailing ';' is optional.
pub fn parse_statement(text: &str) -> Result<Statement, QueryError> {
    let mut p = Parser::new(text)?;
    let stmt = p.parse_statement()?;
    while p.eat_tok(&Tok::Semi) {}
    if !p.at_eof() {
        return Err(p.err_here("end of statement"));
    }
    Ok(stmt)
}

/// Parses a bare function body (the brace-enclosed query of CREATE FUNCTION,
/// without the braces).
pub fn parse_function_body(text: &str) -> Result<QueryExpr, QueryError> {
    let mut p = Parser::new(text)?;
    let q = p.parse_query(0)?;
    if !p.at_eof() {
        return Err(p.err_here("end of function body"));
    }
    Ok(q)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, QueryError> {
        Ok(Parser {
            tokens: tokenize(text)?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn peek_at(&self, off: usize) -> &Tok {
        &self.tokens[(self.pos + off).min(self.tokens.len() - 1)].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos.min(self.tokens.len() - 1)].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn at_eof(&self) -> bool {
        self.peek().tok == Tok::Eof
    }

    fn span(&self) -> Span {
        let t = self.peek();
        Span {
            line: t.line,
            col: t.col,
        }
    }

    fn err_here(&self, expected: impl Into<String>) -> QueryError {
        let t = self.peek();
        QueryError::syntax(t.line, t.col, expected)
    }

    fn unsupported(&self, construct: impl Into<String>) -> QueryError {
        let t = self.peek();
        QueryError::Unsupported {
            construct: construct.into(),
            line: t.line,
            col: t.col,
        }
    }

    /// True if the current token is the given case-insensitive keyword.
    fn at_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn kw_at(&self, off: usize, kw: &str) -> bool {
        matches!(self.peek_at(off), Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.err_here(format!("keyword {}", kw.to_uppercase())))
        }
    }

    fn eat_tok(&mut self, tok: &Tok) -> bool {
        if &self.peek().tok == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_tok(&mut self, tok: &Tok, what: &str) -> Result<(), QueryError> {
        if self.eat_tok(tok) {
            Ok(())
        } else {
            Err(self.err_here(what))
        }
    }

    fn expect_semi(&mut self) -> Result<(), QueryError> {
        self.expect_tok(&Tok::Semi, "';' after statement")
    }

    /// A usable identifier: not a reserved query word.
    fn expect_ident(&mut self, what: &str) -> Result<String, QueryError> {
        match &self.peek().tok {
            Tok::Ident(s) if !is_reserved(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.err_here(what)),
        }
    }

    fn parse_statement(&mut self) -> Result<Statement, QueryError> {
        let span = self.span();
        let kind = if self.at_kw("create") {
            self.bump();
            if self.at_kw("type") {
                self.bump();
                StatementKind::CreateType(self.parse_create_type()?)
            } else if self.at_kw("dataset") {
                self.bump();
                StatementKind::CreateDataset(self.parse_create_dataset()?)
            } else if self.at_kw("index") {
                self.bump();
                StatementKind::CreateIndex(self.parse_create_index()?)
            } else if self.at_kw("function") {
                self.bump();
                StatementKind::CreateFunction(self.parse_create_function()?)
            } else if self.at_kw("feed") {
                self.bump();
                StatementKind::CreateFeed(self.parse_create_feed()?)
            } else {
                return Err(self.err_here("TYPE, DATASET, INDEX, FUNCTION or FEED"));
            }
        } else if self.at_kw("connect") {
            self.bump();
            self.expect_kw("feed")?;
            let feed = self.expect_ident("a feed name")?;
            self.expect_kw("to")?;
            self.expect_kw("dataset")?;
            let dataset = self.expect_ident("a dataset name")?;
            let function = if self.eat_kw("apply") {
                self.expect_kw("function")?;
                Some(self.expect_ident("a function name")?)
            } else {
                None
            };
            StatementKind::ConnectFeed(ConnectFeed {
                feed,
                dataset,
                function,
            })
        } else if self.at_kw("start") {
            self.bump();
            self.expect_kw("feed")?;
            StatementKind::StartFeed(self.expect_ident("a feed name")?)
        } else if self.at_kw("stop") {
            self.bump();
            self.expect_kw("feed")?;
            StatementKind::StopFeed(self.expect_ident("a feed name")?)
        } else if self.at_kw("insert") || self.at_kw("upsert") {
            let upsert = self.at_kw("upsert");
            self.bump();
            self.expect_kw("into")?;
            let dataset = self.expect_ident("a dataset name")?;
            self.expect_tok(&Tok::LParen, "'('")?;
            let source = if self.at_kw("select") || self.at_kw("let") {
                InsertSource::Query(self.parse_query(0)?)
            } else {
                InsertSource::Collection(self.parse_expr(0)?)
            };
            self.expect_tok(&Tok::RParen, "')'")?;
            let stmt = InsertStmt { dataset, source };
            if upsert {
                StatementKind::Upsert(stmt)
            } else {
                StatementKind::Insert(stmt)
            }
        } else if self.at_kw("select") || self.at_kw("let") {
            StatementKind::Query(self.parse_query(0)?)
        } else if self.at_kw("drop") || self.at_kw("delete") || self.at_kw("update")
            || self.at_kw("use") || self.at_kw("set")
        {
            return Err(self.unsupported(format!(
                "{} statement",
                match &self.peek().tok {
                    Tok::Ident(s) => s.to_uppercase(),
                    _ => unreachable!(),
                }
            )));
        } else {
            return Err(self.err_here("a statement"));
        };
        Ok(Statement { kind, span })
    }

    fn parse_create_type(&mut self) -> Result<CreateType, QueryError> {
        let name = self.expect_ident("a type name")?;
        self.expect_kw("as")?;
        let open = if self.eat_kw("open") {
            true
        } else if self.eat_kw("closed") {
            false
        } else {
            true // AsterixDB-style default
        };
        self.expect_tok(&Tok::LBrace, "'{'")?;
        let mut fields = Vec::new();
        if !self.eat_tok(&Tok::RBrace) {
            loop {
                let fname = self.expect_ident("a field name")?;
                self.expect_tok(&Tok::Colon, "':'")?;
                let tname = self.expect_ident("a type name")?;
                fields.push((fname, tname));
                if self.eat_tok(&Tok::Comma) {
                    if self.eat_tok(&Tok::RBrace) {
                        break; // trailing comma
                    }
                    continue;
                }
                self.expect_tok(&Tok::RBrace, "'}' or ','")?;
                break;
            }
        }
        Ok(CreateType { name, open, fields })
    }

    fn parse_create_dataset(&mut self) -> Result<CreateDataset, QueryError> {
        let name = self.expect_ident("a dataset name")?;
        self.expect_tok(&Tok::LParen, "'('")?;
        let datatype = self.expect_ident("a type name")?;
        self.expect_tok(&Tok::RParen, "')'")?;
        self.expect_kw("primary")?;
        self.expect_kw("key")?;
        let mut primary_key = vec![self.expect_ident("a key field")?];
        while self.eat_tok(&Tok::Comma) {
            primary_key.push(self.expect_ident("a key field")?);
        }
        Ok(CreateDataset {
            name,
            datatype,
            primary_key,
        })
    }

    fn parse_create_index(&mut self) -> Result<CreateIndex, QueryError> {
        let name = self.expect_ident("an index name")?;
        self.expect_kw("on")?;
        let dataset = self.expect_ident("a dataset name")?;
        self.expect_tok(&Tok::LParen, "'('")?;
        let field = self.expect_ident("a field name")?;
        self.expect_tok(&Tok::RParen, "')'")?;
        self.expect_kw("type")?;
        let kind = if self.eat_kw("btree") {
            IndexKindName::BTree
        } else if self.eat_kw("rtree") {
            IndexKindName::RTree
        } else {
            return Err(self.err_here("BTREE or RTREE"));
        };
        Ok(CreateIndex {
            name,
            dataset,
            field,
            kind,
        })
    }

    fn parse_create_function(&mut self) -> Result<CreateFunction, QueryError> {
        let name = self.expect_ident("a function name")?;
        self.expect_tok(&Tok::LParen, "'('")?;
        let mut params = Vec::new();
        if !self.eat_tok(&Tok::RParen) {
            loop {
                params.push(self.expect_ident("a parameter name")?);
                if self.eat_tok(&Tok::Comma) {
                    continue;
                }
                self.expect_tok(&Tok::RParen, "')'")?;
                break;
            }
        }
        self.expect_tok(&Tok::LBrace, "'{'")?;
        let body = self.parse_query(0)?;
        self.expect_tok(&Tok::RBrace, "'}'")?;
        Ok(CreateFunction { name, params, body })
    }

    fn parse_create_feed(&mut self) -> Result<CreateFeed, QueryError> {
        let name = self.expect_ident("a feed name")?;
        self.expect_kw("with")?;
        let with = self.parse_literal_object(0)?;
        Ok(CreateFeed { name, with })
    }

    // Feed configuration blocks are literal JSON-style objects.
    fn parse_literal_object(&mut self, depth: u32) -> Result<Record, QueryError> {
        if depth > MAX_DEPTH {
            return Err(self.err_here("shallower nesting"));
        }
        self.expect_tok(&Tok::LBrace, "'{'")?;
        let mut rec = Record::new();
        if self.eat_tok(&Tok::RBrace) {
            return Ok(rec);
        }
        loop {
            let key = match self.bump().tok {
                Tok::Str(s) => s,
                Tok::Ident(s) => s,
                _ => return Err(self.err_here("a configuration key")),
            };
            self.expect_tok(&Tok::Colon, "':'")?;
            let value = self.parse_literal_value(depth + 1)?;
            rec.push_unique(key, value).map_err(|e| self.err_here(e))?;
            if self.eat_tok(&Tok::Comma) {
                continue;
            }
            self.expect_tok(&Tok::RBrace, "'}' or ','")?;
            return Ok(rec);
        }
    }

    fn parse_literal_value(&mut self, depth: u32) -> Result<Value, QueryError> {
        if depth > MAX_DEPTH {
            return Err(self.err_here("shallower nesting"));
        }
        if self.peek().tok == Tok::LBrace {
            return Ok(Value::Object(self.parse_literal_object(depth)?));
        }
        if self.eat_tok(&Tok::LBracket) {
            let mut items = Vec::new();
            if !self.eat_tok(&Tok::RBracket) {
                loop {
                    items.push(self.parse_literal_value(depth + 1)?);
                    if self.eat_tok(&Tok::Comma) {
                        continue;
                    }
                    self.expect_tok(&Tok::RBracket, "']' or ','")?;
                    break;
                }
            }
            return Ok(Value::Array(items));
        }
        let neg = self.eat_tok(&Tok::Minus);
        match self.bump().tok {
            Tok::Str(s) if !neg => Ok(Value::Text(s)),
            Tok::Int(v) => Ok(Value::Int64(if neg { -v } else { v })),
            Tok::Float(v) => Ok(Value::Float64(if neg { -v } else { v })),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("true") => Ok(Value::Boolean(true)),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("false") => Ok(Value::Boolean(false)),
            Tok::Ident(s) if !neg && s.eq_ignore_ascii_case("null") => Ok(Value::Null),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                Err(self.err_here("a literal value"))
            }
        }
    }

    fn parse_query(&mut self, depth: u32) -> Result<QueryExpr, QueryError> {
        if depth > MAX_DEPTH {
            return Err(self.err_here("shallower query nesting"));
        }
        let mut q = QueryExpr::default();
        while self.eat_kw("let") {
            q.lets.append(&mut self.parse_let_chain(depth)?);
        }
        self.expect_kw("select")?;
        if self.at_kw("value") {
            self.bump();
            q.select = SelectHead::Value(Box::new(self.parse_expr(depth)?));
        } else {
            let mut items = vec![self.parse_select_item(depth)?];
            while self.eat_tok(&Tok::Comma) {
                items.push(self.parse_select_item(depth)?);
            }
            q.select = SelectHead::Items(items);
        }
        if self.eat_kw("from") {
            loop {
                q.from.push(self.parse_from_item()?);
                if !self.eat_tok(&Tok::Comma) {
                    break;
                }
            }
        }
        while self.eat_kw("let") {
            q.post_lets.append(&mut self.parse_let_chain(depth)?);
        }
        if self.eat_kw("where") {
            q.where_clause = Some(self.parse_expr(depth)?);
        }
        if self.at_kw("group") {
            self.bump();
            self.expect_kw("by")?;
            loop {
                let expr = self.parse_expr(depth)?;
                let alias = self.parse_optional_alias()?;
                q.group_by.push(GroupItem { expr, alias });
                if !self.eat_tok(&Tok::Comma) {
                    break;
                }
            }
        }
        if self.at_kw("order") {
            self.bump();
            self.expect_kw("by")?;
            loop {
                let expr = self.parse_expr(depth)?;
                let desc = if self.eat_kw("desc") {
                    true
                } else {
                    self.eat_kw("asc");
                    false
                };
                q.order_by.push(OrderItem { expr, desc });
                if !self.eat_tok(&Tok::Comma) {
                    break;
                }
            }
        }
        if self.eat_kw("limit") {
            q.limit = Some(self.parse_expr(depth)?);
        }
        Ok(q)
    }

    // One LET keyword may introduce several comma-separated bindings.
    fn parse_let_chain(&mut self, depth: u32) -> Result<Vec<LetBinding>, QueryError> {
        let mut out = Vec::new();
        loop {
            let name = self.expect_ident("a binding name")?;
            self.expect_tok(&Tok::Eq, "'='")?;
            let expr = self.parse_expr(depth)?;
            out.push(LetBinding { name, expr });
            if !self.eat_tok(&Tok::Comma) {
                return Ok(out);
            }
        }
    }

    fn parse_from_item(&mut self) -> Result<FromItem, QueryError> {
        if self.at_kw("feed") {
            return Err(self.unsupported("FEED datasource"));
        }
        let source = self.expect_ident("a datasource name")?;
        let alias = match &self.peek().tok {
            Tok::Ident(s) if !is_reserved(s) => {
                let s = s.clone();
                self.bump();
                s
            }
            _ => source.clone(),
        };
        Ok(FromItem { source, alias })
    }

    fn parse_select_item(&mut self, depth: u32) -> Result<SelectItem, QueryError> {
        // `alias.*`
        if let Tok::Ident(name) = &self.peek().tok {
            if !is_reserved(name)
                && *self.peek_at(1) == Tok::Dot
                && *self.peek_at(2) == Tok::Star
            {
                let source = name.clone();
                self.bump();
                self.bump();
                self.bump();
                return Ok(SelectItem::Star { source });
            }
        }
        let expr = self.parse_expr(depth)?;
        let alias = self.parse_optional_alias()?;
        Ok(SelectItem::Expr { expr, alias })
    }

    fn parse_optional_alias(&mut self) -> Result<Option<String>, QueryError> {
        if self.eat_kw("as") {
            return Ok(Some(self.expect_ident("an alias")?));
        }
        match &self.peek().tok {
            Tok::Ident(s) if !is_reserved(s) => {
                let s = s.clone();
                self.bump();
                Ok(Some(s))
            }
            _ => Ok(None),
        }
    }

    fn parse_expr(&mut self, depth: u32) -> Result<Expr, QueryError> {
        if depth > MAX_DEPTH {
            return Err(self.err_here("shallower expression nesting"));
        }
        self.parse_or(depth)
    }

    fn parse_or(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let mut lhs = self.parse_and(depth)?;
        while self.eat_kw("or") {
            let rhs = self.parse_and(depth)?;
            lhs = Expr::Binary(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let mut lhs = self.parse_not(depth)?;
        while self.eat_kw("and") {
            let rhs = self.parse_not(depth)?;
            lhs = Expr::Binary(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_not(&mut self, depth: u32) -> Result<Expr, QueryError> {
        if self.at_kw("not") && !self.kw_at(1, "in") {
            self.bump();
            let inner = self.parse_not(depth)?;
            return Ok(Expr::Not(Box::new(inner)));
        }
        self.parse_comparison(depth)
    }

    fn parse_comparison(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let lhs = self.parse_additive(depth)?;
        let op = match &self.peek().tok {
            Tok::Eq => Some(BinOp::Eq),
            Tok::Ne => Some(BinOp::Ne),
            Tok::Lt => Some(BinOp::Lt),
            Tok::Le => Some(BinOp::Le),
            Tok::Gt => Some(BinOp::Gt),
            Tok::Ge => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.bump();
            let rhs = self.parse_additive(depth)?;
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        let negated = if self.at_kw("not") && self.kw_at(1, "in") {
            self.bump();
            true
        } else {
            false
        };
        if self.eat_kw("in") {
            let collection = self.parse_additive(depth)?;
            return Ok(Expr::In {
                negated,
                item: Box::new(lhs),
                collection: Box::new(collection),
            });
        } else if negated {
            return Err(self.err_here("IN after NOT"));
        }
        Ok(lhs)
    }

    fn parse_additive(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let mut lhs = self.parse_unary(depth)?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.parse_unary(depth)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self, depth: u32) -> Result<Expr, QueryError> {
        if self.eat_tok(&Tok::Minus) {
            let inner = self.parse_unary(depth)?;
            return Ok(match inner {
                Expr::Literal(Value::Int64(v)) => Expr::Literal(Value::Int64(-v)),
                Expr::Literal(Value::Float64(v)) => Expr::Literal(Value::Float64(-v)),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.parse_postfix(depth)
    }

    fn parse_postfix(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let mut expr = self.parse_primary(depth)?;
        loop {
            if self.eat_tok(&Tok::Dot) {
                let field = self.expect_ident("a field name")?;
                expr = Expr::Path(Box::new(expr), field);
            } else if self.eat_tok(&Tok::LBracket) {
                let index = self.parse_expr(depth + 1)?;
                self.expect_tok(&Tok::RBracket, "']'")?;
                expr = Expr::Index(Box::new(expr), Box::new(index));
            } else {
                return Ok(expr);
            }
        }
    }

    fn parse_primary(&mut self, depth: u32) -> Result<Expr, QueryError> {
        match self.peek().tok.clone() {
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Literal(Value::Text(s)))
            }
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Literal(Value::Int64(v)))
            }
            Tok::Float(v) => {
                self.bump();
                Ok(Expr::Literal(Value::Float64(v)))
            }
            Tok::LParen => {
                self.bump();
                let expr = if self.at_kw("select") || self.at_kw("let") {
                    Expr::Subquery(Box::new(self.parse_query(depth + 1)?))
                } else {
                    self.parse_expr(depth + 1)?
                };
                self.expect_tok(&Tok::RParen, "')'")?;
                Ok(expr)
            }
            Tok::LBracket => {
                self.bump();
                let mut items = Vec::new();
                if !self.eat_tok(&Tok::RBracket) {
                    loop {
                        items.push(self.parse_expr(depth + 1)?);
                        if self.eat_tok(&Tok::Comma) {
                            continue;
                        }
                        self.expect_tok(&Tok::RBracket, "']' or ','")?;
                        break;
                    }
                }
                Ok(Expr::ArrayLit(items))
            }
            Tok::LBrace => {
                self.bump();
                let mut fields = Vec::new();
                if !self.eat_tok(&Tok::RBrace) {
                    loop {
                        let key = match self.bump().tok {
                            Tok::Str(s) => s,
                            Tok::Ident(s) if !is_reserved(&s) => s,
                            _ => return Err(self.err_here("a field name")),
                        };
                        self.expect_tok(&Tok::Colon, "':'")?;
                        let value = self.parse_expr(depth + 1)?;
                        fields.push((key, value));
                        if self.eat_tok(&Tok::Comma) {
                            continue;
                        }
                        self.expect_tok(&Tok::RBrace, "'}' or ','")?;
                        break;
                    }
                }
                Ok(Expr::ObjectLit(fields))
            }
            Tok::Ident(word) => {
                let lower = word.to_ascii_lowercase();
                match lower.as_str() {
                    "true" => {
                        self.bump();
                        Ok(Expr::Literal(Value::Boolean(true)))
                    }
                    "false" => {
                        self.bump();
                        Ok(Expr::Literal(Value::Boolean(false)))
                    }
                    "null" => {
                        self.bump();
                        Ok(Expr::Literal(Value::Null))
                    }
                    "missing" => {
                        self.bump();
                        Ok(Expr::Literal(Value::Missing))
                    }
                    "exists" => {
                        self.bump();
                        self.expect_tok(&Tok::LParen, "'('")?;
                        if !(self.at_kw("select") || self.at_kw("let")) {
                            return Err(self.err_here("a subquery after EXISTS"));
                        }
                        let q = self.parse_query(depth + 1)?;
                        self.expect_tok(&Tok::RParen, "')'")?;
                        Ok(Expr::Exists(Box::new(q)))
                    }
                    "case" => {
                        self.bump();
                        self.parse_case(depth)
                    }
                    "select" | "let" => Err(self.err_here("an expression, found a bare subquery")),
                    _ if is_reserved(&word) => Err(self.err_here("an expression")),
                    _ => {
                        self.bump();
                        // lib#name(args) or name(args) or a plain reference
                        if self.eat_tok(&Tok::Hash) {
                            let name = self.expect_ident("a function name")?;
                            let args = self.parse_call_args(depth)?;
                            Ok(Expr::Call {
                                namespace: Some(word),
                                name,
                                args,
                            })
                        } else if self.peek().tok == Tok::LParen {
                            let args = self.parse_call_args(depth)?;
                            Ok(Expr::Call {
                                namespace: None,
                                name: word,
                                args,
                            })
                        } else {
                            Ok(Expr::Ident(word))
                        }
                    }
                }
            }
            _ => Err(self.err_here("an expression")),
        }
    }

    fn parse_call_args(&mut self, depth: u32) -> Result<Vec<Expr>, QueryError> {
        self.expect_tok(&Tok::LParen, "'('")?;
        let mut args = Vec::new();
        if self.eat_tok(&Tok::RParen) {
            return Ok(args);
        }
        loop {
            if self.peek().tok == Tok::Star {
                self.bump();
                args.push(Expr::Star);
            } else {
                args.push(self.parse_expr(depth + 1)?);
            }
            if self.eat_tok(&Tok::Comma) {
                continue;
            }
            self.expect_tok(&Tok::RParen, "')' or ','")?;
            return Ok(args);
        }
    }

    fn parse_case(&mut self, depth: u32) -> Result<Expr, QueryError> {
        let operand = if self.at_kw("when") {
            None
        } else {
            Some(Box::new(self.parse_expr(depth + 1)?))
        };
        let mut arms = Vec::new();
        while self.eat_kw("when") {
            let cond = self.parse_expr(depth + 1)?;
            self.expect_kw("then")?;
            let result = self.parse_expr(depth + 1)?;
            arms.push((cond, result));
        }
        if arms.is_empty() {
            return Err(self.err_here("WHEN"));
        }
        let otherwise = if self.eat_kw("else") {
            Some(Box::new(self.parse_expr(depth + 1)?))
        } else {
            None
        };
        self.expect_kw("end")?;
        Ok(Expr::Case {
            operand,
            arms,
            otherwise,
        })
    }
}

fn is_reserved(word: &str) -> bool {
    let lower = word.to_ascii_lowercase();
    RESERVED.contains(&lower.as_str())
}
