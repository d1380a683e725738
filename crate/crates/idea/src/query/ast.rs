//! Statement and query ASTs for the declarative surface: type/dataset/
//! index/function/feed DDL, insert/upsert DML, and the query subset used in
//! enrichment function bodies.

use crate::data::{Record, Value};

/// Source position, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

/// A parsed statement with the span where it started.
#[derive(Debug, Clone)]
pub struct Statement {
    pub kind: StatementKind,
    pub span: Span,
}

impl PartialEq for Statement {
    fn eq(&self, other: &Self) -> bool {
        // spans are diagnostics, not identity
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatementKind {
    CreateType(CreateType),
    CreateDataset(CreateDataset),
    CreateIndex(CreateIndex),
    CreateFunction(CreateFunction),
    CreateFeed(CreateFeed),
    ConnectFeed(ConnectFeed),
    StartFeed(String),
    StopFeed(String),
    Insert(InsertStmt),
    Upsert(InsertStmt),
    Query(QueryExpr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateType {
    pub name: String,
    pub open: bool,
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateDataset {
    pub name: String,
    pub datatype: String,
    pub primary_key: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKindName {
    BTree,
    RTree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateIndex {
    pub name: String,
    pub dataset: String,
    pub field: String,
    pub kind: IndexKindName,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateFunction {
    pub name: String,
    pub params: Vec<String>,
    pub body: QueryExpr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreateFeed {
    pub name: String,
    pub with: Record,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectFeed {
    pub feed: String,
    pub dataset: String,
    pub function: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsertStmt {
    pub dataset: String,
    pub source: InsertSource,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertSource {
    /// A literal value or collection, e.g. `([{...}, {...}])`.
    Collection(Expr),
    /// A query producing the records to store.
    Query(QueryExpr),
}

/// The query subset: optional leading LETs, a SELECT head, optional FROM
/// sources, trailing LETs, WHERE, GROUP BY, ORDER BY and LIMIT.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryExpr {
    pub lets: Vec<LetBinding>,
    pub select: SelectHead,
    pub from: Vec<FromItem>,
    pub post_lets: Vec<LetBinding>,
    pub where_clause: Option<Expr>,
    pub group_by: Vec<GroupItem>,
    pub order_by: Vec<OrderItem>,
    pub limit: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LetBinding {
    pub name: String,
    pub expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectHead {
    /// `SELECT VALUE expr` yields raw values.
    Value(Box<Expr>),
    /// `SELECT a.*, expr AS f, ...` yields records.
    Items(Vec<SelectItem>),
}

impl Default for SelectHead {
    fn default() -> Self {
        SelectHead::Items(Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    /// `alias.*` merges every field of the named binding.
    Star { source: String },
    Expr { expr: Expr, alias: Option<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FromItem {
    pub source: String,
    pub alias: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupItem {
    pub expr: Expr,
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderItem {
    pub expr: Expr,
    pub desc: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
}

impl BinOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            BinOp::Or => "OR",
            BinOp::And => "AND",
            BinOp::Eq => "=",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
        }
    }

    pub fn precedence(&self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 3,
            BinOp::Add | BinOp::Sub => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Scalar literal (string, number, boolean, null, missing).
    Literal(Value),
    ObjectLit(Vec<(String, Expr)>),
    ArrayLit(Vec<Expr>),
    Ident(String),
    /// `base.field`
    Path(Box<Expr>, String),
    /// `base[index]`
    Index(Box<Expr>, Box<Expr>),
    /// `name(args)` or `lib#name(args)`; `count(*)` carries [`Expr::Star`].
    Call {
        namespace: Option<String>,
        name: String,
        args: Vec<Expr>,
    },
    /// Only valid as a bare aggregate argument.
    Star,
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    In {
        negated: bool,
        item: Box<Expr>,
        collection: Box<Expr>,
    },
    Exists(Box<QueryExpr>),
    Subquery(Box<QueryExpr>),
    Case {
        operand: Option<Box<Expr>>,
        arms: Vec<(Expr, Expr)>,
        otherwise: Option<Box<Expr>>,
    },
}
