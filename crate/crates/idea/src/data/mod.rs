//! Open-record data model: nested document values with spatial and temporal
//! extensions, datatype validation, and primary-key extraction.
//!
//! Values are immutable after construction and cheap to clone at record
//! granularity, so they can be shared across worker threads freely.

mod binary;
mod json;
mod temporal;

pub use binary::{
    deserialize_record, extract_primary_key, serialize_record, stable_hash64, CorruptRecord,
    KeyBytes, KeyError,
};
pub use json::{parse_json, parse_json_value, print_json, print_json_value, ParseError};
pub use temporal::{
    datetime_plus_duration, format_datetime, parse_datetime, parse_duration, TemporalError,
};

use serde::{Deserialize, Serialize};
use std::fmt;

/// A planar point in degree coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Axis-aligned rectangle; `lower_left <= upper_right` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lower_left: Point,
    pub upper_right: Point,
}

impl Rect {
    pub fn new(lower_left: Point, upper_right: Point) -> Self {
        Rect {
            lower_left,
            upper_right,
        }
    }

    pub fn from_coords(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Rect::new(Point::new(x1, y1), Point::new(x2, y2))
    }

    /// Componentwise-inclusive point containment.
    pub fn contains_point(&self, p: &Point) -> bool {
        p.x >= self.lower_left.x
            && p.x <= self.upper_right.x
            && p.y >= self.lower_left.y
            && p.y <= self.upper_right.y
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.lower_left.x <= other.upper_right.x
            && other.lower_left.x <= self.upper_right.x
            && self.lower_left.y <= other.upper_right.y
            && other.lower_left.y <= self.upper_right.y
    }

    pub fn is_valid(&self) -> bool {
        self.lower_left.x.is_finite()
            && self.lower_left.y.is_finite()
            && self.upper_right.x.is_finite()
            && self.upper_right.y.is_finite()
            && self.lower_left.x <= self.upper_right.x
            && self.lower_left.y <= self.upper_right.y
    }
}

/// Circle in the same planar degree space; radius must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

impl Circle {
    pub fn new(center: Point, radius: f64) -> Self {
        Circle { center, radius }
    }

    /// Inclusive containment: distance to center <= radius.
    pub fn contains_point(&self, p: &Point) -> bool {
        self.center.distance(p) <= self.radius
    }

    /// Tight bounding box, used by spatial index probes before the exact test.
    pub fn bounding_box(&self) -> Rect {
        Rect::from_coords(
            self.center.x - self.radius,
            self.center.y - self.radius,
            self.center.x + self.radius,
            self.center.y + self.radius,
        )
    }
}

/// Instant as milliseconds since the Unix epoch (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DateTime {
    pub epoch_millis: i64,
}

impl DateTime {
    pub fn from_millis(epoch_millis: i64) -> Self {
        DateTime { epoch_millis }
    }
}

/// Calendar-aware duration: whole months plus a millisecond remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Duration {
    pub months: i32,
    pub millis: i64,
}

impl Duration {
    pub fn new(months: i32, millis: i64) -> Self {
        Duration { months, millis }
    }
}

/// Tagged value union covering the scalar, spatial, temporal, and nested
/// kinds a record field may hold.
///
/// `Missing` marks an absent field during evaluation; it is never stored in
/// a serialized record (absence encodes it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Null,
    Missing,
    Boolean(bool),
    Int64(i64),
    Float64(f64),
    Text(String),
    Point(Point),
    Rectangle(Rect),
    Circle(Circle),
    DateTime(DateTime),
    Duration(Duration),
    Array(Vec<Value>),
    Object(Record),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Null => ValueKind::Null,
            Value::Missing => ValueKind::Missing,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::Int64(_) => ValueKind::Int64,
            Value::Float64(_) => ValueKind::Float64,
            Value::Text(_) => ValueKind::Text,
            Value::Point(_) => ValueKind::Point,
            Value::Rectangle(_) => ValueKind::Rectangle,
            Value::Circle(_) => ValueKind::Circle,
            Value::DateTime(_) => ValueKind::DateTime,
            Value::Duration(_) => ValueKind::Duration,
            Value::Array(_) => ValueKind::Array,
            Value::Object(_) => ValueKind::Object,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Value::Missing | Value::Null)
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int64(v) => Some(*v),
            _ => None,
        }
    }

    /// Numeric view with Int64 -> Float64 widening.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int64(v) => Some(*v as f64),
            Value::Float64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(
            self,
            Value::Boolean(_)
                | Value::Int64(_)
                | Value::Float64(_)
                | Value::Text(_)
                | Value::DateTime(_)
        )
    }
}

/// Kind discriminant used by datatype validation and key encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    Null,
    Missing,
    Boolean,
    Int64,
    Float64,
    Text,
    Point,
    Rectangle,
    Circle,
    DateTime,
    Duration,
    Array,
    Object,
}

impl ValueKind {
    /// Resolves a DDL type name (`int64`, `string`, `point`, ...) to a kind.
    pub fn from_type_name(name: &str) -> Option<ValueKind> {
        match name.to_ascii_lowercase().as_str() {
            "boolean" | "bool" => Some(ValueKind::Boolean),
            "int" | "int8" | "int16" | "int32" | "int64" | "bigint" => Some(ValueKind::Int64),
            "float" | "double" | "float64" => Some(ValueKind::Float64),
            "string" | "text" => Some(ValueKind::Text),
            "point" => Some(ValueKind::Point),
            "rectangle" => Some(ValueKind::Rectangle),
            "circle" => Some(ValueKind::Circle),
            "datetime" => Some(ValueKind::DateTime),
            "duration" => Some(ValueKind::Duration),
            "array" => Some(ValueKind::Array),
            "object" => Some(ValueKind::Object),
            _ => None,
        }
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ValueKind::Null => "null",
            ValueKind::Missing => "missing",
            ValueKind::Boolean => "boolean",
            ValueKind::Int64 => "int64",
            ValueKind::Float64 => "double",
            ValueKind::Text => "string",
            ValueKind::Point => "point",
            ValueKind::Rectangle => "rectangle",
            ValueKind::Circle => "circle",
            ValueKind::DateTime => "datetime",
            ValueKind::Duration => "duration",
            ValueKind::Array => "array",
            ValueKind::Object => "object",
        };
        f.write_str(name)
    }
}

/// An open record: an ordered map of unique field names to values.
///
/// Field order is preserved through parsing, serialization, and enrichment,
/// which keeps textual round-trips and byte-level comparisons stable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Record {
    fields: Vec<(String, Value)>,
}

impl Record {
    pub fn new() -> Self {
        Record { fields: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Record {
            fields: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Field access with open-record semantics: absent fields read as Missing.
    pub fn field(&self, name: &str) -> &Value {
        self.get(name).unwrap_or(&Value::Missing)
    }

    /// Dotted path access; any miss along the way yields Missing.
    pub fn path(&self, segments: &[&str]) -> &Value {
        let mut cur = match segments.first() {
            Some(first) => self.field(first),
            None => return &Value::Missing,
        };
        for seg in &segments[1..] {
            cur = match cur {
                Value::Object(rec) => rec.field(seg),
                _ => return &Value::Missing,
            };
        }
        cur
    }

    /// Sets a field, replacing any existing value under the same name.
    /// Setting Missing removes the field, keeping absence as the encoding.
    pub fn set(&mut self, name: impl Into<String>, value: Value) {
        let name = name.into();
        if value.is_missing() {
            self.fields.retain(|(n, _)| *n != name);
            return;
        }
        match self.fields.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((name, value)),
        }
    }

    /// Appends a field that must not already exist.
    pub fn push_unique(&mut self, name: impl Into<String>, value: Value) -> Result<(), String> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(format!("duplicate field name {name:?}"));
        }
        if !value.is_missing() {
            self.fields.push((name, value));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.fields.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn into_fields(self) -> Vec<(String, Value)> {
        self.fields
    }
}

impl FromIterator<(String, Value)> for Record {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        let mut rec = Record::new();
        for (name, value) in iter {
            rec.set(name, value);
        }
        rec
    }
}

/// Builds a [`Record`] from field/value pairs.
#[macro_export]
macro_rules! record {
    ($($name:expr => $value:expr),* $(,)?) => {{
        let mut rec = $crate::data::Record::new();
        $(rec.set($name, $value);)*
        rec
    }};
}

/// Minimal, extensible description of a record shape: required fields with
/// declared kinds; open datatypes admit arbitrary extra fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datatype {
    pub name: String,
    pub required: Vec<(String, ValueKind)>,
    pub open: bool,
}

impl Datatype {
    pub fn new(name: impl Into<String>, required: Vec<(String, ValueKind)>, open: bool) -> Self {
        Datatype {
            name: name.into(),
            required,
            open,
        }
    }

    /// Validates a record, returning it unchanged when every required field
    /// is present with the declared kind. Every violation is reported.
    pub fn validate<'a>(&self, record: &'a Record) -> Result<&'a Record, ValidationError> {
        let mut issues = Vec::new();
        for (name, kind) in &self.required {
            match record.get(name) {
                None => issues.push(FieldIssue::MissingField { field: name.clone() }),
                Some(v) if v.kind() != *kind && !kind_compatible(*kind, v) => {
                    issues.push(FieldIssue::WrongKind {
                        field: name.clone(),
                        expected: *kind,
                        actual: v.kind(),
                    })
                }
                Some(_) => {}
            }
        }
        if !self.open {
            for (name, _) in record.iter() {
                if !self.required.iter().any(|(r, _)| r == name) {
                    issues.push(FieldIssue::UnexpectedField {
                        field: name.to_string(),
                    });
                }
            }
        }
        if issues.is_empty() {
            Ok(record)
        } else {
            Err(ValidationError {
                datatype: self.name.clone(),
                issues,
            })
        }
    }
}

// Int64 satisfies a declared double field; everything else is exact.
fn kind_compatible(declared: ValueKind, value: &Value) -> bool {
    declared == ValueKind::Float64 && matches!(value, Value::Int64(_))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("record does not conform to datatype {datatype}: {}", format_issues(issues))]
pub struct ValidationError {
    pub datatype: String,
    pub issues: Vec<FieldIssue>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldIssue {
    MissingField {
        field: String,
    },
    WrongKind {
        field: String,
        expected: ValueKind,
        actual: ValueKind,
    },
    UnexpectedField {
        field: String,
    },
}

fn format_issues(issues: &[FieldIssue]) -> String {
    issues
        .iter()
        .map(|i| match i {
            FieldIssue::MissingField { field } => format!("missing required field {field:?}"),
            FieldIssue::WrongKind {
                field,
                expected,
                actual,
            } => format!("field {field:?} expected {expected}, got {actual}"),
            FieldIssue::UnexpectedField { field } => format!("unexpected field {field:?}"),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tweet_type() -> Datatype {
        Datatype::new(
            "TweetType",
            vec![
                ("id".into(), ValueKind::Int64),
                ("text".into(), ValueKind::Text),
            ],
            true,
        )
    }

    #[test]
    fn open_datatype_admits_extra_fields() {
        let rec = record! {
            "id" => Value::Int64(0),
            "text" => Value::Text("x".into()),
            "country" => Value::Text("US".into()),
        };
        assert!(tweet_type().validate(&rec).is_ok());
    }

    #[test]
    fn missing_required_field_is_reported() {
        let rec = record! { "text" => Value::Text("x".into()) };
        let err = tweet_type().validate(&rec).unwrap_err();
        assert_eq!(
            err.issues,
            vec![FieldIssue::MissingField { field: "id".into() }]
        );
    }

    #[test]
    fn wrong_kind_is_reported() {
        let rec = record! {
            "id" => Value::Text("zero".into()),
            "text" => Value::Text("x".into()),
        };
        let err = tweet_type().validate(&rec).unwrap_err();
        assert_eq!(
            err.issues,
            vec![FieldIssue::WrongKind {
                field: "id".into(),
                expected: ValueKind::Int64,
                actual: ValueKind::Text,
            }]
        );
    }

    #[test]
    fn path_access_on_absent_field_yields_missing() {
        let rec = record! { "user" => Value::Object(record! { "name" => Value::Text("a".into()) }) };
        assert_eq!(rec.path(&["user", "name"]), &Value::Text("a".into()));
        assert_eq!(rec.path(&["user", "age"]), &Value::Missing);
        assert_eq!(rec.path(&["nope", "deep"]), &Value::Missing);
    }

    #[test]
    fn set_missing_removes_field() {
        let mut rec = record! { "a" => Value::Int64(1) };
        rec.set("a", Value::Missing);
        assert!(rec.get("a").is_none());
    }

    #[test]
    fn set_replaces_in_place_preserving_order() {
        let mut rec = record! { "a" => Value::Int64(1), "b" => Value::Int64(2) };
        rec.set("a", Value::Int64(9));
        let names: Vec<_> = rec.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(rec.field("a"), &Value::Int64(9));
    }
}
