//! JSON text format for records, extended with spatial and temporal wrapper
//! objects: `{"$point":[x,y]}`, `{"$rectangle":[x1,y1,x2,y2]}`,
//! `{"$circle":[x,y,r]}`, `{"$datetime":"..."}`, `{"$duration":"P2M"}`.
//!
//! Numbers without a fraction or exponent parse as Int64, all others as
//! Float64. Field order is preserved, so `parse_json(print_json(r)) == r`
//! for any record the printer accepts.

use super::temporal::{format_datetime, format_duration, parse_datetime, parse_duration};
use super::{Circle, Point, Record, Rect, Value};

const MAX_DEPTH: usize = 128;

/// Error with the byte offset and 1-based line/column of the failure.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("json parse error at line {line}, column {col}: {reason}")]
pub struct ParseError {
    pub position: usize,
    pub line: u32,
    pub col: u32,
    pub reason: String,
}

/// Parses one JSON object into a [`Record`].
pub fn parse_json(text: &str) -> Result<Record, ParseError> {
    let mut p = JsonParser::new(text);
    p.skip_ws();
    let value = p.parse_value(0)?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("trailing characters after value"));
    }
    match value {
        Value::Object(rec) => Ok(rec),
        other => Err(ParseError {
            position: 0,
            line: 1,
            col: 1,
            reason: format!("expected a top-level object, got {}", other.kind()),
        }),
    }
}

/// Parses any JSON value (used by feed configuration blocks).
pub fn parse_json_value(text: &str) -> Result<Value, ParseError> {
    let mut p = JsonParser::new(text);
    p.skip_ws();
    let value = p.parse_value(0)?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.error("trailing characters after value"));
    }
    Ok(value)
}

struct JsonParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> JsonParser<'a> {
    fn new(text: &'a str) -> Self {
        JsonParser {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\n' | b'\r')) {
            self.pos += 1;
        }
    }

    fn error(&self, reason: impl Into<String>) -> ParseError {
        let (mut line, mut col) = (1u32, 1u32);
        for &b in &self.bytes[..self.pos.min(self.bytes.len())] {
            if b == b'\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
        }
        ParseError {
            position: self.pos,
            line,
            col,
            reason: reason.into(),
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), ParseError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {:?}", b as char)))
        }
    }

    fn parse_value(&mut self, depth: usize) -> Result<Value, ParseError> {
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        self.skip_ws();
        match self.peek() {
            Some(b'{') => self.parse_object(depth),
            Some(b'[') => {
                self.pos += 1;
                let mut items = Vec::new();
                self.skip_ws();
                if self.peek() == Some(b']') {
                    self.pos += 1;
                    return Ok(Value::Array(items));
                }
                loop {
                    items.push(self.parse_value(depth + 1)?);
                    self.skip_ws();
                    match self.bump() {
                        Some(b',') => continue,
                        Some(b']') => break,
                        _ => {
                            self.pos = self.pos.saturating_sub(1);
                            return Err(self.error("expected ',' or ']' in array"));
                        }
                    }
                }
                Ok(Value::Array(items))
            }
            Some(b'"') => Ok(Value::Text(self.parse_string()?)),
            Some(b't') => self.parse_keyword("true", Value::Boolean(true)),
            Some(b'f') => self.parse_keyword("false", Value::Boolean(false)),
            Some(b'n') => self.parse_keyword("null", Value::Null),
            Some(c) if c == b'-' || c.is_ascii_digit() => self.parse_number(),
            Some(c) => Err(self.error(format!("unexpected character {:?}", c as char))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn parse_keyword(&mut self, word: &str, value: Value) -> Result<Value, ParseError> {
        if self.bytes[self.pos..].starts_with(word.as_bytes()) {
            self.pos += word.len();
            Ok(value)
        } else {
            Err(self.error(format!("expected {word:?}")))
        }
    }

    fn parse_object(&mut self, depth: usize) -> Result<Value, ParseError> {
        self.expect(b'{')?;
        let mut rec = Record::new();
        self.skip_ws();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(Value::Object(rec));
        }
        loop {
            self.skip_ws();
            let key = self.parse_string()?;
            self.skip_ws();
            self.expect(b':')?;
            let value = self.parse_value(depth + 1)?;
            rec.push_unique(key, value).map_err(|e| self.error(e))?;
            self.skip_ws();
            match self.bump() {
                Some(b',') => continue,
                Some(b'}') => break,
                _ => {
                    self.pos = self.pos.saturating_sub(1);
                    return Err(self.error("expected ',' or '}' in object"));
                }
            }
        }
        self.unwrap_extended(rec)
    }

    // Recognizes the single-key `$...` wrapper objects for extended types.
    fn unwrap_extended(&self, rec: Record) -> Result<Value, ParseError> {
        if rec.len() != 1 {
            return Ok(Value::Object(rec));
        }
        let (name, value) = rec.iter().next().map(|(n, v)| (n.to_string(), v.clone())).unwrap();
        let bad = |what: &str| self.error(format!("invalid {what} payload"));
        match name.as_str() {
            "$point" => match number_list(&value) {
                Some(ns) if ns.len() == 2 && ns.iter().all(|n| n.is_finite()) => {
                    Ok(Value::Point(Point::new(ns[0], ns[1])))
                }
                _ => Err(bad("$point")),
            },
            "$rectangle" => match number_list(&value) {
                Some(ns) if ns.len() == 4 => {
                    let rect = Rect::from_coords(ns[0], ns[1], ns[2], ns[3]);
                    if rect.is_valid() {
                        Ok(Value::Rectangle(rect))
                    } else {
                        Err(bad("$rectangle"))
                    }
                }
                _ => Err(bad("$rectangle")),
            },
            "$circle" => match number_list(&value) {
                Some(ns)
                    if ns.len() == 3
                        && ns.iter().all(|n| n.is_finite())
                        && ns[2] > 0.0 =>
                {
                    Ok(Value::Circle(Circle::new(Point::new(ns[0], ns[1]), ns[2])))
                }
                _ => Err(bad("$circle")),
            },
            "$datetime" => match value {
                Value::Text(s) => parse_datetime(&s)
                    .map(Value::DateTime)
                    .map_err(|e| self.error(e.to_string())),
                _ => Err(bad("$datetime")),
            },
            "$duration" => match value {
                Value::Text(s) => parse_duration(&s)
                    .map(Value::Duration)
                    .map_err(|e| self.error(e.to_string())),
                _ => Err(bad("$duration")),
            },
            _ => Ok(Value::Object(rec)),
        }
    }

    fn parse_string(&mut self) -> Result<String, ParseError> {
        self.expect(b'"')?;
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.error("unterminated string")),
                Some(b'"') => return Ok(out),
                Some(b'\\') => match self.bump() {
                    Some(b'"') => out.push('"'),
                    Some(b'\\') => out.push('\\'),
                    Some(b'/') => out.push('/'),
                    Some(b'b') => out.push('\u{0008}'),
                    Some(b'f') => out.push('\u{000C}'),
                    Some(b'n') => out.push('\n'),
                    Some(b'r') => out.push('\r'),
                    Some(b't') => out.push('\t'),
                    Some(b'u') => {
                        let cp = self.parse_hex4()?;
                        if (0xD800..0xDC00).contains(&cp) {
                            // high surrogate must pair with \uDC00..\uDFFF
                            if self.bump() != Some(b'\\') || self.bump() != Some(b'u') {
                                return Err(self.error("unpaired surrogate"));
                            }
                            let low = self.parse_hex4()?;
                            if !(0xDC00..0xE000).contains(&low) {
                                return Err(self.error("invalid low surrogate"));
                            }
                            let c = 0x10000 + ((cp - 0xD800) << 10) + (low - 0xDC00);
                            match char::from_u32(c) {
                                Some(c) => out.push(c),
                                None => return Err(self.error("invalid surrogate pair")),
                            }
                        } else {
                            match char::from_u32(cp) {
                                Some(c) => out.push(c),
                                None => return Err(self.error("invalid unicode escape")),
                            }
                        }
                    }
                    _ => return Err(self.error("invalid escape sequence")),
                },
                Some(b) if b < 0x20 => return Err(self.error("control character in string")),
                Some(b) if b < 0x80 => out.push(b as char),
                Some(b) => {
                    // re-decode the multi-byte UTF-8 sequence
                    let start = self.pos - 1;
                    let len = utf8_len(b).ok_or_else(|| self.error("invalid utf-8"))?;
                    if start + len > self.bytes.len() {
                        return Err(self.error("invalid utf-8"));
                    }
                    let s = std::str::from_utf8(&self.bytes[start..start + len])
                        .map_err(|_| self.error("invalid utf-8"))?;
                    out.push_str(s);
                    self.pos = start + len;
                }
            }
        }
    }

    fn parse_hex4(&mut self) -> Result<u32, ParseError> {
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.bump().ok_or_else(|| self.error("truncated escape"))?;
            let d = (b as char)
                .to_digit(16)
                .ok_or_else(|| self.error("invalid hex digit"))?;
            v = v * 16 + d;
        }
        Ok(v)
    }

    fn parse_number(&mut self) -> Result<Value, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        let int_start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == int_start {
            return Err(self.error("expected digits"));
        }
        let mut is_float = false;
        if self.peek() == Some(b'.') {
            is_float = true;
            self.pos += 1;
            let frac_start = self.pos;
            while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == frac_start {
                return Err(self.error("expected fraction digits"));
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            is_float = true;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            while matches!(self.peek(), Some(b) if b.is_ascii_digit()) {
                self.pos += 1;
            }
            if self.pos == exp_start {
                return Err(self.error("expected exponent digits"));
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        if is_float {
            text.parse::<f64>()
                .map(Value::Float64)
                .map_err(|_| self.error("invalid number"))
        } else {
            text.parse::<i64>()
                .map(Value::Int64)
                .map_err(|_| self.error("integer out of range"))
        }
    }
}

fn utf8_len(first: u8) -> Option<usize> {
    match first {
        0xC0..=0xDF => Some(2),
        0xE0..=0xEF => Some(3),
        0xF0..=0xF7 => Some(4),
        _ => None,
    }
}

fn number_list(value: &Value) -> Option<Vec<f64>> {
    match value {
        Value::Array(items) => items.iter().map(|v| v.as_f64()).collect(),
        _ => None,
    }
}

/// Prints a record as compact canonical JSON, preserving field order.
pub fn print_json(record: &Record) -> String {
    let mut out = String::new();
    write_record(record, &mut out);
    out
}

/// Prints any value as compact canonical JSON.
pub fn print_json_value(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_record(record: &Record, out: &mut String) {
    out.push('{');
    let mut first = true;
    for (name, value) in record.iter() {
        if value.is_missing() {
            continue;
        }
        if !first {
            out.push(',');
        }
        first = false;
        write_string(name, out);
        out.push(':');
        write_value(value, out);
    }
    out.push('}');
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null | Value::Missing => out.push_str("null"),
        Value::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Int64(v) => out.push_str(&v.to_string()),
        Value::Float64(v) => write_float(*v, out),
        Value::Text(s) => write_string(s, out),
        Value::Point(p) => {
            out.push_str("{\"$point\":[");
            write_float(p.x, out);
            out.push(',');
            write_float(p.y, out);
            out.push_str("]}");
        }
        Value::Rectangle(r) => {
            out.push_str("{\"$rectangle\":[");
            for (i, c) in [
                r.lower_left.x,
                r.lower_left.y,
                r.upper_right.x,
                r.upper_right.y,
            ]
            .iter()
            .enumerate()
            {
                if i > 0 {
                    out.push(',');
                }
                write_float(*c, out);
            }
            out.push_str("]}");
        }
        Value::Circle(c) => {
            out.push_str("{\"$circle\":[");
            write_float(c.center.x, out);
            out.push(',');
            write_float(c.center.y, out);
            out.push(',');
            write_float(c.radius, out);
            out.push_str("]}");
        }
        Value::DateTime(dt) => {
            out.push_str("{\"$datetime\":");
            write_string(&format_datetime(*dt), out);
            out.push('}');
        }
        Value::Duration(d) => {
            out.push_str("{\"$duration\":");
            write_string(&format_duration(*d), out);
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(rec) => write_record(rec, out),
    }
}

// Integral floats keep a ".0" suffix so the reparse stays Float64.
fn write_float(v: f64, out: &mut String) {
    if !v.is_finite() {
        out.push_str("null");
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        out.push_str(&format!("{v:.1}"));
    } else {
        out.push_str(&format!("{v}"));
    }
}

fn write_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record;

    #[test]
    fn parses_flat_object() {
        let rec = parse_json(r#"{"id":0, "text": "Let there be light"}"#).unwrap();
        assert_eq!(rec.field("id"), &Value::Int64(0));
        assert_eq!(rec.field("text"), &Value::Text("Let there be light".into()));
    }

    #[test]
    fn parses_empty_object() {
        assert_eq!(parse_json("{}").unwrap(), Record::new());
    }

    #[test]
    fn integer_vs_float_rule() {
        let rec = parse_json(r#"{"a":[1,{"b":2.5}],"c":1e2}"#).unwrap();
        assert_eq!(
            rec.field("a"),
            &Value::Array(vec![
                Value::Int64(1),
                Value::Object(record! {"b" => Value::Float64(2.5)}),
            ])
        );
        assert_eq!(rec.field("c"), &Value::Float64(100.0));
    }

    #[test]
    fn extended_wrappers_round_trip() {
        let text = r#"{"loc":{"$point":[1.5,-2.0]},"at":{"$datetime":"2026-01-02T03:04:05.000Z"},"span":{"$duration":"P2M"},"area":{"$rectangle":[0.0,0.0,2.0,3.0]},"zone":{"$circle":[1.0,1.0,1.5]}}"#;
        let rec = parse_json(text).unwrap();
        assert_eq!(rec.field("loc"), &Value::Point(Point::new(1.5, -2.0)));
        assert_eq!(rec.field("span"), &Value::Duration(super::super::Duration::new(2, 0)));
        assert_eq!(print_json(&rec), text);
    }

    #[test]
    fn malformed_input_reports_position() {
        let err = parse_json("{\"a\": }").unwrap_err();
        assert_eq!(err.line, 1);
        assert_eq!(err.col, 7);
        let err = parse_json("{\"a\":1,\n\"b\":").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(parse_json(r#"{"a":1,"a":2}"#).is_err());
    }

    #[test]
    fn invalid_wrapper_payload_rejected() {
        assert!(parse_json(r#"{"x":{"$point":[1]}}"#).is_err());
        assert!(parse_json(r#"{"x":{"$circle":[0,0,-1]}}"#).is_err());
        assert!(parse_json(r#"{"x":{"$datetime":"nope"}}"#).is_err());
    }

    #[test]
    fn float_print_keeps_float_kind() {
        let rec = record! {"v" => Value::Float64(2.0)};
        let text = print_json(&rec);
        assert_eq!(text, r#"{"v":2.0}"#);
        assert_eq!(parse_json(&text).unwrap(), rec);
    }

    #[test]
    fn deep_nesting_is_rejected_not_crashing() {
        let mut s = String::new();
        for _ in 0..5000 {
            s.push('[');
        }
        assert!(parse_json_value(&s).is_err());
    }
}
