//! Compact binary codec for frame transport plus the order-preserving key
//! encoding used by hash partitioning and primary-key storage.

use super::{Circle, DateTime, Duration, Point, Record, Rect, Value};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corrupt record bytes: {0}")]
pub struct CorruptRecord(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KeyError {
    #[error("missing key field {0:?}")]
    MissingKeyField(String),
    #[error("key field {0:?} is not a scalar")]
    NonScalarKeyField(String),
}

mod tag {
    pub const NULL: u8 = 0x01;
    pub const BOOL: u8 = 0x02;
    pub const INT64: u8 = 0x03;
    pub const FLOAT64: u8 = 0x04;
    pub const TEXT: u8 = 0x05;
    pub const POINT: u8 = 0x06;
    pub const RECTANGLE: u8 = 0x07;
    pub const CIRCLE: u8 = 0x08;
    pub const DATETIME: u8 = 0x09;
    pub const DURATION: u8 = 0x0A;
    pub const ARRAY: u8 = 0x0B;
    pub const OBJECT: u8 = 0x0C;
}

/// Serializes a record; Missing fields are omitted (absence encodes them).
pub fn serialize_record(record: &Record) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    write_record(record, &mut out);
    out
}

/// Inverse of [`serialize_record`]; rejects malformed or truncated bytes.
pub fn deserialize_record(bytes: &[u8]) -> Result<Record, CorruptRecord> {
    let mut reader = Reader { bytes, pos: 0 };
    let record = reader.read_record()?;
    if reader.pos != bytes.len() {
        return Err(CorruptRecord("trailing bytes".into()));
    }
    Ok(record)
}

fn write_record(record: &Record, out: &mut Vec<u8>) {
    let present = record.iter().filter(|(_, v)| !v.is_missing()).count() as u32;
    out.extend_from_slice(&present.to_be_bytes());
    for (name, value) in record.iter() {
        if value.is_missing() {
            continue;
        }
        write_str(name, out);
        write_value(value, out);
    }
}

fn write_str(s: &str, out: &mut Vec<u8>) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_point(p: &Point, out: &mut Vec<u8>) {
    out.extend_from_slice(&p.x.to_be_bytes());
    out.extend_from_slice(&p.y.to_be_bytes());
}

fn write_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Missing => unreachable!("missing is never serialized"),
        Value::Null => out.push(tag::NULL),
        Value::Boolean(b) => {
            out.push(tag::BOOL);
            out.push(*b as u8);
        }
        Value::Int64(v) => {
            out.push(tag::INT64);
            out.extend_from_slice(&v.to_be_bytes());
        }
        Value::Float64(v) => {
            out.push(tag::FLOAT64);
            out.extend_from_slice(&v.to_be_bytes());
        }
        Value::Text(s) => {
            out.push(tag::TEXT);
            write_str(s, out);
        }
        Value::Point(p) => {
            out.push(tag::POINT);
            write_point(p, out);
        }
        Value::Rectangle(r) => {
            out.push(tag::RECTANGLE);
            write_point(&r.lower_left, out);
            write_point(&r.upper_right, out);
        }
        Value::Circle(c) => {
            out.push(tag::CIRCLE);
            write_point(&c.center, out);
            out.extend_from_slice(&c.radius.to_be_bytes());
        }
        Value::DateTime(dt) => {
            out.push(tag::DATETIME);
            out.extend_from_slice(&dt.epoch_millis.to_be_bytes());
        }
        Value::Duration(d) => {
            out.push(tag::DURATION);
            out.extend_from_slice(&d.months.to_be_bytes());
            out.extend_from_slice(&d.millis.to_be_bytes());
        }
        Value::Array(items) => {
            out.push(tag::ARRAY);
            let present = items.iter().filter(|v| !v.is_missing()).count() as u32;
            out.extend_from_slice(&present.to_be_bytes());
            for item in items {
                if !item.is_missing() {
                    write_value(item, out);
                }
            }
        }
        Value::Object(rec) => {
            out.push(tag::OBJECT);
            write_record(rec, out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorruptRecord> {
        if self.pos + n > self.bytes.len() {
            return Err(CorruptRecord("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u8(&mut self) -> Result<u8, CorruptRecord> {
        Ok(self.take(1)?[0])
    }

    fn read_u32(&mut self) -> Result<u32, CorruptRecord> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_i64(&mut self) -> Result<i64, CorruptRecord> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64, CorruptRecord> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_str(&mut self) -> Result<String, CorruptRecord> {
        let len = self.read_u32()? as usize;
        if len > self.bytes.len() {
            return Err(CorruptRecord("string length out of range".into()));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CorruptRecord("invalid utf-8".into()))
    }

    fn read_point(&mut self) -> Result<Point, CorruptRecord> {
        Ok(Point::new(self.read_f64()?, self.read_f64()?))
    }

    fn read_record(&mut self) -> Result<Record, CorruptRecord> {
        let count = self.read_u32()? as usize;
        if count > self.bytes.len() {
            return Err(CorruptRecord("field count out of range".into()));
        }
        let mut rec = Record::with_capacity(count);
        for _ in 0..count {
            let name = self.read_str()?;
            let value = self.read_value()?;
            rec.push_unique(name, value).map_err(CorruptRecord)?;
        }
        Ok(rec)
    }

    fn read_value(&mut self) -> Result<Value, CorruptRecord> {
        Ok(match self.read_u8()? {
            tag::NULL => Value::Null,
            tag::BOOL => Value::Boolean(self.read_u8()? != 0),
            tag::INT64 => Value::Int64(self.read_i64()?),
            tag::FLOAT64 => Value::Float64(self.read_f64()?),
            tag::TEXT => Value::Text(self.read_str()?),
            tag::POINT => Value::Point(self.read_point()?),
            tag::RECTANGLE => Value::Rectangle(Rect::new(self.read_point()?, self.read_point()?)),
            tag::CIRCLE => Value::Circle(Circle::new(self.read_point()?, self.read_f64()?)),
            tag::DATETIME => Value::DateTime(DateTime::from_millis(self.read_i64()?)),
            tag::DURATION => {
                let months = i32::from_be_bytes(self.take(4)?.try_into().unwrap());
                Value::Duration(Duration::new(months, self.read_i64()?))
            }
            tag::ARRAY => {
                let count = self.read_u32()? as usize;
                if count > self.bytes.len() {
                    return Err(CorruptRecord("array count out of range".into()));
                }
                let mut items = Vec::with_capacity(count);
                for _ in 0..count {
                    items.push(self.read_value()?);
                }
                Value::Array(items)
            }
            tag::OBJECT => Value::Object(self.read_record()?),
            t => return Err(CorruptRecord(format!("unknown tag {t:#x}"))),
        })
    }
}

/// Order-preserving key encoding: comparing encodings byte-wise matches
/// comparing the underlying scalar values, and equal keys encode equally.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyBytes(pub Vec<u8>);

impl KeyBytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    /// Encodes a single scalar value (used for secondary index keys).
    pub fn from_scalar(value: &Value) -> Result<KeyBytes, KeyError> {
        let mut out = Vec::new();
        encode_scalar(value, &mut out).map_err(|_| KeyError::NonScalarKeyField("<value>".into()))?;
        Ok(KeyBytes(out))
    }
}

impl fmt::Debug for KeyBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyBytes(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// Extracts and encodes the primary key fields of a record in order.
pub fn extract_primary_key(record: &Record, key_fields: &[String]) -> Result<KeyBytes, KeyError> {
    let mut out = Vec::new();
    for field in key_fields {
        match record.get(field) {
            None | Some(Value::Missing) => {
                return Err(KeyError::MissingKeyField(field.clone()))
            }
            Some(value) => {
                encode_scalar(value, &mut out)
                    .map_err(|_| KeyError::NonScalarKeyField(field.clone()))?;
            }
        }
    }
    Ok(KeyBytes(out))
}

fn encode_scalar(value: &Value, out: &mut Vec<u8>) -> Result<(), ()> {
    match value {
        Value::Boolean(b) => {
            out.push(0x10);
            out.push(*b as u8);
        }
        Value::Int64(v) => {
            out.push(0x20);
            // flip the sign bit so unsigned byte order matches signed order
            out.extend_from_slice(&((*v as u64) ^ (1 << 63)).to_be_bytes());
        }
        Value::Float64(v) => {
            out.push(0x30);
            let bits = v.to_bits();
            let ordered = if bits >> 63 == 0 {
                bits | (1 << 63)
            } else {
                !bits
            };
            out.extend_from_slice(&ordered.to_be_bytes());
        }
        Value::Text(s) => {
            out.push(0x40);
            // escape 0x00 so the terminator stays unambiguous
            for &b in s.as_bytes() {
                if b == 0x00 {
                    out.push(0x00);
                    out.push(0xFF);
                } else {
                    out.push(b);
                }
            }
            out.push(0x00);
            out.push(0x00);
        }
        Value::DateTime(dt) => {
            out.push(0x50);
            out.extend_from_slice(&((dt.epoch_millis as u64) ^ (1 << 63)).to_be_bytes());
        }
        _ => return Err(()),
    }
    Ok(())
}

/// Stable 64-bit FNV-1a hash; partition assignments derived from it are
/// reproducible across runs and platforms.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record;

    fn sample() -> Record {
        record! {
            "id" => Value::Int64(7),
            "text" => Value::Text("Let there be light".into()),
            "loc" => Value::Point(Point::new(0.5, -1.5)),
            "at" => Value::DateTime(DateTime::from_millis(1_700_000_000_000)),
            "tags" => Value::Array(vec![Value::Int64(1), Value::Text("a".into())]),
            "nested" => Value::Object(record! {"b" => Value::Float64(2.5)}),
        }
    }

    #[test]
    fn round_trip_preserves_structure() {
        let rec = sample();
        assert_eq!(deserialize_record(&serialize_record(&rec)).unwrap(), rec);
    }

    #[test]
    fn truncated_bytes_are_corrupt() {
        let bytes = serialize_record(&sample());
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            assert!(deserialize_record(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(deserialize_record(&[0xFF, 0x00]).is_err());
    }

    #[test]
    fn key_extraction_matches_examples() {
        let rec = record! {"id" => Value::Int64(7), "text" => Value::Text("x".into())};
        let key = extract_primary_key(&rec, &["id".into()]).unwrap();
        let again = extract_primary_key(&rec, &["id".into()]).unwrap();
        assert_eq!(key, again);
        let other = record! {"id" => Value::Int64(7)};
        assert_eq!(extract_primary_key(&other, &["id".into()]).unwrap(), key);

        let err = extract_primary_key(&record! {"text" => Value::Text("x".into())}, &["id".into()]);
        assert_eq!(err.unwrap_err(), KeyError::MissingKeyField("id".into()));
    }

    #[test]
    fn key_encoding_preserves_order() {
        let enc = |v: i64| {
            extract_primary_key(&record! {"k" => Value::Int64(v)}, &["k".into()]).unwrap()
        };
        assert!(enc(-5) < enc(-1));
        assert!(enc(-1) < enc(0));
        assert!(enc(0) < enc(3));

        let encf = |v: f64| KeyBytes::from_scalar(&Value::Float64(v)).unwrap();
        assert!(encf(-2.5) < encf(-1.0));
        assert!(encf(-1.0) < encf(0.0));
        assert!(encf(0.0) < encf(1.5));

        let enct = |s: &str| KeyBytes::from_scalar(&Value::Text(s.into())).unwrap();
        assert!(enct("abc") < enct("abd"));
        assert!(enct("ab") < enct("abc"));
    }

    #[test]
    fn composite_text_keys_do_not_collide() {
        let rec = |a: &str, b: &str| record! {"a" => Value::Text(a.into()), "b" => Value::Text(b.into())};
        let fields = ["a".to_string(), "b".to_string()];
        let k1 = extract_primary_key(&rec("x", "yz"), &fields).unwrap();
        let k2 = extract_primary_key(&rec("xy", "z"), &fields).unwrap();
        assert_ne!(k1, k2);
    }

    #[test]
    fn stable_hash_is_fixed() {
        // pinned so partition layouts never drift between runs
        assert_eq!(stable_hash64(b""), 0xcbf29ce484222325);
        assert_eq!(stable_hash64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
