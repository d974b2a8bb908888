//! Protobuf wire format for messages described at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::schema::{FieldDescriptor, FieldKind, MessageDescriptor};

pub const WIRE_VARINT: u8 = 0;
pub const WIRE_FIXED64: u8 = 1;
pub const WIRE_LEN: u8 = 2;
pub const WIRE_FIXED32: u8 = 5;

const MAX_VARINT_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("field {field:?}: expected {expected} value, got {found}")]
    ValueKindMismatch { field: String, expected: String, found: String },
    #[error("message {message} has no field {field:?}")]
    UnknownField { message: String, field: String },
    #[error("input truncated at byte {offset}")]
    TruncatedInput { offset: usize },
    #[error("malformed varint at byte {offset}")]
    MalformedVarint { offset: usize },
    #[error("field {field:?} (tag {tag}): expected wire type {expected}, found {found}")]
    WireTypeMismatch { field: String, tag: u32, expected: u8, found: u8 },
    #[error("unsupported wire type {wire_type} at byte {offset}")]
    UnsupportedWireType { wire_type: u8, offset: usize },
    #[error("invalid field number {tag} at byte {offset}")]
    InvalidFieldNumber { tag: u64, offset: usize },
    #[error("field {field:?} is not valid UTF-8")]
    InvalidUtf8 { field: String },
    #[error("stream frame {index} truncated at byte {offset}")]
    TruncatedFrame { index: usize, offset: usize },
    #[error("stream frame {index}: {source}")]
    Frame { index: usize, source: Box<CodecError> },
}

/// A field value. Floats compare by bit pattern so that `NaN == NaN` when the
/// payloads match, which is what a byte-exact round trip needs.
#[derive(Debug, Clone)]
pub enum Value {
    Double(f64),
    Float(f32),
    Int32(i32),
    Int64(i64),
    Bool(bool),
    Text(String),
    List(Vec<Value>),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Double(a), Double(b)) => a.to_bits() == b.to_bits(),
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Int32(a), Int32(b)) => a == b,
            (Int64(a), Int64(b)) => a == b,
            (Bool(a), Bool(b)) => a == b,
            (Text(a), Text(b)) => a == b,
            (List(a), List(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    /// The scalar kind, or `None` for lists.
    pub fn kind(&self) -> Option<FieldKind> {
        Some(match self {
            Value::Double(_) => FieldKind::Double,
            Value::Float(_) => FieldKind::Float,
            Value::Int32(_) => FieldKind::Int32,
            Value::Int64(_) => FieldKind::Int64,
            Value::Bool(_) => FieldKind::Bool,
            Value::Text(_) => FieldKind::String,
            Value::List(_) => return None,
        })
    }

    /// Numeric scalars widened to `f64`.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Double(v) => Some(v),
            Value::Float(v) => Some(f64::from(v)),
            Value::Int32(v) => Some(f64::from(v)),
            Value::Int64(v) => Some(v as f64),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match self {
            Value::List(items) => match items.first().and_then(Value::kind) {
                Some(k) => format!("list of {k}"),
                None => "list".into(),
            },
            v => v.kind().map(|k| k.to_string()).unwrap_or_default(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Double(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Int32(v) => write!(f, "{v}"),
            Value::Int64(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Text(v) => f.write_str(v),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

/// A message instance whose shape comes from a runtime descriptor.
#[derive(Debug, Clone)]
pub struct DynamicMessage {
    descriptor: Arc<MessageDescriptor>,
    values: BTreeMap<String, Value>,
}

impl PartialEq for DynamicMessage {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.descriptor, &other.descriptor) || self.descriptor == other.descriptor)
            && self.values == other.values
    }
}

impl DynamicMessage {
    pub fn new(descriptor: Arc<MessageDescriptor>) -> Self {
        DynamicMessage { descriptor, values: BTreeMap::new() }
    }

    pub fn descriptor(&self) -> &Arc<MessageDescriptor> {
        &self.descriptor
    }

    pub fn get(&self, field: &str) -> Option<&Value> {
        self.values.get(field)
    }

    /// Present fields, keyed by name.
    pub fn values(&self) -> &BTreeMap<String, Value> {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sets a field after checking its kind. An empty list clears a repeated
    /// field, since the wire format cannot tell the two apart.
    pub fn set(&mut self, field: &str, value: Value) -> Result<(), CodecError> {
        let fd = self.descriptor.field(field).ok_or_else(|| CodecError::UnknownField {
            message: self.descriptor.name().to_string(),
            field: field.to_string(),
        })?;
        check_value(fd, &value)?;
        if matches!(&value, Value::List(items) if items.is_empty()) {
            self.values.remove(field);
        } else {
            self.values.insert(field.to_string(), value);
        }
        Ok(())
    }

    pub fn clear(&mut self, field: &str) {
        self.values.remove(field);
    }

    fn push_repeated(&mut self, field: &str, value: Value) {
        match self.values.entry(field.to_string()).or_insert_with(|| Value::List(Vec::new())) {
            Value::List(items) => items.push(value),
            slot => *slot = Value::List(vec![value]),
        }
    }
}

fn check_value(fd: &FieldDescriptor, value: &Value) -> Result<(), CodecError> {
    let ok = match value {
        Value::List(items) => fd.repeated && items.iter().all(|v| v.kind() == Some(fd.kind)),
        scalar => !fd.repeated && scalar.kind() == Some(fd.kind),
    };
    if ok {
        Ok(())
    } else {
        let expected = if fd.repeated { format!("list of {}", fd.kind) } else { fd.kind.to_string() };
        Err(CodecError::ValueKindMismatch {
            field: fd.name.clone(),
            expected,
            found: value.describe(),
        })
    }
}

pub fn encode_varint(n: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAX_VARINT_LEN);
    put_varint(&mut out, n);
    out
}

pub fn put_varint(buf: &mut Vec<u8>, mut n: u64) {
    while n >= 0x80 {
        buf.push((n as u8 & 0x7F) | 0x80);
        n >>= 7;
    }
    buf.push(n as u8);
}

/// Decodes a varint from the front of `data`, returning the value and the
/// number of bytes consumed.
pub fn decode_varint(data: &[u8]) -> Result<(u64, usize), CodecError> {
    let mut value = 0u64;
    for (i, &byte) in data.iter().enumerate().take(MAX_VARINT_LEN) {
        if i == MAX_VARINT_LEN - 1 && byte > 1 {
            return Err(CodecError::MalformedVarint { offset: 0 });
        }
        value |= u64::from(byte & 0x7F) << (7 * i);
        if byte < 0x80 {
            return Ok((value, i + 1));
        }
    }
    if data.len() >= MAX_VARINT_LEN {
        Err(CodecError::MalformedVarint { offset: 0 })
    } else {
        Err(CodecError::TruncatedInput { offset: data.len() })
    }
}

fn wire_type_of(kind: FieldKind) -> u8 {
    match kind {
        FieldKind::Double => WIRE_FIXED64,
        FieldKind::Float => WIRE_FIXED32,
        FieldKind::Int32 | FieldKind::Int64 | FieldKind::Bool => WIRE_VARINT,
        FieldKind::String => WIRE_LEN,
    }
}

fn put_key(buf: &mut Vec<u8>, tag: u32, wire_type: u8) {
    put_varint(buf, (u64::from(tag) << 3) | u64::from(wire_type));
}

/// Writes the payload of a scalar, without key.
fn put_scalar(buf: &mut Vec<u8>, value: &Value) {
    match value {
        Value::Double(v) => buf.extend_from_slice(&v.to_le_bytes()),
        Value::Float(v) => buf.extend_from_slice(&v.to_le_bytes()),
        // int32 is sign-extended to 64 bits, so negatives take ten bytes.
        Value::Int32(v) => put_varint(buf, i64::from(*v) as u64),
        Value::Int64(v) => put_varint(buf, *v as u64),
        Value::Bool(v) => buf.push(u8::from(*v)),
        Value::Text(s) => {
            put_varint(buf, s.len() as u64);
            buf.extend_from_slice(s.as_bytes());
        }
        Value::List(_) => unreachable!("lists are expanded by the caller"),
    }
}

/// Serializes present fields in ascending tag order. Repeated numerics are
/// packed; repeated strings are emitted one record per element.
pub fn encode_message(msg: &DynamicMessage) -> Result<Vec<u8>, CodecError> {
    let mut buf = Vec::new();
    encode_into(&mut buf, msg)?;
    Ok(buf)
}

fn encode_into(buf: &mut Vec<u8>, msg: &DynamicMessage) -> Result<(), CodecError> {
    for fd in msg.descriptor.fields_by_tag() {
        let Some(value) = msg.values.get(&fd.name) else { continue };
        check_value(fd, value)?;
        match value {
            Value::List(items) if fd.kind == FieldKind::String => {
                for item in items {
                    put_key(buf, fd.tag, WIRE_LEN);
                    put_scalar(buf, item);
                }
            }
            Value::List(items) => {
                let mut packed = Vec::new();
                for item in items {
                    put_scalar(&mut packed, item);
                }
                put_key(buf, fd.tag, WIRE_LEN);
                put_varint(buf, packed.len() as u64);
                buf.extend_from_slice(&packed);
            }
            scalar => {
                put_key(buf, fd.tag, wire_type_of(fd.kind));
                put_scalar(buf, scalar);
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn varint(&mut self) -> Result<u64, CodecError> {
        let (v, n) = decode_varint(&self.data[self.pos..]).map_err(|e| match e {
            CodecError::MalformedVarint { .. } => CodecError::MalformedVarint { offset: self.pos },
            _ => CodecError::TruncatedInput { offset: self.data.len() },
        })?;
        self.pos += n;
        Ok(v)
    }

    fn take(&mut self, n: u64) -> Result<&'a [u8], CodecError> {
        let remaining = (self.data.len() - self.pos) as u64;
        if n > remaining {
            return Err(CodecError::TruncatedInput { offset: self.data.len() });
        }
        let out = &self.data[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

fn read_scalar(r: &mut Reader<'_>, fd: &FieldDescriptor) -> Result<Value, CodecError> {
    Ok(match fd.kind {
        FieldKind::Double => Value::Double(f64::from_le_bytes(r.take(8)?.try_into().unwrap())),
        FieldKind::Float => Value::Float(f32::from_le_bytes(r.take(4)?.try_into().unwrap())),
        FieldKind::Int32 => Value::Int32(r.varint()? as i32),
        FieldKind::Int64 => Value::Int64(r.varint()? as i64),
        FieldKind::Bool => Value::Bool(r.varint()? != 0),
        FieldKind::String => {
            let len = r.varint()?;
            let bytes = r.take(len)?;
            let text = std::str::from_utf8(bytes)
                .map_err(|_| CodecError::InvalidUtf8 { field: fd.name.clone() })?;
            Value::Text(text.to_string())
        }
    })
}

fn skip_field(r: &mut Reader<'_>, wire_type: u8, key_offset: usize) -> Result<(), CodecError> {
    match wire_type {
        WIRE_VARINT => {
            r.varint()?;
        }
        WIRE_FIXED64 => {
            r.take(8)?;
        }
        WIRE_LEN => {
            let len = r.varint()?;
            r.take(len)?;
        }
        WIRE_FIXED32 => {
            r.take(4)?;
        }
        other => return Err(CodecError::UnsupportedWireType { wire_type: other, offset: key_offset }),
    }
    Ok(())
}

/// Parses wire bytes against `descriptor`. Unknown tags are skipped, the last
/// occurrence of a scalar wins, and repeated numerics may be packed or not.
pub fn decode_message(data: &[u8], descriptor: &Arc<MessageDescriptor>) -> Result<DynamicMessage, CodecError> {
    let mut msg = DynamicMessage::new(Arc::clone(descriptor));
    let mut r = Reader { data, pos: 0 };
    while !r.done() {
        let key_offset = r.pos;
        let key = r.varint()?;
        let tag = key >> 3;
        let wire_type = (key & 0x7) as u8;
        if tag == 0 || tag > u64::from(u32::MAX) {
            return Err(CodecError::InvalidFieldNumber { tag, offset: key_offset });
        }
        let Some(fd) = descriptor.field_by_tag(tag as u32) else {
            skip_field(&mut r, wire_type, key_offset)?;
            continue;
        };
        let expected = wire_type_of(fd.kind);
        let mismatch = || CodecError::WireTypeMismatch {
            field: fd.name.clone(),
            tag: fd.tag,
            expected,
            found: wire_type,
        };
        if fd.repeated {
            if wire_type == expected {
                let v = read_scalar(&mut r, fd)?;
                msg.push_repeated(&fd.name, v);
            } else if wire_type == WIRE_LEN && fd.kind != FieldKind::String {
                let len = r.varint()?;
                let mut packed = Reader { data: r.take(len)?, pos: 0 };
                while !packed.done() {
                    let v = read_scalar(&mut packed, fd).map_err(|e| match e {
                        CodecError::TruncatedInput { .. } => CodecError::TruncatedInput { offset: r.pos },
                        other => other,
                    })?;
                    msg.push_repeated(&fd.name, v);
                }
            } else {
                return Err(mismatch());
            }
        } else if wire_type == expected {
            let v = read_scalar(&mut r, fd)?;
            msg.values.insert(fd.name.clone(), v);
        } else {
            return Err(mismatch());
        }
    }
    Ok(msg)
}

/// Length-delimited stream: `[varint len][message]` per row, in order.
pub fn encode_stream(batch: &[DynamicMessage]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    let mut body = Vec::new();
    for msg in batch {
        body.clear();
        encode_into(&mut body, msg)?;
        put_varint(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
    }
    Ok(out)
}

pub fn decode_stream(data: &[u8], descriptor: &Arc<MessageDescriptor>) -> Result<Vec<DynamicMessage>, CodecError> {
    let mut out = Vec::new();
    let mut r = Reader { data, pos: 0 };
    while !r.done() {
        let index = out.len();
        let frame_start = r.pos;
        let len = r.varint().map_err(|e| match e {
            CodecError::TruncatedInput { .. } => CodecError::TruncatedFrame { index, offset: frame_start },
            other => other,
        })?;
        let body = r.take(len).map_err(|_| CodecError::TruncatedFrame { index, offset: frame_start })?;
        let msg = decode_message(body, descriptor)
            .map_err(|e| CodecError::Frame { index, source: Box::new(e) })?;
        out.push(msg);
    }
    Ok(out)
}
