//! CSV and JSON rows to and from dynamic messages.
//!
//! CSV columns map by header name when the first record names every field
//! exactly once; otherwise they map positionally in ascending tag order.
//! An empty cell, a JSON `null` or a missing key leaves the field absent.

use std::collections::HashSet;
use std::sync::Arc;

use serde_json::Value as Json;
use thiserror::Error;

use crate::schema::{FieldDescriptor, FieldKind, MessageDescriptor};
use crate::wire::{DynamicMessage, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TabularError {
    #[error("field {field:?} is repeated; CSV cannot carry repeated fields")]
    RepeatedFieldUnsupported { field: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCountMismatch { row: usize, expected: usize, found: usize },
    #[error("header names unknown field {column:?}")]
    HeaderFieldUnknown { column: String },
    #[error("row {row}, column {column}: cannot read {text:?} as {expected}")]
    CoercionError { row: usize, column: String, expected: String, text: String },
    #[error("CSV syntax error: {message}")]
    CsvSyntaxError { message: String },
    #[error("JSON syntax error at line {line}, column {column}: {message}")]
    JsonSyntaxError { line: usize, column: usize, message: String },
    #[error("{path}: unknown key {key:?}")]
    UnknownKey { path: String, key: String },
    #[error("{path}: expected {expected}, found {found}")]
    JsonCoercionError { path: String, expected: String, found: String },
    #[error("{path}: array given for scalar field")]
    ArrayForScalarField { path: String },
}

/// Rows sharing one descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBatch {
    pub descriptor: Arc<MessageDescriptor>,
    pub rows: Vec<DynamicMessage>,
}

impl RowBatch {
    pub fn new(descriptor: Arc<MessageDescriptor>) -> Self {
        RowBatch { descriptor, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn reject_repeated(descriptor: &MessageDescriptor) -> Result<(), TabularError> {
    match descriptor.fields().iter().find(|f| f.repeated) {
        Some(f) => Err(TabularError::RepeatedFieldUnsupported { field: f.name.clone() }),
        None => Ok(()),
    }
}

pub fn csv_to_batch(csv_text: &str, descriptor: &Arc<MessageDescriptor>) -> Result<RowBatch, TabularError> {
    reject_repeated(descriptor)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(csv_text.as_bytes());
    let mut records = reader.records();

    let by_tag = descriptor.fields_by_tag();
    let mut batch = RowBatch::new(Arc::clone(descriptor));
    let Some(first) = records.next() else { return Ok(batch) };
    let first = first.map_err(csv_error)?;

    let names: HashSet<&str> = by_tag.iter().map(|f| f.name.as_str()).collect();
    let cells: Vec<&str> = first.iter().collect();
    let distinct: HashSet<&str> = cells.iter().copied().collect();
    let is_header = cells.len() == names.len() && distinct == names;

    let columns: Vec<&FieldDescriptor> = if is_header {
        cells.iter().map(|c| descriptor.field(c).expect("header names checked")).collect()
    } else {
        if looks_like_partial_header(&cells, &names, descriptor) {
            return Err(match cells.iter().find(|c| !names.contains(*c)) {
                Some(unknown) => TabularError::HeaderFieldUnknown { column: unknown.to_string() },
                // header naming a subset (or repeats) of the fields; row 0 is the header
                None => TabularError::ColumnCountMismatch { row: 0, expected: names.len(), found: cells.len() },
            });
        }
        by_tag.clone()
    };

    let mut pending = if is_header { None } else { Some(first) };
    let mut row = 0usize;
    loop {
        let record = match pending.take() {
            Some(r) => r,
            None => match records.next() {
                Some(r) => r.map_err(csv_error)?,
                None => break,
            },
        };
        row += 1;
        if record.len() != columns.len() {
            return Err(TabularError::ColumnCountMismatch { row, expected: columns.len(), found: record.len() });
        }
        let mut msg = DynamicMessage::new(Arc::clone(descriptor));
        for (cell, fd) in record.iter().zip(&columns) {
            if cell.is_empty() {
                continue;
            }
            let value = coerce_cell(cell, fd.kind).ok_or_else(|| TabularError::CoercionError {
                row,
                column: fd.name.clone(),
                expected: fd.kind.to_string(),
                text: cell.to_string(),
            })?;
            msg.set(&fd.name, value).expect("coerced to the field kind");
        }
        batch.rows.push(msg);
    }
    Ok(batch)
}

/// A first record that names some fields but is not a full header: every cell
/// is an identifier, at least one is a field name, and the rest cannot be data
/// for a non-string column.
fn looks_like_partial_header(cells: &[&str], names: &HashSet<&str>, descriptor: &MessageDescriptor) -> bool {
    let has_string_field = descriptor.fields().iter().any(|f| f.kind == FieldKind::String);
    !has_string_field
        && cells.iter().any(|c| names.contains(c))
        && cells.iter().all(|c| is_identifier(c))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !matches!(s, "true" | "false" | "NaN" | "Infinity")
}

fn csv_error(e: csv::Error) -> TabularError {
    TabularError::CsvSyntaxError { message: e.to_string() }
}

fn parse_float_text(text: &str) -> Option<f64> {
    match text {
        "NaN" => Some(f64::NAN),
        "Infinity" | "+Infinity" => Some(f64::INFINITY),
        "-Infinity" => Some(f64::NEG_INFINITY),
        t if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) => t.parse().ok(),
        _ => None,
    }
}

fn parse_f32_text(text: &str) -> Option<f32> {
    match text {
        "NaN" => Some(f32::NAN),
        "Infinity" | "+Infinity" => Some(f32::INFINITY),
        "-Infinity" => Some(f32::NEG_INFINITY),
        t if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) => {
            let v: f32 = t.parse().ok()?;
            // reject finite decimals that overflow f32
            if v.is_infinite() { None } else { Some(v) }
        }
        _ => None,
    }
}

fn coerce_cell(cell: &str, kind: FieldKind) -> Option<Value> {
    if kind == FieldKind::String {
        return Some(Value::Text(cell.to_string()));
    }
    let text = cell.trim();
    Some(match kind {
        FieldKind::Double => Value::Double(parse_float_text(text)?),
        FieldKind::Float => Value::Float(parse_f32_text(text)?),
        FieldKind::Int32 => Value::Int32(text.parse().ok()?),
        FieldKind::Int64 => Value::Int64(text.parse().ok()?),
        FieldKind::Bool => match text {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return None,
        },
        FieldKind::String => unreachable!(),
    })
}

/// Shortest text that reads back to the same bits; non-finite values use the
/// `NaN` / `Infinity` / `-Infinity` spellings.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Infinity".into() } else { "-Infinity".into() }
    } else {
        v.to_string()
    }
}

pub fn format_f32(v: f32) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Infinity".into() } else { "-Infinity".into() }
    } else {
        v.to_string()
    }
}

fn cell_text(value: &Value) -> String {
    match value {
        Value::Double(v) => format_f64(*v),
        Value::Float(v) => format_f32(*v),
        other => other.to_string(),
    }
}

pub fn batch_to_csv(batch: &RowBatch) -> Result<String, TabularError> {
    reject_repeated(&batch.descriptor)?;
    let fields = batch.descriptor.fields_by_tag();
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>, rec: Vec<String>| {
        w.write_record(rec).map_err(csv_error)
    };
    write(&mut writer, fields.iter().map(|f| f.name.clone()).collect())?;
    for row in &batch.rows {
        let record = fields
            .iter()
            .map(|f| row.get(&f.name).map(cell_text).unwrap_or_default())
            .collect();
        write(&mut writer, record)?;
    }
    let bytes = writer.into_inner().map_err(|e| TabularError::CsvSyntaxError { message: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 cells is UTF-8"))
}

pub fn json_to_batch(json_text: &str, descriptor: &Arc<MessageDescriptor>) -> Result<RowBatch, TabularError> {
    let doc: Json = serde_json::from_str(json_text).map_err(|e| TabularError::JsonSyntaxError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut batch = RowBatch::new(Arc::clone(descriptor));
    match doc {
        Json::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                batch.rows.push(json_row(item, descriptor, &format!("[{i}]"))?);
            }
        }
        obj @ Json::Object(_) => batch.rows.push(json_row(&obj, descriptor, "$")?),
        other => {
            return Err(TabularError::JsonCoercionError {
                path: "$".into(),
                expected: "array of objects or object".into(),
                found: json_type(&other).into(),
            })
        }
    }
    Ok(batch)
}

fn json_type(v: &Json) -> &'static str {
    match v {
        Json::Null => "null",
        Json::Bool(_) => "boolean",
        Json::Number(_) => "number",
        Json::String(_) => "string",
        Json::Array(_) => "array",
        Json::Object(_) => "object",
    }
}

fn json_row(item: &Json, descriptor: &Arc<MessageDescriptor>, path: &str) -> Result<DynamicMessage, TabularError> {
    let Json::Object(map) = item else {
        return Err(TabularError::JsonCoercionError {
            path: path.to_string(),
            expected: "object".into(),
            found: json_type(item).into(),
        });
    };
    let mut msg = DynamicMessage::new(Arc::clone(descriptor));
    for (key, value) in map {
        let fd = descriptor.field(key).ok_or_else(|| TabularError::UnknownKey {
            path: path.to_string(),
            key: key.clone(),
        })?;
        let field_path = format!("{path}.{key}");
        let coerced = match value {
            Json::Null => continue,
            Json::Array(items) if fd.repeated => Value::List(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, v)| json_scalar(v, fd.kind, &format!("{field_path}[{i}]")))
                    .collect::<Result<_, _>>()?,
            ),
            Json::Array(_) => return Err(TabularError::ArrayForScalarField { path: field_path }),
            other if fd.repeated => {
                return Err(TabularError::JsonCoercionError {
                    path: field_path,
                    expected: format!("array of {}", fd.kind),
                    found: json_type(other).into(),
                })
            }
            other => json_scalar(other, fd.kind, &field_path)?,
        };
        msg.set(&fd.name, coerced).expect("coerced to the field kind");
    }
    Ok(msg)
}

fn json_scalar(v: &Json, kind: FieldKind, path: &str) -> Result<Value, TabularError> {
    let fail = || TabularError::JsonCoercionError {
        path: path.to_string(),
        expected: kind.to_string(),
        found: match v {
            Json::Number(n) => format!("number {n}"),
            Json::String(s) => format!("string {s:?}"),
            other => json_type(other).to_string(),
        },
    };
    let special = |s: &str| match s {
        "NaN" => Some(f64::NAN),
        "Infinity" => Some(f64::INFINITY),
        "-Infinity" => Some(f64::NEG_INFINITY),
        _ => None,
    };
    let integral = |v: &Json| -> Option<i64> {
        let n = v.as_number()?;
        if let Some(i) = n.as_i64() {
            return Some(i);
        }
        let f = n.as_f64()?;
        (f.fract() == 0.0 && (i64::MIN as f64..-(i64::MIN as f64)).contains(&f)).then_some(f as i64)
    };
    Ok(match kind {
        FieldKind::Double => match v {
            Json::Number(n) => Value::Double(n.as_f64().ok_or_else(fail)?),
            Json::String(s) => Value::Double(special(s).ok_or_else(fail)?),
            _ => return Err(fail()),
        },
        FieldKind::Float => match v {
            Json::Number(n) => {
                let wide = n.as_f64().ok_or_else(fail)?;
                let narrow = wide as f32;
                if narrow.is_infinite() {
                    return Err(fail());
                }
                Value::Float(narrow)
            }
            Json::String(s) => Value::Float(special(s).ok_or_else(fail)? as f32),
            _ => return Err(fail()),
        },
        FieldKind::Int32 => Value::Int32(integral(v).and_then(|i| i32::try_from(i).ok()).ok_or_else(fail)?),
        FieldKind::Int64 => Value::Int64(integral(v).ok_or_else(fail)?),
        FieldKind::Bool => Value::Bool(v.as_bool().ok_or_else(fail)?),
        FieldKind::String => Value::Text(v.as_str().ok_or_else(fail)?.to_string()),
    })
}

fn json_number_f64(v: f64) -> String {
    if v.is_finite() {
        serde_json::Number::from_f64(v).expect("finite").to_string()
    } else {
        format!("\"{}\"", format_f64(v))
    }
}

fn json_value(value: &Value) -> String {
    match value {
        Value::Double(v) => json_number_f64(*v),
        // widening is exact, so the f64 text reads back to the same f32
        Value::Float(v) => json_number_f64(f64::from(*v)),
        Value::Int32(v) => v.to_string(),
        Value::Int64(v) => v.to_string(),
        Value::Bool(v) => v.to_string(),
        Value::Text(s) => serde_json::to_string(s).expect("strings serialize"),
        Value::List(items) => {
            let inner: Vec<String> = items.iter().map(json_value).collect();
            format!("[{}]", inner.join(","))
        }
    }
}

/// Array of objects with keys in ascending tag order; absent fields omitted.
pub fn batch_to_json(batch: &RowBatch) -> String {
    let fields = batch.descriptor.fields_by_tag();
    let rows: Vec<String> = batch
        .rows
        .iter()
        .map(|row| {
            let members: Vec<String> = fields
                .iter()
                .filter_map(|f| {
                    row.get(&f.name).map(|v| {
                        format!("{}:{}", serde_json::to_string(&f.name).expect("strings serialize"), json_value(v))
                    })
                })
                .collect();
            format!("{{{}}}", members.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::parse_schema;

    fn desc(src: &str) -> Arc<MessageDescriptor> {
        Arc::new(parse_schema(src).unwrap().messages()[0].clone())
    }

    fn xy() -> Arc<MessageDescriptor> {
        desc("message M { double x = 1; double y = 2; }")
    }

    fn row(d: &Arc<MessageDescriptor>, vals: &[(&str, Value)]) -> DynamicMessage {
        let mut m = DynamicMessage::new(d.clone());
        for (k, v) in vals {
            m.set(k, v.clone()).unwrap();
        }
        m
    }

    #[test]
    fn csv_header_and_positional() {
        let d = xy();
        let expected = vec![row(&d, &[("x", Value::Double(1.5)), ("y", Value::Double(2.5))])];
        assert_eq!(csv_to_batch("x,y\n1.5,2.5", &d).unwrap().rows, expected);
        assert_eq!(csv_to_batch("1.5,2.5", &d).unwrap().rows, expected);
        assert_eq!(csv_to_batch("y,x\r\n2.5,1.5\r\n", &d).unwrap().rows, expected);
    }

    #[test]
    fn csv_positional_uses_tag_order_not_declaration_order() {
        let d = desc("message M { double b = 2; double a = 1; }");
        let b = csv_to_batch("1,2", &d).unwrap();
        assert_eq!(b.rows[0].get("a"), Some(&Value::Double(1.0)));
        assert_eq!(b.rows[0].get("b"), Some(&Value::Double(2.0)));
    }

    #[test]
    fn csv_coercion_error_location() {
        let d = desc("message M { double x = 1; }");
        match csv_to_batch("x\nabc", &d) {
            Err(TabularError::CoercionError { row, column, expected, .. }) => {
                assert_eq!((row, column.as_str(), expected.as_str()), (1, "x", "double"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_errors() {
        let d = xy();
        assert!(matches!(csv_to_batch("x,y\n1,2,3", &d), Err(TabularError::ColumnCountMismatch { row: 1, expected: 2, found: 3 })));
        assert!(matches!(csv_to_batch("x,z\n1,2", &d), Err(TabularError::HeaderFieldUnknown { ref column }) if column == "z"));
        assert!(matches!(csv_to_batch("x\n1", &d), Err(TabularError::ColumnCountMismatch { row: 0, .. })));
        let r = desc("message M { repeated double x = 1; }");
        assert!(matches!(csv_to_batch("1", &r), Err(TabularError::RepeatedFieldUnsupported { .. })));
        assert!(csv_to_batch("x,y\n\"1,2", &d).is_err());
    }

    #[test]
    fn csv_kinds_and_absent_cells() {
        let d = desc("message M { double d = 1; float f = 2; int32 i = 3; int64 l = 4; bool b = 5; string s = 6; }");
        let b = csv_to_batch("d,f,i,l,b,s\nNaN,-Infinity,-7,9000000000,true,\"a,\"\"b\"\"\"\n,,,,,", &d).unwrap();
        let r0 = &b.rows[0];
        assert!(matches!(r0.get("d"), Some(Value::Double(v)) if v.is_nan()));
        assert_eq!(r0.get("f"), Some(&Value::Float(f32::NEG_INFINITY)));
        assert_eq!(r0.get("i"), Some(&Value::Int32(-7)));
        assert_eq!(r0.get("l"), Some(&Value::Int64(9_000_000_000)));
        assert_eq!(r0.get("b"), Some(&Value::Bool(true)));
        assert_eq!(r0.get("s"), Some(&Value::Text("a,\"b\"".into())));
        assert!(b.rows[1].is_empty());
        for bad in ["d\ninf", "i\n1.5", "i\n3000000000", "b\nyes", "f\n1e39"] {
            let (h, _) = bad.split_once('\n').unwrap();
            let one = desc(&format!(
                "message M {{ {} {h} = 1; }}",
                match h { "d" => "double", "f" => "float", "i" => "int32", _ => "bool" }
            ));
            assert!(matches!(csv_to_batch(bad, &one), Err(TabularError::CoercionError { .. })), "{bad}");
        }
    }

    #[test]
    fn csv_output() {
        let d = xy();
        let b = RowBatch { descriptor: d.clone(), rows: vec![row(&d, &[("x", Value::Double(1.5)), ("y", Value::Double(2.5))])] };
        assert_eq!(batch_to_csv(&b).unwrap(), "x,y\n1.5,2.5\n");
        assert_eq!(batch_to_csv(&RowBatch::new(d.clone())).unwrap(), "x,y\n");
        let p = desc("message P { double prediction = 1; }");
        let b = RowBatch { descriptor: p.clone(), rows: vec![row(&p, &[("prediction", Value::Double(6.0))])] };
        assert_eq!(batch_to_csv(&b).unwrap(), "prediction\n6\n");
    }

    #[test]
    fn json_shapes() {
        let d = desc("message M { double x = 1; }");
        assert_eq!(json_to_batch(r#"[{"x":1.5},{"x":2.0}]"#, &d).unwrap().len(), 2);
        let one = json_to_batch(r#"{"x":1.5}"#, &d).unwrap();
        assert_eq!(one.rows, vec![row(&d, &[("x", Value::Double(1.5))])]);
        assert!(matches!(json_to_batch(r#"[{"x":[1,2]}]"#, &d), Err(TabularError::ArrayForScalarField { ref path }) if path == "[0].x"));
        assert!(matches!(json_to_batch(r#"[{"y":1}]"#, &d), Err(TabularError::UnknownKey { .. })));
        assert!(matches!(json_to_batch(r#"[{"x":1"#, &d), Err(TabularError::JsonSyntaxError { .. })));
        assert!(matches!(json_to_batch("3", &d), Err(TabularError::JsonCoercionError { .. })));
        assert!(json_to_batch(r#"[{"x":null},{}]"#, &d).unwrap().rows.iter().all(|r| r.is_empty()));
    }

    #[test]
    fn json_coercion() {
        let d = desc("message M { int32 i = 1; int64 l = 2; repeated double r = 3; float f = 4; string s = 5; bool b = 6; }");
        let b = json_to_batch(r#"{"i":2.0,"l":-5,"r":[1,"NaN"],"f":0.5,"s":"t","b":false}"#, &d).unwrap();
        assert_eq!(b.rows[0].get("i"), Some(&Value::Int32(2)));
        assert_eq!(b.rows[0].get("f"), Some(&Value::Float(0.5)));
        for bad in [r#"{"i":1.5}"#, r#"{"i":3000000000}"#, r#"{"s":1}"#, r#"{"b":"true"}"#, r#"{"r":1}"#, r#"{"r":[1,null]}"#, r#"{"f":1e300}"#] {
            assert!(matches!(json_to_batch(bad, &d), Err(TabularError::JsonCoercionError { .. })), "{bad}");
        }
        match json_to_batch(r#"[{}, {"r":[1,"x"]}]"#, &d) {
            Err(TabularError::JsonCoercionError { path, .. }) => assert_eq!(path, "[1].r[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_output() {
        let d = desc("message M { double x = 1; string s = 3; repeated int32 r = 2; }");
        let b = RowBatch { descriptor: d.clone(), rows: vec![row(&d, &[("x", Value::Double(1.5))])] };
        assert_eq!(batch_to_json(&b), r#"[{"x":1.5}]"#);
        assert_eq!(batch_to_json(&RowBatch::new(d.clone())), "[]");
        let b = RowBatch {
            descriptor: d.clone(),
            rows: vec![row(&d, &[("s", Value::Text("q\"".into())), ("r", Value::List(vec![Value::Int32(1), Value::Int32(-2)])), ("x", Value::Double(f64::INFINITY))])],
        };
        assert_eq!(batch_to_json(&b), r#"[{"x":"Infinity","r":[1,-2],"s":"q\""}]"#);
        assert_eq!(json_to_batch(&batch_to_json(&b), &d).unwrap(), b);
    }
}
