//! Wire bytes checked against fixtures produced by `protoc --encode`
//! (see testdata/wire/generate.py), plus randomized round trips.

use std::path::PathBuf;
use std::sync::Arc;

use proptest::prelude::*;
use runner_core::schema::{FieldDescriptor, FieldKind, MessageDescriptor};
use runner_core::tabular::json_to_batch;
use runner_core::wire::{decode_message, decode_stream, decode_varint, encode_message, encode_stream, encode_varint, DynamicMessage, Value};
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    name: String,
    #[serde(default)]
    unpacked: bool,
    fields: Vec<FixtureField>,
    values: serde_json::Value,
}

#[derive(Deserialize)]
struct FixtureField {
    name: String,
    tag: u32,
    kind: String,
    #[serde(default)]
    repeated: bool,
}

fn wire_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/wire")
}

fn fixtures() -> Vec<(Fixture, Arc<MessageDescriptor>, DynamicMessage, Vec<u8>)> {
    let text = std::fs::read_to_string(wire_dir().join("fixtures.json")).unwrap();
    let list: Vec<Fixture> = serde_json::from_str(&text).unwrap();
    list.into_iter()
        .map(|fx| {
            let fields = fx
                .fields
                .iter()
                .map(|f| FieldDescriptor {
                    name: f.name.clone(),
                    tag: f.tag,
                    kind: FieldKind::from_keyword(&f.kind).unwrap(),
                    repeated: f.repeated,
                })
                .collect();
            let desc = Arc::new(MessageDescriptor::new("M", fields).unwrap());
            let mut batch = json_to_batch(&fx.values.to_string(), &desc).unwrap();
            let msg = batch.rows.remove(0);
            let golden = std::fs::read(wire_dir().join(format!("{}.bin", fx.name))).unwrap();
            (fx, desc, msg, golden)
        })
        .collect()
}

#[test]
fn golden_fixtures_match_reference_encoder() {
    let all = fixtures();
    assert!(all.len() >= 20);
    for (fx, desc, msg, golden) in &all {
        let decoded = decode_message(golden, desc).unwrap_or_else(|e| panic!("{}: {e}", fx.name));
        assert_eq!(&decoded, msg, "{}: decode", fx.name);
        if !fx.unpacked {
            assert_eq!(&encode_message(msg).unwrap(), golden, "{}: encode", fx.name);
        }
    }
}

#[test]
fn golden_fixtures_cover_every_kind() {
    let all = fixtures();
    for kind in ["double", "float", "int32", "int64", "bool", "string"] {
        assert!(all.iter().any(|(fx, _, _, _)| fx.fields.iter().any(|f| f.kind == kind && !f.repeated)), "{kind}");
        assert!(all.iter().any(|(fx, _, _, _)| fx.fields.iter().any(|f| f.kind == kind && f.repeated)), "repeated {kind}");
    }
    assert!(all.iter().any(|(fx, ..)| fx.unpacked));
    assert!(all.iter().any(|(_, _, m, _)| m.is_empty()));
}

#[test]
fn varint_matches_shift_accumulate_oracle() {
    fn oracle(bytes: &[u8]) -> u64 {
        let mut n = 0u64;
        for (i, b) in bytes.iter().enumerate() {
            n |= u64::from(b & 0x7F) << (7 * i);
        }
        n
    }
    for n in 0..(1u64 << 20) {
        let bytes = encode_varint(n);
        assert_eq!(oracle(&bytes), n);
        assert!(bytes[..bytes.len() - 1].iter().all(|b| b & 0x80 != 0));
        assert_eq!(decode_varint(&bytes).unwrap(), (n, bytes.len()));
    }
}

fn kind_strategy() -> impl Strategy<Value = FieldKind> {
    prop_oneof![
        Just(FieldKind::Double),
        Just(FieldKind::Float),
        Just(FieldKind::Int32),
        Just(FieldKind::Int64),
        Just(FieldKind::Bool),
        Just(FieldKind::String),
    ]
}

fn scalar(kind: FieldKind) -> BoxedStrategy<Value> {
    match kind {
        FieldKind::Double => any::<u64>().prop_map(|b| Value::Double(f64::from_bits(b))).boxed(),
        FieldKind::Float => any::<u32>().prop_map(|b| Value::Float(f32::from_bits(b))).boxed(),
        FieldKind::Int32 => any::<i32>().prop_map(Value::Int32).boxed(),
        FieldKind::Int64 => any::<i64>().prop_map(Value::Int64).boxed(),
        FieldKind::Bool => any::<bool>().prop_map(Value::Bool).boxed(),
        FieldKind::String => ".{0,12}".prop_map(Value::Text).boxed(),
    }
}

fn message_strategy() -> impl Strategy<Value = DynamicMessage> {
    proptest::collection::btree_map(1u32..3000, (kind_strategy(), any::<bool>()), 0..8)
        .prop_flat_map(|shape| {
            let fields: Vec<FieldDescriptor> = shape
                .iter()
                .enumerate()
                .map(|(i, (tag, (kind, repeated)))| FieldDescriptor {
                    name: format!("f{i}"),
                    tag: *tag,
                    kind: *kind,
                    repeated: *repeated,
                })
                .collect();
            let desc = Arc::new(MessageDescriptor::new("R", fields.clone()).unwrap());
            let values: Vec<_> = fields
                .iter()
                .map(|f| {
                    let v = if f.repeated {
                        proptest::collection::vec(scalar(f.kind), 0..5).prop_map(Value::List).boxed()
                    } else {
                        scalar(f.kind)
                    };
                    proptest::option::of(v)
                })
                .collect();
            (Just(desc), Just(fields), values)
        })
        .prop_map(|(desc, fields, values)| {
            let mut m = DynamicMessage::new(desc);
            for (f, v) in fields.iter().zip(values) {
                if let Some(v) = v {
                    m.set(&f.name, v).unwrap();
                }
            }
            m
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn decode_inverts_encode(m in message_strategy()) {
        let bytes = encode_message(&m).unwrap();
        prop_assert_eq!(&decode_message(&bytes, m.descriptor()).unwrap(), &m);
        prop_assert_eq!(encode_message(&m).unwrap(), bytes);
    }

    #[test]
    fn stream_round_trip(ms in proptest::collection::vec(message_strategy(), 1..6)) {
        // one descriptor per stream: reuse the first message's shape
        let desc = ms[0].descriptor().clone();
        let batch: Vec<_> = ms.iter().map(|m| {
            let mut out = DynamicMessage::new(desc.clone());
            for (k, v) in m.values() {
                if desc.field(k).is_some() && out.set(k, v.clone()).is_err() {
                    out.clear(k);
                }
            }
            out
        }).collect();
        let bytes = encode_stream(&batch).unwrap();
        prop_assert_eq!(decode_stream(&bytes, &desc).unwrap(), batch);
    }

    #[test]
    fn varint_random_u64(n in any::<u64>()) {
        let bytes = encode_varint(n);
        prop_assert!(!bytes.is_empty() && bytes.len() <= 10);
        prop_assert_eq!(decode_varint(&bytes).unwrap(), (n, bytes.len()));
    }

    #[test]
    fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let desc = Arc::new(MessageDescriptor::new("M", vec![
            FieldDescriptor { name: "a".into(), tag: 1, kind: FieldKind::Double, repeated: true },
            FieldDescriptor { name: "b".into(), tag: 2, kind: FieldKind::String, repeated: false },
            FieldDescriptor { name: "c".into(), tag: 3, kind: FieldKind::Int32, repeated: false },
        ]).unwrap());
        let _ = decode_message(&bytes, &desc);
        let _ = decode_stream(&bytes, &desc);
    }
}
