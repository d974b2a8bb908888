//! Model bundles: the deployable unit of schema, predictor, config and
//! metadata, stored as a four-member ZIP archive.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::predictor::{load_predictor, Predictor, PredictorError};
use crate::schema::{parse_schema, FieldKind, MessageDescriptor, Schema, SchemaError};

pub const PROTO_MEMBER: &str = "model.proto";
pub const PREDICTOR_MEMBER: &str = "predictor.ppf.json";
pub const CONFIG_MEMBER: &str = "config.json";
pub const METADATA_MEMBER: &str = "metadata.json";

/// Archive members in the order they are written.
pub const MEMBERS: [&str; 4] = [PROTO_MEMBER, PREDICTOR_MEMBER, CONFIG_MEMBER, METADATA_MEMBER];

pub const DEFAULT_INPUT_MESSAGE: &str = "DataFrame";
pub const DEFAULT_OUTPUT_MESSAGE: &str = "Prediction";
pub const DEFAULT_OPERATION: &str = "predict";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BundleError {
    #[error("bundle archive is malformed: {0}")]
    ArchiveMalformed(String),
    #[error("bundle archive is missing {0}")]
    MemberMissing(String),
    #[error("{PROTO_MEMBER}: {0}")]
    Schema(#[from] SchemaError),
    #[error("{PREDICTOR_MEMBER}: {0}")]
    Predictor(#[from] PredictorError),
    #[error("{CONFIG_MEMBER}: {0}")]
    Config(String),
    #[error("{METADATA_MEMBER}: {0}")]
    Metadata(String),
    #[error("bundle is inconsistent at {name:?}: {detail}")]
    CrossValidation { name: String, detail: String },
    #[error("unknown operation {name:?} (configured: {})", .available.join(", "))]
    UnknownOperation { name: String, available: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleMetadata {
    pub model_name: String,
    pub created_at: String,
    pub description: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetadata {
    model_name: String,
    created_at: String,
    #[serde(default)]
    description: String,
}

pub fn parse_metadata(text: &str) -> Result<BundleMetadata, BundleError> {
    let raw: RawMetadata = serde_json::from_str(text).map_err(|e| BundleError::Metadata(e.to_string()))?;
    if !valid_model_name(&raw.model_name) {
        return Err(BundleError::Metadata(format!(
            "model_name {:?} must match [A-Za-z0-9_-]+",
            raw.model_name
        )));
    }
    chrono::DateTime::parse_from_rfc3339(&raw.created_at)
        .map_err(|e| BundleError::Metadata(format!("created_at {:?}: {e}", raw.created_at)))?;
    Ok(BundleMetadata { model_name: raw.model_name, created_at: raw.created_at, description: raw.description })
}

pub fn valid_model_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Which messages carry rows in and out, and the named operations a request
/// may select. Each operation maps to the output field that receives the
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_message: String,
    pub output_message: String,
    pub operations: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    input_message: Option<String>,
    output_message: Option<String>,
    operations: Option<BTreeMap<String, String>>,
}

/// Parses `config.json`; a missing `operations` map defaults to
/// `{"predict": <predictor output field>}`.
pub fn parse_config(text: &str, predictor: &Predictor) -> Result<ModelConfig, BundleError> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| BundleError::Config(e.to_string()))?;
    let operations = match raw.operations {
        Some(ops) => {
            if !ops.contains_key(DEFAULT_OPERATION) {
                return Err(BundleError::Config(format!("operations must include {DEFAULT_OPERATION:?}")));
            }
            ops
        }
        None => BTreeMap::from([(DEFAULT_OPERATION.to_string(), predictor.output_field.clone())]),
    };
    Ok(ModelConfig {
        input_message: raw.input_message.unwrap_or_else(|| DEFAULT_INPUT_MESSAGE.into()),
        output_message: raw.output_message.unwrap_or_else(|| DEFAULT_OUTPUT_MESSAGE.into()),
        operations,
    })
}

/// The four member texts a bundle was built from, kept verbatim so that
/// saving and reloading reproduces the bundle exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleSources {
    pub proto: String,
    pub predictor: String,
    pub config: String,
    pub metadata: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub metadata: BundleMetadata,
    pub schema: Schema,
    pub predictor: Predictor,
    pub config: ModelConfig,
    input: Arc<MessageDescriptor>,
    output: Arc<MessageDescriptor>,
    sources: BundleSources,
}

impl ModelBundle {
    pub fn input_descriptor(&self) -> &Arc<MessageDescriptor> {
        &self.input
    }

    pub fn output_descriptor(&self) -> &Arc<MessageDescriptor> {
        &self.output
    }

    pub fn sources(&self) -> &BundleSources {
        &self.sources
    }

    pub fn model_name(&self) -> &str {
        &self.metadata.model_name
    }

    /// Output field selected by `operation`, defaulting to `"predict"`.
    pub fn operation_field(&self, operation: Option<&str>) -> Result<&str, BundleError> {
        let name = operation.unwrap_or(DEFAULT_OPERATION);
        self.config.operations.get(name).map(String::as_str).ok_or_else(|| BundleError::UnknownOperation {
            name: name.to_string(),
            available: self.config.operations.keys().cloned().collect(),
        })
    }

    /// Rebuilds the bundle with some member texts replaced.
    pub fn with_sources(&self, f: impl FnOnce(&mut BundleSources)) -> Result<ModelBundle, BundleError> {
        let mut sources = self.sources.clone();
        f(&mut sources);
        assemble_from_sources(sources)
    }
}

pub fn assemble_bundle(proto: &str, ppf: &str, config: &str, metadata: &str) -> Result<ModelBundle, BundleError> {
    assemble_from_sources(BundleSources {
        proto: proto.to_string(),
        predictor: ppf.to_string(),
        config: config.to_string(),
        metadata: metadata.to_string(),
    })
}

fn cross(name: &str, detail: impl Into<String>) -> BundleError {
    BundleError::CrossValidation { name: name.to_string(), detail: detail.into() }
}

fn assemble_from_sources(sources: BundleSources) -> Result<ModelBundle, BundleError> {
    let schema = parse_schema(&sources.proto)?;
    let predictor = load_predictor(&sources.predictor)?;
    let config = parse_config(&sources.config, &predictor)?;
    let metadata = parse_metadata(&sources.metadata)?;

    let resolve = |name: &str, role: &str| {
        schema
            .find_message(name)
            .cloned()
            .map(Arc::new)
            .map_err(|_| cross(name, format!("{role} message not declared in {PROTO_MEMBER} (declared: {})", schema.message_names().join(", "))))
    };
    let input = resolve(&config.input_message, "input")?;
    let output = resolve(&config.output_message, "output")?;

    for name in &predictor.input_fields {
        match input.field(name) {
            None => return Err(cross(name, format!("predictor input field missing from message {}", input.name()))),
            Some(f) if f.repeated || !f.kind.is_numeric() => {
                return Err(cross(name, format!("predictor input field has non-numeric kind {}{}", if f.repeated { "repeated " } else { "" }, f.kind)))
            }
            Some(_) => {}
        }
    }
    let mut targets: Vec<&String> = config.operations.values().collect();
    targets.push(&predictor.output_field);
    for name in targets {
        match output.field(name) {
            Some(f) if f.kind == FieldKind::Double && !f.repeated => {}
            Some(_) => return Err(cross(name, format!("output field in message {} must be a non-repeated double", output.name()))),
            None => return Err(cross(name, format!("output field missing from message {}", output.name()))),
        }
    }

    Ok(ModelBundle { metadata, schema, predictor, config, input, output, sources })
}

/// True when `bytes` start like a ZIP archive.
pub fn looks_like_archive(bytes: &[u8]) -> bool {
    bytes.starts_with(b"PK\x03\x04") || bytes.starts_with(b"PK\x05\x06")
}

pub fn load_bundle(archive: &[u8]) -> Result<ModelBundle, BundleError> {
    let mut zip = ZipArchive::new(Cursor::new(archive)).map_err(|e| BundleError::ArchiveMalformed(e.to_string()))?;
    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| BundleError::ArchiveMalformed(e.to_string()))?;
        let name = entry.name().to_string();
        if !MEMBERS.contains(&name.as_str()) {
            return Err(BundleError::ArchiveMalformed(format!("unexpected member {name:?}")));
        }
        if texts.contains_key(&name) {
            return Err(BundleError::ArchiveMalformed(format!("duplicate member {name:?}")));
        }
        let mut text = String::new();
        entry
            .read_to_string(&mut text)
            .map_err(|e| BundleError::ArchiveMalformed(format!("{name}: {e}")))?;
        texts.insert(name, text);
    }
    let mut take = |member: &str| texts.remove(member).ok_or_else(|| BundleError::MemberMissing(member.to_string()));
    let sources = BundleSources {
        proto: take(PROTO_MEMBER)?,
        predictor: take(PREDICTOR_MEMBER)?,
        config: take(CONFIG_MEMBER)?,
        metadata: take(METADATA_MEMBER)?,
    };
    assemble_from_sources(sources)
}

/// Writes the four members uncompressed, in fixed order, with zeroed
/// (1980-01-01) timestamps, so equal bundles give equal bytes.
pub fn save_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let s = &bundle.sources;
    for (name, text) in MEMBERS.iter().zip([&s.proto, &s.predictor, &s.config, &s.metadata]) {
        zip.start_file(*name, options).expect("in-memory zip write");
        zip.write_all(text.as_bytes()).expect("in-memory zip write");
    }
    zip.finish().expect("in-memory zip write").into_inner()
}
