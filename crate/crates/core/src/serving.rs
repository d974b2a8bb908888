//! Request pipeline: rows in, wire bytes out.

use std::sync::Arc;

use thiserror::Error;

use crate::bundle::{BundleError, ModelBundle};
use crate::predictor::{predict_batch_into, PredictorError};
use crate::schema::{MessageDescriptor, Schema, SchemaError};
use crate::tabular::{csv_to_batch, json_to_batch, RowBatch, TabularError};
use crate::wire::{encode_stream, CodecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Csv => "csv",
            DataFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RequestError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Data(#[from] TabularError),
    #[error(transparent)]
    Predict(#[from] PredictorError),
    #[error(transparent)]
    Encode(#[from] CodecError),
    #[error(transparent)]
    Operation(#[from] BundleError),
}

pub fn parse_rows(source: &str, format: DataFormat, descriptor: &Arc<MessageDescriptor>) -> Result<RowBatch, TabularError> {
    match format {
        DataFormat::Csv => csv_to_batch(source, descriptor),
        DataFormat::Json => json_to_batch(source, descriptor),
    }
}

/// Picks the row message of a request-supplied schema: `preferred` when the
/// schema declares it, otherwise the first message.
pub fn select_input_message(schema: &Schema, preferred: Option<&str>) -> Arc<MessageDescriptor> {
    let chosen = preferred
        .and_then(|name| schema.find_message(name).ok())
        .unwrap_or(&schema.messages()[0]);
    Arc::new(chosen.clone())
}

/// Rows to a length-delimited stream without running a model.
pub fn serialize_rows(source: &str, format: DataFormat, descriptor: &Arc<MessageDescriptor>) -> Result<Vec<u8>, RequestError> {
    let batch = parse_rows(source, format, descriptor)?;
    Ok(encode_stream(&batch.rows)?)
}

/// Rows through the bundle's predictor; returns the encoded prediction stream.
pub fn predict_payload(
    bundle: &ModelBundle,
    source: &str,
    format: DataFormat,
    operation: Option<&str>,
) -> Result<Vec<u8>, RequestError> {
    let field = bundle.operation_field(operation)?;
    let batch = parse_rows(source, format, bundle.input_descriptor())?;
    let predictions = predict_batch_into(&bundle.predictor, &batch, bundle.output_descriptor(), field)?;
    Ok(encode_stream(&predictions.rows)?)
}
