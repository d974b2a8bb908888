//! Portable predictor documents: linear models and tree ensembles.
//!
//! A document is JSON:
//!
//! ```json
//! {
//!   "format_version": "ppf-1",
//!   "kind": "linear",
//!   "input_fields": ["x", "y"],
//!   "output_field": "prediction",
//!   "params": { "weights": [2, 3], "intercept": 1, "link": "identity" }
//! }
//! ```
//!
//! Tree ensembles use `"kind": "tree_ensemble"` with params
//! `{ "trees": [{ "nodes": [...] }], "aggregate": "sum" | "mean", "init": 0 }`.
//! A node is either `{ "feature": i, "threshold": t, "left": l, "right": r }`
//! or `{ "value": v }`; node 0 is the root.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::schema::MessageDescriptor;
use crate::tabular::RowBatch;
use crate::wire::{DynamicMessage, Value};

pub const FORMAT_VERSION: &str = "ppf-1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredictorError {
    #[error("predictor document is not valid: {0}")]
    PpfSyntaxError(String),
    #[error("unsupported predictor format version {0:?} (expected \"ppf-1\")")]
    PpfVersionUnsupported(String),
    #[error("predictor violates {invariant}: {detail}")]
    PpfValidationError { invariant: &'static str, detail: String },
    #[error("input row is missing feature {0:?}")]
    MissingFeature(String),
    #[error("feature {0:?} is not numeric")]
    NonNumericFeature(String),
    #[error("feature {0:?} is NaN")]
    NaNFeature(String),
    #[error("prediction is not finite")]
    NonFiniteOutput,
    #[error("row {row}: {source}")]
    Row { row: usize, source: Box<PredictorError> },
    #[error("output message {message} has no double field {field:?}")]
    OutputFieldMissingFromSchema { message: String, field: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(default = "default_link")]
    pub link: Link,
}

fn default_link() -> Link {
    Link::Identity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleParams {
    pub trees: Vec<Tree>,
    pub aggregate: Aggregate,
    #[serde(default)]
    pub init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Linear(LinearParams),
    TreeEnsemble(EnsembleParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub input_fields: Vec<String>,
    pub output_field: String,
    pub params: Params,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[allow(dead_code)]
    format_version: String,
    kind: String,
    input_fields: Vec<String>,
    output_field: String,
    params: serde_json::Value,
}

fn invalid(invariant: &'static str, detail: impl Into<String>) -> PredictorError {
    PredictorError::PpfValidationError { invariant, detail: detail.into() }
}

pub fn load_predictor(document: &str) -> Result<Predictor, PredictorError> {
    let raw: serde_json::Value =
        serde_json::from_str(document).map_err(|e| PredictorError::PpfSyntaxError(e.to_string()))?;
    match raw.get("format_version") {
        Some(serde_json::Value::String(v)) if v == FORMAT_VERSION => {}
        Some(serde_json::Value::String(v)) => return Err(PredictorError::PpfVersionUnsupported(v.clone())),
        _ => return Err(PredictorError::PpfSyntaxError("missing string field `format_version`".into())),
    }
    let doc: Document = serde_json::from_value(raw).map_err(|e| PredictorError::PpfSyntaxError(e.to_string()))?;
    let params = match doc.kind.as_str() {
        "linear" => Params::Linear(
            serde_json::from_value(doc.params).map_err(|e| PredictorError::PpfSyntaxError(format!("params: {e}")))?,
        ),
        "tree_ensemble" => Params::TreeEnsemble(
            serde_json::from_value(doc.params).map_err(|e| PredictorError::PpfSyntaxError(format!("params: {e}")))?,
        ),
        other => return Err(PredictorError::PpfSyntaxError(format!("unknown predictor kind {other:?}"))),
    };
    let predictor = Predictor { input_fields: doc.input_fields, output_field: doc.output_field, params };
    predictor.validate()?;
    Ok(predictor)
}

impl Predictor {
    pub fn kind(&self) -> &'static str {
        match self.params {
            Params::Linear(_) => "linear",
            Params::TreeEnsemble(_) => "tree_ensemble",
        }
    }

    /// Checks every structural invariant; called by [`load_predictor`].
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.input_fields.is_empty() {
            return Err(invalid("non-empty input_fields", "no input fields"));
        }
        let mut seen = HashSet::new();
        for name in &self.input_fields {
            if !seen.insert(name.as_str()) {
                return Err(invalid("unique input_fields", format!("{name:?} listed twice")));
            }
        }
        if seen.contains(self.output_field.as_str()) {
            return Err(invalid("output_field not an input", format!("{:?} is also an input", self.output_field)));
        }
        match &self.params {
            Params::Linear(p) => {
                if p.weights.len() != self.input_fields.len() {
                    return Err(invalid(
                        "one weight per input",
                        format!("{} weights for {} inputs", p.weights.len(), self.input_fields.len()),
                    ));
                }
                if !p.weights.iter().all(|w| w.is_finite()) || !p.intercept.is_finite() {
                    return Err(invalid("finite coefficients", "weights and intercept must be finite"));
                }
            }
            Params::TreeEnsemble(p) => {
                if p.trees.is_empty() {
                    return Err(invalid("non-empty ensemble", "no trees"));
                }
                if !p.init.is_finite() {
                    return Err(invalid("finite init", "init must be finite"));
                }
                for (t, tree) in p.trees.iter().enumerate() {
                    validate_tree(tree, self.input_fields.len())
                        .map_err(|detail| invalid("tree shape", format!("tree {t}: {detail}")))?;
                }
            }
        }
        Ok(())
    }

    /// Evaluates one row. Integer features are widened to `f64`; NaN inputs
    /// and non-finite results are errors.
    pub fn predict_row(&self, row: &DynamicMessage) -> Result<f64, PredictorError> {
        let features = self.features(row)?;
        let y = match &self.params {
            Params::Linear(p) => {
                let z = features.iter().zip(&p.weights).fold(p.intercept, |acc, (x, w)| acc + w * x);
                match p.link {
                    Link::Identity => z,
                    Link::Logit => 1.0 / (1.0 + (-z).exp()),
                }
            }
            Params::TreeEnsemble(p) => {
                let mut total = 0.0;
                for tree in &p.trees {
                    total += descend(tree, &features);
                }
                if p.aggregate == Aggregate::Mean {
                    total /= p.trees.len() as f64;
                }
                p.init + total
            }
        };
        if y.is_finite() {
            Ok(y)
        } else {
            Err(PredictorError::NonFiniteOutput)
        }
    }

    fn features(&self, row: &DynamicMessage) -> Result<Vec<f64>, PredictorError> {
        self.input_fields
            .iter()
            .map(|name| {
                let value = row.get(name).ok_or_else(|| PredictorError::MissingFeature(name.clone()))?;
                let x = value.as_f64().ok_or_else(|| PredictorError::NonNumericFeature(name.clone()))?;
                if x.is_nan() {
                    Err(PredictorError::NaNFeature(name.clone()))
                } else {
                    Ok(x)
                }
            })
            .collect()
    }
}

fn validate_tree(tree: &Tree, n_features: usize) -> Result<(), String> {
    if tree.nodes.is_empty() {
        return Err("no nodes".into());
    }
    let mut visited = vec![false; tree.nodes.len()];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        if visited[i] {
            return Err(format!("node {i} reachable twice (cycle or shared child)"));
        }
        visited[i] = true;
        match &tree.nodes[i] {
            Node::Leaf { value } => {
                if !value.is_finite() {
                    return Err(format!("leaf {i} value is not finite"));
                }
            }
            Node::Split { feature, threshold, left, right } => {
                if *feature >= n_features {
                    return Err(format!("node {i} feature {feature} out of range"));
                }
                if threshold.is_nan() {
                    return Err(format!("node {i} threshold is NaN"));
                }
                for child in [*left, *right] {
                    if child >= tree.nodes.len() {
                        return Err(format!("node {i} child {child} out of range"));
                    }
                    stack.push(child);
                }
            }
        }
    }
    Ok(())
}

fn descend(tree: &Tree, features: &[f64]) -> f64 {
    let mut i = 0;
    loop {
        match tree.nodes[i] {
            Node::Leaf { value } => return value,
            Node::Split { feature, threshold, left, right } => {
                i = if features[feature] <= threshold { left } else { right };
            }
        }
    }
}

pub fn predict_row(p: &Predictor, row: &DynamicMessage) -> Result<f64, PredictorError> {
    p.predict_row(row)
}

pub fn predict_batch(
    p: &Predictor,
    batch: &RowBatch,
    output: &Arc<MessageDescriptor>,
) -> Result<RowBatch, PredictorError> {
    predict_batch_into(p, batch, output, &p.output_field)
}

/// Like [`predict_batch`] but writes each prediction into `field` of the
/// output message instead of the predictor's own output field.
pub fn predict_batch_into(
    p: &Predictor,
    batch: &RowBatch,
    output: &Arc<MessageDescriptor>,
    field: &str,
) -> Result<RowBatch, PredictorError> {
    match output.field(field) {
        Some(fd) if fd.kind == crate::schema::FieldKind::Double && !fd.repeated => {}
        _ => {
            return Err(PredictorError::OutputFieldMissingFromSchema {
                message: output.name().to_string(),
                field: field.to_string(),
            })
        }
    }
    let mut out = RowBatch::new(Arc::clone(output));
    for (i, row) in batch.rows.iter().enumerate() {
        let y = p
            .predict_row(row)
            .map_err(|e| PredictorError::Row { row: i + 1, source: Box::new(e) })?;
        let mut msg = DynamicMessage::new(Arc::clone(output));
        msg.set(field, Value::Double(y)).expect("checked double field");
        out.rows.push(msg);
    }
    Ok(out)
}
