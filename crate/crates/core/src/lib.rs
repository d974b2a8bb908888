//! Core of the model runner: proto schemas interpreted at runtime, the
//! protobuf wire codec, CSV/JSON row adapters, portable predictors, model
//! bundles, the versioned artifact store and the hot-swap serving state.

pub mod bundle;
pub mod predictor;
pub mod schema;
pub mod serving;
pub mod store;
pub mod swap;
pub mod tabular;
pub mod wire;
