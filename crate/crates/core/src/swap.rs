//! Live serving state and hot swaps.
//!
//! The current `(epoch, bundle)` pair is published behind one atomic pointer.
//! A request loads it once and keeps the `Arc` for its whole lifetime, so a
//! swap never changes what an in-flight request sees. Swaps are serialized by
//! a writer mutex: each one validates its candidate against the state it
//! replaces, persists the candidate to the artifact store, then publishes.

use std::sync::{Arc, Mutex};

use arc_swap::ArcSwapOption;
use serde::Serialize;
use thiserror::Error;

use crate::bundle::{assemble_bundle, save_bundle, BundleError, ModelBundle};
use crate::schema::print_schema;
use crate::serving::{predict_payload, DataFormat, RequestError};
use crate::store::{ArtifactStore, StoreError};

/// Entries returned by [`SwapManager::status`].
pub const HISTORY_TAIL: usize = 20;

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("no model is installed")]
    NotInitialized,
    #[error(transparent)]
    Validation(#[from] BundleError),
    #[error("could not persist bundle: {0}")]
    Store(#[from] StoreError),
    #[error(transparent)]
    Request(RequestError),
    /// The install succeeded; the request that followed it did not.
    #[error("model installed at epoch {epoch}, but the request failed: {source}")]
    PostSwapRequest { epoch: u64, source: RequestError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    Bundle,
    Predictor,
    Proto,
    Config,
    Transform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HistoryEntry {
    pub epoch: u64,
    pub model_name: String,
    pub version: u64,
    pub swap_kind: SwapKind,
    pub timestamp: String,
}

/// What a request binds to. Never mutated after publication.
#[derive(Debug)]
pub struct ServingSnapshot {
    pub epoch: u64,
    pub bundle: Arc<ModelBundle>,
    /// Artifact-store version the bundle was saved as.
    pub version: u64,
}

#[derive(Debug)]
pub struct ServingState {
    pub current: Arc<ServingSnapshot>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatusReport {
    pub initialized: bool,
    pub epoch: Option<u64>,
    pub model_name: Option<String>,
    pub version: Option<u64>,
    pub input_message: Option<String>,
    pub output_message: Option<String>,
    pub messages: Vec<String>,
    pub operations: Vec<String>,
    pub schema_hash: Option<String>,
    pub history: Vec<HistoryEntry>,
}

pub struct SwapManager {
    state: ArcSwapOption<ServingState>,
    writer: Mutex<()>,
    store: ArtifactStore,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl SwapManager {
    /// A manager with nothing installed; the first successful swap becomes epoch 0.
    pub fn new(store: ArtifactStore) -> Self {
        SwapManager { state: ArcSwapOption::empty(), writer: Mutex::new(()), store }
    }

    pub fn with_bundle(store: ArtifactStore, bundle: ModelBundle) -> Result<Self, SwapError> {
        let manager = Self::new(store);
        manager.swap_bundle(bundle)?;
        Ok(manager)
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn snapshot(&self) -> Result<Arc<ServingSnapshot>, SwapError> {
        self.state.load().as_ref().map(|s| Arc::clone(&s.current)).ok_or(SwapError::NotInitialized)
    }

    pub fn state(&self) -> Option<Arc<ServingState>> {
        self.state.load_full()
    }

    pub fn swap_bundle(&self, bundle: ModelBundle) -> Result<u64, SwapError> {
        let _writer = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        self.install(Arc::new(bundle), SwapKind::Bundle).map(|s| s.epoch)
    }

    /// Replaces only the predictor, keeping schema, config and metadata.
    pub fn swap_predictor(&self, ppf: &str) -> Result<u64, SwapError> {
        self.swap_member(SwapKind::Predictor, |s| s.predictor = ppf.to_string())
    }

    pub fn swap_proto(&self, proto: &str) -> Result<u64, SwapError> {
        self.swap_member(SwapKind::Proto, |s| s.proto = proto.to_string())
    }

    pub fn swap_config(&self, config: &str) -> Result<u64, SwapError> {
        self.swap_member(SwapKind::Config, |s| s.config = config.to_string())
    }

    fn swap_member(&self, kind: SwapKind, edit: impl FnOnce(&mut crate::bundle::BundleSources)) -> Result<u64, SwapError> {
        let _writer = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let current = self.snapshot()?;
        let candidate = current.bundle.with_sources(edit)?;
        self.install(Arc::new(candidate), kind).map(|s| s.epoch)
    }

    /// Installs `proto` + `ppf` (default config, current metadata) as the
    /// serving model, then runs `source` through it.
    pub fn transform(
        &self,
        source: &str,
        format: DataFormat,
        proto: &str,
        ppf: &str,
        operation: Option<&str>,
    ) -> Result<(Vec<u8>, u64), SwapError> {
        let snapshot = {
            let _writer = self.writer.lock().unwrap_or_else(|p| p.into_inner());
            let metadata = match self.snapshot() {
                Ok(s) => s.bundle.sources().metadata.clone(),
                Err(_) => format!(r#"{{"model_name":"model","created_at":"{}"}}"#, now()),
            };
            let candidate = assemble_bundle(proto, ppf, "{}", &metadata)?;
            candidate.operation_field(operation).map_err(|e| SwapError::Request(e.into()))?;
            self.install(Arc::new(candidate), SwapKind::Transform)?
        };
        predict_payload(&snapshot.bundle, source, format, operation)
            .map(|bytes| (bytes, snapshot.epoch))
            .map_err(|source| SwapError::PostSwapRequest { epoch: snapshot.epoch, source })
    }

    /// Caller holds the writer lock.
    fn install(&self, bundle: Arc<ModelBundle>, kind: SwapKind) -> Result<Arc<ServingSnapshot>, SwapError> {
        let previous = self.state.load_full();
        let stored = self.store.put_version(bundle.model_name(), &save_bundle(&bundle))?;
        let (epoch, mut history) = match &previous {
            None => (0, Vec::new()),
            Some(state) => (state.current.epoch + 1, state.history.clone()),
        };
        if previous.is_some() {
            history.push(HistoryEntry {
                epoch,
                model_name: bundle.model_name().to_string(),
                version: stored.version,
                swap_kind: kind,
                timestamp: now(),
            });
        }
        let snapshot = Arc::new(ServingSnapshot { epoch, bundle, version: stored.version });
        self.state.store(Some(Arc::new(ServingState { current: Arc::clone(&snapshot), history })));
        Ok(snapshot)
    }

    pub fn status(&self) -> StatusReport {
        let Some(state) = self.state.load_full() else {
            return StatusReport {
                initialized: false,
                epoch: None,
                model_name: None,
                version: None,
                input_message: None,
                output_message: None,
                messages: Vec::new(),
                operations: Vec::new(),
                schema_hash: None,
                history: Vec::new(),
            };
        };
        let snap = &state.current;
        let b = &snap.bundle;
        let tail = state.history.len().saturating_sub(HISTORY_TAIL);
        StatusReport {
            initialized: true,
            epoch: Some(snap.epoch),
            model_name: Some(b.model_name().to_string()),
            version: Some(snap.version),
            input_message: Some(b.config.input_message.clone()),
            output_message: Some(b.config.output_message.clone()),
            messages: b.schema.message_names(),
            operations: b.config.operations.keys().cloned().collect(),
            schema_hash: Some(b.schema.source_hash().to_string()),
            history: state.history[tail..].to_vec(),
        }
    }

    /// Canonical text of the serving schema.
    pub fn proto_text(&self) -> Result<String, SwapError> {
        Ok(print_schema(&self.snapshot()?.bundle.schema))
    }
}
