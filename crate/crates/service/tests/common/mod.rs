#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;

use model_runner::http::{router, EPOCH_HEADER};
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::Client;
use runner_core::bundle::{assemble_bundle, save_bundle, ModelBundle};
use runner_core::store::ArtifactStore;
use runner_core::swap::SwapManager;
use serde_json::Value;
use tokio::sync::oneshot;

pub fn testdata(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/testdata").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(testdata(rel)).unwrap()
}

pub fn fixture_bundle(name: &str) -> ModelBundle {
    let m = |f: &str| read_fixture(&format!("bundles/{name}/{f}"));
    assemble_bundle(&m("model.proto"), &m("predictor.ppf.json"), &m("config.json"), &m("metadata.json")).unwrap()
}

pub const LINEAR_PROTO: &str = "message DataFrame { double x = 1; double y = 2; }\nmessage Prediction { double prediction = 1; }\n";

pub fn linear_ppf(weights: [f64; 2], intercept: f64) -> String {
    format!(
        r#"{{"format_version":"ppf-1","kind":"linear","input_fields":["x","y"],"output_field":"prediction","params":{{"weights":[{},{}],"intercept":{intercept}}}}}"#,
        weights[0], weights[1]
    )
}

pub fn linear_archive(name: &str, weights: [f64; 2], intercept: f64) -> Vec<u8> {
    let meta = format!(r#"{{"model_name":"{name}","created_at":"2024-01-01T00:00:00Z"}}"#);
    save_bundle(&assemble_bundle(LINEAR_PROTO, &linear_ppf(weights, intercept), "{}", &meta).unwrap())
}

pub struct TestServer {
    pub addr: SocketAddr,
    pub manager: Arc<SwapManager>,
    pub http: Client,
    pub store_dir: tempfile::TempDir,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

pub struct Reply {
    pub status: u16,
    pub epoch: Option<u64>,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

impl TestServer {
    pub fn start(initial: Option<ModelBundle>) -> Self {
        Self::start_with_limit(initial, 64 << 20)
    }

    pub fn start_with_limit(initial: Option<ModelBundle>, max_body: usize) -> Self {
        let store_dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(store_dir.path()).unwrap();
        let manager = Arc::new(match initial {
            Some(b) => SwapManager::with_bundle(store, b).unwrap(),
            None => SwapManager::new(store),
        });
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
        let app = router(Arc::clone(&manager), max_body);
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        TestServer { addr, manager, http: Client::new(), store_dir, shutdown: Some(shutdown_tx), thread: Some(thread) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn post(&self, path: &str, parts: &[(&str, &[u8])]) -> Reply {
        let mut form = Form::new();
        for (name, bytes) in parts {
            form = form.part(name.to_string(), Part::bytes(bytes.to_vec()).file_name(name.to_string()));
        }
        let response = self.http.post(self.url(path)).multipart(form).send().unwrap();
        reply(response)
    }

    pub fn get(&self, path: &str) -> Reply {
        reply(self.http.get(self.url(path)).send().unwrap())
    }

    pub fn status(&self) -> Value {
        self.get("/status").json()
    }

    pub fn status_bytes(&self) -> Vec<u8> {
        self.get("/status").body
    }
}

fn reply(response: reqwest::blocking::Response) -> Reply {
    let status = response.status().as_u16();
    let epoch = response.headers().get(EPOCH_HEADER).map(|v| v.to_str().unwrap().parse().unwrap());
    let content_type = response.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = response.bytes().unwrap().to_vec();
    Reply { status, epoch, content_type, body }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
