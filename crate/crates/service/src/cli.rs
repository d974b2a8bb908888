//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 bind
//! failure, 4 remote error, 5 response decode failure.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use runner_core::bundle::{assemble_bundle, load_bundle, save_bundle};
use runner_core::schema::{content_hash, parse_schema};
use runner_core::serving::DataFormat;
use runner_core::store::ArtifactStore;
use runner_core::swap::SwapManager;
use runner_core::tabular::{batch_to_csv, RowBatch};
use runner_core::wire::decode_stream;

use crate::client::{ClientError, RunnerClient};
use crate::config::{ServiceConfig, CONFIG_ENV};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_BIND: u8 = 3;
pub const EXIT_REMOTE: u8 = 4;
pub const EXIT_DECODE: u8 = 5;

const DEFAULT_SERVER: &str = "http://127.0.0.1:8334";

#[derive(Debug, Parser)]
#[command(name = "model-runner", version, about = "Serve protobuf models that can be swapped while running")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service until interrupted.
    Serve(ServeArgs),
    /// Assemble and validate a bundle archive from its member files.
    Onboard(OnboardArgs),
    /// Replace the bundle, schema, configuration or predictor of a running service.
    Swap(SwapArgs),
    /// Send rows to a running service and print the decoded predictions as CSV.
    Predict(PredictArgs),
    /// Print the status document of a running service.
    Status(ServerArg),
    /// List versions held in an artifact store.
    Versions(VersionsArgs),
    /// Reinstall a stored bundle version on a running service.
    Rollback(RollbackArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Properties file; defaults to $RUNNER_CONFIG when set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<String>,
    #[arg(long, default_value = "0.0.0.0")]
    pub host: String,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Bundle archive installed at startup.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub max_body_bytes: Option<String>,
}

#[derive(Debug, Args)]
pub struct OnboardArgs {
    #[arg(long)]
    pub proto: PathBuf,
    /// Predictor document (PPF JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Model configuration; `{}` when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServerArg {
    #[arg(long, default_value = DEFAULT_SERVER)]
    pub server: String,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["bundle", "proto", "config", "model"]))]
pub struct SwapArgs {
    #[command(flatten)]
    pub server: ServerArg,
    /// Bundle archive to install.
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub proto: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bare predictor document, kept with the current schema and configuration.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub server: ServerArg,
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: FormatArg,
    #[arg(long)]
    pub operation: Option<String>,
    /// Install this schema (with --install-model) before predicting.
    #[arg(long, requires = "install_model")]
    pub install_proto: Option<PathBuf>,
    #[arg(long, requires = "install_proto")]
    pub install_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VersionsArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Only this model; all models when omitted.
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct RollbackArgs {
    #[command(flatten)]
    pub server: ServerArg,
    #[arg(long)]
    pub store: PathBuf,
    pub name: String,
    pub version: u64,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

fn remote(e: ClientError) -> Failure {
    Failure::new(EXIT_REMOTE, e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read(path)?).map_err(|_| Failure::new(EXIT_CONFIG, format!("{} is not UTF-8", path.display())))
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve(args) => serve(args),
        Command::Onboard(args) => onboard(args),
        Command::Swap(args) => swap(args),
        Command::Predict(args) => predict(args),
        Command::Status(args) => {
            let status = RunnerClient::new(&args.server).status().map_err(remote)?;
            println!("{}", serde_json::to_string_pretty(&status).expect("json prints"));
            Ok(())
        }
        Command::Versions(args) => versions(args),
        Command::Rollback(args) => rollback(args),
    }
}

fn resolve_config(args: &ServeArgs) -> Result<ServiceConfig, Failure> {
    let config_err = |e: crate::config::ConfigError| Failure::new(EXIT_CONFIG, e.to_string());
    let path = args.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut config = match path {
        Some(p) => ServiceConfig::load(&p).map_err(config_err)?,
        None => ServiceConfig::default(),
    };
    if let Some(port) = &args.port {
        config.set("server.port", port).map_err(config_err)?;
    }
    if let Some(store) = &args.store {
        config.store_path = store.clone();
    }
    if let Some(bundle) = &args.bundle {
        config.initial_bundle = Some(bundle.clone());
    }
    if let Some(limit) = &args.max_body_bytes {
        config.set("limits.max_body_bytes", limit).map_err(config_err)?;
    }
    Ok(config)
}

fn serve(args: ServeArgs) -> Result<(), Failure> {
    let config = resolve_config(&args)?;
    let store = ArtifactStore::open(&config.store_path).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let manager = match &config.initial_bundle {
        Some(path) => {
            let bundle = load_bundle(&read(path)?)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
            SwapManager::with_bundle(store, bundle).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?
        }
        None => SwapManager::new(store),
    };
    let addr: SocketAddr = format!("{}:{}", args.host, config.port)
        .parse()
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("bad listen address: {e}")))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_BIND, e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Failure::new(EXIT_BIND, format!("cannot bind {addr}: {e}")))?;
        let app = crate::http::router(Arc::new(manager), config.max_body_bytes);
        tracing::info!(%addr, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(|e| Failure::new(EXIT_BIND, e.to_string()))
    })?;
    tracing::info!("stopped");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
}

fn onboard(args: OnboardArgs) -> Result<(), Failure> {
    let proto = read_text(&args.proto)?;
    let ppf = read_text(&args.model)?;
    let config = match &args.config {
        Some(p) => read_text(p)?,
        None => "{}".to_string(),
    };
    let metadata = read_text(&args.metadata)?;
    let bundle = assemble_bundle(&proto, &ppf, &config, &metadata).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let archive = save_bundle(&bundle);
    fs::write(&args.out, &archive)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot write {}: {e}", args.out.display())))?;
    println!("{}", content_hash(&archive));
    Ok(())
}

fn swap(args: SwapArgs) -> Result<(), Failure> {
    let client = RunnerClient::new(&args.server.server);
    let (path, part, file) = if let Some(p) = &args.bundle {
        ("/model", "model", p)
    } else if let Some(p) = &args.model {
        ("/model", "model", p)
    } else if let Some(p) = &args.proto {
        ("/proto", "proto", p)
    } else if let Some(p) = &args.config {
        ("/model/configuration", "config", p)
    } else {
        unreachable!("clap requires one target")
    };
    let epoch = client.swap(path, part, read(file)?).map_err(remote)?;
    println!("{epoch}");
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let client = RunnerClient::new(&args.server.server);
    let format = match args.format {
        FormatArg::Csv => DataFormat::Csv,
        FormatArg::Json => DataFormat::Json,
    };
    let data = read(&args.data)?;
    let (response, proto) = match (&args.install_proto, &args.install_model) {
        (Some(proto_path), Some(model_path)) => {
            let proto = read_text(proto_path)?;
            let path = match format {
                DataFormat::Csv => "/transformCSV",
                DataFormat::Json => "/transformJSON",
            };
            let parts = vec![(format.name(), data), ("proto", proto.clone().into_bytes()), ("model", read(model_path)?)];
            (client.post_parts(path, args.operation.as_deref(), parts).map_err(remote)?, proto)
        }
        _ => {
            let path = match format {
                DataFormat::Csv => "/transformCSVDefault",
                DataFormat::Json => "/transformJSONDefault",
            };
            let response = client.post_parts(path, args.operation.as_deref(), vec![(format.name(), data)]).map_err(remote)?;
            (response, client.proto().map_err(remote)?)
        }
    };
    let status = client.status().map_err(remote)?;
    let decode = |m: String| Failure::new(EXIT_DECODE, m);
    let output = status["output_message"]
        .as_str()
        .ok_or_else(|| decode("status has no output_message".into()))?;
    let schema = parse_schema(&proto).map_err(|e| decode(e.to_string()))?;
    let descriptor = Arc::new(schema.find_message(output).map_err(|e| decode(e.to_string()))?.clone());
    let rows = decode_stream(&response.body, &descriptor).map_err(|e| decode(e.to_string()))?;
    let csv = batch_to_csv(&RowBatch { descriptor, rows }).map_err(|e| decode(e.to_string()))?;
    print!("{csv}");
    Ok(())
}

fn versions(args: VersionsArgs) -> Result<(), Failure> {
    let store = ArtifactStore::open(&args.store).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let names = match args.name {
        Some(n) => vec![n],
        None => store.model_names().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?,
    };
    let mut all = Vec::new();
    for name in names {
        all.extend(store.list_versions(&name).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?);
    }
    println!("{}", serde_json::to_string_pretty(&all).expect("json prints"));
    Ok(())
}

fn rollback(args: RollbackArgs) -> Result<(), Failure> {
    let store = ArtifactStore::open(&args.store).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let archive = store
        .get_version(&args.name, args.version)
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    let epoch = RunnerClient::new(&args.server.server).swap("/model", "model", archive).map_err(remote)?;
    println!("{epoch}");
    Ok(())
}
