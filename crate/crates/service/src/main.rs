use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;

use qtvos_core::io::load_weights;
use qtvos_core::{InferenceConfig, ModelConfig, Network};
use qtvos_service::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "qtvos-server", version, about = "Serve interactive mask propagation over HTTP")]
#[command(group(clap::ArgGroup::new("init").required(true).args(["weights", "random_init"])))]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Weight file for sessions that do not ask for a seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Random initialization seed for sessions that do not ask for one.
    #[arg(long)]
    random_init: Option<u64>,
    /// Model shape as JSON.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Default inference settings as JSON.
    #[arg(long)]
    inference_config: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", p.display()))
        }
    }
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_target(false).init();
    let args = Args::parse();
    let model: ModelConfig = read_json(&args.model_config)?;
    let inference: InferenceConfig = read_json(&args.inference_config)?;
    inference.validate()?;
    let net = match (&args.weights, args.random_init) {
        (Some(path), _) => {
            let reg = load_weights(path).with_context(|| format!("cannot load {}", path.display()))?;
            Network::from_registry(&reg, &model).context("weights do not fit the model")?
        }
        (None, Some(seed)) => Network::random(&model, seed)?.1,
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let state = Arc::new(AppState::new(model, Arc::new(net), inference));
    let listener = tokio::net::TcpListener::bind(args.addr)
        .await
        .with_context(|| format!("cannot listen on {}", args.addr))?;
    tracing::info!(addr = %args.addr, "listening");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
