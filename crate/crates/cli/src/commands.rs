//! Subcommand implementations. Errors map to exit status 1 when a run or
//! comparison does not match and 2 on unusable input.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use orchestra_core::kernel::{Kernel, KernelConfig, KernelError, SeedPaths};
use orchestra_core::scenario::{self, Scenario, ScenarioError};
use orchestra_core::seeds;
use orchestra_core::stream::encode_transcript;
use orchestra_core::transcript::{diff, normalize, read_normalized};
use thiserror::Error;

use crate::config::ServeConfig;
use crate::gateway::{router, Gateway};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, seed or input file.
    #[error("{0}")]
    Input(String),
    /// A scenario expectation or transcript comparison failed.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Mismatch(_) => 1,
            CliError::Input(_) => 2,
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Seed { .. } => CliError::Input(e.to_string()),
            other => CliError::Mismatch(other.to_string()),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn input(e: impl ToString) -> CliError {
    CliError::Input(e.to_string())
}

/// Loads the seed files and prints what they registered as JSON.
pub fn seed(seeds: SeedPaths, out: &mut dyn Write) -> CliResult {
    let mut config = KernelConfig::from_seed_dir(Path::new("."));
    config.seeds = seeds;
    let k = Kernel::load(config)?;
    let counts = serde_json::to_string_pretty(&k.counts()).map_err(input)?;
    writeln!(out, "{counts}").map_err(input)
}

/// Writes the default generated seed set to `dir`.
pub fn generate_seeds(dir: &Path, seed: u64, out: &mut dyn Write) -> CliResult {
    seeds::generate(seed)
        .write(dir)
        .map_err(|e| input(format!("{}: {e}", dir.display())))?;
    writeln!(out, "wrote seeds to {}", dir.display()).map_err(input)
}

pub struct RunArgs {
    pub scenario: PathBuf,
    /// Seed directory; a freshly generated default set when absent.
    pub seeds: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub golden: Option<PathBuf>,
}

/// Runs a scenario, checks its expectations and optionally writes the
/// transcript and compares it with a golden transcript.
pub fn run(args: &RunArgs, out: &mut dyn Write) -> CliResult {
    let scenario = Scenario::load(&args.scenario).map_err(input)?;
    let generated;
    let dir = match &args.seeds {
        Some(d) => d.as_path(),
        None => {
            generated = tempfile::TempDir::new().map_err(input)?;
            seeds::generate(seeds::DEFAULT_SEED)
                .write(generated.path())
                .map_err(input)?;
            generated.path()
        }
    };
    let mut config = KernelConfig::from_seed_dir(dir);
    config.summarize_with_model = scenario.summarize_with_model;
    let k = Kernel::load(config)?;
    let result = scenario::run(&k, &scenario).map_err(|e| match e {
        ScenarioError::Load { .. } => input(e),
        ScenarioError::Kernel(k) => k.into(),
        other => CliError::Mismatch(format!("{}: {other}", scenario.name)),
    })?;
    if let Some(path) = &args.out {
        std::fs::write(path, encode_transcript(&result.transcript))
            .map_err(|e| input(format!("{}: {e}", path.display())))?;
    }
    if let Some(golden) = &args.golden {
        let want = read_normalized(golden).map_err(input)?;
        let lines = diff(&want, &normalize(&result.transcript));
        if !lines.is_empty() {
            return Err(CliError::Mismatch(format!(
                "{}: transcript differs from {}:\n{}",
                scenario.name,
                golden.display(),
                lines.join("\n")
            )));
        }
    }
    writeln!(
        out,
        "{}: ok, {} records in {} ms",
        scenario.name,
        result.transcript.len(),
        result.elapsed.as_millis()
    )
    .map_err(input)
}

/// Compares two transcript files after normalization.
pub fn verify(transcript: &Path, golden: &Path, out: &mut dyn Write) -> CliResult {
    let got = read_normalized(transcript).map_err(input)?;
    let want = read_normalized(golden).map_err(input)?;
    let lines = diff(&want, &got);
    if lines.is_empty() {
        return writeln!(out, "equal: {} records", got.len()).map_err(input);
    }
    Err(CliError::Mismatch(lines.join("\n")))
}

/// Fetches a session transcript from a running gateway.
pub fn dump(server: &str, session: &str, token: Option<&str>, dest: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let url = format!("{}/v1/sessions/{session}/transcript", server.trim_end_matches('/'));
    let mut req = reqwest::blocking::Client::new().get(&url);
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let resp = req.send().map_err(|e| input(format!("{url}: {e}")))?;
    let status = resp.status();
    let body = resp.text().map_err(|e| input(format!("{url}: {e}")))?;
    if !status.is_success() {
        return Err(input(format!("{url}: {status}: {}", body.trim())));
    }
    match dest {
        Some(path) => std::fs::write(path, body).map_err(|e| input(format!("{}: {e}", path.display()))),
        None => out.write_all(body.as_bytes()).map_err(input),
    }
}

/// Serves the gateway until interrupted.
pub fn serve(config_path: &Path, out: &mut dyn Write) -> CliResult {
    let config = ServeConfig::load(config_path).map_err(input)?;
    let kernel = Arc::new(Kernel::load(config.kernel_config())?);
    let gateway = Gateway::new(kernel, config.token.clone());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(input)?;
    rt.block_on(async {
        let addr: SocketAddr = config.bind.parse().map_err(input)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| input(format!("bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(input)?;
        writeln!(out, "listening on http://{local}").map_err(input)?;
        out.flush().map_err(input)?;
        tracing::info!(%local, "gateway listening");
        axum::serve(listener, router(gateway))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(input)
    })
}
