use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use orchestra_cli::commands::{self, RunArgs};
use orchestra_core::kernel::SeedPaths;

#[derive(Parser)]
#[command(name = "orchestra", version, about = "Orchestration kernel operator tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Load seed files and print what they register.
    Seed {
        #[arg(long)]
        agents: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Plan templates; defaults to templates.json beside the agents file.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Run a scenario and check its expectations.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Seed directory; the default generated seeds when absent.
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Write the transcript here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare the transcript with this golden transcript.
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Fetch a session transcript from a running gateway.
    Dump {
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        token: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a transcript with a golden transcript.
    Verify {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        golden: PathBuf,
    },
    /// Write the default generated seed set.
    GenerateSeeds {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = orchestra_core::seeds::DEFAULT_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut out = std::io::stdout();
    let result = match cli.command {
        Command::Serve { config } => commands::serve(&config, &mut out),
        Command::Seed {
            agents,
            catalog,
            data,
            templates,
        } => {
            let templates = templates.unwrap_or_else(|| {
                agents
                    .parent()
                    .map(|d| d.join("templates.json"))
                    .unwrap_or_else(|| PathBuf::from("templates.json"))
            });
            let seeds = SeedPaths {
                agents,
                catalog,
                templates,
                data,
            };
            commands::seed(seeds, &mut out)
        }
        Command::Run {
            scenario,
            seeds,
            out: dest,
            golden,
        } => commands::run(
            &RunArgs {
                scenario,
                seeds,
                out: dest,
                golden,
            },
            &mut out,
        ),
        Command::Dump {
            session,
            server,
            token,
            out: dest,
        } => commands::dump(&server, &session, token.as_deref(), dest.as_deref(), &mut out),
        Command::Verify { transcript, golden } => commands::verify(&transcript, &golden, &mut out),
        Command::GenerateSeeds { out: dir, seed } => commands::generate_seeds(&dir, seed, &mut out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
