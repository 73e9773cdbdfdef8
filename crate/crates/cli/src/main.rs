use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eid_sim::config::Config;
use eid_sim::scenario::{run, Scenario};
use eid_sim::transport::Transcript;

/// Deterministic simulator of a derived eID token in a phone's secure element.
#[derive(Parser)]
#[command(name = "eid-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario seed. Falls back to the config's `seed`, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config path, or `default` for the bundled one.
    #[arg(long, default_value = "default")]
    config: String,
    /// Where to write the JSONL transcript.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Where to write the host's untrusted file store after the run.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attack {
    Sniff,
    #[value(alias = "relay-install")]
    Relay,
    RelayPersonalize,
}

#[derive(Subcommand)]
enum Command {
    /// Provision the SE and personalize the token.
    Init(Common),
    /// Initialize (unless disabled in the config) and authenticate to the offerer.
    Auth(Common),
    /// Run init and auth with an adversary on the host.
    Attack {
        #[arg(value_enum)]
        kind: Attack,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a scenario and compare with a recorded transcript.
    Replay {
        #[arg(long, default_value = "auth")]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "default")]
        config: String,
        /// The recorded transcript.
        #[arg(long)]
        transcript: PathBuf,
    },
}

const EXIT_IO: u8 = 1;
const EXIT_MISMATCH: u8 = 3;

fn load(config: &str) -> Result<Config, ExitCode> {
    Config::load(config).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_IO)
    })
}

fn simulate(scenario: Scenario, common: &Common) -> Result<ExitCode, ExitCode> {
    let config = load(&common.config)?;
    let seed = common.seed.or(config.seed).unwrap_or(0);
    let outcome = run(&config, seed, scenario);
    let io_err = |what: &str, e: std::io::Error| {
        eprintln!("error: cannot write {what}: {e}");
        ExitCode::from(EXIT_IO)
    };
    if let Some(path) = &common.transcript {
        std::fs::write(path, outcome.transcript.to_jsonl()).map_err(|e| io_err("transcript", e))?;
    }
    if let Some(path) = &common.store {
        outcome.world.store.save(path).map_err(|e| {
            eprintln!("error: cannot write store: {e}");
            ExitCode::from(EXIT_IO)
        })?;
    }
    let report = serde_json::to_string_pretty(&outcome.report).expect("serializable report");
    match &common.report {
        Some(path) => std::fs::write(path, report + "\n").map_err(|e| io_err("report", e))?,
        None => println!("{report}"),
    }
    Ok(ExitCode::from(outcome.report.status.exit_code() as u8))
}

fn replay(scenario: &str, seed: Option<u64>, config: &str, transcript: &PathBuf) -> Result<ExitCode, ExitCode> {
    let Some(scenario) = Scenario::parse(scenario) else {
        eprintln!("error: unknown scenario {scenario}");
        return Err(ExitCode::from(EXIT_IO));
    };
    let config = load(config)?;
    let text = std::fs::read_to_string(transcript).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", transcript.display());
        ExitCode::from(EXIT_IO)
    })?;
    let recorded = Transcript::parse_jsonl(&text).map_err(|e| {
        eprintln!("error: {}: {e}", transcript.display());
        ExitCode::from(EXIT_IO)
    })?;
    let seed = seed.or(config.seed).unwrap_or(0);
    let fresh = run(&config, seed, scenario).transcript;
    if fresh == recorded {
        println!("transcript matches ({} records)", recorded.records.len());
        return Ok(ExitCode::SUCCESS);
    }
    let first = fresh
        .records
        .iter()
        .zip(&recorded.records)
        .position(|(a, b)| a != b)
        .unwrap_or(fresh.records.len().min(recorded.records.len()));
    println!(
        "transcript differs at record {first} (recorded {}, replayed {})",
        recorded.records.len(),
        fresh.records.len()
    );
    Ok(ExitCode::from(EXIT_MISMATCH))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Init(c) => simulate(Scenario::Init, c),
        Command::Auth(c) => simulate(Scenario::Auth, c),
        Command::Attack { kind, common } => {
            let scenario = match kind {
                Attack::Sniff => Scenario::Sniff,
                Attack::Relay => Scenario::RelayInstall,
                Attack::RelayPersonalize => Scenario::RelayPersonalize,
            };
            simulate(scenario, common)
        }
        Command::Replay {
            scenario,
            seed,
            config,
            transcript,
        } => replay(scenario, *seed, config, transcript),
    };
    result.unwrap_or_else(|code| code)
}
