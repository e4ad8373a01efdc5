use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand};
use loopstage_core::agents::{enumerate_pareto_front, select_by_utility};
use loopstage_core::bridge::{conformance_suite, BridgeHandle, BridgeOptions};
use loopstage_core::config::{parse_experiment, verify_completion_code};
use loopstage_core::env::{make_env, EnvSpec};
use loopstage_core::hash::{canonical_of, hex64};
use loopstage_core::store::{export_trajectories_for, read_log, replay};
use loopstage_server::{AppState, ServerConfig};

#[derive(Parser)]
#[command(name = "loopstage", version, about = "Human-in-the-loop RL experiment server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the session server.
    Serve {
        #[arg(long, default_value = "loopstage.toml")]
        config: PathBuf,
    },
    /// Parse and validate an experiment definition.
    Validate { experiment: PathBuf },
    /// Re-execute a session log and compare every state hash.
    Replay {
        log: PathBuf,
        /// Print only the verdict instead of every recomputed hash.
        #[arg(long)]
        verify: bool,
    },
    /// Export per-episode trajectories from a session log as JSON lines.
    Export {
        log: PathBuf,
        #[arg(long, required = true)]
        trajectories: bool,
        /// Environment controller whose view is exported.
        #[arg(long, default_value_t = 0)]
        controller: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate the Pareto front of a deep-sea-treasure fixture.
    Pareto {
        /// `default` or a path to a `dst v1` fixture file.
        #[arg(long, default_value = "default")]
        fixture: String,
        #[arg(long, default_value_t = 25)]
        horizon: u32,
        /// Comma-separated utility weights; prints the preferred entry.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Run the conformance suite against a remote environment.
    BridgeCheck {
        /// Shell command that launches the remote on stdio.
        #[arg(long)]
        cmd: String,
        #[arg(long, default_value_t = 5000)]
        handshake_timeout_ms: u64,
        #[arg(long, default_value_t = 2000)]
        call_timeout_ms: u64,
    },
    /// Check a participant's completion code.
    VerifyCode {
        #[arg(long)]
        study: String,
        #[arg(long)]
        pid: String,
        #[arg(long)]
        code: String,
        /// Secret from the experiment's recruitment section.
        #[arg(long, env = "LOOPSTAGE_COMPLETION_SECRET")]
        secret: String,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` is a clean negative verdict (exit 1); errors exit 2.
fn run(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Serve { config } => {
            let cfg = ServerConfig::load(&config)?;
            let experiments = cfg.load_experiments()?;
            let state = AppState::new(cfg, experiments)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(loopstage_server::serve(state))?;
            Ok(true)
        }
        Command::Validate { experiment } => {
            let text = std::fs::read_to_string(&experiment).with_context(|| format!("reading {}", experiment.display()))?;
            match parse_experiment(&text) {
                Ok(def) => {
                    println!("ok {} {}", def.study_id, def.experiment_hash());
                    Ok(true)
                }
                Err(e) => {
                    println!("{e}");
                    Ok(false)
                }
            }
        }
        Command::Replay { log, verify } => {
            let file = match read_log(&log).with_context(|| format!("reading {}", log.display()))? {
                Ok(f) => f,
                Err(e) => {
                    println!("FAIL {}: corrupt log: {e}", log.display());
                    return Ok(false);
                }
            };
            match replay(&file) {
                Ok(report) => {
                    if !verify {
                        for (tick, digest) in &report.hashes {
                            println!("{tick}\t{}", hex64(*digest));
                        }
                    }
                    let tail = if report.truncated { " (log ends mid-group)" } else { "" };
                    println!(
                        "OK {}: {} events, {} state hashes agree{tail}",
                        report.session_id,
                        report.events_checked,
                        report.hashes.len()
                    );
                    Ok(true)
                }
                Err(e) => {
                    println!("FAIL {}: {e}", file.header.session_id);
                    Ok(false)
                }
            }
        }
        Command::Export {
            log,
            trajectories: _,
            controller,
            out,
        } => {
            let file = read_log(&log).with_context(|| format!("reading {}", log.display()))??;
            let list = export_trajectories_for(&file, controller)?;
            let mut sink: Box<dyn Write> = match &out {
                Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout().lock()),
            };
            for t in &list {
                writeln!(sink, "{}", canonical_of(t))?;
            }
            eprintln!("exported {} trajectories", list.len());
            Ok(true)
        }
        Command::Pareto {
            fixture,
            horizon,
            weights,
        } => {
            let mut env = make_env(&EnvSpec::new("deep_sea_treasure").with("fixture", fixture))?;
            env.reset(0)?;
            let front = enumerate_pareto_front(env.as_ref(), horizon)?;
            match weights {
                Some(w) => {
                    let best = select_by_utility(&front, &w)?;
                    println!("{}", canonical_of(best));
                }
                None => print!("{}", front.to_tsv()),
            }
            Ok(true)
        }
        Command::BridgeCheck {
            cmd,
            handshake_timeout_ms,
            call_timeout_ms,
        } => {
            let options = BridgeOptions {
                handshake_timeout: Duration::from_millis(handshake_timeout_ms),
                call_timeout: Duration::from_millis(call_timeout_ms),
            };
            let mut handle = match BridgeHandle::spawn(&cmd, options) {
                Ok(h) => h,
                Err(e) => {
                    println!("FAIL handshake: {e}");
                    return Ok(false);
                }
            };
            println!("PASS handshake: remote `{}`", loopstage_core::env::Environment::env_id(&handle));
            let report = conformance_suite(&mut handle);
            print!("{report}");
            Ok(report.passed())
        }
        Command::VerifyCode {
            study,
            pid,
            code,
            secret,
        } => {
            let ok = verify_completion_code(&code, &study, &pid, &secret);
            println!("{}", if ok { "valid" } else { "invalid" });
            Ok(ok)
        }
    }
}
