//! Serves a built-in environment over the bridge protocol on stdio (or one
//! TCP connection). Used as the reference remote in conformance runs; the
//! `--sabotage` modes break one contract each on purpose.

use std::io::{stdin, stdout, BufReader};
use std::net::TcpListener;

use anyhow::{anyhow, Context};
use clap::Parser;
use loopstage_core::bridge::sabotage::Sabotage;
use loopstage_core::bridge::{serve, serve_tcp};
use loopstage_core::env::{make_env, EnvSpec};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "loopstage-remote-env", version)]
struct Args {
    /// Built-in environment id.
    #[arg(long, default_value = "grid_maze")]
    env: String,
    /// Constructor parameter `key=value`; values parse as JSON when they can.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// One of nondeterministic-reset, steps-after-end, accepts-invalid-actions.
    #[arg(long)]
    sabotage: Option<String>,
    /// Accept a single TCP connection here instead of using stdio.
    #[arg(long)]
    listen: Option<String>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut spec = EnvSpec::new(&args.env);
    for p in &args.params {
        let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("--param expects KEY=VALUE, got `{p}`"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        spec.params.insert(k.to_string(), value);
    }
    let mut env = make_env(&spec).with_context(|| format!("building `{}`", args.env))?;
    if let Some(name) = &args.sabotage {
        let s = Sabotage::parse(name).ok_or_else(|| anyhow!("unknown sabotage `{name}`"))?;
        env = s.wrap(env);
    }
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(env, &listener)?;
        }
        None => serve(env, BufReader::new(stdin().lock()), stdout().lock())?,
    }
    Ok(())
}
