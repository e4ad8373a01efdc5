//! Remote side of the bridge: serves any [`Environment`] over a line stream.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;

use serde_json::Value;

use super::{Frame, RemoteError, Request, Response, BRIDGE_PROTOCOL_VERSION};
use crate::env::{EnvError, Environment};

/// Answers requests until `Close` or end of input. Each request gets exactly
/// one response carrying its id; a line that is not a request frame is
/// answered with an `EnvError` when its id can be read and skipped otherwise.
pub fn serve(mut env: Box<dyn Environment>, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame<Request> = match serde_json::from_str(&line) {
            Ok(f) => f,
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64));
                match id {
                    Some(id) => {
                        let err = RemoteError {
                            code: "bad_request".into(),
                            message: e.to_string(),
                            controller: None,
                        };
                        write(&mut output, Frame::new(id, Response::EnvError(err)))?;
                    }
                    None => tracing::warn!(error = %e, "skipping unreadable bridge line"),
                }
                continue;
            }
        };
        let response = match frame.body {
            Request::Close => return Ok(()),
            Request::Hello { protocol_version } if protocol_version != BRIDGE_PROTOCOL_VERSION => {
                Response::EnvError(RemoteError {
                    code: "version".into(),
                    message: format!("remote speaks version {BRIDGE_PROTOCOL_VERSION}"),
                    controller: None,
                })
            }
            Request::Hello { .. } => Response::HelloAck {
                env_id: env.env_id().to_string(),
                capabilities: env.capabilities().clone(),
                extensions: Vec::new(),
            },
            Request::Reset { seed } => env
                .reset(seed)
                .map(|observations| Response::ResetResult {
                    observations,
                    snapshot: Some(env.snapshot()),
                })
                .unwrap_or_else(env_error),
            Request::Step {
                joint_action,
                intentions,
            } => intentions
                .iter()
                .enumerate()
                .try_for_each(|(c, t)| env.declare_intention(c, *t))
                .and_then(|()| env.step(&joint_action))
                .map(|outcome| Response::StepResult {
                    outcome,
                    snapshot: Some(env.snapshot()),
                })
                .unwrap_or_else(env_error),
            Request::Render => env
                .render()
                .map(|frame| Response::RenderResult { frame })
                .unwrap_or_else(env_error),
        };
        write(&mut output, Frame::new(frame.id, response))?;
    }
    Ok(())
}

fn env_error(e: EnvError) -> Response {
    Response::EnvError(RemoteError::from_env(&e))
}

fn write(out: &mut impl Write, frame: Frame<Response>) -> io::Result<()> {
    out.write_all(frame.to_line().as_bytes())?;
    out.flush()
}

/// Accepts one connection on `listener` and serves it.
pub fn serve_tcp(env: Box<dyn Environment>, listener: &TcpListener) -> io::Result<()> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    serve(env, reader, stream)
}
