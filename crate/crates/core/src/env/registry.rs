use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::time::Duration;

use crate::bridge::{BridgeHandle, BridgeOptions};

use super::{
    coverage, dst, CoverageTeam, DeepSeaTreasure, DstFixture, EchoEnv, EnvError, Environment, GridMaze, MountainCar,
    DEFAULT_DST_FIXTURE,
};

/// Environment served by an out-of-process remote over the bridge.
pub const EXTERNAL_ENV: &str = "external";

pub const KNOWN_ENVS: [&str; 5] = ["grid_maze", "mountain_car", "coverage_team", "deep_sea_treasure", "echo"];

/// Environment id plus constructor parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl EnvSpec {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    fn uint(&self, key: &str, default: Option<u64>) -> Result<u64, EnvError> {
        match self.params.get(key) {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| EnvError::Config(format!("env.params.{key} must be a non-negative integer"))),
            None => default.ok_or_else(|| EnvError::Config(format!("env.params.{key} is required"))),
        }
    }

    fn u32_param(&self, key: &str, default: Option<u64>) -> Result<u32, EnvError> {
        let v = self.uint(key, default)?;
        u32::try_from(v).map_err(|_| EnvError::Config(format!("env.params.{key} is too large")))
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), EnvError> {
        match self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(EnvError::Config(format!("unknown parameter env.params.{k} for `{}`", self.id))),
            None => Ok(()),
        }
    }
}

/// Builds an environment from its spec. Deep-sea-treasure fixtures are either
/// `"default"` (the bundled fixture) or a path to a `dst v1` file.
pub fn make_env(spec: &EnvSpec) -> Result<Box<dyn Environment>, EnvError> {
    match spec.id.as_str() {
        "grid_maze" => {
            spec.check_keys(&["width", "height", "layout_seed"])?;
            Ok(Box::new(GridMaze::new(
                spec.u32_param("width", Some(5))?,
                spec.u32_param("height", Some(5))?,
                spec.uint("layout_seed", Some(0))?,
            )?))
        }
        "mountain_car" => {
            spec.check_keys(&[])?;
            Ok(Box::new(MountainCar::new()))
        }
        "coverage_team" => {
            spec.check_keys(&["n", "k"])?;
            Ok(Box::new(CoverageTeam::new(
                spec.u32_param("n", Some(2))?,
                spec.u32_param("k", Some(u64::from(coverage::DEFAULT_GRID)))?,
            )?))
        }
        "deep_sea_treasure" => {
            spec.check_keys(&["fixture", "max_steps"])?;
            let fixture = match spec.params.get("fixture").map(|v| v.as_str()) {
                None | Some(Some("default")) => DstFixture::parse(DEFAULT_DST_FIXTURE)?,
                Some(Some(path)) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| EnvError::Config(format!("cannot read dst fixture {path}: {e}")))?;
                    DstFixture::parse(&text)?
                }
                Some(None) => return Err(EnvError::Config("env.params.fixture must be a string".into())),
            };
            let max_steps = spec.u32_param("max_steps", Some(u64::from(dst::DEFAULT_MAX_STEPS)))?;
            Ok(Box::new(DeepSeaTreasure::new(fixture, max_steps)?))
        }
        "echo" => {
            spec.check_keys(&[])?;
            Ok(Box::new(EchoEnv::default()))
        }
        EXTERNAL_ENV => {
            spec.check_keys(&["command", "handshake_timeout_ms", "call_timeout_ms"])?;
            let command = spec
                .params
                .get("command")
                .and_then(Value::as_str)
                .ok_or_else(|| EnvError::Config("env.params.command must name the remote's launch command".into()))?;
            let defaults = BridgeOptions::default();
            let options = BridgeOptions {
                handshake_timeout: Duration::from_millis(
                    spec.uint("handshake_timeout_ms", Some(defaults.handshake_timeout.as_millis() as u64))?,
                ),
                call_timeout: Duration::from_millis(
                    spec.uint("call_timeout_ms", Some(defaults.call_timeout.as_millis() as u64))?,
                ),
            };
            Ok(Box::new(BridgeHandle::spawn(command, options)?))
        }
        other => Err(EnvError::Config(format!("unknown environment id `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_every_known_env() {
        for id in KNOWN_ENVS {
            let mut env = make_env(&EnvSpec::new(id)).unwrap();
            assert_eq!(env.env_id(), id);
            env.reset(1).unwrap();
            assert!(env.capabilities().validate().is_ok());
        }
    }

    #[test]
    fn rejects_unknown_ids_and_params() {
        assert!(make_env(&EnvSpec::new("minecraft")).is_err());
        assert!(make_env(&EnvSpec::new("grid_maze").with("depth", 3)).is_err());
        assert!(make_env(&EnvSpec::new("grid_maze").with("width", "wide")).is_err());
    }
}
