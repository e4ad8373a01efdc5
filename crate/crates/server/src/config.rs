//! Server configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use loopstage_core::config::{parse_experiment, ExperimentDef};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    /// Session logs go here, one `<session_id>.jsonl` per session.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Participant UI bundle served at `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    /// Bearer token for `/admin`. Without one the admin API only answers
    /// loopback peers.
    #[serde(default)]
    pub admin_token: Option<String>,
    /// Seeds session ids, join tokens and default master seeds. Random when
    /// absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Seed for condition assignment, so a participant id always maps to the
    /// same condition.
    #[serde(default)]
    pub assignment_seed: u64,
    /// Experiment definition files, relative to the config file.
    #[serde(default)]
    pub experiments: Vec<PathBuf>,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            data_dir: default_data_dir(),
            static_dir: None,
            admin_token: None,
            seed: None,
            assignment_seed: 0,
            experiments: Vec::new(),
        }
    }
}

impl ServerConfig {
    /// Reads the config and resolves its relative paths against the config
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: ServerConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.data_dir = resolve(&cfg.data_dir);
        cfg.static_dir = cfg.static_dir.as_deref().map(resolve);
        cfg.experiments = cfg.experiments.iter().map(|p| resolve(p)).collect();
        Ok(cfg)
    }

    /// Parses and validates every configured experiment.
    pub fn load_experiments(&self) -> anyhow::Result<Vec<ExperimentDef>> {
        self.experiments
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_experiment(&text).with_context(|| format!("experiment {}", p.display()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(
            &path,
            "bind = \"0.0.0.0:9000\"\ndata_dir = \"logs\"\nexperiments = [\"a.toml\", \"/abs/b.toml\"]\n",
        )
        .unwrap();
        let cfg = ServerConfig::load(&path).unwrap();
        assert_eq!(cfg.bind.port(), 9000);
        assert_eq!(cfg.data_dir, dir.path().join("logs"));
        assert_eq!(cfg.experiments, [dir.path().join("a.toml"), PathBuf::from("/abs/b.toml")]);
        assert!(cfg.admin_token.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ServerConfig>("bnd = \"x\"").is_err());
    }
}
