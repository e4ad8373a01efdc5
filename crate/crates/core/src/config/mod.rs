//! Declarative experiment definitions.
//!
//! An experiment is one TOML document. Defaults are materialized on parse,
//! so the canonical form (see [`ExperimentDef::to_toml`]) lists every field.
//! Condition overlays are dotted paths into that canonical tree and may only
//! replace values that already exist there.

mod recruit;

/// The shipped use-case experiments.
pub mod fixtures {
    pub const REWARD_ANNOTATION: &str = include_str!("../../fixtures/experiments/reward_annotation.toml");
    pub const DELEGATION: &str = include_str!("../../fixtures/experiments/delegation.toml");
    pub const TEAMING: &str = include_str!("../../fixtures/experiments/teaming.toml");
    pub const UTILITY_ELICITATION: &str = include_str!("../../fixtures/experiments/utility_elicitation.toml");

    pub const ALL: [(&str, &str); 4] = [
        ("reward_annotation", REWARD_ANNOTATION),
        ("delegation", DELEGATION),
        ("teaming", TEAMING),
        ("utility_elicitation", UTILITY_ELICITATION),
    ];
}

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::builtin;
use crate::env::{make_env, Action, ActionSpace, EnvCapabilities, EnvSpec};
use crate::hash::canonical_json;
use crate::protocol::{ControllerKind, Widget};

pub use recruit::{
    assign_condition, mint_completion_code, mint_join_token, verify_completion_code, verify_join_token,
    COMPLETION_CODE_LEN,
};

pub const DEFAULT_DEADLINE_MS: u64 = 10_000;
pub const REDACTED: &str = "<redacted>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleDef {
    pub name: String,
    pub controller_kind: ControllerKind,
    /// Environment controller index this role acts for; observers have none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<u32>,
    /// Substituted when the role's controller misses the tick deadline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_action: Option<Action>,
    #[serde(default = "default_deadline")]
    pub action_deadline_ms: u64,
}

fn default_deadline() -> u64 {
    DEFAULT_DEADLINE_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDef {
    pub algorithm: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDef {
    pub name: String,
    pub senders: Vec<String>,
    pub receivers: Vec<String>,
    /// Allowed messages; absent means free text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<Vec<String>>,
    #[serde(default = "default_max_len")]
    pub max_len: u32,
}

fn default_max_len() -> u32 {
    280
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationDef {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_window")]
    pub window_ms: u64,
    /// Agent role whose learner receives the shaped reward.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

fn default_beta() -> f64 {
    0.5
}

fn default_window() -> u64 {
    crate::agents::DEFAULT_WINDOW_MS
}

impl Default for AnnotationDef {
    fn default() -> Self {
        Self {
            enabled: false,
            beta: default_beta(),
            window_ms: default_window(),
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceDef {
    #[serde(default)]
    pub enabled: bool,
    /// Fit a Bradley-Terry reward model from adjacent-rank pairs.
    #[serde(default)]
    pub fit_reward_model: bool,
    #[serde(default = "default_fit_steps")]
    pub fit_steps: u32,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Attach rendered frames to each trajectory item.
    #[serde(default)]
    pub include_frames: bool,
}

fn default_fit_steps() -> u32 {
    500
}

fn default_learning_rate() -> f64 {
    0.5
}

impl Default for PreferenceDef {
    fn default() -> Self {
        Self {
            enabled: false,
            fit_reward_model: false,
            fit_steps: default_fit_steps(),
            learning_rate: default_learning_rate(),
            include_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecruitmentBinding {
    /// Query parameters the entry URL must carry.
    #[serde(default = "default_entry_params")]
    pub entry_params: Vec<String>,
    pub completion_secret: String,
    /// Completion URL; `{CODE}` is replaced by the participant's code.
    pub redirect_template: String,
}

fn default_entry_params() -> Vec<String> {
    vec!["study".into(), "pid".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDef {
    pub study_id: String,
    #[serde(default = "default_episodes")]
    pub episodes: u32,
    #[serde(default = "default_pause")]
    pub inter_episode_pause_ms: u64,
    #[serde(default = "default_max_session")]
    pub max_session_ms: u64,
    /// Tick period when no human must act; 0 releases such ticks at once.
    #[serde(default)]
    pub tick_interval_ms: u64,
    pub env: EnvSpec,
    pub roles: Vec<RoleDef>,
    #[serde(default)]
    pub agents: BTreeMap<String, AgentDef>,
    #[serde(default)]
    pub channels: Vec<ChannelDef>,
    #[serde(default)]
    pub ui_widgets: BTreeMap<String, Vec<Widget>>,
    #[serde(default)]
    pub annotation: AnnotationDef,
    #[serde(default)]
    pub preferences: PreferenceDef,
    #[serde(default)]
    pub conditions: BTreeMap<String, BTreeMap<String, Value>>,
    pub recruitment: RecruitmentBinding,
}

fn default_episodes() -> u32 {
    10
}

fn default_pause() -> u64 {
    5_000
}

fn default_max_session() -> u64 {
    60 * 60 * 1000
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} validation error(s): {}", .0.len(), .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationIssue>),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
}

impl ConfigError {
    pub fn issues(&self) -> &[ValidationIssue] {
        match self {
            ConfigError::Validation(v) => v,
            _ => &[],
        }
    }
}

/// Parses and fully validates an experiment, including every condition.
pub fn parse_experiment(text: &str) -> Result<ExperimentDef, ConfigError> {
    let de = toml::Deserializer::new(text);
    let def: ExperimentDef = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path == "." {
            ConfigError::Parse(msg)
        } else {
            ConfigError::Parse(format!("{path}: {msg}"))
        }
    })?;
    def.validate()?;
    Ok(def)
}

impl ExperimentDef {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment definitions serialize to TOML")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("experiment definitions serialize to JSON")
    }

    /// Copy safe to log: the completion secret is replaced by a marker.
    pub fn redacted(&self) -> Self {
        let mut def = self.clone();
        def.recruitment.completion_secret = REDACTED.into();
        def
    }

    /// SHA-256 (hex) of the canonical JSON of the redacted definition.
    pub fn experiment_hash(&self) -> String {
        let text = canonical_json(&self.redacted().to_value());
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn role(&self, name: &str) -> Option<&RoleDef> {
        self.roles.iter().find(|r| r.name == name)
    }

    pub fn human_roles(&self) -> impl Iterator<Item = &RoleDef> {
        self.roles.iter().filter(|r| r.controller_kind == ControllerKind::Human)
    }

    pub fn widgets(&self, role: &str) -> Vec<Widget> {
        self.ui_widgets.get(role).cloned().unwrap_or_default()
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelDef> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// Applies dotted-path overrides to the canonical tree. Every path must
    /// already exist; the result is re-validated. Conditions are dropped
    /// from the result.
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, Value)>,
    ) -> Result<ExperimentDef, ConfigError> {
        let mut tree = self.to_value();
        let mut issues = Vec::new();
        for (path, value) in overrides {
            if let Err(m) = set_path(&mut tree, path, value) {
                issues.push(ValidationIssue {
                    path: path.to_string(),
                    message: m,
                });
            }
        }
        if !issues.is_empty() {
            return Err(ConfigError::Validation(issues));
        }
        if let Some(obj) = tree.as_object_mut() {
            obj.insert("conditions".into(), Value::Object(Default::default()));
        }
        let def: ExperimentDef = serde_path_to_error::deserialize(tree).map_err(|e| {
            ConfigError::Validation(vec![ValidationIssue {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            }])
        })?;
        def.validate()?;
        Ok(def)
    }

    /// The definition with condition `name` applied.
    pub fn for_condition(&self, name: &str) -> Result<ExperimentDef, ConfigError> {
        let overlay = self
            .conditions
            .get(name)
            .ok_or_else(|| ConfigError::UnknownCondition(name.into()))?;
        self.with_overrides(overlay.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        self.collect_issues(&mut issues);
        for (name, overlay) in &self.conditions {
            let prefix = format!("conditions.{name}");
            if overlay.contains_key("conditions") || overlay.keys().any(|k| k.starts_with("conditions.")) {
                issues.push(issue(&prefix, "overlays cannot modify conditions"));
                continue;
            }
            match self.with_overrides(overlay.iter().map(|(k, v)| (k.as_str(), v.clone()))) {
                Ok(_) => {}
                Err(ConfigError::Validation(inner)) => issues.extend(inner.into_iter().map(|i| ValidationIssue {
                    path: format!("{prefix}.{}", i.path),
                    message: i.message,
                })),
                Err(other) => issues.push(issue(&prefix, &other.to_string())),
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(issues))
        }
    }

    fn collect_issues(&self, out: &mut Vec<ValidationIssue>) {
        if self.study_id.trim().is_empty() {
            out.push(issue("study_id", "must not be empty"));
        }
        if self.episodes == 0 {
            out.push(issue("episodes", "must be at least 1"));
        }
        if self.max_session_ms == 0 {
            out.push(issue("max_session_ms", "must be positive"));
        }
        let caps: Option<EnvCapabilities> = match make_env(&self.env) {
            Ok(env) => Some(env.capabilities().clone()),
            Err(e) => {
                out.push(issue("env", &e.to_string()));
                None
            }
        };
        self.check_roles(caps.as_ref(), out);
        self.check_agents(caps.as_ref(), out);
        self.check_channels(out);
        self.check_widgets(out);
        self.check_annotation(out);
        self.check_recruitment(out);
    }

    fn check_roles(&self, caps: Option<&EnvCapabilities>, out: &mut Vec<ValidationIssue>) {
        if self.roles.is_empty() {
            out.push(issue("roles", "at least one role is required"));
        }
        if self.human_roles().next().is_none() {
            out.push(issue("roles", "at least one human role is required"));
        }
        let mut names = BTreeSet::new();
        let mut controlled: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, role) in self.roles.iter().enumerate() {
            let path = format!("roles[{i}]");
            if role.name.is_empty() || !role.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                out.push(issue(&format!("{path}.name"), "must be a non-empty [A-Za-z0-9_-] identifier"));
            }
            if !names.insert(role.name.as_str()) {
                out.push(issue(&format!("{path}.name"), &format!("duplicate role name `{}`", role.name)));
            }
            if role.action_deadline_ms == 0 {
                out.push(issue(&format!("{path}.action_deadline_ms"), "must be positive"));
            }
            match (role.controls, caps) {
                (Some(c), Some(caps)) => {
                    if c >= caps.num_controllers {
                        out.push(issue(
                            &format!("{path}.controls"),
                            &format!("controller {c} does not exist ({} controllers)", caps.num_controllers),
                        ));
                        continue;
                    }
                    *controlled.entry(c).or_default() += 1;
                    let space = &caps.action_spaces[c as usize];
                    match &role.default_action {
                        None => out.push(issue(
                            &format!("{path}.default_action"),
                            "required for roles that control the environment",
                        )),
                        Some(a) => {
                            if let Err(m) = space.check(a) {
                                out.push(issue(
                                    &format!("{path}.default_action"),
                                    &format!("not in action space: {m}"),
                                ));
                            }
                        }
                    }
                }
                (None, _) => {
                    if role.default_action.is_some() {
                        out.push(issue(
                            &format!("{path}.default_action"),
                            "only roles that control the environment take a default action",
                        ));
                    }
                }
                _ => {}
            }
        }
        if let Some(caps) = caps {
            for c in 0..caps.num_controllers {
                match controlled.get(&c) {
                    None => out.push(issue("roles", &format!("no role controls environment controller {c}"))),
                    Some(n) if *n > 1 => out.push(issue("roles", &format!("controller {c} is controlled by {n} roles"))),
                    _ => {}
                }
            }
        }
    }

    fn check_agents(&self, caps: Option<&EnvCapabilities>, out: &mut Vec<ValidationIssue>) {
        for (i, role) in self.roles.iter().enumerate() {
            if role.controller_kind == ControllerKind::Agent && !self.agents.contains_key(&role.name) {
                out.push(issue(
                    &format!("agents.{}.algorithm", role.name),
                    &format!("agent role roles[{i}] `{}` has no algorithm", role.name),
                ));
            }
        }
        for (name, agent) in &self.agents {
            let path = format!("agents.{name}");
            let Some(role) = self.role(name) else {
                out.push(issue(&path, "does not name a declared role"));
                continue;
            };
            if role.controller_kind != ControllerKind::Agent {
                out.push(issue(&path, "role is not an agent role"));
                continue;
            }
            if let Some(caps) = caps {
                for (field, message) in builtin::validate_agent(agent, role, caps, self) {
                    let p = if field.is_empty() { path.clone() } else { format!("{path}.{field}") };
                    out.push(issue(&p, &message));
                }
            }
        }
    }

    fn check_channels(&self, out: &mut Vec<ValidationIssue>) {
        let mut names = BTreeSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            let path = format!("channels[{i}]");
            if !names.insert(ch.name.as_str()) {
                out.push(issue(&format!("{path}.name"), &format!("duplicate channel `{}`", ch.name)));
            }
            for (field, list) in [("senders", &ch.senders), ("receivers", &ch.receivers)] {
                if list.is_empty() {
                    out.push(issue(&format!("{path}.{field}"), "must not be empty"));
                }
                for (j, r) in list.iter().enumerate() {
                    if self.role(r).is_none() {
                        out.push(issue(&format!("{path}.{field}[{j}]"), &format!("unknown role `{r}`")));
                    }
                }
            }
            if ch.max_len == 0 {
                out.push(issue(&format!("{path}.max_len"), "must be positive"));
            }
            if let Some(alpha) = &ch.alphabet {
                if alpha.is_empty() {
                    out.push(issue(&format!("{path}.alphabet"), "must not be empty when present"));
                }
                if let Some(s) = alpha.iter().find(|s| s.chars().count() > ch.max_len as usize) {
                    out.push(issue(&format!("{path}.alphabet"), &format!("symbol `{s}` exceeds max_len")));
                }
            }
        }
    }

    fn check_widgets(&self, out: &mut Vec<ValidationIssue>) {
        for (role_name, widgets) in &self.ui_widgets {
            let path = format!("ui_widgets.{role_name}");
            let Some(role) = self.role(role_name) else {
                out.push(issue(&path, "does not name a declared role"));
                continue;
            };
            if role.controller_kind != ControllerKind::Human {
                out.push(issue(&path, "widgets are only granted to human roles"));
            }
            for w in widgets {
                let problem = match w {
                    Widget::RewardButtons if !self.annotation.enabled => Some("reward_buttons requires annotation.enabled"),
                    Widget::RankingView if !self.preferences.enabled => Some("ranking_view requires preferences.enabled"),
                    Widget::Chat
                        if !self
                            .channels
                            .iter()
                            .any(|c| c.senders.contains(role_name) || c.receivers.contains(role_name)) =>
                    {
                        Some("chat requires a channel the role sends or receives on")
                    }
                    _ => None,
                };
                if let Some(m) = problem {
                    out.push(issue(&path, m));
                }
            }
        }
    }

    fn check_annotation(&self, out: &mut Vec<ValidationIssue>) {
        let a = &self.annotation;
        if !(a.beta >= 0.0 && a.beta.is_finite()) {
            out.push(issue("annotation.beta", "must be a finite non-negative number"));
        }
        if a.window_ms == 0 {
            out.push(issue("annotation.window_ms", "must be positive"));
        }
        if !a.enabled {
            return;
        }
        match &a.target {
            None => out.push(issue("annotation.target", "required when annotation is enabled")),
            Some(t) => match self.agents.get(t) {
                Some(agent) if builtin::accepts_annotations(&agent.algorithm) => {}
                Some(agent) => out.push(issue(
                    "annotation.target",
                    &format!("algorithm `{}` does not learn from annotations", agent.algorithm),
                )),
                None => out.push(issue("annotation.target", &format!("`{t}` is not an agent role"))),
            },
        }
    }

    fn check_recruitment(&self, out: &mut Vec<ValidationIssue>) {
        let r = &self.recruitment;
        if r.completion_secret.is_empty() {
            out.push(issue("recruitment.completion_secret", "must not be empty"));
        }
        if !r.redirect_template.contains("{CODE}") {
            out.push(issue("recruitment.redirect_template", "must contain the {CODE} placeholder"));
        }
        if !r.entry_params.iter().any(|p| p == "pid") {
            out.push(issue("recruitment.entry_params", "must include `pid`"));
        }
    }

    /// Action space of the env controller `role` acts for.
    pub fn action_space_of(&self, role: &str, caps: &EnvCapabilities) -> Option<ActionSpace> {
        let c = self.role(role)?.controls?;
        caps.action_spaces.get(c as usize).cloned()
    }
}

fn issue(path: &str, message: &str) -> ValidationIssue {
    ValidationIssue {
        path: path.into(),
        message: message.into(),
    }
}

/// Replaces the value at a dotted path; numeric segments index arrays.
fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<(), String> {
    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let slot = match node {
            Value::Object(map) => map.get_mut(*seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        let Some(slot) = slot else {
            return Err(format!("`{}` is not a declared key", segments[..=i].join(".")));
        };
        if last {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err("empty path".into())
}
