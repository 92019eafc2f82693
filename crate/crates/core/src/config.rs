//! Scenario files: everything a headless run needs, with the scene and
//! fiducials resolved relative to the file.

use crate::collision::Scene;
use crate::control_sim::{ControllerConfig, LinkFaults};
use crate::planning::{MotionLimits, PlannerConfig, SetupObjectiveWeights, SetupOptions, TeleopOptions};
use crate::safety::FaultReason;
use crate::service::{RobotConfig, ScriptStep, SessionConfig, SessionOptions, WorkflowStep};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Schema problem, with the dotted key path of the offending value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: PathBuf,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() || self.key == "." {
            write!(f, "{}: {}", self.file.display(), self.message)
        } else {
            write!(f, "{}: at `{}`: {}", self.file.display(), self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn new(file: &Path, key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            file: file.to_path_buf(),
            key: key.into(),
            message: message.into(),
        }
    }
}

/// Reads `path` as `T`, reporting the key path on schema errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path, "", format!("cannot read: {e}")))?;
    parse_json(path, &text)
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::new(path, key, e.into_inner().to_string())
    })
}

/// Points given inline or as a path to a JSON array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Points {
    Inline(Vec<[f64; 3]>),
    File(PathBuf),
}

/// What a scripted run must end with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expectation {
    pub final_state: Option<WorkflowStep>,
    /// Controller faults the run must record, in order.
    pub faults: Vec<FaultReason>,
}

/// How the session reaches its controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkSpec {
    /// Same thread, no transport.
    Direct,
    /// Controller thread behind a local stream socket.
    Pipe,
    /// Remote controller over TCP.
    Tcp(String),
}

impl std::str::FromStr for LinkSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(LinkSpec::Direct),
            "pipe" => Ok(LinkSpec::Pipe),
            _ => match s.strip_prefix("tcp:") {
                Some(addr) if !addr.is_empty() => Ok(LinkSpec::Tcp(addr.into())),
                _ => Err(format!("unknown link `{s}`, expected direct, pipe or tcp:<addr>")),
            },
        }
    }
}

impl fmt::Display for LinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkSpec::Direct => f.write_str("direct"),
            LinkSpec::Pipe => f.write_str("pipe"),
            LinkSpec::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

impl Serialize for LinkSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinkSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn default_link() -> LinkSpec {
    LinkSpec::Direct
}

fn default_max_duration() -> f64 {
    120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub robot: RobotConfig,
    /// Scene JSON, relative to the scenario file.
    pub scene: PathBuf,
    /// Scene fiducials measured in the robot frame. Absent means the two
    /// frames coincide.
    #[serde(default)]
    pub robot_fiducials: Option<Points>,
    #[serde(default)]
    pub weights: SetupObjectiveWeights,
    #[serde(default)]
    pub setup: SetupOptions,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub motion_limits: MotionLimits,
    #[serde(default)]
    pub teleop: TeleopOptions,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub faults: LinkFaults,
    #[serde(default)]
    pub session: SessionOptions,
    /// Seeds the session and, when set, replaces the setup and planner seeds.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_link")]
    pub link: LinkSpec,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
    #[serde(default)]
    pub expect: Expectation,
    /// Virtual-time budget for the scripted run.
    #[serde(default = "default_max_duration")]
    pub max_duration_s: f64,
}

/// A loaded scenario with its resolved session configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: PathBuf,
    pub config: ScenarioConfig,
    pub session: SessionConfig,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = load_json(path)?;
        Self::resolve(path, config, None)
    }

    /// Builds the session configuration. `scene_override` replaces the
    /// scenario's scene file.
    pub fn resolve(file: &Path, config: ScenarioConfig, scene_override: Option<&Path>) -> Result<Self, ConfigError> {
        let base = file.parent().unwrap_or(Path::new("."));
        let scene_path = match scene_override {
            Some(p) => p.to_path_buf(),
            None => base.join(&config.scene),
        };
        let scene: Scene = load_json(&scene_path).map_err(|e| ConfigError {
            key: prefixed("scene", &e.key),
            ..e
        })?;
        let robot_fiducials = match &config.robot_fiducials {
            None => scene.fiducials.clone(),
            Some(Points::Inline(p)) => p.clone(),
            Some(Points::File(p)) => load_json(&base.join(p)).map_err(|e| ConfigError {
                key: prefixed("robot_fiducials", &e.key),
                ..e
            })?,
        };
        if !(config.max_duration_s.is_finite() && config.max_duration_s > 0.0) {
            return Err(ConfigError::new(file, "max_duration_s", "must be positive"));
        }
        let mut s = SessionConfig::new(scene, robot_fiducials);
        s.robot = config.robot;
        s.weights = config.weights;
        s.setup = config.setup;
        s.planner = config.planner;
        s.motion_limits = config.motion_limits;
        s.teleop = config.teleop;
        s.controller = config.controller.clone();
        s.faults = config.faults.clone();
        s.session = config.session;
        let mut out = Self {
            file: file.to_path_buf(),
            config,
            session: s,
        };
        if let Some(seed) = out.config.seed {
            out.set_seed(seed);
        }
        out.session.validate().map_err(|msg| {
            let (key, message) = msg.split_once(": ").unwrap_or(("", &msg));
            ConfigError::new(file, key, message)
        })?;
        Ok(out)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = Some(seed);
        self.session.seed = seed;
        self.session.setup.seed = seed;
        self.session.planner.seed = seed;
    }

    /// Virtual-time budget in ticks.
    pub fn max_ticks(&self) -> u64 {
        (self.config.max_duration_s * 1e3).ceil() as u64
    }
}

fn prefixed(head: &str, key: &str) -> String {
    if key.is_empty() || key == "." {
        head.into()
    } else {
        format!("{head}.{key}")
    }
}
