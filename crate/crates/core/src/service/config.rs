//! Node and experiment configuration: TOML files plus `TRIAD_*`
//! environment overrides.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::calibration::CalibrationParams;
use crate::guard::GuardConfig;
use crate::host::Backend;
use crate::node::NodeParams;
use crate::time::{NodeId, ResolutionUnit};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Optional calibration overrides; unset fields keep the defaults.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub l_ms: Option<u64>,
    pub pp_ms: Option<u64>,
    pub rtt_max_ms: Option<u64>,
    pub duration_ms: Option<u64>,
    pub echo_rounds: Option<u32>,
    pub ops_window_ms: Option<u64>,
    /// Allowed spread of the held-round ratios. Raise it where round-trip
    /// jitter is a sizeable fraction of a round.
    pub max_spread_ppm: Option<u32>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GuardSection {
    pub rate_threshold: Option<f64>,
    pub memory_check: Option<bool>,
    pub window_ms: Option<u64>,
    pub period_ms: Option<u64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: NodeId,
    pub listen: SocketAddr,
    /// Peer id to address.
    #[serde(deserialize_with = "peer_table")]
    pub peers: BTreeMap<NodeId, SocketAddr>,
    pub external: SocketAddr,
    pub key_file: PathBuf,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_resolution")]
    pub resolution_nanos: u64,
    /// Gaps between polls longer than this count as exits (real backend).
    #[serde(default = "default_watchdog")]
    pub watchdog_gap_ms: u64,
    /// Optional CSV trace of node events.
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub guard: GuardSection,
}

/// TOML keys are strings; peer ids are numbers.
fn peer_table<'de, D>(d: D) -> Result<BTreeMap<NodeId, SocketAddr>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw = BTreeMap::<String, SocketAddr>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse()
                .map(|id| (id, v))
                .map_err(|_| serde::de::Error::custom(format!("bad peer id {k:?}")))
        })
        .collect()
}

fn default_backend() -> Backend {
    Backend::Real
}

fn default_resolution() -> u64 {
    1
}

fn default_watchdog() -> u64 {
    5
}

fn parse_env<T: std::str::FromStr>(var: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match std::env::var(var) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e: T::Err| ConfigError::Env {
                var: var.into(),
                message: e.to_string(),
            }),
        Err(_) => Ok(None),
    }
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.into(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        // Relative paths are relative to the config file.
        if let Some(dir) = path.parent() {
            if cfg.key_file.is_relative() {
                cfg.key_file = dir.join(&cfg.key_file);
            }
            if let Some(t) = cfg.trace.as_mut().filter(|t| t.is_relative()) {
                *t = dir.join(&*t);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `TRIAD_NODE_ID`, `TRIAD_LISTEN`, `TRIAD_EXTERNAL`, `TRIAD_KEY_FILE`,
    /// `TRIAD_BACKEND`, `TRIAD_RESOLUTION_NANOS`, `TRIAD_TRACE` and
    /// `TRIAD_RATE_THRESHOLD` replace the file's values.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Some(v) = parse_env("TRIAD_NODE_ID")? {
            self.node_id = v;
        }
        if let Some(v) = parse_env("TRIAD_LISTEN")? {
            self.listen = v;
        }
        if let Some(v) = parse_env("TRIAD_EXTERNAL")? {
            self.external = v;
        }
        if let Some(v) = parse_env::<String>("TRIAD_KEY_FILE")? {
            self.key_file = v.into();
        }
        if let Some(v) = parse_env::<String>("TRIAD_BACKEND")? {
            self.backend = match v.as_str() {
                "real" => Backend::Real,
                "simulated" => Backend::Simulated,
                other => {
                    return Err(ConfigError::Env {
                        var: "TRIAD_BACKEND".into(),
                        message: format!("unknown backend {other:?}"),
                    })
                }
            };
        }
        if let Some(v) = parse_env("TRIAD_RESOLUTION_NANOS")? {
            self.resolution_nanos = v;
        }
        if let Some(v) = parse_env::<String>("TRIAD_TRACE")? {
            self.trace = Some(v.into());
        }
        if let Some(v) = parse_env("TRIAD_RATE_THRESHOLD")? {
            self.guard.rate_threshold = Some(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.node_id == 0 {
            return Err(invalid("node_id 0 is reserved for the external source"));
        }
        if self.peers.contains_key(&self.node_id) {
            return Err(invalid(format!(
                "node {} lists itself as a peer",
                self.node_id
            )));
        }
        if self.peers.contains_key(&0) {
            return Err(invalid("peer id 0 is reserved for the external source"));
        }
        if self.resolution_nanos == 0 {
            return Err(invalid("resolution_nanos must be positive"));
        }
        if !self.key_file.is_file() {
            return Err(invalid(format!(
                "key file {} is not readable",
                self.key_file.display()
            )));
        }
        self.calibration_params()
            .check_admissible()
            .map_err(|e| invalid(e.to_string()))?;
        let th = self.guard_config().rate_threshold;
        if !(0.0..0.5).contains(&th) {
            return Err(invalid("guard.rate_threshold must be in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn calibration_params(&self) -> CalibrationParams {
        let c = &self.calibration;
        let ms = 1_000_000;
        let mut p = match c.l_ms {
            Some(l) => CalibrationParams::from_l(l * ms),
            None => CalibrationParams::default(),
        };
        if let Some(v) = c.pp_ms {
            p.pp_nanos = v * ms;
        }
        if let Some(v) = c.rtt_max_ms {
            p.rtt_max_nanos = v * ms;
        }
        if let Some(v) = c.duration_ms {
            p.total_duration_nanos = v * ms;
        }
        if let Some(v) = c.echo_rounds {
            p.echo_rounds = v;
        }
        if let Some(v) = c.ops_window_ms {
            p.ops_window = Duration::from_millis(v);
        }
        if let Some(v) = c.max_spread_ppm {
            p.max_ratio_spread_ppm = v;
        }
        p
    }

    pub fn guard_config(&self) -> GuardConfig {
        let g = &self.guard;
        let mut c = GuardConfig::default();
        if let Some(v) = g.rate_threshold {
            c.rate_threshold = v;
        }
        if let Some(v) = g.memory_check {
            c.memory_check = v;
        }
        if let Some(v) = g.window_ms {
            c.window = Duration::from_millis(v);
        }
        if let Some(v) = g.period_ms {
            c.period_nanos = v * 1_000_000;
        }
        c
    }

    pub fn node_params(&self) -> NodeParams {
        let mut p = NodeParams::new(self.node_id, self.peers.keys().copied().collect());
        p.resolution = ResolutionUnit::new(self.resolution_nanos).expect("validated");
        p.calibration = self.calibration_params();
        p.guard = self.guard_config();
        p
    }
}

/// One simulator run, as read by `triad sim --spec`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// A bundled scenario; `schedule` events are added to its own.
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_nodes")]
    pub nodes: u32,
    pub duration_s: Option<f64>,
    /// Adversary schedule file, resolved relative to the spec.
    pub schedule: Option<PathBuf>,
    /// Directory receiving the trace, summary and plot data.
    pub output_dir: PathBuf,
    pub client_period_ms: Option<f64>,
    pub record_serves: Option<bool>,
}

fn default_nodes() -> u32 {
    3
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.into(),
            message: e.to_string(),
        })?;
        let mut spec = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(s) = &spec.schedule {
            if s.is_relative() {
                spec.schedule = Some(dir.join(s));
            }
        }
        if spec.output_dir.is_relative() {
            spec.output_dir = dir.join(&spec.output_dir);
        }
        if let Some(s) = &spec.schedule {
            if !s.is_file() {
                return Err(invalid(format!("schedule {} does not exist", s.display())));
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
node_id = 1
listen = "127.0.0.1:7101"
external = "127.0.0.1:7100"
key_file = "keys.txt"

[peers]
2 = "127.0.0.1:7102"
3 = "127.0.0.1:7103"

[calibration]
l_ms = 100
duration_ms = 1000

[guard]
rate_threshold = 0.2
"#;

    #[test]
    fn parses_sample() {
        let c = NodeConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.node_id, 1);
        assert_eq!(c.peers.len(), 2);
        assert_eq!(c.backend, Backend::Real);
        let p = c.node_params();
        assert_eq!(p.peers, vec![2, 3]);
        assert_eq!(p.calibration.pp_nanos, 80_000_000);
        assert_eq!(p.calibration.total_duration_nanos, 1_000_000_000);
        assert_eq!(p.guard.rate_threshold, 0.2);
    }

    #[test]
    fn missing_key_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("node.toml");
        std::fs::write(&path, SAMPLE).unwrap();
        let err = NodeConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("key file"), "{err}");
        std::fs::write(
            dir.path().join("keys.txt"),
            format!("default {}\n", "ab".repeat(32)),
        )
        .unwrap();
        assert!(NodeConfig::load(&path).is_ok());
    }

    #[test]
    fn self_as_peer_rejected() {
        let text = SAMPLE.replace("2 = ", "1 = ");
        let c = NodeConfig::parse(&text).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(NodeConfig::parse(&format!("{SAMPLE}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn spec_parses() {
        let s = ExperimentSpec::parse(
            "scenario = \"no-attack\"\nseed = 4\nduration_s = 30\noutput_dir = \"out\"\n",
        )
        .unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.duration_s, Some(30.0));
        assert_eq!(s.nodes, 3);
    }
}
